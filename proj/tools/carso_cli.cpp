#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "carso/config.hpp"
#include "carso/data.hpp"
#include "carso/pipeline.hpp"
#include "carso/train.hpp"

namespace fs = std::filesystem;
using namespace carso;

namespace {

struct CommonArgs {
  std::string config_path;
  std::string preset = "desk";
  std::string dataset_dir;
  std::string out_dir;
  long seed = -1;
  bool force = false;
  std::vector<std::string> overrides;  // extra key=value pairs
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_path, "flat key=value config file");
  cmd->add_option("--preset", a.preset, "desk | paper-train | paper-eval-eot")
      ->check(CLI::IsMember({"desk", "paper-train", "paper-eval-eot"}));
  cmd->add_option("--dataset", a.dataset_dir, "directory with IDX train/t10k pairs");
  cmd->add_option("--out", a.out_dir, "output directory (append-only)");
  cmd->add_option("--seed", a.seed, "run seed");
  cmd->add_flag("--force", a.force, "allow overwriting existing output files");
  cmd->add_option("--set", a.overrides, "extra key=value overrides")->take_all();
}

config::RunConfig resolve(const CommonArgs& a) {
  auto cfg = config::preset(a.preset);
  if (!a.config_path.empty()) config::apply_overrides(cfg, config::parse_kv_file(a.config_path));
  std::map<std::string, std::string> flags;
  for (const auto& kv : a.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("--set expects key=value, got '" + kv + "'");
    flags[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  config::apply_overrides(cfg, flags);
  if (!a.dataset_dir.empty()) cfg.dataset_dir = a.dataset_dir;
  if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
  if (a.seed >= 0) cfg.seed = static_cast<std::uint64_t>(a.seed);
  cfg.validate();
  return cfg;
}

// loads the train or test split; synthesizes the dataset on first use when
// the directory holds no IDX files
data::Dataset load_split(const config::RunConfig& cfg, bool train_split) {
  if (cfg.dataset_dir.empty()) throw std::runtime_error("no --dataset directory given");
  const std::string stem = train_split ? "train" : "t10k";
  const std::string img = cfg.dataset_dir + "/" + stem + "-images.idx3-ubyte";
  const std::string lab = cfg.dataset_dir + "/" + stem + "-labels.idx1-ubyte";
  if (!fs::exists(img)) {
    std::cerr << "dataset: no IDX files under " << cfg.dataset_dir
              << ", writing the synthetic split (seed " << cfg.seed << ")\n";
    data::write_synthetic_idx(cfg.dataset_dir, 512, 128, cfg.seed);
  }
  return data::load_idx(img, lab, cfg.classes);
}

void dump_metrics(const config::RunConfig& cfg, const std::string& name,
                  const std::vector<config::MetricRow>& rows, bool force) {
  const auto path = config::out_file(cfg.out_dir, name, force);
  config::write_metrics_csv(path, rows);
  std::cout << "wrote " << path << "\n";
}

int cmd_train_classifier(const CommonArgs& a) {
  auto cfg = resolve(a);
  auto ds = load_split(cfg, true);
  auto stats = data::compute_stats(ds);
  auto cls = make_classifier<float>(
      make_desk_classifier_spec(ds.images.shape[1], ds.images.shape[2],
                                ds.images.shape[3], cfg.classes, cfg.width),
      Rng(cfg.seed, 1));
  auto report = train::train_classifier_adversarial(cls, ds, cfg.cls,
                                                    Rng(cfg.seed, 2), &std::cout);
  const auto ckpt_path = config::out_file(cfg.out_dir, "classifier.ckpt", a.force);
  train::save_classifier(ckpt_path, cls, stats, cfg.cls.epochs, Rng(cfg.seed, 2));
  std::cout << "wrote " << ckpt_path << "\n";

  std::vector<config::MetricRow> rows;
  for (const auto& e : report.epochs)
    rows.push_back({"train_loss", "epoch_" + std::to_string(e.epoch), e.loss});
  rows.push_back({"train_loss", "final", report.final_loss});
  dump_metrics(cfg, "classifier_train.csv", rows, a.force);
  return 0;
}

int cmd_train_purifier(const CommonArgs& a, const std::string& classifier_path) {
  auto cfg = resolve(a);
  auto ds = load_split(cfg, true);
  DatasetStats stats;
  auto cls = train::load_classifier(classifier_path, &stats);
  cls.store.freeze();
  auto pur = make_purifier<float>(make_purifier_spec(cls.spec, cfg.fcrepr, cfg.fjoint),
                                  Rng(cfg.seed, 3));
  auto report = train::train_purifier(pur, cls, ds, stats, cfg.pur,
                                      Rng(cfg.seed, 4), &std::cout);
  const auto ckpt_path = config::out_file(cfg.out_dir, "purifier.ckpt", a.force);
  train::save_purifier(ckpt_path, pur, stats, cfg.pur.epochs, Rng(cfg.seed, 4),
                       cls.store.content_hash());
  std::cout << "wrote " << ckpt_path << "\n";

  std::vector<config::MetricRow> rows;
  for (const auto& e : report.epochs) {
    rows.push_back({"train_loss", "epoch_" + std::to_string(e.epoch), e.loss});
    rows.push_back({"train_recon", "epoch_" + std::to_string(e.epoch), e.recon});
    rows.push_back({"train_kl", "epoch_" + std::to_string(e.epoch), e.kl});
  }
  rows.push_back({"train_loss", "final", report.final_loss});
  dump_metrics(cfg, "purifier_train.csv", rows, a.force);
  return 0;
}

struct LoadedModels {
  Classifier<float> cls;
  Purifier<float> pur;
  bool has_pur = false;
  DatasetStats stats;
};

LoadedModels load_models(const std::string& classifier_path,
                         const std::string& purifier_path) {
  LoadedModels m{Classifier<float>{}, Purifier<float>{}, false, {}};
  m.cls = train::load_classifier(classifier_path, &m.stats);
  if (!purifier_path.empty()) {
    std::uint64_t want = 0;
    m.pur = train::load_purifier(purifier_path, nullptr, nullptr, &want);
    m.has_pur = true;
    if (want != m.cls.store.content_hash())
      std::cerr << "warning: purifier was trained against a different classifier\n";
  }
  return m;
}

std::vector<config::MetricRow> eval_rows(const std::string& tag,
                                         const pipeline::EvalResult& r) {
  std::vector<config::MetricRow> rows;
  rows.push_back({"accuracy", tag + "_clean", r.clean_accuracy()});
  rows.push_back({"accuracy", tag + "_robust", r.robust_accuracy()});
  rows.push_back({"count", tag + "_n", static_cast<double>(r.n)});
  rows.push_back({"seconds", tag + "_wall", r.wall_seconds});
  for (std::size_t c = 0; c < r.per_class_total.size(); ++c)
    if (r.per_class_total[c] > 0)
      rows.push_back({"class_accuracy", tag + "_class_" + std::to_string(c),
                      static_cast<double>(r.per_class_robust_correct[c]) /
                          static_cast<double>(r.per_class_total[c])});
  return rows;
}

int cmd_eval(const CommonArgs& a, const std::string& classifier_path,
             const std::string& purifier_path) {
  auto cfg = resolve(a);
  auto ds = load_split(cfg, false);
  auto m = load_models(classifier_path, purifier_path);
  auto o = cfg.eval;
  o.seed = cfg.seed;
  o.use_pipeline = m.has_pur;
  auto res = pipeline::evaluate(m.cls, m.has_pur ? &m.pur : nullptr, m.stats, ds, o);
  std::cout << "attack: " << res.attack_echo << "\n"
            << "clean accuracy:  " << res.clean_accuracy() << "\n"
            << "robust accuracy: " << res.robust_accuracy() << " (" << res.n
            << " examples, " << res.wall_seconds << "s)\n";
  dump_metrics(cfg, "eval.csv", eval_rows(m.has_pur ? "pipeline" : "classifier", res),
               a.force);
  return 0;
}

int cmd_attack_sweep(const CommonArgs& a, const std::string& classifier_path,
                     const std::string& purifier_path, std::vector<double> eps_list) {
  auto cfg = resolve(a);
  auto ds = load_split(cfg, false);
  auto m = load_models(classifier_path, purifier_path);
  if (eps_list.empty()) eps_list = {0.025, 0.05, 0.1};
  std::vector<config::MetricRow> rows;
  for (double eps : eps_list) {
    auto o = cfg.eval;
    o.seed = cfg.seed;
    o.use_pipeline = m.has_pur;
    o.attacked = eps > 0;
    o.attack.epsilon = eps;
    o.attack.step_size = std::min(o.attack.step_size, eps > 0 ? eps : 1.0);
    auto res = pipeline::evaluate(m.cls, m.has_pur ? &m.pur : nullptr, m.stats, ds, o);
    std::cout << "eps " << eps << ": robust accuracy " << res.robust_accuracy() << "\n";
    std::ostringstream name;
    name << "eps_" << eps;
    rows.push_back({"robust_accuracy", name.str(), res.robust_accuracy()});
  }
  dump_metrics(cfg, "attack_sweep.csv", rows, a.force);
  return 0;
}

int cmd_takeover_probe(const CommonArgs& a, const std::string& classifier_path,
                       const std::string& purifier_path, const std::string& mode_name) {
  auto cfg = resolve(a);
  const auto mode = mode_name == "inflate" ? agg::ProbeMode::inflate
                                           : agg::ProbeMode::deflate;
  agg::LogitMatrix L;
  if (!classifier_path.empty() && !purifier_path.empty()) {
    auto ds = load_split(cfg, false);
    auto m = load_models(classifier_path, purifier_path);
    Shape s = ds.images.shape;
    s[0] = 1;
    TensorData<float> x(s);
    std::copy(ds.images.v.begin(), ds.images.v.begin() + x.size(), x.v.begin());
    auto rp = pipeline::robust_predict(m.cls, m.pur, m.stats, x, cfg.eval.n_samples,
                                       cfg.eval.strategy, Rng(cfg.seed, 0xF00D));
    L = rp[0].logits;
  } else {
    // synthetic consensus matrix: every draw votes for class 0
    L.n_samples = cfg.eval.n_samples;
    L.n_classes = cfg.classes;
    L.l.assign(static_cast<std::size_t>(L.n_samples) * L.n_classes, -1.0);
    for (int d = 0; d < L.n_samples; ++d) L.at(d, 0) = 2.0;
  }
  const int target_class = mode == agg::ProbeMode::deflate
                               ? agg::aggregate_carso(L).chosen_class
                               : (agg::aggregate_carso(L).chosen_class + 1) % L.n_classes;
  auto reports = agg::takeover_probe(L, 0, target_class, mode,
                                     {agg::Strategy::carso, agg::Strategy::logit_mean,
                                      agg::Strategy::prob_mean});
  std::vector<config::MetricRow> rows;
  for (const auto& rep : reports) {
    const double thr = rep.flip_threshold;
    std::cout << agg::strategy_name(rep.strategy) << ": "
              << (std::isnan(thr) ? "never flips" : "flips at " + std::to_string(thr))
              << "\n";
    rows.push_back({"flip_threshold", agg::strategy_name(rep.strategy), thr});
  }
  dump_metrics(cfg, "takeover_probe.csv", rows, a.force);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarial purification toolkit"};
  app.require_subcommand(1);

  CommonArgs a_tc, a_tp, a_ev, a_sw, a_pr;
  std::string cls_path, pur_path, sweep_cls, sweep_pur, probe_cls, probe_pur;
  std::string eval_cls, eval_pur, probe_mode = "deflate";
  std::vector<double> eps_list;

  auto* tc = app.add_subcommand("train-classifier", "adversarially train the classifier");
  add_common(tc, a_tc);

  auto* tp = app.add_subcommand("train-purifier", "train the purifier against a frozen classifier");
  add_common(tp, a_tp);
  tp->add_option("--classifier", cls_path, "classifier checkpoint")->required();

  auto* ev = app.add_subcommand("eval", "clean/robust accuracy on the test split");
  add_common(ev, a_ev);
  ev->add_option("--classifier", eval_cls, "classifier checkpoint")->required();
  ev->add_option("--purifier", eval_pur, "purifier checkpoint (omit for bare classifier)");

  auto* sw = app.add_subcommand("attack-sweep", "robust accuracy across budgets");
  add_common(sw, a_sw);
  sw->add_option("--classifier", sweep_cls, "classifier checkpoint")->required();
  sw->add_option("--purifier", sweep_pur, "purifier checkpoint");
  sw->add_option("--eps", eps_list, "epsilon values to sweep")->take_all();

  auto* pr = app.add_subcommand("takeover-probe", "single-logit takeover sensitivity of the aggregations");
  add_common(pr, a_pr);
  pr->add_option("--classifier", probe_cls, "classifier checkpoint");
  pr->add_option("--purifier", probe_pur, "purifier checkpoint");
  pr->add_option("--mode", probe_mode, "deflate | inflate")
      ->check(CLI::IsMember({"deflate", "inflate"}));

  CLI11_PARSE(app, argc, argv);

  try {
    if (tc->parsed()) return cmd_train_classifier(a_tc);
    if (tp->parsed()) return cmd_train_purifier(a_tp, cls_path);
    if (ev->parsed()) return cmd_eval(a_ev, eval_cls, eval_pur);
    if (sw->parsed()) return cmd_attack_sweep(a_sw, sweep_cls, sweep_pur, eps_list);
    if (pr->parsed()) return cmd_takeover_probe(a_pr, probe_cls, probe_pur, probe_mode);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
