#include "carso/config.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace carso::config {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' needs a number, got '" + v + "'");
  }
}

long to_long(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    long l = std::stol(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return l;
  } catch (const std::exception&) {
    throw std::invalid_argument("config: key '" + key + "' needs an integer, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config: key '" + key + "' needs true/false, got '" + v + "'");
}

attacks::Family to_family(const std::string& key, const std::string& v) {
  if (v == "fgsm") return attacks::Family::fgsm;
  if (v == "pgd") return attacks::Family::pgd;
  if (v == "eot-pgd") return attacks::Family::eot_pgd;
  throw std::invalid_argument("config: key '" + key + "' needs fgsm|pgd|eot-pgd, got '" +
                              v + "'");
}

}  // namespace

std::map<std::string, std::string> parse_kv_text(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                  " is not key=value: '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config: empty key on line " + std::to_string(lineno));
    if (!kv.emplace(key, val).second)
      throw std::invalid_argument("config: duplicate key '" + key + "' on line " +
                                  std::to_string(lineno));
  }
  return kv;
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open '" + path + "'");
  std::ostringstream os;
  os << f.rdbuf();
  return parse_kv_text(os.str());
}

void RunConfig::validate() const {
  if (classes < 2) throw std::invalid_argument("config: classes < 2");
  if (width < 1 || fcrepr < 1 || fjoint < 1)
    throw std::invalid_argument("config: nonpositive model width");
  cls.validate();
  pur.validate();
  if (eval.n_samples < 1) throw std::invalid_argument("config: eval.n_samples < 1");
  if (eval.batch_size < 1) throw std::invalid_argument("config: eval.batch < 1");
  if (eval.attacked) eval.attack.validate();
}

RunConfig preset(const std::string& name) {
  RunConfig c;
  if (name == "desk") {
    // trains in minutes on one core: 28x28, eps 0.1
    c.width = 8;
    c.fcrepr = 64;
    c.fjoint = 16;
    c.cls.epochs = 4;
    c.cls.batch_size = 64;
    c.cls.lr = 2e-3;
    c.cls.attack = attacks::AttackSpec{attacks::Family::pgd, 0.1, 0.025, 7, 1, true, 0, 1};
    c.pur.epochs = 30;
    c.pur.batch_size = 64;
    c.pur.lr = LrSchedule{5, 5, 20, 1e-4, 3e-3, 1e-4};
    c.pur.beta_b0 = 5;
    c.pur.beta_b1 = 15;
    c.pur.frac = 0.5;
    c.pur.eps = 0.1;
    c.pur.attack = attacks::AttackSpec{attacks::Family::pgd, 0.1, 0.025, 7, 1, true, 0, 1};
    c.pur.recon_draws = 8;
    c.eval.n_samples = 8;
    c.eval.strategy = agg::Strategy::carso;
    c.eval.batch_size = 16;
    c.eval.attack = attacks::AttackSpec{attacks::Family::pgd, 0.1, 0.025, 40, 1, true, 0, 1};
  } else if (name == "paper-train") {
    // published training recipe
    const double eps = 8.0 / 255.0;
    c.width = 16;
    c.fcrepr = 512;
    c.fjoint = 128;
    c.cls.epochs = 200;
    c.cls.batch_size = 512;
    c.cls.lr = 1e-3;
    c.cls.attack = attacks::AttackSpec::paper_train_pgd(eps);
    c.pur.epochs = 200;
    c.pur.batch_size = 5120;
    c.pur.lr = LrSchedule{25, 25, 150, 5e-9, 0.064, 4.346e-4};
    c.pur.beta_b0 = 25;
    c.pur.beta_b1 = 34;
    c.pur.frac = 0.5;
    c.pur.eps = eps;
    c.pur.attack = attacks::AttackSpec::paper_train_pgd(eps);
    c.pur.optimizer = "radam-lookahead";
    c.pur.recon_draws = 8;
    c.eval.n_samples = 8;
    c.eval.strategy = agg::Strategy::carso;
    c.eval.attack = attacks::AttackSpec::paper_train_pgd(eps);
  } else if (name == "paper-eval-eot") {
    const double eps = 8.0 / 255.0;
    c = preset("paper-train");
    c.eval.attacked = true;
    c.eval.attack = attacks::AttackSpec::paper_eval_eot(eps);
  } else {
    throw std::invalid_argument("unknown preset '" + name +
                                "' (want desk|paper-train|paper-eval-eot)");
  }
  return c;
}

void apply_overrides(RunConfig& c, const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "seed") c.seed = static_cast<std::uint64_t>(to_long(k, v));
    else if (k == "dataset") c.dataset_dir = v;
    else if (k == "out") c.out_dir = v;
    else if (k == "classes") c.classes = static_cast<int>(to_long(k, v));
    else if (k == "width") c.width = static_cast<int>(to_long(k, v));
    else if (k == "fcrepr") c.fcrepr = static_cast<int>(to_long(k, v));
    else if (k == "fjoint") c.fjoint = static_cast<int>(to_long(k, v));

    else if (k == "cls.epochs") c.cls.epochs = static_cast<int>(to_long(k, v));
    else if (k == "cls.batch") c.cls.batch_size = static_cast<int>(to_long(k, v));
    else if (k == "cls.lr") c.cls.lr = to_double(k, v);
    else if (k == "cls.optimizer") c.cls.optimizer = v;
    else if (k == "cls.adversarial") c.cls.adversarial = to_bool(k, v);
    else if (k == "cls.attack.eps") c.cls.attack.epsilon = to_double(k, v);
    else if (k == "cls.attack.alpha") c.cls.attack.step_size = to_double(k, v);
    else if (k == "cls.attack.steps") c.cls.attack.steps = static_cast<int>(to_long(k, v));

    else if (k == "pur.epochs") c.pur.epochs = static_cast<int>(to_long(k, v));
    else if (k == "pur.batch") c.pur.batch_size = static_cast<int>(to_long(k, v));
    else if (k == "pur.optimizer") c.pur.optimizer = v;
    else if (k == "pur.recon_draws") c.pur.recon_draws = static_cast<int>(to_long(k, v));
    else if (k == "pur.frac") c.pur.frac = to_double(k, v);
    else if (k == "pur.attack_mix") c.pur.attack_mix = v;
    else if (k == "pur.eps") c.pur.eps = to_double(k, v);
    else if (k == "pur.attack.eps") c.pur.attack.epsilon = to_double(k, v);
    else if (k == "pur.attack.alpha") c.pur.attack.step_size = to_double(k, v);
    else if (k == "pur.attack.steps") c.pur.attack.steps = static_cast<int>(to_long(k, v));
    else if (k == "pur.beta_b0") c.pur.beta_b0 = static_cast<int>(to_long(k, v));
    else if (k == "pur.beta_b1") c.pur.beta_b1 = static_cast<int>(to_long(k, v));
    else if (k == "pur.lr.warmup") c.pur.lr.warmup = static_cast<int>(to_long(k, v));
    else if (k == "pur.lr.plateau") c.pur.lr.plateau = static_cast<int>(to_long(k, v));
    else if (k == "pur.lr.anneal") c.pur.lr.anneal = static_cast<int>(to_long(k, v));
    else if (k == "pur.lr.start") c.pur.lr.lr_start = to_double(k, v);
    else if (k == "pur.lr.peak") c.pur.lr.lr_peak = to_double(k, v);
    else if (k == "pur.lr.end") c.pur.lr.lr_end = to_double(k, v);

    else if (k == "eval.n_samples") c.eval.n_samples = static_cast<int>(to_long(k, v));
    else if (k == "eval.strategy") c.eval.strategy = agg::strategy_from_name(v);
    else if (k == "eval.limit") c.eval.limit = static_cast<int>(to_long(k, v));
    else if (k == "eval.batch") c.eval.batch_size = static_cast<int>(to_long(k, v));
    else if (k == "eval.attacked") c.eval.attacked = to_bool(k, v);
    else if (k == "eval.attack.family") c.eval.attack.family = to_family(k, v);
    else if (k == "eval.attack.eps") c.eval.attack.epsilon = to_double(k, v);
    else if (k == "eval.attack.alpha") c.eval.attack.step_size = to_double(k, v);
    else if (k == "eval.attack.steps") c.eval.attack.steps = static_cast<int>(to_long(k, v));
    else if (k == "eval.attack.eot") c.eval.attack.eot_iterations = static_cast<int>(to_long(k, v));

    else
      throw std::invalid_argument("config: unknown key '" + k + "'");
  }
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("csv: cannot write '" + path + "'");
  f << "metric,name,value\n";
  f.precision(10);
  for (const auto& r : rows) {
    if (r.metric.find(',') != std::string::npos || r.name.find(',') != std::string::npos)
      throw std::invalid_argument("csv: commas are not allowed in metric or name");
    f << r.metric << "," << r.name << "," << r.value << "\n";
  }
  if (!f) throw std::runtime_error("csv: short write to '" + path + "'");
}

std::string out_file(const std::string& dir, const std::string& name, bool force) {
  std::filesystem::create_directories(dir);
  const auto path = std::filesystem::path(dir) / name;
  if (std::filesystem::exists(path) && !force)
    throw std::runtime_error("output: '" + path.string() +
                             "' already exists (pass --force to overwrite)");
  return path.string();
}

}  // namespace carso::config
