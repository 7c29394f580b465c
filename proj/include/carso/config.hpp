#pragma once

#include <map>
#include <string>
#include <vector>

#include "carso/aggregation.hpp"
#include "carso/pipeline.hpp"
#include "carso/train.hpp"

namespace carso::config {

// flat key=value files: one pair per line, '#' comments, whitespace trimmed
std::map<std::string, std::string> parse_kv_text(const std::string& text);
std::map<std::string, std::string> parse_kv_file(const std::string& path);

struct RunConfig {
  std::uint64_t seed = 0;
  std::string dataset_dir;
  std::string out_dir = "out";
  int classes = 10;

  // model widths
  int width = 16;
  int fcrepr = 128;
  int fjoint = 32;

  train::ClassifierTrainConfig cls;
  train::PurifierTrainConfig pur;
  pipeline::EvalOptions eval;

  void validate() const;
};

// defaults for a named preset: "desk", "paper-train", "paper-eval-eot"
RunConfig preset(const std::string& name);

// applies key=value pairs on top of a config; unknown keys are an error
void apply_overrides(RunConfig& cfg, const std::map<std::string, std::string>& kv);

// one row per metric: "metric,name,value" with a header line
struct MetricRow {
  std::string metric;
  std::string name;
  double value;
};
void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);

// creates dir if needed; returns dir/name, refusing to overwrite an existing
// file unless force is set (output directories are append-only)
std::string out_file(const std::string& dir, const std::string& name, bool force);

}  // namespace carso::config
