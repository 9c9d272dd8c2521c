#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pavt/analysis.hpp"
#include "pavt/train.hpp"

namespace pavt {

// One experiment = dataset (path or inline generator) + model + training
// recipe, version-stamped, with strict field validation.
struct ExperimentConfig {
  int version = 1;
  uint64_t seed = 0;
  std::string out;
  std::string dataset;  // directory; exclusive with generator
  std::optional<GeneratorSpec> generator;
  ModelConfig model;
  TrainConfig train;
  // Optional sweep over one axis; empty values mean the default grid.
  std::optional<std::string> sweep_parameter;
  std::string sweep_values_json = "[]";

  void validate() const;
  std::string to_json() const;
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig from_file(const std::filesystem::path& path);
};

uint64_t config_hash(const std::string& canonical_json);

struct TrainRunSummary {
  std::filesystem::path out_dir;
  int best_epoch = 0;
  double best_metric = 0.0;
  EpochRecord final_record;
};

// Trains one resolved configuration into out_dir: writes config.json,
// metrics.jsonl and checkpoint.pavt (parameters of the best epoch).
TrainRunSummary train_run(const ExperimentConfig& cfg,
                          const std::filesystem::path& out_dir, std::ostream& msg);

// ---- CLI commands ----------------------------------------------------------

void cmd_generate(const std::filesystem::path& spec_file,
                  const std::filesystem::path& out_dir, bool force,
                  std::optional<uint64_t> seed, std::ostream& msg);

// Runs the config (sweep cells when configured). Returns the summaries, one
// per run.
std::vector<TrainRunSummary> cmd_train(const std::filesystem::path& config_file,
                                       std::optional<std::filesystem::path> out_dir,
                                       std::optional<uint64_t> seed,
                                       std::optional<int> workers, std::ostream& msg);

MetricTable cmd_eval(const std::filesystem::path& checkpoint,
                     const std::filesystem::path& dataset_dir,
                     const std::string& task, const std::string& split, int workers,
                     std::ostream& msg);

MetricTable cmd_analyze(const std::filesystem::path& checkpoint,
                        const std::filesystem::path& dataset_dir,
                        const std::string& which, const std::string& split,
                        int max_samples, DistanceKind kind,
                        const std::optional<std::filesystem::path>& out_dir,
                        std::ostream& msg);

double cmd_align(const std::optional<std::filesystem::path>& checkpoint,
                 const std::filesystem::path& dataset_dir, const std::string& split,
                 bool oracle_keypoints, int workers, std::ostream& msg);

MetricTable cmd_retrieve(const std::filesystem::path& checkpoint,
                         const std::filesystem::path& dataset_dir,
                         const std::string& gallery_split,
                         const std::string& query_split, const std::vector<int>& ks,
                         int workers, std::ostream& msg);

}  // namespace pavt
