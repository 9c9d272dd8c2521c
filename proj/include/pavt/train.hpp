#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pavt/backbone.hpp"
#include "pavt/synthdata.hpp"

namespace pavt {

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct CorruptionConfig {
  std::string mode = "none";  // none | noise | random_map
  int epsilon = 0;            // noise mode
  double density = -1.0;      // random_map mode; < 0 matches the true map

  void validate() const;
};

struct TrainConfig {
  std::string task = "classify";  // classify | align
  int epochs = 30;
  int batch = 8;
  OptimConfig optim;
  int workers = 1;
  double tcn_margin = 0.2;
  int tcn_window = 1;
  CorruptionConfig corruption;
  uint64_t seed = 0;
};

struct EpochRecord {
  int epoch = 0;
  double loss_primary = 0.0;
  double loss_paat = 0.0;
  double loss_total = 0.0;
  // classify: top1/mca; align: alignment error (lower is better)
  double eval_top1 = 0.0;
  double eval_mca = 0.0;
  double eval_alignment = 0.0;
};

struct TrainResult {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  double best_metric = 0.0;  // top1 for classify, -alignment for align
  std::vector<std::vector<double>> best_params;  // per entry, at best epoch
  EpochRecord final_record;
};

// Pose maps an experiment feeds the model for one sample, after the
// configured corruption.
struct PreparedMaps {
  PoseMap2D p2d;
  PoseMap3D p3d;
};

PreparedMaps prepare_maps(const VideoSample& sample, const ModelConfig& model_cfg,
                          const CorruptionConfig& corruption, uint64_t seed);

// Trains in place; one JSON line per epoch goes to `log` when given. Throws
// NumericError when the loss or a gradient goes non-finite.
TrainResult train_model(Model& model, const Dataset& data, const TrainConfig& cfg,
                        std::ostream* log = nullptr);

// Classification metrics of a model over one split, with the corruption
// policy applied to the pose maps the model consumes.
struct EvalMetrics {
  double top1 = 0.0;
  double mca = 0.0;
  int count = 0;
};
EvalMetrics evaluate_classifier(const Model& model, const Dataset& data,
                                const std::string& split,
                                const CorruptionConfig& corruption, uint64_t seed,
                                int workers);

// Mean alignment error over paired episodes in the split (model embeddings).
double evaluate_alignment(const Model& model, const Dataset& data,
                          const std::string& split,
                          const CorruptionConfig& corruption, uint64_t seed,
                          int workers);

// Restores the parameter buffers captured in TrainResult::best_params.
void load_params(Model& model, const std::vector<std::vector<double>>& params);

}  // namespace pavt
