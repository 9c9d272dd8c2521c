#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "pavt/common.hpp"

namespace pavt {

// Detached view of one transformer block after a forward pass.
struct LayerSnapshot {
  int layer = 0;           // 1-based backbone layer index
  std::string kind;        // "backbone" or "paab"
  Mat tokens;              // block output, (1+S*T) x D
  std::vector<Mat> attention;  // per head (two-stage attention: both stages)
  Mat pre_ffn, post_ffn;
  std::vector<uint8_t> pose_bits;  // length S*T; empty when no poses were used
};

enum class DistanceKind { EuclideanNormalized, Cosine };

DistanceKind distance_kind_from_string(const std::string& s);
const char* to_string(DistanceKind k);

// Mean pairwise feature distance between pose and non-pose patch tokens.
// Empty when the map is degenerate (no pose or no non-pose token).
std::optional<double> pose_nonpose_distance(const LayerSnapshot& snap,
                                            DistanceKind kind = DistanceKind::EuclideanNormalized);

// Mean pairwise distance among pose tokens; empty with fewer than two.
std::optional<double> pose_pose_distance(const LayerSnapshot& snap,
                                         DistanceKind kind = DistanceKind::EuclideanNormalized);

// Fraction of attention entries per bin. bin_edges must start at 0, end at 1
// and increase; rows that are exactly all-zero (masked-out queries) are
// excluded from the population.
std::vector<double> attention_histogram(const LayerSnapshot& snap,
                                        const std::vector<double>& bin_edges);

// Mean per-token distance between features entering and leaving the FFN.
double ffn_displacement(const Mat& before, const Mat& after);

struct LabeledFeatures {
  Mat features;             // one row per item
  std::vector<int> labels;
  std::vector<int> ids;     // optional; used to exclude a query's own entry
};

// Recall@k under cosine similarity. A gallery item sharing the query's id is
// excluded; nearest-neighbor ties break toward the lowest gallery index.
// k larger than the candidate pool is clamped.
double recall_at_k(const LabeledFeatures& gallery, const LabeledFeatures& queries,
                   int k);

// Symmetric normalized nearest-neighbor index offset between two embedding
// sequences of equal length T >= 2; always in [0,1], 0 iff every frame's
// nearest neighbor is its true correspondent (both directions).
double alignment_error(const Mat& emb_a, const Mat& emb_b);

double top1_accuracy(const std::vector<int>& preds, const std::vector<int>& labels);

// Unweighted mean of per-class accuracies over the classes present in labels.
double mean_class_accuracy(const std::vector<int>& preds,
                           const std::vector<int>& labels);

// Named metric series plus reproducibility metadata, serializable as JSON and
// flat CSV (one row per metric x index).
struct MetricTable {
  std::map<std::string, std::vector<double>> values;
  std::map<std::string, std::string> metadata;

  std::string to_json() const;
  std::string to_csv() const;
};

}  // namespace pavt
