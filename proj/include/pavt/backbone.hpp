#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "pavt/analysis.hpp"
#include "pavt/attention.hpp"
#include "pavt/posemap.hpp"
#include "pavt/tensor.hpp"

namespace pavt {

struct PaabPlacement {
  std::vector<int> layers = {};  // 1-based; the block consumes that layer's output
  std::string variant = "pa_sa";
  int count = 1;
  bool include_class = true;
};

struct PaatPlacement {
  std::vector<int> layers = {1};  // head at l reads the input of layer l
  int bottleneck = 0;             // 0 -> min(256, dim)
  double lambda = 1.6;
  std::string target = "p3d";     // "p3d" or "p2d"
};

struct ModelConfig {
  int tau = 8, H = 32, W = 32, C = 1;
  int patch = 8;
  int depth = 4;
  int dim = 64;
  int heads = 8;
  int classes = 6;
  int ffn_hidden = 0;  // 0 -> 4*dim
  int keypoints = 5;   // K: pose-map channels / auxiliary head width
  std::optional<PaabPlacement> paab;
  std::optional<PaatPlacement> paat;
  uint64_t seed = 0;

  void validate() const;
  int paat_bottleneck() const { return paat && paat->bottleneck > 0 ? paat->bottleneck : std::min(256, dim); }
  int ffn_width() const { return ffn_hidden > 0 ? ffn_hidden : 4 * dim; }
  TokenGeometry token_geometry() const;
  PatchGeometry patch_geometry() const;

  std::string to_json() const;
  static ModelConfig from_json_text(const std::string& text);
};

struct ParamEntry {
  std::string name;
  Shape shape;
  std::vector<double> data;
  AdamState opt;
};

class ParamStore {
 public:
  ParamEntry& add(const std::string& name, Shape shape);
  std::vector<ParamEntry>& entries() { return entries_; }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  int64_t total_size() const;
  // Flattened gradient layout helpers (entry order, row-major within).
  void add_flat(const std::vector<double>& flat_grads, double scale,
                std::vector<double>& accum) const;

 private:
  std::vector<ParamEntry> entries_;
};

enum class ForwardMode { Classify, EmbedFrames };

struct ForwardOptions {
  ForwardMode mode = ForwardMode::Classify;
  const PoseMap2D* pose = nullptr;  // required iff the config has a PAAB
  bool with_paat = false;           // also compute auxiliary predictions
  bool capture = false;             // fill snapshots
  Tape* tape = nullptr;             // null: inference, no gradients
};

struct ForwardResult {
  Tensor logits;                     // Classify mode
  Tensor class_feature;              // post-norm class token (retrieval)
  Tensor frame_embeddings;           // EmbedFrames mode, T x D
  std::vector<Tensor> paat_predictions;  // one (S*T) x K (or x 1) per head
  std::vector<LayerSnapshot> snapshots;
  std::vector<Tensor> param_leaves;  // tracked leaves, aligned with ParamStore
};

class Model {
 public:
  explicit Model(ModelConfig cfg);

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  ForwardResult forward(const VideoTensor& video, const ForwardOptions& opt) const;

  // Token matrix right after patch embedding, positions and the class token
  // (row 0); diagnostic hook, no gradients.
  Mat embed_tokens(const VideoTensor& video) const;

 private:
  ModelConfig cfg_;
  ParamStore params_;
};

// Patch extraction: one row per patch token (time-major), pixel order
// (dy, dx, channel) within the patch.
Mat extract_patches(const VideoTensor& video, int patch);

// ---- losses ----------------------------------------------------------------

struct LossReport {
  double primary = 0.0;
  double paat = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

LossReport total_loss(double primary, double paat, double lambda);

Tensor classify_loss(const Tensor& logits, int label);
Tensor paat_loss(const Tensor& pred, const PoseMap3D& target);
Tensor paat_loss_2d(const Tensor& pred, const PoseMap2D& target);

// Triplet hinge over synchronized views: anchor A[t], positive B[t], negative
// A[negatives[t]] with |t - negatives[t]| > window; negatives[t] < 0 skips the
// anchor. mean over valid anchors of max(0, d(a,p)^2 - d(a,n)^2 + margin).
Tensor tcn_loss(const Tensor& emb_a, const Tensor& emb_b, double margin,
                const std::vector<int>& negatives);

// Uniform valid negative per anchor (-1 where none exists); throws if no
// anchor has a valid negative.
std::vector<int> sample_tcn_negatives(int T, int window, std::mt19937_64& rng);

// ---- checkpoint ------------------------------------------------------------
// Layout: magic "PAVT", u16 format version, u32 config-JSON length, config
// JSON, then every parameter tensor in declaration order as (u32 rank,
// u32 dims..., little-endian f64 data).
void checkpoint_save(const Model& model, const std::filesystem::path& path);
Model checkpoint_load(const std::filesystem::path& path);

}  // namespace pavt
