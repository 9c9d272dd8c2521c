#pragma once

#include <cstdint>
#include <vector>

#include "pavt/posemap.hpp"
#include "pavt/tensor.hpp"

namespace pavt {

struct TokenGeometry {
  int S = 0, T = 0, D = 0;
  int tokens() const { return 1 + S * T; }  // class token at index 0
};

// Latent tokens for one clip: row 0 is the class token, row 1 + t*S + s the
// patch token at spatial position s of temporal token t.
struct TokenSequence {
  Tensor tokens;
  TokenGeometry geom;

  void validate() const;
};

struct AttentionParams {
  Tensor Wq, bq, Wk, bk, Wv, bv, Wo, bo;
  int heads = 8;
};

struct LayerNormParams {
  Tensor gamma, beta;
};

struct FfnParams {
  Tensor W1, b1, W2, b2;
};

// Detached per-head attention matrices in the full (1+ST) x (1+ST) layout.
// Rows of inactive or fully masked queries are exactly zero. Two-stage
// attention contributes the temporal-stage matrices first.
struct AttentionCapture {
  std::vector<Mat> heads;
};

// One attention unit: each query row attends over the listed key rows, with
// an optional additive mask (key_mask[j] == 0 contributes -1e9 to the logit).
struct AttnUnit {
  std::vector<int> q;
  std::vector<int> k;
  std::vector<uint8_t> key_mask;  // empty = all keys active
};

// Block-structured multi-head attention. Units within a stage must not share
// query rows. Rows not covered by any unit of the final stage produce a zero
// output row. When stage2 is nonempty the stage1 units mix the values first
// (uncovered rows pass values through) and stage2 attends over the mixed
// values with logits still computed from Q and K.
struct AttnPlan {
  std::vector<AttnUnit> stage1;
  std::vector<AttnUnit> stage2;
};

Tensor attention_mix(const Tensor& Q, const Tensor& K, const Tensor& V,
                     const AttnPlan& plan, int heads,
                     AttentionCapture* capture = nullptr);

// Softmax over the last dimension restricted to mask==1 entries, realized by
// adding -1e9 to masked logits; a fully masked row yields an all-zero row.
Tensor masked_softmax(const Tensor& logits, const std::vector<uint8_t>& mask);

// ---- attention variants ----------------------------------------------------
// All include the QKV and output projections but no residual or norm; block
// assembly lives in paab_forward and the backbone layers.

TokenSequence joint_attention(const TokenSequence& seq, const AttentionParams& p,
                              AttentionCapture* capture = nullptr);
// Temporal mixing then spatial attention, both built from one set of Q,K,V.
// With T == 1 the temporal stage passes values through unchanged, so the
// output equals spatial_attention on the same input.
TokenSequence divided_attention(const TokenSequence& seq, const AttentionParams& p,
                                AttentionCapture* capture = nullptr);
TokenSequence spatial_attention(const TokenSequence& seq, const AttentionParams& p,
                                AttentionCapture* capture = nullptr);
TokenSequence temporal_attention(const TokenSequence& seq, const AttentionParams& p,
                                 AttentionCapture* capture = nullptr);

// Pose-aware variants. Pose-token queries attend over pose tokens only;
// non-pose queries produce zero output rows (the block residual then passes
// them through). The class token, when active, attends over itself plus the
// pose tokens; when inactive it gets a zero row like any non-pose query.
TokenSequence pa_joint_attention(const TokenSequence& seq, const PoseMap2D& p2d,
                                 const AttentionParams& p, bool class_active = true,
                                 AttentionCapture* capture = nullptr);
TokenSequence pa_spatial_attention(const TokenSequence& seq, const PoseMap2D& p2d,
                                   const AttentionParams& p, bool class_active = true,
                                   AttentionCapture* capture = nullptr);

// ---- pose-aware block ------------------------------------------------------

enum class PaabVariant { PaSa, FactorizedPaSta, JointPaSta };

const char* to_string(PaabVariant v);
PaabVariant paab_variant_from_string(const std::string& s);

struct PaabParams {
  LayerNormParams ln_attn;
  AttentionParams attn;
  // Factorized variant only: unmasked temporal attention with its own norm.
  LayerNormParams ln_temporal;
  AttentionParams attn_temporal;
  LayerNormParams ln_ffn;
  FfnParams ffn;
};

struct PaabCapture {
  AttentionCapture attention;
  Mat pre_ffn, post_ffn;
};

// Pre-norm residual block: x + PA-attention(norm(x)), then + FFN(norm(.)).
// The FFN applies to every token; the factorized variant first applies
// unmasked temporal attention with its own residual.
TokenSequence paab_forward(const TokenSequence& seq, const PoseMap2D& p2d,
                           PaabVariant variant, const PaabParams& params,
                           bool class_active = true, PaabCapture* capture = nullptr);

// Feed-forward: gelu(x W1 + b1) W2 + b2.
Tensor ffn_forward(const Tensor& x, const FfnParams& p);

}  // namespace pavt
