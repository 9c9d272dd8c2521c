#include "pavt/attention.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pavt {

namespace {

constexpr double kMaskFill = -1e9;

// Stabilized softmax of one logit row under an additive binary mask. Masked
// entries underflow to exactly zero; a fully masked row becomes all zeros.
void masked_softmax_row(const double* s, const uint8_t* mask, int n, double* y) {
  bool any = false;
  double mx = 0.0;
  for (int j = 0; j < n; ++j) {
    if (mask && !mask[j]) continue;
    if (!any || s[j] > mx) mx = s[j];
    any = true;
  }
  if (!any) {
    for (int j = 0; j < n; ++j) y[j] = 0.0;
    return;
  }
  double z = 0.0;
  for (int j = 0; j < n; ++j) {
    const double v = s[j] + (mask && !mask[j] ? kMaskFill : 0.0);
    y[j] = std::exp(v - mx);
    z += y[j];
  }
  for (int j = 0; j < n; ++j) y[j] /= z;
}

}  // namespace

void TokenSequence::validate() const {
  if (!tokens.defined() || tokens.rank() != 2)
    throw ConfigError("token sequence: tokens must be a matrix");
  if (tokens.dim(0) != geom.tokens() || tokens.dim(1) != geom.D)
    throw ConfigError("token sequence: shape " + shape_str(tokens.shape()) +
                      " does not match geometry S=" + std::to_string(geom.S) +
                      " T=" + std::to_string(geom.T) + " D=" + std::to_string(geom.D));
}

Tensor attention_mix(const Tensor& Q, const Tensor& K, const Tensor& V,
                     const AttnPlan& plan, int heads, AttentionCapture* capture) {
  if (Q.rank() != 2 || K.shape() != Q.shape() || V.shape() != Q.shape())
    throw ConfigError("attention_mix: Q, K, V must share one matrix shape");
  const int N = Q.dim(0), D = Q.dim(1);
  if (heads < 1 || D % heads != 0)
    throw ConfigError("attention_mix: head count " + std::to_string(heads) +
                      " must divide width " + std::to_string(D));
  const int dh = D / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const bool two_stage = !plan.stage2.empty();

  const double* q = Q.data().data();
  const double* k = K.data().data();
  const double* v = V.data().data();

  // Per-unit softmax probabilities, laid out [head][query][key].
  auto run_stage = [&](const std::vector<AttnUnit>& units, const double* values,
                       std::vector<std::vector<double>>& probs,
                       std::vector<double>& out, bool out_preset) {
    if (!out_preset) out.assign(static_cast<size_t>(N) * D, 0.0);
    probs.resize(units.size());
    std::vector<double> srow;
    for (size_t u = 0; u < units.size(); ++u) {
      const auto& unit = units[u];
      const int nq = static_cast<int>(unit.q.size());
      const int nk = static_cast<int>(unit.k.size());
      const uint8_t* mask = unit.key_mask.empty() ? nullptr : unit.key_mask.data();
      probs[u].assign(static_cast<size_t>(heads) * nq * nk, 0.0);
      srow.resize(static_cast<size_t>(nk));
      for (int h = 0; h < heads; ++h) {
        const int hc = h * dh;
        for (int i = 0; i < nq; ++i) {
          const double* qi = q + static_cast<size_t>(unit.q[i]) * D + hc;
          for (int j = 0; j < nk; ++j) {
            const double* kj = k + static_cast<size_t>(unit.k[j]) * D + hc;
            double acc = 0.0;
            for (int d = 0; d < dh; ++d) acc += qi[d] * kj[d];
            srow[j] = acc * att_scale;
          }
          double* p = probs[u].data() + (static_cast<size_t>(h) * nq + i) * nk;
          masked_softmax_row(srow.data(), mask, nk, p);
          double* orow = out.data() + static_cast<size_t>(unit.q[i]) * D + hc;
          for (int d = 0; d < dh; ++d) orow[d] = 0.0;
          for (int j = 0; j < nk; ++j) {
            const double pj = p[j];
            if (pj == 0.0) continue;
            const double* vr = values + static_cast<size_t>(unit.k[j]) * D + hc;
            for (int d = 0; d < dh; ++d) orow[d] += pj * vr[d];
          }
        }
      }
    }
  };

  std::vector<std::vector<double>> probs1, probs2;
  std::vector<double> mixed;  // stage-1 result (two-stage only)
  std::vector<double> out;
  if (two_stage) {
    mixed = V.data();  // uncovered rows pass values through
    run_stage(plan.stage1, v, probs1, mixed, /*out_preset=*/true);
    run_stage(plan.stage2, mixed.data(), probs2, out, false);
  } else {
    run_stage(plan.stage1, v, probs1, out, false);
  }

  if (capture) {
    auto materialize = [&](const std::vector<AttnUnit>& units,
                           const std::vector<std::vector<double>>& probs) {
      for (int h = 0; h < heads; ++h) {
        Mat m(N, N);
        for (size_t u = 0; u < units.size(); ++u) {
          const auto& unit = units[u];
          const int nq = static_cast<int>(unit.q.size());
          const int nk = static_cast<int>(unit.k.size());
          for (int i = 0; i < nq; ++i)
            for (int j = 0; j < nk; ++j)
              m.at(unit.q[i], unit.k[j]) =
                  probs[u][(static_cast<size_t>(h) * nq + i) * nk + j];
        }
        capture->heads.push_back(std::move(m));
      }
    };
    materialize(plan.stage1, probs1);
    if (two_stage) materialize(plan.stage2, probs2);
  }

  auto qn = Q.node_ptr();
  auto kn = K.node_ptr();
  auto vn = V.node_ptr();
  auto backprop = [qn, kn, vn, plan, heads, dh, D, N, att_scale, two_stage,
                   probs1 = std::move(probs1), probs2 = std::move(probs2),
                   mixed = std::move(mixed)](TensorNode& o) {
    const bool need_qk = qn->requires_grad || kn->requires_grad;
    if (!need_qk && !vn->requires_grad) return;
    if (qn->requires_grad) qn->ensure_grad();
    if (kn->requires_grad) kn->ensure_grad();
    if (vn->requires_grad) vn->ensure_grad();
    const double* q = qn->value.data();
    const double* k = kn->value.data();

    // Pulls gradient through one stage; dvalues accumulates the gradient of
    // whatever the stage mixed (V, or the stage-1 output).
    auto stage_back = [&](const std::vector<AttnUnit>& units,
                          const std::vector<std::vector<double>>& probs,
                          const double* values, const std::vector<double>& dout,
                          std::vector<double>* dvalues) {
      std::vector<double> dp, ds;
      for (size_t u = 0; u < units.size(); ++u) {
        const auto& unit = units[u];
        const int nq = static_cast<int>(unit.q.size());
        const int nk = static_cast<int>(unit.k.size());
        dp.resize(static_cast<size_t>(nk));
        ds.resize(static_cast<size_t>(nk));
        for (int h = 0; h < heads; ++h) {
          const int hc = h * dh;
          for (int i = 0; i < nq; ++i) {
            const double* go = dout.data() + static_cast<size_t>(unit.q[i]) * D + hc;
            const double* p = probs[u].data() + (static_cast<size_t>(h) * nq + i) * nk;
            double dot = 0.0;
            for (int j = 0; j < nk; ++j) {
              const double* vr = values + static_cast<size_t>(unit.k[j]) * D + hc;
              double acc = 0.0;
              for (int d = 0; d < dh; ++d) acc += go[d] * vr[d];
              dp[j] = acc;
              dot += acc * p[j];
              if (dvalues && p[j] != 0.0) {
                double* dvr = dvalues->data() + static_cast<size_t>(unit.k[j]) * D + hc;
                for (int d = 0; d < dh; ++d) dvr[d] += p[j] * go[d];
              }
            }
            if (!need_qk) continue;
            for (int j = 0; j < nk; ++j) ds[j] = p[j] * (dp[j] - dot) * att_scale;
            const double* qi = q + static_cast<size_t>(unit.q[i]) * D + hc;
            for (int j = 0; j < nk; ++j) {
              if (ds[j] == 0.0) continue;
              const double* kj = k + static_cast<size_t>(unit.k[j]) * D + hc;
              if (qn->requires_grad) {
                double* gq = qn->grad.data() + static_cast<size_t>(unit.q[i]) * D + hc;
                for (int d = 0; d < dh; ++d) gq[d] += ds[j] * kj[d];
              }
              if (kn->requires_grad) {
                double* gk = kn->grad.data() + static_cast<size_t>(unit.k[j]) * D + hc;
                for (int d = 0; d < dh; ++d) gk[d] += ds[j] * qi[d];
              }
            }
          }
        }
      }
    };

    if (two_stage) {
      std::vector<double> dmixed(static_cast<size_t>(N) * D, 0.0);
      stage_back(plan.stage2, probs2, mixed.data(), o.grad, &dmixed);
      // Identity path for rows the temporal stage did not cover.
      if (vn->requires_grad) {
        std::vector<uint8_t> covered(static_cast<size_t>(N), 0);
        for (const auto& unit : plan.stage1)
          for (int r : unit.q) covered[static_cast<size_t>(r)] = 1;
        for (int r = 0; r < N; ++r)
          if (!covered[static_cast<size_t>(r)])
            for (int c = 0; c < D; ++c)
              vn->grad[static_cast<size_t>(r) * D + c] +=
                  dmixed[static_cast<size_t>(r) * D + c];
      }
      stage_back(plan.stage1, probs1, vn->value.data(), dmixed,
                 vn->requires_grad ? &vn->grad : nullptr);
    } else {
      stage_back(plan.stage1, probs1, vn->value.data(), o.grad,
                 vn->requires_grad ? &vn->grad : nullptr);
    }
  };

  return make_op({N, D}, std::move(out), {Q, K, V}, std::move(backprop));
}

Tensor masked_softmax(const Tensor& logits, const std::vector<uint8_t>& mask) {
  const int n = logits.shape().back();
  if (static_cast<int>(mask.size()) != n)
    throw ConfigError("masked_softmax: mask length " + std::to_string(mask.size()) +
                      " does not match last dimension " + std::to_string(n));
  const int rows = static_cast<int>(logits.size() / n);
  std::vector<double> out(logits.data().size());
  for (int r = 0; r < rows; ++r)
    masked_softmax_row(logits.data().data() + static_cast<size_t>(r) * n, mask.data(),
                       n, out.data() + static_cast<size_t>(r) * n);
  auto xn = logits.node_ptr();
  return make_op(logits.shape(), std::move(out), {logits}, [xn, rows, n](TensorNode& o) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (int r = 0; r < rows; ++r) {
      const size_t base = static_cast<size_t>(r) * n;
      double dot = 0.0;
      for (int j = 0; j < n; ++j) dot += o.grad[base + j] * o.value[base + j];
      for (int j = 0; j < n; ++j)
        xn->grad[base + j] += o.value[base + j] * (o.grad[base + j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// plans
// ---------------------------------------------------------------------------

namespace {

std::vector<int> all_rows(int n) {
  std::vector<int> r(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) r[static_cast<size_t>(i)] = i;
  return r;
}

std::vector<int> frame_rows(const TokenGeometry& g, int t) {
  std::vector<int> r(static_cast<size_t>(g.S));
  for (int s = 0; s < g.S; ++s) r[static_cast<size_t>(s)] = 1 + t * g.S + s;
  return r;
}

std::vector<int> track_rows(const TokenGeometry& g, int s) {
  std::vector<int> r(static_cast<size_t>(g.T));
  for (int t = 0; t < g.T; ++t) r[static_cast<size_t>(t)] = 1 + t * g.S + s;
  return r;
}

std::vector<int> pose_rows(const TokenGeometry& g, const PoseMap2D& p2d) {
  std::vector<int> r;
  for (int i = 0; i < g.S * g.T; ++i)
    if (p2d.at(i)) r.push_back(1 + i);
  return r;
}

AttnUnit class_unit(const std::vector<int>& keys) {
  AttnUnit u;
  u.q = {0};
  u.k = keys;
  return u;
}

std::vector<AttnUnit> temporal_units(const TokenGeometry& g) {
  std::vector<AttnUnit> units;
  units.reserve(static_cast<size_t>(g.S));
  for (int s = 0; s < g.S; ++s) {
    AttnUnit u;
    u.q = track_rows(g, s);
    u.k = u.q;
    units.push_back(std::move(u));
  }
  return units;
}

std::vector<AttnUnit> spatial_units(const TokenGeometry& g) {
  std::vector<AttnUnit> units;
  units.reserve(static_cast<size_t>(g.T) + 1);
  for (int t = 0; t < g.T; ++t) {
    AttnUnit u;
    u.q = frame_rows(g, t);
    u.k = u.q;
    units.push_back(std::move(u));
  }
  std::vector<int> keys = all_rows(g.tokens());
  units.push_back(class_unit(keys));
  return units;
}

void check_pose_map(const TokenGeometry& g, const PoseMap2D& p2d) {
  if (static_cast<int>(p2d.bits.size()) != g.S * g.T)
    throw ConfigError("pose map: " + std::to_string(p2d.bits.size()) +
                      " bits for S*T=" + std::to_string(g.S * g.T) + " tokens");
}

struct Projected {
  Tensor Q, K, V;
};

Projected project_qkv(const TokenSequence& seq, const AttentionParams& p) {
  seq.validate();
  if (p.heads < 1 || seq.geom.D % p.heads != 0)
    throw ConfigError("attention: head count " + std::to_string(p.heads) +
                      " must divide width " + std::to_string(seq.geom.D));
  Projected out;
  out.Q = add_rowvec(matmul(seq.tokens, p.Wq), p.bq);
  out.K = add_rowvec(matmul(seq.tokens, p.Wk), p.bk);
  out.V = add_rowvec(matmul(seq.tokens, p.Wv), p.bv);
  return out;
}

TokenSequence project_out(const TokenSequence& seq, const AttentionParams& p,
                          const Tensor& mixed) {
  TokenSequence out;
  out.geom = seq.geom;
  out.tokens = add_rowvec(matmul(mixed, p.Wo), p.bo);
  return out;
}

TokenSequence run_attention(const TokenSequence& seq, const AttentionParams& p,
                            const AttnPlan& plan, AttentionCapture* capture) {
  auto qkv = project_qkv(seq, p);
  Tensor mixed = attention_mix(qkv.Q, qkv.K, qkv.V, plan, p.heads, capture);
  return project_out(seq, p, mixed);
}

}  // namespace

TokenSequence joint_attention(const TokenSequence& seq, const AttentionParams& p,
                              AttentionCapture* capture) {
  AttnPlan plan;
  AttnUnit u;
  u.q = all_rows(seq.geom.tokens());
  u.k = u.q;
  plan.stage1.push_back(std::move(u));
  return run_attention(seq, p, plan, capture);
}

TokenSequence divided_attention(const TokenSequence& seq, const AttentionParams& p,
                                AttentionCapture* capture) {
  AttnPlan plan;
  plan.stage1 = temporal_units(seq.geom);
  plan.stage2 = spatial_units(seq.geom);
  return run_attention(seq, p, plan, capture);
}

TokenSequence spatial_attention(const TokenSequence& seq, const AttentionParams& p,
                                AttentionCapture* capture) {
  AttnPlan plan;
  plan.stage1 = spatial_units(seq.geom);
  return run_attention(seq, p, plan, capture);
}

TokenSequence temporal_attention(const TokenSequence& seq, const AttentionParams& p,
                                 AttentionCapture* capture) {
  AttnPlan plan;
  plan.stage1 = temporal_units(seq.geom);
  return run_attention(seq, p, plan, capture);
}

TokenSequence pa_joint_attention(const TokenSequence& seq, const PoseMap2D& p2d,
                                 const AttentionParams& p, bool class_active,
                                 AttentionCapture* capture) {
  seq.validate();
  check_pose_map(seq.geom, p2d);
  AttnPlan plan;
  std::vector<int> pose = pose_rows(seq.geom, p2d);
  if (!pose.empty()) {
    // Pose queries over all patch tokens, non-pose keys masked out additively.
    AttnUnit u;
    u.q = pose;
    u.k.resize(static_cast<size_t>(seq.geom.S * seq.geom.T));
    u.key_mask.resize(u.k.size());
    for (int i = 0; i < seq.geom.S * seq.geom.T; ++i) {
      u.k[static_cast<size_t>(i)] = 1 + i;
      u.key_mask[static_cast<size_t>(i)] = p2d.at(i);
    }
    plan.stage1.push_back(std::move(u));
  }
  if (class_active) {
    std::vector<int> keys = {0};
    keys.insert(keys.end(), pose.begin(), pose.end());
    plan.stage1.push_back(class_unit(keys));
  }
  return run_attention(seq, p, plan, capture);
}

TokenSequence pa_spatial_attention(const TokenSequence& seq, const PoseMap2D& p2d,
                                   const AttentionParams& p, bool class_active,
                                   AttentionCapture* capture) {
  seq.validate();
  check_pose_map(seq.geom, p2d);
  AttnPlan plan;
  for (int t = 0; t < seq.geom.T; ++t) {
    AttnUnit u;
    for (int s = 0; s < seq.geom.S; ++s)
      if (p2d.at(t * seq.geom.S + s)) u.q.push_back(1 + t * seq.geom.S + s);
    if (u.q.empty()) continue;  // frame without pose tokens: rows stay zero
    u.k.resize(static_cast<size_t>(seq.geom.S));
    u.key_mask.resize(u.k.size());
    for (int s = 0; s < seq.geom.S; ++s) {
      u.k[static_cast<size_t>(s)] = 1 + t * seq.geom.S + s;
      u.key_mask[static_cast<size_t>(s)] = p2d.at(t * seq.geom.S + s);
    }
    plan.stage1.push_back(std::move(u));
  }
  if (class_active) {
    std::vector<int> keys = {0};
    auto pose = pose_rows(seq.geom, p2d);
    keys.insert(keys.end(), pose.begin(), pose.end());
    plan.stage1.push_back(class_unit(keys));
  }
  return run_attention(seq, p, plan, capture);
}

// ---------------------------------------------------------------------------
// block
// ---------------------------------------------------------------------------

const char* to_string(PaabVariant v) {
  switch (v) {
    case PaabVariant::PaSa: return "pa_sa";
    case PaabVariant::FactorizedPaSta: return "factorized_pa_sta";
    case PaabVariant::JointPaSta: return "joint_pa_sta";
  }
  return "?";
}

PaabVariant paab_variant_from_string(const std::string& s) {
  if (s == "pa_sa") return PaabVariant::PaSa;
  if (s == "factorized_pa_sta") return PaabVariant::FactorizedPaSta;
  if (s == "joint_pa_sta") return PaabVariant::JointPaSta;
  throw ConfigError("unknown attention block variant '" + s +
                    "' (expected pa_sa, factorized_pa_sta or joint_pa_sta)");
}

Tensor ffn_forward(const Tensor& x, const FfnParams& p) {
  Tensor h = gelu(add_rowvec(matmul(x, p.W1), p.b1));
  return add_rowvec(matmul(h, p.W2), p.b2);
}

TokenSequence paab_forward(const TokenSequence& seq, const PoseMap2D& p2d,
                           PaabVariant variant, const PaabParams& params,
                           bool class_active, PaabCapture* capture) {
  seq.validate();
  AttentionCapture* ac = capture ? &capture->attention : nullptr;
  TokenSequence x = seq;

  if (variant == PaabVariant::FactorizedPaSta) {
    TokenSequence normed = x;
    normed.tokens = layernorm(x.tokens, params.ln_temporal.gamma, params.ln_temporal.beta);
    TokenSequence t = temporal_attention(normed, params.attn_temporal, ac);
    x.tokens = add(x.tokens, t.tokens);
  }

  TokenSequence normed = x;
  normed.tokens = layernorm(x.tokens, params.ln_attn.gamma, params.ln_attn.beta);
  TokenSequence a = (variant == PaabVariant::JointPaSta)
                        ? pa_joint_attention(normed, p2d, params.attn, class_active, ac)
                        : pa_spatial_attention(normed, p2d, params.attn, class_active, ac);
  x.tokens = add(x.tokens, a.tokens);

  if (capture) capture->pre_ffn = x.tokens.to_mat();
  Tensor f = ffn_forward(layernorm(x.tokens, params.ln_ffn.gamma, params.ln_ffn.beta),
                         params.ffn);
  x.tokens = add(x.tokens, f);
  if (capture) capture->post_ffn = x.tokens.to_mat();
  return x;
}

}  // namespace pavt
