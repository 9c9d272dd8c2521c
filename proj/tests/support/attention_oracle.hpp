#pragma once

// Extract-attend-scatter oracle: plain-loop multi-head attention over explicit
// query/key index sets. Masked keys are handled by deletion (extract the key
// subset, softmax, scatter back), independent of the additive-mask
// implementation under test.

#include <cmath>
#include <utility>
#include <vector>

#include "pavt/attention.hpp"
#include "pavt/common.hpp"

namespace pavt::testing {

struct RefAttnParams {
  Mat Wq, Wk, Wv, Wo;
  std::vector<double> bq, bk, bv, bo;
  int heads = 1;
};

inline RefAttnParams ref_params(const AttentionParams& p) {
  RefAttnParams r;
  r.Wq = p.Wq.to_mat();
  r.Wk = p.Wk.to_mat();
  r.Wv = p.Wv.to_mat();
  r.Wo = p.Wo.to_mat();
  r.bq = p.bq.data();
  r.bk = p.bk.data();
  r.bv = p.bv.data();
  r.bo = p.bo.data();
  r.heads = p.heads;
  return r;
}

inline Mat ref_project(const Mat& x, const Mat& w, const std::vector<double>& b) {
  Mat out(x.rows, w.cols);
  for (int i = 0; i < x.rows; ++i)
    for (int j = 0; j < w.cols; ++j) {
      double acc = b[static_cast<size_t>(j)];
      for (int k = 0; k < x.cols; ++k) acc += x.at(i, k) * w.at(k, j);
      out.at(i, j) = acc;
    }
  return out;
}

// One attention unit per (query set, key set); uncovered rows stay zero.
using RefUnit = std::pair<std::vector<int>, std::vector<int>>;

inline Mat oracle_mix(const Mat& Q, const Mat& K, const Mat& V,
                      const std::vector<RefUnit>& units, int heads) {
  const int N = Q.rows, D = Q.cols, dh = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  Mat out(N, D);
  for (const auto& [qs, ks] : units)
    for (int h = 0; h < heads; ++h) {
      const int hc = h * dh;
      for (int qi : qs) {
        std::vector<double> logits;
        logits.reserve(ks.size());
        for (int kj : ks) {
          double acc = 0.0;
          for (int d = 0; d < dh; ++d) acc += Q.at(qi, hc + d) * K.at(kj, hc + d);
          logits.push_back(acc * scale);
        }
        double mx = logits[0];
        for (double v : logits) mx = std::max(mx, v);
        double z = 0.0;
        for (auto& v : logits) {
          v = std::exp(v - mx);
          z += v;
        }
        for (size_t j = 0; j < ks.size(); ++j)
          for (int d = 0; d < dh; ++d)
            out.at(qi, hc + d) += logits[j] / z * V.at(ks[j], hc + d);
      }
    }
  return out;
}

inline Mat oracle_attention(const Mat& x, const RefAttnParams& p,
                            const std::vector<RefUnit>& units) {
  Mat Q = ref_project(x, p.Wq, p.bq);
  Mat K = ref_project(x, p.Wk, p.bk);
  Mat V = ref_project(x, p.Wv, p.bv);
  Mat mixed = oracle_mix(Q, K, V, units, p.heads);
  return ref_project(mixed, p.Wo, p.bo);
}

// Two-stage reference: temporal mixing of V (uncovered rows pass through),
// then spatial attention over the mixed values with the original Q, K.
inline Mat oracle_divided(const Mat& x, const RefAttnParams& p,
                          const std::vector<RefUnit>& temporal,
                          const std::vector<RefUnit>& spatial) {
  Mat Q = ref_project(x, p.Wq, p.bq);
  Mat K = ref_project(x, p.Wk, p.bk);
  Mat V = ref_project(x, p.Wv, p.bv);
  Mat M = V;
  Mat m1 = oracle_mix(Q, K, V, temporal, p.heads);
  std::vector<uint8_t> covered(static_cast<size_t>(x.rows), 0);
  for (const auto& [qs, ks] : temporal)
    for (int q : qs) covered[static_cast<size_t>(q)] = 1;
  for (int r = 0; r < x.rows; ++r)
    if (covered[static_cast<size_t>(r)])
      for (int c = 0; c < x.cols; ++c) M.at(r, c) = m1.at(r, c);
  Mat mixed = oracle_mix(Q, K, M, spatial, p.heads);
  return ref_project(mixed, p.Wo, p.bo);
}

inline double max_abs_diff(const Mat& a, const Mat& b) {
  double worst = 0.0;
  for (size_t i = 0; i < a.a.size(); ++i)
    worst = std::max(worst, std::abs(a.a[i] - b.a[i]));
  return worst;
}

// Standard unit layouts mirroring the glossary definitions.
inline std::vector<RefUnit> ref_joint_units(const TokenGeometry& g) {
  std::vector<int> all;
  for (int i = 0; i < g.tokens(); ++i) all.push_back(i);
  return {{all, all}};
}

inline std::vector<RefUnit> ref_temporal_units(const TokenGeometry& g) {
  std::vector<RefUnit> units;
  for (int s = 0; s < g.S; ++s) {
    std::vector<int> rows;
    for (int t = 0; t < g.T; ++t) rows.push_back(1 + t * g.S + s);
    units.push_back({rows, rows});
  }
  return units;
}

inline std::vector<RefUnit> ref_spatial_units(const TokenGeometry& g) {
  std::vector<RefUnit> units;
  for (int t = 0; t < g.T; ++t) {
    std::vector<int> rows;
    for (int s = 0; s < g.S; ++s) rows.push_back(1 + t * g.S + s);
    units.push_back({rows, rows});
  }
  std::vector<int> all;
  for (int i = 0; i < g.tokens(); ++i) all.push_back(i);
  units.push_back({{0}, all});
  return units;
}

inline std::vector<RefUnit> ref_pa_joint_units(const TokenGeometry& g,
                                               const PoseMap2D& p2d,
                                               bool class_active) {
  std::vector<int> pose;
  for (int i = 0; i < g.S * g.T; ++i)
    if (p2d.at(i)) pose.push_back(1 + i);
  std::vector<RefUnit> units;
  if (!pose.empty()) units.push_back({pose, pose});
  if (class_active) {
    std::vector<int> keys = {0};
    keys.insert(keys.end(), pose.begin(), pose.end());
    units.push_back({{0}, keys});
  }
  return units;
}

inline std::vector<RefUnit> ref_pa_spatial_units(const TokenGeometry& g,
                                                 const PoseMap2D& p2d,
                                                 bool class_active) {
  std::vector<RefUnit> units;
  for (int t = 0; t < g.T; ++t) {
    std::vector<int> pose_t;
    for (int s = 0; s < g.S; ++s)
      if (p2d.at(t * g.S + s)) pose_t.push_back(1 + t * g.S + s);
    if (!pose_t.empty()) units.push_back({pose_t, pose_t});
  }
  if (class_active) {
    std::vector<int> keys = {0};
    for (int i = 0; i < g.S * g.T; ++i)
      if (p2d.at(i)) keys.push_back(1 + i);
    units.push_back({{0}, keys});
  }
  return units;
}

}  // namespace pavt::testing
