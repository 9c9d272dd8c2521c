#include "pavt/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

namespace pavt {

DistanceKind distance_kind_from_string(const std::string& s) {
  if (s == "euclidean") return DistanceKind::EuclideanNormalized;
  if (s == "cosine") return DistanceKind::Cosine;
  throw ConfigError("unknown distance kind '" + s + "' (euclidean or cosine)");
}

const char* to_string(DistanceKind k) {
  return k == DistanceKind::Cosine ? "cosine" : "euclidean";
}

namespace {

// Per-token normalization for the feature-distance diagnostics: zero mean,
// unit variance along the feature axis (identity on already-normalized rows).
std::vector<double> normalize_row(const double* x, int n) {
  std::vector<double> out(static_cast<size_t>(n));
  double mu = 0.0;
  for (int i = 0; i < n; ++i) mu += x[i];
  mu /= n;
  double var = 0.0;
  for (int i = 0; i < n; ++i) var += (x[i] - mu) * (x[i] - mu);
  var /= n;
  if (var < 1e-24) return out;  // constant feature -> zero vector
  const double inv = 1.0 / std::sqrt(var);
  for (int i = 0; i < n; ++i) out[static_cast<size_t>(i)] = (x[i] - mu) * inv;
  return out;
}

double pair_distance(const std::vector<double>& a, const std::vector<double>& b,
                     DistanceKind kind) {
  if (kind == DistanceKind::EuclideanNormalized) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
  }
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 1.0;
  return 1.0 - dot / std::sqrt(na * nb);
}

// Patch-token features, normalized for the euclidean metric, raw for cosine.
std::vector<std::vector<double>> token_features(const LayerSnapshot& snap,
                                                DistanceKind kind) {
  const int patches = snap.tokens.rows - 1;
  std::vector<std::vector<double>> f(static_cast<size_t>(patches));
  for (int i = 0; i < patches; ++i) {
    const double* row = snap.tokens.row(i + 1);
    f[static_cast<size_t>(i)] =
        kind == DistanceKind::EuclideanNormalized
            ? normalize_row(row, snap.tokens.cols)
            : std::vector<double>(row, row + snap.tokens.cols);
  }
  return f;
}

void check_pose_bits(const LayerSnapshot& snap) {
  if (static_cast<int>(snap.pose_bits.size()) != snap.tokens.rows - 1)
    throw ConfigError("layer snapshot: pose bits do not match the token count");
}

}  // namespace

std::optional<double> pose_nonpose_distance(const LayerSnapshot& snap,
                                            DistanceKind kind) {
  check_pose_bits(snap);
  auto f = token_features(snap, kind);
  double total = 0.0;
  int64_t pairs = 0;
  for (size_t i = 0; i < f.size(); ++i) {
    if (!snap.pose_bits[i]) continue;
    for (size_t j = 0; j < f.size(); ++j) {
      if (snap.pose_bits[j]) continue;
      total += pair_distance(f[i], f[j], kind);
      ++pairs;
    }
  }
  if (pairs == 0) return std::nullopt;
  return total / static_cast<double>(pairs);
}

std::optional<double> pose_pose_distance(const LayerSnapshot& snap,
                                         DistanceKind kind) {
  check_pose_bits(snap);
  auto f = token_features(snap, kind);
  double total = 0.0;
  int64_t pairs = 0;
  for (size_t i = 0; i < f.size(); ++i) {
    if (!snap.pose_bits[i]) continue;
    for (size_t j = i + 1; j < f.size(); ++j) {
      if (!snap.pose_bits[j]) continue;
      total += pair_distance(f[i], f[j], kind);
      ++pairs;
    }
  }
  if (pairs == 0) return std::nullopt;
  return total / static_cast<double>(pairs);
}

std::vector<double> attention_histogram(const LayerSnapshot& snap,
                                        const std::vector<double>& bin_edges) {
  if (bin_edges.size() < 2 || bin_edges.front() != 0.0 || bin_edges.back() != 1.0)
    throw ConfigError("attention histogram: bin edges must partition [0,1]");
  for (size_t i = 1; i < bin_edges.size(); ++i)
    if (bin_edges[i] <= bin_edges[i - 1])
      throw ConfigError("attention histogram: bin edges must increase");
  std::vector<double> counts(bin_edges.size() - 1, 0.0);
  int64_t population = 0;
  for (const auto& m : snap.attention) {
    for (int r = 0; r < m.rows; ++r) {
      const double* row = m.row(r);
      bool all_zero = true;
      for (int c = 0; c < m.cols; ++c)
        if (row[c] != 0.0) {
          all_zero = false;
          break;
        }
      if (all_zero) continue;  // masked-out query
      for (int c = 0; c < m.cols; ++c) {
        const double v = row[c];
        auto it = std::upper_bound(bin_edges.begin(), bin_edges.end(), v);
        size_t bin = static_cast<size_t>(it - bin_edges.begin());
        bin = bin == 0 ? 0 : bin - 1;
        if (bin >= counts.size()) bin = counts.size() - 1;
        counts[bin] += 1.0;
        ++population;
      }
    }
  }
  if (population > 0)
    for (auto& c : counts) c /= static_cast<double>(population);
  return counts;
}

double ffn_displacement(const Mat& before, const Mat& after) {
  if (before.rows != after.rows || before.cols != after.cols)
    throw ConfigError("ffn_displacement: shape mismatch");
  if (before.rows == 0) return 0.0;
  double total = 0.0;
  for (int r = 0; r < before.rows; ++r) {
    double s = 0.0;
    for (int c = 0; c < before.cols; ++c) {
      const double d = after.at(r, c) - before.at(r, c);
      s += d * d;
    }
    total += std::sqrt(s);
  }
  return total / before.rows;
}

double recall_at_k(const LabeledFeatures& gallery, const LabeledFeatures& queries,
                   int k) {
  if (k < 1) throw ConfigError("recall_at_k: k must be >= 1");
  if (gallery.features.rows == 0) throw ConfigError("recall_at_k: empty gallery");
  if (gallery.labels.size() != static_cast<size_t>(gallery.features.rows) ||
      queries.labels.size() != static_cast<size_t>(queries.features.rows))
    throw ConfigError("recall_at_k: labels do not match features");

  auto norm = [](const double* v, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += v[i] * v[i];
    return std::sqrt(s);
  };

  int hits = 0;
  for (int q = 0; q < queries.features.rows; ++q) {
    const double* qv = queries.features.row(q);
    const double qn = norm(qv, queries.features.cols);
    std::vector<std::pair<double, int>> sims;
    for (int g = 0; g < gallery.features.rows; ++g) {
      if (!queries.ids.empty() && !gallery.ids.empty() &&
          queries.ids[static_cast<size_t>(q)] == gallery.ids[static_cast<size_t>(g)])
        continue;
      const double* gv = gallery.features.row(g);
      const double gn = norm(gv, gallery.features.cols);
      double dot = 0.0;
      for (int c = 0; c < gallery.features.cols; ++c) dot += qv[c] * gv[c];
      const double sim = (qn == 0.0 || gn == 0.0) ? 0.0 : dot / (qn * gn);
      sims.push_back({sim, g});
    }
    // Highest similarity first; ties resolved toward the lowest index.
    std::sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    const int kk = std::min<int>(k, static_cast<int>(sims.size()));
    for (int i = 0; i < kk; ++i)
      if (gallery.labels[static_cast<size_t>(sims[static_cast<size_t>(i)].second)] ==
          queries.labels[static_cast<size_t>(q)]) {
        ++hits;
        break;
      }
  }
  return queries.features.rows == 0
             ? 0.0
             : static_cast<double>(hits) / queries.features.rows;
}

namespace {

double directed_alignment_error(const Mat& a, const Mat& b) {
  const int T = a.rows;
  double total = 0.0;
  for (int i = 0; i < T; ++i) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int j = 0; j < T; ++j) {
      double d = 0.0;
      for (int c = 0; c < a.cols; ++c) {
        const double diff = a.at(i, c) - b.at(j, c);
        d += diff * diff;
      }
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    total += std::abs(i - best) / static_cast<double>(T - 1);
  }
  return total / T;
}

}  // namespace

double alignment_error(const Mat& emb_a, const Mat& emb_b) {
  if (emb_a.rows != emb_b.rows || emb_a.cols != emb_b.cols)
    throw ConfigError("alignment_error: embedding shapes differ");
  if (emb_a.rows < 2) throw ConfigError("alignment_error: need at least 2 frames");
  return 0.5 * (directed_alignment_error(emb_a, emb_b) +
                directed_alignment_error(emb_b, emb_a));
}

double top1_accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size() || labels.empty())
    throw ConfigError("top1_accuracy: preds and labels must match and be nonempty");
  int correct = 0;
  for (size_t i = 0; i < preds.size(); ++i) correct += preds[i] == labels[i];
  return static_cast<double>(correct) / preds.size();
}

double mean_class_accuracy(const std::vector<int>& preds,
                           const std::vector<int>& labels) {
  if (preds.size() != labels.size() || labels.empty())
    throw ConfigError("mean_class_accuracy: preds and labels must match and be nonempty");
  std::map<int, std::pair<int, int>> per_class;  // label -> (correct, total)
  for (size_t i = 0; i < labels.size(); ++i) {
    auto& [correct, total] = per_class[labels[i]];
    total += 1;
    correct += preds[i] == labels[i];
  }
  double acc = 0.0;
  for (const auto& [cls, ct] : per_class)
    acc += static_cast<double>(ct.first) / ct.second;
  return acc / static_cast<double>(per_class.size());
}

std::string MetricTable::to_json() const {
  nlohmann::json j;
  j["metadata"] = metadata;
  nlohmann::json vals;
  for (const auto& [name, series] : values) vals[name] = series;
  j["metrics"] = std::move(vals);
  return j.dump(2);
}

std::string MetricTable::to_csv() const {
  std::ostringstream os;
  os << "metric,index,value\n";
  os.precision(17);
  for (const auto& [name, series] : values)
    for (size_t i = 0; i < series.size(); ++i)
      os << name << "," << i << "," << series[i] << "\n";
  return os.str();
}

}  // namespace pavt
