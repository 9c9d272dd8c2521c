#include "pavt/posemap.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

namespace pavt {

namespace {

std::string kp_str(const Keypoint& p) {
  return "(t=" + std::to_string(p.t) + ", k=" + std::to_string(p.k) +
         ", x=" + std::to_string(p.x) + ", y=" + std::to_string(p.y) + ")";
}

}  // namespace

void KeypointSet::validate() const {
  if (tau < 1 || K < 1 || H < 1 || W < 1)
    throw DataError("keypoint set: geometry must be positive, got tau=" +
                    std::to_string(tau) + " K=" + std::to_string(K) +
                    " H=" + std::to_string(H) + " W=" + std::to_string(W));
  std::set<std::pair<int, int>> seen;
  for (const auto& p : points) {
    if (p.t < 1 || p.t > tau || p.k < 1 || p.k > K || p.x < 0 || p.x >= W ||
        p.y < 0 || p.y >= H)
      throw DataError("keypoint set: entry out of range " + kp_str(p));
    if (!seen.insert({p.t, p.k}).second)
      throw DataError("keypoint set: duplicate (t,k) entry " + kp_str(p));
  }
}

void PatchGeometry::validate() const {
  if (patch < 1 || H < 1 || W < 1 || tau < 1 || frames_per_token < 1)
    throw ConfigError("patch geometry: all fields must be positive");
  if (H % patch != 0 || W % patch != 0)
    throw ConfigError("patch geometry: patch size " + std::to_string(patch) +
                      " must divide H=" + std::to_string(H) +
                      " and W=" + std::to_string(W));
  if (tau % frames_per_token != 0)
    throw ConfigError("patch geometry: frames per temporal token " +
                      std::to_string(frames_per_token) +
                      " must divide tau=" + std::to_string(tau));
}

int PoseMap2D::count() const {
  return static_cast<int>(std::count(bits.begin(), bits.end(), uint8_t{1}));
}

double PoseMap2D::density() const {
  return bits.empty() ? 0.0 : static_cast<double>(count()) / bits.size();
}

int PoseMap3D::count() const {
  return static_cast<int>(std::count(bits.begin(), bits.end(), uint8_t{1}));
}

double PoseMap3D::density() const {
  return bits.empty() ? 0.0 : static_cast<double>(count()) / bits.size();
}

PoseMap2D PoseMap3D::collapse() const {
  PoseMap2D m;
  m.S = S;
  m.T = T;
  m.bits.assign(static_cast<size_t>(S) * T, 0);
  for (int i = 0; i < S * T; ++i)
    for (int k = 0; k < K; ++k)
      if (at(i, k)) {
        m.bits[static_cast<size_t>(i)] = 1;
        break;
      }
  return m;
}

std::vector<uint8_t> build_dense_pose_map(const KeypointSet& kps) {
  kps.validate();
  std::vector<uint8_t> dense(
      static_cast<size_t>(kps.tau) * kps.K * kps.H * kps.W, 0);
  for (const auto& p : kps.points) {
    const size_t i =
        ((static_cast<size_t>(p.t - 1) * kps.K + (p.k - 1)) * kps.H + p.y) * kps.W +
        p.x;
    dense[i] = 1;
  }
  return dense;
}

PoseMap2D patchify_2d(const KeypointSet& kps, const PatchGeometry& geom) {
  kps.validate();
  geom.validate();
  PoseMap2D m;
  m.S = geom.spatial();
  m.T = geom.temporal();
  m.bits.assign(static_cast<size_t>(geom.tokens()), 0);
  for (const auto& p : kps.points)
    m.bits[static_cast<size_t>(geom.token_index(p.t - 1, p.x, p.y))] = 1;
  return m;
}

PoseMap3D patchify_3d(const KeypointSet& kps, const PatchGeometry& geom) {
  kps.validate();
  geom.validate();
  PoseMap3D m;
  m.S = geom.spatial();
  m.T = geom.temporal();
  m.K = kps.K;
  m.bits.assign(static_cast<size_t>(geom.tokens()) * kps.K, 0);
  for (const auto& p : kps.points)
    m.at(geom.token_index(p.t - 1, p.x, p.y), p.k - 1) = 1;
  return m;
}

KeypointSet corrupt_noise(const KeypointSet& kps, int epsilon, uint64_t seed) {
  if (epsilon < 0) throw ConfigError("corrupt_noise: epsilon must be >= 0");
  kps.validate();
  KeypointSet out = kps;
  if (epsilon == 0) return out;
  auto rng = rng_stream(seed, 0xC0FFEEull);
  std::uniform_int_distribution<int> U(0, epsilon);
  for (auto& p : out.points) {
    p.x = std::clamp(p.x + U(rng), 0, kps.W - 1);
    p.y = std::clamp(p.y + U(rng), 0, kps.H - 1);
  }
  return out;
}

std::pair<PoseMap2D, PoseMap3D> randomize_map(const PatchGeometry& geom, int K,
                                              double density, uint64_t seed) {
  geom.validate();
  if (K < 1) throw ConfigError("randomize_map: K must be >= 1");
  if (density < 0.0 || density > 1.0)
    throw ConfigError("randomize_map: density must lie in [0,1]");
  PoseMap3D m3;
  m3.S = geom.spatial();
  m3.T = geom.temporal();
  m3.K = K;
  m3.bits.assign(static_cast<size_t>(geom.tokens()) * K, 0);
  auto rng = rng_stream(seed, 0xB17Bull);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (auto& b : m3.bits) b = (U(rng) < density) ? 1 : 0;
  return {m3.collapse(), m3};
}

double bernoulli_rate_for_2d_density(double density2d, int K) {
  density2d = std::clamp(density2d, 0.0, 1.0);
  // OR of K i.i.d. Bernoulli(r) has density 1-(1-r)^K.
  return 1.0 - std::pow(1.0 - density2d, 1.0 / static_cast<double>(K));
}

KeypointSet load_keypoints_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("keypoints: cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("keypoints: " + path.string() + ": " + e.what());
  }
  KeypointSet kps;
  try {
    kps.tau = j.at("tau").get<int>();
    kps.K = j.at("K").get<int>();
    kps.H = j.at("H").get<int>();
    kps.W = j.at("W").get<int>();
    for (const auto& e : j.at("points")) {
      if (!e.is_array() || e.size() != 4)
        throw DataError("keypoints: each point must be [t,k,x,y]");
      kps.points.push_back(
          {e[0].get<int>(), e[1].get<int>(), e[2].get<int>(), e[3].get<int>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("keypoints: " + path.string() + ": " + e.what());
  }
  kps.validate();
  return kps;
}

void save_keypoints_json(const KeypointSet& kps, const std::filesystem::path& path) {
  kps.validate();
  nlohmann::json j;
  j["tau"] = kps.tau;
  j["K"] = kps.K;
  j["H"] = kps.H;
  j["W"] = kps.W;
  auto pts = nlohmann::json::array();
  for (const auto& p : kps.points) pts.push_back({p.t, p.k, p.x, p.y});
  j["points"] = std::move(pts);
  std::ofstream out(path);
  if (!out) throw DataError("keypoints: cannot write " + path.string());
  out << j.dump() << "\n";
}

}  // namespace pavt
