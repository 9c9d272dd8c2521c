#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "pavt/common.hpp"

namespace pavt {

// One detected keypoint. t and k are 1-based (frame, keypoint id); x is the
// pixel column and y the pixel row, both 0-based.
struct Keypoint {
  int t = 0, k = 0, x = 0, y = 0;
};

struct KeypointSet {
  int tau = 0, K = 0, H = 0, W = 0;
  std::vector<Keypoint> points;

  // Range-checks every entry and rejects duplicate (t, k) pairs.
  void validate() const;
};

struct PatchGeometry {
  int patch = 8;
  int H = 32, W = 32, tau = 8;
  int frames_per_token = 1;

  void validate() const;
  int patches_x() const { return W / patch; }
  int patches_y() const { return H / patch; }
  int spatial() const { return patches_x() * patches_y(); }       // S
  int temporal() const { return tau / frames_per_token; }          // T
  int tokens() const { return spatial() * temporal(); }            // S*T
  // Patch token index for a pixel in a frame; layout is time-major, and
  // within a frame row-major over the patch grid.
  int token_index(int t0 /*0-based frame*/, int x, int y) const {
    const int s = (y / patch) * patches_x() + (x / patch);
    return (t0 / frames_per_token) * spatial() + s;
  }
};

// Binary indicator per patch token, index t*S + s.
struct PoseMap2D {
  int S = 0, T = 0;
  std::vector<uint8_t> bits;

  uint8_t at(int i) const { return bits[static_cast<size_t>(i)]; }
  int count() const;
  double density() const;
};

// Binary indicator per (patch token, keypoint), row-major (S*T) x K.
struct PoseMap3D {
  int S = 0, T = 0, K = 0;
  std::vector<uint8_t> bits;

  uint8_t at(int i, int k) const { return bits[static_cast<size_t>(i) * K + k]; }
  uint8_t& at(int i, int k) { return bits[static_cast<size_t>(i) * K + k]; }
  int count() const;
  double density() const;
  PoseMap2D collapse() const;  // row-wise OR
};

// Dense tau x K x H x W indicator, laid out [t][k][y][x]; entry (t,k,x,y) of
// the keypoint set maps to cell [t-1][k-1][y][x].
std::vector<uint8_t> build_dense_pose_map(const KeypointSet& kps);

PoseMap2D patchify_2d(const KeypointSet& kps, const PatchGeometry& geom);
PoseMap3D patchify_3d(const KeypointSet& kps, const PatchGeometry& geom);

// Adds an independent uniform integer in [0, epsilon] to each coordinate,
// then clamps to the frame. epsilon = 0 is the identity.
KeypointSet corrupt_noise(const KeypointSet& kps, int epsilon, uint64_t seed);

// 3-D bits i.i.d. Bernoulli(density); the 2-D map is the row-wise OR, so the
// pair always satisfies the consistency invariant.
std::pair<PoseMap2D, PoseMap3D> randomize_map(const PatchGeometry& geom, int K,
                                              double density, uint64_t seed);

// Bernoulli rate for 3-D bits such that the OR over K of them has the given
// 2-D density (used to match a 2-D map's sparsity when randomizing).
double bernoulli_rate_for_2d_density(double density2d, int K);

// JSON file format: {"tau":..,"K":..,"H":..,"W":..,"points":[[t,k,x,y],...]}
KeypointSet load_keypoints_json(const std::filesystem::path& path);
void save_keypoints_json(const KeypointSet& kps, const std::filesystem::path& path);

}  // namespace pavt
