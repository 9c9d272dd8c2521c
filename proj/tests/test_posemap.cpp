#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "pavt/posemap.hpp"
#include "support/posemap_oracle.hpp"

using namespace pavt;
using pavt::testing::dense_maxpool_2d;
using pavt::testing::dense_maxpool_3d;
using pavt::testing::random_keypoints;

namespace {

PatchGeometry geom_32() {
  PatchGeometry g;
  g.patch = 8;
  g.H = 32;
  g.W = 32;
  g.tau = 4;
  return g;
}

}  // namespace

TEST_CASE("dense pose map basics") {
  KeypointSet empty{4, 5, 32, 32, {}};
  auto dense = build_dense_pose_map(empty);
  CHECK(std::accumulate(dense.begin(), dense.end(), 0) == 0);

  KeypointSet one{4, 5, 32, 32, {{1, 1, 0, 0}}};
  dense = build_dense_pose_map(one);
  CHECK(std::accumulate(dense.begin(), dense.end(), 0) == 1);
  CHECK(dense[0] == 1);  // t=1,k=1 -> block 0, pixel (y=0,x=0)
}

TEST_CASE("dense pose map popcount equals entry count") {
  auto rng = rng_stream(101);
  for (int trial = 0; trial < 10; ++trial) {
    auto kps = random_keypoints(4, 6, 32, 32, 20, rng);
    auto dense = build_dense_pose_map(kps);
    CHECK(std::accumulate(dense.begin(), dense.end(), 0) ==
          static_cast<int>(kps.points.size()));
  }
}

TEST_CASE("keypoint validation names the offending entry") {
  KeypointSet bad{4, 5, 32, 32, {{1, 1, 32, 0}}};
  CHECK_THROWS_WITH_AS(build_dense_pose_map(bad), doctest::Contains("x=32"),
                       DataError);
  KeypointSet dup{4, 5, 32, 32, {{1, 1, 3, 3}, {1, 1, 8, 8}}};
  CHECK_THROWS_WITH_AS(dup.validate(), doctest::Contains("duplicate"), DataError);
}

TEST_CASE("patchify_2d trivial cases") {
  auto geom = geom_32();
  KeypointSet empty{4, 5, 32, 32, {}};
  CHECK(patchify_2d(empty, geom).count() == 0);

  // patch size 16: the keypoint at pixel (0,0) activates only the first
  // patch of its frame
  PatchGeometry g16 = geom;
  g16.patch = 16;
  KeypointSet one{4, 5, 32, 32, {{2, 1, 0, 0}}};
  auto m = patchify_2d(one, g16);
  CHECK(m.count() == 1);
  CHECK(m.at(1 * m.S + 0) == 1);  // frame 2 (0-based 1), patch (0,0)

  // two keypoints in one patch keep the bit at 1
  KeypointSet two{4, 5, 32, 32, {{1, 1, 2, 2}, {1, 2, 3, 3}}};
  CHECK(patchify_2d(two, geom).count() == 1);
}

TEST_CASE("patchify matches the dense max-pool oracle") {
  auto rng = rng_stream(103);
  for (int trial = 0; trial < 50; ++trial) {
    PatchGeometry g;
    g.patch = (trial % 2) ? 8 : 16;
    g.H = 32 + 16 * (trial % 3);
    g.W = 32;
    g.tau = 2 + trial % 4;
    std::uniform_int_distribution<int> Un(0, 30);
    auto kps = random_keypoints(g.tau, 5, g.H, g.W, Un(rng), rng);
    auto m2 = patchify_2d(kps, g);
    auto m3 = patchify_3d(kps, g);
    CHECK(m2.bits == dense_maxpool_2d(kps, g).bits);
    CHECK(m3.bits == dense_maxpool_3d(kps, g).bits);
    // row-wise OR consistency
    CHECK(m3.collapse().bits == m2.bits);
  }
}

TEST_CASE("patchify_3d sets exactly the keypoint channels") {
  auto geom = geom_32();
  KeypointSet kps{4, 5, 32, 32, {{1, 1, 2, 2}, {1, 2, 4, 4}}};
  auto m = patchify_3d(kps, geom);
  CHECK(m.at(0, 0) == 1);
  CHECK(m.at(0, 1) == 1);
  CHECK(m.count() == 2);
}

TEST_CASE("monotonicity: adding a keypoint never clears bits") {
  auto rng = rng_stream(107);
  auto geom = geom_32();
  for (int trial = 0; trial < 20; ++trial) {
    auto kps = random_keypoints(4, 5, 32, 32, 10, rng);
    auto before = patchify_2d(kps, geom);
    auto before3 = patchify_3d(kps, geom);
    // add one more entry at a fresh (t,k)
    std::set<std::pair<int, int>> used;
    for (const auto& p : kps.points) used.insert({p.t, p.k});
    KeypointSet more = kps;
    for (int t = 1; t <= 4 && more.points.size() == kps.points.size(); ++t)
      for (int k = 1; k <= 5; ++k)
        if (!used.count({t, k})) {
          more.points.push_back({t, k, 17, 9});
          break;
        }
    auto after = patchify_2d(more, geom);
    auto after3 = patchify_3d(more, geom);
    for (size_t i = 0; i < before.bits.size(); ++i)
      CHECK(after.bits[i] >= before.bits[i]);
    for (size_t i = 0; i < before3.bits.size(); ++i)
      CHECK(after3.bits[i] >= before3.bits[i]);
  }
}

TEST_CASE("corrupt_noise identity, bound and determinism") {
  auto rng = rng_stream(109);
  auto kps = random_keypoints(4, 5, 32, 32, 15, rng);

  auto same = corrupt_noise(kps, 0, 42);
  for (size_t i = 0; i < kps.points.size(); ++i) {
    CHECK(same.points[i].x == kps.points[i].x);
    CHECK(same.points[i].y == kps.points[i].y);
  }

  auto noisy = corrupt_noise(kps, 5, 42);
  for (size_t i = 0; i < kps.points.size(); ++i) {
    const int dx = noisy.points[i].x - kps.points[i].x;
    const int dy = noisy.points[i].y - kps.points[i].y;
    CHECK(dx >= -5);  // clamping can pull below the raw shift
    CHECK(dx <= 5);
    CHECK(dy >= -5);
    CHECK(dy <= 5);
    CHECK(noisy.points[i].x >= 0);
    CHECK(noisy.points[i].x < 32);
  }

  auto again = corrupt_noise(kps, 5, 42);
  for (size_t i = 0; i < kps.points.size(); ++i) {
    CHECK(again.points[i].x == noisy.points[i].x);
    CHECK(again.points[i].y == noisy.points[i].y);
  }
  auto other = corrupt_noise(kps, 5, 43);
  bool any_diff = false;
  for (size_t i = 0; i < kps.points.size(); ++i)
    any_diff = any_diff || other.points[i].x != noisy.points[i].x ||
               other.points[i].y != noisy.points[i].y;
  CHECK(any_diff);
}

TEST_CASE("randomize_map densities and consistency") {
  PatchGeometry g;
  g.patch = 8;
  g.H = 32;
  g.W = 32;
  g.tau = 8;

  auto [z2, z3] = randomize_map(g, 5, 0.0, 1);
  CHECK(z2.count() == 0);
  CHECK(z3.count() == 0);
  auto [o2, o3] = randomize_map(g, 5, 1.0, 1);
  CHECK(o2.count() == static_cast<int>(o2.bits.size()));
  CHECK(o3.count() == static_cast<int>(o3.bits.size()));

  // density concentration: >= 10k bits, empirical mean within 0.3 +/- 0.02
  PatchGeometry big = g;
  big.tau = 16;
  auto [m2, m3] = randomize_map(big, 40, 0.3, 7);
  CHECK(m3.bits.size() >= 10000);
  CHECK(std::abs(m3.density() - 0.3) < 0.02);

  // 2D is the OR of 3D rows by construction
  CHECK(m3.collapse().bits == m2.bits);
}

TEST_CASE("bernoulli rate solves the OR density") {
  const double r = bernoulli_rate_for_2d_density(0.4, 5);
  CHECK(1.0 - std::pow(1.0 - r, 5) == doctest::Approx(0.4).epsilon(1e-12));
}

TEST_CASE("keypoint json round trip and validation") {
  const auto dir = std::filesystem::temp_directory_path() / "pavt_posemap_test";
  std::filesystem::create_directories(dir);
  auto rng = rng_stream(113);
  auto kps = random_keypoints(4, 5, 32, 32, 12, rng);
  save_keypoints_json(kps, dir / "k.json");
  auto back = load_keypoints_json(dir / "k.json");
  CHECK(back.tau == kps.tau);
  CHECK(back.points.size() == kps.points.size());
  for (size_t i = 0; i < kps.points.size(); ++i) {
    CHECK(back.points[i].t == kps.points[i].t);
    CHECK(back.points[i].k == kps.points[i].k);
    CHECK(back.points[i].x == kps.points[i].x);
    CHECK(back.points[i].y == kps.points[i].y);
  }

  std::ofstream(dir / "bad.json") << "{\"tau\": 4";
  CHECK_THROWS_AS(load_keypoints_json(dir / "bad.json"), DataError);
  std::filesystem::remove_all(dir);
}
