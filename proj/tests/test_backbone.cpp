#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>

#include "pavt/backbone.hpp"
#include "support/gradcheck.hpp"

using namespace pavt;
namespace pt = pavt::testing;
using pt::Buffers;

namespace {

ModelConfig tiny_config(bool with_paab, bool with_paat) {
  ModelConfig cfg;
  cfg.tau = 2;
  cfg.H = cfg.W = 16;
  cfg.C = 1;
  cfg.patch = 8;  // S=4, T=2
  cfg.depth = 2;
  cfg.dim = 16;
  cfg.heads = 2;
  cfg.classes = 2;
  cfg.ffn_hidden = 24;
  cfg.keypoints = 3;
  cfg.seed = 5;
  if (with_paab) {
    cfg.paab = PaabPlacement{};
    cfg.paab->layers = {2};
  }
  if (with_paat) {
    cfg.paat = PaatPlacement{};
    cfg.paat->layers = {1};
    cfg.paat->bottleneck = 8;
  }
  return cfg;
}

VideoTensor random_video(const ModelConfig& cfg, uint64_t seed) {
  VideoTensor v(cfg.tau, cfg.H, cfg.W, cfg.C);
  auto rng = rng_stream(seed);
  std::uniform_real_distribution<double> U(0, 1);
  for (auto& x : v.v) x = U(rng);
  return v;
}

KeypointSet random_kps(const ModelConfig& cfg, int count, uint64_t seed) {
  KeypointSet kps;
  kps.tau = cfg.tau;
  kps.K = cfg.keypoints;
  kps.H = cfg.H;
  kps.W = cfg.W;
  auto rng = rng_stream(seed, 1);
  std::uniform_int_distribution<int> Ux(0, cfg.W - 1), Uy(0, cfg.H - 1);
  int added = 0;
  for (int t = 1; t <= cfg.tau && added < count; ++t)
    for (int k = 1; k <= cfg.keypoints && added < count; ++k) {
      kps.points.push_back({t, k, Ux(rng), Uy(rng)});
      ++added;
    }
  return kps;
}

}  // namespace

TEST_CASE("token geometry arithmetic") {
  ModelConfig cfg;
  cfg.tau = 2;
  cfg.H = cfg.W = 32;
  cfg.patch = 16;
  auto g = cfg.token_geometry();
  CHECK(g.S == 4);
  CHECK(g.T == 2);
  CHECK(g.tokens() == 9);
}

TEST_CASE("patch extraction matches a pixel-loop oracle") {
  VideoTensor v(1, 32, 32, 2);
  auto rng = rng_stream(301);
  std::uniform_real_distribution<double> U(0, 1);
  for (auto& x : v.v) x = U(rng);
  Mat m = extract_patches(v, 16);
  REQUIRE(m.rows == 4);
  REQUIRE(m.cols == 16 * 16 * 2);
  for (int gy = 0; gy < 2; ++gy)
    for (int gx = 0; gx < 2; ++gx)
      for (int dy = 0; dy < 16; ++dy)
        for (int dx = 0; dx < 16; ++dx)
          for (int c = 0; c < 2; ++c) {
            const double expect = v.at(0, gy * 16 + dy, gx * 16 + dx, c);
            CHECK(m.at(gy * 2 + gx, (dy * 16 + dx) * 2 + c) == expect);
          }
}

TEST_CASE("zero video with zero bias embeds to position sums") {
  auto cfg = tiny_config(false, false);
  Model model(cfg);
  VideoTensor zero(cfg.tau, cfg.H, cfg.W, cfg.C);
  Mat tokens = model.embed_tokens(zero);

  const auto& entries = model.params().entries();
  auto find = [&](const std::string& name) -> const ParamEntry& {
    for (const auto& e : entries)
      if (e.name == name) return e;
    throw std::runtime_error("missing " + name);
  };
  const auto& cls = find("cls");
  const auto& ps = find("pos.spatial");
  const auto& ptm = find("pos.temporal");
  const auto g = cfg.token_geometry();
  for (int d = 0; d < g.D; ++d)
    CHECK(tokens.at(0, d) == cls.data[static_cast<size_t>(d)]);
  for (int i = 0; i < g.S * g.T; ++i)
    for (int d = 0; d < g.D; ++d)
      CHECK(tokens.at(1 + i, d) ==
            doctest::Approx(ps.data[static_cast<size_t>((i % g.S) * g.D + d)] +
                            ptm.data[static_cast<size_t>((i / g.S) * g.D + d)])
                .epsilon(1e-15));
}

TEST_CASE("config validation") {
  auto cfg = tiny_config(false, true);
  cfg.paat->bottleneck = 64;  // exceeds dim=16
  CHECK_THROWS_WITH_AS(Model{cfg}, doctest::Contains("bottleneck"), ConfigError);

  cfg = tiny_config(true, false);
  cfg.paab->layers = {3};  // depth is 2
  CHECK_THROWS_AS(Model{cfg}, ConfigError);

  cfg = tiny_config(false, false);
  cfg.heads = 3;  // does not divide 16
  CHECK_THROWS_AS(Model{cfg}, ConfigError);
}

TEST_CASE("paat head with zero weights predicts one half everywhere") {
  auto cfg = tiny_config(false, true);
  Model model(cfg);
  for (auto& e : model.params().entries())
    if (e.name.rfind("paat1.", 0) == 0) std::fill(e.data.begin(), e.data.end(), 0.0);
  ForwardOptions opt;
  opt.with_paat = true;
  auto fr = model.forward(random_video(cfg, 7), opt);
  REQUIRE(fr.paat_predictions.size() == 1);
  const auto& pred = fr.paat_predictions[0];
  CHECK(pred.dim(0) == 8);  // S*T
  CHECK(pred.dim(1) == cfg.keypoints);
  for (double v : pred.data()) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("paat bce gradient w.r.t. tokens via finite differences") {
  auto rng = rng_stream(307);
  const int n = 4, D = 6, De = 3, K = 2;
  std::uniform_real_distribution<double> U(-1, 1);
  auto vec = [&](size_t m) {
    std::vector<double> v(m);
    for (auto& x : v) x = U(rng);
    return v;
  };
  Buffers x0 = {vec(n * D)};
  const auto w1 = vec(D * De), b1 = vec(De), w2 = vec(De * K), b2 = vec(K);
  PoseMap3D target;
  target.S = 2;
  target.T = 2;
  target.K = K;
  target.bits = {1, 0, 0, 1, 1, 1, 0, 0};

  auto f = [&](const Buffers& in) {
    Tape tape;
    Tensor z = Tensor::leaf({n, D}, in[0], true, &tape);
    Tensor h = add_rowvec(matmul(z, Tensor::leaf({D, De}, w1)), Tensor::leaf({De}, b1));
    Tensor pred =
        sigmoid(add_rowvec(matmul(h, Tensor::leaf({De, K}, w2)), Tensor::leaf({K}, b2)));
    return paat_loss(pred, target).item();
  };
  Tape tape;
  Tensor z = Tensor::leaf({n, D}, x0[0], true, &tape);
  Tensor h = add_rowvec(matmul(z, Tensor::leaf({D, De}, w1)), Tensor::leaf({De}, b1));
  Tensor pred =
      sigmoid(add_rowvec(matmul(h, Tensor::leaf({De, K}, w2)), Tensor::leaf({K}, b2)));
  tape.backward(paat_loss(pred, target));
  CHECK(pt::max_grad_rel_err(f, x0, {z.grad()}) < 1e-4);
}

TEST_CASE("paat loss reference values") {
  // predictions equal to clamped targets: loss below 1e-10
  PoseMap3D t;
  t.S = 2;
  t.T = 1;
  t.K = 2;
  t.bits = {1, 0, 0, 1};
  std::vector<double> p = {1.0 - 1e-12, 1e-12, 1e-12, 1.0 - 1e-12};
  CHECK(paat_loss(Tensor::leaf({2, 2}, p), t).item() < 1e-10);

  // prediction one half everywhere: exactly ln 2 for any target
  std::vector<double> half(4, 0.5);
  CHECK(paat_loss(Tensor::leaf({2, 2}, half), t).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-15));

  // random case against a per-entry summation oracle
  auto rng = rng_stream(311);
  std::uniform_real_distribution<double> U(0.05, 0.95);
  std::vector<double> pred(4);
  for (auto& v : pred) v = U(rng);
  double expect = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double tv = t.bits[static_cast<size_t>(i)];
    expect += -(tv * std::log(pred[static_cast<size_t>(i)]) +
                (1 - tv) * std::log(1 - pred[static_cast<size_t>(i)]));
  }
  expect /= 4;
  CHECK(std::abs(paat_loss(Tensor::leaf({2, 2}, pred), t).item() - expect) < 1e-12);
}

TEST_CASE("total loss arithmetic and gradient linearity") {
  CHECK(total_loss(2.0, 1.0, 0.0).total == 2.0);
  CHECK(total_loss(2.0, 1.0, 1.6).total == doctest::Approx(3.6).epsilon(1e-15));

  // gradient of total w.r.t. shared leaf equals lambda * d(paat) + d(primary)
  auto rng = rng_stream(313);
  std::uniform_real_distribution<double> U(-1, 1);
  std::vector<double> xv(6);
  for (auto& v : xv) v = U(rng);
  const double lambda = 1.6;

  auto grads = [&](bool use_primary, bool use_paat) {
    Tape tape;
    Tensor x = Tensor::leaf({2, 3}, xv, true, &tape);
    Tensor primary = mean(mul(x, x));
    Tensor paat = mean(sigmoid(x));
    Tensor loss;
    if (use_primary && use_paat)
      loss = add(primary, scale(paat, lambda));
    else
      loss = use_primary ? primary : paat;
    tape.backward(loss);
    return x.grad();
  };
  auto g_total = grads(true, true);
  auto g_primary = grads(true, false);
  auto g_paat = grads(false, true);
  for (size_t i = 0; i < g_total.size(); ++i)
    CHECK(g_total[i] ==
          doctest::Approx(g_primary[i] + lambda * g_paat[i]).epsilon(1e-12));
}

TEST_CASE("classify loss basics") {
  Tensor logits = Tensor::leaf({1, 4}, {0, 0, 0, 0});
  CHECK(classify_loss(logits, 1).item() == doctest::Approx(std::log(4.0)));
  // growing margin shrinks the loss monotonically
  double prev = 1e9;
  for (double m : {0.5, 1.0, 2.0, 4.0}) {
    Tensor lg = Tensor::leaf({1, 3}, {m, 0.0, 0.0});
    const double l = classify_loss(lg, 0).item();
    CHECK(l < prev);
    prev = l;
  }
}

TEST_CASE("tcn loss reference behaviour") {
  // identical embeddings for every frame: loss equals the margin
  std::vector<double> flat(4 * 3, 0.7);
  Tensor a = Tensor::leaf({4, 3}, flat);
  Tensor b = Tensor::leaf({4, 3}, flat);
  std::vector<int> neg = {2, 3, 0, 1};
  CHECK(tcn_loss(a, b, 0.2, neg).item() == doctest::Approx(0.2).epsilon(1e-15));

  // perfectly separated: positive distance 0, negative distance beyond margin
  std::vector<double> av = {0, 0, 0, 10, 10, 10, 20, 20, 20, 30, 30, 30};
  Tensor a2 = Tensor::leaf({4, 3}, av);
  Tensor b2 = Tensor::leaf({4, 3}, av);
  CHECK(tcn_loss(a2, b2, 0.2, neg).item() == 0.0);

  // random case against an explicit triplet enumeration oracle
  auto rng = rng_stream(317);
  std::uniform_real_distribution<double> U(-1, 1);
  std::vector<double> e1(5 * 4), e2(5 * 4);
  for (auto& v : e1) v = U(rng);
  for (auto& v : e2) v = U(rng);
  std::vector<int> negs = {3, 4, 0, 1, 0};
  const double margin = 0.3;
  double expect = 0.0;
  for (int t = 0; t < 5; ++t) {
    double dp = 0, dn = 0;
    for (int d = 0; d < 4; ++d) {
      const double va = e1[static_cast<size_t>(t * 4 + d)];
      dp += (va - e2[static_cast<size_t>(t * 4 + d)]) *
            (va - e2[static_cast<size_t>(t * 4 + d)]);
      dn += (va - e1[static_cast<size_t>(negs[static_cast<size_t>(t)] * 4 + d)]) *
            (va - e1[static_cast<size_t>(negs[static_cast<size_t>(t)] * 4 + d)]);
    }
    expect += std::max(0.0, dp - dn + margin);
  }
  expect /= 5;
  CHECK(std::abs(tcn_loss(Tensor::leaf({5, 4}, e1), Tensor::leaf({5, 4}, e2), margin,
                          negs)
                     .item() -
                 expect) < 1e-10);

  // too short for any valid triplet
  auto rng2 = rng_stream(319);
  CHECK_THROWS_AS(sample_tcn_negatives(2, 3, rng2), ConfigError);
  CHECK(sample_tcn_negatives(5, 2, rng2)[2] == -1);  // middle anchor has none
}

TEST_CASE("checkpoint round trip is bitwise stable") {
  namespace fs = std::filesystem;
  const auto dir = fs::temp_directory_path() / "pavt_ckpt_test";
  fs::create_directories(dir);

  auto cfg = tiny_config(true, true);
  Model model(cfg);
  checkpoint_save(model, dir / "a.pavt");
  Model loaded = checkpoint_load(dir / "a.pavt");
  checkpoint_save(loaded, dir / "b.pavt");

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
  };
  CHECK(slurp(dir / "a.pavt") == slurp(dir / "b.pavt"));

  // forward output identical before and after the round trip
  auto video = random_video(cfg, 11);
  auto kps = random_kps(cfg, 4, 11);
  auto p2d = patchify_2d(kps, cfg.patch_geometry());
  ForwardOptions opt;
  opt.pose = &p2d;
  auto l1 = model.forward(video, opt).logits.data();
  auto l2 = loaded.forward(video, opt).logits.data();
  CHECK(l1 == l2);

  // corrupting a shape header names the parameter
  std::string bytes = slurp(dir / "a.pavt");
  const size_t cfg_len = static_cast<uint8_t>(bytes[6]) |
                         (static_cast<uint8_t>(bytes[7]) << 8) |
                         (static_cast<uint8_t>(bytes[8]) << 16) |
                         (static_cast<uint8_t>(bytes[9]) << 24);
  const size_t first_dim_at = 10 + cfg_len + 4;  // first tensor, first dim
  bytes[first_dim_at] = static_cast<char>(bytes[first_dim_at] + 1);
  std::ofstream(dir / "bad.pavt", std::ios::binary) << bytes;
  CHECK_THROWS_WITH_AS(checkpoint_load(dir / "bad.pavt"),
                       doctest::Contains("embed.w"), DataError);
  fs::remove_all(dir);
}

TEST_CASE("paat head is inference-neutral bit for bit") {
  auto cfg = tiny_config(false, true);
  Model with_head(cfg);
  auto video = random_video(cfg, 13);

  ForwardOptions opt;
  opt.with_paat = false;
  auto base = with_head.forward(video, opt).logits.data();
  opt.with_paat = true;
  auto attached = with_head.forward(video, opt).logits.data();
  CHECK(base == attached);

  // a paat-free model with the same backbone weights gives identical logits
  auto cfg_plain = tiny_config(false, false);
  Model plain(cfg_plain);
  for (auto& e : plain.params().entries())
    for (const auto& src : with_head.params().entries())
      if (src.name == e.name) e.data = src.data;
  auto plain_logits = plain.forward(video, {}).logits.data();
  CHECK(plain_logits == base);
}

TEST_CASE("end-to-end gradient check and degenerate-pose safety") {
  // PAAB+PAAT fusion on the tiny config; finite differences over a sampled
  // subset of parameter coordinates
  auto cfg = tiny_config(true, true);
  auto video = random_video(cfg, 17);
  auto kps = random_kps(cfg, 5, 17);
  auto geom = cfg.patch_geometry();
  auto p2d = patchify_2d(kps, geom);
  auto p3d = patchify_3d(kps, geom);

  Model model(cfg);
  auto loss_at = [&](const std::vector<std::vector<double>>& params) {
    Model m(cfg);
    auto& es = m.params().entries();
    for (size_t i = 0; i < es.size(); ++i) es[i].data = params[i];
    Tape tape;
    ForwardOptions opt;
    opt.pose = &p2d;
    opt.with_paat = true;
    opt.tape = &tape;
    auto fr = m.forward(video, opt);
    Tensor loss = classify_loss(fr.logits, 1);
    loss = add(loss, scale(paat_loss(fr.paat_predictions[0], p3d), cfg.paat->lambda));
    return loss;
  };

  std::vector<std::vector<double>> theta;
  for (const auto& e : model.params().entries()) theta.push_back(e.data);

  // analytic gradients
  Tape tape;
  ForwardOptions opt;
  opt.pose = &p2d;
  opt.with_paat = true;
  opt.tape = &tape;
  auto fr = model.forward(video, opt);
  Tensor loss = classify_loss(fr.logits, 1);
  loss = add(loss, scale(paat_loss(fr.paat_predictions[0], p3d), cfg.paat->lambda));
  tape.backward(loss);

  auto rng = rng_stream(23);
  double worst = 0.0;
  const double h = 1e-5;
  for (size_t e = 0; e < theta.size(); ++e) {
    std::uniform_int_distribution<size_t> U(0, theta[e].size() - 1);
    for (int probe = 0; probe < 3; ++probe) {
      const size_t i = U(rng);
      const double keep = theta[e][i];
      theta[e][i] = keep + h;
      const double fp = loss_at(theta).item();
      theta[e][i] = keep - h;
      const double fm = loss_at(theta).item();
      theta[e][i] = keep;
      const double numeric = (fp - fm) / (2 * h);
      worst = std::max(worst,
                       pt::rel_err(fr.param_leaves[e].grad()[i], numeric));
    }
  }
  CHECK(worst < 1e-4);

  // degenerate pose: an empty keypoint set gives finite loss and gradients
  PoseMap2D empty2;
  empty2.S = p2d.S;
  empty2.T = p2d.T;
  empty2.bits.assign(p2d.bits.size(), 0);
  PoseMap3D empty3;
  empty3.S = p3d.S;
  empty3.T = p3d.T;
  empty3.K = p3d.K;
  empty3.bits.assign(p3d.bits.size(), 0);
  Tape tape2;
  opt.tape = &tape2;
  opt.pose = &empty2;
  auto fr2 = model.forward(video, opt);
  Tensor loss2 = classify_loss(fr2.logits, 0);
  loss2 = add(loss2, scale(paat_loss(fr2.paat_predictions[0], empty3), 1.6));
  CHECK(std::isfinite(loss2.item()));
  tape2.backward(loss2);
  for (const auto& leaf : fr2.param_leaves)
    for (double gv : leaf.grad()) CHECK(std::isfinite(gv));
}

TEST_CASE("missing pose map with a configured block is a config error") {
  auto cfg = tiny_config(true, false);
  Model model(cfg);
  CHECK_THROWS_AS(model.forward(random_video(cfg, 19), {}), ConfigError);
}

TEST_CASE("embed-frames mode pools patch tokens per frame") {
  auto cfg = tiny_config(false, false);
  Model model(cfg);
  auto video = random_video(cfg, 23);

  ForwardOptions opt;
  opt.mode = ForwardMode::EmbedFrames;
  opt.capture = true;
  auto fr = model.forward(video, opt);
  const auto g = cfg.token_geometry();
  REQUIRE(fr.frame_embeddings.dim(0) == g.T);
  REQUIRE(fr.frame_embeddings.dim(1) == g.D);

  // reference: layernorm the final tokens with the head norm, mean over S
  const auto& entries = model.params().entries();
  std::vector<double> gamma, beta;
  for (const auto& e : entries) {
    if (e.name == "head.ln.gamma") gamma = e.data;
    if (e.name == "head.ln.beta") beta = e.data;
  }
  const Mat& last = fr.snapshots.back().tokens;
  Tensor normed = layernorm(Tensor::leaf({last.rows, last.cols}, last.a),
                            Tensor::leaf({g.D}, gamma), Tensor::leaf({g.D}, beta));
  for (int t = 0; t < g.T; ++t)
    for (int d = 0; d < g.D; ++d) {
      double acc = 0.0;
      for (int s = 0; s < g.S; ++s)
        acc += normed.data()[static_cast<size_t>(1 + t * g.S + s) * g.D + d];
      acc /= g.S;
      CHECK(fr.frame_embeddings.data()[static_cast<size_t>(t) * g.D + d] ==
            doctest::Approx(acc).epsilon(1e-12));
    }
}
