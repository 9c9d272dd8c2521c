#include "pavt/backbone.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

namespace pavt {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

using nlohmann::json;

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (tau < 1 || H < 1 || W < 1 || C < 1 || patch < 1 || depth < 1 || dim < 1 ||
      heads < 1 || classes < 1 || keypoints < 1)
    throw ConfigError("model config: geometry fields must be positive");
  if (H % patch != 0 || W % patch != 0)
    throw ConfigError("model config: patch " + std::to_string(patch) +
                      " must divide H=" + std::to_string(H) +
                      " and W=" + std::to_string(W));
  if (dim % heads != 0)
    throw ConfigError("model config: heads " + std::to_string(heads) +
                      " must divide dim=" + std::to_string(dim));
  if (ffn_hidden < 0) throw ConfigError("model config: ffn_hidden must be >= 0");
  auto check_layers = [&](const std::vector<int>& layers, const char* who) {
    if (layers.empty())
      throw ConfigError(std::string("model config: ") + who + " needs layer indices");
    std::set<int> seen;
    for (int l : layers) {
      if (l < 1 || l > depth)
        throw ConfigError(std::string("model config: ") + who + " layer " +
                          std::to_string(l) + " outside 1.." + std::to_string(depth));
      if (!seen.insert(l).second)
        throw ConfigError(std::string("model config: ") + who + " layer " +
                          std::to_string(l) + " listed twice");
    }
  };
  if (paab) {
    check_layers(paab->layers, "paab");
    paab_variant_from_string(paab->variant);
    if (paab->count < 1) throw ConfigError("model config: paab count must be >= 1");
  }
  if (paat) {
    check_layers(paat->layers, "paat");
    if (paat->bottleneck > dim)
      throw ConfigError("model config: paat bottleneck " +
                        std::to_string(paat->bottleneck) + " exceeds dim=" +
                        std::to_string(dim));
    if (paat->bottleneck < 0)
      throw ConfigError("model config: paat bottleneck must be >= 0");
    if (paat->lambda < 0.0)
      throw ConfigError("model config: paat lambda must be >= 0");
    if (paat->target != "p3d" && paat->target != "p2d")
      throw ConfigError("model config: paat target must be p3d or p2d, got '" +
                        paat->target + "'");
  }
}

TokenGeometry ModelConfig::token_geometry() const {
  TokenGeometry g;
  g.S = (H / patch) * (W / patch);
  g.T = tau;
  g.D = dim;
  return g;
}

PatchGeometry ModelConfig::patch_geometry() const {
  PatchGeometry g;
  g.patch = patch;
  g.H = H;
  g.W = W;
  g.tau = tau;
  g.frames_per_token = 1;
  return g;
}

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known,
                    const std::string& where) {
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!known.count(it.key()))
      throw ConfigError(where + ": unknown field '" + it.key() + "'");
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

json paab_to_json(const PaabPlacement& p) {
  return json{{"layers", p.layers},
              {"variant", p.variant},
              {"count", p.count},
              {"include_class", p.include_class}};
}

json paat_to_json(const PaatPlacement& p) {
  return json{{"layers", p.layers},
              {"bottleneck", p.bottleneck},
              {"lambda", p.lambda},
              {"target", p.target}};
}

PaabPlacement paab_from_json(const json& j) {
  reject_unknown(j, {"layers", "variant", "count", "include_class"}, "paab");
  PaabPlacement p;
  get_if(j, "layers", p.layers);
  get_if(j, "variant", p.variant);
  get_if(j, "count", p.count);
  get_if(j, "include_class", p.include_class);
  return p;
}

PaatPlacement paat_from_json(const json& j) {
  reject_unknown(j, {"layers", "bottleneck", "lambda", "target"}, "paat");
  PaatPlacement p;
  get_if(j, "layers", p.layers);
  get_if(j, "bottleneck", p.bottleneck);
  get_if(j, "lambda", p.lambda);
  get_if(j, "target", p.target);
  return p;
}

json model_config_to_json(const ModelConfig& c) {
  json j{{"tau", c.tau},       {"H", c.H},
         {"W", c.W},           {"C", c.C},
         {"patch", c.patch},   {"depth", c.depth},
         {"dim", c.dim},       {"heads", c.heads},
         {"classes", c.classes}, {"ffn_hidden", c.ffn_hidden},
         {"keypoints", c.keypoints}, {"seed", c.seed}};
  if (c.paab) j["paab"] = paab_to_json(*c.paab);
  if (c.paat) j["paat"] = paat_to_json(*c.paat);
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  reject_unknown(j,
                 {"tau", "H", "W", "C", "patch", "depth", "dim", "heads", "classes",
                  "ffn_hidden", "keypoints", "seed", "paab", "paat"},
                 "model config");
  ModelConfig c;
  get_if(j, "tau", c.tau);
  get_if(j, "H", c.H);
  get_if(j, "W", c.W);
  get_if(j, "C", c.C);
  get_if(j, "patch", c.patch);
  get_if(j, "depth", c.depth);
  get_if(j, "dim", c.dim);
  get_if(j, "heads", c.heads);
  get_if(j, "classes", c.classes);
  get_if(j, "ffn_hidden", c.ffn_hidden);
  get_if(j, "keypoints", c.keypoints);
  get_if(j, "seed", c.seed);
  if (j.contains("paab")) c.paab = paab_from_json(j.at("paab"));
  if (j.contains("paat")) c.paat = paat_from_json(j.at("paat"));
  c.validate();
  return c;
}

}  // namespace

std::string ModelConfig::to_json() const { return model_config_to_json(*this).dump(); }

ModelConfig ModelConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  try {
    return model_config_from_json(j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

ParamEntry& ParamStore::add(const std::string& name, Shape shape) {
  for (const auto& e : entries_)
    if (e.name == name) throw ConfigError("param store: duplicate name " + name);
  ParamEntry e;
  e.name = name;
  e.shape = std::move(shape);
  e.data.assign(static_cast<size_t>(numel(e.shape)), 0.0);
  entries_.push_back(std::move(e));
  return entries_.back();
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += static_cast<int64_t>(e.data.size());
  return n;
}

void ParamStore::add_flat(const std::vector<double>& flat, double s,
                          std::vector<double>& accum) const {
  if (flat.size() != static_cast<size_t>(total_size()) || accum.size() != flat.size())
    throw ConfigError("param store: flat buffer size mismatch");
  for (size_t i = 0; i < flat.size(); ++i) accum[i] += s * flat[i];
}

namespace {

struct ParamBuilder {
  ParamStore& store;
  std::mt19937_64 rng;

  void weight(const std::string& name, Shape shape) {
    auto& e = store.add(name, std::move(shape));
    fill_trunc_normal(e.data, 0.02, rng);
  }
  void bias(const std::string& name, int n) { store.add(name, {n}); }
  void ln(const std::string& prefix, int n) {
    auto& g = store.add(prefix + ".gamma", {n});
    std::fill(g.data.begin(), g.data.end(), 1.0);
    store.add(prefix + ".beta", {n});
  }
  void attention(const std::string& prefix, int dim) {
    for (const char* w : {"wq", "wk", "wv", "wo"}) weight(prefix + "." + w, {dim, dim});
    for (const char* b : {"bq", "bk", "bv", "bo"}) bias(prefix + "." + b, dim);
  }
  void ffn(const std::string& prefix, int dim, int hidden) {
    weight(prefix + ".w1", {dim, hidden});
    bias(prefix + ".b1", hidden);
    weight(prefix + ".w2", {hidden, dim});
    bias(prefix + ".b2", dim);
  }
};

void declare_params(const ModelConfig& cfg, ParamStore& store) {
  const auto geom = cfg.token_geometry();
  ParamBuilder b{store, rng_stream(cfg.seed, 0x9A7A)};
  b.weight("embed.w", {cfg.patch * cfg.patch * cfg.C, cfg.dim});
  b.bias("embed.b", cfg.dim);
  b.weight("cls", {1, cfg.dim});
  b.weight("pos.spatial", {geom.S, cfg.dim});
  b.weight("pos.temporal", {geom.T, cfg.dim});
  for (int l = 1; l <= cfg.depth; ++l) {
    const std::string p = "layer" + std::to_string(l);
    b.ln(p + ".ln1", cfg.dim);
    b.attention(p + ".attn", cfg.dim);
    b.ln(p + ".ln2", cfg.dim);
    b.ffn(p + ".ffn", cfg.dim, cfg.ffn_width());
  }
  if (cfg.paab) {
    auto layers = cfg.paab->layers;
    std::sort(layers.begin(), layers.end());
    const bool factorized = cfg.paab->variant == "factorized_pa_sta";
    for (int l : layers)
      for (int c = 0; c < cfg.paab->count; ++c) {
        const std::string p =
            "paab" + std::to_string(l) + "." + std::to_string(c);
        if (factorized) {
          b.ln(p + ".lnt", cfg.dim);
          b.attention(p + ".attnt", cfg.dim);
        }
        b.ln(p + ".ln1", cfg.dim);
        b.attention(p + ".attn", cfg.dim);
        b.ln(p + ".ln2", cfg.dim);
        b.ffn(p + ".ffn", cfg.dim, cfg.ffn_width());
      }
  }
  if (cfg.paat) {
    const int de = cfg.paat_bottleneck();
    const int out = cfg.paat->target == "p2d" ? 1 : cfg.keypoints;
    auto layers = cfg.paat->layers;
    std::sort(layers.begin(), layers.end());
    for (int l : layers) {
      const std::string p = "paat" + std::to_string(l);
      b.weight(p + ".w1", {cfg.dim, de});
      b.bias(p + ".b1", de);
      b.weight(p + ".w2", {de, out});
      b.bias(p + ".b2", out);
    }
  }
  b.ln("head.ln", cfg.dim);
  b.weight("head.w", {cfg.dim, cfg.classes});
  b.bias("head.b", cfg.classes);
}

}  // namespace

// ---------------------------------------------------------------------------
// model
// ---------------------------------------------------------------------------

Model::Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  declare_params(cfg_, params_);
}

Mat extract_patches(const VideoTensor& video, int patch) {
  if (video.H % patch != 0 || video.W % patch != 0)
    throw ConfigError("extract_patches: patch " + std::to_string(patch) +
                      " must divide the frame");
  const int py = video.H / patch, px = video.W / patch;
  const int S = py * px;
  Mat out(video.tau * S, patch * patch * video.C);
  for (int t = 0; t < video.tau; ++t)
    for (int gy = 0; gy < py; ++gy)
      for (int gx = 0; gx < px; ++gx) {
        double* row = out.row(t * S + gy * px + gx);
        int i = 0;
        for (int dy = 0; dy < patch; ++dy)
          for (int dx = 0; dx < patch; ++dx)
            for (int c = 0; c < video.C; ++c)
              row[i++] = video.at(t, gy * patch + dy, gx * patch + dx, c);
      }
  return out;
}

namespace {

// Per-pass view: leaves over the parameter store, tracked iff a tape is given.
struct BoundParams {
  const ParamStore& store;
  std::vector<Tensor> leaves;

  BoundParams(const ParamStore& s, Tape* tape) : store(s) {
    leaves.reserve(s.entries().size());
    for (const auto& e : s.entries())
      leaves.push_back(Tensor::leaf(e.shape, e.data, tape != nullptr, tape));
  }

  Tensor operator()(const std::string& name) const {
    const auto& es = store.entries();
    for (size_t i = 0; i < es.size(); ++i)
      if (es[i].name == name) return leaves[i];
    throw ConfigError("model: unknown parameter " + name);
  }
};

AttentionParams bind_attention(const BoundParams& P, const std::string& prefix,
                               int heads) {
  AttentionParams a;
  a.Wq = P(prefix + ".wq");
  a.bq = P(prefix + ".bq");
  a.Wk = P(prefix + ".wk");
  a.bk = P(prefix + ".bk");
  a.Wv = P(prefix + ".wv");
  a.bv = P(prefix + ".bv");
  a.Wo = P(prefix + ".wo");
  a.bo = P(prefix + ".bo");
  a.heads = heads;
  return a;
}

LayerNormParams bind_ln(const BoundParams& P, const std::string& prefix) {
  return {P(prefix + ".gamma"), P(prefix + ".beta")};
}

FfnParams bind_ffn(const BoundParams& P, const std::string& prefix) {
  return {P(prefix + ".w1"), P(prefix + ".b1"), P(prefix + ".w2"), P(prefix + ".b2")};
}

Tensor paat_predict(const Tensor& z_patches, const BoundParams& P,
                    const std::string& prefix) {
  Tensor h = add_rowvec(matmul(z_patches, P(prefix + ".w1")), P(prefix + ".b1"));
  return sigmoid(add_rowvec(matmul(h, P(prefix + ".w2")), P(prefix + ".b2")));
}

}  // namespace

namespace {

TokenSequence embed_sequence(const ModelConfig& cfg, const BoundParams& P,
                             const VideoTensor& video) {
  const TokenGeometry geom = cfg.token_geometry();
  Mat patches = extract_patches(video, cfg.patch);
  Tensor X = Tensor::leaf({patches.rows, patches.cols}, patches.a);
  Tensor tokens = add_rowvec(matmul(X, P("embed.w")), P("embed.b"));
  std::vector<int> sidx(static_cast<size_t>(geom.S * geom.T));
  std::vector<int> tidx(sidx.size());
  for (int i = 0; i < geom.S * geom.T; ++i) {
    sidx[static_cast<size_t>(i)] = i % geom.S;
    tidx[static_cast<size_t>(i)] = i / geom.S;
  }
  tokens = add(tokens, select_rows(P("pos.spatial"), sidx));
  tokens = add(tokens, select_rows(P("pos.temporal"), tidx));
  return {concat_rows({P("cls"), tokens}), geom};
}

}  // namespace

Mat Model::embed_tokens(const VideoTensor& video) const {
  BoundParams P(params_, nullptr);
  return embed_sequence(cfg_, P, video).tokens.to_mat();
}

ForwardResult Model::forward(const VideoTensor& video, const ForwardOptions& opt) const {
  if (video.tau != cfg_.tau || video.H != cfg_.H || video.W != cfg_.W ||
      video.C != cfg_.C)
    throw ConfigError("model: clip geometry " + std::to_string(video.tau) + "x" +
                      std::to_string(video.H) + "x" + std::to_string(video.W) + "x" +
                      std::to_string(video.C) + " does not match the config");
  const TokenGeometry geom = cfg_.token_geometry();
  if (cfg_.paab && !opt.pose)
    throw ConfigError("model: the configured pose-aware block needs a pose map");
  if (opt.pose && static_cast<int>(opt.pose->bits.size()) != geom.S * geom.T)
    throw ConfigError("model: pose map size " + std::to_string(opt.pose->bits.size()) +
                      " does not match S*T=" + std::to_string(geom.S * geom.T));

  ForwardResult res;
  BoundParams P(params_, opt.tape);
  res.param_leaves = P.leaves;
  TokenSequence x = embed_sequence(cfg_, P, video);

  const bool factorized = cfg_.paab && cfg_.paab->variant == "factorized_pa_sta";
  const PaabVariant variant =
      cfg_.paab ? paab_variant_from_string(cfg_.paab->variant) : PaabVariant::PaSa;

  for (int l = 1; l <= cfg_.depth; ++l) {
    if (opt.with_paat && cfg_.paat &&
        std::count(cfg_.paat->layers.begin(), cfg_.paat->layers.end(), l)) {
      Tensor z = slice_rows(x.tokens, 1, geom.tokens());
      res.paat_predictions.push_back(
          paat_predict(z, P, "paat" + std::to_string(l)));
    }

    const std::string p = "layer" + std::to_string(l);
    AttentionCapture ac;
    TokenSequence normed = x;
    normed.tokens = layernorm(x.tokens, P(p + ".ln1.gamma"), P(p + ".ln1.beta"));
    TokenSequence a = divided_attention(normed, bind_attention(P, p + ".attn", cfg_.heads),
                                        opt.capture ? &ac : nullptr);
    x.tokens = add(x.tokens, a.tokens);
    Mat pre, post;
    if (opt.capture) pre = x.tokens.to_mat();
    Tensor f = ffn_forward(
        layernorm(x.tokens, P(p + ".ln2.gamma"), P(p + ".ln2.beta")),
        bind_ffn(P, p + ".ffn"));
    x.tokens = add(x.tokens, f);
    if (opt.capture) {
      post = x.tokens.to_mat();
      LayerSnapshot snap;
      snap.layer = l;
      snap.kind = "backbone";
      snap.tokens = x.tokens.to_mat();
      snap.attention = std::move(ac.heads);
      snap.pre_ffn = std::move(pre);
      snap.post_ffn = std::move(post);
      if (opt.pose) snap.pose_bits = opt.pose->bits;
      res.snapshots.push_back(std::move(snap));
    }

    if (cfg_.paab &&
        std::count(cfg_.paab->layers.begin(), cfg_.paab->layers.end(), l)) {
      for (int c = 0; c < cfg_.paab->count; ++c) {
        const std::string bp = "paab" + std::to_string(l) + "." + std::to_string(c);
        PaabParams pp;
        pp.ln_attn = bind_ln(P, bp + ".ln1");
        pp.attn = bind_attention(P, bp + ".attn", cfg_.heads);
        if (factorized) {
          pp.ln_temporal = bind_ln(P, bp + ".lnt");
          pp.attn_temporal = bind_attention(P, bp + ".attnt", cfg_.heads);
        }
        pp.ln_ffn = bind_ln(P, bp + ".ln2");
        pp.ffn = bind_ffn(P, bp + ".ffn");
        PaabCapture pc;
        x = paab_forward(x, *opt.pose, variant, pp, cfg_.paab->include_class,
                         opt.capture ? &pc : nullptr);
        if (opt.capture) {
          LayerSnapshot snap;
          snap.layer = l;
          snap.kind = "paab";
          snap.tokens = x.tokens.to_mat();
          snap.attention = std::move(pc.attention.heads);
          snap.pre_ffn = std::move(pc.pre_ffn);
          snap.post_ffn = std::move(pc.post_ffn);
          snap.pose_bits = opt.pose->bits;
          res.snapshots.push_back(std::move(snap));
        }
      }
    }
  }

  Tensor xn = layernorm(x.tokens, P("head.ln.gamma"), P("head.ln.beta"));
  res.class_feature = slice_rows(xn, 0, 1);
  if (opt.mode == ForwardMode::Classify) {
    res.logits = add_rowvec(matmul(res.class_feature, P("head.w")), P("head.b"));
  } else {
    // Mean-pool the spatial tokens of each frame.
    Mat pool(geom.T, geom.tokens());
    for (int t = 0; t < geom.T; ++t)
      for (int s = 0; s < geom.S; ++s)
        pool.at(t, 1 + t * geom.S + s) = 1.0 / geom.S;
    Tensor Pm = Tensor::leaf({pool.rows, pool.cols}, pool.a);
    res.frame_embeddings = matmul(Pm, xn);
  }
  return res;
}

// ---------------------------------------------------------------------------
// losses
// ---------------------------------------------------------------------------

LossReport total_loss(double primary, double paat, double lambda) {
  if (lambda < 0.0) throw ConfigError("total_loss: lambda must be >= 0");
  LossReport r;
  r.primary = primary;
  r.paat = paat;
  r.lambda = lambda;
  r.total = lambda * paat + primary;
  return r;
}

Tensor classify_loss(const Tensor& logits, int label) {
  return softmax_cross_entropy(logits, label);
}

Tensor paat_loss(const Tensor& pred, const PoseMap3D& target) {
  if (pred.rank() != 2 || pred.dim(0) != target.S * target.T ||
      pred.dim(1) != target.K)
    throw ConfigError("paat_loss: prediction " + shape_str(pred.shape()) +
                      " does not match pose map " + std::to_string(target.S * target.T) +
                      "x" + std::to_string(target.K));
  std::vector<double> t(target.bits.begin(), target.bits.end());
  return bce_mean(pred, Tensor::leaf(pred.shape(), std::move(t)));
}

Tensor paat_loss_2d(const Tensor& pred, const PoseMap2D& target) {
  if (pred.rank() != 2 || pred.dim(0) != target.S * target.T || pred.dim(1) != 1)
    throw ConfigError("paat_loss_2d: prediction " + shape_str(pred.shape()) +
                      " does not match pose map " + std::to_string(target.S * target.T) +
                      "x1");
  std::vector<double> t(target.bits.begin(), target.bits.end());
  return bce_mean(pred, Tensor::leaf(pred.shape(), std::move(t)));
}

std::vector<int> sample_tcn_negatives(int T, int window, std::mt19937_64& rng) {
  if (window < 0) throw ConfigError("tcn: window must be >= 0");
  std::vector<int> neg(static_cast<size_t>(T), -1);
  bool any = false;
  for (int t = 0; t < T; ++t) {
    std::vector<int> valid;
    for (int u = 0; u < T; ++u)
      if (std::abs(u - t) > window) valid.push_back(u);
    if (valid.empty()) continue;
    std::uniform_int_distribution<size_t> U(0, valid.size() - 1);
    neg[static_cast<size_t>(t)] = valid[U(rng)];
    any = true;
  }
  if (!any)
    throw ConfigError("tcn: no valid triplet, " + std::to_string(T) +
                      " frames with window " + std::to_string(window));
  return neg;
}

Tensor tcn_loss(const Tensor& emb_a, const Tensor& emb_b, double margin,
                const std::vector<int>& negatives) {
  if (emb_a.rank() != 2 || emb_a.shape() != emb_b.shape())
    throw ConfigError("tcn_loss: embeddings must be two equal-shape matrices");
  const int T = emb_a.dim(0);
  if (static_cast<int>(negatives.size()) != T)
    throw ConfigError("tcn_loss: one negative index per frame expected");
  Tensor acc;
  int valid = 0;
  for (int t = 0; t < T; ++t) {
    const int n = negatives[static_cast<size_t>(t)];
    if (n < 0) continue;
    if (n >= T) throw ConfigError("tcn_loss: negative index out of range");
    Tensor anchor = slice_rows(emb_a, t, t + 1);
    Tensor dp = sub(anchor, slice_rows(emb_b, t, t + 1));
    Tensor dn = sub(anchor, slice_rows(emb_a, n, n + 1));
    Tensor gap = sub(sum(mul(dp, dp)), sum(mul(dn, dn)));
    Tensor hinge = relu(add(gap, Tensor::scalar(margin)));
    acc = valid == 0 ? hinge : add(acc, hinge);
    ++valid;
  }
  if (valid == 0) throw ConfigError("tcn_loss: no valid triplet");
  return scale(acc, 1.0 / valid);
}

// ---------------------------------------------------------------------------
// checkpoint
// ---------------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', 'A', 'V', 'T'};
constexpr uint16_t kFormatVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

template <typename T>
T read_pod(std::ifstream& in, const char* what) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw DataError(std::string("checkpoint: truncated while reading ") + what);
  return v;
}

}  // namespace

void checkpoint_save(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("checkpoint: cannot write " + path.string());
  out.write(kMagic, 4);
  write_pod(out, kFormatVersion);
  const std::string cfg = model.config().to_json();
  write_pod(out, static_cast<uint32_t>(cfg.size()));
  out.write(cfg.data(), static_cast<std::streamsize>(cfg.size()));
  for (const auto& e : model.params().entries()) {
    write_pod(out, static_cast<uint32_t>(e.shape.size()));
    for (int d : e.shape) write_pod(out, static_cast<uint32_t>(d));
    out.write(reinterpret_cast<const char*>(e.data.data()),
              static_cast<std::streamsize>(e.data.size() * sizeof(double)));
  }
  if (!out) throw DataError("checkpoint: write failed for " + path.string());
}

Model checkpoint_load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint: cannot open " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw DataError("checkpoint: bad magic in " + path.string());
  const auto version = read_pod<uint16_t>(in, "version");
  if (version != kFormatVersion)
    throw DataError("checkpoint: format version " + std::to_string(version) +
                    " not supported (expected " + std::to_string(kFormatVersion) + ")");
  const auto cfg_len = read_pod<uint32_t>(in, "config length");
  std::string cfg_text(cfg_len, '\0');
  in.read(cfg_text.data(), cfg_len);
  if (!in) throw DataError("checkpoint: truncated config block");
  Model model(ModelConfig::from_json_text(cfg_text));
  for (auto& e : model.params().entries()) {
    const auto rank = read_pod<uint32_t>(in, ("rank of " + e.name).c_str());
    Shape shape(rank);
    for (auto& d : shape)
      d = static_cast<int>(read_pod<uint32_t>(in, ("dims of " + e.name).c_str()));
    if (shape != e.shape)
      throw DataError("checkpoint: parameter " + e.name + " has shape " +
                      shape_str(shape) + ", config implies " + shape_str(e.shape));
    in.read(reinterpret_cast<char*>(e.data.data()),
            static_cast<std::streamsize>(e.data.size() * sizeof(double)));
    if (!in) throw DataError("checkpoint: truncated data for " + e.name);
  }
  char extra;
  if (in.read(&extra, 1))
    throw DataError("checkpoint: trailing bytes in " + path.string());
  return model;
}

}  // namespace pavt
