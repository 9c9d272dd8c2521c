#include "pavt/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>

#include <json.hpp>

namespace pavt {

using nlohmann::json;

ViewTransform ViewTransform::inverse() const {
  const double det = a * d - b * c;
  if (std::abs(det) < 1e-12) throw DataError("view transform: singular matrix");
  ViewTransform inv;
  inv.a = d / det;
  inv.b = -b / det;
  inv.c = -c / det;
  inv.d = a / det;
  inv.tx = -(inv.a * tx + inv.b * ty);
  inv.ty = -(inv.c * tx + inv.d * ty);
  return inv;
}

bool ViewTransform::is_identity() const {
  return a == 1 && b == 0 && c == 0 && d == 1 && tx == 0 && ty == 0;
}

void GeneratorSpec::validate() const {
  if (kind != "classification" && kind != "alignment")
    throw ConfigError("generator spec: kind must be classification or alignment");
  if (classes < 2) throw ConfigError("generator spec: need at least 2 classes");
  if (keypoints < 2) throw ConfigError("generator spec: need at least 2 keypoints");
  if (tau < 2 || H < 16 || W < 16 || C < 1)
    throw ConfigError("generator spec: clip geometry too small");
  if (train_count < 0 || test_count < 0)
    throw ConfigError("generator spec: sample counts must be >= 0");
  if (distractors < 0) throw ConfigError("generator spec: distractors must be >= 0");
  if (blob_sigma <= 0) throw ConfigError("generator spec: blob sigma must be > 0");
  if (view.scale_min <= 0 || view.scale_max < view.scale_min)
    throw ConfigError("generator spec: bad view scale range");
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

}  // namespace

std::string GeneratorSpec::to_json() const {
  json j{{"kind", kind},
         {"classes", classes},
         {"keypoints", keypoints},
         {"tau", tau},
         {"H", H},
         {"W", W},
         {"C", C},
         {"train_count", train_count},
         {"test_count", test_count},
         {"distractors", distractors},
         {"blob_sigma", blob_sigma},
         {"seed", seed},
         {"view",
          {{"rotation_max", view.rotation_max},
           {"scale_min", view.scale_min},
           {"scale_max", view.scale_max},
           {"translate_max", view.translate_max}}}};
  return j.dump();
}

GeneratorSpec GeneratorSpec::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("generator spec: ") + e.what());
  }
  GeneratorSpec s;
  try {
    reject_unknown(j,
                   {"kind", "classes", "keypoints", "tau", "H", "W", "C",
                    "train_count", "test_count", "distractors", "blob_sigma", "seed",
                    "view"},
                   "generator spec");
    get_if(j, "kind", s.kind);
    get_if(j, "classes", s.classes);
    get_if(j, "keypoints", s.keypoints);
    get_if(j, "tau", s.tau);
    get_if(j, "H", s.H);
    get_if(j, "W", s.W);
    get_if(j, "C", s.C);
    get_if(j, "train_count", s.train_count);
    get_if(j, "test_count", s.test_count);
    get_if(j, "distractors", s.distractors);
    get_if(j, "blob_sigma", s.blob_sigma);
    get_if(j, "seed", s.seed);
    if (j.contains("view")) {
      const auto& v = j.at("view");
      reject_unknown(v, {"rotation_max", "scale_min", "scale_max", "translate_max"},
                     "generator spec view");
      get_if(v, "rotation_max", s.view.rotation_max);
      get_if(v, "scale_min", s.view.scale_min);
      get_if(v, "scale_max", s.view.scale_max);
      get_if(v, "translate_max", s.view.translate_max);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("generator spec: ") + e.what());
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// scene model
// ---------------------------------------------------------------------------

namespace {

constexpr uint64_t kFigureStream = 0xF16;
constexpr uint64_t kDistractStream = 0xD157;
constexpr uint64_t kViewStream = 0x71E3;

struct BlobTrack {
  // One moving cluster of keypoint-like blobs with no label information.
  double cx, cy, vx, vy;
  std::vector<std::pair<double, double>> offsets;
};

std::vector<BlobTrack> distractor_tracks(const GeneratorSpec& spec,
                                         uint64_t sample_key) {
  auto rng = rng_stream(spec.seed, kDistractStream, sample_key);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  std::vector<BlobTrack> tracks;
  for (int i = 0; i < spec.distractors; ++i) {
    BlobTrack t;
    t.cx = 4.0 + U(rng) * (spec.W - 8.0);
    t.cy = 4.0 + U(rng) * (spec.H - 8.0);
    const double ang = U(rng) * 2.0 * M_PI;
    const double speed = 0.7 + U(rng) * 1.1;
    t.vx = std::cos(ang) * speed;
    t.vy = std::sin(ang) * speed;
    const int blobs = 2 + static_cast<int>(U(rng) * 3.0);
    for (int b = 0; b < blobs; ++b) {
      const double r = 1.5 + U(rng) * 3.5;
      const double a = U(rng) * 2.0 * M_PI;
      t.offsets.push_back({r * std::cos(a), r * std::sin(a)});
    }
    tracks.push_back(std::move(t));
  }
  return tracks;
}

}  // namespace

std::vector<std::pair<double, double>> figure_track(const GeneratorSpec& spec,
                                                    int label, uint64_t sample_key) {
  auto rng = rng_stream(spec.seed, kFigureStream, sample_key);
  std::uniform_real_distribution<double> U(-1.0, 1.0);

  // Class identity: heading of the hub plus limb oscillation frequency.
  const double heading = 2.0 * M_PI * label / spec.classes;
  const double freq = 0.5 + 0.3 * label;
  const double speed = 1.25;
  const double limb_radius = 4.5;
  const double osc_amp = 0.8;

  const double cx0 = spec.W / 2.0 + 2.0 * U(rng);
  const double cy0 = spec.H / 2.0 + 2.0 * U(rng);
  const double phase0 = 0.12 * U(rng);

  const int K = spec.keypoints;
  // Hub drift bounded to keep the limbs inside the frame.
  const double max_travel =
      std::min(spec.W, spec.H) / 2.0 - limb_radius - 3.5;
  const double step = std::min(speed, max_travel / (spec.tau - 1));
  std::vector<std::pair<double, double>> coords(static_cast<size_t>(spec.tau) * K);
  for (int t = 0; t < spec.tau; ++t) {
    const double phase_t = static_cast<double>(t) / (spec.tau - 1);
    const double travel = step * t;
    const double cx = cx0 + travel * std::cos(heading);
    const double cy = cy0 + travel * std::sin(heading);
    coords[static_cast<size_t>(t) * K + 0] = {cx, cy};
    for (int k = 1; k < K; ++k) {
      const double base = 2.0 * M_PI * (k - 1) / (K - 1);
      const double ang = base + osc_amp * std::sin(2.0 * M_PI * freq * phase_t +
                                                   phase0 + 0.9 * k);
      coords[static_cast<size_t>(t) * K + k] = {cx + limb_radius * std::cos(ang),
                                                cy + limb_radius * std::sin(ang)};
    }
  }
  return coords;
}

namespace {

int clamp_coord(double v, int hi) {
  const int r = static_cast<int>(std::lround(v));
  return std::clamp(r, 0, hi - 1);
}

KeypointSet round_track(const GeneratorSpec& spec,
                        const std::vector<std::pair<double, double>>& track) {
  KeypointSet kps;
  kps.tau = spec.tau;
  kps.K = spec.keypoints;
  kps.H = spec.H;
  kps.W = spec.W;
  for (int t = 0; t < spec.tau; ++t)
    for (int k = 0; k < spec.keypoints; ++k) {
      const auto [x, y] = track[static_cast<size_t>(t) * spec.keypoints + k];
      kps.points.push_back(
          {t + 1, k + 1, clamp_coord(x, spec.W), clamp_coord(y, spec.H)});
    }
  return kps;
}

void add_blob(VideoTensor& frames, int t, double x, double y, double amp,
              double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  const int xi = static_cast<int>(std::lround(x));
  const int yi = static_cast<int>(std::lround(y));
  for (int dy = -radius; dy <= radius; ++dy) {
    const int py = yi + dy;
    if (py < 0 || py >= frames.H) continue;
    for (int dx = -radius; dx <= radius; ++dx) {
      const int px = xi + dx;
      if (px < 0 || px >= frames.W) continue;
      const double ddx = px - x, ddy = py - y;
      const double v = amp * std::exp(-(ddx * ddx + ddy * ddy) / (2.0 * sigma * sigma));
      for (int c = 0; c < frames.C; ++c)
        frames.at(t, py, px, c) += v * (1.0 - 0.15 * c);
    }
  }
}

void add_segment(VideoTensor& frames, int t, double x0, double y0, double x1,
                 double y1, double amp) {
  const double len = std::hypot(x1 - x0, y1 - y0);
  const int steps = std::max(2, static_cast<int>(len * 2.0));
  for (int i = 0; i <= steps; ++i) {
    const double u = static_cast<double>(i) / steps;
    add_blob(frames, t, x0 + u * (x1 - x0), y0 + u * (y1 - y0), amp, 0.6);
  }
}

// Renders figure (blobs at integer keypoints, limbs hub->keypoint), transformed
// distractors, and a mild moving background texture; clamps to [0,1] and
// quantizes to float32 so disk round-trips are lossless.
void render_sample(const GeneratorSpec& spec, VideoSample& sample,
                   const std::vector<BlobTrack>& distractors,
                   const ViewTransform& vt, uint64_t sample_key) {
  sample.frames = VideoTensor(spec.tau, spec.H, spec.W, spec.C);
  auto rng = rng_stream(spec.seed, 0xBA5E, sample_key);
  std::uniform_real_distribution<double> U(0.0, 2.0 * M_PI);
  const double bg_phase = U(rng);

  for (int t = 0; t < spec.tau; ++t) {
    for (int y = 0; y < spec.H; ++y)
      for (int x = 0; x < spec.W; ++x) {
        const double v =
            0.05 * (1.0 + std::sin(2.0 * M_PI * (x + y + 2.5 * t) / 17.0 + bg_phase));
        for (int c = 0; c < spec.C; ++c) sample.frames.at(t, y, x, c) += v;
      }
    for (const auto& d : distractors)
      for (const auto& [ox, oy] : d.offsets) {
        const auto [dx, dy] = vt.apply(d.cx + d.vx * t + ox, d.cy + d.vy * t + oy);
        add_blob(sample.frames, t, dx, dy, 1.0, spec.blob_sigma);
      }
  }

  // Figure drawn from the stored integer keypoints so blobs coincide with
  // the annotation exactly.
  std::vector<std::pair<int, int>> at(static_cast<size_t>(spec.keypoints));
  for (const auto& p : sample.kps.points) at[static_cast<size_t>(p.k - 1)] = {p.x, p.y};
  for (int t = 1; t <= spec.tau; ++t) {
    for (const auto& p : sample.kps.points)
      if (p.t == t) at[static_cast<size_t>(p.k - 1)] = {p.x, p.y};
    const auto [hx, hy] = at[0];
    for (int k = 1; k < spec.keypoints; ++k)
      add_segment(sample.frames, t - 1, hx, hy, at[static_cast<size_t>(k)].first,
                  at[static_cast<size_t>(k)].second, 0.30);
    for (int k = 0; k < spec.keypoints; ++k)
      add_blob(sample.frames, t - 1, at[static_cast<size_t>(k)].first,
               at[static_cast<size_t>(k)].second, 1.0, spec.blob_sigma);
  }

  for (auto& v : sample.frames.v)
    v = static_cast<double>(static_cast<float>(std::clamp(v, 0.0, 1.0)));
}

}  // namespace

std::vector<VideoSample> generate_classification_set(const GeneratorSpec& spec, int n,
                                                     const std::string& split,
                                                     int id_offset) {
  spec.validate();
  if (n < 0) throw ConfigError("generate: sample count must be >= 0");
  std::vector<VideoSample> out(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    VideoSample& s = out[static_cast<size_t>(i)];
    s.id = id_offset + i;
    s.label = s.id % spec.classes;
    s.split = split;
    const uint64_t key = static_cast<uint64_t>(s.id);
    s.kps = round_track(spec, figure_track(spec, s.label, key));
    render_sample(spec, s, distractor_tracks(spec, key), ViewTransform{}, key);
  }
  return out;
}

std::pair<VideoSample, VideoSample> generate_aligned_pair(const GeneratorSpec& spec,
                                                          int episode) {
  spec.validate();
  const uint64_t key = static_cast<uint64_t>(episode);
  const int label = episode % spec.classes;

  VideoSample a;
  a.id = 2 * episode;
  a.label = label;
  a.view = 0;
  a.episode = episode;
  a.kps = round_track(spec, figure_track(spec, label, key));

  // Draw a view transform about the frame center; shrink toward identity if it
  // pushes the figure out of frame.
  auto rng = rng_stream(spec.seed, kViewStream, key);
  std::uniform_real_distribution<double> U(-1.0, 1.0);
  std::uniform_real_distribution<double> U01(0.0, 1.0);
  double theta = spec.view.rotation_max * U(rng);
  double scale_v = spec.view.scale_min +
                   U01(rng) * (spec.view.scale_max - spec.view.scale_min);
  double tx = spec.view.translate_max * U(rng);
  double ty = spec.view.translate_max * U(rng);

  VideoSample b;
  b.id = 2 * episode + 1;
  b.label = label;
  b.view = 1;
  b.episode = episode;
  bool regenerated = false;
  ViewTransform vt;
  for (int attempt = 0;; ++attempt) {
    const double cxm = (spec.W - 1) / 2.0, cym = (spec.H - 1) / 2.0;
    vt.a = scale_v * std::cos(theta);
    vt.b = -scale_v * std::sin(theta);
    vt.c = scale_v * std::sin(theta);
    vt.d = scale_v * std::cos(theta);
    vt.tx = cxm - (vt.a * cxm + vt.b * cym) + tx;
    vt.ty = cym - (vt.c * cxm + vt.d * cym) + ty;
    bool inside = true;
    for (const auto& p : a.kps.points) {
      const auto [x, y] = vt.apply(p.x, p.y);
      if (x < 0 || x > spec.W - 1 || y < 0 || y > spec.H - 1) {
        inside = false;
        break;
      }
    }
    if (inside) break;
    if (attempt >= 20) {
      vt = ViewTransform{};
      regenerated = true;
      break;
    }
    theta *= 0.8;
    scale_v = 1.0 + (scale_v - 1.0) * 0.8;
    tx *= 0.8;
    ty *= 0.8;
    regenerated = true;
  }

  b.view_transform = vt;
  b.regenerated = regenerated;
  b.kps.tau = spec.tau;
  b.kps.K = spec.keypoints;
  b.kps.H = spec.H;
  b.kps.W = spec.W;
  for (const auto& p : a.kps.points) {
    const auto [x, y] = vt.apply(p.x, p.y);
    b.kps.points.push_back(
        {p.t, p.k, clamp_coord(x, spec.W), clamp_coord(y, spec.H)});
  }

  const auto distractors = distractor_tracks(spec, key);
  render_sample(spec, a, distractors, ViewTransform{}, key);
  render_sample(spec, b, distractors, vt, key);
  return {std::move(a), std::move(b)};
}

Dataset generate_dataset(const GeneratorSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  if (spec.kind == "classification") {
    auto train = generate_classification_set(spec, spec.train_count, "train", 0);
    auto test =
        generate_classification_set(spec, spec.test_count, "test", spec.train_count);
    ds.samples = std::move(train);
    ds.samples.insert(ds.samples.end(), std::make_move_iterator(test.begin()),
                      std::make_move_iterator(test.end()));
  } else {
    for (int e = 0; e < spec.train_count + spec.test_count; ++e) {
      auto [a, b] = generate_aligned_pair(spec, e);
      a.split = b.split = e < spec.train_count ? "train" : "test";
      ds.samples.push_back(std::move(a));
      ds.samples.push_back(std::move(b));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// disk format
// ---------------------------------------------------------------------------

namespace {

std::string frames_name(const VideoSample& s) {
  return "frames_" + std::to_string(s.id) + ".f32";
}

std::string kps_name(const VideoSample& s) {
  return "kps_" + std::to_string(s.id) + ".json";
}

void write_frames(const VideoTensor& v, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("dataset: cannot write " + path.string());
  const uint32_t dims[4] = {static_cast<uint32_t>(v.tau), static_cast<uint32_t>(v.H),
                            static_cast<uint32_t>(v.W), static_cast<uint32_t>(v.C)};
  out.write(reinterpret_cast<const char*>(dims), 16);
  std::vector<float> f(v.v.size());
  for (size_t i = 0; i < v.v.size(); ++i) f[i] = static_cast<float>(v.v[i]);
  out.write(reinterpret_cast<const char*>(f.data()),
            static_cast<std::streamsize>(f.size() * sizeof(float)));
  if (!out) throw DataError("dataset: write failed for " + path.string());
}

VideoTensor read_frames(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("dataset: cannot open " + path.string());
  uint32_t dims[4];
  in.read(reinterpret_cast<char*>(dims), 16);
  if (!in) throw DataError("dataset: truncated header in " + path.string());
  VideoTensor v(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                static_cast<int>(dims[2]), static_cast<int>(dims[3]));
  std::vector<float> f(v.v.size());
  in.read(reinterpret_cast<char*>(f.data()),
          static_cast<std::streamsize>(f.size() * sizeof(float)));
  if (!in) throw DataError("dataset: truncated frames in " + path.string());
  for (size_t i = 0; i < f.size(); ++i) v.v[i] = static_cast<double>(f[i]);
  return v;
}

}  // namespace

void dataset_write(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json manifest;
  manifest["version"] = 1;
  manifest["generator"] = json::parse(ds.spec.to_json());
  auto samples = json::array();
  for (const auto& s : ds.samples) {
    write_frames(s.frames, dir / frames_name(s));
    save_keypoints_json(s.kps, dir / kps_name(s));
    json e{{"id", s.id},
           {"label", s.label},
           {"split", s.split},
           {"view", s.view},
           {"episode", s.episode},
           {"frames", frames_name(s)},
           {"keypoints", kps_name(s)},
           {"regenerated", s.regenerated},
           {"view_transform",
            {s.view_transform.a, s.view_transform.b, s.view_transform.c,
             s.view_transform.d, s.view_transform.tx, s.view_transform.ty}}};
    samples.push_back(std::move(e));
  }
  manifest["samples"] = std::move(samples);
  std::ofstream out(dir / "manifest.json");
  if (!out) throw DataError("dataset: cannot write manifest in " + dir.string());
  out << manifest.dump(2) << "\n";
}

Dataset dataset_read(const std::filesystem::path& dir, const std::string& split_filter) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw DataError("dataset: cannot open " + (dir / "manifest.json").string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError("dataset: manifest: " + std::string(e.what()));
  }
  Dataset ds;
  try {
    reject_unknown(manifest, {"version", "generator", "samples"}, "manifest");
    if (manifest.at("version").get<int>() != 1)
      throw DataError("dataset: unsupported manifest version");
    ds.spec = GeneratorSpec::from_json_text(manifest.at("generator").dump());
    for (const auto& e : manifest.at("samples")) {
      reject_unknown(e,
                     {"id", "label", "split", "view", "episode", "frames",
                      "keypoints", "regenerated", "view_transform"},
                     "manifest sample");
      VideoSample s;
      s.id = e.at("id").get<int>();
      s.label = e.at("label").get<int>();
      s.split = e.at("split").get<std::string>();
      s.view = e.at("view").get<int>();
      s.episode = e.at("episode").get<int>();
      s.regenerated = e.at("regenerated").get<bool>();
      const auto& vt = e.at("view_transform");
      if (!vt.is_array() || vt.size() != 6)
        throw DataError("dataset: view_transform must have 6 entries");
      s.view_transform = {vt[0].get<double>(), vt[1].get<double>(),
                          vt[2].get<double>(), vt[3].get<double>(),
                          vt[4].get<double>(), vt[5].get<double>()};
      if (!split_filter.empty() && s.split != split_filter) continue;
      s.frames = read_frames(dir / e.at("frames").get<std::string>());
      s.kps = load_keypoints_json(dir / e.at("keypoints").get<std::string>());
      ds.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw DataError("dataset: manifest: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    // Malformed manifest contents are a data problem for the caller.
    throw DataError("dataset: " + std::string(e.what()));
  }
  return ds;
}

}  // namespace pavt
