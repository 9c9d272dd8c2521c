#include "pavt/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace pavt {

using nlohmann::json;

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

json train_to_json(const TrainConfig& t) {
  return json{{"task", t.task},
              {"epochs", t.epochs},
              {"batch", t.batch},
              {"lr", t.optim.lr},
              {"beta1", t.optim.beta1},
              {"beta2", t.optim.beta2},
              {"eps", t.optim.eps},
              {"workers", t.workers},
              {"tcn_margin", t.tcn_margin},
              {"tcn_window", t.tcn_window}};
}

TrainConfig train_from_json(const json& j) {
  reject_unknown(j,
                 {"task", "epochs", "batch", "lr", "beta1", "beta2", "eps", "workers",
                  "tcn_margin", "tcn_window"},
                 "train");
  TrainConfig t;
  get_if(j, "task", t.task);
  get_if(j, "epochs", t.epochs);
  get_if(j, "batch", t.batch);
  get_if(j, "lr", t.optim.lr);
  get_if(j, "beta1", t.optim.beta1);
  get_if(j, "beta2", t.optim.beta2);
  get_if(j, "eps", t.optim.eps);
  get_if(j, "workers", t.workers);
  get_if(j, "tcn_margin", t.tcn_margin);
  get_if(j, "tcn_window", t.tcn_window);
  return t;
}

json corruption_to_json(const CorruptionConfig& c) {
  return json{{"mode", c.mode}, {"epsilon", c.epsilon}, {"density", c.density}};
}

CorruptionConfig corruption_from_json(const json& j) {
  reject_unknown(j, {"mode", "epsilon", "density"}, "corruption");
  CorruptionConfig c;
  get_if(j, "mode", c.mode);
  get_if(j, "epsilon", c.epsilon);
  get_if(j, "density", c.density);
  c.validate();
  return c;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (version != 1) throw ConfigError("experiment: unsupported version");
  if (dataset.empty() == !generator.has_value())
    throw ConfigError("experiment: exactly one of dataset or generator required");
  if (generator) generator->validate();
  model.validate();
  train.corruption.validate();
  if (sweep_parameter) {
    static const std::set<std::string> axes = {"paab_position", "paat_position",
                                               "paab_count",   "paab_variant",
                                               "lambda",       "epsilon",
                                               "random_map"};
    if (!axes.count(*sweep_parameter))
      throw ConfigError("experiment: unknown sweep parameter '" + *sweep_parameter +
                        "'");
  }
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["version"] = version;
  j["seed"] = seed;
  if (!out.empty()) j["out"] = out;
  if (!dataset.empty()) j["dataset"] = dataset;
  if (generator) j["generator"] = json::parse(generator->to_json());
  j["model"] = json::parse(model.to_json());
  j["train"] = train_to_json(train);
  j["corruption"] = corruption_to_json(train.corruption);
  if (sweep_parameter)
    j["sweep"] = json{{"parameter", *sweep_parameter},
                      {"values", json::parse(sweep_values_json)}};
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  ExperimentConfig c;
  try {
    reject_unknown(j,
                   {"version", "seed", "out", "dataset", "generator", "model",
                    "train", "corruption", "sweep"},
                   "experiment");
    get_if(j, "version", c.version);
    get_if(j, "seed", c.seed);
    get_if(j, "out", c.out);
    get_if(j, "dataset", c.dataset);
    if (j.contains("generator"))
      c.generator = GeneratorSpec::from_json_text(j.at("generator").dump());
    if (j.contains("model"))
      c.model = ModelConfig::from_json_text(j.at("model").dump());
    if (j.contains("train")) c.train = train_from_json(j.at("train"));
    if (j.contains("corruption"))
      c.train.corruption = corruption_from_json(j.at("corruption"));
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      reject_unknown(s, {"parameter", "values"}, "sweep");
      c.sweep_parameter = s.at("parameter").get<std::string>();
      c.sweep_values_json = s.contains("values") ? s.at("values").dump() : "[]";
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  c.train.seed = c.seed;
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("experiment config: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

uint64_t config_hash(const std::string& text) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

namespace {

std::string hash_hex(const std::string& text) {
  std::ostringstream os;
  os << std::hex << config_hash(text);
  return os.str();
}

Dataset load_or_generate(const ExperimentConfig& cfg) {
  if (!cfg.dataset.empty()) return dataset_read(cfg.dataset);
  return generate_dataset(*cfg.generator);
}

void check_model_vs_dataset(const ModelConfig& m, const GeneratorSpec& spec) {
  auto named = [](const char* field, int a, int b) {
    if (a != b)
      throw ConfigError(std::string("model/dataset mismatch on ") + field + ": " +
                        std::to_string(a) + " vs " + std::to_string(b));
  };
  named("tau", m.tau, spec.tau);
  named("H", m.H, spec.H);
  named("W", m.W, spec.W);
  named("C", m.C, spec.C);
  named("keypoints", m.keypoints, spec.keypoints);
  if (spec.kind == "classification") named("classes", m.classes, spec.classes);
}

}  // namespace

TrainRunSummary train_run(const ExperimentConfig& cfg_in,
                          const std::filesystem::path& out_dir, std::ostream& msg) {
  ExperimentConfig cfg = cfg_in;
  cfg.validate();
  // One experiment seed drives parameter init, shuffling and corruption.
  cfg.model.seed = cfg.seed;
  cfg.train.seed = cfg.seed;

  Dataset data = load_or_generate(cfg);
  check_model_vs_dataset(cfg.model, data.spec);
  if (cfg.train.task == "align" && data.spec.kind != "alignment")
    throw ConfigError("train: align task needs an alignment dataset");
  if (cfg.train.task == "classify" && data.spec.kind != "classification")
    throw ConfigError("train: classify task needs a classification dataset");

  std::filesystem::create_directories(out_dir);
  {
    std::ofstream cfg_out(out_dir / "config.json");
    cfg_out << cfg.to_json() << "\n";
  }

  Model model(cfg.model);
  std::ofstream log(out_dir / "metrics.jsonl");
  if (!log) throw DataError("train: cannot write metrics log in " + out_dir.string());

  TrainResult result;
  try {
    result = train_model(model, data, cfg.train, &log);
  } catch (const NumericError& e) {
    json diag{{"error", e.what()}, {"config_hash", hash_hex(cfg.to_json())}};
    std::ofstream d(out_dir / "diagnostic.json");
    d << diag.dump(2) << "\n";
    throw;
  }

  load_params(model, result.best_params);
  checkpoint_save(model, out_dir / "checkpoint.pavt");

  TrainRunSummary summary;
  summary.out_dir = out_dir;
  summary.best_epoch = result.best_epoch;
  summary.best_metric = result.best_metric;
  summary.final_record = result.final_record;
  if (cfg.train.task == "classify")
    msg << "trained " << cfg.train.epochs << " epochs; best epoch "
        << result.best_epoch << " top1 " << result.best_metric << "\n";
  else
    msg << "trained " << cfg.train.epochs << " epochs; best epoch "
        << result.best_epoch << " alignment error " << -result.best_metric << "\n";
  return summary;
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

void cmd_generate(const std::filesystem::path& spec_file,
                  const std::filesystem::path& out_dir, bool force,
                  std::optional<uint64_t> seed, std::ostream& msg) {
  std::ifstream in(spec_file);
  if (!in) throw ConfigError("generate: cannot open spec " + spec_file.string());
  std::stringstream ss;
  ss << in.rdbuf();
  GeneratorSpec spec = GeneratorSpec::from_json_text(ss.str());
  if (seed) spec.seed = *seed;
  if (std::filesystem::exists(out_dir) &&
      !std::filesystem::is_empty(out_dir) && !force)
    throw ConfigError("generate: output directory " + out_dir.string() +
                      " is not empty (use --force)");
  Dataset ds = generate_dataset(spec);
  dataset_write(ds, out_dir);
  int train_n = 0, test_n = 0;
  for (const auto& s : ds.samples) (s.split == "train" ? train_n : test_n) += 1;
  msg << "wrote " << ds.samples.size() << " samples (" << train_n << " train, "
      << test_n << " test) to " << out_dir.string() << "\n";
}

namespace {

struct SweepCell {
  std::string name;
  ExperimentConfig cfg;
};

std::vector<int> default_positions_single(int depth) {
  std::vector<int> p = {1, (depth + 1) / 2, depth};
  p.erase(std::unique(p.begin(), p.end()), p.end());
  return p;
}

std::string join_ints(const std::vector<int>& v, char sep) {
  std::string s;
  for (int x : v) s += (s.empty() ? "" : std::string(1, sep)) + std::to_string(x);
  return s;
}

std::vector<SweepCell> build_cells(const ExperimentConfig& base) {
  const std::string axis = *base.sweep_parameter;
  json values = json::parse(base.sweep_values_json);
  std::vector<SweepCell> cells;

  auto cell = [&](const std::string& name) -> ExperimentConfig& {
    cells.push_back({name, base});
    cells.back().cfg.sweep_parameter.reset();
    cells.back().cfg.sweep_values_json = "[]";
    return cells.back().cfg;
  };

  if (axis == "paab_position" || axis == "paat_position") {
    std::vector<std::vector<int>> grids;
    if (!values.empty()) {
      for (const auto& v : values)
        grids.push_back(v.is_array() ? v.get<std::vector<int>>()
                                     : std::vector<int>{v.get<int>()});
    } else {
      const int L = base.model.depth;
      const int mid = (L + 1) / 2;
      grids = {{1}, {mid}, {L}};
      if (mid != 1) grids.push_back({1, mid});
      if (L != 1 && L != mid) grids.push_back({1, L});
    }
    for (const auto& g : grids) {
      auto& c = cell(axis + "=" + join_ints(g, '-'));
      if (axis == "paab_position") {
        if (!c.model.paab) throw ConfigError("sweep: paab_position needs a paab block");
        c.model.paab->layers = g;
      } else {
        if (!c.model.paat) throw ConfigError("sweep: paat_position needs a paat head");
        c.model.paat->layers = g;
      }
    }
  } else if (axis == "paab_count") {
    std::vector<int> grid = values.empty() ? std::vector<int>{1, 2, 3, 4}
                                           : values.get<std::vector<int>>();
    for (int n : grid) {
      auto& c = cell("paab_count=" + std::to_string(n));
      if (!c.model.paab) throw ConfigError("sweep: paab_count needs a paab block");
      c.model.paab->count = n;
    }
  } else if (axis == "paab_variant") {
    std::vector<std::string> grid =
        values.empty()
            ? std::vector<std::string>{"pa_sa", "factorized_pa_sta", "joint_pa_sta"}
            : values.get<std::vector<std::string>>();
    for (const auto& v : grid) {
      auto& c = cell("paab_variant=" + v);
      if (!c.model.paab) throw ConfigError("sweep: paab_variant needs a paab block");
      c.model.paab->variant = v;
    }
  } else if (axis == "lambda") {
    std::vector<double> grid =
        values.empty() ? std::vector<double>{0.3, 0.6, 1.0, 1.3, 1.6, 2.0, 5.0}
                       : values.get<std::vector<double>>();
    for (double v : grid) {
      std::ostringstream name;
      name << "lambda=" << v;
      auto& c = cell(name.str());
      if (!c.model.paat) throw ConfigError("sweep: lambda needs a paat head");
      c.model.paat->lambda = v;
    }
  } else if (axis == "epsilon") {
    std::vector<int> grid = values.empty() ? std::vector<int>{0, 2, 4, 8, 16}
                                           : values.get<std::vector<int>>();
    for (int v : grid) {
      auto& c = cell("epsilon=" + std::to_string(v));
      c.train.corruption.mode = v > 0 ? "noise" : "none";
      c.train.corruption.epsilon = v;
    }
  } else if (axis == "random_map") {
    std::vector<bool> grid = values.empty() ? std::vector<bool>{false, true}
                                            : values.get<std::vector<bool>>();
    for (bool v : grid) {
      auto& c = cell(std::string("random_map=") + (v ? "true" : "false"));
      c.train.corruption.mode = v ? "random_map" : "none";
    }
  }
  for (auto& c : cells) c.cfg.validate();
  return cells;
}

}  // namespace

std::vector<TrainRunSummary> cmd_train(const std::filesystem::path& config_file,
                                       std::optional<std::filesystem::path> out_dir,
                                       std::optional<uint64_t> seed,
                                       std::optional<int> workers, std::ostream& msg) {
  ExperimentConfig cfg = ExperimentConfig::from_file(config_file);
  if (seed) {
    cfg.seed = *seed;
    cfg.train.seed = *seed;
  }
  if (workers) cfg.train.workers = *workers;
  std::filesystem::path out = out_dir ? *out_dir : std::filesystem::path(cfg.out);
  if (out.empty()) throw ConfigError("train: no output directory configured");

  std::vector<TrainRunSummary> summaries;
  if (!cfg.sweep_parameter) {
    summaries.push_back(train_run(cfg, out, msg));
    return summaries;
  }

  auto cells = build_cells(cfg);
  std::filesystem::create_directories(out);
  std::ofstream summary_log(out / "sweep_summary.jsonl");
  for (const auto& c : cells) {
    msg << "[sweep] " << c.name << "\n";
    auto s = train_run(c.cfg, out / ("cell_" + c.name), msg);
    json rec{{"cell", c.name},
             {"best_epoch", s.best_epoch},
             {"best_metric", s.best_metric},
             {"final_loss_total", s.final_record.loss_total}};
    if (c.cfg.train.task == "classify") {
      rec["final_top1"] = s.final_record.eval_top1;
      rec["final_mca"] = s.final_record.eval_mca;
    } else {
      rec["final_alignment"] = s.final_record.eval_alignment;
    }
    summary_log << rec.dump() << "\n";
    summary_log.flush();
    summaries.push_back(std::move(s));
  }
  return summaries;
}

namespace {

Dataset read_for_model(const Model& model, const std::filesystem::path& dataset_dir) {
  Dataset ds = dataset_read(dataset_dir);
  check_model_vs_dataset(model.config(), ds.spec);
  return ds;
}

}  // namespace

MetricTable cmd_eval(const std::filesystem::path& checkpoint,
                     const std::filesystem::path& dataset_dir,
                     const std::string& task, const std::string& split, int workers,
                     std::ostream& msg) {
  Model model = checkpoint_load(checkpoint);
  Dataset ds = read_for_model(model, dataset_dir);
  MetricTable table;
  table.metadata["checkpoint"] = checkpoint.string();
  table.metadata["dataset"] = dataset_dir.string();
  table.metadata["split"] = split;
  table.metadata["config_hash"] = hash_hex(model.config().to_json());
  CorruptionConfig clean;
  if (task == "classify") {
    EvalMetrics m = evaluate_classifier(model, ds, split, clean, 0, workers);
    table.values["top1"] = {m.top1};
    table.values["mca"] = {m.mca};
    table.values["count"] = {static_cast<double>(m.count)};
    msg << "top1 " << m.top1 << "  mca " << m.mca << "  (" << m.count << " samples)\n";
  } else if (task == "align") {
    const double err = evaluate_alignment(model, ds, split, clean, 0, workers);
    table.values["alignment_error"] = {err};
    msg << "alignment error " << err << "\n";
  } else {
    throw ConfigError("eval: task must be classify or align, got '" + task + "'");
  }
  return table;
}

MetricTable cmd_analyze(const std::filesystem::path& checkpoint,
                        const std::filesystem::path& dataset_dir,
                        const std::string& which, const std::string& split,
                        int max_samples, DistanceKind kind,
                        const std::optional<std::filesystem::path>& out_dir,
                        std::ostream& msg) {
  if (which != "distances" && which != "attention" && which != "ffn" &&
      which != "all")
    throw ConfigError("analyze: which must be distances, attention, ffn or all");
  Model model = checkpoint_load(checkpoint);
  Dataset ds = read_for_model(model, dataset_dir);

  std::vector<const VideoSample*> samples;
  for (const auto& s : ds.samples)
    if (s.split == split) samples.push_back(&s);
  if (samples.empty()) throw DataError("analyze: empty split '" + split + "'");
  if (max_samples > 0 && static_cast<int>(samples.size()) > max_samples)
    samples.resize(static_cast<size_t>(max_samples));
  if ((which == "distances" || which == "all")) {
    bool any_kps = false;
    for (const auto* s : samples) any_kps = any_kps || !s->kps.points.empty();
    if (!any_kps)
      throw DataError("analyze: dataset has no keypoints; distances need pose maps");
  }

  const PatchGeometry geom = model.config().patch_geometry();
  CorruptionConfig clean;

  // slot -> accumulated metric sums
  std::vector<std::string> slot_names;
  std::vector<double> nonpose_sum, nonpose_n, posepose_sum, posepose_n, ffn_sum;
  std::vector<std::vector<double>> hist_sum;
  const std::vector<double> bins = {0.0, 0.1, 0.2, 0.3, 0.4, 0.5,
                                    0.6, 0.7, 0.8, 0.9, 1.0};
  int processed = 0;

  for (const auto* sp : samples) {
    PreparedMaps maps = prepare_maps(*sp, model.config(), clean, 0);
    ForwardOptions opt;
    opt.mode = ForwardMode::Classify;
    opt.pose = &maps.p2d;
    opt.capture = true;
    ForwardResult fr = model.forward(sp->frames, opt);
    if (slot_names.empty()) {
      for (const auto& snap : fr.snapshots) {
        slot_names.push_back(
            (snap.kind == "paab" ? "paab" : "layer") + std::to_string(snap.layer));
        // Disambiguate stacked blocks at one position.
        for (size_t k = 0; k + 1 < slot_names.size(); ++k)
          if (slot_names[k] == slot_names.back()) {
            slot_names.back() += "." + std::to_string(k);
            break;
          }
      }
      const size_t n = slot_names.size();
      nonpose_sum.assign(n, 0.0);
      nonpose_n.assign(n, 0.0);
      posepose_sum.assign(n, 0.0);
      posepose_n.assign(n, 0.0);
      ffn_sum.assign(n, 0.0);
      hist_sum.assign(n, std::vector<double>(bins.size() - 1, 0.0));
    }
    for (size_t i = 0; i < fr.snapshots.size(); ++i) {
      const auto& snap = fr.snapshots[i];
      if (which == "distances" || which == "all") {
        if (auto d = pose_nonpose_distance(snap, kind)) {
          nonpose_sum[i] += *d;
          nonpose_n[i] += 1.0;
        }
        if (auto d = pose_pose_distance(snap, kind)) {
          posepose_sum[i] += *d;
          posepose_n[i] += 1.0;
        }
      }
      if (which == "attention" || which == "all") {
        auto h = attention_histogram(snap, bins);
        for (size_t b = 0; b < h.size(); ++b) hist_sum[i][b] += h[b];
      }
      if (which == "ffn" || which == "all")
        ffn_sum[i] += ffn_displacement(snap.pre_ffn, snap.post_ffn);
    }
    ++processed;
  }

  MetricTable table;
  table.metadata["checkpoint"] = checkpoint.string();
  table.metadata["dataset"] = dataset_dir.string();
  table.metadata["split"] = split;
  table.metadata["samples"] = std::to_string(processed);
  table.metadata["distance_kind"] = to_string(kind);
  table.metadata["config_hash"] = hash_hex(model.config().to_json());
  (void)geom;

  if (which == "distances" || which == "all") {
    std::vector<double> np, pp;
    for (size_t i = 0; i < slot_names.size(); ++i) {
      np.push_back(nonpose_n[i] > 0 ? nonpose_sum[i] / nonpose_n[i] : -1.0);
      pp.push_back(posepose_n[i] > 0 ? posepose_sum[i] / posepose_n[i] : -1.0);
    }
    table.values["pose_nonpose_distance"] = np;
    table.values["pose_pose_distance"] = pp;
  }
  if (which == "attention" || which == "all") {
    for (size_t i = 0; i < slot_names.size(); ++i) {
      auto h = hist_sum[i];
      for (auto& v : h) v /= processed;
      table.values["attention_histogram." + slot_names[i]] = h;
    }
  }
  if (which == "ffn" || which == "all") {
    std::vector<double> f;
    for (size_t i = 0; i < slot_names.size(); ++i) f.push_back(ffn_sum[i] / processed);
    table.values["ffn_displacement"] = f;
  }
  {
    std::vector<double> idx(slot_names.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<double>(i);
    table.values["slot"] = idx;
    std::string names;
    for (const auto& n : slot_names) names += (names.empty() ? "" : ";") + n;
    table.metadata["slots"] = names;
  }

  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    std::ofstream(*out_dir / ("analysis_" + which + ".json")) << table.to_json() << "\n";
    std::ofstream(*out_dir / ("analysis_" + which + ".csv")) << table.to_csv();
    msg << "wrote analysis_" << which << ".{json,csv} to " << out_dir->string() << "\n";
  }
  return table;
}

double cmd_align(const std::optional<std::filesystem::path>& checkpoint,
                 const std::filesystem::path& dataset_dir, const std::string& split,
                 bool oracle_keypoints, int workers, std::ostream& msg) {
  Dataset ds = dataset_read(dataset_dir);
  if (ds.spec.kind != "alignment")
    throw ConfigError("align: dataset kind is '" + ds.spec.kind +
                      "', need an alignment dataset");
  double err = 0.0;
  if (oracle_keypoints) {
    // Ground-truth embeddings: per frame, keypoints mapped back to the
    // canonical view and flattened.
    std::map<int, std::pair<const VideoSample*, const VideoSample*>> eps;
    for (const auto& s : ds.samples) {
      if (s.split != split || s.episode < 0) continue;
      (s.view == 0 ? eps[s.episode].first : eps[s.episode].second) = &s;
    }
    if (eps.empty()) throw DataError("align: empty split '" + split + "'");
    auto embed = [&](const VideoSample& s) {
      const ViewTransform inv = s.view_transform.inverse();
      Mat m(s.kps.tau, 2 * s.kps.K);
      for (const auto& p : s.kps.points) {
        const auto [x, y] = inv.apply(p.x, p.y);
        m.at(p.t - 1, 2 * (p.k - 1)) = x;
        m.at(p.t - 1, 2 * (p.k - 1) + 1) = y;
      }
      return m;
    };
    double total = 0.0;
    int n = 0;
    std::vector<int> unpaired;
    for (const auto& [e, pair] : eps) {
      if (!pair.first || !pair.second) {
        unpaired.push_back(e);
        continue;
      }
      total += alignment_error(embed(*pair.first), embed(*pair.second));
      ++n;
    }
    if (!unpaired.empty()) {
      std::string ids;
      for (int e : unpaired) ids += (ids.empty() ? "" : ", ") + std::to_string(e);
      throw DataError("align: unpaired episodes: " + ids);
    }
    err = total / n;
  } else {
    if (!checkpoint) throw ConfigError("align: a checkpoint is required");
    Model model = checkpoint_load(*checkpoint);
    check_model_vs_dataset(model.config(), ds.spec);
    CorruptionConfig clean;
    err = evaluate_alignment(model, ds, split, clean, 0, workers);
  }
  msg << "alignment error " << err << "\n";
  return err;
}

MetricTable cmd_retrieve(const std::filesystem::path& checkpoint,
                         const std::filesystem::path& dataset_dir,
                         const std::string& gallery_split,
                         const std::string& query_split, const std::vector<int>& ks,
                         int workers, std::ostream& msg) {
  Model model = checkpoint_load(checkpoint);
  Dataset ds = read_for_model(model, dataset_dir);
  auto collect = [&](const std::string& split) {
    std::vector<const VideoSample*> samples;
    for (const auto& s : ds.samples)
      if (s.split == split) samples.push_back(&s);
    if (samples.empty()) throw DataError("retrieve: empty split '" + split + "'");
    LabeledFeatures f;
    f.features = Mat(static_cast<int>(samples.size()), model.config().dim);
    f.labels.resize(samples.size());
    f.ids.resize(samples.size());
    CorruptionConfig clean;
    parallel_for(static_cast<int>(samples.size()), workers, [&](int i) {
      const VideoSample& s = *samples[static_cast<size_t>(i)];
      PreparedMaps maps = prepare_maps(s, model.config(), clean, 0);
      ForwardOptions opt;
      opt.pose = model.config().paab ? &maps.p2d : nullptr;
      ForwardResult fr = model.forward(s.frames, opt);
      const auto& v = fr.class_feature.data();
      std::copy(v.begin(), v.end(), f.features.row(i));
      f.labels[static_cast<size_t>(i)] = s.label;
      f.ids[static_cast<size_t>(i)] = s.id;
    });
    return f;
  };
  LabeledFeatures gallery = collect(gallery_split);
  LabeledFeatures queries =
      query_split == gallery_split ? gallery : collect(query_split);

  MetricTable table;
  table.metadata["checkpoint"] = checkpoint.string();
  table.metadata["dataset"] = dataset_dir.string();
  table.metadata["gallery"] = gallery_split;
  table.metadata["queries"] = query_split;
  table.metadata["config_hash"] = hash_hex(model.config().to_json());
  std::vector<double> kvals, recalls;
  for (int k : ks) {
    if (k > gallery.features.rows)
      msg << "warning: k=" << k << " clamped to gallery size "
          << gallery.features.rows << "\n";
    kvals.push_back(static_cast<double>(k));
    recalls.push_back(recall_at_k(gallery, queries, k));
  }
  table.values["k"] = kvals;
  table.values["recall_at_k"] = recalls;
  for (size_t i = 0; i < kvals.size(); ++i)
    msg << "R@" << ks[i] << " = " << recalls[i] << "\n";
  return table;
}

}  // namespace pavt
