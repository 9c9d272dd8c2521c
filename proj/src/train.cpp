#include "pavt/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <json.hpp>

namespace pavt {

using nlohmann::json;

void CorruptionConfig::validate() const {
  if (mode != "none" && mode != "noise" && mode != "random_map")
    throw ConfigError("corruption: mode must be none, noise or random_map, got '" +
                      mode + "'");
  if (mode == "noise" && epsilon < 0)
    throw ConfigError("corruption: epsilon must be >= 0");
  if (mode == "random_map" && density > 1.0)
    throw ConfigError("corruption: density must be <= 1");
}

PreparedMaps prepare_maps(const VideoSample& sample, const ModelConfig& model_cfg,
                          const CorruptionConfig& corruption, uint64_t seed) {
  PatchGeometry geom = model_cfg.patch_geometry();
  const uint64_t key = mix64(seed ^ (0x5EEDull + static_cast<uint64_t>(sample.id)));
  PreparedMaps maps;
  if (corruption.mode == "random_map") {
    // Random activations at matched sparsity: the corruption moves the pose
    // map's mass, not its density.
    const PoseMap3D true3 = patchify_3d(sample.kps, geom);
    double rate = corruption.density;
    if (rate < 0.0) rate = true3.density();
    auto [p2, p3] = randomize_map(geom, sample.kps.K, rate, key);
    maps.p2d = std::move(p2);
    maps.p3d = std::move(p3);
    return maps;
  }
  KeypointSet kps = sample.kps;
  if (corruption.mode == "noise" && corruption.epsilon > 0)
    kps = corrupt_noise(kps, corruption.epsilon, key);
  maps.p2d = patchify_2d(kps, geom);
  maps.p3d = patchify_3d(kps, geom);
  return maps;
}

namespace {

struct SampleLoss {
  double primary = 0.0;
  double paat = 0.0;
  double total = 0.0;
};

// One forward/backward on one sample; grads flattened in parameter order.
SampleLoss classify_pass(const Model& model, const VideoSample& sample,
                         const PreparedMaps& maps, std::vector<double>* flat_grads) {
  const ModelConfig& cfg = model.config();
  Tape tape;
  ForwardOptions opt;
  opt.mode = ForwardMode::Classify;
  opt.pose = cfg.paab ? &maps.p2d : nullptr;
  opt.with_paat = cfg.paat.has_value() && flat_grads != nullptr;
  opt.tape = flat_grads ? &tape : nullptr;
  ForwardResult fr = model.forward(sample.frames, opt);

  Tensor primary = classify_loss(fr.logits, sample.label);
  SampleLoss out;
  out.primary = primary.item();
  Tensor loss = primary;
  if (opt.with_paat) {
    Tensor aux;
    for (size_t i = 0; i < fr.paat_predictions.size(); ++i) {
      Tensor one = cfg.paat->target == "p2d"
                       ? paat_loss_2d(fr.paat_predictions[i], maps.p2d)
                       : paat_loss(fr.paat_predictions[i], maps.p3d);
      aux = i == 0 ? one : add(aux, one);
    }
    aux = scale(aux, 1.0 / static_cast<double>(fr.paat_predictions.size()));
    out.paat = aux.item();
    loss = add(loss, scale(aux, cfg.paat->lambda));
  }
  out.total = loss.item();

  if (flat_grads) {
    tape.backward(loss);
    flat_grads->clear();
    flat_grads->reserve(static_cast<size_t>(model.params().total_size()));
    for (const auto& leaf : fr.param_leaves)
      flat_grads->insert(flat_grads->end(), leaf.grad().begin(), leaf.grad().end());
  }
  return out;
}

struct EpisodePair {
  const VideoSample* a = nullptr;
  const VideoSample* b = nullptr;
};

std::vector<EpisodePair> paired_episodes(const Dataset& data, const std::string& split) {
  std::map<int, EpisodePair> by_episode;
  for (const auto& s : data.samples) {
    if (s.split != split || s.episode < 0) continue;
    auto& p = by_episode[s.episode];
    (s.view == 0 ? p.a : p.b) = &s;
  }
  std::vector<int> unpaired;
  std::vector<EpisodePair> out;
  for (const auto& [ep, pair] : by_episode) {
    if (!pair.a || !pair.b) {
      unpaired.push_back(ep);
      continue;
    }
    out.push_back(pair);
  }
  if (!unpaired.empty()) {
    std::string ids;
    for (int e : unpaired) ids += (ids.empty() ? "" : ", ") + std::to_string(e);
    throw DataError("alignment: unpaired episodes: " + ids);
  }
  return out;
}

SampleLoss align_pass(const Model& model, const EpisodePair& ep,
                      const PreparedMaps& maps_a, const PreparedMaps& maps_b,
                      double margin, int window, uint64_t neg_seed,
                      std::vector<double>* flat_grads) {
  const ModelConfig& cfg = model.config();
  Tape tape;
  ForwardOptions opt;
  opt.mode = ForwardMode::EmbedFrames;
  opt.with_paat = cfg.paat.has_value() && flat_grads != nullptr;
  opt.tape = flat_grads ? &tape : nullptr;

  opt.pose = cfg.paab ? &maps_a.p2d : nullptr;
  ForwardResult fa = model.forward(ep.a->frames, opt);
  opt.pose = cfg.paab ? &maps_b.p2d : nullptr;
  ForwardResult fb = model.forward(ep.b->frames, opt);

  auto rng = rng_stream(neg_seed, 0x7C9, static_cast<uint64_t>(ep.a->episode));
  auto negatives = sample_tcn_negatives(cfg.tau, window, rng);
  Tensor primary = tcn_loss(fa.frame_embeddings, fb.frame_embeddings, margin, negatives);

  SampleLoss out;
  out.primary = primary.item();
  Tensor loss = primary;
  if (opt.with_paat) {
    Tensor aux;
    size_t n = 0;
    auto add_aux = [&](const ForwardResult& fr, const PreparedMaps& maps) {
      for (const auto& pred : fr.paat_predictions) {
        Tensor one = cfg.paat->target == "p2d" ? paat_loss_2d(pred, maps.p2d)
                                               : paat_loss(pred, maps.p3d);
        aux = n == 0 ? one : add(aux, one);
        ++n;
      }
    };
    add_aux(fa, maps_a);
    add_aux(fb, maps_b);
    aux = scale(aux, 1.0 / static_cast<double>(n));
    out.paat = aux.item();
    loss = add(loss, scale(aux, cfg.paat->lambda));
  }
  out.total = loss.item();

  if (flat_grads) {
    tape.backward(loss);
    flat_grads->clear();
    flat_grads->reserve(static_cast<size_t>(model.params().total_size()));
    for (const auto& leaf : fa.param_leaves)
      flat_grads->insert(flat_grads->end(), leaf.grad().begin(), leaf.grad().end());
  }
  return out;
}

void apply_adam(ParamStore& store, const std::vector<double>& flat_grads,
                const OptimConfig& optim, int epoch, int step) {
  for (double g : flat_grads)
    if (!std::isfinite(g))
      throw NumericError("training: non-finite gradient at epoch " +
                         std::to_string(epoch) + " step " + std::to_string(step));
  AdamConfig cfg;
  cfg.lr = optim.lr;
  cfg.beta1 = optim.beta1;
  cfg.beta2 = optim.beta2;
  cfg.eps = optim.eps;
  size_t off = 0;
  for (auto& e : store.entries()) {
    if (!adam_step(std::span<double>(e.data),
                   std::span<const double>(flat_grads.data() + off, e.data.size()),
                   e.opt, cfg))
      throw NumericError("training: rejected step for " + e.name + " at epoch " +
                         std::to_string(epoch));
    off += e.data.size();
  }
}

json epoch_json(const std::string& task, const EpochRecord& r) {
  json j{{"epoch", r.epoch},
         {"loss_primary", r.loss_primary},
         {"loss_paat", r.loss_paat},
         {"loss_total", r.loss_total}};
  if (task == "classify") {
    j["eval_top1"] = r.eval_top1;
    j["eval_mca"] = r.eval_mca;
  } else {
    j["eval_alignment"] = r.eval_alignment;
  }
  return j;
}

std::vector<std::vector<double>> snapshot_params(const Model& model) {
  std::vector<std::vector<double>> out;
  out.reserve(model.params().entries().size());
  for (const auto& e : model.params().entries()) out.push_back(e.data);
  return out;
}

}  // namespace

void load_params(Model& model, const std::vector<std::vector<double>>& params) {
  auto& entries = model.params().entries();
  if (params.size() != entries.size())
    throw ConfigError("load_params: parameter count mismatch");
  for (size_t i = 0; i < entries.size(); ++i) {
    if (params[i].size() != entries[i].data.size())
      throw ConfigError("load_params: size mismatch for " + entries[i].name);
    entries[i].data = params[i];
  }
}

EvalMetrics evaluate_classifier(const Model& model, const Dataset& data,
                                const std::string& split,
                                const CorruptionConfig& corruption, uint64_t seed,
                                int workers) {
  std::vector<const VideoSample*> samples;
  for (const auto& s : data.samples)
    if (s.split == split) samples.push_back(&s);
  if (samples.empty()) throw DataError("eval: empty split '" + split + "'");

  std::vector<int> preds(samples.size(), -1);
  std::vector<int> labels(samples.size(), 0);
  parallel_for(static_cast<int>(samples.size()), workers, [&](int i) {
    const VideoSample& s = *samples[static_cast<size_t>(i)];
    PreparedMaps maps = prepare_maps(s, model.config(), corruption, seed);
    ForwardOptions opt;
    opt.mode = ForwardMode::Classify;
    opt.pose = model.config().paab ? &maps.p2d : nullptr;
    ForwardResult fr = model.forward(s.frames, opt);
    const auto& logits = fr.logits.data();
    preds[static_cast<size_t>(i)] = static_cast<int>(
        std::max_element(logits.begin(), logits.end()) - logits.begin());
    labels[static_cast<size_t>(i)] = s.label;
  });
  EvalMetrics m;
  m.top1 = top1_accuracy(preds, labels);
  m.mca = mean_class_accuracy(preds, labels);
  m.count = static_cast<int>(samples.size());
  return m;
}

double evaluate_alignment(const Model& model, const Dataset& data,
                          const std::string& split,
                          const CorruptionConfig& corruption, uint64_t seed,
                          int workers) {
  auto pairs = paired_episodes(data, split);
  if (pairs.empty()) throw DataError("eval: empty split '" + split + "'");
  std::vector<double> errs(pairs.size(), 0.0);
  parallel_for(static_cast<int>(pairs.size()), workers, [&](int i) {
    const auto& ep = pairs[static_cast<size_t>(i)];
    auto embed = [&](const VideoSample& s) {
      PreparedMaps maps = prepare_maps(s, model.config(), corruption, seed);
      ForwardOptions opt;
      opt.mode = ForwardMode::EmbedFrames;
      opt.pose = model.config().paab ? &maps.p2d : nullptr;
      return model.forward(s.frames, opt).frame_embeddings.to_mat();
    };
    errs[static_cast<size_t>(i)] = alignment_error(embed(*ep.a), embed(*ep.b));
  });
  return std::accumulate(errs.begin(), errs.end(), 0.0) /
         static_cast<double>(errs.size());
}

TrainResult train_model(Model& model, const Dataset& data, const TrainConfig& cfg,
                        std::ostream* log) {
  if (cfg.task != "classify" && cfg.task != "align")
    throw ConfigError("train: task must be classify or align, got '" + cfg.task + "'");
  if (cfg.epochs < 1 || cfg.batch < 1)
    throw ConfigError("train: epochs and batch must be >= 1");
  cfg.corruption.validate();

  TrainResult result;
  result.best_metric = -std::numeric_limits<double>::infinity();

  const size_t n_params = static_cast<size_t>(model.params().total_size());
  std::vector<std::vector<double>> grad_slots;
  std::vector<double> grad_sum(n_params, 0.0);

  auto run_epoch_classify = [&](int epoch, EpochRecord& rec) {
    std::vector<const VideoSample*> train;
    for (const auto& s : data.samples)
      if (s.split == "train") train.push_back(&s);
    if (train.empty()) throw DataError("train: empty split 'train'");
    // Pose maps are a deterministic function of (sample, corruption, seed);
    // rebuilt per epoch to keep memory flat.
    std::vector<int> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = rng_stream(cfg.seed, 0xE70C4, static_cast<uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double sum_primary = 0.0, sum_paat = 0.0, sum_total = 0.0;
    int steps = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch) {
      const int bsz = static_cast<int>(
          std::min<size_t>(cfg.batch, order.size() - start));
      grad_slots.assign(static_cast<size_t>(bsz), {});
      std::vector<SampleLoss> losses(static_cast<size_t>(bsz));
      parallel_for(bsz, cfg.workers, [&](int i) {
        const VideoSample& s = *train[static_cast<size_t>(order[start + i])];
        PreparedMaps maps = prepare_maps(s, model.config(), cfg.corruption, cfg.seed);
        losses[static_cast<size_t>(i)] =
            classify_pass(model, s, maps, &grad_slots[static_cast<size_t>(i)]);
      });
      std::fill(grad_sum.begin(), grad_sum.end(), 0.0);
      for (int i = 0; i < bsz; ++i)
        model.params().add_flat(grad_slots[static_cast<size_t>(i)], 1.0 / bsz,
                                grad_sum);
      for (const auto& l : losses) {
        if (!std::isfinite(l.total))
          throw NumericError("training: non-finite loss at epoch " +
                             std::to_string(epoch));
        sum_primary += l.primary;
        sum_paat += l.paat;
        sum_total += l.total;
      }
      apply_adam(model.params(), grad_sum, cfg.optim, epoch, steps);
      ++steps;
    }
    rec.loss_primary = sum_primary / static_cast<double>(order.size());
    rec.loss_paat = sum_paat / static_cast<double>(order.size());
    rec.loss_total = sum_total / static_cast<double>(order.size());
    EvalMetrics m =
        evaluate_classifier(model, data, "test", cfg.corruption, cfg.seed, cfg.workers);
    rec.eval_top1 = m.top1;
    rec.eval_mca = m.mca;
  };

  auto run_epoch_align = [&](int epoch, EpochRecord& rec) {
    auto pairs = paired_episodes(data, "train");
    if (pairs.empty()) throw DataError("train: empty split 'train'");
    std::vector<int> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    auto rng = rng_stream(cfg.seed, 0xE70C4, static_cast<uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double sum_primary = 0.0, sum_paat = 0.0, sum_total = 0.0;
    int steps = 0;
    const uint64_t neg_seed = mix64(cfg.seed ^ static_cast<uint64_t>(epoch));
    for (size_t start = 0; start < order.size(); start += cfg.batch) {
      const int bsz =
          static_cast<int>(std::min<size_t>(cfg.batch, order.size() - start));
      grad_slots.assign(static_cast<size_t>(bsz), {});
      std::vector<SampleLoss> losses(static_cast<size_t>(bsz));
      parallel_for(bsz, cfg.workers, [&](int i) {
        const auto& ep = pairs[static_cast<size_t>(order[start + i])];
        PreparedMaps ma = prepare_maps(*ep.a, model.config(), cfg.corruption, cfg.seed);
        PreparedMaps mb = prepare_maps(*ep.b, model.config(), cfg.corruption, cfg.seed);
        losses[static_cast<size_t>(i)] =
            align_pass(model, ep, ma, mb, cfg.tcn_margin, cfg.tcn_window, neg_seed,
                       &grad_slots[static_cast<size_t>(i)]);
      });
      std::fill(grad_sum.begin(), grad_sum.end(), 0.0);
      for (int i = 0; i < bsz; ++i)
        model.params().add_flat(grad_slots[static_cast<size_t>(i)], 1.0 / bsz,
                                grad_sum);
      for (const auto& l : losses) {
        if (!std::isfinite(l.total))
          throw NumericError("training: non-finite loss at epoch " +
                             std::to_string(epoch));
        sum_primary += l.primary;
        sum_paat += l.paat;
        sum_total += l.total;
      }
      apply_adam(model.params(), grad_sum, cfg.optim, epoch, steps);
      ++steps;
    }
    rec.loss_primary = sum_primary / static_cast<double>(order.size());
    rec.loss_paat = sum_paat / static_cast<double>(order.size());
    rec.loss_total = sum_total / static_cast<double>(order.size());
    rec.eval_alignment =
        evaluate_alignment(model, data, "test", cfg.corruption, cfg.seed, cfg.workers);
  };

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    EpochRecord rec;
    rec.epoch = epoch;
    if (cfg.task == "classify")
      run_epoch_classify(epoch, rec);
    else
      run_epoch_align(epoch, rec);
    result.epochs.push_back(rec);
    const double metric =
        cfg.task == "classify" ? rec.eval_top1 : -rec.eval_alignment;
    if (metric > result.best_metric) {
      result.best_metric = metric;
      result.best_epoch = epoch;
      result.best_params = snapshot_params(model);
    }
    if (log) {
      *log << epoch_json(cfg.task, rec).dump() << "\n";
      log->flush();
    }
  }
  result.final_record = result.epochs.back();
  return result;
}

}  // namespace pavt
