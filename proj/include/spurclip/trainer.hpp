#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "spurclip/detection.hpp"
#include "spurclip/error.hpp"
#include "spurclip/losses.hpp"
#include "spurclip/manifest.hpp"
#include "spurclip/metrics.hpp"
#include "spurclip/projection.hpp"
#include "spurclip/rng.hpp"

namespace spurclip {

enum class Sampler { shuffle, group_balanced };

inline std::string to_string(Sampler s) { return s == Sampler::shuffle ? "shuffle" : "group_balanced"; }

inline Sampler parse_sampler(const std::string& s) {
  if (s == "shuffle") return Sampler::shuffle;
  if (s == "group_balanced") return Sampler::group_balanced;
  throw Error(ErrorCode::InvalidConfig, "unknown sampler '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 1e-5;
  double weight_decay = 1e-4;
  std::size_t batch_size = 128;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  LossSpec loss_spec = LossSpec::parse("clip");
  Sampler sampler = Sampler::shuffle;
  std::size_t eval_every = 1;
  bool freeze_temperature = false;
  /// Joint width for random initialization; ignored when the dataset ships
  /// pretrained projections.
  std::size_t joint_dim = 16;

  void validate() const {
    if (!(learning_rate > 0.0 && std::isfinite(learning_rate)))
      throw Error(ErrorCode::InvalidConfig, "learning_rate must be > 0");
    if (!(weight_decay >= 0.0 && std::isfinite(weight_decay)))
      throw Error(ErrorCode::InvalidConfig, "weight_decay must be >= 0");
    if (batch_size < 2) throw Error(ErrorCode::InvalidConfig, "batch_size must be >= 2");
    if (epochs < 1) throw Error(ErrorCode::InvalidConfig, "epochs must be >= 1");
    if (eval_every < 1) throw Error(ErrorCode::InvalidConfig, "eval_every must be >= 1");
    if (joint_dim < 1) throw Error(ErrorCode::InvalidConfig, "joint_dim must be >= 1");
    loss_spec.validate();
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"weight_decay", c.weight_decay}, {"batch_size", c.batch_size},
          {"epochs", c.epochs},               {"seed", c.seed},                 {"loss", c.loss_spec.to_string()},
          {"sampler", to_string(c.sampler)},  {"eval_every", c.eval_every},     {"freeze_temperature", c.freeze_temperature},
          {"joint_dim", c.joint_dim}};
}

/// Attribute value of every example for the mitigated attribute (all false
/// when the manifest has none).
inline std::vector<bool> mitigated_values(const DatasetManifest& m) {
  std::vector<bool> out(m.examples().size(), false);
  if (!m.mitigated_attribute) return out;
  const std::size_t a = m.mitigated_index();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = m.examples()[i].flags[a];
  return out;
}

/// One epoch of minibatches over the train split.
///
/// shuffle: a seeded permutation cut into batch_size chunks; a final short
/// chunk is kept when it has at least two examples.
/// group_balanced: floor(n_train / batch_size) batches (at least one), each
/// drawing equally from every nonempty (label, attribute) cell; each cell is
/// consumed as a reshuffled cycle, so small cells repeat. When batch_size is
/// not divisible by the cell count the remainder rotates across cells.
/// In both modes every train example gets one uniformly drawn template for
/// the epoch, drawn in example order before any batching.
inline std::vector<std::vector<Anchor>> sample_epoch(const Dataset& ds, const TrainConfig& config, SplitMix64& rng) {
  const auto& m = ds.manifest;
  const auto train = split_indices(m, Split::train);
  if (train.empty()) throw Error(ErrorCode::EmptyTrainSplit, "train split is empty");
  const auto attr = mitigated_values(m);
  const std::size_t n_templates = m.text_index.n_templates();

  std::map<std::size_t, std::size_t> template_of;
  for (std::size_t i : train) template_of[i] = rng.index(n_templates);

  auto anchor_for = [&](std::size_t i) {
    const auto& e = m.examples()[i];
    return Anchor{i, e.image_row, e.label, static_cast<bool>(attr[i]), template_of[i]};
  };

  std::vector<std::vector<Anchor>> batches;
  if (config.sampler == Sampler::shuffle) {
    auto order = train;
    shuffle(order, rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      if (end - start < 2) break;
      auto& b = batches.emplace_back();
      for (std::size_t k = start; k < end; ++k) b.push_back(anchor_for(order[k]));
    }
    return batches;
  }

  std::map<GroupKey, std::vector<std::size_t>> cells;
  for (std::size_t i : train) cells[{m.examples()[i].label, static_cast<bool>(attr[i])}].push_back(i);
  struct Cycle {
    std::vector<std::size_t> items;
    std::size_t pos = 0;
  };
  std::vector<Cycle> cycles;
  for (auto& [key, items] : cells) {
    cycles.push_back({items, 0});
    shuffle(cycles.back().items, rng);
  }
  const std::size_t g = cycles.size();
  const std::size_t n_batches = std::max<std::size_t>(1, train.size() / config.batch_size);
  const std::size_t per = config.batch_size / g;
  const std::size_t extra = config.batch_size % g;
  for (std::size_t b = 0; b < n_batches; ++b) {
    auto& batch = batches.emplace_back();
    for (std::size_t c = 0; c < g; ++c) {
      const std::size_t take = per + (((c + g - b % g) % g) < extra ? 1 : 0);
      auto& cyc = cycles[c];
      for (std::size_t k = 0; k < take; ++k) {
        if (cyc.pos == cyc.items.size()) {
          shuffle(cyc.items, rng);
          cyc.pos = 0;
        }
        batch.push_back(anchor_for(cyc.items[cyc.pos++]));
      }
    }
  }
  return batches;
}

/// W <- W - lr (grad + wd W) for both projections; the log-temperature gets
/// a plain gradient step (or none when frozen) and is clamped afterwards.
inline ProjectionParams sgd_step(const ProjectionParams& params, const Gradients& grads, const TrainConfig& config) {
  if (!params.w_img.same_shape(grads.w_img) || !params.w_txt.same_shape(grads.w_txt))
    throw Error(ErrorCode::DimensionMismatch, "gradient shapes do not match parameters");
  if (!grads.all_finite()) throw Error(ErrorCode::NonFiniteUpdate, "non-finite gradient");
  const double lr = config.learning_rate;
  const double wd = config.weight_decay;
  ProjectionParams out = params;
  auto step = [&](Matrix& w, const Matrix& g) {
    for (std::size_t i = 0; i < w.size(); ++i) w.data()[i] -= lr * (g.data()[i] + wd * w.data()[i]);
  };
  step(out.w_img, grads.w_img);
  step(out.w_txt, grads.w_txt);
  if (!config.freeze_temperature) out.log_inv_tau -= lr * grads.log_inv_tau;
  out.clamp_temperature();
  if (!out.all_finite()) throw Error(ErrorCode::NonFiniteUpdate, "update produced non-finite parameters");
  return out;
}

struct TrainState {
  ProjectionParams params;
  ProjectionParams best_params;
  double best_worst_group_acc = -1.0;
  std::size_t best_epoch = 0;
  std::size_t epoch = 0;
  std::uint64_t rng_state = 0;
};

struct EvalRecord {
  std::size_t epoch = 0;
  std::optional<double> train_loss;  ///< mean over stepped batches; none before training
  std::array<std::optional<double>, kNumTerms> term_losses{};
  std::size_t batches = 0;
  std::size_t degenerate_batches = 0;
  std::array<std::size_t, kNumTerms> degenerate_terms{};
  GroupAccuracies val;
  double best_val_worst_group = 0.0;
  std::size_t best_epoch = 0;
};

struct TrainResult {
  TrainState state;
  std::vector<EvalRecord> history;
};

inline nlohmann::json to_json(const EvalRecord& r, const DatasetManifest& m) {
  nlohmann::json terms = nlohmann::json::object();
  nlohmann::json degenerate = nlohmann::json::object();
  for (auto t : kAllTerms) {
    const auto i = static_cast<std::size_t>(t);
    if (r.term_losses[i]) terms[std::string(term_name(t))] = *r.term_losses[i];
    if (r.degenerate_terms[i]) degenerate[std::string(term_name(t))] = r.degenerate_terms[i];
  }
  return {{"type", "eval"},
          {"epoch", r.epoch},
          {"train_loss", r.train_loss ? nlohmann::json(*r.train_loss) : nlohmann::json(nullptr)},
          {"term_losses", terms},
          {"batches", r.batches},
          {"degenerate_batches", r.degenerate_batches},
          {"degenerate_terms", degenerate},
          {"val", to_json(r.val, m)},
          {"val_worst_group", r.val.worst_group_acc},
          {"best_val_worst_group", r.best_val_worst_group},
          {"best_epoch", r.best_epoch}};
}

using EvalCallback = std::function<void(const EvalRecord&)>;

/// Fine-tunes the projections with SGD and keeps the parameters of the
/// evaluation with the highest validation worst-group accuracy (strictly
/// higher replaces; ties keep the earlier epoch). Epoch 0 is evaluated
/// before any step.
inline TrainResult train(const Dataset& ds, const TrainConfig& config,
                         std::optional<ProjectionParams> init = std::nullopt, const EvalCallback& on_eval = {}) {
  config.validate();
  const auto& m = ds.manifest;
  if (!m.mitigated_attribute)
    throw Error(ErrorCode::UnknownAttribute, "training needs a mitigated_attribute to define groups");
  const std::string& attr = *m.mitigated_attribute;
  const std::size_t n_train = split_indices(m, Split::train).size();
  if (n_train == 0) throw Error(ErrorCode::EmptyTrainSplit, "train split is empty");
  if (n_train < 2) throw Error(ErrorCode::InvalidConfig, "train split has one example; effective batch size < 2");
  const auto val_cells = partition_groups(m, attr, Split::val);
  for (std::size_t c = 0; c < m.n_classes(); ++c)
    for (bool v : {false, true})
      if (!val_cells.contains({c, v}))
        throw Error(ErrorCode::EmptyValGroup, "validation split has no examples in group " + to_string(GroupKey{c, v}));

  TrainResult result;
  auto& st = result.state;
  st.params = init ? *init : ProjectionParams::initial(ds, config.joint_dim, config.seed);
  st.params.clamp_temperature();
  SplitMix64 rng(config.seed);

  auto evaluate = [&](EvalRecord rec) {
    rec.epoch = st.epoch;
    rec.val = group_accuracies(classify(st.params, ds, Split::val), m, attr);
    if (rec.val.worst_group_acc > st.best_worst_group_acc) {
      st.best_worst_group_acc = rec.val.worst_group_acc;
      st.best_params = st.params;
      st.best_epoch = st.epoch;
    }
    rec.best_val_worst_group = st.best_worst_group_acc;
    rec.best_epoch = st.best_epoch;
    if (on_eval) on_eval(rec);
    result.history.push_back(std::move(rec));
  };

  evaluate(EvalRecord{});

  EvalRecord pending;
  std::size_t stepped = 0;
  double loss_sum = 0.0;
  std::array<double, kNumTerms> term_sum{};
  std::array<std::size_t, kNumTerms> term_n{};

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    SplitMix64 epoch_rng = rng.fork();
    for (auto& anchors : sample_epoch(ds, config, epoch_rng)) {
      ++pending.batches;
      const RawBatch raw = make_raw_batch(ds, std::move(anchors));
      GradientResult g;
      try {
        g = compute_gradients(st.params, raw, config.loss_spec);
      } catch (const Error& e) {
        if (e.code() != ErrorCode::DegenerateBatch) throw;
        ++pending.degenerate_batches;
        for (auto t : kAllTerms)
          if (config.loss_spec.has(t)) ++pending.degenerate_terms[static_cast<std::size_t>(t)];
        continue;
      }
      for (auto t : g.breakdown.degenerate) ++pending.degenerate_terms[static_cast<std::size_t>(t)];
      for (auto t : kAllTerms)
        if (const auto& v = g.breakdown.terms[static_cast<std::size_t>(t)]) {
          term_sum[static_cast<std::size_t>(t)] += *v;
          ++term_n[static_cast<std::size_t>(t)];
        }
      loss_sum += g.loss;
      ++stepped;
      st.params = sgd_step(st.params, g.grads, config);
    }
    st.epoch = epoch;
    if (epoch % config.eval_every == 0 || epoch == config.epochs) {
      if (stepped > 0) pending.train_loss = loss_sum / static_cast<double>(stepped);
      for (std::size_t i = 0; i < kNumTerms; ++i)
        if (term_n[i] > 0) pending.term_losses[i] = term_sum[i] / static_cast<double>(term_n[i]);
      evaluate(std::move(pending));
      pending = EvalRecord{};
      stepped = 0;
      loss_sum = 0.0;
      term_sum = {};
      term_n = {};
    }
  }
  st.rng_state = rng.state();
  return result;
}

inline nlohmann::json summary_json(const TrainResult& r) {
  return {{"type", "summary"},
          {"best_epoch", r.state.best_epoch},
          {"best_val_worst_group", r.state.best_worst_group_acc},
          {"epochs", r.state.epoch},
          {"evaluations", r.history.size()}};
}

}  // namespace spurclip
