#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "support/fixtures.hpp"

using namespace spurclip;

namespace {

Dataset tiny_dataset(std::size_t n) {
  auto m = fixture::tiny_manifest(n);
  const auto img = fixture::random_bank(n, 4, 1);
  const auto txt = fixture::random_bank(12, 4, 2);
  return {m, img.to_matrix(), txt.to_matrix(), std::nullopt, std::nullopt};
}

std::vector<std::size_t> sizes(const std::vector<std::vector<Anchor>>& batches) {
  std::vector<std::size_t> s;
  for (const auto& b : batches) s.push_back(b.size());
  return s;
}

Dataset small_synth(std::uint64_t seed) {
  SynthConfig cfg;
  cfg.seed = seed;
  cfg.val_per_group = 20;
  cfg.test_per_group = 20;
  return to_dataset(generate(cfg));
}

ErrorCode train_error(const Dataset& ds, const TrainConfig& cfg) {
  try {
    train(ds, cfg);
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "train did not raise";
  return ErrorCode::IoError;
}

}  // namespace

TEST(SampleEpoch, ShuffleChunks) {
  TrainConfig cfg;
  cfg.batch_size = 4;
  SplitMix64 rng(1);
  EXPECT_EQ(sizes(sample_epoch(tiny_dataset(10), cfg, rng)), (std::vector<std::size_t>{4, 4, 2}));
  EXPECT_EQ(sizes(sample_epoch(tiny_dataset(9), cfg, rng)), (std::vector<std::size_t>{4, 4}));
}

TEST(SampleEpoch, ShuffleIsAPermutation) {
  TrainConfig cfg;
  cfg.batch_size = 3;
  SplitMix64 rng(2);
  const auto ds = tiny_dataset(12);
  std::vector<int> seen(12, 0);
  for (const auto& b : sample_epoch(ds, cfg, rng))
    for (const auto& a : b) {
      ++seen[a.example];
      EXPECT_LT(a.template_id, 2u);
      EXPECT_EQ(a.label, ds.manifest.examples()[a.example].label);
      EXPECT_EQ(a.attr_value, static_cast<bool>(ds.manifest.examples()[a.example].flags[0]));
    }
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(SampleEpoch, GroupBalanced) {
  TrainConfig cfg;
  cfg.batch_size = 8;
  cfg.sampler = Sampler::group_balanced;
  SplitMix64 rng(3);
  const auto ds = tiny_dataset(16);
  const auto batches = sample_epoch(ds, cfg, rng);
  ASSERT_EQ(batches.size(), 2u);
  for (const auto& b : batches) {
    std::map<GroupKey, int> per;
    for (const auto& a : b) ++per[{a.label, a.attr_value}];
    ASSERT_EQ(per.size(), 4u);
    for (const auto& [k, n] : per) EXPECT_EQ(n, 2);
  }
}

TEST(SampleEpoch, EmptyTrainSplit) {
  auto ds = tiny_dataset(3);
  for (std::size_t i = 0; i < 3; ++i) ds.manifest.set_split(i, Split::val);
  SplitMix64 rng(0);
  try {
    sample_epoch(ds, TrainConfig{}, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyTrainSplit);
  }
}

TEST(SgdStep, Examples) {
  ProjectionParams p{Matrix(1, 1), Matrix(1, 1), 1.0};
  p.w_img(0, 0) = 1.0;
  p.w_txt(0, 0) = -2.0;
  auto g = Gradients::zeros_like(p);

  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.0;
  EXPECT_EQ(sgd_step(p, g, cfg), p);

  cfg.weight_decay = 0.5;
  const auto q = sgd_step(p, g, cfg);
  EXPECT_DOUBLE_EQ(q.w_img(0, 0), 0.95);
  EXPECT_DOUBLE_EQ(q.log_inv_tau, 1.0);  // no decay on the temperature

  g.log_inv_tau = 2.0;
  EXPECT_DOUBLE_EQ(sgd_step(p, g, cfg).log_inv_tau, 0.8);
  cfg.freeze_temperature = true;
  EXPECT_DOUBLE_EQ(sgd_step(p, g, cfg).log_inv_tau, 1.0);

  g.w_txt(0, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    sgd_step(p, g, cfg);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NonFiniteUpdate);
  }
}

TEST(SgdStep, ClampsTemperature) {
  ProjectionParams p{Matrix(1, 1), Matrix(1, 1), std::log(99.0)};
  auto g = Gradients::zeros_like(p);
  g.log_inv_tau = -100.0;
  TrainConfig cfg;
  cfg.learning_rate = 1.0;
  EXPECT_NEAR(sgd_step(p, g, cfg).logit_scale(), 100.0, 1e-9);
}

TEST(SgdStep, WeightDecayIsGeometric) {
  const auto p0 = ProjectionParams::random(3, 4, 5, 1);
  auto p = p0;
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.2;
  const auto g = Gradients::zeros_like(p);
  for (int k = 1; k <= 10; ++k) {
    p = sgd_step(p, g, cfg);
    EXPECT_NEAR(norm(p.w_img.data()), std::pow(0.98, k) * norm(p0.w_img.data()), 1e-12);
    EXPECT_NEAR(norm(p.w_txt.data()), std::pow(0.98, k) * norm(p0.w_txt.data()), 1e-12);
  }
}

TEST(TrainConfigValidation, Invariants) {
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    try {
      c.validate();
    } catch (const Error& e) {
      return e.code() == ErrorCode::InvalidConfig || e.code() == ErrorCode::InvalidLossSpec;
    }
    return false;
  };
  EXPECT_TRUE(bad([](TrainConfig& c) { c.learning_rate = 0; }));
  EXPECT_TRUE(bad([](TrainConfig& c) { c.batch_size = 1; }));
  EXPECT_TRUE(bad([](TrainConfig& c) { c.epochs = 0; }));
  EXPECT_TRUE(bad([](TrainConfig& c) { c.loss_spec = LossSpec{}; }));
  EXPECT_NO_THROW(TrainConfig{}.validate());
}

TEST(Train, EvaluatesInitialParamsFirst) {
  const auto ds = small_synth(1);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.learning_rate = 1e-12;
  const auto r = train(ds, cfg);
  ASSERT_EQ(r.history.size(), 2u);
  EXPECT_EQ(r.history[0].epoch, 0u);
  EXPECT_FALSE(r.history[0].train_loss.has_value());
  const auto init = ProjectionParams::initial(ds, cfg.joint_dim, cfg.seed);
  const auto wg = group_accuracies(classify(init, ds, Split::val), ds.manifest, "water").worst_group_acc;
  EXPECT_DOUBLE_EQ(r.history[0].val.worst_group_acc, wg);
  // tiny steps cannot change predictions, so the tie keeps epoch 0
  EXPECT_EQ(r.state.best_epoch, 0u);
  EXPECT_EQ(r.state.best_params, init);
  EXPECT_DOUBLE_EQ(r.state.best_worst_group_acc, wg);
}

TEST(Train, SameSeedSameRun) {
  const auto ds = small_synth(2);
  TrainConfig cfg;
  cfg.epochs = 3;
  cfg.learning_rate = 0.5;
  cfg.loss_spec = LossSpec::preset("row1");
  const auto a = train(ds, cfg);
  const auto b = train(ds, cfg);
  EXPECT_EQ(encode_checkpoint({a.state.params, a.state.epoch, a.state.rng_state}),
            encode_checkpoint({b.state.params, b.state.epoch, b.state.rng_state}));
  ASSERT_EQ(a.history.size(), b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i)
    EXPECT_EQ(to_json(a.history[i], ds.manifest).dump(), to_json(b.history[i], ds.manifest).dump());
  cfg.seed = 9;
  EXPECT_NE(train(ds, cfg).state.params, a.state.params);
}

TEST(Train, BestDominatesHistory) {
  const auto ds = small_synth(3);
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.learning_rate = 1.0;
  cfg.sampler = Sampler::group_balanced;
  cfg.batch_size = 64;
  const auto r = train(ds, cfg);
  for (const auto& h : r.history) {
    EXPECT_GE(r.state.best_worst_group_acc, h.val.worst_group_acc);
    EXPECT_GE(h.best_val_worst_group, h.val.worst_group_acc);
  }
  const double best_recomputed =
      group_accuracies(classify(r.state.best_params, ds, Split::val), ds.manifest, "water").worst_group_acc;
  EXPECT_DOUBLE_EQ(best_recomputed, r.state.best_worst_group_acc);
}

TEST(Train, EvalCadence) {
  const auto ds = small_synth(4);
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.eval_every = 2;
  std::vector<std::size_t> epochs;
  train(ds, cfg, std::nullopt, [&](const EvalRecord& r) { epochs.push_back(r.epoch); });
  EXPECT_EQ(epochs, (std::vector<std::size_t>{0, 2, 4, 5}));
}

TEST(Train, Errors) {
  auto ds = small_synth(5);
  TrainConfig cfg;
  cfg.epochs = 1;
  // drop one validation group
  auto no_val = ds;
  for (std::size_t i = 0; i < no_val.manifest.examples().size(); ++i) {
    const auto& e = no_val.manifest.examples()[i];
    if (e.split == Split::val && e.label == 1 && !e.flags[0]) no_val.manifest.set_split(i, Split::test);
  }
  EXPECT_EQ(train_error(no_val, cfg), ErrorCode::EmptyValGroup);

  auto no_train = ds;
  for (std::size_t i = 0; i < no_train.manifest.examples().size(); ++i)
    if (no_train.manifest.examples()[i].split == Split::train) no_train.manifest.set_split(i, Split::test);
  EXPECT_EQ(train_error(no_train, cfg), ErrorCode::EmptyTrainSplit);

  auto one_train = no_train;
  one_train.manifest.set_split(0, Split::train);
  EXPECT_EQ(train_error(one_train, cfg), ErrorCode::InvalidConfig);

  cfg.batch_size = 1;
  EXPECT_EQ(train_error(ds, cfg), ErrorCode::InvalidConfig);
}

TEST(Train, DegenerateBatchesAreCounted) {
  const auto ds = small_synth(6);
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.loss_spec = LossSpec::parse("vs");
  // two examples can never hold both a positive and a negative
  cfg.batch_size = 2;
  auto r = train(ds, cfg);
  EXPECT_EQ(r.history.back().degenerate_batches, r.history.back().batches);
  cfg.batch_size = 3;
  r = train(ds, cfg);
  EXPECT_GT(r.history.back().degenerate_batches, 0u);
  EXPECT_GT(r.history.back().batches, r.history.back().degenerate_batches);
}

TEST(Train, ClipOnlyLeavesShortcut) {
  // with a strong attribute, plain fine-tuning keeps a large group gap
  const auto ds = to_dataset(generate(SynthConfig{}));
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.learning_rate = 0.5;
  const auto r = train(ds, cfg);
  const auto g = group_accuracies(classify(r.state.params, ds, Split::test), ds.manifest, "water");
  EXPECT_LT(g.worst_group_acc, g.average_acc);
  EXPECT_LT(g.worst_group_acc + 0.2, g.average_acc);
}
