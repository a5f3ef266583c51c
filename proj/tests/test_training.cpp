#include <gtest/gtest.h>

#include "oudefend/training.hpp"

namespace oudefend {
namespace {

BackboneConfig tiny_backbone() {
  BackboneConfig b;
  b.widths = {4, 4, 8, 8};
  return b;
}

OUDefendConfig tiny_block() {
  OUDefendConfig o;
  o.in_channels = 8;
  o.reduce_ratio = 4;
  return o;
}

DatasetSpec tiny_spec(std::size_t train, std::size_t test, std::uint64_t seed = 1) {
  DatasetSpec s;
  s.num_train = train;
  s.num_test = test;
  s.frames = 4;
  s.height = s.width = 16;
  s.seed = seed;
  return s;
}

ModelParams one_param(std::vector<double> w) {
  ModelParams p;
  const Shape shape{w.size()};
  p.emplace("w", Tensor(shape, std::move(w)));
  return p;
}

TEST(Sgd, ZeroLearningRateLeavesWeights) {
  auto p = one_param({1.0, -2.0});
  Velocity v;
  sgd_step(p, {{"w", {3.0, 4.0}}}, 0.0, 0.9, 1e-4, v);
  EXPECT_EQ(p.at("w").data()[0], 1.0);
  EXPECT_EQ(p.at("w").data()[1], -2.0);
}

TEST(Sgd, PlainStep) {
  auto p = one_param({1.0});
  Velocity v;
  sgd_step(p, {{"w", {0.5}}}, 0.1, 0.0, 0.0, v);
  EXPECT_DOUBLE_EQ(p.at("w").data()[0], 0.95);
}

TEST(Sgd, MomentumAccumulates) {
  auto p = one_param({0.0});
  Velocity v;
  sgd_step(p, {{"w", {1.0}}}, 0.1, 0.9, 0.0, v);
  EXPECT_DOUBLE_EQ(p.at("w").data()[0], -0.1);
  sgd_step(p, {{"w", {1.0}}}, 0.1, 0.9, 0.0, v);
  EXPECT_NEAR(p.at("w").data()[0], -0.29, 1e-15);
}

TEST(Sgd, WeightDecayPullsTowardZero) {
  auto p = one_param({2.0});
  Velocity v;
  sgd_step(p, {{"w", {0.0}}}, 0.5, 0.0, 0.1, v);
  EXPECT_DOUBLE_EQ(p.at("w").data()[0], 1.9);
}

TEST(Sgd, MisalignedGradientsThrow) {
  auto p = one_param({1.0, 2.0});
  Velocity v;
  EXPECT_THROW(sgd_step(p, {}, 0.1, 0.0, 0.0, v), ParamError);
  EXPECT_THROW(sgd_step(p, {{"w", {1.0}}}, 0.1, 0.0, 0.0, v), ParamError);
  EXPECT_THROW(sgd_step(p, {{"x", {1.0, 1.0}}}, 0.1, 0.0, 0.0, v), ParamError);
}

TEST(Schedule, StepDecay) {
  TrainConfig c;
  EXPECT_DOUBLE_EQ(c.lr_at(0), 0.05);
  EXPECT_DOUBLE_EQ(c.lr_at(5), 0.05);
  EXPECT_DOUBLE_EQ(c.lr_at(6), 0.005);
  EXPECT_DOUBLE_EQ(c.lr_at(8), 0.0005);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.batch_size = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.lr = 0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_EQ(parse_train_mode("adversarial"), TrainMode::adversarial);
  EXPECT_THROW(parse_train_mode("madry"), ConfigError);
}

TEST(TrainEpoch, BatchLargerThanDatasetThrows) {
  auto data = generate_dataset(tiny_spec(6, 5));
  TrainState s(Model::create(tiny_backbone(), std::nullopt, 1));
  TrainConfig c;
  c.batch_size = 8;
  EXPECT_THROW(train_epoch(s, data.train, c), ConfigError);
}

TEST(TrainEpoch, RemainderBatchIsDropped) {
  auto data = generate_dataset(tiny_spec(10, 5));
  TrainState s(Model::create(tiny_backbone(), std::nullopt, 1));
  TrainConfig c;
  c.batch_size = 4;
  EXPECT_EQ(train_epoch(s, data.train, c).batches, 2u);
  EXPECT_EQ(s.clean_updates, 2u);
  EXPECT_EQ(s.epoch, 1u);
}

double batch_loss(Model model, const VideoBatch& b) {
  Tape tape;
  ParamBinder p(tape, model.params);
  return softmax_cross_entropy(model_forward(tape.constant_ref(b.pixels), model, p, Mode::train), b.labels)
      .value()
      .item();
}

// Two distinct videos, four copies each.
TEST(TrainEpoch, SeparableToyLossDecreases) {
  auto d = generate_dataset(tiny_spec(5, 5, 9));
  std::vector<std::size_t> idx{0, 1, 0, 1, 0, 1, 0, 1};
  VideoBatch toy = d.train.select(idx);
  ASSERT_NE(toy.labels[0], toy.labels[1]);
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    TrainState s(Model::create(tiny_backbone(), tiny_block(), seed));
    TrainConfig c;
    c.batch_size = 4;
    c.lr = 0.001;
    c.seed = seed;
    const double before = batch_loss(s.model, toy);
    train_epoch(s, toy, c);
    EXPECT_LT(batch_loss(s.model, toy), before) << seed;
  }
}

TEST(TrainEpoch, SameSeedSameParameters) {
  auto data = generate_dataset(tiny_spec(16, 5));
  TrainConfig c;
  c.batch_size = 4;
  c.seed = 5;
  TrainState a(Model::create(tiny_backbone(), tiny_block(), 2));
  TrainState b(Model::create(tiny_backbone(), tiny_block(), 2));
  for (int e = 0; e < 2; ++e) {
    EXPECT_EQ(train_epoch(a, data.train, c).train_loss, train_epoch(b, data.train, c).train_loss);
  }
  EXPECT_EQ(a.model.params, b.model.params);
  c.seed = 6;
  TrainState other(Model::create(tiny_backbone(), tiny_block(), 2));
  train_epoch(other, data.train, c);
  train_epoch(other, data.train, c);
  EXPECT_NE(other.model.params, a.model.params);
}

TEST(Adversarial, ZeroBudgetMatchesCleanTraining) {
  auto data = generate_dataset(tiny_spec(12, 5));
  TrainConfig clean;
  clean.batch_size = 4;
  TrainConfig adv = clean;
  adv.mode = TrainMode::adversarial;
  adv.train_attack = PgdLinf{0.0, 1.0 / 255, 2};
  TrainState a(Model::create(tiny_backbone(), tiny_block(), 3));
  TrainState b(Model::create(tiny_backbone(), tiny_block(), 3));
  EXPECT_EQ(train_epoch(a, data.train, clean).train_loss, train_epoch(b, data.train, adv).train_loss);
  EXPECT_EQ(a.model.params, b.model.params);
}

TEST(Adversarial, EveryUpdateUsesAttackedBatch) {
  auto data = generate_dataset(tiny_spec(12, 5));
  TrainConfig c;
  c.batch_size = 4;
  c.mode = TrainMode::adversarial;
  c.train_attack = PgdLinf{16.0 / 255, 6.0 / 255, 3};
  TrainState s(Model::create(tiny_backbone(), tiny_block(), 3));
  std::size_t generations = 0;
  train_epoch(s, data.train, c, [&](const TrainState&, bool generated) { generations += generated; });
  EXPECT_EQ(s.clean_updates, 0u);
  EXPECT_EQ(s.adversarial_updates, 3u);
  EXPECT_EQ(generations, 3u);
}

TEST(Adversarial, GenerationLeavesModelUntouched) {
  auto data = generate_dataset(tiny_spec(12, 5));
  TrainConfig c;
  c.batch_size = 4;
  c.mode = TrainMode::adversarial;
  c.train_attack = PgdLinf{16.0 / 255, 6.0 / 255, 3};
  TrainState s(Model::create(tiny_backbone(), tiny_block(), 4));
  std::optional<Model> snapshot;
  std::size_t checked = 0;
  train_epoch(s, data.train, c, [&](const TrainState& st, bool generated) {
    if (!generated) {
      snapshot = st.model;
      return;
    }
    EXPECT_EQ(st.model.params, snapshot->params);
    for (const auto& [name, bn] : snapshot->bn) {
      EXPECT_EQ(st.model.bn.at(name).mean, bn.mean) << name;
      EXPECT_EQ(st.model.bn.at(name).var, bn.var) << name;
    }
    ++checked;
  });
  EXPECT_EQ(checked, 3u);
}

TEST(Evaluate, LabelsEqualToPredictionsScorePerfect) {
  auto data = generate_dataset(tiny_spec(5, 15));
  auto model = Model::create(tiny_backbone(), tiny_block(), 7);
  VideoBatch test = data.test;
  test.labels = predict(model, test.pixels);
  EXPECT_DOUBLE_EQ(evaluate(model, test, std::nullopt, 4), 100.0);
}

TEST(Evaluate, ConstantLogitsScoreChance) {
  auto data = generate_dataset(tiny_spec(5, 15));
  auto model = Model::create(tiny_backbone(), std::nullopt, 7);
  for (double& w : model.params.at("fc.weight").storage()) w = 0.0;
  for (double& w : model.params.at("fc.bias").storage()) w = 0.0;
  EXPECT_DOUBLE_EQ(evaluate(model, data.test), 20.0);
}

TEST(Evaluate, AttackNeverHelps) {
  auto data = generate_dataset(tiny_spec(40, 20, 2));
  TrainConfig c;
  c.batch_size = 4;
  TrainState s(Model::create(tiny_backbone(), tiny_block(), 2));
  for (int e = 0; e < 3; ++e) train_epoch(s, data.train, c);
  const double clean = evaluate(s.model, data.test);
  for (auto k : kAllAttacks) {
    EXPECT_LE(evaluate(s.model, data.test, default_attack(k)), clean) << to_string(k);
  }
}

TEST(AvgAdv, WorkedExamples) {
  const std::vector<double> a{33.94, 35.05, 47.00, 41.29, 74.81, 55.99};
  EXPECT_DOUBLE_EQ(avg_adv(a), 48.01);
  const std::vector<double> b{34.18, 35.32, 47.63, 42.00, 81.76, 56.25};
  EXPECT_DOUBLE_EQ(avg_adv(b), 49.52);
  const std::vector<double> z(6, 0.0);
  EXPECT_DOUBLE_EQ(avg_adv(z), 0.0);
  const std::vector<double> five(5, 10.0);
  EXPECT_THROW(avg_adv(five), ArityError);
  EXPECT_THROW(avg_adv(std::vector<double>(7, 1.0)), ArityError);
}

TEST(Report, TsvLayout) {
  TrainReport r;
  EpochRecord e1;
  e1.run = "full";
  e1.epoch = 1;
  e1.train_loss = 1.5;
  e1.clean_acc = 40;
  EpochRecord e2 = e1;
  e2.epoch = 2;
  for (auto k : kAllAttacks) e2.robust[k] = 30;
  r.epochs = {e1, e2};
  const auto tsv = r.to_tsv(false);
  EXPECT_EQ(tsv,
            "run\tepoch\ttrain_loss\tclean_acc\tpgd_linf\tpgd_l2\tmultav_linf\troa\taf\tspa\tavg_adv\n"
            "full\t1\t1.500000\t40.00\t-\t-\t-\t-\t-\t-\t-\n"
            "full\t2\t1.500000\t40.00\t30.00\t30.00\t30.00\t30.00\t30.00\t30.00\t30.00\n");
  EXPECT_NE(r.to_tsv(true).find("\tseconds\n"), std::string::npos);
}

TEST(Fit, LogsEveryEpochAndAttacksOnlyAtEnd) {
  auto data = generate_dataset(tiny_spec(8, 5));
  TrainConfig c;
  c.epochs = 2;
  c.batch_size = 4;
  TrainState s(Model::create(tiny_backbone(), std::nullopt, 1));
  auto rep = fit(s, data.train, data.test, c, {PgdLinf{}}, "x");
  ASSERT_EQ(rep.epochs.size(), 2u);
  EXPECT_TRUE(rep.epochs[0].robust.empty());
  EXPECT_EQ(rep.epochs[1].robust.count(AttackKind::pgd_linf), 1u);
}

}  // namespace
}  // namespace oudefend
