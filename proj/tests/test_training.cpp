#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "support.hpp"

using namespace groklab;
using namespace testing_support;

namespace {

double loss_value(TaskKind task, const Tensor& scores, const std::vector<int>& labels) {
  Tape tape = Tape::inference();
  return task_loss(tape, task, scores, labels).item();
}

Tensor logits_of(const Model& model, const Samples& s) {
  Tape tape = Tape::inference();
  return forward(tape, model, s).output_features;
}

TrainConfig tiny_config(Strategy strategy, std::uint64_t steps) {
  TrainConfig c;
  c.strategy = strategy;
  c.steps = steps;
  c.log_every = 10;
  c.learning_rate = 3e-3;
  c.metrics.enabled = {"weight_l2", "perturb_err"};
  c.metrics.batch_size = 8;
  return c;
}

}  // namespace

TEST(Losses, MseHandCases) {
  std::vector<int> labels{2, 0};
  EXPECT_DOUBLE_EQ(loss_value(TaskKind::mnist, Tensor::zeros({2, 10}), labels), 0.5);
  Tensor exact({2, 3}, {0, 0, 1, 1, 0, 0});
  EXPECT_DOUBLE_EQ(loss_value(TaskKind::mnist, exact, labels), 0.0);
}

TEST(Losses, MseMatchesScalarLoop) {
  std::mt19937_64 rng(1);
  Tensor s = random_tensor(rng, {6, 4}, -2, 2, false);
  std::vector<int> labels{0, 3, 1, 1, 2, 3};
  double total = 0.0;
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 4; ++j) {
      const double target = static_cast<int>(j) == labels[i] ? 1.0 : 0.0;
      total += (s.at(i, j) - target) * (s.at(i, j) - target);
    }
  EXPECT_NEAR(loss_value(TaskKind::mnist, s, labels), total / 12.0, 1e-12);
}

TEST(Losses, CrossEntropyHandCases) {
  std::vector<int> labels{5, 112, 0};
  EXPECT_NEAR(loss_value(TaskKind::modadd, Tensor::zeros({3, 113}), labels), std::log(113.0), 1e-12);
  EXPECT_NEAR(std::log(113.0), 4.7274, 1e-4);
  std::vector<double> margin(3 * 113, 0.0);
  for (std::size_t i = 0; i < 3; ++i) margin[i * 113 + static_cast<std::size_t>(labels[i])] = 50.0;
  EXPECT_LT(loss_value(TaskKind::modadd, Tensor({3, 113}, margin), labels), 1e-19);
}

TEST(Losses, CrossEntropyMatchesSoftmaxThenLog) {
  std::mt19937_64 rng(2);
  Tensor s = random_tensor(rng, {5, 7}, -4, 4, false);
  std::vector<int> labels{6, 0, 3, 3, 1};
  double total = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < 7; ++j) z += std::exp(s.at(i, j));
    total -= std::log(std::exp(s.at(i, static_cast<std::size_t>(labels[i]))) / z);
  }
  EXPECT_NEAR(loss_value(TaskKind::modadd, s, labels), total / 5.0, 1e-10);
}

TEST(Losses, LabelsOutOfRangeAreRejected) {
  std::vector<int> labels{3};
  EXPECT_THROW(loss_value(TaskKind::mnist, Tensor::zeros({1, 3}), labels), RangeError);
  EXPECT_THROW(loss_value(TaskKind::modadd, Tensor::zeros({1, 3}), labels), RangeError);
}

TEST(AdamW, HandExamples) {
  Tensor theta({1}, {2.0}, true);
  auto state = AdamWState::for_parameters({theta});
  adamw_step({theta}, {{0.0}}, state, 0.001, 1.0);
  EXPECT_DOUBLE_EQ(theta[0], 2.0 * (1.0 - 0.001));
  EXPECT_DOUBLE_EQ(theta[0], 1.998);

  Tensor x({1}, {0.7}, true);
  auto s2 = AdamWState::for_parameters({x});
  adamw_step({x}, {{1.0}}, s2, 0.001, 0.0);
  EXPECT_NEAR(0.7 - x[0], 0.001 * 1.0 / (1.0 + 1e-8), 1e-15);
  EXPECT_EQ(s2.t, 1u);

  Tensor y({2}, {0.3, -0.4}, true);
  auto s3 = AdamWState::for_parameters({y});
  adamw_step({y}, {{0.0, 0.0}}, s3, 0.01, 0.0);
  EXPECT_EQ(y[0], 0.3);
  EXPECT_EQ(y[1], -0.4);
}

TEST(AdamW, DecoupledDecayWithZeroGradient) {
  Tensor theta({3}, {1.5, -2.0, 0.25}, true);
  auto state = AdamWState::for_parameters({theta});
  std::vector<double> expect{1.5, -2.0, 0.25};
  const double decay = 1.0 - 0.01 * 0.5;
  for (int t = 0; t < 100; ++t) {
    adamw_step({theta}, {{0.0, 0.0, 0.0}}, state, 0.01, 0.5);
    for (auto& v : expect) v *= decay;
  }
  const std::vector<double> start{1.5, -2.0, 0.25};
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(theta[i], expect[i]);
    EXPECT_NEAR(theta[i], start[i] * std::pow(decay, 100), 1e-14);
  }
}

TEST(AdamW, ShapeMismatchIsRejected) {
  Tensor theta({2}, {1.0, 2.0}, true);
  auto state = AdamWState::for_parameters({theta});
  EXPECT_THROW(adamw_step({theta}, {{1.0}}, state, 0.001, 0.0), ShapeError);
}

TEST(PerturbSigma, Examples) {
  EXPECT_DOUBLE_EQ(perturb_sigma(1.0, 0.5, 0.4), 0.4);
  EXPECT_DOUBLE_EQ(perturb_sigma(0.0, 0.5, 0.4), 0.5);
  EXPECT_DOUBLE_EQ(perturb_sigma(0.75, 0.06, 0.03), 0.03);
  EXPECT_THROW(perturb_sigma(0.5, -1.0, 0.0), ConfigError);
}

TEST(TrainConfig, Validation) {
  TrainConfig c;
  c.lambda1 = 0.1;
  c.lambda2 = 0.2;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.abelian_coeff = -1.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.task = TaskKind::mnist;
  c.strategy = Strategy::abelian;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TrainingStep, PerturbWithZeroSigmaMatchesStandard) {
  Model a = small_transformer(5), b = clone_model(a);
  auto batch = random_pairs(3, 10, 7);
  auto sa = AdamWState::for_parameters(parameters(a)), sb = AdamWState::for_parameters(parameters(b));
  auto ra = training_step(a, batch, tiny_config(Strategy::standard, 1), sa, 0.0, 1);
  auto rb = training_step(b, batch, tiny_config(Strategy::perturb, 1), sb, 0.0, 1);
  EXPECT_EQ(ra.loss, rb.loss);
  EXPECT_EQ(flatten_parameters(a), flatten_parameters(b));
}

TEST(TrainingStep, PerturbWithNoiseChangesTheLoss) {
  Model a = small_mlp(5), b = clone_model(a);
  auto batch = random_images(3, 10, 6, 3);
  auto sa = AdamWState::for_parameters(parameters(a)), sb = AdamWState::for_parameters(parameters(b));
  auto ra = training_step(a, batch, tiny_config(Strategy::standard, 1), sa, 0.0, 1);
  auto rb = training_step(b, batch, tiny_config(Strategy::perturb, 1), sb, 0.3, 1);
  EXPECT_NE(ra.loss, rb.loss);
}

TEST(TrainingStep, AbelianRegularizerIsZeroForSymmetricLogits) {
  auto m = small_transformer(6);
  for (auto& v : m.value.mutable_data()) v = 0.0;
  Model model = m;
  auto state = AdamWState::for_parameters(parameters(model));
  auto r = training_step(model, random_pairs(1, 12, 7), tiny_config(Strategy::abelian, 1), state, 0.0, 0);
  EXPECT_EQ(r.regularizer, 0.0);
  EXPECT_EQ(r.loss, r.base_loss);
}

TEST(TrainingStep, AbelianLossIsBasePlusScaledSymmetricMse) {
  Model model = small_transformer(8);
  auto batch = random_pairs(4, 9, 7);
  auto logits = logits_of(model, batch), swapped = logits_of(model, batch.swapped());
  double gap = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) gap += (logits[i] - swapped[i]) * (logits[i] - swapped[i]);
  gap /= 9.0;
  double base = loss_value(TaskKind::modadd, logits, batch.labels);
  auto state = AdamWState::for_parameters(parameters(model));
  auto r = training_step(model, batch, tiny_config(Strategy::abelian, 1), state, 0.0, 0);
  EXPECT_GT(gap, 0.0);
  EXPECT_NEAR(r.base_loss, base, 1e-12);
  EXPECT_NEAR(r.regularizer, 100.0 * gap, 1e-10 * std::max(1.0, 100.0 * gap));
  EXPECT_NEAR(r.loss, base + 100.0 * gap, 1e-10 * std::max(1.0, r.loss));
}

TEST(TrainingStep, AbelianRegularizerIsSwapInvariant) {
  Model a = small_transformer(2), b = clone_model(a);
  auto batch = random_pairs(5, 11, 7);
  auto sa = AdamWState::for_parameters(parameters(a)), sb = AdamWState::for_parameters(parameters(b));
  auto ra = training_step(a, batch, tiny_config(Strategy::abelian, 1), sa, 0.0, 0);
  auto rb = training_step(b, batch.swapped(), tiny_config(Strategy::abelian, 1), sb, 0.0, 0);
  EXPECT_EQ(ra.regularizer, rb.regularizer);
}

TEST(TrainingStep, AbelianNeedsPairs) {
  Model model = small_mlp(0);
  auto state = AdamWState::for_parameters(parameters(model));
  EXPECT_THROW(training_step(model, random_images(0, 4, 6, 3), tiny_config(Strategy::abelian, 1), state, 0.0, 0),
               ConfigError);
}

TEST(RunTraining, ZeroStepsLogsOnlyTheInitialRecord) {
  auto ds = generate_modadd(7, 0.5, 0);
  auto state = fresh_trainer(small_transformer(0), tiny_config(Strategy::standard, 0));
  auto log = run_training(tiny_config(Strategy::standard, 0), state, ds.train(), ds.test());
  ASSERT_EQ(log.size(), 1u);
  EXPECT_EQ(log[0].step, 0u);
  EXPECT_TRUE(log[0].values.count("train_acc"));
  EXPECT_TRUE(log[0].values.count("weight_l2"));
}

TEST(RunTraining, LogsAtCadenceAndFinalStep) {
  auto ds = generate_modadd(7, 0.5, 0);
  auto cfg = tiny_config(Strategy::standard, 25);
  auto state = fresh_trainer(small_transformer(0), cfg);
  std::vector<std::uint64_t> steps;
  for (const auto& r : run_training(cfg, state, ds.train(), ds.test())) steps.push_back(r.step);
  EXPECT_EQ(steps, (std::vector<std::uint64_t>{0, 10, 20, 25}));
  EXPECT_EQ(state.optimizer.t, 25u);
}

TEST(RunTraining, ZeroLambdaPerturbIsBitwiseStandard) {
  auto ds = generate_modadd(7, 0.5, 0);
  auto standard = tiny_config(Strategy::standard, 50);
  auto perturb = tiny_config(Strategy::perturb, 50);
  perturb.lambda1 = perturb.lambda2 = 0.0;
  standard.batch_size = perturb.batch_size = 8;
  auto sa = fresh_trainer(small_transformer(1), standard), sb = fresh_trainer(small_transformer(1), perturb);
  auto la = run_training(standard, sa, ds.train(), ds.test());
  auto lb = run_training(perturb, sb, ds.train(), ds.test());
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i].values, lb[i].values);
  EXPECT_EQ(flatten_parameters(sa.model), flatten_parameters(sb.model));
}

TEST(RunTraining, IdenticalSeedsGiveIdenticalLogs) {
  auto ds = generate_modadd(7, 0.5, 0);
  auto cfg = tiny_config(Strategy::perturb, 30);
  cfg.batch_size = 6;
  auto sa = fresh_trainer(small_transformer(3), cfg), sb = fresh_trainer(small_transformer(3), cfg);
  auto la = run_training(cfg, sa, ds.train(), ds.test());
  auto lb = run_training(cfg, sb, ds.train(), ds.test());
  ASSERT_EQ(la.size(), lb.size());
  for (std::size_t i = 0; i < la.size(); ++i) EXPECT_EQ(la[i].values, lb[i].values);
}

TEST(RunTraining, EvaluationDoesNotMutateTheModel) {
  auto ds = generate_modadd(7, 0.5, 0);
  Model m = small_transformer(4);
  auto before = flatten_parameters(m);
  MetricSettings s;
  s.enabled = {"weight_l2", "sharpness", "perturb_err", "pmi", "mid", "abelian_acc_train"};
  s.batch_size = 8;
  evaluate_record(m, 0, ds.train(), ds.test(), s);
  EXPECT_EQ(flatten_parameters(m), before);
}

TEST(RunTraining, LearnsATinyTask) {
  auto ds = generate_modadd(5, 0.8, 0);
  auto cfg = tiny_config(Strategy::standard, 300);
  cfg.weight_decay = 0.0;
  cfg.learning_rate = 1e-2;
  TransformerConfig tc;
  tc.modulus = 5;
  tc.d_model = 16;
  tc.heads = 2;
  tc.d_mlp = 32;
  auto state = fresh_trainer(init_transformer(tc, 0, 1.0), cfg);
  auto log = run_training(cfg, state, ds.train(), ds.test());
  EXPECT_EQ(log.back().at("train_acc"), 1.0);
  EXPECT_LT(log.back().at("train_loss"), log.front().at("train_loss"));
}
