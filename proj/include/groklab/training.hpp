#pragma once

// AdamW, the three training strategies, and the step-driven training loop.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "groklab/data.hpp"
#include "groklab/error.hpp"
#include "groklab/losses.hpp"
#include "groklab/metrics.hpp"
#include "groklab/models.hpp"
#include "groklab/rng.hpp"
#include "groklab/tensor.hpp"

namespace groklab {

// ---------------------------------------------------------------------------
// AdamW

struct AdamWState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t t = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;

  /// Zero moments shaped like `params`.
  static AdamWState for_parameters(const std::vector<Tensor>& params, double beta1 = 0.9,
                                   double beta2 = 0.999, double eps = 1e-8) {
    AdamWState s;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    for (const auto& p : params) {
      s.first_moment.emplace_back(p.size(), 0.0);
      s.second_moment.emplace_back(p.size(), 0.0);
    }
    return s;
  }
};

/// One AdamW update. Weight decay is decoupled: theta *= (1 - lr * wd)
/// happens before, and independently of, the bias-corrected adaptive step.
inline void adamw_step(const std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                       AdamWState& state, double lr, double weight_decay) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
      params.size() != state.second_moment.size()) {
    throw ShapeError("adamw_step: " + std::to_string(params.size()) + " parameters, " +
                     std::to_string(grads.size()) + " gradients, " +
                     std::to_string(state.first_moment.size()) + " moment buffers");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size() || state.first_moment[i].size() != params[i].size() ||
        state.second_moment[i].size() != params[i].size()) {
      throw ShapeError("adamw_step: size mismatch for parameter " + std::to_string(i) + " of shape " +
                       shape_string(params[i].shape()));
    }
  }
  state.t += 1;
  const double t = static_cast<double>(state.t);
  const double bias1 = 1.0 - std::pow(state.beta1, t);
  const double bias2 = 1.0 - std::pow(state.beta2, t);
  const double decay = 1.0 - lr * weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor param = params[i];
    auto theta = param.mutable_data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = grads[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      theta[k] *= decay;
      m[k] = state.beta1 * m[k] + (1.0 - state.beta1) * g[k];
      v[k] = state.beta2 * v[k] + (1.0 - state.beta2) * g[k] * g[k];
      theta[k] -= lr * (m[k] / bias1) / (std::sqrt(v[k] / bias2) + state.eps);
    }
  }
}

/// Reads gradients from the parameters themselves; a parameter the last
/// backward pass never reached gets a zero gradient.
inline void adamw_step(const std::vector<Tensor>& params, AdamWState& state, double lr, double weight_decay) {
  std::vector<std::vector<double>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) {
    if (p.has_grad()) {
      grads.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      grads.emplace_back(p.size(), 0.0);
    }
  }
  adamw_step(params, grads, state, lr, weight_decay);
}

// ---------------------------------------------------------------------------
// Configuration

enum class Strategy { standard, perturb, abelian };

inline const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::standard: return "standard";
    case Strategy::perturb: return "perturb";
    case Strategy::abelian: return "abelian";
  }
  return "?";
}

struct TrainConfig {
  TaskKind task = TaskKind::modadd;
  Strategy strategy = Strategy::standard;
  std::uint64_t steps = 15000;
  std::size_t batch_size = 0;  // 0: full batch
  double learning_rate = 1e-3;
  double weight_decay = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double lambda1 = 0.5;
  double lambda2 = 0.4;
  double abelian_coeff = 100.0;
  std::uint64_t data_seed = 0;
  std::uint64_t noise_seed = 0;
  std::uint64_t log_every = 100;
  std::uint64_t checkpoint_every = 0;  // 0: final checkpoint only
  MetricSettings metrics;

  void validate() const {
    if (!(lambda1 >= lambda2 && lambda2 >= 0.0)) throw ConfigError("need lambda1 >= lambda2 >= 0");
    if (!(abelian_coeff >= 0.0)) throw ConfigError("abelian_coeff must be nonnegative");
    if (strategy == Strategy::abelian && task != TaskKind::modadd) {
      throw ConfigError("strategy 'abelian' is only valid for the modadd task");
    }
    if (log_every == 0) throw ConfigError("log_every must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be nonnegative");
  }
};

/// sigma = max(lambda1 * (1 - train_acc), lambda2)
inline double perturb_sigma(double train_acc, double lambda1, double lambda2) {
  if (lambda1 < 0.0 || lambda2 < 0.0) throw ConfigError("perturbation lambdas must be nonnegative");
  return std::max(lambda1 * (1.0 - train_acc), lambda2);
}

// ---------------------------------------------------------------------------
// One optimizer step

struct StepResult {
  double loss = 0.0;         // total objective
  double base_loss = 0.0;    // task loss without the abelian term
  double regularizer = 0.0;  // abelian_coeff * mean squared logit gap
};

/// Forward, backward, and one AdamW update on `batch`. `sigma` is the input
/// noise scale used by the perturb strategy; noise comes from `noise_seed`.
inline StepResult training_step(Model& model, const Samples& batch, const TrainConfig& config,
                                AdamWState& optimizer, double sigma, std::uint64_t noise_seed) {
  if (config.strategy == Strategy::abelian && batch.kind != TaskKind::modadd) {
    throw ConfigError("strategy 'abelian' is only valid for the modadd task");
  }
  Tape tape;
  std::optional<Tensor> noise;
  if (config.strategy == Strategy::perturb && sigma > 0.0) {
    noise = gaussian_noise(batch.size(), input_width(model), sigma, noise_seed);
  }
  auto capture = forward(tape, model, batch, noise ? &*noise : nullptr);
  Tensor loss = task_loss(tape, batch.kind, capture.output_features, batch.labels);
  StepResult result;
  result.base_loss = loss.item();
  if (config.strategy == Strategy::abelian) {
    auto swapped = forward(tape, model, batch.swapped());
    Tensor gap = sum_squares(tape, sub(tape, capture.output_features, swapped.output_features));
    Tensor reg = scale(tape, gap, config.abelian_coeff / static_cast<double>(batch.size()));
    result.regularizer = reg.item();
    loss = add(tape, loss, reg);
  }
  result.loss = loss.item();
  tape.backward(loss);
  adamw_step(parameters(model), optimizer, config.learning_rate, config.weight_decay);
  return result;
}

// ---------------------------------------------------------------------------
// Training loop

/// One logging step: step number plus named scalar measurements.
struct MetricRecord {
  std::uint64_t step = 0;
  std::map<std::string, double> values;

  double at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw ConfigError("record for step " + std::to_string(step) + " lacks '" + name + "'");
    return it->second;
  }
};

struct TrainerState {
  Model model;
  AdamWState optimizer;
  std::uint64_t step = 0;
  double last_train_acc = 0.0;
};

inline TrainerState fresh_trainer(Model model, const TrainConfig& config) {
  TrainerState s;
  s.optimizer = AdamWState::for_parameters(parameters(model), config.beta1, config.beta2, config.adam_eps);
  s.model = std::move(model);
  return s;
}

struct RunHooks {
  std::function<void(const MetricRecord&)> on_record;
  std::function<void(const TrainerState&)> on_checkpoint;
};

/// Accuracy, loss, and every enabled metric on a frozen copy of the model.
inline MetricRecord evaluate_record(const Model& model, std::uint64_t step, const Samples& train,
                                    const Samples& test, const MetricSettings& settings) {
  const Model snapshot = clone_model(model);
  MetricRecord rec;
  rec.step = step;
  rec.values = evaluate_metrics(snapshot, train, test, settings);
  rec.values["train_loss"] = dataset_loss(snapshot, train);
  rec.values["train_acc"] = accuracy(snapshot, train);
  rec.values["test_acc"] = accuracy(snapshot, test);
  return rec;
}

/// Runs optimizer steps from state.step up to config.steps. A fresh state
/// (step 0) logs the initial model first. Records are emitted every
/// log_every steps and at the final step.
inline std::vector<MetricRecord> run_training(const TrainConfig& config, TrainerState& state,
                                              const Samples& train, const Samples& test,
                                              const RunHooks& hooks = {}) {
  config.validate();
  if (train.size() == 0) throw ConfigError("empty training set");
  std::vector<MetricRecord> log;
  auto emit = [&](std::uint64_t step) {
    MetricRecord rec;
    try {
      rec = evaluate_record(state.model, step, train, test, config.metrics);
    } catch (const Error& e) {
      throw Error("step " + std::to_string(step) + ": " + e.what());
    }
    state.last_train_acc = rec.at("train_acc");
    if (hooks.on_record) hooks.on_record(rec);
    log.push_back(std::move(rec));
  };
  auto checkpoint_due = [&](std::uint64_t step) {
    return (config.checkpoint_every > 0 && step % config.checkpoint_every == 0) || step == config.steps;
  };

  if (state.step == 0) {
    emit(0);
    if (hooks.on_checkpoint && (config.checkpoint_every > 0 || config.steps == 0)) hooks.on_checkpoint(state);
  }
  const std::size_t n = train.size();
  const std::size_t batch_size = config.batch_size == 0 ? n : std::min(config.batch_size, n);
  const std::uint64_t per_epoch = (n + batch_size - 1) / batch_size;
  BatchPlan plan{batch_size, config.data_seed};
  std::optional<std::uint64_t> cached_epoch;
  std::vector<std::vector<std::size_t>> epoch_batches;

  while (state.step < config.steps) {
    const std::uint64_t step = state.step;
    Samples batch_storage;
    const Samples* batch = &train;
    if (batch_size < n) {
      const std::uint64_t epoch = step / per_epoch;
      if (cached_epoch != epoch) {
        epoch_batches = batches(n, plan, epoch);
        cached_epoch = epoch;
      }
      batch_storage = train.subset(epoch_batches[step % per_epoch]);
      batch = &batch_storage;
    }
    const double sigma = config.strategy == Strategy::perturb
                             ? perturb_sigma(state.last_train_acc, config.lambda1, config.lambda2)
                             : 0.0;
    try {
      training_step(state.model, *batch, config, state.optimizer, sigma,
                    derive_seed(config.noise_seed, streams::kTrainNoise, step));
    } catch (const Error& e) {
      throw Error("step " + std::to_string(step) + ": " + e.what());
    }
    state.step = step + 1;
    if (state.step % config.log_every == 0 || state.step == config.steps) emit(state.step);
    if (hooks.on_checkpoint && checkpoint_due(state.step)) hooks.on_checkpoint(state);
  }
  return log;
}

}  // namespace groklab
