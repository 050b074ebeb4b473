#pragma once

// The analytic side: the epsilon(W*) radius, nearest-neighbor distance
// profiles of the test set, the predicted phase-transition accuracy curve,
// and reports that compare these against measured runs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "groklab/data.hpp"
#include "groklab/error.hpp"
#include "groklab/metrics.hpp"
#include "groklab/models.hpp"
#include "groklab/tensor.hpp"

namespace groklab {

struct TheoryParams {
  double lipschitz = 0.5;
  double mu = 0.01;
  double a = 1925.0;
  double b = 500.0;
  std::uint64_t steps = 15000;

  void validate() const {
    if (!(lipschitz > 0.0)) throw ConfigError("theory: L must be positive");
    if (!(mu > 0.0)) throw ConfigError("theory: mu must be positive");
    if (!(b >= 0.0)) throw ConfigError("theory: b must be nonnegative");
    if (steps < 1) throw ConfigError("theory: steps must be at least 1");
  }
};

enum class NormKind { l2, l1 };

/// eps = min{1, 1 / (2 (sqrt(n / min|x|^2 * |W|^2 * S) + L))}. For the l1
/// variant pass |W|_1^2 as `weight_norm_sq`.
inline double epsilon_threshold(double weight_norm_sq, double sharpness, double n,
                                double min_input_norm_sq, double lipschitz) {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw RangeError(std::string("epsilon_threshold: ") + name + " must be positive, got " +
                       std::to_string(v));
    }
  };
  positive(weight_norm_sq, "weight norm");
  positive(sharpness, "sharpness");
  positive(n, "n");
  positive(min_input_norm_sq, "min input norm");
  positive(lipschitz, "L");
  const double root = std::sqrt(n / min_input_norm_sq * weight_norm_sq * sharpness);
  return std::min(1.0, 1.0 / (2.0 * (root + lipschitz)));
}

// ---------------------------------------------------------------------------
// Distance to the training set

struct NeighborProfile {
  std::vector<double> distances;  // ascending
};

/// Exact l2 distance from every test row to its nearest training row. Both
/// inputs are row-major [count x width].
inline NeighborProfile neighbor_profile(std::span<const double> test, std::span<const double> train,
                                        std::size_t width) {
  if (width == 0) throw ShapeError("neighbor_profile: zero width");
  if (train.empty()) throw RangeError("neighbor_profile: empty training set");
  if (test.size() % width != 0 || train.size() % width != 0) {
    throw ShapeError("neighbor_profile: input sizes are not multiples of width " + std::to_string(width));
  }
  const std::size_t n_test = test.size() / width, n_train = train.size() / width;
  NeighborProfile out;
  out.distances.resize(n_test);
  for (std::size_t i = 0; i < n_test; ++i) {
    const double* x = test.data() + i * width;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n_train && best > 0.0; ++j) {
      const double* y = train.data() + j * width;
      double s = 0.0;
      for (std::size_t k = 0; k < width; ++k) {
        const double diff = x[k] - y[k];
        s += diff * diff;
      }
      best = std::min(best, s);
    }
    out.distances[i] = std::sqrt(best);
  }
  std::sort(out.distances.begin(), out.distances.end());
  return out;
}

/// Fraction of test points whose distance to the training set is <= r.
inline double neighbor_fraction(const NeighborProfile& profile, double r) {
  if (profile.distances.empty()) throw RangeError("neighbor_fraction: empty profile");
  auto it = std::upper_bound(profile.distances.begin(), profile.distances.end(), r);
  return static_cast<double>(it - profile.distances.begin()) / static_cast<double>(profile.distances.size());
}

// ---------------------------------------------------------------------------
// Predicted accuracy curve

/// Radius r(step) = 1 / (2L + max{a - b log10(step), 0}).
inline double predicted_radius(double step, const TheoryParams& params) {
  params.validate();
  if (!(step >= 1.0)) throw RangeError("predicted_accuracy: step must be >= 1, got " + std::to_string(step));
  return 1.0 / (2.0 * params.lipschitz + std::max(params.a - params.b * std::log10(step), 0.0));
}

/// Pr(|Y| <= r) for Y ~ N(0, mu).
inline double predicted_accuracy(double step, const TheoryParams& params) {
  return std::erf(predicted_radius(step, params) / std::sqrt(2.0 * params.mu));
}

/// `points` log-spaced steps from 1 to `last`, rounded to integers and
/// deduplicated.
inline std::vector<std::uint64_t> log_spaced_steps(std::uint64_t last, std::size_t points) {
  if (last < 1 || points < 2) throw RangeError("log_spaced_steps: need last >= 1 and at least 2 points");
  std::vector<std::uint64_t> out;
  const double top = std::log10(static_cast<double>(last));
  for (std::size_t i = 0; i < points; ++i) {
    auto s = static_cast<std::uint64_t>(std::llround(std::pow(10.0, top * static_cast<double>(i) /
                                                                         static_cast<double>(points - 1))));
    s = std::clamp<std::uint64_t>(s, 1, last);
    if (out.empty() || out.back() != s) out.push_back(s);
  }
  out.back() = last;
  return out;
}

// ---------------------------------------------------------------------------
// Reports against measured models

/// Per-example model inputs [n x input_width]: pixels for the MLP, the
/// concatenated token+position embeddings for the transformer.
inline Tensor model_inputs(const Model& model, const Samples& data) {
  if (std::holds_alternative<MlpModel>(model)) {
    return Tensor({data.size(), data.image_width}, data.images);
  }
  const auto& t = std::get<TransformerModel>(model);
  Tape tape = Tape::inference();
  Tensor rows = take_rows(tape, t.embed, transformer_tokens(t.config, data.pairs));
  rows = reshape(tape, rows, {data.size(), TransformerConfig::kSequence * t.config.d_model});
  return add_row_vector(tape, rows, t.pos_embed);
}

struct TheoremReport {
  double epsilon = 0.0;
  double delta = 0.0;  // neighbor_fraction(epsilon)
  double test_accuracy = 0.0;
  double train_accuracy = 0.0;
  double weight_norm_sq = 0.0;
  double sharpness = 0.0;
  double min_input_norm_sq = 0.0;
  double lipschitz = 0.0;
  bool holds = false;  // test_accuracy >= delta
};

struct TheoremOptions {
  double lipschitz = 0.5;
  NormKind norm = NormKind::l2;
  std::size_t sharpness_probes = 4;
  double sharpness_eps = 1e-4;
  std::uint64_t seed = 0;
};

inline double min_row_norm_sq(const Tensor& x) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < x.cols(); ++k) s += x.at(i, k) * x.at(i, k);
    best = std::min(best, s);
  }
  return best;
}

/// Builds the report from already measured quantities.
inline TheoremReport theorem_report(double weight_norm_sq, double sharpness_value, double n,
                                    double min_input_norm_sq, double lipschitz,
                                    const NeighborProfile& profile, double train_acc, double test_acc) {
  if (train_acc < 1.0) {
    throw RangeError("theorem_check: model is not at interpolation (train accuracy " +
                     std::to_string(train_acc) + ")");
  }
  TheoremReport r;
  r.weight_norm_sq = weight_norm_sq;
  r.sharpness = sharpness_value;
  r.min_input_norm_sq = min_input_norm_sq;
  r.lipschitz = lipschitz;
  r.train_accuracy = train_acc;
  r.test_accuracy = test_acc;
  r.epsilon = epsilon_threshold(weight_norm_sq, sharpness_value, n, min_input_norm_sq, lipschitz);
  r.delta = neighbor_fraction(profile, r.epsilon);
  r.holds = test_acc >= r.delta;
  return r;
}

/// Measures norm, sharpness, input norms and the neighbor profile of a model
/// snapshot and compares the implied accuracy floor with test accuracy.
inline TheoremReport theorem_check(const Model& model, const Samples& train, const Samples& test,
                                   const TheoremOptions& opt) {
  const double train_acc = accuracy(model, train);
  if (train_acc < 1.0) {
    throw RangeError("theorem_check: model is not at interpolation (train accuracy " +
                     std::to_string(train_acc) + ")");
  }
  const double norm = weight_norm(model, opt.norm == NormKind::l2 ? 2 : 1);
  const double s = sharpness(model, train, opt.sharpness_probes, opt.sharpness_eps, opt.seed);
  Tensor x_train = model_inputs(model, train);
  Tensor x_test = model_inputs(model, test);
  auto profile = neighbor_profile(x_test.data(), x_train.data(), x_train.cols());
  return theorem_report(norm * norm, s, static_cast<double>(train.size()), min_row_norm_sq(x_train),
                        opt.lipschitz, profile, train_acc, accuracy(model, test));
}

struct RobustLemmaReport {
  double lhs = 0.0;  // mean squared input-gradient Frobenius norm
  double rhs = 0.0;  // |W|^2 / min|x|^2 * S(W)
  double ratio = 0.0;  // lhs / rhs; 0 when both sides vanish
  double train_loss = 0.0;
};

inline RobustLemmaReport robust_lemma_report(double lhs, double weight_norm_sq, double min_input_norm_sq,
                                             double sharpness_value, double train_loss) {
  RobustLemmaReport r;
  r.lhs = lhs;
  r.rhs = min_input_norm_sq > 0.0 ? weight_norm_sq / min_input_norm_sq * sharpness_value
                                  : std::numeric_limits<double>::infinity();
  r.ratio = r.lhs == 0.0 ? 0.0 : r.lhs / r.rhs;
  r.train_loss = train_loss;
  return r;
}

/// Both sides of the input-gradient versus sharpness inequality.
inline RobustLemmaReport robust_lemma_check(const Model& model, const Samples& data,
                                            std::size_t probes = 4, double fd_eps = 1e-4,
                                            std::uint64_t seed = 0) {
  const double lhs = input_gradient_norm(model, data);
  const double norm = weight_norm(model, 2);
  const double s = sharpness(model, data, probes, fd_eps, seed);
  return robust_lemma_report(lhs, norm * norm, min_row_norm_sq(model_inputs(model, data)), s,
                             dataset_loss(model, data));
}

}  // namespace groklab
