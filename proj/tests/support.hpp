#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "groklab/groklab.hpp"

namespace testing_support {

using namespace groklab;

inline Tensor random_tensor(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_size(shape));
  for (auto& x : v) x = u(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Maps inputs to a scalar on the given tape.
using ScalarFn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;

/// Largest norm-wise relative error between the tape gradient and a central
/// finite difference over all inputs:
///   |g_tape - g_fd| / max(|g_tape|, |g_fd|, floor).
inline double gradient_error(const ScalarFn& fn, std::vector<Tensor> inputs, double h = 1e-6,
                             double floor = 1e-8) {
  for (auto& t : inputs) t.zero_grad();
  {
    Tape tape;
    Tensor out = fn(tape, inputs);
    tape.backward(out);
  }
  double worst = 0.0;
  for (auto& t : inputs) {
    if (!t.requires_grad()) continue;
    std::vector<double> analytic(t.size(), 0.0);
    if (t.has_grad()) analytic.assign(t.grad().begin(), t.grad().end());
    std::vector<double> numeric(t.size());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      Tape p = Tape::inference();
      const double up = fn(p, inputs).item();
      data[i] = saved - h;
      Tape m = Tape::inference();
      const double down = fn(m, inputs).item();
      data[i] = saved;
      numeric[i] = (up - down) / (2.0 * h);
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i = 0; i < numeric.size(); ++i) {
      diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
      na += analytic[i] * analytic[i];
      nn += numeric[i] * numeric[i];
    }
    worst = std::max(worst, std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), floor}));
  }
  return worst;
}

/// Contracts `out` with a fixed random weight tensor so every output entry
/// contributes to the scalar.
inline Tensor project(Tape& tape, const Tensor& out, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(rng, out.shape(), -1.0, 1.0, false);
  return sum(tape, mul(tape, out, w));
}

struct PrimitiveCase {
  std::string name;
  std::function<std::vector<Tensor>(std::mt19937_64&)> make_inputs;
  ScalarFn fn;
};

/// Every differentiable primitive wrapped as a scalar function of random
/// inputs.
inline std::vector<PrimitiveCase> primitive_cases() {
  using R = std::mt19937_64;
  std::vector<PrimitiveCase> cases;
  cases.push_back({"matmul", [](R& r) { return std::vector{random_tensor(r, {3, 4}), random_tensor(r, {4, 5})}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return project(t, matmul(t, in[0], in[1]), 1); }});
  cases.push_back({"transpose", [](R& r) { return std::vector{random_tensor(r, {3, 4})}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return project(t, transpose(t, in[0]), 2); }});
  cases.push_back({"reshape", [](R& r) { return std::vector{random_tensor(r, {3, 4})}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return project(t, reshape(t, in[0], {2, 6}), 3); }});
  cases.push_back({"add", [](R& r) { return std::vector{random_tensor(r, {3, 4}), random_tensor(r, {3, 4})}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return project(t, add(t, in[0], in[1]), 4); }});
  cases.push_back({"sub", [](R& r) { return std::vector{random_tensor(r, {3, 4}), random_tensor(r, {3, 4})}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return project(t, sub(t, in[0], in[1]), 5); }});
  cases.push_back({"mul", [](R& r) { return std::vector{random_tensor(r, {3, 4}), random_tensor(r, {3, 4})}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return project(t, mul(t, in[0], in[1]), 6); }});
  cases.push_back({"scale", [](R& r) { return std::vector{random_tensor(r, {3, 4})}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return project(t, scale(t, in[0], -2.5), 7); }});
  cases.push_back({"add_row_vector", [](R& r) { return std::vector{random_tensor(r, {3, 4}), random_tensor(r, {4})}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return project(t, add_row_vector(t, in[0], in[1]), 8); }});
  cases.push_back({"relu", [](R& r) { return std::vector{random_tensor(r, {4, 5})}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return project(t, relu(t, in[0]), 9); }});
  cases.push_back({"softmax_rows", [](R& r) { return std::vector{random_tensor(r, {3, 5}, -3, 3)}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return project(t, softmax_rows(t, in[0]), 10); }});
  cases.push_back({"log_softmax_rows", [](R& r) { return std::vector{random_tensor(r, {3, 5}, -3, 3)}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return project(t, log_softmax_rows(t, in[0]), 11); }});
  cases.push_back({"sum", [](R& r) { return std::vector{random_tensor(r, {3, 4})}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return scale(t, sum(t, in[0]), 1.7); }});
  cases.push_back({"sum_squares", [](R& r) { return std::vector{random_tensor(r, {3, 4})}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return sum_squares(t, in[0]); }});
  cases.push_back({"take_rows", [](R& r) { return std::vector{random_tensor(r, {5, 3})}; },
                   [](Tape& t, const std::vector<Tensor>& in) {
                     std::vector<std::size_t> idx{4, 0, 4, 2, 1, 4};
                     return project(t, take_rows(t, in[0], idx), 12);
                   }});
  cases.push_back({"pick", [](R& r) { return std::vector{random_tensor(r, {4, 5})}; },
                   [](Tape& t, const std::vector<Tensor>& in) {
                     std::vector<int> labels{3, 0, 4, 3};
                     return project(t, pick(t, in[0], labels), 13);
                   }});
  cases.push_back({"head_scores",
                   [](R& r) { return std::vector{random_tensor(r, {2, 6}), random_tensor(r, {6, 6})}; },
                   [](Tape& t, const std::vector<Tensor>& in) {
                     return project(t, head_scores(t, in[0], in[1], 2, 3, 0.7), 14);
                   }});
  cases.push_back({"head_mix",
                   [](R& r) { return std::vector{random_tensor(r, {4, 3}, 0, 1), random_tensor(r, {6, 6})}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return project(t, head_mix(t, in[0], in[1], 2), 15); }});
  cases.push_back({"layer_norm_rows",
                   [](R& r) {
                     return std::vector{random_tensor(r, {3, 5}, -2, 2), random_tensor(r, {5}, 0.5, 1.5),
                                        random_tensor(r, {5})};
                   },
                   [](Tape& t, const std::vector<Tensor>& in) {
                     return project(t, layer_norm_rows(t, in[0], in[1], in[2]), 16);
                   }});
  cases.push_back({"l2_normalize_columns", [](R& r) { return std::vector{random_tensor(r, {4, 3}, 0.2, 1.0)}; },
                   [](Tape& t, const std::vector<Tensor>& in) { return project(t, l2_normalize_columns(t, in[0]), 17); }});
  return cases;
}

/// Small models for gradient checks against their own parameters.
inline TransformerModel small_transformer(std::uint64_t seed, bool layer_norm = false) {
  TransformerConfig c;
  c.modulus = 7;
  c.d_model = 8;
  c.heads = 2;
  c.d_mlp = 12;
  c.layer_norm = layer_norm;
  return init_transformer(c, seed, 1.0);
}

inline MlpModel small_mlp(std::uint64_t seed) {
  MlpConfig c;
  c.widths = {6, 5, 4, 3};
  return init_mlp(c, seed, 1.0);
}

/// Zero biases put ReLU inputs exactly on the kink whenever a whole layer is
/// inactive for a sample, so gradient checks use random biases.
inline MlpModel mlp_with_random_biases(std::uint64_t seed) {
  MlpModel m = small_mlp(seed);
  std::mt19937_64 rng(seed + 1000);
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& b : m.biases)
    for (auto& v : b.mutable_data()) v = u(rng);
  return m;
}

inline Samples random_images(std::uint64_t seed, std::size_t n, std::size_t width, int classes) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> px(0.0, 1.0);
  std::uniform_int_distribution<int> lab(0, classes - 1);
  Samples s;
  s.kind = TaskKind::mnist;
  s.image_width = width;
  for (std::size_t i = 0; i < n * width; ++i) s.images.push_back(px(rng));
  for (std::size_t i = 0; i < n; ++i) s.labels.push_back(lab(rng));
  return s;
}

inline Samples random_pairs(std::uint64_t seed, std::size_t n, int modulus) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> tok(0, modulus - 1);
  Samples s;
  s.kind = TaskKind::modadd;
  for (std::size_t i = 0; i < n; ++i) {
    int a = tok(rng), b = tok(rng);
    s.pairs.push_back({a, b});
    s.labels.push_back((a + b) % modulus);
  }
  return s;
}

/// Loss of a whole model as a function of its parameter tensors.
inline ScalarFn model_loss_fn(const Model& model, const Samples& data) {
  return [model, data](Tape& tape, const std::vector<Tensor>&) {
    auto capture = forward(tape, model, data);
    return task_loss(tape, data.kind, capture.output_features, data.labels);
  };
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("groklab_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

// Independent oracles.

/// erf by its Maclaurin series (small |x|) or the continued fraction for
/// erfc (large |x|), both summed to convergence in long double.
inline double erf_series(double x) {
  const long double z = std::abs(static_cast<long double>(x));
  long double result;
  if (z < 3.0L) {
    long double term = z, total = z;
    for (int n = 1; n < 200; ++n) {
      term *= -z * z / n;
      const long double add = term / (2 * n + 1);
      total += add;
      if (std::abs(add) < 1e-22L * std::abs(total)) break;
    }
    result = 2.0L / std::sqrt(3.14159265358979323846264338327950288L) * total;
  } else {
    // Lentz evaluation of erfc(z) = exp(-z^2)/sqrt(pi) * 1/(z + 1/2/(z + 1/(z + 3/2/(z + ...))))
    long double f = z, c = z, d = 0.0L;
    for (int n = 1; n < 500; ++n) {
      const long double an = n / 2.0L;
      d = z + an * d;
      d = 1.0L / d;
      c = z + an / c;
      const long double delta = c * d;
      f *= delta;
      if (std::abs(delta - 1.0L) < 1e-22L) break;
    }
    result = 1.0L - std::exp(-z * z) / std::sqrt(3.14159265358979323846264338327950288L) / f;
  }
  return static_cast<double>(x < 0 ? -result : result);
}

/// Symmetric eigenvalues by cyclic Jacobi rotations.
inline std::vector<double> jacobi_eigenvalues(std::vector<std::vector<double>> a) {
  const std::size_t n = a.size();
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) off += a[i][j] * a[i][j];
    if (off < 1e-30) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-300) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k][p], akq = a[k][q];
          a[k][p] = c * akp - s * akq;
          a[k][q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p][k], aqk = a[q][k];
          a[p][k] = c * apk - s * aqk;
          a[q][k] = s * apk + c * aqk;
        }
      }
  }
  std::vector<double> ev(n);
  for (std::size_t i = 0; i < n; ++i) ev[i] = a[i][i];
  return ev;
}

/// Matrix entropy of order alpha from Jacobi eigenvalues of G / n.
inline double entropy_oracle(const std::vector<std::vector<double>>& g, double alpha) {
  const double n = static_cast<double>(g.size());
  double h = 0.0, power = 0.0;
  for (double l : jacobi_eigenvalues(g)) {
    l /= n;
    if (l <= 1e-15) continue;
    h -= l * std::log(l);
    power += std::pow(l, alpha);
  }
  return alpha == 1.0 ? h : std::log(power) / (1.0 - alpha);
}

}  // namespace testing_support
