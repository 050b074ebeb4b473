#pragma once

// Randomized checks of the inequalities that relate feature perturbations to
// changes in gram entries, matrix entropy and matrix mutual information, plus
// the order-2 Frobenius identities.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "groklab/data.hpp"
#include "groklab/error.hpp"
#include "groklab/metrics.hpp"
#include "groklab/models.hpp"
#include "groklab/rng.hpp"

namespace groklab {

inline constexpr double kBoundSlack = 1e-9;

struct TrialReport {
  std::string name;
  std::size_t trials = 0;
  std::size_t violations = 0;            // quantity > bound + kBoundSlack
  double min_slack = std::numeric_limits<double>::infinity();  // min over trials of bound - quantity
  std::string worst_case;                // inputs of the trial with the smallest slack

  bool passed() const { return violations == 0; }

  void add(double quantity, double bound, const std::string& inputs) {
    ++trials;
    const double slack = bound - quantity;
    if (!(quantity <= bound + kBoundSlack)) ++violations;
    if (slack < min_slack || trials == 1) {
      min_slack = slack;
      worst_case = inputs;
    }
  }

  void merge(const TrialReport& other) {
    trials += other.trials;
    violations += other.violations;
    if (other.trials > 0 && other.min_slack < min_slack) {
      min_slack = other.min_slack;
      worst_case = other.worst_case;
    }
  }
};

namespace detail {

template <typename... Args>
std::string describe(const Args&... parts) {
  std::ostringstream os;
  os.precision(17);
  ((os << parts), ...);
  return os.str();
}

/// `n` random unit vectors of dimension `d` as the rows of an [n x d] matrix.
inline Eigen::MatrixXd random_unit_rows(Rng& rng, Eigen::Index n, Eigen::Index d) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd z(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    do {
      for (Eigen::Index k = 0; k < d; ++k) z(i, k) = normal(rng);
    } while (z.row(i).norm() < 1e-12);
    z.row(i).normalize();
  }
  return z;
}

/// Rows of z + scale * noise, renormalized.
inline Eigen::MatrixXd perturb_unit_rows(Rng& rng, const Eigen::MatrixXd& z, double scale) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd out = z;
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    do {
      for (Eigen::Index k = 0; k < z.cols(); ++k) out(i, k) = z(i, k) + scale * normal(rng);
    } while (out.row(i).norm() < 1e-12);
    out.row(i).normalize();
  }
  return out;
}

inline double row_distance_sum(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  return (a - b).rowwise().norm().sum();
}

inline constexpr double kNoiseScales[3] = {0.01, 0.1, 1.0};

}  // namespace detail

/// |ab - a'b'| <= |a - a'| + |b - b'| on [-1, 1].
inline TrialReport check_hadamard(std::size_t trials, std::uint64_t seed) {
  TrialReport report;
  report.name = "hadamard";
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, streams::kVerify, t));
    const double a = unit(rng), a2 = unit(rng), b = unit(rng), b2 = unit(rng);
    report.add(std::abs(a * b - a2 * b2), std::abs(a - a2) + std::abs(b - b2),
               detail::describe("a=", a, " a'=", a2, " b=", b, " b'=", b2));
  }
  return report;
}

/// |<a_i, a_j> - <b_i, b_j>| <= 4 (|a_i - b_i| + |a_j - b_j|) for unit
/// vectors, with b = normalized(a + noise) at noise scales 0.01, 0.1, 1.
inline TrialReport check_gram_perturb(std::size_t trials, std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw ConfigError("check_gram_perturb: dim must be positive");
  TrialReport report;
  report.name = "gram_perturb(dim=" + std::to_string(dim) + ")";
  const auto d = static_cast<Eigen::Index>(dim);
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, streams::kVerify, t));
    const double scale = detail::kNoiseScales[t % 3];
    Eigen::MatrixXd a = detail::random_unit_rows(rng, 2, d);
    Eigen::MatrixXd b = detail::perturb_unit_rows(rng, a, scale);
    const double lhs = std::abs(a.row(0).dot(a.row(1)) - b.row(0).dot(b.row(1)));
    const double rhs = 4.0 * detail::row_distance_sum(a, b);
    report.add(lhs, rhs, detail::describe("trial=", t, " seed=", seed, " dim=", dim, " scale=", scale));
  }
  return report;
}

/// |H2(G) - H2(G')| <= 8 sum_i |z_i - z'_i| for unit-column feature
/// matrices. H2 is evaluated by the eigenvalue route; the Frobenius route
/// must agree within kBoundSlack, otherwise the trial counts as a violation.
inline TrialReport check_entropy_diff(std::size_t trials, std::size_t n, std::size_t d, std::uint64_t seed) {
  if (n < 2 || d == 0) throw ConfigError("check_entropy_diff: need n >= 2 and d >= 1");
  TrialReport report;
  report.name = "entropy_diff(n=" + std::to_string(n) + ", d=" + std::to_string(d) + ")";
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, streams::kVerify, t));
    const double scale = detail::kNoiseScales[t % 3];
    Eigen::MatrixXd z = detail::random_unit_rows(rng, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
    Eigen::MatrixXd z2 = detail::perturb_unit_rows(rng, z, scale);
    auto g = GramMatrix::from_unit_rows(z), g2 = GramMatrix::from_unit_rows(z2);
    const double h = matrix_entropy(g, 2.0), h2 = matrix_entropy(g2, 2.0);
    const double route = std::max(std::abs(h - renyi2_entropy_frobenius(g)),
                                  std::abs(h2 - renyi2_entropy_frobenius(g2)));
    const std::string inputs = detail::describe("trial=", t, " seed=", seed, " n=", n, " d=", d, " scale=", scale);
    report.add(std::abs(h - h2), 8.0 * detail::row_distance_sum(z, z2), inputs);
    if (route > kBoundSlack) report.add(route, 0.0, inputs + " (route disagreement)");
  }
  return report;
}

/// |I2(G1, G2) - I2(G1', G2')| <= 16 sum_j sum_i |z_i^(j) - z'_i^(j)|. Every
/// fourth trial perturbs only the second representation.
inline TrialReport check_mi_diff(std::size_t trials, std::size_t n, std::size_t d, std::uint64_t seed) {
  if (n < 2 || d == 0) throw ConfigError("check_mi_diff: need n >= 2 and d >= 1");
  TrialReport report;
  report.name = "mi_diff(n=" + std::to_string(n) + ", d=" + std::to_string(d) + ")";
  const auto ni = static_cast<Eigen::Index>(n), di = static_cast<Eigen::Index>(d);
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, streams::kVerify, t));
    const double scale = detail::kNoiseScales[t % 3];
    const bool only_second = t % 4 == 3;
    Eigen::MatrixXd z1 = detail::random_unit_rows(rng, ni, di);
    Eigen::MatrixXd z2 = detail::random_unit_rows(rng, ni, di);
    Eigen::MatrixXd p1 = only_second ? z1 : detail::perturb_unit_rows(rng, z1, scale);
    Eigen::MatrixXd p2 = detail::perturb_unit_rows(rng, z2, scale);
    const double before = matrix_mutual_information(GramMatrix::from_unit_rows(z1), GramMatrix::from_unit_rows(z2), 2.0);
    const double after = matrix_mutual_information(GramMatrix::from_unit_rows(p1), GramMatrix::from_unit_rows(p2), 2.0);
    const double bound = 16.0 * (detail::row_distance_sum(z1, p1) + detail::row_distance_sum(z2, p2));
    report.add(std::abs(before - after), bound,
               detail::describe("trial=", t, " seed=", seed, " n=", n, " d=", d, " scale=", scale,
                                only_second ? " second-only" : ""));
  }
  return report;
}

/// Order-2 entropy and mutual information by eigenvalues versus Frobenius
/// norms, on grams of random unit rows with random width in [1, 2n]. Each
/// trial contributes the larger of the two deviations against a zero bound.
inline TrialReport check_renyi2_identities(std::size_t trials, std::size_t n, std::uint64_t seed) {
  if (n < 2) throw ConfigError("check_renyi2_identities: need n >= 2");
  TrialReport report;
  report.name = "renyi2_identities(n=" + std::to_string(n) + ")";
  std::uniform_int_distribution<std::size_t> width(1, 2 * n);
  for (std::size_t t = 0; t < trials; ++t) {
    Rng rng(derive_seed(seed, streams::kVerify, t));
    const auto d1 = static_cast<Eigen::Index>(width(rng)), d2 = static_cast<Eigen::Index>(width(rng));
    auto g1 = GramMatrix::from_unit_rows(detail::random_unit_rows(rng, static_cast<Eigen::Index>(n), d1));
    auto g2 = GramMatrix::from_unit_rows(detail::random_unit_rows(rng, static_cast<Eigen::Index>(n), d2));
    const double dh = std::abs(matrix_entropy(g1, 2.0) - renyi2_entropy_frobenius(g1));
    const double di = std::abs(matrix_mutual_information(g1, g2, 2.0) - renyi2_mutual_information_frobenius(g1, g2));
    report.add(std::max(dh, di), 0.0,
               detail::describe("trial=", t, " seed=", seed, " n=", n, " d1=", d1, " d2=", d2));
  }
  return report;
}

/// Per metric batch and per noise draw: the order-2 output-entropy change
/// is at most 8 sum |z_out - z'_out| and the mutual-information change is at
/// most 16 sum (|z_first - z'_first| + |z_out - z'_out|), with z the
/// l2-normalized feature rows of the clean and perturbed passes.
inline TrialReport check_ed_mid_bounds(const Model& model, const Samples& data, double sigma,
                                       std::uint64_t seed, std::size_t batch_size = 200,
                                       std::size_t draws = 1) {
  if (!(sigma >= 0.0)) throw ConfigError("check_ed_mid_bounds: sigma must be nonnegative");
  TrialReport report;
  report.name = "ed_mid_bounds(sigma=" + detail::describe(sigma) + ")";
  const auto batches = metric_batches(data.size(), batch_size);
  for (std::size_t draw = 0; draw < draws; ++draw) {
    Tensor noise = gaussian_noise(data.size(), input_width(model), sigma,
                                  derive_seed(seed, streams::kVerify, draw));
    for (std::size_t k = 0; k < batches.size(); ++k) {
      auto [begin, end] = batches[k];
      Samples batch = data.slice(begin, end);
      Tensor batch_noise = detail::noise_rows(noise, begin, end);
      auto clean = detail::infer(model, batch);
      auto noisy = detail::infer(model, batch, &batch_noise);
      Eigen::MatrixXd f = GramMatrix::unit_rows(clean.first_layer_features);
      Eigen::MatrixXd o = GramMatrix::unit_rows(clean.output_features);
      Eigen::MatrixXd f2 = GramMatrix::unit_rows(noisy.first_layer_features);
      Eigen::MatrixXd o2 = GramMatrix::unit_rows(noisy.output_features);
      auto gf = GramMatrix::from_unit_rows(f), go = GramMatrix::from_unit_rows(o);
      auto gf2 = GramMatrix::from_unit_rows(f2), go2 = GramMatrix::from_unit_rows(o2);
      const double out_shift = detail::row_distance_sum(o, o2);
      const double first_shift = detail::row_distance_sum(f, f2);
      const std::string where = detail::describe("draw=", draw, " batch=", k, " rows=[", begin, ",", end,
                                                 ") sigma=", sigma, " seed=", seed);
      report.add(std::abs(matrix_entropy(go, 2.0) - matrix_entropy(go2, 2.0)), 8.0 * out_shift,
                 where + " (entropy)");
      report.add(std::abs(matrix_mutual_information(gf, go, 2.0) - matrix_mutual_information(gf2, go2, 2.0)),
                 16.0 * (first_shift + out_shift), where + " (mutual information)");
    }
  }
  return report;
}

/// The full randomized schedule: 1e5 Hadamard trials, 1e4 trials for each
/// gram-perturbation dimension and for the entropy and mutual-information
/// lemmas, 1e3 identity trials split across gram sizes, and the ED/MID bounds
/// on a small random transformer and MLP (skipped when `random_models` is
/// false). `trials` > 0 replaces every count.
inline std::vector<TrialReport> standard_verification(std::uint64_t seed, std::size_t trials = 0,
                                                      bool random_models = true) {
  auto count = [&](std::size_t def) { return trials ? trials : def; };
  std::vector<TrialReport> out;
  out.push_back(check_hadamard(count(100000), seed));
  for (std::size_t dim : {2, 16, 128}) out.push_back(check_gram_perturb(count(10000), dim, seed));
  out.push_back(check_entropy_diff(count(10000), 32, 16, seed));
  out.push_back(check_mi_diff(count(10000), 32, 16, seed));
  for (std::size_t n : {4, 32, 200}) out.push_back(check_renyi2_identities(count(1000) / 3 + 1, n, seed));
  if (!random_models) return out;

  TransformerConfig tc;
  tc.modulus = 23;
  tc.d_model = 32;
  tc.d_mlp = 64;
  auto ds = generate_modadd(tc.modulus, 0.5, seed);
  out.push_back(check_ed_mid_bounds(init_transformer(tc, seed, 1.0), ds.train(), 0.4, seed, 50));

  MlpConfig mc;
  mc.widths = {64, 32, 32, 10};
  Samples images;
  images.kind = TaskKind::mnist;
  images.image_width = 64;
  Rng rng(derive_seed(seed, streams::kVerify, 99));
  std::uniform_real_distribution<double> pixel(0.0, 1.0);
  std::uniform_int_distribution<int> label(0, 9);
  for (std::size_t i = 0; i < 2000; ++i) {
    for (std::size_t k = 0; k < 64; ++k) images.images.push_back(pixel(rng));
    images.labels.push_back(label(rng));
  }
  out.push_back(check_ed_mid_bounds(init_mlp(mc, seed, 1.0), images, 0.1, seed, 20));
  return out;
}

}  // namespace groklab
