#pragma once

// Measured quantities: weight norms, Hessian-trace sharpness, input
// perturbation error, abelian tests, and matrix information metrics built on
// gram matrices of l2-normalized features.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <random>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "groklab/data.hpp"
#include "groklab/error.hpp"
#include "groklab/losses.hpp"
#include "groklab/models.hpp"
#include "groklab/rng.hpp"
#include "groklab/tensor.hpp"

namespace groklab {

// ---------------------------------------------------------------------------
// Weight norms

/// p = 2: Frobenius norm of all parameters concatenated. p = 1: sum of
/// absolute values. Biases are included.
inline double weight_norm(const Model& model, int p) {
  if (p != 1 && p != 2) throw ConfigError("weight_norm supports p = 1 or 2");
  double total = 0.0;
  for (const auto& param : named_parameters(model)) {
    for (double v : param.value.data()) total += p == 1 ? std::abs(v) : v * v;
  }
  return p == 1 ? total : std::sqrt(total);
}

// ---------------------------------------------------------------------------
// Gram matrices and matrix entropies

/// Symmetric PSD matrix with unit diagonal.
class GramMatrix {
 public:
  static constexpr double kTolerance = 1e-9;

  /// Wraps `entries` after checking the unit diagonal and symmetry.
  explicit GramMatrix(Eigen::MatrixXd entries) : entries_(std::move(entries)) {
    if (entries_.rows() != entries_.cols() || entries_.rows() == 0) {
      throw ShapeError("gram matrix must be square and nonempty");
    }
    const auto n = entries_.rows();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::abs(entries_(i, i) - 1.0) > kTolerance) {
        throw NumericError("gram diagonal entry " + std::to_string(i) + " is " +
                           std::to_string(entries_(i, i)) + ", expected 1");
      }
      for (Eigen::Index j = 0; j < i; ++j) {
        if (std::abs(entries_(i, j) - entries_(j, i)) > kTolerance) {
          throw NumericError("gram matrix is not symmetric at (" + std::to_string(i) + ", " +
                             std::to_string(j) + ")");
        }
      }
    }
  }

  /// Gram of the rows of `features` [n x d] after scaling each row to unit
  /// norm (the rows are the feature columns z_i).
  static GramMatrix from_features(const Tensor& features) {
    return from_unit_rows(unit_rows(features));
  }

  /// Rows of `features` scaled to unit l2 norm, as an [n x d] matrix.
  static Eigen::MatrixXd unit_rows(const Tensor& features) {
    detail::require_rank("gram features", features, 2);
    Tape tape = Tape::inference();
    Tensor z = l2_normalize_columns(tape, transpose(tape, features));
    detail::ConstMatrixMap zmap(z.data().data(), z.rows(), z.cols());
    return zmap.transpose();
  }

  /// Gram of rows that are already unit norm.
  static GramMatrix from_unit_rows(const Eigen::MatrixXd& z) {
    Eigen::MatrixXd g = z * z.transpose();
    g.diagonal().setOnes();  // exact up to rounding after normalization
    g = 0.5 * (g + g.transpose()).eval();
    return GramMatrix(std::move(g));
  }

  /// Entries 1 where labels agree, 0 otherwise (gram of one-hot label vectors).
  static GramMatrix from_labels(std::span<const int> labels) {
    const auto n = static_cast<Eigen::Index>(labels.size());
    Eigen::MatrixXd g(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j) g(i, j) = labels[i] == labels[j] ? 1.0 : 0.0;
    return GramMatrix(std::move(g));
  }

  static GramMatrix identity(std::size_t n) {
    return GramMatrix(Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n)));
  }

  std::size_t size() const { return static_cast<std::size_t>(entries_.rows()); }
  const Eigen::MatrixXd& entries() const { return entries_; }
  double operator()(std::size_t i, std::size_t j) const {
    return entries_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }

  GramMatrix hadamard(const GramMatrix& other) const {
    if (other.size() != size()) {
      throw ShapeError("hadamard product of grams with sizes " + std::to_string(size()) + " and " +
                       std::to_string(other.size()));
    }
    return GramMatrix(entries_.cwiseProduct(other.entries_));
  }

  double frobenius_sq() const { return entries_.squaredNorm(); }

  /// Eigenvalues of G / n, clamped at 0. Throws if G has an eigenvalue below
  /// -kTolerance. Eigenvalues within the solver's rounding noise of zero
  /// are set to exactly zero.
  std::vector<double> normalized_spectrum() const {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(entries_, Eigen::EigenvaluesOnly);
    if (solver.info() != Eigen::Success) throw NumericError("gram eigendecomposition failed");
    const double n = static_cast<double>(size());
    const double floor = 1e-13 * n;
    std::vector<double> out;
    out.reserve(size());
    for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i) {
      double lambda = solver.eigenvalues()(i);
      if (lambda < -kTolerance) {
        throw NumericError("gram matrix is not PSD: eigenvalue " + std::to_string(lambda));
      }
      out.push_back(lambda <= floor ? 0.0 : lambda / n);
    }
    return out;
  }

 private:
  Eigen::MatrixXd entries_;
};

/// Matrix Renyi entropy of order alpha (natural log); alpha = 1 is the von
/// Neumann limit.
inline double matrix_entropy(const GramMatrix& gram, double alpha) {
  if (!(alpha > 0.0)) throw ConfigError("entropy order alpha must be positive");
  auto spectrum = gram.normalized_spectrum();
  double mass = 0.0;
  for (double l : spectrum) mass += l;
  if (!(mass > 0.0)) throw NumericError("gram spectrum is all zero");
  if (alpha == 1.0) {
    double h = 0.0;
    for (double l : spectrum) {
      if (l > 0.0) h -= l * std::log(l);
    }
    return h;
  }
  double power_sum = 0.0;
  for (double l : spectrum) {
    if (l > 0.0) power_sum += std::pow(l, alpha);
  }
  return std::log(power_sum) / (1.0 - alpha);
}

/// Order-2 entropy through the Frobenius norm: 2 log n - log ||G||_F^2.
inline double renyi2_entropy_frobenius(const GramMatrix& gram) {
  const double n = static_cast<double>(gram.size());
  return 2.0 * std::log(n) - std::log(gram.frobenius_sq());
}

/// H(G1) + H(G2) - H(G1 . G2) with . the elementwise product.
inline double matrix_mutual_information(const GramMatrix& g1, const GramMatrix& g2, double alpha) {
  if (g1.size() != g2.size()) {
    throw ShapeError("mutual information of grams with sizes " + std::to_string(g1.size()) + " and " +
                     std::to_string(g2.size()));
  }
  return matrix_entropy(g1, alpha) + matrix_entropy(g2, alpha) -
         matrix_entropy(g1.hadamard(g2), alpha);
}

/// Order-2 mutual information through Frobenius norms:
/// 2 log n - log(||G1||^2 ||G2||^2 / ||G1 . G2||^2).
inline double renyi2_mutual_information_frobenius(const GramMatrix& g1, const GramMatrix& g2) {
  const double n = static_cast<double>(g1.size());
  return 2.0 * std::log(n) -
         std::log(g1.frobenius_sq() * g2.frobenius_sq() / g1.hadamard(g2).frobenius_sq());
}

// ---------------------------------------------------------------------------
// Sharpness

/// Gradient of a scalar loss at a flat parameter vector.
using GradientFn = std::function<std::vector<double>(std::span<const double>)>;

/// Hutchinson estimate of tr(H): mean of v'Hv over Rademacher probes, with
/// Hv = (grad(w + eps v) - grad(w - eps v)) / (2 eps).
inline double hutchinson_trace(const GradientFn& gradient, std::span<const double> point,
                               std::size_t probes, double fd_eps, std::uint64_t seed) {
  if (probes == 0) throw ConfigError("sharpness needs at least one probe");
  if (!(fd_eps > 0.0)) throw ConfigError("finite-difference step must be positive");
  const std::size_t n = point.size();
  std::vector<double> probe(n), plus(n), minus(n);
  double total = 0.0;
  for (std::size_t k = 0; k < probes; ++k) {
    Rng rng(derive_seed(seed, streams::kProbe, k));
    std::bernoulli_distribution coin(0.5);
    for (std::size_t i = 0; i < n; ++i) {
      probe[i] = coin(rng) ? 1.0 : -1.0;
      plus[i] = point[i] + fd_eps * probe[i];
      minus[i] = point[i] - fd_eps * probe[i];
    }
    auto gp = gradient(plus);
    auto gm = gradient(minus);
    if (gp.size() != n || gm.size() != n) throw ShapeError("gradient has wrong length");
    double quad = 0.0;
    for (std::size_t i = 0; i < n; ++i) quad += probe[i] * (gp[i] - gm[i]);
    quad /= 2.0 * fd_eps;
    if (!std::isfinite(quad)) throw NonFiniteError("non-finite Hessian-vector product in sharpness");
    total += quad;
  }
  return total / static_cast<double>(probes);
}

inline std::vector<double> flatten_parameters(const Model& model) {
  std::vector<double> flat;
  for (const auto& p : named_parameters(model)) flat.insert(flat.end(), p.value.data().begin(), p.value.data().end());
  return flat;
}

inline void assign_parameters(Model& model, std::span<const double> flat) {
  std::size_t offset = 0;
  for (auto& p : named_parameters(model)) {
    auto dst = p.value.mutable_data();
    if (offset + dst.size() > flat.size()) throw ShapeError("flat parameter vector too short");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), dst.size(), dst.begin());
    offset += dst.size();
  }
  if (offset != flat.size()) throw ShapeError("flat parameter vector too long");
}

/// Full-batch task loss and its gradient with respect to every parameter.
inline std::pair<double, std::vector<double>> loss_and_gradient(const Model& model, const Samples& data) {
  Tape tape;
  auto capture = forward(tape, model, data);
  Tensor loss = task_loss(tape, data.kind, capture.output_features, data.labels);
  tape.backward(loss);
  std::vector<double> grad;
  for (const auto& p : named_parameters(model)) {
    if (p.value.has_grad()) {
      grad.insert(grad.end(), p.value.grad().begin(), p.value.grad().end());
    } else {
      grad.insert(grad.end(), p.value.size(), 0.0);
    }
  }
  for (double g : grad) {
    if (!std::isfinite(g)) throw NonFiniteError("non-finite gradient");
  }
  return {loss.item(), std::move(grad)};
}

/// Hessian-trace sharpness of the full-batch task loss on `data`.
inline double sharpness(const Model& model, const Samples& data, std::size_t probes, double fd_eps,
                        std::uint64_t seed) {
  Model work = clone_model(model);
  auto point = flatten_parameters(work);
  GradientFn gradient = [&](std::span<const double> w) {
    assign_parameters(work, w);
    return loss_and_gradient(work, data).second;
  };
  return hutchinson_trace(gradient, point, probes, fd_eps, seed);
}

// ---------------------------------------------------------------------------
// Input perturbations

/// One N(0, sigma^2 I) draw per example, [n x width], from a seeded stream.
inline Tensor gaussian_noise(std::size_t n, std::size_t width, double sigma, std::uint64_t seed) {
  if (!(sigma >= 0.0)) throw ConfigError("noise sigma must be nonnegative");
  std::vector<double> values(n * width, 0.0);
  if (sigma > 0.0) {
    Rng rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (double& v : values) v = sigma * normal(rng);
  }
  return Tensor({n, width}, std::move(values));
}

namespace detail {

inline Tensor noise_rows(const Tensor& noise, std::size_t begin, std::size_t end) {
  const std::size_t width = noise.cols();
  std::vector<double> values(noise.data().begin() + static_cast<std::ptrdiff_t>(begin * width),
                             noise.data().begin() + static_cast<std::ptrdiff_t>(end * width));
  return Tensor({end - begin, width}, std::move(values));
}

inline ForwardCapture infer(const Model& model, const Samples& data, const Tensor* noise = nullptr) {
  Tape tape = Tape::inference();
  return forward(tape, model, data, noise);
}

inline constexpr std::size_t kEvalChunk = 1024;

}  // namespace detail

/// sum_i || f(x_i + Delta_i) - f(x_i) ||^2 with one Gaussian draw per example.
inline double perturbation_error(const Model& model, const Samples& data, double sigma,
                                 std::uint64_t noise_seed) {
  if (!(sigma >= 0.0)) throw ConfigError("sigma must be nonnegative");
  if (sigma == 0.0) return 0.0;
  Tensor noise = gaussian_noise(data.size(), input_width(model), sigma,
                                derive_seed(noise_seed, streams::kMetricNoise));
  double total = 0.0;
  for (std::size_t begin = 0; begin < data.size(); begin += detail::kEvalChunk) {
    std::size_t end = std::min(data.size(), begin + detail::kEvalChunk);
    Samples chunk = data.slice(begin, end);
    Tensor chunk_noise = detail::noise_rows(noise, begin, end);
    auto clean = detail::infer(model, chunk).output_features;
    auto noisy = detail::infer(model, chunk, &chunk_noise).output_features;
    for (std::size_t i = 0; i < clean.size(); ++i) {
      double diff = noisy[i] - clean[i];
      total += diff * diff;
    }
  }
  return total;
}

/// Mean over examples of || d f(x_i) / d x ||_F^2, one reverse pass per
/// output coordinate. x is the pixel vector (MLP) or the stacked embeddings
/// (transformer).
inline double input_gradient_norm(const Model& model, const Samples& data, std::size_t chunk = 256) {
  if (data.size() == 0) throw ShapeError("input_gradient_norm on empty data");
  const std::size_t width = input_width(model);
  double total = 0.0;
  for (std::size_t begin = 0; begin < data.size(); begin += chunk) {
    std::size_t end = std::min(data.size(), begin + chunk);
    Samples part = data.slice(begin, end);
    const std::size_t outputs = detail::infer(model, part.slice(0, 1)).output_features.cols();
    for (std::size_t j = 0; j < outputs; ++j) {
      Tape tape;
      Tensor probe = Tensor::zeros({part.size(), width}, true);
      auto capture = forward(tape, model, part, &probe);
      std::vector<int> column(part.size(), static_cast<int>(j));
      tape.backward(sum(tape, pick(tape, capture.output_features, column)));
      for (double g : probe.grad()) total += g * g;
    }
  }
  return total / static_cast<double>(data.size());
}

// ---------------------------------------------------------------------------
// Abelian tests

/// Index of the largest entry of each row; ties go to the lowest index.
inline std::vector<std::size_t> argmax_rows(const Tensor& scores) {
  std::vector<std::size_t> out(scores.rows());
  const std::size_t n = scores.cols();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double* row = scores.data().data() + i * n;
    out[i] = static_cast<std::size_t>(std::max_element(row, row + n) - row);
  }
  return out;
}

inline double accuracy(const Model& model, const Samples& data) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < data.size(); begin += detail::kEvalChunk) {
    std::size_t end = std::min(data.size(), begin + detail::kEvalChunk);
    auto pred = argmax_rows(detail::infer(model, data.slice(begin, end)).output_features);
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (static_cast<int>(pred[i]) == data.labels[begin + i]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

/// Full-data task loss without recording gradients.
inline double dataset_loss(const Model& model, const Samples& data) {
  Tape tape = Tape::inference();
  auto capture = forward(tape, model, data);
  return task_loss(tape, data.kind, capture.output_features, data.labels).item();
}

/// Fraction of pairs whose argmax prediction for (a, b) equals that for (b, a).
inline double abelian_accuracy(const Model& model, const Samples& pairs) {
  if (pairs.size() == 0) return 0.0;
  auto forward_pred = argmax_rows(detail::infer(model, pairs).output_features);
  auto swapped_pred = argmax_rows(detail::infer(model, pairs.swapped()).output_features);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < forward_pred.size(); ++i) agree += forward_pred[i] == swapped_pred[i];
  return static_cast<double>(agree) / static_cast<double>(pairs.size());
}

/// Mean over pairs of || logits(a, b) - logits(b, a) ||^2.
inline double abelian_logit_distance(const Model& model, const Samples& pairs) {
  if (pairs.size() == 0) return 0.0;
  auto lhs = detail::infer(model, pairs).output_features;
  auto rhs = detail::infer(model, pairs.swapped()).output_features;
  double total = 0.0;
  for (std::size_t i = 0; i < lhs.size(); ++i) total += (lhs[i] - rhs[i]) * (lhs[i] - rhs[i]);
  return total / static_cast<double>(pairs.size());
}

// ---------------------------------------------------------------------------
// Perturbed matrix information

struct InfoOptions {
  double sigma = 0.0;
  double alpha = 1.0;
  std::size_t batch_size = 200;
  std::uint64_t noise_seed = 0;
};

/// Batch means of the matrix-information quantities under one perturbation
/// draw.
struct InfoEstimate {
  double pmi = 0.0;         // I(first-layer gram, output gram)
  double pe = 0.0;          // H(output gram)
  double pmi_labels = 0.0;  // I(output gram, label gram)
  std::size_t batches = 0;
};

/// Contiguous metric batches of `batch_size`; a trailing batch with fewer
/// than two examples is dropped since its gram carries no information.
inline std::vector<std::pair<std::size_t, std::size_t>> metric_batches(std::size_t n, std::size_t batch_size) {
  if (batch_size < 2) throw ConfigError("metric batch size must be at least 2");
  std::vector<std::pair<std::size_t, std::size_t>> out;
  for (std::size_t begin = 0; begin < n; begin += batch_size) {
    std::size_t end = std::min(n, begin + batch_size);
    if (end - begin >= 2) out.emplace_back(begin, end);
  }
  if (out.empty()) throw ConfigError("metric data needs at least two examples");
  return out;
}

/// Perturbation Delta_i for every example in `data`, shared by every metric
/// evaluated with the same options.
inline Tensor info_noise(const Model& model, const Samples& data, const InfoOptions& opt) {
  return gaussian_noise(data.size(), input_width(model), opt.sigma,
                        derive_seed(opt.noise_seed, streams::kMetricNoise));
}

/// `with_labels` adds the label-gram mutual information.
inline InfoEstimate estimate_information(const Model& model, const Samples& data, const InfoOptions& opt,
                                         bool with_labels = true) {
  if (!(opt.sigma >= 0.0)) throw ConfigError("sigma must be nonnegative");
  Tensor noise = info_noise(model, data, opt);
  InfoEstimate est;
  for (auto [begin, end] : metric_batches(data.size(), opt.batch_size)) {
    Samples batch = data.slice(begin, end);
    Tensor batch_noise = detail::noise_rows(noise, begin, end);
    auto capture = detail::infer(model, batch, opt.sigma > 0.0 ? &batch_noise : nullptr);
    auto first = GramMatrix::from_features(capture.first_layer_features);
    auto output = GramMatrix::from_features(capture.output_features);
    double h_out = matrix_entropy(output, opt.alpha);
    est.pe += h_out;
    est.pmi += matrix_entropy(first, opt.alpha) + h_out - matrix_entropy(first.hadamard(output), opt.alpha);
    if (with_labels) {
      est.pmi_labels += matrix_mutual_information(output, GramMatrix::from_labels(batch.labels), opt.alpha);
    }
    ++est.batches;
  }
  const double count = static_cast<double>(est.batches);
  est.pmi /= count;
  est.pe /= count;
  est.pmi_labels /= count;
  return est;
}

inline double pmi(const Model& model, const Samples& data, const InfoOptions& opt) {
  return estimate_information(model, data, opt, false).pmi;
}

inline double pe(const Model& model, const Samples& data, const InfoOptions& opt) {
  return estimate_information(model, data, opt, false).pe;
}

inline double pmi_labels(const Model& model, const Samples& data, const InfoOptions& opt) {
  return estimate_information(model, data, opt, true).pmi_labels;
}

struct InfoDifference {
  double mid = 0.0;
  double ed = 0.0;
};

/// |PMI(sigma) - PMI(0)| and |PE(sigma) - PE(0)| on identical batches.
inline InfoDifference information_difference(const Model& model, const Samples& data, const InfoOptions& opt) {
  if (opt.sigma == 0.0) return {};
  auto noisy = estimate_information(model, data, opt, false);
  InfoOptions clean = opt;
  clean.sigma = 0.0;
  auto base = estimate_information(model, data, clean, false);
  return {std::abs(noisy.pmi - base.pmi), std::abs(noisy.pe - base.pe)};
}

inline double mid(const Model& model, const Samples& data, const InfoOptions& opt) {
  return information_difference(model, data, opt).mid;
}

inline double ed(const Model& model, const Samples& data, const InfoOptions& opt) {
  return information_difference(model, data, opt).ed;
}

// ---------------------------------------------------------------------------
// Registry

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> names{
      "weight_l2", "weight_l1", "sharpness", "perturb_err", "abelian_acc_train",
      "abelian_acc_test", "abelian_logit_dist", "pmi", "pe", "mid", "ed", "pmi_labels",
      "input_grad_norm"};
  return names;
}

inline bool is_metric_name(const std::string& name) {
  const auto& names = metric_names();
  return std::find(names.begin(), names.end(), name) != names.end();
}

inline bool is_abelian_metric(const std::string& name) {
  return name.rfind("abelian_", 0) == 0;
}

struct MetricSettings {
  std::set<std::string> enabled;
  double perturb_sigma = 0.04;
  double info_sigma = 0.4;
  double alpha = 1.0;
  std::size_t batch_size = 200;
  std::size_t sharpness_probes = 4;
  double sharpness_eps = 1e-4;
  std::uint64_t seed = 0;
};

/// Evaluates every enabled metric on a private copy of `model`.
inline std::map<std::string, double> evaluate_metrics(const Model& model, const Samples& train,
                                                      const Samples& test, const MetricSettings& s) {
  const Model snapshot = clone_model(model);
  std::map<std::string, double> out;
  auto on = [&](const char* name) { return s.enabled.count(name) > 0; };
  for (const auto& name : s.enabled) {
    if (!is_metric_name(name)) throw ConfigError("unknown metric '" + name + "'");
    if (is_abelian_metric(name) && train.kind != TaskKind::modadd) {
      throw ConfigError("metric '" + name + "' needs the modular-addition task");
    }
  }
  if (on("weight_l2")) out["weight_l2"] = weight_norm(snapshot, 2);
  if (on("weight_l1")) out["weight_l1"] = weight_norm(snapshot, 1);
  if (on("sharpness")) out["sharpness"] = sharpness(snapshot, train, s.sharpness_probes, s.sharpness_eps, s.seed);
  if (on("perturb_err")) out["perturb_err"] = perturbation_error(snapshot, train, s.perturb_sigma, s.seed);
  if (on("abelian_acc_train")) out["abelian_acc_train"] = abelian_accuracy(snapshot, train);
  if (on("abelian_acc_test")) out["abelian_acc_test"] = abelian_accuracy(snapshot, test);
  if (on("abelian_logit_dist")) out["abelian_logit_dist"] = abelian_logit_distance(snapshot, train);
  InfoOptions opt{s.info_sigma, s.alpha, s.batch_size, s.seed};
  const bool info = on("pmi") || on("pe") || on("pmi_labels") || on("mid") || on("ed");
  if (info) {
    auto est = estimate_information(snapshot, train, opt, on("pmi_labels"));
    if (on("pmi")) out["pmi"] = est.pmi;
    if (on("pe")) out["pe"] = est.pe;
    if (on("pmi_labels")) out["pmi_labels"] = est.pmi_labels;
    if (on("mid") || on("ed")) {
      InfoDifference diff;
      if (opt.sigma > 0.0) {
        InfoOptions clean = opt;
        clean.sigma = 0.0;
        auto base = estimate_information(snapshot, train, clean, false);
        diff = {std::abs(est.pmi - base.pmi), std::abs(est.pe - base.pe)};
      }
      if (on("mid")) out["mid"] = diff.mid;
      if (on("ed")) out["ed"] = diff.ed;
    }
  }
  if (on("input_grad_norm")) out["input_grad_norm"] = input_gradient_norm(snapshot, train);
  for (const auto& [name, value] : out) {
    if (!std::isfinite(value)) throw NonFiniteError("metric " + name + " is not finite");
  }
  return out;
}

}  // namespace groklab
