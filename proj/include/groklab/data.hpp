#pragma once

// Datasets: the modular-addition task, MNIST IDX ingestion, and seeded batching.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "groklab/error.hpp"
#include "groklab/rng.hpp"

namespace groklab {

enum class TaskKind { mnist, modadd };

using TokenPair = std::array<int, 2>;

/// A set of examples in the form a model consumes: image rows for MNIST,
/// token pairs for modular addition.
struct Samples {
  TaskKind kind = TaskKind::modadd;
  std::size_t image_width = 0;
  std::vector<double> images;  // size() x image_width, row-major
  std::vector<TokenPair> pairs;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }

  Samples subset(std::span<const std::size_t> index) const {
    Samples out;
    out.kind = kind;
    out.image_width = image_width;
    out.labels.reserve(index.size());
    if (kind == TaskKind::mnist) out.images.reserve(index.size() * image_width);
    for (std::size_t i : index) {
      if (i >= size()) throw RangeError("sample index " + std::to_string(i) + " out of range");
      out.labels.push_back(labels[i]);
      if (kind == TaskKind::mnist) {
        auto row = images.begin() + static_cast<std::ptrdiff_t>(i * image_width);
        out.images.insert(out.images.end(), row, row + static_cast<std::ptrdiff_t>(image_width));
      } else {
        out.pairs.push_back(pairs[i]);
      }
    }
    return out;
  }

  Samples slice(std::size_t begin, std::size_t end) const {
    std::vector<std::size_t> index(end - begin);
    std::iota(index.begin(), index.end(), begin);
    return subset(index);
  }

  /// Same examples with every pair (a, b) replaced by (b, a).
  Samples swapped() const {
    if (kind != TaskKind::modadd) throw ConfigError("swapped() needs token-pair samples");
    Samples out = *this;
    for (auto& p : out.pairs) std::swap(p[0], p[1]);
    return out;
  }
};

inline std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

struct ModAddDataset {
  int modulus = 0;
  std::vector<TokenPair> pairs;  // lexicographic (a, b)
  std::vector<int> labels;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
  std::uint64_t seed = 0;

  Samples all() const {
    Samples s;
    s.kind = TaskKind::modadd;
    s.pairs = pairs;
    s.labels = labels;
    return s;
  }
  Samples train() const { return all().subset(train_indices); }
  Samples test() const { return all().subset(test_indices); }
};

/// All P^2 pairs with label (a + b) mod P; the first floor(train_frac * P^2)
/// entries of a seeded shuffle form the training split.
inline ModAddDataset generate_modadd(int modulus, double train_frac, std::uint64_t seed) {
  if (modulus < 2) throw ConfigError("modulus must be at least 2, got " + std::to_string(modulus));
  if (!(train_frac > 0.0 && train_frac < 1.0)) {
    throw ConfigError("train_frac must lie in (0, 1), got " + std::to_string(train_frac));
  }
  ModAddDataset ds;
  ds.modulus = modulus;
  ds.seed = seed;
  for (int a = 0; a < modulus; ++a) {
    for (int b = 0; b < modulus; ++b) {
      ds.pairs.push_back({a, b});
      ds.labels.push_back((a + b) % modulus);
    }
  }
  const std::size_t total = ds.pairs.size();
  const auto train_count = static_cast<std::size_t>(std::floor(train_frac * static_cast<double>(total)));
  auto order = seeded_permutation(total, derive_seed(seed, streams::kSplit));
  ds.train_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(train_count));
  ds.test_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(train_count), order.end());
  std::sort(ds.train_indices.begin(), ds.train_indices.end());
  std::sort(ds.test_indices.begin(), ds.test_indices.end());
  return ds;
}

// ---------------------------------------------------------------------------
// MNIST IDX files

class IdxMagicError : public ParseError {
 public:
  using ParseError::ParseError;
};
class IdxTruncatedError : public ParseError {
 public:
  using ParseError::ParseError;
};
class IdxCountMismatchError : public FormatError {
 public:
  using FormatError::FormatError;
};

inline constexpr std::uint32_t kIdxImageMagic = 2051;
inline constexpr std::uint32_t kIdxLabelMagic = 2049;

namespace detail {

inline std::vector<unsigned char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& bytes, std::size_t offset,
                               const std::string& path) {
  if (offset + 4 > bytes.size()) {
    throw IdxTruncatedError(path + ": truncated header", bytes.size());
  }
  return (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
         (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
}

}  // namespace detail

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<unsigned char> pixels;
};

inline IdxImages parse_idx_images(const std::vector<unsigned char>& bytes, const std::string& path) {
  std::uint32_t magic = detail::read_be32(bytes, 0, path);
  if (magic != kIdxImageMagic) {
    throw IdxMagicError(path + ": bad IDX3 magic " + std::to_string(magic), 0);
  }
  IdxImages out;
  out.count = detail::read_be32(bytes, 4, path);
  out.rows = detail::read_be32(bytes, 8, path);
  out.cols = detail::read_be32(bytes, 12, path);
  const std::size_t need = 16 + out.count * out.rows * out.cols;
  if (bytes.size() < need) {
    throw IdxTruncatedError(path + ": expected " + std::to_string(need) + " bytes, file ends early",
                            bytes.size());
  }
  out.pixels.assign(bytes.begin() + 16, bytes.begin() + static_cast<std::ptrdiff_t>(need));
  return out;
}

inline std::vector<int> parse_idx_labels(const std::vector<unsigned char>& bytes, const std::string& path) {
  std::uint32_t magic = detail::read_be32(bytes, 0, path);
  if (magic != kIdxLabelMagic) {
    throw IdxMagicError(path + ": bad IDX1 magic " + std::to_string(magic), 0);
  }
  const std::size_t count = detail::read_be32(bytes, 4, path);
  if (bytes.size() < 8 + count) {
    throw IdxTruncatedError(path + ": expected " + std::to_string(8 + count) + " bytes, file ends early",
                            bytes.size());
  }
  return {bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(count)};
}

struct MnistDataset {
  std::size_t rows = 0, cols = 0;
  std::vector<double> images;  // count x (rows*cols), scaled to [0, 1]
  std::vector<int> labels;
  std::vector<std::size_t> train_indices;  // sorted subset of size train_count
  std::uint64_t seed = 0;

  std::size_t count() const noexcept { return labels.size(); }
  std::size_t width() const noexcept { return rows * cols; }

  Samples all() const {
    Samples s;
    s.kind = TaskKind::mnist;
    s.image_width = width();
    s.images = images;
    s.labels = labels;
    return s;
  }
  Samples train() const { return all().subset(train_indices); }
};

/// Reads an IDX3 image file and IDX1 label file. `train_count` examples are
/// drawn without replacement by `seed`; 0 selects every example.
inline MnistDataset load_mnist(const std::string& image_path, const std::string& label_path,
                               std::size_t train_count, std::uint64_t seed) {
  auto raw = parse_idx_images(detail::read_file_bytes(image_path), image_path);
  auto labels = parse_idx_labels(detail::read_file_bytes(label_path), label_path);
  if (labels.size() != raw.count) {
    throw IdxCountMismatchError(image_path + " holds " + std::to_string(raw.count) + " images but " +
                                label_path + " holds " + std::to_string(labels.size()) + " labels");
  }
  if (train_count > raw.count) {
    throw ConfigError("train_count " + std::to_string(train_count) + " exceeds " +
                      std::to_string(raw.count) + " available examples");
  }
  MnistDataset ds;
  ds.rows = raw.rows;
  ds.cols = raw.cols;
  ds.seed = seed;
  ds.labels = std::move(labels);
  ds.images.resize(raw.pixels.size());
  std::transform(raw.pixels.begin(), raw.pixels.end(), ds.images.begin(),
                 [](unsigned char p) { return static_cast<double>(p) / 255.0; });
  const std::size_t take = train_count == 0 ? raw.count : train_count;
  auto order = seeded_permutation(raw.count, derive_seed(seed, streams::kSplit));
  ds.train_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take));
  std::sort(ds.train_indices.begin(), ds.train_indices.end());
  return ds;
}

// ---------------------------------------------------------------------------
// Batching

struct BatchPlan {
  std::size_t batch_size = 200;
  std::uint64_t seed = 0;
};

/// Splits a seeded permutation of [0, train_size) into consecutive batches;
/// the permutation depends only on (plan.seed, epoch). The last batch may be
/// partial.
inline std::vector<std::vector<std::size_t>> batches(std::size_t train_size, const BatchPlan& plan,
                                                     std::uint64_t epoch) {
  if (plan.batch_size == 0 || plan.batch_size > train_size) {
    throw ConfigError("batch size " + std::to_string(plan.batch_size) + " must lie in [1, " +
                      std::to_string(train_size) + "]");
  }
  auto order = seeded_permutation(train_size, derive_seed(plan.seed, streams::kBatchOrder, epoch));
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t begin = 0; begin < train_size; begin += plan.batch_size) {
    std::size_t end = std::min(train_size, begin + plan.batch_size);
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(begin),
                     order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

}  // namespace groklab
