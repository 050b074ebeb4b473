#include <gtest/gtest.h>

#include <fstream>
#include <set>

#include "support.hpp"

using namespace groklab;
using namespace testing_support;

namespace {

void put_be32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int shift = 24; shift >= 0; shift -= 8) out.push_back(static_cast<unsigned char>(v >> shift));
}

std::vector<unsigned char> idx_images(std::uint32_t count, std::uint32_t rows, std::uint32_t cols) {
  std::vector<unsigned char> out;
  put_be32(out, 2051);
  put_be32(out, count);
  put_be32(out, rows);
  put_be32(out, cols);
  for (std::uint32_t i = 0; i < count * rows * cols; ++i) out.push_back(static_cast<unsigned char>(i % 256));
  return out;
}

std::vector<unsigned char> idx_labels(std::uint32_t count) {
  std::vector<unsigned char> out;
  put_be32(out, 2049);
  put_be32(out, count);
  for (std::uint32_t i = 0; i < count; ++i) out.push_back(static_cast<unsigned char>(i % 10));
  return out;
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST(ModAdd, DefaultSplitCounts) {
  auto ds = generate_modadd(113, 0.3, 0);
  EXPECT_EQ(ds.pairs.size(), 12769u);
  EXPECT_EQ(ds.train_indices.size(), 3830u);
  EXPECT_EQ(ds.test_indices.size(), 8939u);
}

TEST(ModAdd, SplitIsDisjointAndExhaustive) {
  for (int p : {2, 5, 31}) {
    for (double frac : {0.1, 0.3, 0.9}) {
      for (std::uint64_t seed : {0u, 7u}) {
        auto ds = generate_modadd(p, frac, seed);
        std::set<std::size_t> seen(ds.train_indices.begin(), ds.train_indices.end());
        for (auto i : ds.test_indices) EXPECT_TRUE(seen.insert(i).second);
        EXPECT_EQ(seen.size(), static_cast<std::size_t>(p * p));
        EXPECT_EQ(ds.train_indices.size(), static_cast<std::size_t>(std::floor(frac * p * p)));
      }
    }
  }
}

TEST(ModAdd, LabelsAndLexicographicOrder) {
  auto ds = generate_modadd(3, 0.5, 1);
  ASSERT_EQ(ds.pairs.size(), 9u);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_EQ(ds.pairs[i][0], static_cast<int>(i / 3));
    EXPECT_EQ(ds.pairs[i][1], static_cast<int>(i % 3));
    EXPECT_EQ(ds.labels[i], (ds.pairs[i][0] + ds.pairs[i][1]) % 3);
  }
}

TEST(ModAdd, SeedDeterminesSplit) {
  auto a = generate_modadd(23, 0.3, 4), b = generate_modadd(23, 0.3, 4), c = generate_modadd(23, 0.3, 5);
  EXPECT_EQ(a.train_indices, b.train_indices);
  EXPECT_NE(a.train_indices, c.train_indices);
}

TEST(ModAdd, RejectsBadArguments) {
  EXPECT_THROW(generate_modadd(1, 0.3, 0), ConfigError);
  EXPECT_THROW(generate_modadd(5, 0.0, 0), ConfigError);
  EXPECT_THROW(generate_modadd(5, 1.0, 0), ConfigError);
}

TEST(Mnist, ParsesSyntheticIdxFiles) {
  auto dir = scratch_dir("idx");
  write_bytes(dir / "img", idx_images(12, 2, 3));
  write_bytes(dir / "lbl", idx_labels(12));
  auto ds = load_mnist((dir / "img").string(), (dir / "lbl").string(), 5, 3);
  EXPECT_EQ(ds.count(), 12u);
  EXPECT_EQ(ds.width(), 6u);
  EXPECT_DOUBLE_EQ(ds.images[7], 7.0 / 255.0);
  EXPECT_EQ(ds.labels[11], 1);
  EXPECT_EQ(ds.train_indices.size(), 5u);
  auto again = load_mnist((dir / "img").string(), (dir / "lbl").string(), 5, 3);
  EXPECT_EQ(ds.train_indices, again.train_indices);
  std::set<std::size_t> unique(ds.train_indices.begin(), ds.train_indices.end());
  EXPECT_EQ(unique.size(), 5u);
  for (double v : ds.images) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
  std::filesystem::remove_all(dir);
}

TEST(Mnist, DistinctErrorsForBadFiles) {
  auto images = idx_images(4, 2, 2);
  auto bad_magic = images;
  bad_magic[3] = 0;
  EXPECT_THROW(parse_idx_images(bad_magic, "x"), IdxMagicError);
  EXPECT_THROW(parse_idx_labels(images, "x"), IdxMagicError);

  auto cut = images;
  cut.resize(cut.size() - 1);
  try {
    parse_idx_images(cut, "x");
    FAIL() << "expected IdxTruncatedError";
  } catch (const IdxTruncatedError& e) {
    EXPECT_EQ(e.offset(), cut.size());
  }
  std::vector<unsigned char> header_only{0, 0, 8};
  EXPECT_THROW(parse_idx_labels(header_only, "x"), IdxTruncatedError);

  auto dir = scratch_dir("idx_mismatch");
  write_bytes(dir / "img", images);
  write_bytes(dir / "lbl", idx_labels(5));
  EXPECT_THROW(load_mnist((dir / "img").string(), (dir / "lbl").string(), 0, 0), IdxCountMismatchError);
  EXPECT_THROW(load_mnist((dir / "missing").string(), (dir / "lbl").string(), 0, 0), FormatError);
  std::filesystem::remove_all(dir);
}

TEST(Batching, FullAndPartialBatches) {
  auto five = batches(1000, BatchPlan{200, 0}, 0);
  ASSERT_EQ(five.size(), 5u);
  for (const auto& b : five) EXPECT_EQ(b.size(), 200u);
  auto six = batches(1001, BatchPlan{200, 0}, 0);
  ASSERT_EQ(six.size(), 6u);
  EXPECT_EQ(six.back().size(), 1u);
  std::set<std::size_t> all;
  for (const auto& b : six) all.insert(b.begin(), b.end());
  EXPECT_EQ(all.size(), 1001u);
  EXPECT_EQ(*all.rbegin(), 1000u);
}

TEST(Batching, EpochPermutationsAreReplayable) {
  BatchPlan plan{10, 9};
  EXPECT_NE(batches(50, plan, 0), batches(50, plan, 1));
  EXPECT_EQ(batches(50, plan, 1), batches(50, plan, 1));
  EXPECT_THROW(batches(5, BatchPlan{6, 0}, 0), ConfigError);
}

TEST(Samples, SwappedAndSubset) {
  auto s = random_pairs(2, 5, 7);
  auto w = s.swapped();
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_EQ(w.pairs[i][0], s.pairs[i][1]);
    EXPECT_EQ(w.labels[i], s.labels[i]);
  }
  std::vector<std::size_t> idx{9};
  EXPECT_THROW(s.subset(idx), RangeError);
}
