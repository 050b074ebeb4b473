#pragma once

// "GRKL" tensor container.
//
//   magic      4 bytes  "GRKL"
//   version    u32
//   arch tag   u32 length + UTF-8 bytes
//   count      u32
//   per tensor: u32 name length + bytes, u32 rank, u64 dims[rank],
//               binary64 payload (row-major)
//
// All integers and doubles are little-endian.

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "groklab/error.hpp"
#include "groklab/models.hpp"
#include "groklab/tensor.hpp"

namespace groklab {

inline constexpr char kCheckpointMagic[4] = {'G', 'R', 'K', 'L'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string arch;
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const {
    for (const auto& t : tensors) {
      if (t.name == name) return &t.value;
    }
    return nullptr;
  }
};

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put_le(std::vector<unsigned char>& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.insert(out.end(), bytes, bytes + sizeof(T));
}

class ByteReader {
 public:
  explicit ByteReader(const std::vector<unsigned char>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char raw[sizeof(T)];
    std::memcpy(raw, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw, raw + sizeof(T));
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, raw, sizeof(T));
    return value;
  }

  std::string string() {
    auto len = get<std::uint32_t>();
    need(len);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + len));
    pos_ += len;
    return s;
  }

  std::size_t position() const { return pos_; }
  bool done() const { return pos_ == bytes_.size(); }

  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ParseError("checkpoint truncated", pos_);
  }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
  std::vector<unsigned char> out(kCheckpointMagic, kCheckpointMagic + 4);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.arch.size()));
  out.insert(out.end(), ckpt.arch.begin(), ckpt.arch.end());
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, value] : ckpt.tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(value.rank()));
    for (std::size_t d : value.shape()) detail::put_le<std::uint64_t>(out, d);
    for (double v : value.data()) detail::put_le<double>(out, v);
  }
  return out;
}

inline Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  detail::ByteReader in(bytes);
  in.need(4);
  if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw ParseError("not a GRKL checkpoint (bad magic)", 0);
  }
  in.get<std::uint32_t>();  // magic, already checked
  auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint version " + std::to_string(version), 4);
  }
  Checkpoint ckpt;
  ckpt.arch = in.string();
  auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = in.string();
    auto rank = in.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) {
      auto dim = in.get<std::uint64_t>();
      if (dim == 0) throw ParseError("zero dimension in tensor " + name, in.position());
      d = static_cast<std::size_t>(dim);
    }
    std::vector<double> values(shape_size(shape));
    in.need(values.size() * sizeof(double));
    for (double& v : values) v = in.get<double>();
    ckpt.tensors.push_back({std::move(name), Tensor(std::move(shape), std::move(values))});
  }
  if (!in.done()) throw ParseError("trailing bytes after checkpoint", in.position());
  return ckpt;
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  auto bytes = encode_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write " + tmp);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError("short write to " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw FormatError("cannot rename " + tmp);
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

/// Architecture tag: kind plus the hyperparameters that fix tensor shapes.
inline std::string architecture_tag(const Model& model) {
  if (const auto* mlp = std::get_if<MlpModel>(&model)) {
    std::string tag = "mlp";
    for (auto w : mlp->config.widths) tag += ":" + std::to_string(w);
    return tag;
  }
  const auto& c = std::get<TransformerModel>(model).config;
  return "transformer:P=" + std::to_string(c.modulus) + ":d=" + std::to_string(c.d_model) +
         ":heads=" + std::to_string(c.heads) + ":mlp=" + std::to_string(c.d_mlp) +
         ":ln=" + (c.layer_norm ? "1" : "0");
}

/// Model parameters under their own names.
inline Checkpoint model_checkpoint(const Model& model) {
  Checkpoint ckpt;
  ckpt.arch = architecture_tag(model);
  for (auto& p : named_parameters(model)) ckpt.tensors.push_back({p.name, p.value.clone()});
  return ckpt;
}

/// Copies checkpointed parameters into `model`, which must have the same
/// architecture tag.
inline void load_parameters(Model& model, const Checkpoint& ckpt) {
  const std::string expected = architecture_tag(model);
  if (ckpt.arch != expected) {
    throw ConfigError("checkpoint architecture '" + ckpt.arch + "' does not match configured '" +
                      expected + "'");
  }
  for (auto& p : named_parameters(model)) {
    const Tensor* stored = ckpt.find(p.name);
    if (!stored) throw FormatError("checkpoint lacks parameter " + p.name);
    if (stored->shape() != p.value.shape()) {
      throw ShapeError("checkpoint parameter " + p.name + " has shape " + shape_string(stored->shape()) +
                       ", model expects " + shape_string(p.value.shape()));
    }
    auto dst = p.value.mutable_data();
    std::copy(stored->data().begin(), stored->data().end(), dst.begin());
  }
}

}  // namespace groklab
