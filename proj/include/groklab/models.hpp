#pragma once

// The two architectures: a ReLU MLP for MNIST and a one-layer ReLU
// transformer for modular addition.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "groklab/data.hpp"
#include "groklab/error.hpp"
#include "groklab/rng.hpp"
#include "groklab/tensor.hpp"

namespace groklab {

struct NamedTensor {
  std::string name;
  Tensor value;
};

enum class ModelKind { mlp, transformer };

inline const char* model_kind_name(ModelKind kind) {
  return kind == ModelKind::mlp ? "mlp" : "transformer";
}

/// Which transformer activation stands in for the "first layer" feature.
enum class CapturePoint {
  embedding,       // token + positional embedding of all three positions, concatenated
  post_attention,  // residual at the "=" position after attention, before the MLP
  post_block,      // residual at the "=" position after the MLP
};

struct MlpConfig {
  std::vector<std::size_t> widths{784, 200, 200, 10};
};

struct TransformerConfig {
  int modulus = 113;
  std::size_t d_model = 128;
  std::size_t heads = 4;
  std::size_t d_mlp = 512;
  bool layer_norm = false;
  CapturePoint capture = CapturePoint::post_attention;

  std::size_t vocab() const { return static_cast<std::size_t>(modulus) + 1; }
  int equals_token() const { return modulus; }
  static constexpr std::size_t kSequence = 3;
};

struct MlpModel {
  MlpConfig config;
  std::vector<Tensor> weights;  // [in x out] per layer
  std::vector<Tensor> biases;

  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      out.push_back({"layer" + std::to_string(i) + ".weight", weights[i]});
      out.push_back({"layer" + std::to_string(i) + ".bias", biases[i]});
    }
    return out;
  }
};

struct TransformerModel {
  TransformerConfig config;
  Tensor embed;       // vocab x d
  Tensor pos_embed;   // 3 x d
  Tensor query, key, value, attn_out;  // d x d; head h owns columns [h*hd, (h+1)*hd)
  Tensor mlp_in, mlp_in_bias, mlp_out, mlp_out_bias;
  Tensor unembed;     // d x P
  Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;  // only when config.layer_norm

  std::vector<NamedTensor> named_parameters() const {
    std::vector<NamedTensor> out{{"embed", embed},       {"pos_embed", pos_embed},
                                 {"attn.query", query},  {"attn.key", key},
                                 {"attn.value", value},  {"attn.out", attn_out},
                                 {"mlp.in", mlp_in},     {"mlp.in_bias", mlp_in_bias},
                                 {"mlp.out", mlp_out},   {"mlp.out_bias", mlp_out_bias},
                                 {"unembed", unembed}};
    if (config.layer_norm) {
      out.push_back({"ln1.gain", ln1_gain});
      out.push_back({"ln1.bias", ln1_bias});
      out.push_back({"ln2.gain", ln2_gain});
      out.push_back({"ln2.bias", ln2_bias});
    }
    return out;
  }
};

using Model = std::variant<MlpModel, TransformerModel>;

inline ModelKind kind_of(const Model& model) {
  return std::holds_alternative<MlpModel>(model) ? ModelKind::mlp : ModelKind::transformer;
}

inline std::vector<NamedTensor> named_parameters(const Model& model) {
  return std::visit([](const auto& m) { return m.named_parameters(); }, model);
}

inline std::vector<Tensor> parameters(const Model& model) {
  std::vector<Tensor> out;
  for (auto& p : named_parameters(model)) out.push_back(p.value);
  return out;
}

/// Deep copy of every parameter; the copy shares no storage with `model`.
inline Model clone_model(const Model& model) {
  return std::visit(
      [](const auto& m) -> Model {
        auto copy = m;
        using T = std::decay_t<decltype(m)>;
        if constexpr (std::is_same_v<T, MlpModel>) {
          for (auto& w : copy.weights) w = w.clone(true);
          for (auto& b : copy.biases) b = b.clone(true);
        } else {
          for (Tensor* t : {&copy.embed, &copy.pos_embed, &copy.query, &copy.key, &copy.value,
                            &copy.attn_out, &copy.mlp_in, &copy.mlp_in_bias, &copy.mlp_out,
                            &copy.mlp_out_bias, &copy.unembed, &copy.ln1_gain, &copy.ln1_bias,
                            &copy.ln2_gain, &copy.ln2_bias}) {
            if (t->defined()) *t = t->clone(true);
          }
        }
        return copy;
      },
      model);
}

namespace detail {

// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) scaled by init_scale: the
// Kaiming-uniform rule (negative slope sqrt(5)) used by common Linear layers.
inline Tensor kaiming_uniform(Rng& rng, std::size_t rows, std::size_t cols, std::size_t fan_in,
                              double init_scale) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> values(rows * cols);
  for (double& v : values) v = dist(rng) * init_scale;
  return Tensor({rows, cols}, std::move(values), true);
}

inline Tensor filled(Shape shape, double value) {
  std::vector<double> values(shape_size(shape), value);
  return Tensor(std::move(shape), std::move(values), true);
}

}  // namespace detail

inline MlpModel init_mlp(const MlpConfig& config, std::uint64_t seed, double init_scale) {
  if (config.widths.size() < 2) throw ConfigError("MLP needs at least input and output widths");
  if (init_scale < 0.0) throw ConfigError("init_scale must be nonnegative");
  MlpModel model;
  model.config = config;
  Rng rng(derive_seed(seed, streams::kInit));
  for (std::size_t i = 0; i + 1 < config.widths.size(); ++i) {
    const std::size_t in = config.widths[i], out = config.widths[i + 1];
    model.weights.push_back(detail::kaiming_uniform(rng, in, out, in, init_scale));
    model.biases.push_back(Tensor::zeros({out}, true));
  }
  return model;
}

inline TransformerModel init_transformer(const TransformerConfig& config, std::uint64_t seed,
                                         double init_scale) {
  if (config.modulus < 2) throw ConfigError("modulus must be at least 2");
  if (config.heads == 0 || config.d_model % config.heads != 0) {
    throw ConfigError("d_model " + std::to_string(config.d_model) + " is not divisible by " +
                      std::to_string(config.heads) + " heads");
  }
  if (init_scale < 0.0) throw ConfigError("init_scale must be nonnegative");
  TransformerModel m;
  m.config = config;
  Rng rng(derive_seed(seed, streams::kInit));
  const std::size_t d = config.d_model, P = static_cast<std::size_t>(config.modulus);
  m.embed = detail::kaiming_uniform(rng, config.vocab(), d, d, init_scale);
  m.pos_embed = detail::kaiming_uniform(rng, TransformerConfig::kSequence, d, d, init_scale);
  m.query = detail::kaiming_uniform(rng, d, d, d, init_scale);
  m.key = detail::kaiming_uniform(rng, d, d, d, init_scale);
  m.value = detail::kaiming_uniform(rng, d, d, d, init_scale);
  m.attn_out = detail::kaiming_uniform(rng, d, d, d, init_scale);
  m.mlp_in = detail::kaiming_uniform(rng, d, config.d_mlp, d, init_scale);
  m.mlp_in_bias = Tensor::zeros({config.d_mlp}, true);
  m.mlp_out = detail::kaiming_uniform(rng, config.d_mlp, d, config.d_mlp, init_scale);
  m.mlp_out_bias = Tensor::zeros({d}, true);
  m.unembed = detail::kaiming_uniform(rng, d, P, d, init_scale);
  if (config.layer_norm) {
    m.ln1_gain = detail::filled({d}, 1.0);
    m.ln1_bias = Tensor::zeros({d}, true);
    m.ln2_gain = detail::filled({d}, 1.0);
    m.ln2_bias = Tensor::zeros({d}, true);
  }
  return m;
}

/// Default-shaped model of the given kind.
inline Model init_model(ModelKind kind, std::uint64_t seed, double init_scale) {
  if (kind == ModelKind::mlp) return init_mlp(MlpConfig{}, seed, init_scale);
  return init_transformer(TransformerConfig{}, seed, init_scale);
}

/// Output scores plus the first-layer activation from the same pass.
struct ForwardCapture {
  Tensor first_layer_features;
  Tensor output_features;
};

inline ForwardCapture mlp_forward(Tape& tape, const MlpModel& model, const Tensor& images) {
  detail::require_rank("mlp_forward", images, 2);
  if (images.cols() != model.config.widths.front()) {
    throw ShapeError("mlp_forward: expected " + std::to_string(model.config.widths.front()) +
                     " input features, got " + shape_string(images.shape()));
  }
  ForwardCapture capture;
  Tensor h = images;
  for (std::size_t i = 0; i < model.weights.size(); ++i) {
    h = add_row_vector(tape, matmul(tape, h, model.weights[i]), model.biases[i]);
    if (i + 1 < model.weights.size()) {
      h = relu(tape, h);
      if (i == 0) capture.first_layer_features = h;
    }
  }
  if (!capture.first_layer_features.defined()) capture.first_layer_features = images;
  capture.output_features = h;
  return capture;
}

/// Token ids [a, b, "="] for every pair, flattened.
inline std::vector<std::size_t> transformer_tokens(const TransformerConfig& config,
                                                   std::span<const TokenPair> pairs) {
  std::vector<std::size_t> ids;
  ids.reserve(pairs.size() * 3);
  for (const auto& [a, b] : pairs) {
    if (a < 0 || b < 0 || a >= config.modulus || b >= config.modulus) {
      throw RangeError("token pair (" + std::to_string(a) + ", " + std::to_string(b) +
                       ") outside [0, " + std::to_string(config.modulus) + ")");
    }
    ids.push_back(static_cast<std::size_t>(a));
    ids.push_back(static_cast<std::size_t>(b));
    ids.push_back(static_cast<std::size_t>(config.equals_token()));
  }
  return ids;
}

/// Embeds "a b =", applies one attention block and one MLP block residually,
/// and reads logits at the "=" position. `embed_noise` (B*3*d values, any
/// shape) is added to the embedding sum. Only the "=" query is evaluated,
/// since no later layer reads the other positions.
inline ForwardCapture transformer_forward(Tape& tape, const TransformerModel& model,
                                          std::span<const TokenPair> pairs,
                                          const Tensor* embed_noise = nullptr) {
  const auto& cfg = model.config;
  if (pairs.empty()) throw ShapeError("transformer_forward: empty batch");
  const std::size_t batch = pairs.size(), d = cfg.d_model, T = TransformerConfig::kSequence;
  auto ids = transformer_tokens(cfg, pairs);

  Tensor stream = take_rows(tape, model.embed, ids);
  stream = reshape(tape, stream, {batch, T * d});
  stream = add_row_vector(tape, stream, model.pos_embed);
  if (embed_noise) {
    if (embed_noise->size() != batch * T * d) {
      throw ShapeError("transformer_forward: embed noise " + shape_string(embed_noise->shape()) +
                       " does not match batch " + std::to_string(batch) + " x 3 x " +
                       std::to_string(d));
    }
    stream = add(tape, stream, reshape(tape, *embed_noise, {batch, T * d}));
  }
  Tensor embedded = stream;
  stream = reshape(tape, stream, {batch * T, d});

  std::vector<std::size_t> last(batch);
  for (std::size_t b = 0; b < batch; ++b) last[b] = b * T + (T - 1);

  Tensor attn_in = cfg.layer_norm ? layer_norm_rows(tape, stream, model.ln1_gain, model.ln1_bias) : stream;
  Tensor keys = matmul(tape, attn_in, model.key);
  Tensor values = matmul(tape, attn_in, model.value);
  Tensor queries = matmul(tape, take_rows(tape, attn_in, last), model.query);
  const double scale_factor = 1.0 / std::sqrt(static_cast<double>(d / cfg.heads));
  Tensor weights = softmax_rows(tape, head_scores(tape, queries, keys, cfg.heads, T, scale_factor));
  Tensor attended = matmul(tape, head_mix(tape, weights, values, cfg.heads), model.attn_out);
  Tensor resid = add(tape, take_rows(tape, stream, last), attended);

  Tensor mlp_in = cfg.layer_norm ? layer_norm_rows(tape, resid, model.ln2_gain, model.ln2_bias) : resid;
  Tensor hidden = relu(tape, add_row_vector(tape, matmul(tape, mlp_in, model.mlp_in), model.mlp_in_bias));
  Tensor mlp_out = add_row_vector(tape, matmul(tape, hidden, model.mlp_out), model.mlp_out_bias);
  Tensor final_resid = add(tape, resid, mlp_out);

  ForwardCapture capture;
  switch (cfg.capture) {
    case CapturePoint::embedding: capture.first_layer_features = embedded; break;
    case CapturePoint::post_attention: capture.first_layer_features = resid; break;
    case CapturePoint::post_block: capture.first_layer_features = final_resid; break;
  }
  capture.output_features = matmul(tape, final_resid, model.unembed);
  return capture;
}

/// Width of the per-example input vector that perturbations act on: pixels
/// for the MLP, the three stacked embeddings for the transformer.
inline std::size_t input_width(const Model& model) {
  if (const auto* mlp = std::get_if<MlpModel>(&model)) return mlp->config.widths.front();
  const auto& t = std::get<TransformerModel>(model);
  return TransformerConfig::kSequence * t.config.d_model;
}

/// Dispatches on the model kind. `input_noise` is [B x input_width(model)]
/// and is added to pixels or embeddings.
inline ForwardCapture forward(Tape& tape, const Model& model, const Samples& samples,
                              const Tensor* input_noise = nullptr) {
  if (const auto* mlp = std::get_if<MlpModel>(&model)) {
    if (samples.kind != TaskKind::mnist) throw ConfigError("the MLP consumes image samples");
    Tensor images({samples.size(), samples.image_width}, samples.images);
    if (input_noise) {
      if (input_noise->size() != images.size()) {
        throw ShapeError("input noise " + shape_string(input_noise->shape()) +
                         " does not match images " + shape_string(images.shape()));
      }
      images = add(tape, images, reshape(tape, *input_noise, images.shape()));
    }
    return mlp_forward(tape, *mlp, images);
  }
  if (samples.kind != TaskKind::modadd) throw ConfigError("the transformer consumes token pairs");
  return transformer_forward(tape, std::get<TransformerModel>(model), samples.pairs, input_noise);
}

}  // namespace groklab
