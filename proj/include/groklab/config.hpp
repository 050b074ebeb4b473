#pragma once

// Experiment configuration as a JSON document with nested tables. Defaults
// depend on the task; file values override them and `key=value` overrides
// apply last. Unknown keys are rejected by their full dotted path.

#include <cstdint>
#include <cstdlib>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "groklab/data.hpp"
#include "groklab/error.hpp"
#include "groklab/metrics.hpp"
#include "groklab/models.hpp"
#include "groklab/training.hpp"

namespace groklab {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

struct ModelSettings {
  double init_scale = 1.0;
  std::vector<std::size_t> widths{784, 200, 200, 10};  // MLP
  std::size_t d_model = 128;
  std::size_t heads = 4;
  std::size_t d_mlp = 512;
  bool layer_norm = false;
  CapturePoint capture = CapturePoint::post_attention;
};

struct DataSettings {
  int modulus = 113;
  double train_fraction = 0.3;
  std::string mnist_dir;          // empty: $GROKLAB_DATA_DIR
  std::size_t train_count = 1000;
  std::size_t test_count = 0;     // 0: the whole test file
};

struct ExperimentConfig {
  TrainConfig train;
  std::uint64_t init_seed = 0;
  ModelSettings model;
  DataSettings data;
  std::string output_dir = "runs/default";
};

inline const char* task_name(TaskKind t) { return t == TaskKind::mnist ? "mnist" : "modadd"; }

inline const char* capture_name(CapturePoint c) {
  switch (c) {
    case CapturePoint::embedding: return "embedding";
    case CapturePoint::post_attention: return "post_attention";
    case CapturePoint::post_block: return "post_block";
  }
  return "?";
}

inline std::set<std::string> default_metrics(TaskKind task) {
  std::set<std::string> m{"weight_l2", "weight_l1", "perturb_err", "pmi", "pe", "mid", "ed", "pmi_labels"};
  if (task == TaskKind::modadd) {
    m.insert({"abelian_acc_train", "abelian_acc_test", "abelian_logit_dist"});
  }
  return m;
}

/// Task-specific defaults before any file or override is applied.
inline ExperimentConfig default_config(TaskKind task) {
  ExperimentConfig c;
  c.train.task = task;
  c.train.metrics.enabled = default_metrics(task);
  if (task == TaskKind::mnist) {
    c.train.weight_decay = 0.01;
    c.train.batch_size = 200;
    c.train.lambda1 = 0.06;
    c.train.lambda2 = 0.03;
    c.train.metrics.info_sigma = 0.1;
    c.model.init_scale = 8.0;
  }
  c.output_dir = std::string("runs/") + task_name(task);
  return c;
}

namespace detail {

/// Reads keys from one JSON object and remembers which were consumed.
class ObjectReader {
 public:
  ObjectReader(const Json& object, std::string prefix) : object_(object), prefix_(std::move(prefix)) {
    if (!object_.is_object()) throw ConfigError("config key '" + where() + "' must be a table");
  }

  template <typename T>
  void read(const char* key, T& out) {
    auto it = object_.find(key);
    if (it == object_.end()) return;
    seen_.insert(key);
    try {
      out = convert<T>(*it, key);
    } catch (const Json::exception& e) {
      throw ConfigError("config key '" + path(key) + "': " + e.what());
    }
  }

  const Json* table(const char* key) {
    auto it = object_.find(key);
    if (it == object_.end()) return nullptr;
    seen_.insert(key);
    return &*it;
  }

  std::string path(const std::string& key) const { return prefix_.empty() ? key : prefix_ + "." + key; }

  /// Throws on the first key that no read() or table() call consumed.
  void finish() const {
    for (auto it = object_.begin(); it != object_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + path(it.key()) + "'");
    }
  }

 private:
  std::string where() const { return prefix_.empty() ? "<root>" : prefix_; }

  template <typename T>
  T convert(const Json& v, const char* key) const {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError("config key '" + path(key) + "' must be a boolean");
      return v.get<bool>();
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError("config key '" + path(key) + "' must be an integer");
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() && v.get<std::int64_t>() < 0) {
        throw ConfigError("config key '" + path(key) + "' must be nonnegative");
      }
      return v.get<T>();
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError("config key '" + path(key) + "' must be a number");
      return v.get<T>();
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError("config key '" + path(key) + "' must be a string");
      return v.get<std::string>();
    } else {
      return v.get<T>();
    }
  }

  const Json& object_;
  std::string prefix_;
  std::set<std::string> seen_;
};

inline TaskKind parse_task(const std::string& s) {
  if (s == "modadd") return TaskKind::modadd;
  if (s == "mnist") return TaskKind::mnist;
  throw ConfigError("config key 'task': unknown task '" + s + "' (expected modadd or mnist)");
}

inline Strategy parse_strategy(const std::string& s) {
  if (s == "standard") return Strategy::standard;
  if (s == "perturb") return Strategy::perturb;
  if (s == "abelian") return Strategy::abelian;
  throw ConfigError("config key 'strategy': unknown strategy '" + s + "'");
}

inline CapturePoint parse_capture(const std::string& s) {
  if (s == "embedding") return CapturePoint::embedding;
  if (s == "post_attention") return CapturePoint::post_attention;
  if (s == "post_block") return CapturePoint::post_block;
  throw ConfigError("config key 'model.capture': unknown capture point '" + s + "'");
}

/// Sets `path` (dot separated) in `doc` to `value`, creating tables as needed.
inline void set_path(Json& doc, const std::string& path, Json value) {
  Json* node = &doc;
  std::size_t start = 0;
  while (true) {
    auto dot = path.find('.', start);
    std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty()) throw ConfigError("malformed override key '" + path + "'");
    if (!node->is_object()) throw ConfigError("override key '" + path + "' descends into a non-table");
    if (dot == std::string::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    node = &(*node)[key];
    if (node->is_null()) *node = Json::object();
    start = dot + 1;
  }
}

}  // namespace detail

/// Applies one `key=value` override. The value is parsed as JSON when it
/// can be, otherwise taken as a string.
inline void apply_override(Json& doc, const std::string& assignment) {
  auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;
  detail::set_path(doc, key, std::move(value));
}

/// Resolves a configuration document into typed settings.
inline ExperimentConfig config_from_json(const Json& doc) {
  if (!doc.is_object()) throw ConfigError("config document must be a JSON object");
  TaskKind task = TaskKind::modadd;
  if (auto it = doc.find("task"); it != doc.end()) {
    if (!it->is_string()) throw ConfigError("config key 'task' must be a string");
    task = detail::parse_task(it->get<std::string>());
  }
  ExperimentConfig c = default_config(task);
  auto& t = c.train;
  detail::ObjectReader root(doc, "");
  std::string task_text = task_name(task), strategy_text = strategy_name(t.strategy);
  root.read("task", task_text);
  root.read("strategy", strategy_text);
  t.strategy = detail::parse_strategy(strategy_text);
  root.read("steps", t.steps);
  root.read("batch_size", t.batch_size);
  root.read("learning_rate", t.learning_rate);
  root.read("weight_decay", t.weight_decay);
  root.read("beta1", t.beta1);
  root.read("beta2", t.beta2);
  root.read("adam_eps", t.adam_eps);
  root.read("lambda1", t.lambda1);
  root.read("lambda2", t.lambda2);
  root.read("abelian_coeff", t.abelian_coeff);
  root.read("init_seed", c.init_seed);
  root.read("data_seed", t.data_seed);
  root.read("noise_seed", t.noise_seed);
  root.read("log_every", t.log_every);
  root.read("checkpoint_every", t.checkpoint_every);
  root.read("output_dir", c.output_dir);

  if (const Json* m = root.table("model")) {
    detail::ObjectReader r(*m, "model");
    std::string capture = capture_name(c.model.capture);
    r.read("init_scale", c.model.init_scale);
    r.read("widths", c.model.widths);
    r.read("d_model", c.model.d_model);
    r.read("heads", c.model.heads);
    r.read("d_mlp", c.model.d_mlp);
    r.read("layer_norm", c.model.layer_norm);
    r.read("capture", capture);
    c.model.capture = detail::parse_capture(capture);
    r.finish();
  }
  if (const Json* d = root.table("data")) {
    detail::ObjectReader r(*d, "data");
    r.read("modulus", c.data.modulus);
    r.read("train_fraction", c.data.train_fraction);
    r.read("mnist_dir", c.data.mnist_dir);
    r.read("train_count", c.data.train_count);
    r.read("test_count", c.data.test_count);
    r.finish();
  }
  if (const Json* m = root.table("metrics")) {
    detail::ObjectReader r(*m, "metrics");
    auto& s = t.metrics;
    std::vector<std::string> enabled(s.enabled.begin(), s.enabled.end());
    r.read("enabled", enabled);
    s.enabled = {enabled.begin(), enabled.end()};
    r.read("perturb_sigma", s.perturb_sigma);
    r.read("info_sigma", s.info_sigma);
    r.read("alpha", s.alpha);
    r.read("batch_size", s.batch_size);
    r.read("sharpness_probes", s.sharpness_probes);
    r.read("sharpness_eps", s.sharpness_eps);
    r.read("seed", s.seed);
    r.finish();
  }
  root.finish();

  for (const auto& name : t.metrics.enabled) {
    if (!is_metric_name(name)) throw ConfigError("config key 'metrics.enabled': unknown metric '" + name + "'");
    if (is_abelian_metric(name) && task != TaskKind::modadd) {
      throw ConfigError("config key 'metrics.enabled': metric '" + name + "' needs the modadd task");
    }
  }
  if (!(c.data.train_fraction > 0.0 && c.data.train_fraction < 1.0)) {
    throw ConfigError("config key 'data.train_fraction' must lie in (0, 1)");
  }
  if (!(c.model.init_scale >= 0.0)) throw ConfigError("config key 'model.init_scale' must be nonnegative");
  if (c.output_dir.empty()) throw ConfigError("config key 'output_dir' must not be empty");
  t.validate();
  return c;
}

/// Every setting, fully resolved, in a stable key order.
inline OrderedJson config_to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  OrderedJson doc;
  doc["task"] = task_name(t.task);
  doc["strategy"] = strategy_name(t.strategy);
  doc["steps"] = t.steps;
  doc["batch_size"] = t.batch_size;
  doc["learning_rate"] = t.learning_rate;
  doc["weight_decay"] = t.weight_decay;
  doc["beta1"] = t.beta1;
  doc["beta2"] = t.beta2;
  doc["adam_eps"] = t.adam_eps;
  doc["lambda1"] = t.lambda1;
  doc["lambda2"] = t.lambda2;
  doc["abelian_coeff"] = t.abelian_coeff;
  doc["init_seed"] = c.init_seed;
  doc["data_seed"] = t.data_seed;
  doc["noise_seed"] = t.noise_seed;
  doc["log_every"] = t.log_every;
  doc["checkpoint_every"] = t.checkpoint_every;
  doc["output_dir"] = c.output_dir;
  auto& m = doc["model"];
  m["init_scale"] = c.model.init_scale;
  m["widths"] = c.model.widths;
  m["d_model"] = c.model.d_model;
  m["heads"] = c.model.heads;
  m["d_mlp"] = c.model.d_mlp;
  m["layer_norm"] = c.model.layer_norm;
  m["capture"] = capture_name(c.model.capture);
  auto& d = doc["data"];
  d["modulus"] = c.data.modulus;
  d["train_fraction"] = c.data.train_fraction;
  d["mnist_dir"] = c.data.mnist_dir;
  d["train_count"] = c.data.train_count;
  d["test_count"] = c.data.test_count;
  auto& s = doc["metrics"];
  s["enabled"] = std::vector<std::string>(t.metrics.enabled.begin(), t.metrics.enabled.end());
  s["perturb_sigma"] = t.metrics.perturb_sigma;
  s["info_sigma"] = t.metrics.info_sigma;
  s["alpha"] = t.metrics.alpha;
  s["batch_size"] = t.metrics.batch_size;
  s["sharpness_probes"] = t.metrics.sharpness_probes;
  s["sharpness_eps"] = t.metrics.sharpness_eps;
  s["seed"] = t.metrics.seed;
  return doc;
}

inline Json read_json_file(const std::string& path) {
  auto bytes = detail::read_file_bytes(path);
  Json doc = Json::parse(bytes.begin(), bytes.end(), nullptr, false);
  if (doc.is_discarded()) throw FormatError(path + ": not valid JSON");
  return doc;
}

/// Loads a config file (or starts from an empty document when `path` is
/// empty) and applies overrides in order.
inline ExperimentConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  Json doc = path.empty() ? Json::object() : read_json_file(path);
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

}  // namespace groklab
