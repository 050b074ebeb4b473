#pragma once

// Run directories: dataset and model construction from a config, training
// with JSONL logging and checkpoints, resume, and offline metric evaluation.
//
//   <output_dir>/config.json          resolved configuration
//   <output_dir>/log.jsonl            metric log
//   <output_dir>/checkpoints/*.grkl   model + optimizer state
//   <output_dir>/.lock                held by the single writer

#include <cerrno>
#include <csignal>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/types.h>
#include <unistd.h>

#include "groklab/checkpoint.hpp"
#include "groklab/config.hpp"
#include "groklab/data.hpp"
#include "groklab/error.hpp"
#include "groklab/models.hpp"
#include "groklab/runlog.hpp"
#include "groklab/training.hpp"

namespace groklab {

namespace fs = std::filesystem;

struct TaskData {
  Samples train;
  Samples test;
};

inline constexpr const char* kMnistTrainImages = "train-images-idx3-ubyte";
inline constexpr const char* kMnistTrainLabels = "train-labels-idx1-ubyte";
inline constexpr const char* kMnistTestImages = "t10k-images-idx3-ubyte";
inline constexpr const char* kMnistTestLabels = "t10k-labels-idx1-ubyte";

/// data.mnist_dir, else $GROKLAB_DATA_DIR, else "data".
inline std::string mnist_directory(const DataSettings& data) {
  if (!data.mnist_dir.empty()) return data.mnist_dir;
  if (const char* env = std::getenv("GROKLAB_DATA_DIR"); env && *env) return env;
  return "data";
}

/// Checks that every file the run will read exists.
inline void validate_paths(const ExperimentConfig& c) {
  if (c.train.task != TaskKind::mnist) return;
  const fs::path dir = mnist_directory(c.data);
  for (const char* name : {kMnistTrainImages, kMnistTrainLabels, kMnistTestImages, kMnistTestLabels}) {
    if (!fs::is_regular_file(dir / name)) {
      throw ConfigError("MNIST file " + (dir / name).string() + " not found (set data.mnist_dir or GROKLAB_DATA_DIR)");
    }
  }
}

inline TaskData load_task_data(const ExperimentConfig& c) {
  validate_paths(c);
  if (c.train.task == TaskKind::modadd) {
    auto ds = generate_modadd(c.data.modulus, c.data.train_fraction, c.train.data_seed);
    return {ds.train(), ds.test()};
  }
  const fs::path dir = mnist_directory(c.data);
  auto train = load_mnist((dir / kMnistTrainImages).string(), (dir / kMnistTrainLabels).string(),
                          c.data.train_count, c.train.data_seed);
  auto test = load_mnist((dir / kMnistTestImages).string(), (dir / kMnistTestLabels).string(), 0,
                         c.train.data_seed);
  Samples test_samples = test.all();
  if (c.data.test_count > 0 && c.data.test_count < test_samples.size()) {
    test_samples = test_samples.slice(0, c.data.test_count);
  }
  return {train.train(), std::move(test_samples)};
}

inline Model build_model(const ExperimentConfig& c) {
  if (c.train.task == TaskKind::mnist) {
    MlpConfig mc;
    mc.widths = c.model.widths;
    return init_mlp(mc, c.init_seed, c.model.init_scale);
  }
  TransformerConfig tc;
  tc.modulus = c.data.modulus;
  tc.d_model = c.model.d_model;
  tc.heads = c.model.heads;
  tc.d_mlp = c.model.d_mlp;
  tc.layer_norm = c.model.layer_norm;
  tc.capture = c.model.capture;
  return init_transformer(tc, c.init_seed, c.model.init_scale);
}

// ---------------------------------------------------------------------------
// Trainer checkpoints

/// Model parameters plus optimizer moments and loop position.
inline Checkpoint trainer_checkpoint(const TrainerState& s) {
  Checkpoint ckpt = model_checkpoint(s.model);
  auto named = named_parameters(s.model);
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto& shape = named[i].value.shape();
    ckpt.tensors.push_back({"optim.m." + named[i].name, Tensor(shape, s.optimizer.first_moment[i])});
    ckpt.tensors.push_back({"optim.v." + named[i].name, Tensor(shape, s.optimizer.second_moment[i])});
  }
  ckpt.tensors.push_back({"state.step", Tensor::scalar(static_cast<double>(s.step))});
  ckpt.tensors.push_back({"state.adam_t", Tensor::scalar(static_cast<double>(s.optimizer.t))});
  ckpt.tensors.push_back({"state.train_acc", Tensor::scalar(s.last_train_acc)});
  return ckpt;
}

inline std::uint64_t checkpoint_step(const Checkpoint& ckpt) {
  const Tensor* t = ckpt.find("state.step");
  return t ? static_cast<std::uint64_t>(t->item()) : 0;
}

/// Restores model, optimizer and loop position into `state`, whose model
/// must already have the checkpoint's architecture.
inline void restore_trainer(TrainerState& state, const Checkpoint& ckpt) {
  load_parameters(state.model, ckpt);
  auto named = named_parameters(state.model);
  for (std::size_t i = 0; i < named.size(); ++i) {
    for (auto [prefix, dst] : {std::pair{"optim.m.", &state.optimizer.first_moment[i]},
                               std::pair{"optim.v.", &state.optimizer.second_moment[i]}}) {
      const Tensor* t = ckpt.find(prefix + named[i].name);
      if (!t) throw FormatError(std::string("checkpoint lacks ") + prefix + named[i].name);
      if (t->size() != dst->size()) throw ShapeError(std::string("checkpoint ") + prefix + named[i].name + " has wrong size");
      dst->assign(t->data().begin(), t->data().end());
    }
  }
  auto scalar = [&](const char* name) {
    const Tensor* t = ckpt.find(name);
    if (!t) throw FormatError(std::string("checkpoint lacks ") + name);
    return t->item();
  };
  state.step = static_cast<std::uint64_t>(scalar("state.step"));
  state.optimizer.t = static_cast<std::uint64_t>(scalar("state.adam_t"));
  state.last_train_acc = scalar("state.train_acc");
}

// ---------------------------------------------------------------------------
// Run directory

struct RunPaths {
  fs::path root;
  fs::path config() const { return root / "config.json"; }
  fs::path log() const { return root / "log.jsonl"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path lock() const { return root / ".lock"; }
  fs::path checkpoint(std::uint64_t step) const {
    char name[32];
    std::snprintf(name, sizeof name, "step_%010llu.grkl", static_cast<unsigned long long>(step));
    return checkpoints() / name;
  }
};

/// Newest checkpoint by step, if any.
inline std::optional<fs::path> latest_checkpoint(const RunPaths& paths) {
  if (!fs::is_directory(paths.checkpoints())) return std::nullopt;
  std::optional<fs::path> best;
  for (const auto& entry : fs::directory_iterator(paths.checkpoints())) {
    const auto name = entry.path().filename().string();
    if (name.rfind("step_", 0) != 0 || entry.path().extension() != ".grkl") continue;
    if (!best || name > best->filename().string()) best = entry.path();
  }
  return best;
}

/// Exclusive writer lock on a run directory. A lock left by a process that
/// no longer exists is taken over.
class RunLock {
 public:
  explicit RunLock(fs::path path) : path_(std::move(path)) {
    for (int attempt = 0; attempt < 2; ++attempt) {
      int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        const std::string pid = std::to_string(::getpid()) + "\n";
        if (::write(fd, pid.data(), pid.size()) < 0) {
          ::close(fd);
          throw FormatError("cannot write lock file " + path_.string());
        }
        ::close(fd);
        held_ = true;
        return;
      }
      if (errno != EEXIST) throw FormatError("cannot create lock file " + path_.string());
      long owner = 0;
      std::ifstream(path_) >> owner;
      if (owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno != ESRCH)) {
        throw ConfigError("run directory is locked by process " + std::to_string(owner) + " (" + path_.string() + ")");
      }
      fs::remove(path_);
    }
    throw ConfigError("could not acquire " + path_.string());
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    if (held_) {
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }

 private:
  fs::path path_;
  bool held_ = false;
};

struct TrainOutcome {
  RunPaths paths;
  std::uint64_t resumed_from = 0;  // 0 for a fresh run
  bool resumed = false;
  std::uint64_t final_step = 0;
};

/// Trains into config.output_dir, resuming from its newest checkpoint when
/// one exists. Log records past the resumed step are discarded first, so
/// an interrupted and resumed run writes the same log as an uninterrupted one.
inline TrainOutcome train_experiment(const ExperimentConfig& config,
                                     const std::function<void(const MetricRecord&)>& progress = {}) {
  config.train.validate();
  TaskData data = load_task_data(config);
  RunPaths paths{config.output_dir};
  fs::create_directories(paths.checkpoints());
  RunLock lock(paths.lock());

  TrainOutcome outcome;
  outcome.paths = paths;
  TrainerState state = fresh_trainer(build_model(config), config.train);
  if (auto latest = latest_checkpoint(paths)) {
    Checkpoint ckpt = read_checkpoint(latest->string());
    restore_trainer(state, ckpt);
    outcome.resumed = true;
    outcome.resumed_from = state.step;
    if (state.step == 0) {
      fs::remove(paths.log());
    } else if (fs::exists(paths.log())) {
      truncate_runlog(paths.log().string(), state.step);
    }
  } else if (fs::exists(paths.log())) {
    fs::remove(paths.log());
  }
  {
    std::ofstream out(paths.config(), std::ios::trunc);
    out << config_to_json(config).dump(2) << '\n';
    if (!out) throw FormatError("cannot write " + paths.config().string());
  }

  RunLogWriter writer(paths.log().string());
  RunHooks hooks;
  hooks.on_record = [&](const MetricRecord& rec) {
    writer.append(rec);
    if (progress) progress(rec);
  };
  hooks.on_checkpoint = [&](const TrainerState& s) {
    write_checkpoint(paths.checkpoint(s.step).string(), trainer_checkpoint(s));
  };
  if (state.step < config.train.steps || !outcome.resumed) {
    run_training(config.train, state, data.train, data.test, hooks);
  }
  outcome.final_step = state.step;
  return outcome;
}

/// Evaluates the configured metrics on a stored checkpoint. The record's
/// step is the checkpoint's training step.
inline MetricRecord checkpoint_metrics(const ExperimentConfig& config, const std::string& checkpoint_path) {
  TaskData data = load_task_data(config);
  Model model = build_model(config);
  Checkpoint ckpt = read_checkpoint(checkpoint_path);
  load_parameters(model, ckpt);
  return evaluate_record(model, checkpoint_step(ckpt), data.train, data.test, config.train.metrics);
}

}  // namespace groklab
