#pragma once

#include <span>
#include <vector>

#include "groklab/data.hpp"
#include "groklab/tensor.hpp"

namespace groklab {

/// (1 / 2B) * sum_i || scores_i - onehot(label_i) ||^2
inline Tensor mse_onehot_loss(Tape& tape, const Tensor& scores, std::span<const int> labels) {
  detail::require_rank("mse_onehot_loss", scores, 2);
  const std::size_t batch = scores.rows(), classes = scores.cols();
  if (labels.size() != batch) throw ShapeError("mse_onehot_loss: label count does not match batch");
  std::vector<double> onehot(batch * classes, 0.0);
  for (std::size_t i = 0; i < batch; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw RangeError("label " + std::to_string(labels[i]) + " out of range [0, " +
                       std::to_string(classes) + ")");
    }
    onehot[i * classes + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  Tensor target({batch, classes}, std::move(onehot));
  return scale(tape, sum_squares(tape, sub(tape, scores, target)), 0.5 / static_cast<double>(batch));
}

/// Mean negative log-likelihood of the labels under softmax(logits).
inline Tensor cross_entropy_loss(Tape& tape, const Tensor& logits, std::span<const int> labels) {
  Tensor picked = pick(tape, log_softmax_rows(tape, logits), labels);
  return scale(tape, sum(tape, picked), -1.0 / static_cast<double>(logits.rows()));
}

/// MSE against one-hot targets for MNIST, cross-entropy for modular addition.
inline Tensor task_loss(Tape& tape, TaskKind task, const Tensor& outputs, std::span<const int> labels) {
  return task == TaskKind::mnist ? mse_onehot_loss(tape, outputs, labels)
                                 : cross_entropy_loss(tape, outputs, labels);
}

}  // namespace groklab
