#pragma once

// Loss, SGD with momentum, cosine schedule, and classification/segmentation metrics.

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "cpt/params.hpp"

namespace cpt {

/// Velocity buffers, one per parameter tensor, created on first use.
template <typename T>
struct SgdState {
  std::vector<std::vector<T>> velocity;
};

/// Classical momentum on raw buffers: v ← μ·v + g; θ ← θ − lr·v.
template <typename T>
void sgd_momentum_step(std::span<T> theta, std::span<const T> grad, std::span<T> velocity, double lr,
                       double momentum) {
  if (theta.size() != grad.size() || theta.size() != velocity.size())
    throw DimensionError("sgd_momentum_step: parameter, gradient and velocity sizes differ (" +
                         std::to_string(theta.size()) + ", " + std::to_string(grad.size()) + ", " +
                         std::to_string(velocity.size()) + ")");
  const T mu = static_cast<T>(momentum), eta = static_cast<T>(lr);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    velocity[i] = mu * velocity[i] + grad[i];
    theta[i] -= eta * velocity[i];
  }
}

/// One step over every parameter in the store, using the gradients it holds.
/// Tensors that never received a gradient are treated as having g = 0.
template <typename T>
void sgd_momentum_step(ParamStore<T>& params, SgdState<T>& state, double lr, double momentum) {
  if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
  if (state.velocity.empty()) {
    state.velocity.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) state.velocity[i].assign(params.at(i).numel(), T(0));
  }
  if (state.velocity.size() != params.size())
    throw DimensionError("sgd_momentum_step: optimizer state built for a different parameter set");
  std::vector<T> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.at(i);
    std::span<const T> g;
    if (p.has_grad()) {
      g = p.grad();
    } else {
      zeros.assign(p.numel(), T(0));
      g = zeros;
    }
    sgd_momentum_step(p.mutable_data(), g, std::span<T>(state.velocity[i]), lr, momentum);
  }
}

/// lr_min + ½(lr0 − lr_min)(1 + cos(π·epoch/total)); both endpoints are returned exactly.
inline double cosine_lr(std::size_t epoch, std::size_t total_epochs, double lr0, double lr_min) {
  if (epoch > total_epochs)
    throw ConfigError("cosine_lr: epoch " + std::to_string(epoch) + " beyond " + std::to_string(total_epochs));
  if (epoch == 0) return lr0;
  if (epoch == total_epochs) return lr_min;
  const double t = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

/// Mean negative log-softmax at the targets. Logits are (B, c) with one target
/// per row, or (B, N, p) with one target per point.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  if (logits.rank() < 2) throw DimensionError("cross_entropy: expected (B, c) or (B, N, p) logits");
  const std::size_t C = logits.dim(-1), R = logits.numel() / C;
  if (targets.size() != R)
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(R) +
                         " logit rows");
  auto flat = logits.rank() == 2 ? logits : reshape(logits, {R, C});
  return nll_loss(log_softmax(flat, -1), targets);
}

/// Row-wise argmax (lowest index on ties) of (..., C) scores.
template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& scores) {
  const std::size_t C = scores.dim(-1), R = scores.numel() / C;
  auto d = scores.data();
  std::vector<std::size_t> out(R);
  for (std::size_t r = 0; r < R; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (d[r * C + c] > d[r * C + best]) best = c;
    out[r] = best;
  }
  return out;
}

struct Metrics {
  double overall_acc = 0;
  double mean_class_acc = 0;
  double miou = 0;
  std::size_t count = 0;

  bool operator==(const Metrics&) const = default;
};

/// Streaming confusion matrix (rows = target, cols = prediction).
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), cells_(classes * classes, 0) {
    if (classes == 0) throw ConfigError("confusion matrix needs at least one class");
  }

  void add(std::size_t prediction, std::size_t target) {
    if (prediction >= classes_ || target >= classes_)
      throw ConfigError("label id out of range for " + std::to_string(classes_) + " classes (prediction " +
                        std::to_string(prediction) + ", target " + std::to_string(target) + ")");
    ++cells_[target * classes_ + prediction];
    ++total_;
  }

  void add(std::span<const std::size_t> predictions, std::span<const std::size_t> targets) {
    if (predictions.size() != targets.size())
      throw DimensionError("metrics: " + std::to_string(predictions.size()) + " predictions for " +
                           std::to_string(targets.size()) + " targets");
    for (std::size_t i = 0; i < predictions.size(); ++i) add(predictions[i], targets[i]);
  }

  std::size_t at(std::size_t target, std::size_t prediction) const { return cells_[target * classes_ + prediction]; }
  std::size_t classes() const { return classes_; }
  std::size_t total() const { return total_; }

  /// Per-class scores cover only classes that occur among the targets.
  Metrics metrics() const {
    if (total_ == 0) throw ConfigError("metrics: no predictions to score");
    Metrics m;
    m.count = total_;
    std::size_t correct = 0, present = 0;
    double recall = 0, iou = 0;
    for (std::size_t c = 0; c < classes_; ++c) {
      std::size_t row = 0, col = 0;
      for (std::size_t o = 0; o < classes_; ++o) {
        row += at(c, o);
        col += at(o, c);
      }
      const std::size_t tp = at(c, c);
      correct += tp;
      if (row == 0) continue;
      ++present;
      recall += static_cast<double>(tp) / static_cast<double>(row);
      iou += static_cast<double>(tp) / static_cast<double>(row + col - tp);
    }
    m.overall_acc = static_cast<double>(correct) / static_cast<double>(total_);
    m.mean_class_acc = recall / static_cast<double>(present);
    m.miou = iou / static_cast<double>(present);
    return m;
  }

 private:
  std::size_t classes_;
  std::vector<std::size_t> cells_;
  std::size_t total_ = 0;
};

inline Metrics metrics(std::span<const std::size_t> predictions, std::span<const std::size_t> targets,
                       std::size_t class_count) {
  if (targets.empty()) throw ConfigError("metrics: empty input");
  ConfusionMatrix cm(class_count);
  cm.add(predictions, targets);
  return cm.metrics();
}

}  // namespace cpt
