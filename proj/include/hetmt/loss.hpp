#pragma once

// Negative log-likelihood task losses with heteroscedastic weighting.
//
// All variance heads are parameterized by s = log(sigma^2). Inside the
// losses s is clamped to [-kLogVarClamp, kLogVarClamp] (zero gradient outside)
// to keep exp(-s) bounded early in training. Reductions are arithmetic means
// over voxels. Optional gradient outputs receive d(weight * mean loss)/d(input).

#include <cstdint>
#include <span>
#include <vector>

#include "hetmt/model.hpp"

namespace hetmt {

inline constexpr double kLogVarClamp = 10.0;

struct LossBreakdown {
  double reg_data_term = 0.0;  // mean of |y1 - f1|^2 / (2 sigma1^2)
  double reg_log_term = 0.0;   // mean of log sigma1^2
  double seg_data_term = 0.0;  // mean of CE / (2 sigma2^2)
  double seg_log_term = 0.0;   // mean of log sigma2^2
  double total = 0.0;

  void finalize() { total = reg_data_term + reg_log_term + seg_data_term + seg_log_term; }
};

template <class T>
struct LossMap {
  std::vector<T> per_voxel;
  double data_term = 0.0;  // mean of the weighted data part
  double log_term = 0.0;   // mean of the log-variance part
  double mean() const { return data_term + log_term; }
};

/// L = 0.5 exp(-s) (y - f)^2 + s per voxel.
template <class T>
LossMap<T> regression_nll(std::span<const T> y, std::span<const T> mean, std::span<const T> logvar,
                          std::span<T> grad_mean = {}, std::span<T> grad_logvar = {}, double weight = 1.0);

/// Softmax of logits / (2 exp(s)) per voxel; logits are C x P channel-major,
/// s has P entries. Not clamped.
template <class T>
std::vector<T> scaled_softmax(std::span<const T> logits, std::span<const T> logvar, int classes);

/// Vector-Jacobian product of scaled_softmax.
template <class T>
void scaled_softmax_backward(std::span<const T> logits, std::span<const T> logvar, int classes,
                             std::span<const T> grad_prob, std::span<T> grad_logits, std::span<T> grad_logvar);

/// Plain softmax cross-entropy per voxel on unscaled logits.
template <class T>
std::vector<T> cross_entropy(std::span<const T> logits, std::span<const std::uint8_t> labels, int classes);

/// L = 0.5 exp(-s) CE(softmax(f), y) + s per voxel, CE on the unscaled logits.
template <class T>
LossMap<T> classification_nll(std::span<const T> logits, std::span<const T> logvar,
                              std::span<const std::uint8_t> labels, int classes, std::span<T> grad_logits = {},
                              std::span<T> grad_logvar = {}, double weight = 1.0);

/// Mean squared error (no 1/2 factor).
template <class T>
LossMap<T> mse_loss(std::span<const T> y, std::span<const T> mean, std::span<T> grad_mean = {},
                    double weight = 1.0);

/// Mean softmax cross-entropy.
template <class T>
LossMap<T> cross_entropy_loss(std::span<const T> logits, std::span<const std::uint8_t> labels, int classes,
                              std::span<T> grad_logits = {}, double weight = 1.0);

/// Joint heteroscedastic loss: regression_nll + classification_nll means.
/// `grad` (optional) receives gradients for all four heads.
template <class T>
LossBreakdown joint_hetero_loss(const DualTaskOutput<T>& out, std::span<const T> y1,
                                std::span<const std::uint8_t> y2, DualTaskOutput<T>* grad = nullptr,
                                double weight = 1.0);

/// Joint homoscedastic loss with scalar log-variances s1, s2.
template <class T>
LossBreakdown joint_homo_loss(const DualTaskOutput<T>& out, std::span<const T> y1,
                              std::span<const std::uint8_t> y2, T s1, T s2, DualTaskOutput<T>* grad = nullptr,
                              T* grad_s1 = nullptr, T* grad_s2 = nullptr, double weight = 1.0);

/// Fraction of entries of s lying outside the open clamp interval.
template <class T>
double clamp_fraction(std::span<const T> logvar);

}  // namespace hetmt
