#include "hetmt/loss.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "hetmt/errors.hpp"

namespace hetmt {

namespace {

void require_same(std::size_t a, std::size_t b, const char* what) {
  if (a != b) throw ConfigError(std::string("shape mismatch: ") + what);
}

template <class T>
void require_finite(std::span<const T> v, const char* what) {
  for (T x : v)
    if (!std::isfinite(x)) throw NumericError(std::string("non-finite input: ") + what);
}

struct Clamped {
  double s;
  bool active;  // false when the clamp bites and the gradient is cut
};

Clamped clamp_logvar(double s) {
  if (s < -kLogVarClamp) return {-kLogVarClamp, false};
  if (s > kLogVarClamp) return {kLogVarClamp, false};
  return {s, true};
}

// log-sum-exp and softmax of one voxel's logits (stride = pixels).
template <class T>
double log_sum_exp(std::span<const T> logits, std::size_t voxel, std::size_t pixels, int classes, double scale,
                   std::vector<double>& prob) {
  double fmax = -INFINITY;
  for (int c = 0; c < classes; ++c) fmax = std::max(fmax, static_cast<double>(logits[c * pixels + voxel]));
  // Shift before scaling so a huge scale (tiny variance) cannot form inf * 0.
  double sum = 0.0;
  for (int c = 0; c < classes; ++c) {
    const double diff = static_cast<double>(logits[c * pixels + voxel]) - fmax;
    prob[c] = diff == 0.0 ? 1.0 : std::exp(scale * diff);
    sum += prob[c];
  }
  for (int c = 0; c < classes; ++c) prob[c] /= sum;
  const double mx = scale * fmax;
  return mx + std::log(sum);
}

}  // namespace

template <class T>
LossMap<T> regression_nll(std::span<const T> y, std::span<const T> mean, std::span<const T> logvar,
                          std::span<T> grad_mean, std::span<T> grad_logvar, double weight) {
  require_same(y.size(), mean.size(), "regression target vs mean");
  require_same(y.size(), logvar.size(), "regression target vs log-variance");
  require_finite(y, "regression target");
  require_finite(mean, "regression mean");
  require_finite(logvar, "regression log-variance");
  const std::size_t n = y.size();
  if (n == 0) throw ConfigError("empty regression map");
  LossMap<T> out;
  out.per_voxel.resize(n);
  const double w = weight / static_cast<double>(n);
  double data = 0.0, logs = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = static_cast<double>(y[i]) - static_cast<double>(mean[i]);
    const Clamped s = clamp_logvar(static_cast<double>(logvar[i]));
    const double prec = std::exp(-s.s);
    const double d = 0.5 * prec * r * r;
    data += d;
    logs += s.s;
    out.per_voxel[i] = static_cast<T>(d + s.s);
    if (!grad_mean.empty()) grad_mean[i] += static_cast<T>(-w * prec * r);
    if (!grad_logvar.empty() && s.active) grad_logvar[i] += static_cast<T>(w * (1.0 - d));
  }
  out.data_term = data / static_cast<double>(n);
  out.log_term = logs / static_cast<double>(n);
  return out;
}

template <class T>
std::vector<T> scaled_softmax(std::span<const T> logits, std::span<const T> logvar, int classes) {
  const std::size_t pixels = logvar.size();
  require_same(logits.size(), pixels * static_cast<std::size_t>(classes), "logits vs log-variance");
  require_finite(logits, "segmentation logits");
  require_finite(logvar, "segmentation log-variance");
  std::vector<T> out(logits.size());
  std::vector<double> prob(classes);
  for (std::size_t v = 0; v < pixels; ++v) {
    const double scale = 0.5 * std::exp(-static_cast<double>(logvar[v]));
    log_sum_exp(logits, v, pixels, classes, scale, prob);
    for (int c = 0; c < classes; ++c) out[c * pixels + v] = static_cast<T>(prob[c]);
  }
  return out;
}

template <class T>
void scaled_softmax_backward(std::span<const T> logits, std::span<const T> logvar, int classes,
                             std::span<const T> grad_prob, std::span<T> grad_logits, std::span<T> grad_logvar) {
  const std::size_t pixels = logvar.size();
  require_same(logits.size(), pixels * static_cast<std::size_t>(classes), "logits vs log-variance");
  require_same(grad_prob.size(), logits.size(), "probability gradient vs logits");
  std::vector<double> prob(classes);
  for (std::size_t v = 0; v < pixels; ++v) {
    const double scale = 0.5 * std::exp(-static_cast<double>(logvar[v]));
    log_sum_exp(logits, v, pixels, classes, scale, prob);
    double dot = 0.0;
    for (int c = 0; c < classes; ++c) dot += prob[c] * static_cast<double>(grad_prob[c * pixels + v]);
    double ds = 0.0;
    for (int c = 0; c < classes; ++c) {
      // z_c = scale * f_c;  dL/dz_c = p_c (g_c - <p, g>);  dz_c/ds = -z_c
      const double dz = prob[c] * (static_cast<double>(grad_prob[c * pixels + v]) - dot);
      if (!grad_logits.empty()) grad_logits[c * pixels + v] += static_cast<T>(dz * scale);
      ds -= dz * scale * static_cast<double>(logits[c * pixels + v]);
    }
    if (!grad_logvar.empty()) grad_logvar[v] += static_cast<T>(ds);
  }
}

template <class T>
std::vector<T> cross_entropy(std::span<const T> logits, std::span<const std::uint8_t> labels, int classes) {
  const std::size_t pixels = labels.size();
  require_same(logits.size(), pixels * static_cast<std::size_t>(classes), "logits vs labels");
  std::vector<T> out(pixels);
  std::vector<double> prob(classes);
  for (std::size_t v = 0; v < pixels; ++v) {
    if (labels[v] >= classes) throw ConfigError("label " + std::to_string(labels[v]) + " out of range");
    const double lse = log_sum_exp(logits, v, pixels, classes, 1.0, prob);
    out[v] = static_cast<T>(lse - static_cast<double>(logits[labels[v] * pixels + v]));
  }
  return out;
}

template <class T>
LossMap<T> classification_nll(std::span<const T> logits, std::span<const T> logvar,
                              std::span<const std::uint8_t> labels, int classes, std::span<T> grad_logits,
                              std::span<T> grad_logvar, double weight) {
  const std::size_t pixels = labels.size();
  require_same(logvar.size(), pixels, "segmentation log-variance vs labels");
  require_same(logits.size(), pixels * static_cast<std::size_t>(classes), "logits vs labels");
  require_finite(logits, "segmentation logits");
  require_finite(logvar, "segmentation log-variance");
  if (pixels == 0) throw ConfigError("empty label map");
  LossMap<T> out;
  out.per_voxel.resize(pixels);
  const double w = weight / static_cast<double>(pixels);
  std::vector<double> prob(classes);
  double data = 0.0, logs = 0.0;
  for (std::size_t v = 0; v < pixels; ++v) {
    const int y = labels[v];
    if (y >= classes) throw ConfigError("label " + std::to_string(y) + " out of range");
    const double lse = log_sum_exp(logits, v, pixels, classes, 1.0, prob);
    const double ce = lse - static_cast<double>(logits[y * pixels + v]);
    const Clamped s = clamp_logvar(static_cast<double>(logvar[v]));
    const double half_prec = 0.5 * std::exp(-s.s);
    const double d = half_prec * ce;
    data += d;
    logs += s.s;
    out.per_voxel[v] = static_cast<T>(d + s.s);
    if (!grad_logits.empty())
      for (int c = 0; c < classes; ++c)
        grad_logits[c * pixels + v] += static_cast<T>(w * half_prec * (prob[c] - (c == y ? 1.0 : 0.0)));
    if (!grad_logvar.empty() && s.active) grad_logvar[v] += static_cast<T>(w * (1.0 - d));
  }
  out.data_term = data / static_cast<double>(pixels);
  out.log_term = logs / static_cast<double>(pixels);
  return out;
}

template <class T>
LossMap<T> mse_loss(std::span<const T> y, std::span<const T> mean, std::span<T> grad_mean, double weight) {
  require_same(y.size(), mean.size(), "regression target vs mean");
  require_finite(y, "regression target");
  require_finite(mean, "regression mean");
  const std::size_t n = y.size();
  if (n == 0) throw ConfigError("empty regression map");
  LossMap<T> out;
  out.per_voxel.resize(n);
  const double w = weight / static_cast<double>(n);
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = static_cast<double>(y[i]) - static_cast<double>(mean[i]);
    out.per_voxel[i] = static_cast<T>(r * r);
    acc += r * r;
    if (!grad_mean.empty()) grad_mean[i] += static_cast<T>(-2.0 * w * r);
  }
  out.data_term = acc / static_cast<double>(n);
  return out;
}

template <class T>
LossMap<T> cross_entropy_loss(std::span<const T> logits, std::span<const std::uint8_t> labels, int classes,
                              std::span<T> grad_logits, double weight) {
  const std::size_t pixels = labels.size();
  require_same(logits.size(), pixels * static_cast<std::size_t>(classes), "logits vs labels");
  require_finite(logits, "segmentation logits");
  if (pixels == 0) throw ConfigError("empty label map");
  LossMap<T> out;
  out.per_voxel.resize(pixels);
  const double w = weight / static_cast<double>(pixels);
  std::vector<double> prob(classes);
  double acc = 0.0;
  for (std::size_t v = 0; v < pixels; ++v) {
    const int y = labels[v];
    if (y >= classes) throw ConfigError("label " + std::to_string(y) + " out of range");
    const double ce = log_sum_exp(logits, v, pixels, classes, 1.0, prob) - static_cast<double>(logits[y * pixels + v]);
    out.per_voxel[v] = static_cast<T>(ce);
    acc += ce;
    if (!grad_logits.empty())
      for (int c = 0; c < classes; ++c)
        grad_logits[c * pixels + v] += static_cast<T>(w * (prob[c] - (c == y ? 1.0 : 0.0)));
  }
  out.data_term = acc / static_cast<double>(pixels);
  return out;
}

namespace {

template <class T>
std::span<T> grad_span(DualTaskOutput<T>* grad, HeadKind k, std::size_t size) {
  if (!grad) return {};
  auto& f = grad->field(k);
  if (f.size() != size) f.assign(size, T(0));
  return {f.data(), f.size()};
}

template <class T>
std::span<const T> cs(const std::vector<T>& v) {
  return {v.data(), v.size()};
}

}  // namespace

template <class T>
LossBreakdown joint_hetero_loss(const DualTaskOutput<T>& out, std::span<const T> y1,
                                std::span<const std::uint8_t> y2, DualTaskOutput<T>* grad, double weight) {
  if (out.reg_mean.empty() || out.reg_logvar.empty() || out.seg_logits.empty() || out.seg_logvar.empty())
    throw ConfigError("joint heteroscedastic loss needs all four heads");
  if (grad) {
    grad->height = out.height;
    grad->width = out.width;
    grad->classes = out.classes;
  }
  const auto reg = regression_nll<T>(y1, cs(out.reg_mean), cs(out.reg_logvar),
                                     grad_span(grad, HeadKind::reg_mean, out.reg_mean.size()),
                                     grad_span(grad, HeadKind::reg_logvar, out.reg_logvar.size()), weight);
  const auto seg = classification_nll<T>(cs(out.seg_logits), cs(out.seg_logvar), y2, out.classes,
                                         grad_span(grad, HeadKind::seg_logits, out.seg_logits.size()),
                                         grad_span(grad, HeadKind::seg_logvar, out.seg_logvar.size()), weight);
  LossBreakdown b;
  b.reg_data_term = reg.data_term;
  b.reg_log_term = reg.log_term;
  b.seg_data_term = seg.data_term;
  b.seg_log_term = seg.log_term;
  b.finalize();
  return b;
}

template <class T>
LossBreakdown joint_homo_loss(const DualTaskOutput<T>& out, std::span<const T> y1,
                              std::span<const std::uint8_t> y2, T s1, T s2, DualTaskOutput<T>* grad,
                              T* grad_s1, T* grad_s2, double weight) {
  if (out.reg_mean.empty() || out.seg_logits.empty())
    throw ConfigError("joint homoscedastic loss needs the regression mean and segmentation logits");
  if (grad) {
    grad->height = out.height;
    grad->width = out.width;
    grad->classes = out.classes;
  }
  const std::size_t pixels = out.reg_mean.size();
  const std::vector<T> s1_map(pixels, s1), s2_map(pixels, s2);
  std::vector<T> g1, g2;
  if (grad_s1) g1.assign(pixels, T(0));
  if (grad_s2) g2.assign(pixels, T(0));
  const auto reg = regression_nll<T>(y1, cs(out.reg_mean), cs(s1_map),
                                     grad_span(grad, HeadKind::reg_mean, out.reg_mean.size()),
                                     {g1.data(), g1.size()}, weight);
  const auto seg = classification_nll<T>(cs(out.seg_logits), cs(s2_map), y2, out.classes,
                                         grad_span(grad, HeadKind::seg_logits, out.seg_logits.size()),
                                         {g2.data(), g2.size()}, weight);
  auto sum = [](const std::vector<T>& v) {
    double a = 0.0;
    for (T x : v) a += static_cast<double>(x);
    return a;
  };
  if (grad_s1) *grad_s1 += static_cast<T>(sum(g1));
  if (grad_s2) *grad_s2 += static_cast<T>(sum(g2));
  LossBreakdown b;
  b.reg_data_term = reg.data_term;
  b.reg_log_term = reg.log_term;
  b.seg_data_term = seg.data_term;
  b.seg_log_term = seg.log_term;
  b.finalize();
  return b;
}

template <class T>
double clamp_fraction(std::span<const T> logvar) {
  if (logvar.empty()) return 0.0;
  std::size_t n = 0;
  for (T s : logvar)
    if (!(std::abs(static_cast<double>(s)) < kLogVarClamp)) ++n;
  return static_cast<double>(n) / static_cast<double>(logvar.size());
}

#define HETMT_INSTANTIATE_LOSS(T)                                                                              \
  template LossMap<T> regression_nll<T>(std::span<const T>, std::span<const T>, std::span<const T>,           \
                                        std::span<T>, std::span<T>, double);                                   \
  template std::vector<T> scaled_softmax<T>(std::span<const T>, std::span<const T>, int);                      \
  template void scaled_softmax_backward<T>(std::span<const T>, std::span<const T>, int, std::span<const T>,    \
                                           std::span<T>, std::span<T>);                                        \
  template std::vector<T> cross_entropy<T>(std::span<const T>, std::span<const std::uint8_t>, int);            \
  template LossMap<T> classification_nll<T>(std::span<const T>, std::span<const T>,                            \
                                            std::span<const std::uint8_t>, int, std::span<T>, std::span<T>,    \
                                            double);                                                           \
  template LossMap<T> mse_loss<T>(std::span<const T>, std::span<const T>, std::span<T>, double);               \
  template LossMap<T> cross_entropy_loss<T>(std::span<const T>, std::span<const std::uint8_t>, int,            \
                                            std::span<T>, double);                                             \
  template LossBreakdown joint_hetero_loss<T>(const DualTaskOutput<T>&, std::span<const T>,                    \
                                              std::span<const std::uint8_t>, DualTaskOutput<T>*, double);      \
  template LossBreakdown joint_homo_loss<T>(const DualTaskOutput<T>&, std::span<const T>,                      \
                                            std::span<const std::uint8_t>, T, T, DualTaskOutput<T>*, T*, T*,   \
                                            double);                                                           \
  template double clamp_fraction<T>(std::span<const T>);

HETMT_INSTANTIATE_LOSS(float)
HETMT_INSTANTIATE_LOSS(double)

#undef HETMT_INSTANTIATE_LOSS

}  // namespace hetmt
