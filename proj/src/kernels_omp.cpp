#include "hetmt/kernels.hpp"

#include <algorithm>
#include <cstdlib>
#include <exception>
#include <mutex>

#include <Eigen/Core>
#include <omp.h>

namespace hetmt::kernels {

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

bool is_pointwise(const ConvGeometry& g) { return g.kernel == 1; }

// Row r = (ci, ky, kx) of the column matrix holds the input shifted by the
// kernel tap, with zeros where the tap falls outside the image.
template <class T>
void im2col(const ConvGeometry& g, const T* in, T* cols) {
  const int k = g.kernel, d = g.dilation, pad = g.pad(), h = g.height, w = g.width;
  const int rows = static_cast<int>(g.patch_rows());
#pragma omp parallel for schedule(static) if (rows >= 64 && !omp_in_parallel())
  for (int r = 0; r < rows; ++r) {
    const int ci = r / (k * k);
    const int ky = (r / k) % k;
    const int kx = r % k;
    const int oy = ky * d - pad, ox = kx * d - pad;
    const T* src = in + static_cast<std::size_t>(ci) * h * w;
    T* dst = cols + static_cast<std::size_t>(r) * h * w;
    const int x0 = std::max(0, -ox), x1 = std::min(w, w - ox);
    for (int y = 0; y < h; ++y) {
      T* row = dst + static_cast<std::size_t>(y) * w;
      const int iy = y + oy;
      if (iy < 0 || iy >= h || x0 >= x1) {
        std::fill(row, row + w, T(0));
        continue;
      }
      std::fill(row, row + x0, T(0));
      std::copy(src + static_cast<std::size_t>(iy) * w + x0 + ox, src + static_cast<std::size_t>(iy) * w + x1 + ox,
                row + x0);
      std::fill(row + x1, row + w, T(0));
    }
  }
}

// Adjoint of im2col; accumulates into `in`, which the caller zeroes.
template <class T>
void col2im(const ConvGeometry& g, const T* cols, T* in) {
  const int k = g.kernel, d = g.dilation, pad = g.pad(), h = g.height, w = g.width;
  // One channel per iteration so threads never write the same plane.
#pragma omp parallel for schedule(static) if (g.in_channels >= 8 && !omp_in_parallel())
  for (int ci = 0; ci < g.in_channels; ++ci) {
    T* dst = in + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const int r = (ci * k + ky) * k + kx;
        const int oy = ky * d - pad, ox = kx * d - pad;
        const T* src = cols + static_cast<std::size_t>(r) * h * w;
        const int x0 = std::max(0, -ox), x1 = std::min(w, w - ox);
        for (int y = 0; y < h; ++y) {
          const int iy = y + oy;
          if (iy < 0 || iy >= h) continue;
          const T* s = src + static_cast<std::size_t>(y) * w;
          T* o = dst + static_cast<std::size_t>(iy) * w + ox;
          for (int x = x0; x < x1; ++x) o[x] += s[x];
        }
      }
  }
}

}  // namespace

template <class T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output, std::vector<T>& scratch) {
  const auto p = static_cast<Eigen::Index>(g.pixels());
  const auto kr = static_cast<Eigen::Index>(g.patch_rows());
  ConstMapMat<T> w(weight.data(), g.out_channels, kr);
  MapMat<T> out(output.data(), g.out_channels, p);
  if (is_pointwise(g)) {
    out.noalias() = w * ConstMapMat<T>(input.data(), kr, p);
  } else {
    scratch.resize(g.patch_rows() * g.pixels());
    im2col(g, input.data(), scratch.data());
    out.noalias() = w * ConstMapMat<T>(scratch.data(), kr, p);
  }
  if (!bias.empty()) out.colwise() += Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(bias.data(), g.out_channels);
}

template <class T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                     std::span<const T> grad_output, std::span<T> grad_input,
                     std::span<T> grad_weight, std::span<T> grad_bias, std::vector<T>& scratch) {
  const auto p = static_cast<Eigen::Index>(g.pixels());
  const auto kr = static_cast<Eigen::Index>(g.patch_rows());
  ConstMapMat<T> w(weight.data(), g.out_channels, kr);
  ConstMapMat<T> gout(grad_output.data(), g.out_channels, p);
  MapMat<T> gw(grad_weight.data(), g.out_channels, kr);

  // Plain loop: Eigen's vectorized reductions peel by address alignment,
  // which would make the summation order vary between runs.
  if (!grad_bias.empty())
    for (int co = 0; co < g.out_channels; ++co) {
      const T* row = grad_output.data() + static_cast<std::size_t>(co) * g.pixels();
      T acc = 0;
      for (Eigen::Index i = 0; i < p; ++i) acc += row[i];
      grad_bias[co] += acc;
    }

  if (is_pointwise(g)) {
    gw.noalias() += gout * ConstMapMat<T>(input.data(), kr, p).transpose();
    if (!grad_input.empty()) MapMat<T>(grad_input.data(), kr, p).noalias() = w.transpose() * gout;
    return;
  }
  scratch.resize(g.patch_rows() * g.pixels());
  im2col(g, input.data(), scratch.data());
  gw.noalias() += gout * ConstMapMat<T>(scratch.data(), kr, p).transpose();
  if (!grad_input.empty()) {
    MapMat<T>(scratch.data(), kr, p).noalias() = w.transpose() * gout;
    std::fill(grad_input.begin(), grad_input.end(), T(0));
    col2im(g, scratch.data(), grad_input.data());
  }
}

int max_threads() {
  if (const char* env = std::getenv("HETMT_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return std::max(1, omp_get_max_threads());
}

void parallel_for(int n, const std::function<void(int)>& body) {
  std::exception_ptr error;
  std::mutex error_mutex;
#pragma omp parallel for schedule(dynamic, 1) num_threads(max_threads()) if (n > 1)
  for (int i = 0; i < n; ++i) {
    try {
      body(i);
    } catch (...) {
      std::lock_guard<std::mutex> lock(error_mutex);
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);
}

template void conv2d_forward<float>(const ConvGeometry&, std::span<const float>, std::span<const float>,
                                    std::span<const float>, std::span<float>, std::vector<float>&);
template void conv2d_forward<double>(const ConvGeometry&, std::span<const double>, std::span<const double>,
                                     std::span<const double>, std::span<double>, std::vector<double>&);
template void conv2d_backward<float>(const ConvGeometry&, std::span<const float>, std::span<const float>,
                                     std::span<const float>, std::span<float>, std::span<float>,
                                     std::span<float>, std::vector<float>&);
template void conv2d_backward<double>(const ConvGeometry&, std::span<const double>, std::span<const double>,
                                      std::span<const double>, std::span<double>, std::span<double>,
                                      std::span<double>, std::vector<double>&);

}  // namespace hetmt::kernels
