#pragma once

// 2D convolution kernels used by the network. Two implementations share one
// contract: `kernels::` is the optimized path (im2col + GEMM, OpenMP over
// channel rows) used for training and inference; `kernels::reference::` is a
// direct serial loop nest kept as the test oracle and benchmark baseline.
//
// Layouts: feature maps are CHW, weights are [out][in][ky][kx], "same" zero
// padding of dilation * (kernel / 2) on every side, stride 1.

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace hetmt::kernels {

struct ConvGeometry {
  int in_channels = 1;
  int out_channels = 1;
  int kernel = 3;
  int dilation = 1;
  int height = 1;
  int width = 1;

  int pad() const { return dilation * (kernel / 2); }
  std::size_t pixels() const { return static_cast<std::size_t>(height) * width; }
  std::size_t input_size() const { return pixels() * in_channels; }
  std::size_t output_size() const { return pixels() * out_channels; }
  std::size_t weight_size() const {
    return static_cast<std::size_t>(out_channels) * in_channels * kernel * kernel;
  }
  std::size_t patch_rows() const { return static_cast<std::size_t>(in_channels) * kernel * kernel; }
};

template <class T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output, std::vector<T>& scratch);

/// grad_input is overwritten (skipped when empty); grad_weight and grad_bias
/// are accumulated into.
template <class T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                     std::span<const T> grad_output, std::span<T> grad_input,
                     std::span<T> grad_weight, std::span<T> grad_bias, std::vector<T>& scratch);

/// Number of worker threads: HETMT_THREADS when set, else the OpenMP default.
int max_threads();

/// Runs body(i) for i in [0, n) on up to max_threads() threads.
void parallel_for(int n, const std::function<void(int)>& body);

namespace reference {

template <class T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output);

template <class T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                     std::span<const T> grad_output, std::span<T> grad_input,
                     std::span<T> grad_weight, std::span<T> grad_bias);

/// Serial loop with the same contract as kernels::parallel_for.
void serial_for(int n, const std::function<void(int)>& body);

}  // namespace reference

}  // namespace hetmt::kernels
