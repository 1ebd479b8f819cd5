#include "hetmt/kernels.hpp"

#include <algorithm>

namespace hetmt::kernels::reference {

template <class T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> output) {
  const int k = g.kernel, d = g.dilation, pad = g.pad();
  for (int co = 0; co < g.out_channels; ++co)
    for (int y = 0; y < g.height; ++y)
      for (int x = 0; x < g.width; ++x) {
        T acc = bias.empty() ? T(0) : bias[co];
        for (int ci = 0; ci < g.in_channels; ++ci)
          for (int ky = 0; ky < k; ++ky) {
            const int iy = y + ky * d - pad;
            if (iy < 0 || iy >= g.height) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = x + kx * d - pad;
              if (ix < 0 || ix >= g.width) continue;
              acc += weight[((static_cast<std::size_t>(co) * g.in_channels + ci) * k + ky) * k + kx] *
                     input[(static_cast<std::size_t>(ci) * g.height + iy) * g.width + ix];
            }
          }
        output[(static_cast<std::size_t>(co) * g.height + y) * g.width + x] = acc;
      }
}

template <class T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> input, std::span<const T> weight,
                     std::span<const T> grad_output, std::span<T> grad_input,
                     std::span<T> grad_weight, std::span<T> grad_bias) {
  const int k = g.kernel, d = g.dilation, pad = g.pad();
  if (!grad_input.empty()) std::fill(grad_input.begin(), grad_input.end(), T(0));
  for (int co = 0; co < g.out_channels; ++co)
    for (int y = 0; y < g.height; ++y)
      for (int x = 0; x < g.width; ++x) {
        const T go = grad_output[(static_cast<std::size_t>(co) * g.height + y) * g.width + x];
        if (!grad_bias.empty()) grad_bias[co] += go;
        for (int ci = 0; ci < g.in_channels; ++ci)
          for (int ky = 0; ky < k; ++ky) {
            const int iy = y + ky * d - pad;
            if (iy < 0 || iy >= g.height) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = x + kx * d - pad;
              if (ix < 0 || ix >= g.width) continue;
              const std::size_t wi = ((static_cast<std::size_t>(co) * g.in_channels + ci) * k + ky) * k + kx;
              const std::size_t ii = (static_cast<std::size_t>(ci) * g.height + iy) * g.width + ix;
              grad_weight[wi] += go * input[ii];
              if (!grad_input.empty()) grad_input[ii] += go * weight[wi];
            }
          }
      }
}

void serial_for(int n, const std::function<void(int)>& body) {
  for (int i = 0; i < n; ++i) body(i);
}

template void conv2d_forward<float>(const ConvGeometry&, std::span<const float>, std::span<const float>,
                                    std::span<const float>, std::span<float>);
template void conv2d_forward<double>(const ConvGeometry&, std::span<const double>, std::span<const double>,
                                     std::span<const double>, std::span<double>);
template void conv2d_backward<float>(const ConvGeometry&, std::span<const float>, std::span<const float>,
                                     std::span<const float>, std::span<float>, std::span<float>,
                                     std::span<float>);
template void conv2d_backward<double>(const ConvGeometry&, std::span<const double>, std::span<const double>,
                                      std::span<const double>, std::span<double>, std::span<double>,
                                      std::span<double>);

}  // namespace hetmt::kernels::reference
