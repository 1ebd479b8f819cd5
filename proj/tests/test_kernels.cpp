#include <doctest.h>

#include <atomic>
#include <stdexcept>

#include "hetmt/kernels.hpp"
#include "test_util.hpp"

using namespace hetmt;
using kernels::ConvGeometry;

namespace {

template <class T>
void compare_with_reference(const ConvGeometry& g, std::uint64_t seed, double tol) {
  const auto in = testutil::random_vector<T>(g.input_size(), seed);
  const auto w = testutil::random_vector<T>(g.weight_size(), seed + 1);
  const auto b = testutil::random_vector<T>(g.out_channels, seed + 2);
  const auto go = testutil::random_vector<T>(g.output_size(), seed + 3);

  std::vector<T> out(g.output_size()), ref(g.output_size()), scratch;
  kernels::conv2d_forward<T>(g, in, w, b, out, scratch);
  kernels::reference::conv2d_forward<T>(g, in, w, b, ref);
  for (std::size_t i = 0; i < out.size(); ++i) REQUIRE(testutil::close(out[i], ref[i], tol, tol));

  // Gradients accumulate: start both from the same nonzero state.
  const auto gw0 = testutil::random_vector<T>(g.weight_size(), seed + 4);
  const auto gb0 = testutil::random_vector<T>(g.out_channels, seed + 5);
  std::vector<T> gi(g.input_size(), T(7)), gw = gw0, gb = gb0;
  std::vector<T> gi_ref(g.input_size()), gw_ref = gw0, gb_ref = gb0;
  kernels::conv2d_backward<T>(g, in, w, go, gi, gw, gb, scratch);
  kernels::reference::conv2d_backward<T>(g, in, w, go, gi_ref, gw_ref, gb_ref);
  for (std::size_t i = 0; i < gi.size(); ++i) REQUIRE(testutil::close(gi[i], gi_ref[i], tol, tol));
  for (std::size_t i = 0; i < gw.size(); ++i) REQUIRE(testutil::close(gw[i], gw_ref[i], tol, tol));
  for (std::size_t i = 0; i < gb.size(); ++i) REQUIRE(testutil::close(gb[i], gb_ref[i], tol, tol));
}

}  // namespace

TEST_CASE("optimized convolution matches the reference") {
  std::uint64_t seed = 100;
  for (int k : {1, 3})
    for (int d : {1, 2, 4})
      for (auto [cin, cout] : {std::pair{1, 3}, std::pair{4, 4}, std::pair{9, 5}})
        for (auto [h, w] : {std::pair{5, 5}, std::pair{8, 13}, std::pair{16, 16}}) {
          if (k == 1 && d > 1) continue;
          ConvGeometry g{cin, cout, k, d, h, w};
          CAPTURE(k);
          CAPTURE(d);
          CAPTURE(cin);
          CAPTURE(h);
          compare_with_reference<double>(g, seed, 1e-12);
          compare_with_reference<float>(g, seed, 1e-4);
          seed += 10;
        }
}

TEST_CASE("reference convolution on a hand example") {
  // 3x3 input, one 3x3 kernel that picks the right neighbour.
  ConvGeometry g{1, 1, 3, 1, 3, 3};
  const std::vector<double> in{1, 2, 3, 4, 5, 6, 7, 8, 9};
  std::vector<double> w(9, 0.0);
  w[5] = 1.0;  // (ky=1, kx=2)
  const std::vector<double> b{0.5};
  std::vector<double> out(9);
  kernels::reference::conv2d_forward<double>(g, in, w, b, out);
  const std::vector<double> expected{2.5, 3.5, 0.5, 5.5, 6.5, 0.5, 8.5, 9.5, 0.5};
  CHECK(out == expected);
}

TEST_CASE("convolution gradient is the adjoint of the forward map") {
  // <conv(x), y> == <x, conv^T(y)> without bias.
  ConvGeometry g{3, 2, 3, 2, 7, 6};
  const auto x = testutil::random_vector(g.input_size(), 1);
  const auto w = testutil::random_vector(g.weight_size(), 2);
  const auto y = testutil::random_vector(g.output_size(), 3);
  std::vector<double> out(g.output_size()), gi(g.input_size()), gw(g.weight_size(), 0.0), gb, scratch;
  kernels::conv2d_forward<double>(g, x, w, {}, out, scratch);
  kernels::conv2d_backward<double>(g, x, w, y, gi, gw, gb, scratch);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) lhs += out[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * gi[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("parallel_for covers every index once and propagates errors") {
  std::vector<std::atomic<int>> hits(257);
  kernels::parallel_for(257, [&](int i) { hits[i]++; });
  for (auto& h : hits) CHECK(h.load() == 1);
  CHECK_THROWS_AS(kernels::parallel_for(10,
                                        [](int i) {
                                          if (i == 3) throw std::runtime_error("boom");
                                        }),
                  std::runtime_error);
  int n = 0;
  kernels::reference::serial_for(5, [&](int) { ++n; });
  CHECK(n == 5);
}
