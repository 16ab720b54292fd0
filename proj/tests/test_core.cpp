// Tensor storage, kernel tables, the autodiff graph and the op library.

#include <cmath>
#include <random>

#include "doctest.h"
#include "vmamba/autodiff.hpp"
#include "vmamba/error.hpp"
#include "vmamba/kernels.hpp"
#include "vmamba/ops.hpp"

using namespace vmamba;

namespace {

Tensor triple_loop(const Tensor& x, const Tensor& w) {
  const std::size_t m = x.dim(0), k = x.dim(1), n = w.dim(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += x[i * k + p] * w[p * n + j];
      out[i * n + j] = acc;
    }
  return out;
}

template <typename T>
std::vector<T> randv(std::size_t n, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(d(rng));
  return v;
}

template <typename T>
void check_tables_agree(double tol) {
  if (!kernels::supported(kernels::Isa::avx2)) return;
  const auto& s = kernels::table<T>(kernels::Isa::scalar);
  const auto& v = kernels::table<T>(kernels::Isa::avx2);
  std::mt19937_64 rng(11);
  // Lengths straddle the vector width so tails are covered.
  for (std::size_t n : {0u, 1u, 3u, 4u, 7u, 8u, 9u, 17u, 64u, 129u}) {
    const auto a = randv<T>(n, rng), b = randv<T>(n, rng), c = randv<T>(n, rng);
    CHECK(std::abs(double(s.dot(a.data(), b.data(), n)) - double(v.dot(a.data(), b.data(), n))) <= tol * (1 + n));

    auto y1 = c, y2 = c;
    s.axpy(T(0.7), a.data(), y1.data(), n);
    v.axpy(T(0.7), a.data(), y2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(double(y1[i] - y2[i])) <= tol);

    std::vector<T> o1(n), o2(n);
    s.fma(a.data(), b.data(), c.data(), o1.data(), n);
    v.fma(a.data(), b.data(), c.data(), o2.data(), n);
    for (std::size_t i = 0; i < n; ++i) CHECK(std::abs(double(o1[i] - o2[i])) <= tol);

    auto a1 = a, b1 = b, a2 = c, b2 = c, a3 = c, b3 = c;
    s.combine(a1.data(), b1.data(), a2.data(), b2.data(), n);
    v.combine(a1.data(), b1.data(), a3.data(), b3.data(), n);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(std::abs(double(a2[i] - a3[i])) <= tol);
      CHECK(std::abs(double(b2[i] - b3[i])) <= tol);
    }

    const std::size_t steps = 5;
    const auto ra = randv<T>(steps * n, rng, 0, 1), ru = randv<T>(steps * n, rng), h0 = randv<T>(n, rng);
    std::vector<T> h1(steps * n), h2(steps * n);
    s.recurrence(ra.data(), ru.data(), h0.data(), h1.data(), steps, n);
    v.recurrence(ra.data(), ru.data(), h0.data(), h2.data(), steps, n);
    for (std::size_t i = 0; i < steps * n; ++i) CHECK(std::abs(double(h1[i] - h2[i])) <= tol);
  }
}

}  // namespace

TEST_CASE("tensor construction and reshape") {
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
  CHECK_THROWS_AS(t.reshaped({4, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK(Tensor::scalar(4.0).item() == 4.0);
  CHECK_THROWS(t.item());
  t[2] = std::nan("");
  CHECK_FALSE(t.all_finite());
  CHECK_THROWS_AS(t.require_finite("test"), NumericError);
  CHECK(to_string(Shape{2, 3}) == "[2, 3]");
}

TEST_CASE("kernel tables: scalar and avx2 agree") {
  check_tables_agree<double>(1e-12);
  check_tables_agree<float>(1e-5);
}

TEST_CASE("kernel selection can be overridden") {
  const auto before = kernels::active_isa();
  {
    kernels::ScopedIsa scoped(kernels::Isa::scalar);
    CHECK(kernels::active_isa() == kernels::Isa::scalar);
  }
  CHECK(kernels::active_isa() == before);
  if (!kernels::supported(kernels::Isa::avx2)) CHECK_THROWS_AS(kernels::select(kernels::Isa::avx2), ValidationError);
}

TEST_CASE("kernel dot matches a plain loop") {
  std::mt19937_64 rng(3);
  const auto a = randv<double>(37, rng), b = randv<double>(37, rng);
  double ref = 0;
  for (std::size_t i = 0; i < 37; ++i) ref += a[i] * b[i];
  for (auto isa : {kernels::Isa::scalar, kernels::Isa::avx2}) {
    if (!kernels::supported(isa)) continue;
    CHECK(std::abs(kernels::table<double>(isa).dot(a.data(), b.data(), 37) - ref) <= 1e-12);
  }
}

TEST_CASE("linear matches a triple-loop matmul") {
  std::mt19937_64 rng(1);
  const Tensor x = Tensor::uniform({3, 5}, rng, -1, 1), w = Tensor::uniform({5, 2}, rng, -1, 1);
  Graph g;
  const Var y = ops::linear(g, g.constant(x), g.constant(w));
  CHECK(max_abs_diff(g.value(y), triple_loop(x, w)) <= 1e-12);
  CHECK_THROWS_AS(ops::linear(g, g.constant(x), g.constant(Tensor({4, 2}))), ShapeError);
}

TEST_CASE("conv3d of ones sums the 27-neighbourhood") {
  Graph g;
  const Var y = ops::conv3d(g, g.constant(Tensor({3, 3, 3, 1}, 1.0)), g.constant(Tensor({3, 3, 3, 1, 1}, 1.0)),
                            g.constant(Tensor({1}, 0.0)));
  CHECK(g.value(y)[13] == doctest::Approx(27.0));
  CHECK(g.value(y)[0] == doctest::Approx(8.0));
}

TEST_CASE("batch norm standardises each channel in train mode") {
  std::mt19937_64 rng(2);
  const Tensor x = Tensor::normal({4, 3, 3, 2}, rng, 3.0, 2.0);
  Graph g;
  ops::BatchNormState st(2);
  const Var y = ops::batch_norm(g, g.constant(x), g.constant(Tensor({2}, 1.0)), g.constant(Tensor({2}, 0.0)), st,
                                ops::NormMode::train);
  const Tensor& out = g.value(y);
  for (std::size_t c = 0; c < 2; ++c) {
    double mean = 0, var = 0;
    const std::size_t rows = out.size() / 2;
    for (std::size_t r = 0; r < rows; ++r) mean += out[r * 2 + c];
    mean /= rows;
    for (std::size_t r = 0; r < rows; ++r) var += (out[r * 2 + c] - mean) * (out[r * 2 + c] - mean);
    var /= rows;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(var - 1.0) <= 1e-4);
  }
  CHECK(st.running_mean[0] != 0.0);
}

TEST_CASE("layer norm standardises each token") {
  std::mt19937_64 rng(4);
  const Tensor x = Tensor::normal({5, 8}, rng, -2.0, 3.0);
  Graph g;
  const Var y = ops::layer_norm(g, g.constant(x), g.constant(Tensor({8}, 1.0)), g.constant(Tensor({8}, 0.0)));
  for (std::size_t r = 0; r < 5; ++r) {
    double mean = 0, var = 0;
    for (std::size_t c = 0; c < 8; ++c) mean += g.value(y)[r * 8 + c];
    mean /= 8;
    for (std::size_t c = 0; c < 8; ++c) var += std::pow(g.value(y)[r * 8 + c] - mean, 2);
    CHECK(std::abs(mean) <= 1e-8);
    CHECK(var / 8 == doctest::Approx(1.0).epsilon(1e-4));
  }
}

TEST_CASE("activations and softmax closed forms") {
  CHECK(ops::softplus(0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(ops::softplus(50.0) == 50.0);
  CHECK(ops::sigmoid(0.0) == 0.5);
  CHECK(ops::relu(-1.0) == 0.0);
  CHECK(ops::silu(1.0) == doctest::Approx(1.0 / (1.0 + std::exp(-1.0))));
  Graph g;
  const Var s = ops::softmax(g, g.constant(Tensor({2}, {0.0, std::log(2.0)})), 0);
  CHECK(g.value(s)[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(g.value(s)[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("cross entropy over softmax of linear: gradients match finite differences") {
  std::mt19937_64 rng(5);
  const Tensor x = Tensor::uniform({4, 6}, rng, -1, 1);
  Parameter w("w", Tensor::uniform({6, 3}, rng, -1, 1));
  Parameter b("b", Tensor::uniform({3}, rng, -1, 1));
  const std::vector<std::size_t> labels{0, 2, 1, 2};
  auto loss_at = [&](const Tensor& wv) {
    Graph g;
    return g.value(ops::cross_entropy(g, ops::linear(g, g.constant(x), g.constant(wv), g.constant(b.value)), labels))
        .item();
  };
  Graph g;
  const Var loss = ops::cross_entropy(g, ops::linear(g, g.constant(x), g.parameter(w), g.parameter(b)), labels);
  g.backward(loss);
  CHECK(relative_error(w.grad, finite_diff(loss_at, w.value)) <= 1e-4);
}

TEST_CASE("backward fault injection is visible to finite differences") {
  std::mt19937_64 rng(6);
  Parameter w("w", Tensor::uniform({3, 2}, rng, -1, 1));
  const Tensor x = Tensor::uniform({2, 3}, rng, -1, 1);
  auto f = [&](const Tensor& wv) {
    Graph g;
    return g.value(ops::sum(g, ops::linear(g, g.constant(x), g.constant(wv)))).item();
  };
  set_backward_fault("linear", 1.01);
  Graph g;
  g.backward(ops::sum(g, ops::linear(g, g.constant(x), g.parameter(w))));
  set_backward_fault("", 1.0);
  CHECK(relative_error(w.grad, finite_diff(f, w.value)) > 1e-4);
}

TEST_CASE("graph record is topological and replays") {
  Graph g;
  const Var a = g.variable(Tensor({2}, {1.0, 2.0}));
  const Var b = ops::scale(g, a, 3.0);
  const Var c = ops::sum(g, ops::mul(g, b, a));
  CHECK(g.value(c).item() == doctest::Approx(15.0));
  const auto rec = g.record();
  CHECK_NOTHROW(check_acyclic(rec));
  const auto values = g.replay();
  CHECK(values[c.id].item() == doctest::Approx(15.0));
  g.backward(c);
  CHECK(g.grad(a)[0] == doctest::Approx(6.0));
  CHECK(g.grad(a)[1] == doctest::Approx(12.0));

  std::vector<RecordEntry> bad{{"", {}, 0}, {"scale", {2}, 1}, {"sum", {1}, 2}};
  CHECK_THROWS_AS(check_acyclic(bad), GraphError);
}

TEST_CASE("non-finite forward values are rejected") {
  Graph g;
  const Var a = g.constant(Tensor({1}, std::numeric_limits<double>::infinity()));
  CHECK_THROWS_AS(ops::scale(g, a, 1.0), NumericError);
}

TEST_CASE("channel shuffle and slicing") {
  Graph g;
  const Var x = g.constant(Tensor({1, 4}, {0, 1, 2, 3}));
  const Var s = ops::channel_shuffle(g, x, 2);
  CHECK(g.value(s) == Tensor({1, 4}, {0, 2, 1, 3}));
  const Var lo = ops::slice_channels(g, x, 0, 2), hi = ops::slice_channels(g, x, 2, 4);
  const Tensor joined = g.value(ops::concat_channels(g, lo, hi));
  CHECK(joined == g.value(x));
  CHECK_THROWS_AS(ops::channel_shuffle(g, g.constant(Tensor({1, 3})), 2), ShapeError);
  CHECK_THROWS_AS(ops::permute_tokens(g, g.constant(Tensor({1, 3, 1})), {0, 0, 1}), ValidationError);
}

TEST_CASE("extract_patches gathers row-major patches") {
  // 1 x 4 x 4 x 4 volume with value = flat index; patch 2.
  Tensor v({1, 4, 4, 4});
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  Graph g;
  const Tensor& p = g.value(ops::extract_patches(g, g.constant(v), 2));
  CHECK(p.shape() == Shape{1, 2, 2, 2, 8});
  // Patch (1, 0, 1): origin voxel (2, 0, 2).
  const std::size_t base = ((1 * 2 + 0) * 2 + 1) * 8;
  std::size_t k = 0;
  for (std::size_t a = 0; a < 2; ++a)
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t c = 0; c < 2; ++c) CHECK(p[base + k++] == double(((2 + a) * 4 + b) * 4 + 2 + c));
  CHECK_THROWS_AS(ops::extract_patches(g, g.constant(Tensor({1, 5, 4, 4})), 2), ValidationError);
}
