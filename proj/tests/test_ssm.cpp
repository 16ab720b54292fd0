// Selective scan: discretisation, both scan schedules, the closed-form oracle
// and the fused graph op.

#include <cmath>
#include <random>

#include "doctest.h"
#include "vmamba/error.hpp"
#include "vmamba/ops.hpp"
#include "vmamba/ssm.hpp"

using namespace vmamba;
using ssm::ScanMode;

namespace {

Tensor random_x(std::size_t l, std::size_t e, std::mt19937_64& rng) { return Tensor::uniform({l, e}, rng, -1, 1); }

}  // namespace

TEST_CASE("hippo diagonal init") {
  const auto a = ssm::hippo_diag_init(4);
  CHECK(a == std::vector<double>{-1, -2, -3, -4});
  CHECK_THROWS_AS(ssm::hippo_diag_init(0), ValidationError);
}

TEST_CASE("zero projections give delta = softplus(0)") {
  std::mt19937_64 rng(0);
  auto p = ssm::SsmParams::init(3, 4, rng);
  p.w_delta.fill(0);
  p.b_delta.fill(0);
  const std::vector<double> x{0.3, -0.2, 0.9};
  const auto proj = ssm::selective_projections(x, p);
  for (double d : proj.delta) CHECK(d == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(proj.b.size() == 4);
}

TEST_CASE("discretize closed form") {
  const std::vector<double> a{-1.0}, b{2.0};
  const auto z = ssm::discretize(a, b, std::log(2.0));
  CHECK(z.a_bar[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(z.b_bar[0] == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(ssm::discretize(a, b, -0.1), ValidationError);
}

TEST_CASE("hand-unrolled recurrence") {
  const Tensor a_bar({3, 1}, 0.5), u({3, 1}, {1, 0, 0});
  const Tensor expect({3, 1}, {1, 0.5, 0.25});
  CHECK(max_abs_diff(ssm::scan_sequential(a_bar, u), expect) <= 1e-15);
  CHECK(max_abs_diff(ssm::scan_parallel(a_bar, u), expect) <= 1e-15);
  CHECK(max_abs_diff(ssm::scan_parallel(a_bar, u, 4), expect) <= 1e-15);
}

TEST_CASE("parallel scan matches sequential on random instances") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<std::size_t> len(1, 512), lanes(1, 16);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t l = len(rng), k = lanes(rng);
    const Tensor a = Tensor::uniform({l, k}, rng, 0.0, 1.0), u = Tensor::uniform({l, k}, rng, -1, 1);
    const Tensor seq = ssm::scan_sequential(a, u);
    CHECK(max_abs_diff(seq, ssm::scan_parallel(a, u)) <= 1e-10);
    CHECK(max_abs_diff(seq, ssm::scan_parallel(a, u, 3)) <= 1e-10);
  }
}

TEST_CASE("scan with an initial state") {
  std::mt19937_64 rng(2);
  const std::size_t l = 37, k = 5;
  const auto a = Tensor::uniform({l, k}, rng, 0, 1), u = Tensor::uniform({l, k}, rng, -1, 1);
  const auto h0 = Tensor::uniform({k}, rng, -1, 1);
  std::vector<double> h1(l * k), h2(l * k);
  ssm::scan_sequential<double>(a.data(), u.data(), h1, k, h0.data());
  ssm::scan_parallel<double>(a.data(), u.data(), h2, k, h0.data());
  for (std::size_t i = 0; i < h1.size(); ++i) CHECK(std::abs(h1[i] - h2[i]) <= 1e-12);
  CHECK(h1[0] == doctest::Approx(a[0] * h0[0] + u[0]));
}

TEST_CASE("combine is associative") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> d(-1, 1);
  for (int trial = 0; trial < 20; ++trial) {
    ssm::ScanElement<double> e[3];
    for (auto& x : e)
      for (int i = 0; i < 6; ++i) {
        x.a.push_back(d(rng));
        x.b.push_back(d(rng));
      }
    const auto left = ssm::combine(ssm::combine(e[0], e[1]), e[2]);
    const auto right = ssm::combine(e[0], ssm::combine(e[1], e[2]));
    for (int i = 0; i < 6; ++i) {
      CHECK(std::abs(left.a[i] - right.a[i]) <= 1e-12);
      CHECK(std::abs(left.b[i] - right.b[i]) <= 1e-12);
    }
  }
}

TEST_CASE("selective scan agrees with the unrolled oracle") {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<std::size_t> len(1, 64), st(1, 16), ch(1, 4);
  for (int trial = 0; trial < 25; ++trial) {
    const std::size_t l = len(rng), n = st(rng), e = ch(rng);
    const auto p = ssm::SsmParams::init(e, n, rng);
    const Tensor x = random_x(l, e, rng);
    const Tensor oracle = ssm::unrolled_oracle(x, p);
    const Tensor seq = ssm::selective_scan(x, p, ScanMode::sequential);
    CHECK(max_abs_diff(seq, oracle) <= 1e-8);
    CHECK(max_abs_diff(ssm::selective_scan(x, p, ScanMode::parallel), seq) <= 1e-10);
  }
}

TEST_CASE("recurrent inference matches the full scan") {
  std::mt19937_64 rng(4);
  const std::size_t l = 50, e = 3, n = 6;
  const auto p = ssm::SsmParams::init(e, n, rng);
  const Tensor x = random_x(l, e, rng);
  std::vector<double> delta(l * e), b(l * n), c(l * n);
  for (std::size_t t = 0; t < l; ++t) {
    const auto proj = ssm::selective_projections(std::span<const double>(x.ptr() + t * e, e), p);
    std::copy(proj.delta.begin(), proj.delta.end(), delta.begin() + t * e);
    std::copy(proj.b.begin(), proj.b.end(), b.begin() + t * n);
    std::copy(proj.c.begin(), proj.c.end(), c.begin() + t * n);
  }
  const ssm::ScanProblem<double> prob{l, e, n, x.ptr(), delta.data(), p.a.ptr(), b.data(), c.data(), p.d.ptr()};
  std::vector<double> y1(l * e), y2(l * e), ab(l * e * n), h(l * e * n);
  ssm::scan_recurrent(prob, y1.data());
  ssm::scan_core(prob, ScanMode::parallel, y2.data(), ab.data(), h.data());
  for (std::size_t i = 0; i < y1.size(); ++i) CHECK(std::abs(y1[i] - y2[i]) <= 1e-10);
}

TEST_CASE("single precision kernel tracks double") {
  std::mt19937_64 rng(5);
  const std::size_t l = 200, e = 2, n = 8;
  std::uniform_real_distribution<double> u(-1, 1), dl(1e-3, 1e-1);
  std::vector<double> x(l * e), delta(l * e), b(l * n), c(l * n), d{1.0, 0.5};
  for (auto& v : x) v = u(rng);
  for (auto& v : delta) v = dl(rng);
  for (auto& v : b) v = u(rng);
  for (auto& v : c) v = u(rng);
  const auto a = ssm::hippo_diag_init(n);
  auto to_f = [](const std::vector<double>& v) { return std::vector<float>(v.begin(), v.end()); };
  const auto xf = to_f(x), df = to_f(delta), af = to_f(a), bf = to_f(b), cf = to_f(c), ddf = to_f(d);
  std::vector<double> yd(l * e);
  std::vector<float> yf(l * e);
  ssm::scan_core(ssm::ScanProblem<double>{l, e, n, x.data(), delta.data(), a.data(), b.data(), c.data(), d.data()},
                 ScanMode::sequential, yd.data());
  ssm::scan_core(ssm::ScanProblem<float>{l, e, n, xf.data(), df.data(), af.data(), bf.data(), cf.data(), ddf.data()},
                 ScanMode::sequential, yf.data());
  for (std::size_t i = 0; i < yd.size(); ++i) CHECK(std::abs(yd[i] - yf[i]) <= 1e-4);
}

TEST_CASE("decay invariant: prod A_bar in (0, 1) and non-increasing in length") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> dl(1e-4, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    const auto a = ssm::hippo_diag_init(16);
    std::vector<double> prod(16, 1.0);
    std::vector<double> prev = prod;
    for (int t = 0; t < 64; ++t) {
      const auto z = ssm::discretize(a, std::vector<double>(16, 1.0), dl(rng));
      for (std::size_t k = 0; k < 16; ++k) {
        prod[k] *= z.a_bar[k];
        CHECK(prod[k] < 1.0);
        CHECK(prod[k] >= 0.0);
        CHECK(prod[k] <= prev[k]);
      }
      prev = prod;
    }
  }
}

TEST_CASE("params validation") {
  std::mt19937_64 rng(1);
  auto p = ssm::SsmParams::init(2, 3, rng);
  CHECK_NOTHROW(p.validate());
  p.a[0] = 0.0;
  CHECK_THROWS_AS(p.validate(), ValidationError);
  auto q = ssm::SsmParams::init(2, 3, rng);
  q.w_b = Tensor({3, 3});
  CHECK_THROWS_AS(q.validate(), ShapeError);
  CHECK(ssm::parse_scan_mode("parallel") == ScanMode::parallel);
  CHECK_THROWS_AS(ssm::parse_scan_mode("diagonal"), ValidationError);
}

TEST_CASE("graph scan: both schedules give the same value and gradient") {
  std::mt19937_64 rng(31);
  const std::size_t l = 19, e = 3, n = 4;
  auto p = ssm::SsmParams::init(e, n, rng);
  Tensor a_log({n});
  for (std::size_t i = 0; i < n; ++i) a_log[i] = std::log(-p.a[i]);
  const Tensor x = Tensor::uniform({2, l, e}, rng, -1, 1);
  Tensor grads[2];
  double values[2];
  for (int m = 0; m < 2; ++m) {
    Graph g;
    const Var xv = g.variable(x);
    const ssm::SsmVars vars{g.constant(p.w_delta), g.constant(p.b_delta), g.constant(p.w_b),
                            g.constant(p.w_c),     g.constant(a_log),     g.constant(p.d)};
    const Var y = ssm::selective_scan(g, xv, vars, m == 0 ? ScanMode::sequential : ScanMode::parallel);
    const Var loss = ops::sum(g, ops::mul(g, y, y));
    values[m] = g.value(loss).item();
    g.backward(loss);
    grads[m] = g.grad(xv);
  }
  CHECK(values[0] == doctest::Approx(values[1]).epsilon(1e-12));
  CHECK(max_abs_diff(grads[0], grads[1]) <= 1e-10);
}
