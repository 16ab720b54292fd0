// Gradient registry, randomised scan checks and the attention benchmark.

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "doctest.h"
#include "vmamba/architecture.hpp"
#include "vmamba/bench.hpp"
#include "vmamba/checks.hpp"
#include "vmamba/error.hpp"

using namespace vmamba;

TEST_CASE("every op recorded by the model has a gradient case") {
  const auto names = checks::differentiable_op_names();
  std::set<std::string> registered(names.begin(), names.end());
  std::set<std::string> covered;
  for (const auto& c : checks::grad_cases(false)) covered.insert(c.name);
  for (const auto& n : registered) CHECK_MESSAGE(covered.count(n) == 1, n);

  model::Model m(model::ModelConfig::tiny_profile());
  Graph g;
  const Var logits = m.forward_logits(g, Tensor({2, 32, 32, 16}, 0.5), ops::NormMode::train, ssm::ScanMode::parallel);
  const std::vector<std::size_t> labels{0, 2};
  ops::cross_entropy(g, logits, labels);
  for (const auto& e : g.record())
    if (!e.op.empty()) CHECK_MESSAGE(registered.count(std::string(e.op)) == 1, e.op);
}

TEST_CASE("op gradient cases pass and a faulty rule is caught") {
  auto cases = checks::grad_cases(false);
  const auto rows = checks::run_grad_checks(cases);
  for (const auto& r : rows) CHECK_MESSAGE(r.pass, r.name << " rel " << r.rel_error);

  set_backward_fault("softplus", 1.01);
  const auto faulty = checks::run_grad_checks(cases);
  set_backward_fault("", 1.0);
  const auto it = std::find_if(faulty.begin(), faulty.end(), [](const auto& r) { return r.name == "softplus"; });
  REQUIRE(it != faulty.end());
  CHECK_FALSE(it->pass);
  const std::string table = checks::format_grad_table(faulty);
  CHECK(table.find("FAIL") != std::string::npos);
}

TEST_CASE("scan check: double, single and reporting") {
  checks::ScanCheckConfig cfg;
  cfg.trials = 20;
  cfg.max_length = 128;
  const auto r = checks::run_scan_check(cfg);
  CHECK(r.passed());
  CHECK(r.trials == 20);
  CHECK(r.max_parallel_dev <= 1e-10);

  cfg.single_precision = true;
  CHECK(checks::run_scan_check(cfg).passed());

  // An impossible tolerance must produce located failures.
  cfg.single_precision = false;
  cfg.tolerance = 1e-300;
  cfg.trials = 5;
  const auto strict = checks::run_scan_check(cfg);
  CHECK_FALSE(strict.passed());
  for (const auto& f : strict.failures) {
    CHECK(f.length >= 1);
    CHECK(f.state >= 1);
  }
}

TEST_CASE("attention matches a pairwise dot-product oracle") {
  std::mt19937_64 rng(2);
  const std::size_t l = 9, e = 4;
  const Tensor x = Tensor::uniform({l, e}, rng, -1, 1);
  const Tensor wq = Tensor::uniform({e, e}, rng, -1, 1), wk = Tensor::uniform({e, e}, rng, -1, 1),
               wv = Tensor::uniform({e, e}, rng, -1, 1);
  const auto att = bench::reference_attention(x, wq, wk, wv);
  auto proj = [&](const Tensor& w, std::size_t t, std::size_t j) {
    double acc = 0;
    for (std::size_t i = 0; i < e; ++i) acc += x[t * e + i] * w[i * e + j];
    return acc;
  };
  for (std::size_t i = 0; i < l; ++i) {
    std::vector<double> s(l);
    double total = 0;
    for (std::size_t j = 0; j < l; ++j) {
      double dot = 0;
      for (std::size_t c = 0; c < e; ++c) dot += proj(wq, i, c) * proj(wk, j, c);
      s[j] = std::exp(dot / std::sqrt(double(e)));
      total += s[j];
    }
    double row = 0;
    for (std::size_t j = 0; j < l; ++j) {
      CHECK(std::abs(att.weights[i * l + j] - s[j] / total) <= 1e-10);
      row += att.weights[i * l + j];
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-12));
    for (std::size_t c = 0; c < e; ++c) {
      double o = 0;
      for (std::size_t j = 0; j < l; ++j) o += s[j] / total * proj(wv, j, c);
      CHECK(std::abs(att.output[i * e + c] - o) <= 1e-10);
    }
  }
  CHECK_THROWS_AS(bench::reference_attention(x, Tensor({3, 3}), wk, wv), ShapeError);
}

TEST_CASE("log-log slope fit") {
  const std::vector<double> x{1, 2, 4, 8}, y{3, 12, 48, 192};
  CHECK(bench::loglog_slope(x, y) == doctest::Approx(2.0));
  std::vector<bench::BenchRecord> recs;
  // Fit uses only the longer half: slope 1 there despite a flat start.
  for (double l : {100.0, 200.0, 400.0, 800.0})
    recs.push_back({bench::Mechanism::scan_sequential, std::size_t(l), l < 300 ? 1.0 : l, 8});
  CHECK(bench::fitted_slope(recs, bench::Mechanism::scan_sequential) == doctest::Approx(1.0));
  CHECK_THROWS_AS(bench::loglog_slope(std::vector<double>{1}, std::vector<double>{1}), ValidationError);
}

TEST_CASE("bench config and output") {
  bench::BenchConfig cfg;
  cfg.lengths = {32, 64};
  cfg.repetitions = 5;
  const auto records = bench::run_bench(cfg);
  CHECK(records.size() == 6);
  for (const auto& r : records) CHECK(r.median_seconds > 0.0);
  const std::string csv = bench::bench_csv(records);
  CHECK(csv.rfind("mechanism,L,median_seconds\nattention,32,", 0) == 0);
  cfg.repetitions = 3;
  CHECK_THROWS_AS(bench::run_bench(cfg), ValidationError);
  cfg.repetitions = 5;
  cfg.lengths = {64, 32};
  CHECK_THROWS_AS(bench::run_bench(cfg), ValidationError);
}
