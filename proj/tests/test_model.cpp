// Model configuration, the hybrid block components and the full classifier.

#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "vmamba/architecture.hpp"
#include "vmamba/error.hpp"

using namespace vmamba;
using model::ModelConfig;
using ssm::ScanMode;

namespace {

ssm::SsmVars shared_direction(Graph& g, std::size_t e, std::size_t n, std::mt19937_64& rng) {
  auto p = ssm::SsmParams::init(e, n, rng);
  Tensor a_log({n});
  for (std::size_t i = 0; i < n; ++i) a_log[i] = std::log(-p.a[i]);
  return {g.constant(p.w_delta), g.constant(p.b_delta), g.constant(p.w_b),
          g.constant(p.w_c),     g.constant(a_log),     g.constant(p.d)};
}

// Flip a [D, H, W, C] grid along the selected axes.
Tensor flip(const Tensor& t, bool fd, bool fh, bool fw) {
  const std::size_t d = t.dim(0), h = t.dim(1), w = t.dim(2), c = t.dim(3);
  Tensor out(t.shape());
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < h; ++j)
      for (std::size_t k = 0; k < w; ++k)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t si = fd ? d - 1 - i : i, sj = fh ? h - 1 - j : j, sk = fw ? w - 1 - k : k;
          out[((i * h + j) * w + k) * c + ch] = t[((si * h + sj) * w + sk) * c + ch];
        }
  return out;
}

Tensor run_ss3d(const Tensor& grid, std::uint64_t seed, std::size_t directions) {
  Graph g;
  std::mt19937_64 rng(seed);
  const auto dir = shared_direction(g, grid.dim(3), 3, rng);
  const std::vector<ssm::SsmVars> dirs(directions, dir);
  return g.value(model::ss3d(g, g.constant(grid), dirs, ScanMode::sequential));
}

}  // namespace

TEST_CASE("profiles validate and round-trip through JSON") {
  for (const auto& c : {ModelConfig::reference_profile(), ModelConfig::tiny_profile()}) {
    CHECK_NOTHROW(c.validate());
    CHECK(ModelConfig::from_json(c.to_json()) == c);
  }
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"patchsize", 4}}), ValidationError);
  CHECK_THROWS_AS(ModelConfig::from_json(nlohmann::json{{"patch_size", "four"}}), ValidationError);
}

TEST_CASE("config validation names the violated constraint") {
  auto bad = ModelConfig::tiny_profile();
  bad.stage_dims = {8, 12};
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("double"), ValidationError);
  bad = ModelConfig::tiny_profile();
  bad.num_classes = 4;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
  bad = ModelConfig::tiny_profile();
  bad.input_dims = {32, 32, 18};
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("divisible"), ValidationError);
  bad = ModelConfig::tiny_profile();
  bad.input_dims = {32, 32, 12};  // grid 8 x 8 x 3 cannot be merged
  CHECK_THROWS_WITH_AS(bad.validate(), doctest::Contains("stage0"), ValidationError);
  bad = ModelConfig::tiny_profile();
  bad.scan_directions = 4;
  CHECK_THROWS_AS(bad.validate(), ValidationError);
}

TEST_CASE("patch embedding token counts") {
  Graph g;
  const Var tiny = ops::extract_patches(g, g.constant(Tensor({1, 32, 32, 16})), 4);
  CHECK(g.value(tiny).shape() == Shape{1, 8, 8, 4, 64});
  CHECK(8 * 8 * 4 == 256);
  const Var ref = ops::extract_patches(g, g.constant(Tensor({1, 224, 224, 160})), 16);
  const auto& s = g.value(ref).shape();
  CHECK(s == Shape{1, 14, 14, 10, 4096});
  CHECK(s[1] * s[2] * s[3] == 1960);
}

TEST_CASE("patch embedding equals gather then linear") {
  std::mt19937_64 rng(3);
  const Tensor vol = Tensor::uniform({1, 4, 4, 4}, rng, 0, 1);
  const Tensor w = Tensor::uniform({8, 3}, rng, -1, 1), b = Tensor::uniform({3}, rng, -1, 1);
  Graph g;
  const Tensor& out = g.value(model::patch_embed(g, g.constant(vol), 2, g.constant(w), g.constant(b)));
  for (std::size_t pd = 0; pd < 2; ++pd)
    for (std::size_t ph = 0; ph < 2; ++ph)
      for (std::size_t pw = 0; pw < 2; ++pw) {
        std::vector<double> patch;
        for (std::size_t a = 0; a < 2; ++a)
          for (std::size_t bb = 0; bb < 2; ++bb)
            for (std::size_t c = 0; c < 2; ++c) patch.push_back(vol[((2 * pd + a) * 4 + 2 * ph + bb) * 4 + 2 * pw + c]);
        for (std::size_t j = 0; j < 3; ++j) {
          double acc = b[j];
          for (std::size_t i = 0; i < 8; ++i) acc += patch[i] * w[i * 3 + j];
          CHECK(std::abs(out[((pd * 2 + ph) * 2 + pw) * 3 + j] - acc) <= 1e-12);
        }
      }
}

TEST_CASE("conv branch with gamma 0 convolves the constant relu(beta) grid") {
  std::mt19937_64 rng(6);
  const std::size_t c = 2;
  const Tensor x = Tensor::uniform({1, 3, 3, 3, c}, rng, -1, 1);
  const Tensor kernel = Tensor::uniform({3, 3, 3, c, c}, rng, -1, 1), bias = Tensor::uniform({c}, rng, -1, 1);
  const Tensor beta({c}, {0.4, -0.3});
  Graph g;
  ops::BatchNormState bn(c);
  const model::ConvBranchVars vars{g.constant(Tensor({c}, 0.0)), g.constant(beta), g.constant(kernel),
                                   g.constant(bias)};
  const Tensor got = g.value(model::conv_branch(g, g.constant(x), vars, bn, ops::NormMode::train));
  Tensor constant(x.shape());
  for (std::size_t i = 0; i < constant.size(); ++i) constant[i] = std::max(0.0, beta[i % c]);
  const Tensor expect = g.value(ops::conv3d(g, g.constant(constant), g.constant(kernel), g.constant(bias)));
  CHECK(max_abs_diff(got, expect) <= 1e-12);
}

TEST_CASE("scan orders are permutations, each paired with its reverse") {
  const auto orders = model::scan_orders(2, 3, 4, 6);
  REQUIRE(orders.size() == 6);
  for (const auto& o : orders) {
    auto sorted = o;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
  }
  for (std::size_t k = 0; k < 6; k += 2) CHECK(std::equal(orders[k].begin(), orders[k].end(), orders[k + 1].rbegin()));
  CHECK(orders[0][1] == 1);  // width varies fastest in the depth-major order
  CHECK(model::scan_orders(2, 3, 4, 2).size() == 2);
}

TEST_CASE("ss3d on a single voxel equals the single-token scan") {
  std::mt19937_64 rng(12);
  const Tensor grid = Tensor::uniform({1, 1, 1, 3}, rng, -1, 1);
  Graph g;
  std::mt19937_64 prng(5);
  auto p = ssm::SsmParams::init(3, 3, prng);
  Tensor a_log({3});
  for (std::size_t i = 0; i < 3; ++i) a_log[i] = std::log(-p.a[i]);
  const ssm::SsmVars dir{g.constant(p.w_delta), g.constant(p.b_delta), g.constant(p.w_b),
                         g.constant(p.w_c),     g.constant(a_log),     g.constant(p.d)};
  const std::vector<ssm::SsmVars> dirs(6, dir);
  const Tensor got = g.value(model::ss3d(g, g.constant(grid), dirs, ScanMode::parallel));
  const Tensor expect = ssm::selective_scan(grid.reshaped({1, 3}), p, ScanMode::sequential);
  CHECK(max_abs_diff(got.reshaped({1, 3}), expect) <= 1e-12);
}

TEST_CASE("ss3d with shared parameters commutes with point reflection") {
  std::mt19937_64 rng(13);
  const Tensor grid = Tensor::uniform({2, 3, 4, 2}, rng, -1, 1);
  const Tensor out = run_ss3d(grid, 7, 6);
  const Tensor mirrored = run_ss3d(flip(grid, true, true, true), 7, 6);
  CHECK(max_abs_diff(mirrored, flip(out, true, true, true)) <= 1e-12);
}

TEST_CASE("ss3d single-axis reflection on line grids") {
  std::mt19937_64 rng(14);
  for (int axis = 0; axis < 3; ++axis) {
    Shape s{1, 1, 1, 2};
    s[axis] = 5;
    const Tensor grid = Tensor::uniform(s, rng, -1, 1);
    const Tensor out = run_ss3d(grid, 9, 6);
    const Tensor mirrored = run_ss3d(flip(grid, axis == 0, axis == 1, axis == 2), 9, 6);
    CHECK(max_abs_diff(mirrored, flip(out, axis == 0, axis == 1, axis == 2)) <= 1e-12);
  }
}

TEST_CASE("tiny model forward") {
  auto cfg = ModelConfig::tiny_profile();
  model::Model m(cfg);
  CHECK(m.parameters().contains("stage0.block0.conv.kernel"));
  CHECK(m.parameters().contains("stage1.block0.ssm.dir5.a_log"));
  CHECK(m.parameters().contains("head.weight"));
  CHECK(m.norm_states().size() == 2);

  std::mt19937_64 rng(2);
  const Tensor batch = Tensor::uniform({2, 32, 32, 16}, rng, 0, 1);
  Graph g;
  const Var logits = m.forward_logits(g, batch, ops::NormMode::train, ScanMode::sequential);
  CHECK(g.value(logits).shape() == Shape{2, 3});

  // One volume at a time, eval-mode normalisation.
  Tensor single({32, 32, 16});
  std::copy(batch.ptr(), batch.ptr() + single.size(), single.ptr());
  const Tensor p = m.predict_proba(single);
  CHECK(p.size() == 3);
  CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(max_abs_diff(p, m.predict_proba(single, ScanMode::parallel)) <= 1e-10);

  Graph g2;
  CHECK_THROWS_AS(m.forward_logits(g2, Tensor({16, 16, 16}), ops::NormMode::eval, ScanMode::sequential),
                  ValidationError);
}

TEST_CASE("model initialisation is seeded") {
  auto cfg = ModelConfig::tiny_profile();
  model::Model a(cfg), b(cfg);
  cfg.seed = 1;
  model::Model c(cfg);
  CHECK(a.parameters().at("head.weight").value == b.parameters().at("head.weight").value);
  CHECK_FALSE(a.parameters().at("head.weight").value == c.parameters().at("head.weight").value);
  // A = -(n + 1) at initialisation.
  const auto& a_log = a.parameters().at("stage0.block0.ssm.dir0.a_log").value;
  for (std::size_t i = 0; i < a_log.size(); ++i) CHECK(-std::exp(a_log[i]) == doctest::Approx(-double(i + 1)));
}
