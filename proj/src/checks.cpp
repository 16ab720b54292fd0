#include "vmamba/checks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>

#include "vmamba/architecture.hpp"
#include "vmamba/error.hpp"
#include "vmamba/ops.hpp"
#include "vmamba/ssm.hpp"
#include "vmamba/volume.hpp"

namespace vmamba::checks {

std::string_view to_string(GradKind kind) {
  switch (kind) {
    case GradKind::op: return "op";
    case GradKind::component: return "component";
    case GradKind::model: return "model";
  }
  return "?";
}

std::vector<std::string_view> differentiable_op_names() {
  return {"linear",          "conv3d",          "batch_norm",     "layer_norm",      "relu",
          "silu",            "softplus",        "sigmoid",        "softmax",         "cross_entropy",
          "add",             "mul",             "scale",          "sum",             "reshape",
          "slice_channels",  "concat_channels", "channel_shuffle", "permute_tokens", "mean_tokens",
          "extract_patches", "merge_neighborhoods", "ssm_scan"};
}

namespace {

using Builder = std::function<Var(Graph&, const std::vector<Var>&)>;

constexpr double kStep = 1e-5;
constexpr std::size_t kMaxSamples = 24;

std::vector<std::size_t> sample_indices(std::size_t size, std::size_t limit, std::mt19937_64& rng) {
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), 0);
  if (size <= limit) return idx;
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(limit);
  std::sort(idx.begin(), idx.end());
  return idx;
}

// Projects the output on fixed random weights so every output element
// contributes to the scalar being differentiated.
double projected_loss(const Builder& build, const std::vector<Tensor>& inputs, Tensor& weights,
                      std::vector<Tensor>* grads) {
  Graph g;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(g.variable(t));
  Var out = build(g, vars);
  if (weights.empty()) {
    std::mt19937_64 rng(0x5eed);
    weights = Tensor::normal(g.value(out).shape(), rng, 0.0, 1.0);
  }
  Var loss = ops::sum(g, ops::mul(g, out, g.constant(weights)));
  if (grads != nullptr) {
    g.backward(loss);
    grads->clear();
    for (auto v : vars) grads->push_back(g.grad(v));
  }
  return g.value(loss).item();
}

double check_builder(const Builder& build, std::vector<Tensor> inputs, std::uint64_t seed) {
  Tensor weights;
  std::vector<Tensor> analytic;
  projected_loss(build, inputs, weights, &analytic);
  std::mt19937_64 rng(seed);
  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto idx = sample_indices(inputs[i].size(), kMaxSamples, rng);
    Tensor a({idx.size()}), n({idx.size()});
    for (std::size_t s = 0; s < idx.size(); ++s) {
      const double saved = inputs[i][idx[s]];
      inputs[i][idx[s]] = saved + kStep;
      const double up = projected_loss(build, inputs, weights, nullptr);
      inputs[i][idx[s]] = saved - kStep;
      const double down = projected_loss(build, inputs, weights, nullptr);
      inputs[i][idx[s]] = saved;
      a[s] = analytic[i][idx[s]];
      n[s] = (up - down) / (2.0 * kStep);
    }
    worst = std::max(worst, relative_error(a, n));
  }
  return worst;
}

Tensor normal(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  return Tensor::normal(std::move(shape), rng, 0.0, scale);
}

// Normal values pushed at least `gap` away from zero, for ops with a kink there.
Tensor away_from_zero(Shape shape, std::mt19937_64& rng, double gap = 0.1) {
  Tensor t = normal(std::move(shape), rng);
  for (double& v : t.data()) v += v >= 0.0 ? gap : -gap;
  return t;
}

Tensor positive(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  return Tensor::uniform(std::move(shape), rng, lo, hi);
}

GradCase op_case(std::string name, Builder build, std::function<std::vector<Tensor>(std::mt19937_64&)> make,
                 std::uint64_t seed, GradKind kind = GradKind::op, double tolerance = 1e-4) {
  auto run = [build = std::move(build), make = std::move(make), seed] {
    std::mt19937_64 rng(seed);
    return check_builder(build, make(rng), seed + 1);
  };
  return {std::move(name), kind, tolerance, std::move(run)};
}

// Direction parameters at graph level: w_delta, b_delta, w_b, w_c, a_log, d.
std::vector<Tensor> direction_inputs(std::size_t e, std::size_t n, std::mt19937_64& rng) {
  auto p = ssm::SsmParams::init(e, n, rng);
  Tensor a_log({n});
  for (std::size_t k = 0; k < n; ++k) a_log[k] = std::log(-p.a[k]);
  // Larger projections than the initialiser so every path carries signal.
  return {normal({e, e}, rng, 0.5), normal({e}, rng, 0.5), normal({e, n}, rng, 0.5), normal({e, n}, rng, 0.5),
          a_log, normal({e}, rng)};
}

ssm::SsmVars direction_vars(const std::vector<Var>& v, std::size_t at) {
  return {v[at], v[at + 1], v[at + 2], v[at + 3], v[at + 4], v[at + 5]};
}

std::vector<GradCase> op_cases() {
  using ops::Activation;
  std::vector<GradCase> cases;
  cases.push_back(op_case(
      "linear", [](Graph& g, const auto& v) { return ops::linear(g, v[0], v[1], v[2]); },
      [](auto& rng) { return std::vector{normal({2, 3, 4}, rng), normal({4, 5}, rng), normal({5}, rng)}; }, 11));
  cases.push_back(op_case(
      "conv3d", [](Graph& g, const auto& v) { return ops::conv3d(g, v[0], v[1], v[2]); },
      [](auto& rng) {
        return std::vector{normal({2, 3, 3, 2, 2}, rng), normal({3, 3, 3, 2, 3}, rng), normal({3}, rng)};
      },
      12));
  cases.push_back(op_case(
      "batch_norm",
      [](Graph& g, const auto& v) {
        ops::BatchNormState state(3);
        return ops::batch_norm(g, v[0], v[1], v[2], state, ops::NormMode::train);
      },
      [](auto& rng) { return std::vector{normal({2, 2, 2, 1, 3}, rng), normal({3}, rng), normal({3}, rng)}; }, 13));
  cases.push_back(op_case(
      "layer_norm", [](Graph& g, const auto& v) { return ops::layer_norm(g, v[0], v[1], v[2]); },
      [](auto& rng) { return std::vector{normal({4, 5}, rng), normal({5}, rng), normal({5}, rng)}; }, 14));
  const std::pair<const char*, Activation> acts[] = {
      {"relu", Activation::relu}, {"silu", Activation::silu}, {"softplus", Activation::softplus},
      {"sigmoid", Activation::sigmoid}};
  std::uint64_t seed = 15;
  for (const auto& [name, kind] : acts) {
    cases.push_back(op_case(
        name, [kind](Graph& g, const auto& v) { return ops::activation(g, kind, v[0]); },
        [](auto& rng) { return std::vector{away_from_zero({3, 4}, rng, 0.05)}; }, seed++));
  }
  cases.push_back(op_case(
      "softmax", [](Graph& g, const auto& v) { return ops::softmax(g, v[0], 1); },
      [](auto& rng) { return std::vector{normal({3, 4}, rng)}; }, 20));
  cases.push_back(op_case(
      "cross_entropy",
      [](Graph& g, const auto& v) {
        const std::vector<std::size_t> labels{0, 2, 1, 2};
        return ops::cross_entropy(g, v[0], labels);
      },
      [](auto& rng) { return std::vector{normal({4, 3}, rng)}; }, 21));
  cases.push_back(op_case(
      "add", [](Graph& g, const auto& v) { return ops::add(g, v[0], v[1]); },
      [](auto& rng) { return std::vector{normal({3, 4}, rng), normal({3, 4}, rng)}; }, 22));
  cases.push_back(op_case(
      "mul", [](Graph& g, const auto& v) { return ops::mul(g, v[0], v[1]); },
      [](auto& rng) { return std::vector{normal({3, 4}, rng), normal({3, 4}, rng)}; }, 23));
  cases.push_back(op_case(
      "scale", [](Graph& g, const auto& v) { return ops::scale(g, v[0], -1.7); },
      [](auto& rng) { return std::vector{normal({3, 4}, rng)}; }, 24));
  cases.push_back(op_case(
      "sum", [](Graph& g, const auto& v) { return ops::sum(g, v[0]); },
      [](auto& rng) { return std::vector{normal({3, 4}, rng)}; }, 25));
  cases.push_back(op_case(
      "reshape", [](Graph& g, const auto& v) { return ops::reshape(g, v[0], {3, 4}); },
      [](auto& rng) { return std::vector{normal({2, 6}, rng)}; }, 26));
  cases.push_back(op_case(
      "slice_channels", [](Graph& g, const auto& v) { return ops::slice_channels(g, v[0], 1, 4); },
      [](auto& rng) { return std::vector{normal({3, 6}, rng)}; }, 27));
  cases.push_back(op_case(
      "concat_channels", [](Graph& g, const auto& v) { return ops::concat_channels(g, v[0], v[1]); },
      [](auto& rng) { return std::vector{normal({3, 2}, rng), normal({3, 3}, rng)}; }, 28));
  cases.push_back(op_case(
      "channel_shuffle", [](Graph& g, const auto& v) { return ops::channel_shuffle(g, v[0], 2); },
      [](auto& rng) { return std::vector{normal({3, 6}, rng)}; }, 29));
  cases.push_back(op_case(
      "permute_tokens", [](Graph& g, const auto& v) { return ops::permute_tokens(g, v[0], {3, 0, 4, 1, 2}); },
      [](auto& rng) { return std::vector{normal({2, 5, 3}, rng)}; }, 30));
  cases.push_back(op_case(
      "mean_tokens", [](Graph& g, const auto& v) { return ops::mean_tokens(g, v[0]); },
      [](auto& rng) { return std::vector{normal({2, 2, 2, 2, 3}, rng)}; }, 31));
  cases.push_back(op_case(
      "extract_patches", [](Graph& g, const auto& v) { return ops::extract_patches(g, v[0], 2); },
      [](auto& rng) { return std::vector{normal({2, 4, 4, 2}, rng)}; }, 32));
  cases.push_back(op_case(
      "merge_neighborhoods", [](Graph& g, const auto& v) { return ops::merge_neighborhoods(g, v[0]); },
      [](auto& rng) { return std::vector{normal({1, 2, 2, 4, 3}, rng)}; }, 33));
  cases.push_back(op_case(
      "ssm_scan",
      [](Graph& g, const auto& v) {
        return ssm::ssm_scan(g, v[0], v[1], v[2], v[3], v[4], v[5], ssm::ScanMode::sequential);
      },
      [](auto& rng) {
        const std::size_t b = 2, l = 7, e = 3, n = 4;
        Tensor a_log({n});
        for (std::size_t k = 0; k < n; ++k) a_log[k] = std::log(static_cast<double>(k + 1)) - 1.5;
        return std::vector{normal({b, l, e}, rng), positive({b, l, e}, rng, 0.05, 0.6), a_log,
                           normal({b, l, n}, rng), normal({b, l, n}, rng), normal({e}, rng)};
      },
      34));
  return cases;
}

std::vector<GradCase> component_cases() {
  constexpr auto kind = GradKind::component;
  std::vector<GradCase> cases;
  cases.push_back(op_case(
      "selective_scan",
      [](Graph& g, const auto& v) {
        return ssm::selective_scan(g, v[0], direction_vars(v, 1), ssm::ScanMode::parallel);
      },
      [](auto& rng) {
        std::vector<Tensor> in{normal({2, 6, 4}, rng)};
        for (auto& t : direction_inputs(4, 3, rng)) in.push_back(std::move(t));
        return in;
      },
      41, kind));
  cases.push_back(op_case(
      "patch_embed", [](Graph& g, const auto& v) { return model::patch_embed(g, v[0], 2, v[1], v[2]); },
      [](auto& rng) { return std::vector{normal({2, 4, 4, 2}, rng), normal({8, 3}, rng), normal({3}, rng)}; }, 42,
      kind));
  cases.push_back(op_case(
      "conv_branch",
      [](Graph& g, const auto& v) {
        ops::BatchNormState state(2);
        return model::conv_branch(g, v[0], {v[1], v[2], v[3], v[4]}, state, ops::NormMode::train);
      },
      [](auto& rng) {
        return std::vector{normal({2, 2, 3, 2, 2}, rng), normal({2}, rng), normal({2}, rng),
                           normal({3, 3, 3, 2, 2}, rng), normal({2}, rng)};
      },
      43, kind));
  cases.push_back(op_case(
      "ss3d",
      [](Graph& g, const auto& v) {
        std::vector<ssm::SsmVars> dirs;
        for (std::size_t k = 0; k < 6; ++k) dirs.push_back(direction_vars(v, 1 + 6 * k));
        return model::ss3d(g, v[0], dirs, ssm::ScanMode::sequential);
      },
      [](auto& rng) {
        std::vector<Tensor> in{normal({1, 2, 3, 2, 2}, rng)};
        for (std::size_t k = 0; k < 6; ++k)
          for (auto& t : direction_inputs(2, 3, rng)) in.push_back(std::move(t));
        return in;
      },
      44, kind));
  cases.push_back(op_case(
      "ssm_branch",
      [](Graph& g, const auto& v) {
        model::SsmBranchVars vars{v[1], v[2], v[3], v[4], {}, v[17], v[18]};
        for (std::size_t k = 0; k < 2; ++k) vars.directions.push_back(direction_vars(v, 5 + 6 * k));
        return model::ssm_branch(g, v[0], vars, ssm::ScanMode::sequential);
      },
      [](auto& rng) {
        const std::size_t c = 3;
        std::vector<Tensor> in{normal({1, 2, 2, 2, c}, rng), normal({c}, rng), normal({c}, rng), normal({c, c}, rng),
                               normal({c}, rng)};
        for (std::size_t k = 0; k < 2; ++k)
          for (auto& t : direction_inputs(c, 2, rng)) in.push_back(std::move(t));
        in.push_back(normal({c, c}, rng));
        in.push_back(normal({c}, rng));
        return in;
      },
      45, kind));
  cases.push_back(op_case(
      "block_forward",
      [](Graph& g, const auto& v) {
        model::BlockVars vars;
        vars.conv = {v[1], v[2], v[3], v[4]};
        vars.ssm = {v[5], v[6], v[7], v[8], {}, v[21], v[22]};
        for (std::size_t k = 0; k < 2; ++k) vars.ssm.directions.push_back(direction_vars(v, 9 + 6 * k));
        ops::BatchNormState state(2);
        return model::block_forward(g, v[0], vars, state, ops::NormMode::train, ssm::ScanMode::parallel);
      },
      [](auto& rng) {
        const std::size_t h = 2;
        std::vector<Tensor> in{normal({2, 2, 2, 2, 2 * h}, rng), normal({h}, rng), normal({h}, rng),
                               normal({3, 3, 3, h, h}, rng), normal({h}, rng), normal({h}, rng), normal({h}, rng),
                               normal({h, h}, rng), normal({h}, rng)};
        for (std::size_t k = 0; k < 2; ++k)
          for (auto& t : direction_inputs(h, 2, rng)) in.push_back(std::move(t));
        in.push_back(normal({h, h}, rng));
        in.push_back(normal({h}, rng));
        return in;
      },
      46, kind));
  cases.push_back(op_case(
      "patch_merging", [](Graph& g, const auto& v) { return model::patch_merging(g, v[0], v[1], v[2]); },
      [](auto& rng) { return std::vector{normal({1, 2, 2, 2, 2}, rng), normal({16, 4}, rng), normal({4}, rng)}; }, 47,
      kind));
  cases.push_back(op_case(
      "classify", [](Graph& g, const auto& v) { return model::classify(g, v[0], v[1], v[2]); },
      [](auto& rng) { return std::vector{normal({2, 2, 2, 1, 4}, rng), normal({4, 3}, rng), normal({3}, rng)}; }, 48,
      kind));
  return cases;
}

// Tiny model, two synthetic volumes, cross-entropy loss; finite differences
// are taken through the Parameter values themselves.
double model_check() {
  auto cfg = model::ModelConfig::tiny_profile();
  cfg.seed = 7;
  model::Model m(cfg);
  const auto dims = cfg.input_dims;
  Tensor batch({2, dims[0], dims[1], dims[2]});
  const std::vector<std::size_t> labels{0, 2};
  for (std::size_t i = 0; i < 2; ++i) {
    auto spec = volume::domain_spec(volume::Domain::A, dims, 100 + i);
    const auto v = volume::normalize01(volume::synth_generate(volume::label_from_index(labels[i]), spec));
    std::copy_n(v.voxels.ptr(), v.voxels.size(), batch.ptr() + i * v.voxels.size());
  }
  auto loss_of = [&](bool backward) {
    Graph g;
    Var loss = ops::cross_entropy(g, m.forward_logits(g, batch, ops::NormMode::train, ssm::ScanMode::sequential),
                                  labels);
    if (backward) g.backward(loss);
    return g.value(loss).item();
  };
  m.parameters().zero_grad();
  loss_of(true);

  constexpr std::size_t kPerTensor = 16;
  constexpr double kModelStep = 1e-6;
  std::mt19937_64 rng(8);
  std::vector<double> analytic, numeric;
  for (auto& p : m.parameters()) {
    for (auto i : sample_indices(p.value.size(), kPerTensor, rng)) {
      const double saved = p.value[i];
      p.value[i] = saved + kModelStep;
      const double up = loss_of(false);
      p.value[i] = saved - kModelStep;
      const double down = loss_of(false);
      p.value[i] = saved;
      analytic.push_back(p.grad[i]);
      numeric.push_back((up - down) / (2.0 * kModelStep));
    }
  }
  return relative_error(Tensor({analytic.size()}, analytic), Tensor({numeric.size()}, numeric));
}

}  // namespace

std::vector<GradCase> grad_cases(bool include_model) {
  auto cases = op_cases();
  for (auto& c : component_cases()) cases.push_back(std::move(c));
  if (include_model) cases.push_back({"end_to_end", GradKind::model, 1e-3, model_check});
  return cases;
}

std::vector<GradRow> run_grad_checks(const std::vector<GradCase>& cases,
                                     const std::function<void(const GradRow&)>& on_row) {
  std::vector<GradRow> rows;
  for (const auto& c : cases) {
    const double err = c.run();
    GradRow row{c.name, c.kind, err, c.tolerance, std::isfinite(err) && err <= c.tolerance};
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_grad_table(const std::vector<GradRow>& rows) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-22s %-10s %-12s %-10s %s\n", "name", "kind", "rel_error", "tolerance", "result");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-22s %-10s %-12.3e %-10.0e %s\n", r.name.c_str(),
                  std::string(to_string(r.kind)).c_str(), r.rel_error, r.tolerance, r.pass ? "PASS" : "FAIL");
    out += buf;
  }
  return out;
}

// ------------------------------------------------------------- scan check --

namespace {

template <typename T>
double max_dev(const std::vector<T>& a, const std::vector<T>& b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return worst;
}

}  // namespace

ScanCheckResult run_scan_check(const ScanCheckConfig& config) {
  if (config.max_length == 0 || config.max_state == 0 || config.max_channels == 0)
    throw ValidationError("scan-check: limits must be positive");
  ScanCheckResult result;
  result.tolerance = config.tolerance > 0.0 ? config.tolerance : (config.single_precision ? 1e-4 : 1e-10);
  for (std::size_t trial = 0; trial < config.trials; ++trial) {
    const std::uint64_t seed = config.seed + trial;
    std::mt19937_64 rng(seed);
    const std::size_t length =
        trial < 2 ? 1 : std::uniform_int_distribution<std::size_t>(1, config.max_length)(rng);
    const std::size_t state = std::uniform_int_distribution<std::size_t>(1, config.max_state)(rng);
    const std::size_t channels = std::uniform_int_distribution<std::size_t>(1, config.max_channels)(rng);

    auto params = ssm::SsmParams::init(channels, state, rng);
    params.w_delta = Tensor::normal({channels, channels}, rng, 0.0, 0.5);
    params.w_b = Tensor::normal({channels, state}, rng, 0.0, 0.5);
    params.w_c = Tensor::normal({channels, state}, rng, 0.0, 0.5);
    const Tensor x = Tensor::normal({length, channels}, rng, 0.0, 1.0);

    auto fail = [&](double dev, std::string what) {
      result.failures.push_back({seed, length, state, dev, std::move(what)});
    };

    if (config.single_precision) {
      // Float kernels against the double reference on identical projections.
      std::vector<double> delta(length * channels), b(length * state), c(length * state);
      for (std::size_t t = 0; t < length; ++t) {
        const auto proj = ssm::selective_projections(x.data().subspan(t * channels, channels), params);
        std::copy(proj.delta.begin(), proj.delta.end(), delta.begin() + static_cast<std::ptrdiff_t>(t * channels));
        std::copy(proj.b.begin(), proj.b.end(), b.begin() + static_cast<std::ptrdiff_t>(t * state));
        std::copy(proj.c.begin(), proj.c.end(), c.begin() + static_cast<std::ptrdiff_t>(t * state));
      }
      auto to_f = [](std::span<const double> v) { return std::vector<float>(v.begin(), v.end()); };
      const auto xf = to_f(x.data()), df = to_f(delta), af = to_f(params.a.data()), bf = to_f(b), cf = to_f(c),
                 dd = to_f(params.d.data());
      const ssm::ScanProblem<float> pf{length, channels, state, xf.data(), df.data(), af.data(),
                                       bf.data(), cf.data(), dd.data()};
      std::vector<float> ys(length * channels), yp(length * channels);
      ssm::scan_core(pf, ssm::ScanMode::sequential, ys.data());
      ssm::scan_core(pf, ssm::ScanMode::parallel, yp.data());
      const Tensor ref = ssm::selective_scan(x, params, ssm::ScanMode::sequential);
      const std::vector<double> refv(ref.data().begin(), ref.data().end());
      std::vector<double> ysd(ys.begin(), ys.end()), ypd(yp.begin(), yp.end());
      const double par = max_dev(ysd, ypd), vs_ref = max_dev(ysd, refv);
      result.max_parallel_dev = std::max(result.max_parallel_dev, par);
      result.max_oracle_dev = std::max(result.max_oracle_dev, vs_ref);
      if (!(par <= result.tolerance)) fail(par, "single sequential vs parallel");
      if (!(vs_ref <= result.tolerance)) fail(vs_ref, "single vs double reference");
    } else {
      const Tensor seq = ssm::selective_scan(x, params, ssm::ScanMode::sequential);
      const Tensor par = ssm::selective_scan(x, params, ssm::ScanMode::parallel);
      const double dev = max_abs_diff(seq, par);
      result.max_parallel_dev = std::max(result.max_parallel_dev, dev);
      if (!(dev <= result.tolerance)) fail(dev, "sequential vs parallel");
      if (config.with_oracle) {
        const double odev = max_abs_diff(seq, ssm::unrolled_oracle(x, params));
        result.max_oracle_dev = std::max(result.max_oracle_dev, odev);
        if (!(odev <= result.tolerance)) fail(odev, "sequential vs unrolled oracle");
      }
    }
    ++result.trials;
  }
  return result;
}

}  // namespace vmamba::checks
