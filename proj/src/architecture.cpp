#include "vmamba/architecture.hpp"

#include <cmath>
#include <random>
#include <set>

#include "vmamba/error.hpp"

namespace vmamba::model {

namespace {

std::string stage_prefix(std::size_t stage) { return "stage" + std::to_string(stage); }

}  // namespace

void ModelConfig::validate() const {
  for (auto d : input_dims)
    if (d == 0) throw ValidationError("model config: input dims must be positive");
  if (patch_size == 0) throw ValidationError("model config: patch_size must be positive");
  if (stage_dims.empty() || stage_dims.size() != stage_depths.size())
    throw ValidationError("model config: stage_dims and stage_depths must be non-empty and equally long");
  if (embed_dim != stage_dims.front())
    throw ValidationError("model config: embed_dim must equal stage_dims[0]");
  for (std::size_t i = 0; i < stage_dims.size(); ++i) {
    if (stage_dims[i] < 2 || stage_dims[i] % 2 != 0)
      throw ValidationError("model config: stage " + std::to_string(i) + " width " +
                            std::to_string(stage_dims[i]) + " must be even and at least 2");
    if (stage_depths[i] == 0)
      throw ValidationError("model config: stage " + std::to_string(i) + " needs at least one block");
    if (i + 1 < stage_dims.size() && stage_dims[i + 1] != 2 * stage_dims[i])
      throw ValidationError("model config: stage " + std::to_string(i + 1) +
                            " width must double the previous stage");
  }
  if (state_dim == 0) throw ValidationError("model config: state_dim must be positive");
  if (num_classes != 3) throw ValidationError("model config: num_classes must be 3 (AD, MCI, CN)");
  if (scan_directions != 2 && scan_directions != 6)
    throw ValidationError("model config: scan_directions must be 2 or 6");
  if (!(bn_momentum > 0.0 && bn_momentum <= 1.0))
    throw ValidationError("model config: bn_momentum must be in (0, 1]");
  if (!(norm_eps > 0.0)) throw ValidationError("model config: norm_eps must be positive");

  std::array<std::size_t, 3> grid{};
  for (std::size_t a = 0; a < 3; ++a) {
    if (input_dims[a] % patch_size != 0)
      throw ValidationError("model config: input dim " + std::to_string(input_dims[a]) +
                            " is not divisible by patch size " + std::to_string(patch_size));
    grid[a] = input_dims[a] / patch_size;
  }
  for (std::size_t s = 0; s + 1 < stage_dims.size(); ++s) {
    for (auto& extent : grid) {
      if (extent % 2 != 0)
        throw ValidationError("model config: " + stage_prefix(s) + " grid " +
                              to_string(Shape{grid[0], grid[1], grid[2]}) +
                              " has an odd extent and cannot be patch-merged");
    }
    for (auto& extent : grid) extent /= 2;
  }
}

nlohmann::json ModelConfig::to_json() const {
  return nlohmann::json{{"input_dims", input_dims},       {"patch_size", patch_size},
                        {"embed_dim", embed_dim},         {"stage_dims", stage_dims},
                        {"stage_depths", stage_depths},   {"state_dim", state_dim},
                        {"num_classes", num_classes},     {"scan_directions", scan_directions},
                        {"seed", seed},                   {"bn_momentum", bn_momentum},
                        {"norm_eps", norm_eps}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& doc, ModelConfig c) {
  if (!doc.is_object()) throw ValidationError("model config must be a JSON object");
  static const std::set<std::string> known{"input_dims", "patch_size",   "embed_dim",       "stage_dims",
                                           "stage_depths", "state_dim",  "num_classes",     "scan_directions",
                                           "seed",       "bn_momentum",  "norm_eps"};
  for (const auto& [key, _] : doc.items())
    if (!known.contains(key)) throw ValidationError("model config: unknown key '" + key + "'");
  try {
    if (doc.contains("input_dims")) c.input_dims = doc.at("input_dims").get<std::array<std::size_t, 3>>();
    if (doc.contains("patch_size")) c.patch_size = doc.at("patch_size").get<std::size_t>();
    if (doc.contains("embed_dim")) c.embed_dim = doc.at("embed_dim").get<std::size_t>();
    if (doc.contains("stage_dims")) c.stage_dims = doc.at("stage_dims").get<std::vector<std::size_t>>();
    if (doc.contains("stage_depths"))
      c.stage_depths = doc.at("stage_depths").get<std::vector<std::size_t>>();
    if (doc.contains("state_dim")) c.state_dim = doc.at("state_dim").get<std::size_t>();
    if (doc.contains("num_classes")) c.num_classes = doc.at("num_classes").get<std::size_t>();
    if (doc.contains("scan_directions")) c.scan_directions = doc.at("scan_directions").get<std::size_t>();
    if (doc.contains("seed")) c.seed = doc.at("seed").get<std::uint64_t>();
    if (doc.contains("bn_momentum")) c.bn_momentum = doc.at("bn_momentum").get<double>();
    if (doc.contains("norm_eps")) c.norm_eps = doc.at("norm_eps").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  return c;
}

ModelConfig ModelConfig::reference_profile() { return ModelConfig{}; }

ModelConfig ModelConfig::tiny_profile() {
  ModelConfig c;
  c.input_dims = {32, 32, 16};
  c.patch_size = 4;
  c.embed_dim = 8;
  c.stage_dims = {8, 16};
  c.stage_depths = {1, 1};
  c.state_dim = 4;
  return c;
}

// ------------------------------------------------------------- components --

Var patch_embed(Graph& g, Var volumes, std::size_t patch, Var weight, Var bias) {
  return ops::linear(g, ops::extract_patches(g, volumes, patch), weight, bias);
}

Var conv_branch(Graph& g, Var half, const ConvBranchVars& vars, ops::BatchNormState& bn,
                ops::NormMode mode) {
  Var normed = ops::batch_norm(g, half, vars.bn_gamma, vars.bn_beta, bn, mode);
  return ops::conv3d(g, ops::activation(g, ops::Activation::relu, normed), vars.kernel, vars.bias);
}

std::vector<std::vector<std::size_t>> scan_orders(std::size_t d, std::size_t h, std::size_t w,
                                                  std::size_t count) {
  if (count != 2 && count != 6) throw ValidationError("ss3d: direction count must be 2 or 6");
  const std::array<std::size_t, 3> extent{d, h, w};
  // Axis nesting, slowest first.
  const std::array<std::array<std::size_t, 3>, 3> nestings{{{0, 1, 2}, {1, 2, 0}, {2, 0, 1}}};
  std::vector<std::vector<std::size_t>> orders;
  for (std::size_t k = 0; k < count / 2; ++k) {
    const auto& nest = nestings[k];
    std::vector<std::size_t> order;
    order.reserve(d * h * w);
    std::array<std::size_t, 3> idx{};
    for (idx[nest[0]] = 0; idx[nest[0]] < extent[nest[0]]; ++idx[nest[0]])
      for (idx[nest[1]] = 0; idx[nest[1]] < extent[nest[1]]; ++idx[nest[1]])
        for (idx[nest[2]] = 0; idx[nest[2]] < extent[nest[2]]; ++idx[nest[2]])
          order.push_back((idx[0] * h + idx[1]) * w + idx[2]);
    orders.push_back(order);
    orders.emplace_back(order.rbegin(), order.rend());
  }
  return orders;
}

Var ss3d(Graph& g, Var grid, std::span<const ssm::SsmVars> directions, ScanMode mode) {
  const Shape shape = g.value(grid).shape();
  if (shape.size() != 4 && shape.size() != 5)
    throw ShapeError("ss3d: expected [D, H, W, C] or [B, D, H, W, C], got " + to_string(shape));
  const std::size_t off = shape.size() - 4;
  const std::size_t batch = off == 1 ? shape[0] : 1;
  const std::size_t d = shape[off], h = shape[off + 1], w = shape[off + 2], c = shape[off + 3];
  const auto orders = scan_orders(d, h, w, directions.size());

  Var tokens = ops::reshape(g, grid, {batch, d * h * w, c});
  Var total;
  for (std::size_t k = 0; k < orders.size(); ++k) {
    std::vector<std::size_t> inverse(orders[k].size());
    for (std::size_t i = 0; i < orders[k].size(); ++i) inverse[orders[k][i]] = i;
    Var seq = ops::permute_tokens(g, tokens, orders[k]);
    Var scanned = ssm::selective_scan(g, seq, directions[k], mode);
    Var back = ops::permute_tokens(g, scanned, std::move(inverse));
    total = total.valid() ? ops::add(g, total, back) : back;
  }
  Var mean = ops::scale(g, total, 1.0 / static_cast<double>(orders.size()));
  return ops::reshape(g, mean, shape);
}

Var ssm_branch(Graph& g, Var half, const SsmBranchVars& vars, ScanMode mode) {
  Var x = ops::layer_norm(g, half, vars.ln_gamma, vars.ln_beta);
  x = ops::activation(g, ops::Activation::silu, ops::linear(g, x, vars.in_weight, vars.in_bias));
  x = ss3d(g, x, vars.directions, mode);
  return ops::linear(g, x, vars.out_weight, vars.out_bias);
}

Var block_forward(Graph& g, Var grid, const BlockVars& vars, ops::BatchNormState& bn,
                  ops::NormMode mode, ScanMode scan) {
  const std::size_t c = g.value(grid).shape().back();
  if (c % 2 != 0)
    throw ShapeError("block_forward: channel count " + std::to_string(c) + " must be even");
  Var first = ops::slice_channels(g, grid, 0, c / 2);
  Var second = ops::slice_channels(g, grid, c / 2, c);
  Var merged = ops::concat_channels(g, conv_branch(g, first, vars.conv, bn, mode),
                                    ssm_branch(g, second, vars.ssm, scan));
  return ops::add(g, grid, ops::channel_shuffle(g, merged, 2));
}

Var patch_merging(Graph& g, Var grid, Var weight, Var bias) {
  return ops::linear(g, ops::merge_neighborhoods(g, grid), weight, bias);
}

Var classify_logits(Graph& g, Var grid, Var weight, Var bias) {
  return ops::linear(g, ops::mean_tokens(g, grid), weight, bias);
}

Var classify(Graph& g, Var grid, Var weight, Var bias) {
  Var logits = classify_logits(g, grid, weight, bias);
  return ops::softmax(g, logits, g.value(logits).rank() - 1);
}

// ------------------------------------------------------------------ model --

Model::Model(ModelConfig config) : config_(std::move(config)) {
  config_.validate();
  std::mt19937_64 rng(config_.seed);
  auto uniform = [&](Shape shape, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    return Tensor::uniform(std::move(shape), rng, -bound, bound);
  };
  const std::size_t p3 = config_.patch_size * config_.patch_size * config_.patch_size;
  embed_weight_ = &params_.add("embed.weight", uniform({p3, config_.embed_dim}, p3));
  embed_bias_ = &params_.add("embed.bias", Tensor({config_.embed_dim}));

  const std::size_t n_state = config_.state_dim;
  for (std::size_t s = 0; s < config_.stage_dims.size(); ++s) {
    const std::size_t c = config_.stage_dims[s], half = c / 2;
    Stage stage;
    for (std::size_t b = 0; b < config_.stage_depths[s]; ++b) {
      const std::string name = stage_prefix(s) + ".block" + std::to_string(b);
      BlockParams p;
      p.name = name;
      p.bn_gamma = &params_.add(name + ".conv.bn.gamma", Tensor({half}, 1.0));
      p.bn_beta = &params_.add(name + ".conv.bn.beta", Tensor({half}));
      p.kernel = &params_.add(name + ".conv.kernel", uniform({3, 3, 3, half, half}, 27 * half));
      p.bias = &params_.add(name + ".conv.bias", Tensor({half}));
      p.ln_gamma = &params_.add(name + ".ssm.ln.gamma", Tensor({half}, 1.0));
      p.ln_beta = &params_.add(name + ".ssm.ln.beta", Tensor({half}));
      p.in_weight = &params_.add(name + ".ssm.in.weight", uniform({half, half}, half));
      p.in_bias = &params_.add(name + ".ssm.in.bias", Tensor({half}));
      for (std::size_t k = 0; k < config_.scan_directions; ++k) {
        const std::string dn = name + ".ssm.dir" + std::to_string(k);
        auto init = ssm::SsmParams::init(half, n_state, rng);
        Tensor a_log({n_state});
        for (std::size_t n = 0; n < n_state; ++n) a_log[n] = std::log(-init.a[n]);
        p.directions.push_back({&params_.add(dn + ".w_delta", std::move(init.w_delta)),
                                &params_.add(dn + ".b_delta", std::move(init.b_delta)),
                                &params_.add(dn + ".w_b", std::move(init.w_b)),
                                &params_.add(dn + ".w_c", std::move(init.w_c)),
                                &params_.add(dn + ".a_log", std::move(a_log)),
                                &params_.add(dn + ".d", std::move(init.d))});
      }
      p.out_weight = &params_.add(name + ".ssm.out.weight", uniform({half, half}, half));
      p.out_bias = &params_.add(name + ".ssm.out.bias", Tensor({half}));
      stage.blocks.push_back(std::move(p));
      norms_.emplace_back(half, config_.bn_momentum, config_.norm_eps);
    }
    if (s + 1 < config_.stage_dims.size()) {
      stage.merge_weight = &params_.add(stage_prefix(s) + ".merge.weight", uniform({8 * c, 2 * c}, 8 * c));
      stage.merge_bias = &params_.add(stage_prefix(s) + ".merge.bias", Tensor({2 * c}));
    }
    stages_.push_back(std::move(stage));
  }
  const std::size_t last = config_.stage_dims.back();
  head_weight_ = &params_.add("head.weight", uniform({last, config_.num_classes}, last));
  head_bias_ = &params_.add("head.bias", Tensor({config_.num_classes}));
}

std::vector<std::pair<std::string, ops::BatchNormState*>> Model::norm_states() {
  std::vector<std::pair<std::string, ops::BatchNormState*>> out;
  std::size_t i = 0;
  for (const auto& stage : stages_)
    for (const auto& block : stage.blocks) out.emplace_back(block.name + ".conv.bn", &norms_[i++]);
  return out;
}

std::vector<std::pair<std::string, const ops::BatchNormState*>> Model::norm_states() const {
  std::vector<std::pair<std::string, const ops::BatchNormState*>> out;
  std::size_t i = 0;
  for (const auto& stage : stages_)
    for (const auto& block : stage.blocks) out.emplace_back(block.name + ".conv.bn", &norms_[i++]);
  return out;
}

BlockVars Model::bind(Graph& g, const BlockParams& p) {
  BlockVars v;
  v.conv = {g.parameter(*p.bn_gamma), g.parameter(*p.bn_beta), g.parameter(*p.kernel), g.parameter(*p.bias)};
  v.ssm.ln_gamma = g.parameter(*p.ln_gamma);
  v.ssm.ln_beta = g.parameter(*p.ln_beta);
  v.ssm.in_weight = g.parameter(*p.in_weight);
  v.ssm.in_bias = g.parameter(*p.in_bias);
  for (const auto& d : p.directions)
    v.ssm.directions.push_back({g.parameter(*d.w_delta), g.parameter(*d.b_delta), g.parameter(*d.w_b),
                                g.parameter(*d.w_c), g.parameter(*d.a_log), g.parameter(*d.d)});
  v.ssm.out_weight = g.parameter(*p.out_weight);
  v.ssm.out_bias = g.parameter(*p.out_bias);
  return v;
}

Var Model::forward_logits(Graph& g, const Tensor& volumes, ops::NormMode mode, ScanMode scan) {
  const auto& dims = config_.input_dims;
  Tensor batch;
  if (volumes.rank() == 3)
    batch = volumes.reshaped({1, volumes.dim(0), volumes.dim(1), volumes.dim(2)});
  else if (volumes.rank() == 4)
    batch = volumes;
  else
    throw ShapeError("model: expected a [D, H, W] volume or [B, D, H, W] batch, got " +
                     to_string(volumes.shape()));
  const Shape spatial(batch.shape().begin() + 1, batch.shape().end());
  if (spatial != Shape{dims[0], dims[1], dims[2]})
    throw ValidationError("model: volume dims " + to_string(spatial) + " do not match the configured input " +
                          to_string(Shape{dims[0], dims[1], dims[2]}));

  Var x = patch_embed(g, g.constant(std::move(batch)), config_.patch_size, g.parameter(*embed_weight_),
                      g.parameter(*embed_bias_));
  std::size_t norm_index = 0;
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (const auto& block : stages_[s].blocks)
      x = block_forward(g, x, bind(g, block), norms_[norm_index++], mode, scan);
    if (stages_[s].merge_weight != nullptr) {
      try {
        x = patch_merging(g, x, g.parameter(*stages_[s].merge_weight), g.parameter(*stages_[s].merge_bias));
      } catch (const ValidationError& e) {
        throw ValidationError(stage_prefix(s) + ": " + e.what());
      }
    }
  }
  return classify_logits(g, x, g.parameter(*head_weight_), g.parameter(*head_bias_));
}

Tensor Model::predict_proba(const Tensor& volume, ScanMode scan) {
  Graph g;
  Var logits = forward_logits(g, volume, ops::NormMode::eval, scan);
  Var probs = ops::softmax(g, logits, 1);
  return g.value(probs).reshaped({config_.num_classes});
}

}  // namespace vmamba::model
