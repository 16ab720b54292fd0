#pragma once
// SS-Conv-SSM volumetric classifier:
//   patch embedding -> stages of hybrid blocks (patch merging between stages)
//   -> global mean pool -> FC -> softmax.
// Grids are channel-last, [B, D', H', W', C].

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "vmamba/autodiff.hpp"
#include "vmamba/ops.hpp"
#include "vmamba/ssm.hpp"

namespace vmamba::model {

using ssm::ScanMode;

struct ModelConfig {
  std::array<std::size_t, 3> input_dims{224, 224, 160};
  std::size_t patch_size = 16;
  std::size_t embed_dim = 48;
  std::vector<std::size_t> stage_dims{48, 96};
  std::vector<std::size_t> stage_depths{2, 2};
  std::size_t state_dim = 16;
  std::size_t num_classes = 3;
  std::size_t scan_directions = 6;  // 2 or 6
  std::uint64_t seed = 0;
  double bn_momentum = 0.1;
  double norm_eps = 1e-5;

  // Throws ValidationError naming the first violated constraint.
  void validate() const;

  nlohmann::json to_json() const;
  // Missing keys keep their defaults; unknown keys are rejected.
  static ModelConfig from_json(const nlohmann::json& doc, ModelConfig base);
  static ModelConfig from_json(const nlohmann::json& doc) { return from_json(doc, ModelConfig{}); }

  // 224x224x160 volumes, p=16, dims [48, 96], depths [2, 2], N_s=16.
  static ModelConfig reference_profile();
  // 32x32x16 volumes, p=4, dims [8, 16], depths [1, 1], N_s=4.
  static ModelConfig tiny_profile();

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Parameters of one hybrid block, bound to a Graph.
struct ConvBranchVars {
  Var bn_gamma, bn_beta, kernel, bias;
};

struct SsmBranchVars {
  Var ln_gamma, ln_beta, in_weight, in_bias;
  std::vector<ssm::SsmVars> directions;
  Var out_weight, out_bias;
};

struct BlockVars {
  ConvBranchVars conv;
  SsmBranchVars ssm;
};

// volumes [B, D, H, W] -> [B, D/p, H/p, W/p, C0]; weight [p^3, C0].
Var patch_embed(Graph& g, Var volumes, std::size_t patch, Var weight, Var bias);

// Conv3D(ReLU(BN(x))) on a half-width grid.
Var conv_branch(Graph& g, Var half, const ConvBranchVars& vars, ops::BatchNormState& bn,
                ops::NormMode mode);

// Token visiting orders for the SS3D traversals of a D x H x W grid. Order i
// lists grid positions (row-major flat indices) in visiting sequence:
// depth-, height- and width-major linearisations, each forward then reversed.
std::vector<std::vector<std::size_t>> scan_orders(std::size_t d, std::size_t h, std::size_t w,
                                                  std::size_t count);

// Mean over traversal orders of the per-order selective scan, mapped back to
// grid positions. One SsmVars per order.
Var ss3d(Graph& g, Var grid, std::span<const ssm::SsmVars> directions, ScanMode mode);

// Linear_out(SS3D(SiLU(Linear_in(LN(x))))) on a half-width grid.
Var ssm_branch(Graph& g, Var half, const SsmBranchVars& vars, ScanMode mode);

// Split channels in half, conv branch on the first half, SSM branch on the
// second, concatenate, shuffle the two halves together, add the input.
Var block_forward(Graph& g, Var grid, const BlockVars& vars, ops::BatchNormState& bn,
                  ops::NormMode mode, ScanMode scan);

// [B, D, H, W, C] -> [B, D/2, H/2, W/2, 2C]; weight [8C, 2C].
Var patch_merging(Graph& g, Var grid, Var weight, Var bias);

// Mean over tokens, then FC: [B, ..., C] -> [B, K].
Var classify_logits(Graph& g, Var grid, Var weight, Var bias);
// softmax(classify_logits).
Var classify(Graph& g, Var grid, Var weight, Var bias);

class Model {
 public:
  explicit Model(ModelConfig config);

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  ParameterSet& parameters() { return params_; }
  const ParameterSet& parameters() const { return params_; }

  // Batch-norm running statistics, one per block, keyed by stable names.
  std::vector<std::pair<std::string, ops::BatchNormState*>> norm_states();
  std::vector<std::pair<std::string, const ops::BatchNormState*>> norm_states() const;

  // volumes: [D, H, W] or [B, D, H, W] matching config().input_dims.
  Var forward_logits(Graph& g, const Tensor& volumes, ops::NormMode mode, ScanMode scan);

  // Class probabilities for one volume, eval-mode normalisation.
  Tensor predict_proba(const Tensor& volume, ScanMode scan = ScanMode::sequential);

 private:
  struct BlockParams {
    Parameter *bn_gamma, *bn_beta, *kernel, *bias;
    Parameter *ln_gamma, *ln_beta, *in_weight, *in_bias;
    struct Direction {
      Parameter *w_delta, *b_delta, *w_b, *w_c, *a_log, *d;
    };
    std::vector<Direction> directions;
    Parameter *out_weight, *out_bias;
    std::string name;
  };

  struct Stage {
    std::vector<BlockParams> blocks;
    Parameter* merge_weight = nullptr;
    Parameter* merge_bias = nullptr;
  };

  BlockVars bind(Graph& g, const BlockParams& p);

  ModelConfig config_;
  ParameterSet params_;
  Parameter* embed_weight_ = nullptr;
  Parameter* embed_bias_ = nullptr;
  std::vector<Stage> stages_;
  std::vector<ops::BatchNormState> norms_;
  Parameter* head_weight_ = nullptr;
  Parameter* head_bias_ = nullptr;
};

}  // namespace vmamba::model
