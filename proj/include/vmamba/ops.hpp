#pragma once
// Differentiable tensor operations recorded on a Graph.
//
// Channel-last layout throughout: per-token ops act on the trailing axis and
// treat every leading axis as independent rows. Spatial ops take an optional
// leading batch axis ([B, D, H, W, C], or [D, H, W, C] for a single grid).

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "vmamba/autodiff.hpp"

namespace vmamba::ops {

enum class Activation { relu, silu, softplus, sigmoid };
enum class NormMode { train, eval };

std::string_view to_string(Activation kind);

double relu(double v);
double sigmoid(double v);
double silu(double v);
// ln(1 + e^v), returning v itself for v > 20.
double softplus(double v);
double apply_activation(Activation kind, double v);

// out[..., j] = sum_i x[..., i] * weight[i, j] + bias[j]; bias may be absent.
Var linear(Graph& g, Var x, Var weight, Var bias = {});

// 3x3x3 cross-correlation, stride 1, zero padding 1.
// x: [D, H, W, Cin] or [B, D, H, W, Cin]; kernel: [3, 3, 3, Cin, Cout].
Var conv3d(Graph& g, Var x, Var kernel, Var bias = {});

struct BatchNormState {
  explicit BatchNormState(std::size_t channels, double momentum = 0.1, double eps = 1e-5);

  Tensor running_mean;
  Tensor running_var;
  double momentum;
  double eps;
};

// Per-channel normalisation over every non-channel position. Train mode uses
// batch statistics and folds them into `state` by exponential moving average;
// eval mode uses the running statistics (initially mean 0, variance 1).
Var batch_norm(Graph& g, Var x, Var gamma, Var beta, BatchNormState& state, NormMode mode);

Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps = 1e-5);

Var activation(Graph& g, Activation kind, Var x);

// Max-subtracted softmax along `axis`.
Var softmax(Graph& g, Var x, std::size_t axis);

// Mean over rows of -log softmax(logits)[label]. logits: [K] or [B, K].
Var cross_entropy(Graph& g, Var logits, std::span<const std::size_t> labels);

Var add(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var x, double factor);
// Sum of all elements, as a rank-0 tensor.
Var sum(Graph& g, Var x);
Var reshape(Graph& g, Var x, Shape shape);

// Channels [begin, end) of the trailing axis.
Var slice_channels(Graph& g, Var x, std::size_t begin, std::size_t end);
Var concat_channels(Graph& g, Var a, Var b);
// Interleaves `groups` equal channel groups: out[g + groups * i] = in[g * (C / groups) + i].
Var channel_shuffle(Graph& g, Var x, std::size_t groups);

// x: [B, N, C]; out[:, i, :] = x[:, order[i], :]. `order` must be a permutation.
Var permute_tokens(Graph& g, Var x, std::vector<std::size_t> order);

// [B, ..., C] -> [B, C], averaging every axis between the first and the last.
Var mean_tokens(Graph& g, Var x);

// [B, D, H, W] -> [B, D/p, H/p, W/p, p^3], each patch flattened row-major.
Var extract_patches(Graph& g, Var volume, std::size_t patch);

// [B, D, H, W, C] -> [B, D/2, H/2, W/2, 8C]; the 2x2x2 neighbours are laid
// out in row-major (dd, hh, ww) order, C channels each.
Var merge_neighborhoods(Graph& g, Var grid);

}  // namespace vmamba::ops
