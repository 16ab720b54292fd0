#include "vmamba/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <string>

#include "vmamba/error.hpp"
#include "vmamba/kernels.hpp"

namespace vmamba::ops {

using vmamba::to_string;

std::string_view to_string(Activation kind) {
  switch (kind) {
    case Activation::relu:
      return "relu";
    case Activation::silu:
      return "silu";
    case Activation::softplus:
      return "softplus";
    case Activation::sigmoid:
      return "sigmoid";
  }
  return "unknown";
}

double relu(double v) { return v > 0.0 ? v : 0.0; }

double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

double silu(double v) { return v * sigmoid(v); }

double softplus(double v) {
  if (v > 20.0) return v;
  return std::log1p(std::exp(v));
}

double apply_activation(Activation kind, double v) {
  switch (kind) {
    case Activation::relu:
      return relu(v);
    case Activation::silu:
      return silu(v);
    case Activation::softplus:
      return softplus(v);
    case Activation::sigmoid:
      return sigmoid(v);
  }
  return v;
}

namespace {

using In = std::span<const Tensor* const>;
using GradIn = std::span<Tensor* const>;

template <typename OpT, typename... Args>
Var record(Graph& g, std::vector<Var> inputs, Args&&... args) {
  return g.apply(std::make_unique<OpT>(std::forward<Args>(args)...), std::move(inputs));
}

void require_same_shape(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes differ, " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

void require_vector(std::string_view op, const Tensor& t, std::size_t n, std::string_view what) {
  if (t.rank() != 1 || t.dim(0) != n)
    throw ShapeError(std::string(op) + ": " + std::string(what) + " must have shape [" +
                     std::to_string(n) + "], got " + to_string(t.shape()));
}

// ---------------------------------------------------------------- linear --

class LinearOp final : public Op {
 public:
  std::string_view name() const override { return "linear"; }

  Tensor forward(In in) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.dim(0))
      throw ShapeError("linear: inner dimension mismatch between x " + to_string(x.shape()) +
                       " and W " + to_string(w.shape()));
    const std::size_t rows = leading_count(x.shape());
    const std::size_t n_in = w.dim(0), n_out = w.dim(1);
    Shape out_shape = x.shape();
    out_shape.back() = n_out;
    Tensor out(out_shape);
    if (in.size() > 2) {
      require_vector("linear", *in[2], n_out, "bias");
      for (std::size_t r = 0; r < rows; ++r)
        std::copy_n(in[2]->ptr(), n_out, out.ptr() + r * n_out);
    }
    const auto& k = kernels::active<double>();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = x.ptr() + r * n_in;
      double* yr = out.ptr() + r * n_out;
      for (std::size_t i = 0; i < n_in; ++i) k.axpy(xr[i], w.ptr() + i * n_out, yr, n_out);
    }
    return out;
  }

  void backward(In in, const Tensor&, const Tensor& gy, GradIn grads) override {
    const Tensor& x = *in[0];
    const Tensor& w = *in[1];
    const std::size_t rows = leading_count(x.shape());
    const std::size_t n_in = w.dim(0), n_out = w.dim(1);
    const auto& k = kernels::active<double>();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* g = gy.ptr() + r * n_out;
      const double* xr = x.ptr() + r * n_in;
      if (grads[0] != nullptr) {
        double* gx = grads[0]->ptr() + r * n_in;
        for (std::size_t i = 0; i < n_in; ++i) gx[i] = k.dot(g, w.ptr() + i * n_out, n_out);
      }
      if (grads[1] != nullptr) {
        for (std::size_t i = 0; i < n_in; ++i) k.axpy(xr[i], g, grads[1]->ptr() + i * n_out, n_out);
      }
      if (grads.size() > 2 && grads[2] != nullptr) k.axpy(1.0, g, grads[2]->ptr(), n_out);
    }
  }
};

// ---------------------------------------------------------------- conv3d --

struct GridView {
  std::size_t batch, d, h, w, c;
};

GridView grid_view(std::string_view op, const Tensor& x) {
  if (x.rank() == 4) return {1, x.dim(0), x.dim(1), x.dim(2), x.dim(3)};
  if (x.rank() == 5) return {x.dim(0), x.dim(1), x.dim(2), x.dim(3), x.dim(4)};
  throw ShapeError(std::string(op) + ": expected [D, H, W, C] or [B, D, H, W, C], got " +
                   to_string(x.shape()));
}

class Conv3dOp final : public Op {
 public:
  std::string_view name() const override { return "conv3d"; }

  Tensor forward(In in) override {
    const Tensor& x = *in[0];
    const Tensor& kern = *in[1];
    const GridView v = grid_view("conv3d", x);
    if (kern.rank() != 5 || kern.dim(0) != 3 || kern.dim(1) != 3 || kern.dim(2) != 3)
      throw ShapeError("conv3d: kernel must be [3, 3, 3, Cin, Cout], got " + to_string(kern.shape()));
    if (kern.dim(3) != v.c)
      throw ShapeError("conv3d: channel mismatch, input has " + std::to_string(v.c) +
                       " channels but kernel expects " + std::to_string(kern.dim(3)));
    const std::size_t cout = kern.dim(4);
    Shape out_shape = x.shape();
    out_shape.back() = cout;
    Tensor out(out_shape);
    if (in.size() > 2) {
      require_vector("conv3d", *in[2], cout, "bias");
      for (std::size_t r = 0; r < leading_count(out_shape); ++r)
        std::copy_n(in[2]->ptr(), cout, out.ptr() + r * cout);
    }
    const auto& k = kernels::active<double>();
    visit(v, cout, [&](std::size_t in_row, std::size_t out_row, std::size_t tap) {
      const double* xr = x.ptr() + in_row * v.c;
      double* yr = out.ptr() + out_row * cout;
      const double* kt = kern.ptr() + tap * v.c * cout;
      for (std::size_t ci = 0; ci < v.c; ++ci) k.axpy(xr[ci], kt + ci * cout, yr, cout);
    });
    return out;
  }

  void backward(In in, const Tensor&, const Tensor& gy, GradIn grads) override {
    const Tensor& x = *in[0];
    const Tensor& kern = *in[1];
    const GridView v = grid_view("conv3d", x);
    const std::size_t cout = kern.dim(4);
    const auto& k = kernels::active<double>();
    visit(v, cout, [&](std::size_t in_row, std::size_t out_row, std::size_t tap) {
      const double* g = gy.ptr() + out_row * cout;
      const double* kt = kern.ptr() + tap * v.c * cout;
      if (grads[0] != nullptr) {
        double* gx = grads[0]->ptr() + in_row * v.c;
        for (std::size_t ci = 0; ci < v.c; ++ci) gx[ci] += k.dot(g, kt + ci * cout, cout);
      }
      if (grads[1] != nullptr) {
        const double* xr = x.ptr() + in_row * v.c;
        double* gk = grads[1]->ptr() + tap * v.c * cout;
        for (std::size_t ci = 0; ci < v.c; ++ci) k.axpy(xr[ci], g, gk + ci * cout, cout);
      }
    });
    if (grads.size() > 2 && grads[2] != nullptr) {
      const std::size_t rows = leading_count(gy.shape());
      for (std::size_t r = 0; r < rows; ++r) k.axpy(1.0, gy.ptr() + r * cout, grads[2]->ptr(), cout);
    }
  }

 private:
  // Calls fn(input row, output row, tap index) for every in-bounds tap.
  template <typename Fn>
  static void visit(const GridView& v, std::size_t, Fn&& fn) {
    for (std::size_t b = 0; b < v.batch; ++b)
      for (std::size_t d = 0; d < v.d; ++d)
        for (std::size_t h = 0; h < v.h; ++h)
          for (std::size_t w = 0; w < v.w; ++w) {
            const std::size_t out_row = ((b * v.d + d) * v.h + h) * v.w + w;
            for (std::size_t kd = 0; kd < 3; ++kd) {
              if (d + kd < 1 || d + kd - 1 >= v.d) continue;
              for (std::size_t kh = 0; kh < 3; ++kh) {
                if (h + kh < 1 || h + kh - 1 >= v.h) continue;
                for (std::size_t kw = 0; kw < 3; ++kw) {
                  if (w + kw < 1 || w + kw - 1 >= v.w) continue;
                  const std::size_t in_row =
                      ((b * v.d + d + kd - 1) * v.h + h + kh - 1) * v.w + w + kw - 1;
                  fn(in_row, out_row, (kd * 3 + kh) * 3 + kw);
                }
              }
            }
          }
  }
};

// ------------------------------------------------------------ batch norm --

class BatchNormOp final : public Op {
 public:
  BatchNormOp(NormMode mode, double eps, Tensor running_mean, Tensor running_var)
      : mode_(mode), eps_(eps), running_mean_(std::move(running_mean)),
        running_var_(std::move(running_var)) {}

  std::string_view name() const override { return "batch_norm"; }

  Tensor forward(In in) override {
    const Tensor& x = *in[0];
    const std::size_t c = x.shape().back();
    require_vector("batch_norm", *in[1], c, "gamma");
    require_vector("batch_norm", *in[2], c, "beta");
    const std::size_t rows = leading_count(x.shape());
    mean_ = Tensor({c});
    var_ = Tensor({c});
    if (mode_ == NormMode::train) {
      if (rows < 2)
        throw ValidationError("batch_norm: train mode needs at least 2 positions per channel, got " +
                              std::to_string(rows));
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) mean_[j] += x[r * c + j];
      for (std::size_t j = 0; j < c; ++j) mean_[j] /= static_cast<double>(rows);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < c; ++j) {
          const double dv = x[r * c + j] - mean_[j];
          var_[j] += dv * dv;
        }
      for (std::size_t j = 0; j < c; ++j) var_[j] /= static_cast<double>(rows);
    } else {
      mean_ = running_mean_;
      var_ = running_var_;
    }
    inv_std_ = Tensor({c});
    for (std::size_t j = 0; j < c; ++j) inv_std_[j] = 1.0 / std::sqrt(var_[j] + eps_);
    xhat_ = Tensor(x.shape());
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const double xh = (x[r * c + j] - mean_[j]) * inv_std_[j];
        xhat_[r * c + j] = xh;
        out[r * c + j] = (*in[1])[j] * xh + (*in[2])[j];
      }
    return out;
  }

  void backward(In in, const Tensor&, const Tensor& gy, GradIn grads) override {
    const Tensor& gamma = *in[1];
    const std::size_t c = gamma.size();
    const std::size_t rows = gy.size() / c;
    Tensor sum_g({c}), sum_gx({c});
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        sum_g[j] += gy[r * c + j];
        sum_gx[j] += gy[r * c + j] * xhat_[r * c + j];
      }
    if (grads[1] != nullptr) *grads[1] = sum_gx;
    if (grads[2] != nullptr) *grads[2] = sum_g;
    if (grads[0] == nullptr) return;
    Tensor& gx = *grads[0];
    const double m = static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t i = r * c + j;
        if (mode_ == NormMode::train) {
          gx[i] = gamma[j] * inv_std_[j] *
                  (gy[i] - sum_g[j] / m - xhat_[i] * sum_gx[j] / m);
        } else {
          gx[i] = gamma[j] * inv_std_[j] * gy[i];
        }
      }
  }

  const Tensor& batch_mean() const { return mean_; }
  const Tensor& batch_var() const { return var_; }

 private:
  NormMode mode_;
  double eps_;
  Tensor running_mean_, running_var_;
  Tensor mean_, var_, inv_std_, xhat_;
};

// ------------------------------------------------------------ layer norm --

class LayerNormOp final : public Op {
 public:
  explicit LayerNormOp(double eps) : eps_(eps) {}
  std::string_view name() const override { return "layer_norm"; }

  Tensor forward(In in) override {
    const Tensor& x = *in[0];
    if (x.rank() < 1) throw ShapeError("layer_norm: input must have a channel axis");
    const std::size_t c = x.shape().back();
    require_vector("layer_norm", *in[1], c, "gamma");
    require_vector("layer_norm", *in[2], c, "beta");
    const std::size_t rows = leading_count(x.shape());
    xhat_ = Tensor(x.shape());
    inv_std_ = Tensor({rows});
    Tensor out(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
      const double* xr = x.ptr() + r * c;
      double mean = 0.0;
      for (std::size_t j = 0; j < c; ++j) mean += xr[j];
      mean /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) var += (xr[j] - mean) * (xr[j] - mean);
      var /= static_cast<double>(c);
      const double inv = 1.0 / std::sqrt(var + eps_);
      inv_std_[r] = inv;
      for (std::size_t j = 0; j < c; ++j) {
        const double xh = (xr[j] - mean) * inv;
        xhat_[r * c + j] = xh;
        out[r * c + j] = (*in[1])[j] * xh + (*in[2])[j];
      }
    }
    return out;
  }

  void backward(In in, const Tensor&, const Tensor& gy, GradIn grads) override {
    const Tensor& gamma = *in[1];
    const std::size_t c = gamma.size();
    const std::size_t rows = gy.size() / c;
    const double n = static_cast<double>(c);
    for (std::size_t r = 0; r < rows; ++r) {
      double sum_gh = 0.0, sum_ghx = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t i = r * c + j;
        const double gh = gy[i] * gamma[j];
        sum_gh += gh;
        sum_ghx += gh * xhat_[i];
        if (grads[1] != nullptr) (*grads[1])[j] += gy[i] * xhat_[i];
        if (grads[2] != nullptr) (*grads[2])[j] += gy[i];
      }
      if (grads[0] == nullptr) continue;
      for (std::size_t j = 0; j < c; ++j) {
        const std::size_t i = r * c + j;
        (*grads[0])[i] = inv_std_[r] * (gy[i] * gamma[j] - sum_gh / n - xhat_[i] * sum_ghx / n);
      }
    }
  }

 private:
  double eps_;
  Tensor xhat_, inv_std_;
};

// ------------------------------------------------------------ activation --

class ActivationOp final : public Op {
 public:
  explicit ActivationOp(Activation kind) : kind_(kind) {}
  std::string_view name() const override { return to_string(kind_); }

  Tensor forward(In in) override {
    Tensor out(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = apply_activation(kind_, (*in[0])[i]);
    return out;
  }

  void backward(In in, const Tensor& y, const Tensor& gy, GradIn grads) override {
    if (grads[0] == nullptr) return;
    const Tensor& x = *in[0];
    for (std::size_t i = 0; i < x.size(); ++i) {
      double d = 0.0;
      switch (kind_) {
        case Activation::relu:
          d = x[i] > 0.0 ? 1.0 : 0.0;
          break;
        case Activation::sigmoid:
          d = y[i] * (1.0 - y[i]);
          break;
        case Activation::softplus:
          d = x[i] > 20.0 ? 1.0 : sigmoid(x[i]);
          break;
        case Activation::silu: {
          const double s = sigmoid(x[i]);
          d = s * (1.0 + x[i] * (1.0 - s));
          break;
        }
      }
      (*grads[0])[i] = gy[i] * d;
    }
  }

 private:
  Activation kind_;
};

// --------------------------------------------------------------- softmax --

struct AxisView {
  std::size_t outer, len, inner;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size())
    throw ShapeError("axis " + std::to_string(axis) + " is out of range for shape " + to_string(shape));
  AxisView v{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

class SoftmaxOp final : public Op {
 public:
  explicit SoftmaxOp(std::size_t axis) : axis_(axis) {}
  std::string_view name() const override { return "softmax"; }

  Tensor forward(In in) override {
    const Tensor& x = *in[0];
    const AxisView v = axis_view(x.shape(), axis_);
    Tensor out(x.shape());
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t q = 0; q < v.inner; ++q) {
        const std::size_t base = o * v.len * v.inner + q;
        double peak = x[base];
        for (std::size_t k = 1; k < v.len; ++k) peak = std::max(peak, x[base + k * v.inner]);
        double total = 0.0;
        for (std::size_t k = 0; k < v.len; ++k) {
          const double e = std::exp(x[base + k * v.inner] - peak);
          out[base + k * v.inner] = e;
          total += e;
        }
        for (std::size_t k = 0; k < v.len; ++k) out[base + k * v.inner] /= total;
      }
    return out;
  }

  void backward(In, const Tensor& y, const Tensor& gy, GradIn grads) override {
    if (grads[0] == nullptr) return;
    const AxisView v = axis_view(y.shape(), axis_);
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t q = 0; q < v.inner; ++q) {
        const std::size_t base = o * v.len * v.inner + q;
        double s = 0.0;
        for (std::size_t k = 0; k < v.len; ++k) s += gy[base + k * v.inner] * y[base + k * v.inner];
        for (std::size_t k = 0; k < v.len; ++k) {
          const std::size_t i = base + k * v.inner;
          (*grads[0])[i] = y[i] * (gy[i] - s);
        }
      }
  }

 private:
  std::size_t axis_;
};

// --------------------------------------------------------- cross entropy --

class CrossEntropyOp final : public Op {
 public:
  explicit CrossEntropyOp(std::vector<std::size_t> labels) : labels_(std::move(labels)) {}
  std::string_view name() const override { return "cross_entropy"; }

  Tensor forward(In in) override {
    const Tensor& logits = *in[0];
    if (logits.rank() != 1 && logits.rank() != 2)
      throw ShapeError("cross_entropy: logits must be [K] or [B, K], got " + to_string(logits.shape()));
    const std::size_t k = logits.shape().back();
    const std::size_t rows = leading_count(logits.shape());
    if (labels_.size() != rows)
      throw ShapeError("cross_entropy: " + std::to_string(rows) + " rows of logits but " +
                       std::to_string(labels_.size()) + " labels");
    probs_ = Tensor(logits.shape());
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
      if (labels_[r] >= k)
        throw ValidationError("cross_entropy: label " + std::to_string(labels_[r]) +
                              " outside class range [0, " + std::to_string(k) + ")");
      const double* z = logits.ptr() + r * k;
      const double peak = *std::max_element(z, z + k);
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += std::exp(z[j] - peak);
      const double lse = peak + std::log(s);
      for (std::size_t j = 0; j < k; ++j) probs_[r * k + j] = std::exp(z[j] - lse);
      total += lse - z[labels_[r]];
    }
    return Tensor::scalar(total / static_cast<double>(rows));
  }

  void backward(In in, const Tensor&, const Tensor& gy, GradIn grads) override {
    if (grads[0] == nullptr) return;
    const std::size_t k = in[0]->shape().back();
    const std::size_t rows = labels_.size();
    const double scale = gy.item() / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t j = 0; j < k; ++j) {
        const double target = j == labels_[r] ? 1.0 : 0.0;
        (*grads[0])[r * k + j] = scale * (probs_[r * k + j] - target);
      }
  }

 private:
  std::vector<std::size_t> labels_;
  Tensor probs_;
};

// ------------------------------------------------------------ elementwise --

class AddOp final : public Op {
 public:
  std::string_view name() const override { return "add"; }
  Tensor forward(In in) override {
    require_same_shape("add", *in[0], *in[1]);
    Tensor out = *in[0];
    out += *in[1];
    return out;
  }
  void backward(In, const Tensor&, const Tensor& gy, GradIn grads) override {
    for (auto* g : grads)
      if (g != nullptr) *g = gy;
  }
};

class MulOp final : public Op {
 public:
  std::string_view name() const override { return "mul"; }
  Tensor forward(In in) override {
    require_same_shape("mul", *in[0], *in[1]);
    Tensor out(in[0]->shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = (*in[0])[i] * (*in[1])[i];
    return out;
  }
  void backward(In in, const Tensor&, const Tensor& gy, GradIn grads) override {
    for (std::size_t i = 0; i < gy.size(); ++i) {
      if (grads[0] != nullptr) (*grads[0])[i] = gy[i] * (*in[1])[i];
      if (grads[1] != nullptr) (*grads[1])[i] = gy[i] * (*in[0])[i];
    }
  }
};

class ScaleOp final : public Op {
 public:
  explicit ScaleOp(double factor) : factor_(factor) {}
  std::string_view name() const override { return "scale"; }
  Tensor forward(In in) override {
    Tensor out = *in[0];
    for (auto& v : out.data()) v *= factor_;
    return out;
  }
  void backward(In, const Tensor&, const Tensor& gy, GradIn grads) override {
    if (grads[0] == nullptr) return;
    for (std::size_t i = 0; i < gy.size(); ++i) (*grads[0])[i] = gy[i] * factor_;
  }

 private:
  double factor_;
};

class SumOp final : public Op {
 public:
  std::string_view name() const override { return "sum"; }
  Tensor forward(In in) override {
    double s = 0.0;
    for (double v : in[0]->data()) s += v;
    return Tensor::scalar(s);
  }
  void backward(In, const Tensor&, const Tensor& gy, GradIn grads) override {
    if (grads[0] != nullptr) grads[0]->fill(gy.item());
  }
};

class ReshapeOp final : public Op {
 public:
  explicit ReshapeOp(Shape shape) : shape_(std::move(shape)) {}
  std::string_view name() const override { return "reshape"; }
  Tensor forward(In in) override { return in[0]->reshaped(shape_); }
  void backward(In in, const Tensor&, const Tensor& gy, GradIn grads) override {
    if (grads[0] != nullptr) *grads[0] = gy.reshaped(in[0]->shape());
  }

 private:
  Shape shape_;
};

// -------------------------------------------------------------- channels --

class SliceChannelsOp final : public Op {
 public:
  SliceChannelsOp(std::size_t begin, std::size_t end) : begin_(begin), end_(end) {}
  std::string_view name() const override { return "slice_channels"; }

  Tensor forward(In in) override {
    const Tensor& x = *in[0];
    const std::size_t c = x.shape().back();
    if (begin_ >= end_ || end_ > c)
      throw ShapeError("slice_channels: range [" + std::to_string(begin_) + ", " +
                       std::to_string(end_) + ") is invalid for " + std::to_string(c) + " channels");
    Shape s = x.shape();
    s.back() = end_ - begin_;
    Tensor out(s);
    const std::size_t rows = leading_count(x.shape()), w = end_ - begin_;
    for (std::size_t r = 0; r < rows; ++r) std::copy_n(x.ptr() + r * c + begin_, w, out.ptr() + r * w);
    return out;
  }

  void backward(In in, const Tensor&, const Tensor& gy, GradIn grads) override {
    if (grads[0] == nullptr) return;
    const std::size_t c = in[0]->shape().back(), w = end_ - begin_;
    const std::size_t rows = leading_count(in[0]->shape());
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(gy.ptr() + r * w, w, grads[0]->ptr() + r * c + begin_);
  }

 private:
  std::size_t begin_, end_;
};

class ConcatChannelsOp final : public Op {
 public:
  std::string_view name() const override { return "concat_channels"; }

  Tensor forward(In in) override {
    const Tensor& a = *in[0];
    const Tensor& b = *in[1];
    if (a.rank() != b.rank() || leading_count(a.shape()) != leading_count(b.shape()) ||
        !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin()))
      throw ShapeError("concat_channels: leading extents differ, " + to_string(a.shape()) + " vs " +
                       to_string(b.shape()));
    const std::size_t ca = a.shape().back(), cb = b.shape().back();
    Shape s = a.shape();
    s.back() = ca + cb;
    Tensor out(s);
    for (std::size_t r = 0; r < leading_count(s); ++r) {
      std::copy_n(a.ptr() + r * ca, ca, out.ptr() + r * (ca + cb));
      std::copy_n(b.ptr() + r * cb, cb, out.ptr() + r * (ca + cb) + ca);
    }
    return out;
  }

  void backward(In in, const Tensor&, const Tensor& gy, GradIn grads) override {
    const std::size_t ca = in[0]->shape().back(), cb = in[1]->shape().back();
    for (std::size_t r = 0; r < leading_count(gy.shape()); ++r) {
      if (grads[0] != nullptr) std::copy_n(gy.ptr() + r * (ca + cb), ca, grads[0]->ptr() + r * ca);
      if (grads[1] != nullptr) std::copy_n(gy.ptr() + r * (ca + cb) + ca, cb, grads[1]->ptr() + r * cb);
    }
  }
};

class ChannelShuffleOp final : public Op {
 public:
  explicit ChannelShuffleOp(std::size_t groups) : groups_(groups) {}
  std::string_view name() const override { return "channel_shuffle"; }

  Tensor forward(In in) override {
    const Tensor& x = *in[0];
    const std::size_t c = x.shape().back();
    if (groups_ == 0 || c % groups_ != 0)
      throw ShapeError("channel_shuffle: " + std::to_string(c) + " channels are not divisible into " +
                       std::to_string(groups_) + " groups");
    Tensor out(x.shape());
    const std::size_t per = c / groups_;
    for (std::size_t r = 0; r < leading_count(x.shape()); ++r)
      for (std::size_t gi = 0; gi < groups_; ++gi)
        for (std::size_t i = 0; i < per; ++i) out[r * c + gi + groups_ * i] = x[r * c + gi * per + i];
    return out;
  }

  void backward(In in, const Tensor&, const Tensor& gy, GradIn grads) override {
    if (grads[0] == nullptr) return;
    const std::size_t c = in[0]->shape().back(), per = c / groups_;
    for (std::size_t r = 0; r < leading_count(gy.shape()); ++r)
      for (std::size_t gi = 0; gi < groups_; ++gi)
        for (std::size_t i = 0; i < per; ++i)
          (*grads[0])[r * c + gi * per + i] = gy[r * c + gi + groups_ * i];
  }

 private:
  std::size_t groups_;
};

// ---------------------------------------------------------------- tokens --

class PermuteTokensOp final : public Op {
 public:
  explicit PermuteTokensOp(std::vector<std::size_t> order) : order_(std::move(order)) {}
  std::string_view name() const override { return "permute_tokens"; }

  Tensor forward(In in) override {
    const Tensor& x = *in[0];
    if (x.rank() != 3 || x.dim(1) != order_.size())
      throw ShapeError("permute_tokens: expected [B, " + std::to_string(order_.size()) + ", C], got " +
                       to_string(x.shape()));
    const std::size_t batch = x.dim(0), n = x.dim(1), c = x.dim(2);
    Tensor out(x.shape());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(x.ptr() + (b * n + order_[i]) * c, c, out.ptr() + (b * n + i) * c);
    return out;
  }

  void backward(In in, const Tensor&, const Tensor& gy, GradIn grads) override {
    if (grads[0] == nullptr) return;
    const std::size_t batch = in[0]->dim(0), n = in[0]->dim(1), c = in[0]->dim(2);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < n; ++i)
        std::copy_n(gy.ptr() + (b * n + i) * c, c, grads[0]->ptr() + (b * n + order_[i]) * c);
  }

 private:
  std::vector<std::size_t> order_;
};

class MeanTokensOp final : public Op {
 public:
  std::string_view name() const override { return "mean_tokens"; }

  Tensor forward(In in) override {
    const Tensor& x = *in[0];
    if (x.rank() < 3) throw ShapeError("mean_tokens: expected [B, ..., C], got " + to_string(x.shape()));
    const std::size_t batch = x.dim(0), c = x.shape().back();
    const std::size_t n = x.size() / (batch * c);
    Tensor out({batch, c});
    const auto& k = kernels::active<double>();
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < n; ++t) k.axpy(1.0, x.ptr() + (b * n + t) * c, out.ptr() + b * c, c);
      for (std::size_t j = 0; j < c; ++j) out[b * c + j] /= static_cast<double>(n);
    }
    return out;
  }

  void backward(In in, const Tensor&, const Tensor& gy, GradIn grads) override {
    if (grads[0] == nullptr) return;
    const std::size_t batch = in[0]->dim(0), c = in[0]->shape().back();
    const std::size_t n = in[0]->size() / (batch * c);
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t t = 0; t < n; ++t)
        for (std::size_t j = 0; j < c; ++j)
          (*grads[0])[(b * n + t) * c + j] = gy[b * c + j] / static_cast<double>(n);
  }
};

// Shared index arithmetic for the two block-gather ops: maps an output
// element (batch, grid cell, feature) to its source element.
class BlockGatherOp : public Op {
 public:
  Tensor forward(In in) override {
    index_ = build_index(*in[0]);
    Tensor out(out_shape_);
    for (std::size_t i = 0; i < index_.size(); ++i) out[i] = (*in[0])[index_[i]];
    return out;
  }

  void backward(In, const Tensor&, const Tensor& gy, GradIn grads) override {
    if (grads[0] == nullptr) return;
    for (std::size_t i = 0; i < index_.size(); ++i) (*grads[0])[index_[i]] += gy[i];
  }

 protected:
  virtual std::vector<std::size_t> build_index(const Tensor& x) = 0;
  Shape out_shape_;

 private:
  std::vector<std::size_t> index_;
};

class ExtractPatchesOp final : public BlockGatherOp {
 public:
  explicit ExtractPatchesOp(std::size_t patch) : p_(patch) {}
  std::string_view name() const override { return "extract_patches"; }

 protected:
  std::vector<std::size_t> build_index(const Tensor& x) override {
    if (x.rank() != 4)
      throw ShapeError("patch_embed: expected a [B, D, H, W] volume batch, got " + to_string(x.shape()));
    if (p_ == 0) throw ValidationError("patch_embed: patch size must be positive");
    const std::size_t batch = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (d % p_ != 0 || h % p_ != 0 || w % p_ != 0)
      throw ValidationError("patch_embed: volume dims " + to_string(Shape{d, h, w}) +
                            " are not divisible by patch size " + std::to_string(p_) +
                            "; resize the volume to a multiple of the patch size first");
    const std::size_t gd = d / p_, gh = h / p_, gw = w / p_, f = p_ * p_ * p_;
    out_shape_ = {batch, gd, gh, gw, f};
    std::vector<std::size_t> index;
    index.reserve(element_count(out_shape_));
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < gd; ++i)
        for (std::size_t j = 0; j < gh; ++j)
          for (std::size_t k = 0; k < gw; ++k)
            for (std::size_t a = 0; a < p_; ++a)
              for (std::size_t bb = 0; bb < p_; ++bb)
                for (std::size_t cc = 0; cc < p_; ++cc)
                  index.push_back(((b * d + i * p_ + a) * h + j * p_ + bb) * w + k * p_ + cc);
    return index;
  }

 private:
  std::size_t p_;
};

class MergeNeighborhoodsOp final : public BlockGatherOp {
 public:
  std::string_view name() const override { return "merge_neighborhoods"; }

 protected:
  std::vector<std::size_t> build_index(const Tensor& x) override {
    if (x.rank() != 5)
      throw ShapeError("patch_merging: expected [B, D, H, W, C], got " + to_string(x.shape()));
    const std::size_t batch = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3), c = x.dim(4);
    if (d % 2 != 0 || h % 2 != 0 || w % 2 != 0)
      throw ValidationError("patch_merging: grid dims " + to_string(Shape{d, h, w}) +
                            " must all be even");
    out_shape_ = {batch, d / 2, h / 2, w / 2, 8 * c};
    std::vector<std::size_t> index;
    index.reserve(x.size());
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t i = 0; i < d / 2; ++i)
        for (std::size_t j = 0; j < h / 2; ++j)
          for (std::size_t k = 0; k < w / 2; ++k)
            for (std::size_t dd = 0; dd < 2; ++dd)
              for (std::size_t hh = 0; hh < 2; ++hh)
                for (std::size_t ww = 0; ww < 2; ++ww) {
                  const std::size_t row = ((b * d + 2 * i + dd) * h + 2 * j + hh) * w + 2 * k + ww;
                  for (std::size_t ch = 0; ch < c; ++ch) index.push_back(row * c + ch);
                }
    return index;
  }
};

}  // namespace

BatchNormState::BatchNormState(std::size_t channels, double momentum_, double eps_)
    : running_mean({channels}, 0.0), running_var({channels}, 1.0), momentum(momentum_), eps(eps_) {}

Var linear(Graph& g, Var x, Var weight, Var bias) {
  std::vector<Var> in{x, weight};
  if (bias.valid()) in.push_back(bias);
  return record<LinearOp>(g, std::move(in));
}

Var conv3d(Graph& g, Var x, Var kernel, Var bias) {
  std::vector<Var> in{x, kernel};
  if (bias.valid()) in.push_back(bias);
  return record<Conv3dOp>(g, std::move(in));
}

Var batch_norm(Graph& g, Var x, Var gamma, Var beta, BatchNormState& state, NormMode mode) {
  auto op = std::make_unique<BatchNormOp>(mode, state.eps, state.running_mean, state.running_var);
  const BatchNormOp* raw = op.get();
  Var out = g.apply(std::move(op), {x, gamma, beta});
  if (mode == NormMode::train) {
    const double rows = static_cast<double>(leading_count(g.value(x).shape()));
    const double unbias = rows / (rows - 1.0);
    const double m = state.momentum;
    for (std::size_t j = 0; j < state.running_mean.size(); ++j) {
      state.running_mean[j] = (1.0 - m) * state.running_mean[j] + m * raw->batch_mean()[j];
      state.running_var[j] = (1.0 - m) * state.running_var[j] + m * raw->batch_var()[j] * unbias;
    }
  }
  return out;
}

Var layer_norm(Graph& g, Var x, Var gamma, Var beta, double eps) {
  return record<LayerNormOp>(g, {x, gamma, beta}, eps);
}

Var activation(Graph& g, Activation kind, Var x) { return record<ActivationOp>(g, {x}, kind); }

Var softmax(Graph& g, Var x, std::size_t axis) { return record<SoftmaxOp>(g, {x}, axis); }

Var cross_entropy(Graph& g, Var logits, std::span<const std::size_t> labels) {
  return record<CrossEntropyOp>(g, {logits}, std::vector<std::size_t>(labels.begin(), labels.end()));
}

Var add(Graph& g, Var a, Var b) { return record<AddOp>(g, {a, b}); }
Var mul(Graph& g, Var a, Var b) { return record<MulOp>(g, {a, b}); }
Var scale(Graph& g, Var x, double factor) { return record<ScaleOp>(g, {x}, factor); }
Var sum(Graph& g, Var x) { return record<SumOp>(g, {x}); }
Var reshape(Graph& g, Var x, Shape shape) { return record<ReshapeOp>(g, {x}, std::move(shape)); }

Var slice_channels(Graph& g, Var x, std::size_t begin, std::size_t end) {
  return record<SliceChannelsOp>(g, {x}, begin, end);
}

Var concat_channels(Graph& g, Var a, Var b) { return record<ConcatChannelsOp>(g, {a, b}); }

Var channel_shuffle(Graph& g, Var x, std::size_t groups) {
  return record<ChannelShuffleOp>(g, {x}, groups);
}

Var permute_tokens(Graph& g, Var x, std::vector<std::size_t> order) {
  std::vector<bool> seen(order.size(), false);
  for (auto i : order) {
    if (i >= order.size() || seen[i]) throw ValidationError("permute_tokens: order is not a permutation");
    seen[i] = true;
  }
  return record<PermuteTokensOp>(g, {x}, std::move(order));
}

Var mean_tokens(Graph& g, Var x) { return record<MeanTokensOp>(g, {x}); }

Var extract_patches(Graph& g, Var volume, std::size_t patch) {
  return record<ExtractPatchesOp>(g, {volume}, patch);
}

Var merge_neighborhoods(Graph& g, Var grid) { return record<MergeNeighborhoodsOp>(g, {grid}); }

}  // namespace vmamba::ops
