#pragma once

#include <string>
#include <vector>

#include "tsubf/ops.hpp"
#include "tsubf/random.hpp"

// Network building blocks: per-voxel linear projections, conv blocks with
// instance norm + leaky rectifier, the 4x patch embedding stem, and strided
// down/up-sampling stages. All feature tensors are channel-first
// [C, S0, S1, S2]; weights use fan-in-scaled uniform init, biases zero.

namespace tsubf {

template <class T>
struct ParamRef {
  std::string name;
  Tensor<T>* tensor;
};

template <class T>
void init_fan_in_uniform(Tensor<T>& w, long long fan_in, Rng& rng) {
  const T bound = std::sqrt(T(3) / static_cast<T>(fan_in));
  fill_uniform(w, rng, -bound, bound);
}

template <class T>
long long param_count(const std::vector<ParamRef<T>>& ps) {
  long long n = 0;
  for (const auto& p : ps) n += p.tensor->size();
  return n;
}

// Per-voxel channel mapping y[:,v] = W x[:,v] + b.
template <class T>
struct LinearProjection {
  Tensor<T> weight;  // [C_out, C_in]
  Tensor<T> bias;    // [C_out]
  bool has_bias = true;

  LinearProjection() = default;
  LinearProjection(int c_in, int c_out, Rng& rng, bool with_bias = true)
      : weight({c_out, c_in}), bias({c_out}), has_bias(with_bias) {
    init_fan_in_uniform(weight, c_in, rng);
  }

  int c_in() const { return weight.dim(1); }
  int c_out() const { return weight.dim(0); }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(0) != c_in())
      throw ShapeError("project: input " + shape_str(x.shape()) +
                       " does not carry " + std::to_string(c_in()) +
                       " channels");
    Shape sp{x.dim(1), x.dim(2), x.dim(3)};
    auto flat = reshape(x, {c_in(), static_cast<int>(numel(sp))});
    auto y = matmul(weight, flat);
    auto y4 = reshape(y, {c_out(), sp[0], sp[1], sp[2]});
    return has_bias ? bias_add(y4, bias) : y4;
  }

  long long flops(long long voxels) const {
    return static_cast<long long>(c_in()) * c_out() * voxels;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".weight", &weight});
    if (has_bias) out.push_back({prefix + ".bias", &bias});
  }
};

// Conv + bias (+ instance norm + leaky rectifier unless norm_act is off).
// Stride-1 blocks preserve spatial extent (same padding); stride-2 3x3x3
// blocks halve it exactly via asymmetric padding (1 low, 0 high).
template <class T>
struct ConvBlock {
  Tensor<T> kernel;  // [C_out, C_in, k, k, k]
  Tensor<T> bias, gamma, beta;
  int stride = 1;
  int pad_lo = 0, pad_hi = 0;
  T slope = T(0.01);
  bool norm_act = true;

  ConvBlock() = default;
  ConvBlock(int c_in, int c_out, int k, int stride_, Rng& rng,
            bool norm_act_ = true)
      : kernel({c_out, c_in, k, k, k}),
        bias({c_out}),
        gamma(Tensor<T>::full({c_out}, T(1))),
        beta({c_out}),
        stride(stride_),
        norm_act(norm_act_) {
    if (k % 2 == 0) throw ConfigError("ConvBlock: kernel size must be odd");
    if (stride_ == 1) {
      pad_lo = pad_hi = (k - 1) / 2;
    } else if (stride_ == 2 && k == 3) {
      pad_lo = 1;
      pad_hi = 0;
    } else if (k == 1) {
      pad_lo = pad_hi = 0;
    } else {
      throw ConfigError("ConvBlock: unsupported kernel/stride combination");
    }
    init_fan_in_uniform(kernel, static_cast<long long>(c_in) * k * k * k, rng);
  }

  int c_in() const { return kernel.dim(1); }
  int c_out() const { return kernel.dim(0); }
  int k() const { return kernel.dim(2); }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (stride == 2)
      for (int a = 1; a <= 3; ++a)
        if (x.dim(a) % 2 != 0)
          throw ConfigError("stride-2 conv: spatial extent " +
                            std::to_string(x.dim(a)) + " is odd");
    auto y = bias_add(conv3d(x, kernel, stride, pad_lo, pad_hi), bias);
    if (!norm_act) return y;
    return leaky_relu(instance_norm(y, gamma, beta), slope);
  }

  Shape out_spatial(const Shape& sp) const {
    Shape o(3);
    for (int a = 0; a < 3; ++a)
      o[a] = (sp[a] + pad_lo + pad_hi - k()) / stride + 1;
    return o;
  }

  long long flops(const Shape& sp_in) const {
    return static_cast<long long>(c_in()) * c_out() * k() * k() * k() *
           numel(out_spatial(sp_in));
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".kernel", &kernel});
    out.push_back({prefix + ".bias", &bias});
    if (norm_act) {
      out.push_back({prefix + ".gamma", &gamma});
      out.push_back({prefix + ".beta", &beta});
    }
  }
};

// Two stride-2 3x3x3 conv blocks: spatial dims / 4, channels -> c1.
template <class T>
struct PatchEmbedding {
  ConvBlock<T> conv_a, conv_b;

  PatchEmbedding() = default;
  PatchEmbedding(int c_img, int c1, Rng& rng)
      : conv_a(c_img, c1, 3, 2, rng), conv_b(c1, c1, 3, 2, rng) {}

  Tensor<T> forward(const Tensor<T>& x) const {
    for (int a = 1; a <= 3; ++a)
      if (x.dim(a) % 4 != 0)
        throw ConfigError("embed_patches: spatial extent " +
                          std::to_string(x.dim(a)) +
                          " is not divisible by 4; pad the volume first");
    return conv_b.forward(conv_a.forward(x));
  }

  long long flops(const Shape& sp) const {
    return conv_a.flops(sp) + conv_b.flops(conv_a.out_spatial(sp));
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    conv_a.collect(prefix + ".conv_a", out);
    conv_b.collect(prefix + ".conv_b", out);
  }
};

// Stride-2 3x3x3 conv: spatial dims halved, channels c_in -> c_out.
template <class T>
struct DownsampleStage {
  ConvBlock<T> conv;

  DownsampleStage() = default;
  DownsampleStage(int c_in, int c_out, Rng& rng) : conv(c_in, c_out, 3, 2, rng) {}

  Tensor<T> forward(const Tensor<T>& x) const { return conv.forward(x); }
  long long flops(const Shape& sp) const { return conv.flops(sp); }
  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    conv.collect(prefix + ".conv", out);
  }
};

// Stride-2 2x2x2 transposed conv: spatial dims doubled, channels c_in ->
// c_out, followed by instance norm + leaky rectifier.
template <class T>
struct UpsampleStage {
  Tensor<T> kernel;  // [C_in, C_out, 2, 2, 2]
  Tensor<T> bias, gamma, beta;
  T slope = T(0.01);

  UpsampleStage() = default;
  UpsampleStage(int c_in, int c_out, Rng& rng)
      : kernel({c_in, c_out, 2, 2, 2}),
        bias({c_out}),
        gamma(Tensor<T>::full({c_out}, T(1))),
        beta({c_out}) {
    init_fan_in_uniform(kernel, static_cast<long long>(c_in) * 8, rng);
  }

  int c_in() const { return kernel.dim(0); }
  int c_out() const { return kernel.dim(1); }

  Tensor<T> forward(const Tensor<T>& x) const {
    auto y = bias_add(conv3d_transpose(x, kernel, 2), bias);
    return leaky_relu(instance_norm(y, gamma, beta), slope);
  }

  long long flops(const Shape& sp) const {
    return static_cast<long long>(c_in()) * c_out() * 8 * numel(sp);
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    out.push_back({prefix + ".kernel", &kernel});
    out.push_back({prefix + ".bias", &bias});
    out.push_back({prefix + ".gamma", &gamma});
    out.push_back({prefix + ".beta", &beta});
  }
};

}  // namespace tsubf
