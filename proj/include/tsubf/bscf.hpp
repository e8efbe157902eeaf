#pragma once

#include "tsubf/tsp.hpp"

// Bi-direction sample collaborated fusion block. Both branches pass through
// the same 3x3x3 stem (one parameter object, two uses, so its gradient
// accumulates from both paths), then per-branch 1x1x1 expand/contract convs.
// Cross-attention takes queries from the up-sampled branch and keys/values
// from the down-sampled branch, with the TSP head structure.

namespace tsubf {

enum class BscfBranch { up, down };

template <class T>
struct BscfParams {
  ConvBlock<T> conv3_s;                      // shared stem C -> C
  ConvBlock<T> up_inner, up_outer;           // C -> 2C -> C
  ConvBlock<T> down_inner, down_outer;       // C -> 2C -> C
  LinearProjection<T> q_s, q_c;              // from the up branch
  LinearProjection<T> k_s, v_h, v_w, v_d, k_c, v_c;  // from the down branch
  LinearProjection<T> red_h, red_w, red_d, red_c;    // C -> C/4
  ConvBlock<T> fuse3, fuse1;
  bool residual = true;

  BscfParams() = default;
  BscfParams(int c, Rng& rng, bool residual_ = true)
      : conv3_s(c, c, 3, 1, rng),
        up_inner(c, 2 * c, 1, 1, rng),
        up_outer(2 * c, c, 1, 1, rng),
        down_inner(c, 2 * c, 1, 1, rng),
        down_outer(2 * c, c, 1, 1, rng),
        q_s(c, c, rng),
        q_c(c, c, rng),
        k_s(c, c, rng),
        v_h(c, c, rng),
        v_w(c, c, rng),
        v_d(c, c, rng),
        k_c(c, c, rng),
        v_c(c, c, rng),
        red_h(c, c / 4, rng),
        red_w(c, c / 4, rng),
        red_d(c, c / 4, rng),
        red_c(c, c / 4, rng),
        fuse3(c, c, 3, 1, rng),
        fuse1(c, c, 1, 1, rng),
        residual(residual_) {
    if (c % 4 != 0)
      throw ConfigError("BSCF: channel count " + std::to_string(c) +
                        " must be divisible by 4");
  }

  int channels() const { return conv3_s.c_in(); }

  // Shared 3x3x3 stem, then the branch's 1x1x1 expand/contract pair.
  Tensor<T> branch_stem(const Tensor<T>& x, BscfBranch branch) const {
    if (x.ndim() != 4 || x.dim(0) != channels())
      throw ShapeError("branch_stem: input " + shape_str(x.shape()) +
                       " does not carry " + std::to_string(channels()) +
                       " channels");
    auto s = conv3_s.forward(x);
    if (branch == BscfBranch::up) return up_outer.forward(up_inner.forward(s));
    return down_outer.forward(down_inner.forward(s));
  }

  Tensor<T> forward(const Tensor<T>& x_u, const Tensor<T>& x_d) const {
    check_same_shape("bscf_forward", x_u, x_d);
    auto su = branch_stem(x_u, BscfBranch::up);
    auto sd = branch_stem(x_d, BscfBranch::down);
    auto qs = q_s.forward(su);
    auto ks = k_s.forward(sd);
    auto hh = red_h.forward(spatial_head(qs, ks, v_h.forward(sd), 1));
    auto hw = red_w.forward(spatial_head(qs, ks, v_w.forward(sd), 2));
    auto hd = red_d.forward(spatial_head(qs, ks, v_d.forward(sd), 3));
    auto xl = concat<T>({hh, hw, hd}, 0);
    auto hc = channel_head(q_c.forward(su), k_c.forward(sd), v_c.forward(sd));
    auto xc = red_c.forward(hc);
    auto fused = fuse1.forward(fuse3.forward(concat<T>({xl, xc}, 0)));
    return residual ? add(x_u, fused) : fused;
  }

  long long flops(const Shape& sp) const {
    const int c = channels();
    const long long vox = numel(sp);
    long long f = 2 * conv3_s.flops(sp);
    f += up_inner.flops(sp) + up_outer.flops(sp);
    f += down_inner.flops(sp) + down_outer.flops(sp);
    for (const auto* p : {&q_s, &q_c, &k_s, &v_h, &v_w, &v_d, &k_c, &v_c})
      f += p->flops(vox);
    for (int a = 0; a < 3; ++a) f += attention_flops(sp[a], vox * c / sp[a]);
    f += attention_flops(c, vox);
    for (const auto* p : {&red_h, &red_w, &red_d, &red_c}) f += p->flops(vox);
    f += fuse3.flops(sp) + fuse1.flops(sp);
    return f;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    conv3_s.collect(prefix + ".conv3_s", out);
    up_inner.collect(prefix + ".up_inner", out);
    up_outer.collect(prefix + ".up_outer", out);
    down_inner.collect(prefix + ".down_inner", out);
    down_outer.collect(prefix + ".down_outer", out);
    q_s.collect(prefix + ".q_s", out);
    q_c.collect(prefix + ".q_c", out);
    k_s.collect(prefix + ".k_s", out);
    v_h.collect(prefix + ".v_h", out);
    v_w.collect(prefix + ".v_w", out);
    v_d.collect(prefix + ".v_d", out);
    k_c.collect(prefix + ".k_c", out);
    v_c.collect(prefix + ".v_c", out);
    red_h.collect(prefix + ".red_h", out);
    red_w.collect(prefix + ".red_w", out);
    red_d.collect(prefix + ".red_d", out);
    red_c.collect(prefix + ".red_c", out);
    fuse3.collect(prefix + ".fuse3", out);
    fuse1.collect(prefix + ".fuse1", out);
  }
};

}  // namespace tsubf
