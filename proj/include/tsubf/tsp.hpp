#pragma once

#include "tsubf/nn.hpp"

// Trans-spatial perception block: four attention heads over a volumetric
// feature map [C, H, W, D]: one channel head plus three inter-layer heads
// (height, width, depth) that share their Q/K projections, each reduced to
// C/4 channels and fused by a 3x3x3 then 1x1x1 conv block.

namespace tsubf {

// Inter-layer attention over one axis of [C, S1, S2, S3]. Tokens are whole
// layers along `axis` (0 = channel head, 1..3 = spatial heads); for extent L
// the attention matrix is L x L, row-stochastic, scaled by 1/sqrt(d) with d
// the token vector length. If attn_out is given, the L x L matrix is copied
// there (detached).
template <class T>
Tensor<T> attention_over_axis(const Tensor<T>& q, const Tensor<T>& k,
                              const Tensor<T>& v, int axis,
                              Tensor<T>* attn_out = nullptr) {
  check_same_shape("attention: q vs k", q, k);
  check_same_shape("attention: q vs v", q, v);
  if (q.ndim() != 4 || axis < 0 || axis > 3)
    throw ShapeError("attention_over_axis: need 4-d input and axis in 0..3");
  std::vector<int> perm;
  perm.push_back(axis);
  for (int a = 0; a < 4; ++a)
    if (a != axis) perm.push_back(a);
  std::vector<int> inv(4);
  for (int i = 0; i < 4; ++i) inv[perm[static_cast<size_t>(i)]] = i;

  const int L = q.dim(axis);
  const int rest = static_cast<int>(q.size() / L);
  Shape perm_shape(4);
  for (int i = 0; i < 4; ++i) perm_shape[i] = q.dim(perm[static_cast<size_t>(i)]);

  auto tokens = [&](const Tensor<T>& t) {
    return reshape(permute(t, perm), {L, rest});
  };
  auto qm = tokens(q), km = tokens(k), vm = tokens(v);
  const T scale = T(1) / std::sqrt(static_cast<T>(rest));
  auto logits = mul_scalar(matmul(qm, permute(km, {1, 0})), scale);
  auto attn = softmax(logits, 1);
  if (attn_out) *attn_out = attn.clone();
  auto out = matmul(attn, vm);
  return permute(reshape(out, perm_shape), inv);
}

template <class T>
Tensor<T> spatial_head(const Tensor<T>& q, const Tensor<T>& k,
                       const Tensor<T>& v, int spatial_axis,
                       Tensor<T>* attn_out = nullptr) {
  if (spatial_axis < 1 || spatial_axis > 3)
    throw ShapeError("spatial_head: axis must be 1 (height), 2 (width) or 3 "
                     "(depth)");
  return attention_over_axis(q, k, v, spatial_axis, attn_out);
}

template <class T>
Tensor<T> channel_head(const Tensor<T>& q, const Tensor<T>& k,
                       const Tensor<T>& v, Tensor<T>* attn_out = nullptr) {
  return attention_over_axis(q, k, v, 0, attn_out);
}

// MAC count of one attention head: Q.K^T plus A.V, both L x L x rest.
inline long long attention_flops(int L, long long rest) {
  return 2LL * L * L * rest;
}

template <class T>
struct TspParams {
  LinearProjection<T> q_s, k_s, v_h, v_w, v_d;  // shared spatial Q/K + values
  LinearProjection<T> q_c, k_c, v_c;            // channel head
  LinearProjection<T> red_h, red_w, red_d, red_c;  // C -> C/4
  ConvBlock<T> fuse3, fuse1;
  bool residual = true;

  TspParams() = default;
  TspParams(int c, Rng& rng, bool residual_ = true)
      : q_s(c, c, rng),
        k_s(c, c, rng),
        v_h(c, c, rng),
        v_w(c, c, rng),
        v_d(c, c, rng),
        q_c(c, c, rng),
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
      throw ConfigError("TSP: channel count " + std::to_string(c) +
                        " must be divisible by 4");
  }

  int channels() const { return q_s.c_in(); }

  Tensor<T> forward(const Tensor<T>& x) const {
    if (x.ndim() != 4 || x.dim(0) != channels())
      throw ConfigError("TSP: input " + shape_str(x.shape()) +
                        " does not carry " + std::to_string(channels()) +
                        " channels");
    auto qs = q_s.forward(x);
    auto ks = k_s.forward(x);
    auto hh = red_h.forward(spatial_head(qs, ks, v_h.forward(x), 1));
    auto hw = red_w.forward(spatial_head(qs, ks, v_w.forward(x), 2));
    auto hd = red_d.forward(spatial_head(qs, ks, v_d.forward(x), 3));
    auto xl = concat<T>({hh, hw, hd}, 0);  // 3C/4
    auto hc = channel_head(q_c.forward(x), k_c.forward(x), v_c.forward(x));
    auto xc = red_c.forward(hc);  // C/4
    auto fused = fuse1.forward(fuse3.forward(concat<T>({xl, xc}, 0)));
    return residual ? add(x, fused) : fused;
  }

  long long flops(const Shape& sp) const {
    const int c = channels();
    const long long vox = numel(sp);
    long long f = 0;
    for (const auto* p : {&q_s, &k_s, &v_h, &v_w, &v_d, &q_c, &k_c, &v_c})
      f += p->flops(vox);
    for (int a = 0; a < 3; ++a) f += attention_flops(sp[a], vox * c / sp[a]);
    f += attention_flops(c, vox);
    for (const auto* p : {&red_h, &red_w, &red_d, &red_c}) f += p->flops(vox);
    f += fuse3.flops(sp) + fuse1.flops(sp);
    return f;
  }

  void collect(const std::string& prefix, std::vector<ParamRef<T>>& out) {
    q_s.collect(prefix + ".q_s", out);
    k_s.collect(prefix + ".k_s", out);
    v_h.collect(prefix + ".v_h", out);
    v_w.collect(prefix + ".v_w", out);
    v_d.collect(prefix + ".v_d", out);
    q_c.collect(prefix + ".q_c", out);
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
