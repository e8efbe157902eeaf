#pragma once

#include <array>

#include "tsubf/ops.hpp"

// Training objective: soft dice + cross-entropy plus a weighted Sobel
// smoothness term computed from 3x3x3 gradient kernels. Volumes are
// channel-first [l, H, W, D]; the dice/CE core works on flat [V, l]
// voxel-by-class matrices.

namespace tsubf {

enum class SobelAggregate { signed_mean, absolute_mean };

struct LossConfig {
  double lambda = 0.1;
  SobelAggregate aggregate = SobelAggregate::absolute_mean;
  std::vector<int> class_mask;  // empty = all classes
  double epsilon = 1e-5;
  // Literal transcription of the printed dice/CE combination (CE inside the
  // subtracted bracket). Comparison only; not a sensible training objective.
  bool literal_dice_ce = false;
};

// The three 3x3x3 Sobel kernels: a [-1,0,1] derivative along one axis,
// [1,2,1] smoothing along the other two. Index order matches the spatial
// axes of [C, S0, S1, S2] feature volumes: H_x differentiates axis 0 (x),
// H_y axis 1, H_z axis 2. Each kernel sums to zero and is antisymmetric
// under reflection of its own axis.
template <class T>
std::array<Tensor<T>, 3> sobel_kernels() {
  static const int deriv[3] = {-1, 0, 1};
  static const int smooth[3] = {1, 2, 1};
  std::array<Tensor<T>, 3> ks{Tensor<T>({1, 1, 3, 3, 3}),
                              Tensor<T>({1, 1, 3, 3, 3}),
                              Tensor<T>({1, 1, 3, 3, 3})};
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b)
      for (int c = 0; c < 3; ++c) {
        ks[0].data()[(a * 3 + b) * 3 + c] = T(deriv[a] * smooth[b] * smooth[c]);
        ks[1].data()[(a * 3 + b) * 3 + c] = T(smooth[a] * deriv[b] * smooth[c]);
        ks[2].data()[(a * 3 + b) * 3 + c] = T(smooth[a] * smooth[b] * deriv[c]);
      }
  return ks;
}

// Soft dice + cross-entropy on [V, l] matrices: Y one-hot rows, P
// probability rows. Returns (1 - mean_i dice_i) - (1/V) sum Y log(P+eps).
template <class T>
Tensor<T> dice_ce_loss(const Tensor<T>& y, const Tensor<T>& p,
                       const LossConfig& cfg = {}) {
  if (y.ndim() != 2 || p.ndim() != 2 || y.shape() != p.shape())
    throw ShapeError("dice_ce_loss: expected matching [V,l] matrices, got " +
                     shape_str(y.shape()) + " and " + shape_str(p.shape()));
  for (long long i = 0; i < p.size(); ++i)
    if (p.data()[i] < T(0))
      throw DomainError("dice_ce_loss: probabilities contain negatives");
  const int V = y.dim(0);
  const T eps = static_cast<T>(cfg.epsilon);
  auto inter = sum(mul(y, p), 0);                      // [l]
  auto denom = add(sum(mul(y, y), 0), sum(mul(p, p), 0));
  auto dice = divide(mul_scalar(inter, T(2)), add_scalar(denom, eps));
  auto ce_terms = mul(y, log(add_scalar(p, eps)));
  if (cfg.literal_dice_ce) {
    // 1 - sum_i (dice_i + sum_v Y log P), exactly as printed
    return add_scalar(neg(add(sum(dice), sum(ce_terms))), T(1));
  }
  auto dice_loss = add_scalar(neg(mean(dice, 0)), T(1));
  auto ce_loss = mul_scalar(sum(ce_terms), T(-1) / static_cast<T>(V));
  return add(dice_loss, ce_loss);
}

// Valid-region Sobel responses of one class volume [H, W, D], aggregated to
// three scalars per cfg.aggregate. Differentiable.
template <class T>
std::array<Tensor<T>, 3> sobel_gradients(const Tensor<T>& p_class,
                                         const LossConfig& cfg = {}) {
  if (p_class.ndim() != 3)
    throw ShapeError("sobel_gradients: expected [H,W,D], got " +
                     shape_str(p_class.shape()));
  for (int a = 0; a < 3; ++a)
    if (p_class.dim(a) < 3)
      throw DomainError("sobel_gradients: extent " +
                        std::to_string(p_class.dim(a)) +
                        " along axis " + std::to_string(a) + " is below 3");
  auto vol = reshape(p_class, {1, p_class.dim(0), p_class.dim(1),
                               p_class.dim(2)});
  auto kernels = sobel_kernels<T>();
  std::array<Tensor<T>, 3> out;
  for (int a = 0; a < 3; ++a) {
    auto resp = conv3d(vol, kernels[a], 1, 0);
    out[static_cast<size_t>(a)] =
        cfg.aggregate == SobelAggregate::absolute_mean ? mean(abs(resp))
                                                       : mean(resp);
  }
  return out;
}

// lambda * sum over included classes of ||(G_x, G_y, G_z)||.
template <class T>
Tensor<T> sobel_loss(const Tensor<T>& p, const LossConfig& cfg = {}) {
  if (p.ndim() != 4)
    throw ShapeError("sobel_loss: expected [l,H,W,D], got " +
                     shape_str(p.shape()));
  if (cfg.lambda < 0) throw ConfigError("sobel_loss: lambda must be >= 0");
  if (cfg.lambda == 0) return Tensor<T>::scalar(T(0));
  const int l = p.dim(0);
  std::vector<int> classes = cfg.class_mask;
  if (classes.empty())
    for (int i = 0; i < l; ++i) classes.push_back(i);
  Tensor<T> acc = Tensor<T>::scalar(T(0));
  for (int i : classes) {
    if (i < 0 || i >= l)
      throw ConfigError("sobel_loss: class " + std::to_string(i) +
                        " outside [0," + std::to_string(l) + ")");
    auto pc = reshape(slice(p, 0, i, 1), {p.dim(1), p.dim(2), p.dim(3)});
    auto g = sobel_gradients(pc, cfg);
    auto sq = add(add(mul(g[0], g[0]), mul(g[1], g[1])), mul(g[2], g[2]));
    acc = add(acc, sqrt(sq));
  }
  return mul_scalar(acc, static_cast<T>(cfg.lambda));
}

// Combined objective on channel-first volumes [l,H,W,D]. With lambda == 0
// this is bitwise equal to the dice+CE part alone.
template <class T>
Tensor<T> total_loss(const Tensor<T>& y_vol, const Tensor<T>& p_vol,
                     const LossConfig& cfg = {}) {
  check_same_shape("total_loss", y_vol, p_vol);
  const int l = y_vol.dim(0);
  const int V = static_cast<int>(y_vol.size() / l);
  auto flat = [&](const Tensor<T>& t) {
    return permute(reshape(t, {l, V}), {1, 0});  // [V,l]
  };
  auto base = dice_ce_loss(flat(y_vol), flat(p_vol), cfg);
  if (cfg.lambda == 0) return base;
  return add(base, sobel_loss(p_vol, cfg));
}

}  // namespace tsubf
