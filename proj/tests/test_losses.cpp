#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "tsubf/gradcheck.hpp"
#include "tsubf/losses.hpp"
#include "tsubf/random.hpp"

using namespace tsubf;

namespace {

double oracle_dice_ce(const Tensor<double>& y, const Tensor<double>& p,
                      double eps) {
  const int V = y.dim(0), l = y.dim(1);
  double dice_sum = 0;
  for (int i = 0; i < l; ++i) {
    double inter = 0, sy = 0, sp = 0;
    for (int v = 0; v < V; ++v) {
      inter += y.data()[v * l + i] * p.data()[v * l + i];
      sy += y.data()[v * l + i] * y.data()[v * l + i];
      sp += p.data()[v * l + i] * p.data()[v * l + i];
    }
    dice_sum += 2 * inter / (sy + sp + eps);
  }
  double ce = 0;
  for (int v = 0; v < V; ++v)
    for (int i = 0; i < l; ++i)
      ce += y.data()[v * l + i] * std::log(p.data()[v * l + i] + eps);
  return (1.0 - dice_sum / l) - ce / V;
}

Tensor<double> one_hot(const std::vector<int>& labels, int l) {
  Tensor<double> y({static_cast<int>(labels.size()), l});
  for (size_t v = 0; v < labels.size(); ++v)
    y.data()[v * static_cast<size_t>(l) + static_cast<size_t>(labels[v])] = 1;
  return y;
}

}  // namespace

TEST_CASE("sobel kernels: printed constants and identities") {
  auto ks = sobel_kernels<double>();
  const int deriv[3] = {-1, 0, 1};
  const int smooth[3] = {1, 2, 1};
  for (int axis = 0; axis < 3; ++axis) {
    double s = 0;
    for (int i = 0; i < 27; ++i) s += ks[axis].data()[i];
    CHECK(s == 0.0);  // zero-sum
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        for (int c = 0; c < 3; ++c) {
          int idx[3] = {a, b, c};
          // separability: outer product of the derivative vector on the
          // kernel's own axis and smoothing on the others
          double want = 1;
          for (int ax = 0; ax < 3; ++ax)
            want *= (ax == axis) ? deriv[idx[ax]] : smooth[idx[ax]];
          CHECK(ks[axis].data()[(a * 3 + b) * 3 + c] == want);
          // antisymmetry under reflection of the kernel's own axis
          int ridx[3] = {a, b, c};
          ridx[axis] = 2 - ridx[axis];
          CHECK(ks[axis].data()[(a * 3 + b) * 3 + c] ==
                -ks[axis].data()[(ridx[0] * 3 + ridx[1]) * 3 + ridx[2]]);
        }
  }
}

TEST_CASE("dice_ce_loss: perfect, uniform, oracle") {
  LossConfig cfg;
  auto y = one_hot({0, 1, 0, 1}, 2);
  auto p = y.clone();
  CHECK(std::fabs(dice_ce_loss(y, p, cfg).item()) < 1e-4);

  // uniform P = 1/2, balanced Y: dice term 1/3, CE ln 2
  const int V = 8;
  std::vector<int> labels;
  for (int v = 0; v < V; ++v) labels.push_back(v % 2);
  auto yb = one_hot(labels, 2);
  auto pu = Tensor<double>::full({V, 2}, 0.5);
  const double got = dice_ce_loss(yb, pu, cfg).item();
  CHECK(got == Catch::Approx(1.0 / 3 + std::log(2.0)).epsilon(1e-3));

  Rng rng(1);
  std::vector<int> rl;
  for (int v = 0; v < 10; ++v) rl.push_back(static_cast<int>(rng() % 3));
  auto yr = one_hot(rl, 3);
  auto pr = random_uniform<double>({10, 3}, rng, 0.05, 0.95);
  CHECK(dice_ce_loss(yr, pr, cfg).item() ==
        Catch::Approx(oracle_dice_ce(yr, pr, cfg.epsilon)).epsilon(1e-12));

  CHECK_THROWS_AS(dice_ce_loss(yr, random_uniform<double>({10, 2}, rng)),
                  ShapeError);
  auto pneg = pr.clone();
  pneg.data()[0] = -0.1;
  CHECK_THROWS_AS(dice_ce_loss(yr, pneg), DomainError);
}

TEST_CASE("sobel_gradients: constant, ramp, single voxel vs loop oracle") {
  for (auto mode : {SobelAggregate::signed_mean, SobelAggregate::absolute_mean}) {
    LossConfig cfg;
    cfg.aggregate = mode;
    auto c = Tensor<double>::full({4, 4, 4}, 0.7);
    auto g = sobel_gradients(c, cfg);
    for (int a = 0; a < 3; ++a)
      CHECK(g[static_cast<size_t>(a)].item() == Catch::Approx(0.0).margin(1e-14));
  }

  // unit ramp along x: every valid H_x response is 32
  Tensor<double> ramp({5, 4, 4});
  for (int x = 0; x < 5; ++x)
    for (int i = 0; i < 16; ++i) ramp.data()[x * 16 + i] = x;
  LossConfig cfg;
  auto g = sobel_gradients(ramp, cfg);
  CHECK(g[0].item() == Catch::Approx(32.0).epsilon(1e-12));
  CHECK(g[1].item() == Catch::Approx(0.0).margin(1e-12));
  CHECK(g[2].item() == Catch::Approx(0.0).margin(1e-12));

  // single interior voxel: responses enumerate the kernel weights
  Tensor<double> spike({5, 5, 5});
  spike.data()[(2 * 5 + 2) * 5 + 2] = 1.0;
  auto kernels = sobel_kernels<double>();
  for (int a = 0; a < 3; ++a) {
    for (auto mode :
         {SobelAggregate::signed_mean, SobelAggregate::absolute_mean}) {
      LossConfig c2;
      c2.aggregate = mode;
      auto got = sobel_gradients(spike, c2)[static_cast<size_t>(a)].item();
      auto resp = oracle::conv3d(
          reshape(spike, {1, 5, 5, 5}), kernels[static_cast<size_t>(a)], 1, 0);
      double acc = 0;
      for (long long i = 0; i < resp.size(); ++i)
        acc += mode == SobelAggregate::absolute_mean
                   ? std::fabs(resp.data()[i])
                   : resp.data()[i];
      CHECK(got == Catch::Approx(acc / resp.size()).margin(1e-12));
    }
  }

  CHECK_THROWS_AS(sobel_gradients(Tensor<double>({2, 4, 4})), DomainError);
}

TEST_CASE("sobel_loss: lambda 0, constant, ramp class") {
  Rng rng(2);
  auto p = random_uniform<double>({2, 4, 4, 4}, rng, 0.0, 1.0);
  LossConfig cfg;
  cfg.lambda = 0;
  CHECK(sobel_loss(p, cfg).item() == 0.0);

  cfg.lambda = 0.7;
  CHECK(sobel_loss(Tensor<double>::full({2, 4, 4, 4}, 0.4), cfg).item() ==
        Catch::Approx(0.0).margin(1e-14));

  // class 0 a unit x-ramp, class 1 constant: only the ramp contributes,
  // lambda * sqrt(32^2) = 3.2
  Tensor<double> pr({2, 5, 4, 4});
  for (int x = 0; x < 5; ++x)
    for (int i = 0; i < 16; ++i) {
      pr.data()[x * 16 + i] = x;
      pr.data()[80 + x * 16 + i] = 0.3;
    }
  LossConfig c01;
  c01.lambda = 0.1;
  CHECK(sobel_loss(pr, c01).item() == Catch::Approx(3.2).epsilon(1e-12));
}

TEST_CASE("sobel_loss invariant under joint class permutation with mask") {
  Rng rng(3);
  auto p = random_uniform<double>({3, 4, 4, 4}, rng);
  auto swapped = concat<double>(
      {slice(p, 0, 2, 1), slice(p, 0, 1, 1), slice(p, 0, 0, 1)}, 0);
  LossConfig a, b;
  a.lambda = b.lambda = 1.0;
  a.class_mask = {0, 2};
  b.class_mask = {2, 0};  // permuted classes with permuted mask
  CHECK(sobel_loss(p, a).item() ==
        Catch::Approx(sobel_loss(swapped, b).item()).epsilon(1e-13));
}

TEST_CASE("smoothing incentive: blurred thin slab scores below hard slab") {
  // 1D profile extruded over y,z: hard width-3 slab vs triangular blur of
  // the same slab. Blurring a thin structure strictly lowers its peak, so
  // the absolute-mean response drops.
  const int N = 16;
  auto extrude = [&](const std::vector<double>& prof) {
    Tensor<double> t({1, N, 5, 5});
    for (int x = 0; x < N; ++x)
      for (int i = 0; i < 25; ++i)
        t.data()[x * 25 + i] = prof[static_cast<size_t>(x)];
    return t;
  };
  std::vector<double> hard(N, 0.0), blurred(N, 0.0);
  for (int x = 7; x <= 9; ++x) hard[static_cast<size_t>(x)] = 1.0;
  const double w[5] = {0.1, 0.2, 0.4, 0.2, 0.1};
  for (int x = 0; x < N; ++x)
    for (int t = -2; t <= 2; ++t) {
      int src = x + t;
      if (src >= 0 && src < N)
        blurred[static_cast<size_t>(x)] += w[t + 2] * hard[static_cast<size_t>(src)];
    }
  LossConfig cfg;
  cfg.lambda = 1.0;
  const double lh = sobel_loss(extrude(hard), cfg).item();
  const double lb = sobel_loss(extrude(blurred), cfg).item();
  CHECK(lb < lh);
  CHECK(lh > 0.0);
}

TEST_CASE("total_loss: lambda 0 bitwise equal to dice+CE; boundary term") {
  Rng rng(4);
  const int l = 2;
  Tensor<double> y({l, 4, 4, 4});
  for (int v = 0; v < 64; ++v) {
    const int cls = v % 2;
    y.data()[cls * 64 + v] = 1.0;
  }
  auto p = random_uniform<double>({l, 4, 4, 4}, rng, 0.05, 0.95);
  LossConfig c0;
  c0.lambda = 0;
  const double t0 = total_loss(y, p, c0).item();
  auto flatten = [&](const Tensor<double>& t) {
    return permute(reshape(t, {l, 64}), {1, 0});
  };
  CHECK(t0 == dice_ce_loss(flatten(y), flatten(p), c0).item());  // bitwise

  // perfect one-hot prediction of a compact region: dice+CE ~ 0, sobel > 0
  Tensor<double> yr({2, 6, 6, 6});
  for (int x = 0; x < 6; ++x)
    for (int i = 0; i < 36; ++i) {
      const bool fg = x >= 2 && x <= 3;
      yr.data()[(fg ? 1 : 0) * 216 + x * 36 + i] = 1.0;
    }
  LossConfig c1;
  c1.lambda = 0.1;
  const double base = total_loss(yr, yr, c0).item();
  const double with_sobel = total_loss(yr, yr, c1).item();
  CHECK(std::fabs(base) < 1e-3);
  CHECK(with_sobel - base > 0.0);
}

TEST_CASE("total_loss gradient vs finite differences") {
  Rng rng(5);
  Tensor<double> y({2, 6, 6, 6});
  for (int v = 0; v < 216; ++v) {
    const int cls = static_cast<int>(rng() % 2);
    y.data()[cls * 216 + v] = 1.0;
  }
  LossConfig cfg;
  cfg.lambda = 0.1;
  auto f = [&y, cfg](Tape<double>&, std::vector<Tensor<double>>& v) {
    return total_loss(y, v[0], cfg);
  };
  auto r = check_gradients(f, {random_uniform<double>({2, 6, 6, 6}, rng, 0.05, 0.95)},
                           1e-5, 200);
  INFO("total_loss max rel err " << r.max_rel_err);
  CHECK(r.max_rel_err < 1e-6);
}

TEST_CASE("literal printed dice/CE form stays available behind the flag") {
  Rng rng(6);
  auto y = one_hot({0, 1, 1, 0}, 2);
  auto p = random_uniform<double>({4, 2}, rng, 0.05, 0.95);
  LossConfig lit;
  lit.literal_dice_ce = true;
  // literal: 1 - sum_i(dice_i + sum_v Y log P); differs from the default
  double dice_sum = 0, ce_in = 0;
  for (int i = 0; i < 2; ++i) {
    double inter = 0, sy = 0, sp = 0;
    for (int v = 0; v < 4; ++v) {
      inter += y.data()[v * 2 + i] * p.data()[v * 2 + i];
      sy += y.data()[v * 2 + i] * y.data()[v * 2 + i];
      sp += p.data()[v * 2 + i] * p.data()[v * 2 + i];
    }
    dice_sum += 2 * inter / (sy + sp + lit.epsilon);
  }
  for (long long i = 0; i < 8; ++i)
    ce_in += y.data()[i] * std::log(p.data()[i] + lit.epsilon);
  CHECK(dice_ce_loss(y, p, lit).item() ==
        Catch::Approx(1.0 - dice_sum - ce_in).epsilon(1e-12));
  CHECK(dice_ce_loss(y, p, lit).item() != dice_ce_loss(y, p).item());
}
