#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "tsubf/gradcheck.hpp"
#include "tsubf/nn.hpp"

using namespace tsubf;

TEST_CASE("project: identity, constant, loop oracle") {
  Rng rng(1);
  LinearProjection<double> p(3, 3, rng);
  // identity weight, zero bias
  std::fill(p.weight.data(), p.weight.data() + 9, 0.0);
  for (int i = 0; i < 3; ++i) p.weight.data()[i * 3 + i] = 1.0;
  std::fill(p.bias.data(), p.bias.data() + 3, 0.0);
  auto x = random_uniform<double>({3, 2, 2, 2}, rng);
  CHECK(oracle::max_abs_diff(p.forward(x), x) == 0.0);

  // zero weight, bias = c
  LinearProjection<double> pz(3, 4, rng);
  std::fill(pz.weight.data(), pz.weight.data() + 12, 0.0);
  std::fill(pz.bias.data(), pz.bias.data() + 4, 2.5);
  auto y = pz.forward(x);
  for (long long i = 0; i < y.size(); ++i) CHECK(y.data()[i] == 2.5);

  // random weight vs per-voxel matvec oracle
  LinearProjection<double> pr(3, 4, rng);
  fill_uniform(pr.bias, rng, -1.0, 1.0);
  auto got = pr.forward(x);
  auto want = oracle::per_voxel_projection(x, pr.weight, &pr.bias);
  CHECK(oracle::max_abs_diff(got, want) < 1e-12);

  CHECK_THROWS_AS(pr.forward(random_uniform<double>({2, 2, 2, 2}, rng)),
                  ShapeError);
}

TEST_CASE("embed_patches shapes") {
  Rng rng(2);
  PatchEmbedding<float> pe(1, 4, rng);
  auto x = random_uniform<float>({1, 8, 8, 8}, rng);
  auto y = pe.forward(x);
  CHECK(y.shape() == Shape{4, 2, 2, 2});

  CHECK_THROWS_AS(pe.forward(Tensor<float>({1, 9, 8, 8})), ConfigError);

  // the full-scale case by shape arithmetic: 192x192x64 -> 48x48x16
  PatchEmbedding<float> pe32(1, 32, rng);
  Shape sp = pe32.conv_b.out_spatial(pe32.conv_a.out_spatial({192, 192, 64}));
  CHECK(sp == Shape{48, 48, 16});
  CHECK(pe32.conv_b.c_out() == 32);
}

TEST_CASE("downsample and upsample stages") {
  Rng rng(3);
  DownsampleStage<float> down(4, 8, rng);
  auto x = random_uniform<float>({4, 2, 2, 2}, rng);
  CHECK(down.forward(x).shape() == Shape{8, 1, 1, 1});
  CHECK(down.conv.out_spatial({48, 48, 16}) == Shape{24, 24, 8});
  CHECK_THROWS_AS(down.forward(Tensor<float>({4, 3, 4, 4})), ConfigError);

  UpsampleStage<float> up(8, 4, rng);
  auto y = up.forward(random_uniform<float>({8, 1, 1, 1}, rng));
  CHECK(y.shape() == Shape{4, 2, 2, 2});
  auto z = up.forward(random_uniform<float>({8, 24, 24, 8}, rng));
  CHECK(z.shape() == Shape{4, 48, 48, 16});
}

TEST_CASE("embed + down/up chain restores stage-0 spatial dims") {
  Rng rng(4);
  // dims divisible by 64: embedding /4, then halving stays exact through
  // the full chain
  PatchEmbedding<float> pe(1, 2, rng);
  std::vector<DownsampleStage<float>> downs;
  std::vector<UpsampleStage<float>> ups;
  int c = 2;
  for (int i = 0; i < 4; ++i) {
    downs.emplace_back(c, 2 * c, rng);
    c *= 2;
  }
  for (int i = 0; i < 4; ++i) {
    ups.emplace_back(c, c / 2, rng);
    c /= 2;
  }
  auto x = random_uniform<float>({1, 64, 64, 64}, rng);
  auto f = pe.forward(x);
  Shape stage0{f.dim(1), f.dim(2), f.dim(3)};
  CHECK(stage0 == Shape{16, 16, 16});
  for (auto& d : downs) f = d.forward(f);
  CHECK(f.shape() == Shape{32, 1, 1, 1});
  for (auto& u : ups) f = u.forward(f);
  CHECK(Shape{f.dim(1), f.dim(2), f.dim(3)} == stage0);
  CHECK(f.dim(0) == 2);
}

TEST_CASE("flops and parameter counts are analytic and additive") {
  Rng rng(5);
  // 1x1x1 conv, C_in=2, C_out=3 over 4^3 voxels -> 2*3*64 MACs
  ConvBlock<double> c1(2, 3, 1, 1, rng);
  CHECK(c1.flops({4, 4, 4}) == 2 * 3 * 64);

  // 3x3x3 conv same padding: C_in*C_out*27*vox
  ConvBlock<double> c3(4, 8, 3, 1, rng);
  CHECK(c3.flops({5, 5, 5}) == 4LL * 8 * 27 * 125);

  LinearProjection<double> p(6, 2, rng);
  CHECK(p.flops(10) == 120);

  PatchEmbedding<double> pe(1, 4, rng);
  CHECK(pe.flops({8, 8, 8}) ==
        pe.conv_a.flops({8, 8, 8}) + pe.conv_b.flops({4, 4, 4}));

  std::vector<ParamRef<double>> ps;
  c3.collect("c3", ps);
  CHECK(param_count(ps) == 4LL * 8 * 27 + 8 + 8 + 8);
}

TEST_CASE("conv block gradients match finite differences") {
  Rng rng(6);
  ConvBlock<double> blk(2, 3, 3, 1, rng);
  std::vector<ParamRef<double>> ps;
  blk.collect("blk", ps);
  std::vector<Tensor<double>> leaves;
  leaves.push_back(random_uniform<double>({2, 3, 3, 3}, rng));
  for (auto& p : ps) leaves.push_back(*p.tensor);
  auto w = random_uniform<double>({3, 3, 3, 3}, rng);
  auto f = [&blk, &ps, w](Tape<double>&, std::vector<Tensor<double>>& v) {
    ConvBlock<double> local = blk;
    local.kernel = v[1];
    local.bias = v[2];
    local.gamma = v[3];
    local.beta = v[4];
    return sum(mul(local.forward(v[0]), w));
  };
  auto r = check_gradients(f, leaves);
  CHECK(r.max_rel_err < 1e-6);
}
