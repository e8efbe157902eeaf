#include <catch2/catch_amalgamated.hpp>

#include <cstring>
#include <filesystem>
#include <limits>
#include <sstream>

#include "tsubf/train.hpp"

using namespace tsubf;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.schedule = {4, 4, 4, 4};
  cfg.patch = {64, 64, 64};
  cfg.seed = 51;
  return cfg;
}

std::vector<VolumeSample> toy_set(int n, std::uint64_t seed0) {
  std::vector<VolumeSample> out;
  for (int i = 0; i < n; ++i) {
    SyntheticSpec spec;
    spec.dims = {64, 64, 64};
    spec.radii = {14, 12, 13};
    spec.noise_sigma = 30;
    out.push_back(normalize_hu(make_synthetic(spec, seed0 + static_cast<std::uint64_t>(i))));
  }
  return out;
}

}  // namespace

TEST_CASE("training: deterministic loss trajectory over 5 steps") {
  auto train_set = toy_set(3, 100);
  auto val_set = toy_set(1, 200);
  TrainConfig tc;
  tc.max_steps = 5;
  tc.val_interval = 5;
  tc.seed = 9;
  LossConfig lc;
  lc.lambda = 0.1;

  TsubfNet<float> net_a(tiny_config()), net_b(tiny_config());
  Trainer<float> ta(net_a, tc, lc), tb(net_b, tc, lc);
  auto rows_a = ta.run(train_set, val_set);
  auto rows_b = tb.run(train_set, val_set);
  REQUIRE(rows_a.size() == 5);
  REQUIRE(rows_b.size() == 5);
  for (size_t i = 0; i < 5; ++i) {
    CHECK(rows_a[i].step == static_cast<long long>(i + 1));
    CHECK(rows_a[i].total == rows_b[i].total);  // bitwise
    CHECK(rows_a[i].dice_ce == rows_b[i].dice_ce);
    CHECK(rows_a[i].sobel == rows_b[i].sobel);
    CHECK(rows_a[i].sobel >= 0.0);
  }
  auto pa = net_a.collect(), pb = net_b.collect();
  for (size_t i = 0; i < pa.size(); ++i)
    CHECK(std::memcmp(pa[i].tensor->data(), pb[i].tensor->data(),
                      sizeof(float) * pa[i].tensor->size()) == 0);
  CHECK(rows_a.back().val_dsc >= 0.0);
  CHECK(rows_a.back().val_dsc <= 1.0);
}

TEST_CASE("training: lambda 0 zeroes the sobel column bitwise") {
  auto train_set = toy_set(2, 300);
  TrainConfig tc;
  tc.max_steps = 3;
  tc.seed = 10;
  LossConfig lc;
  lc.lambda = 0;
  TsubfNet<float> net(tiny_config());
  Trainer<float> t(net, tc, lc);
  auto rows = t.run(train_set, {});
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) {
    CHECK(r.sobel == 0.0);
    CHECK(r.total == r.dice_ce);  // bitwise
  }

  std::ostringstream csv;
  write_train_csv(csv, rows);
  CHECK(csv.str().rfind("step,total,dice_ce,sobel,val_dsc", 0) == 0);
  CHECK(csv.str().find(",0,") != std::string::npos);
}

TEST_CASE("training: resume reproduces the uninterrupted trajectory") {
  auto train_set = toy_set(3, 400);
  auto val_set = toy_set(1, 500);
  LossConfig lc;
  lc.lambda = 0.1;
  const auto dir = (fs::temp_directory_path() / "tsubf_resume").string();
  fs::remove_all(dir);

  // uninterrupted: 6 steps
  TrainConfig tc6;
  tc6.max_steps = 6;
  tc6.val_interval = 3;
  tc6.seed = 11;
  TsubfNet<float> net_full(tiny_config());
  Trainer<float> t_full(net_full, tc6, lc);
  auto rows_full = t_full.run(train_set, val_set);

  // interrupted after 3 steps, then resumed to 6
  TrainConfig tc3 = tc6;
  tc3.max_steps = 3;
  TsubfNet<float> net_half(tiny_config());
  Trainer<float> t_half(net_half, tc3, lc);
  t_half.run(train_set, val_set, dir);
  CHECK(t_half.step_count() == 3);

  TsubfNet<float> net_res(tiny_config());
  Trainer<float> t_res(net_res, tc6, lc);
  t_res.load_state(dir);
  CHECK(t_res.step_count() == 3);
  auto rows_res = t_res.run(train_set, val_set);
  REQUIRE(rows_res.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(rows_res[i].step == rows_full[i + 3].step);  // numbering continues
    CHECK(rows_res[i].total == rows_full[i + 3].total);
    CHECK(rows_res[i].dice_ce == rows_full[i + 3].dice_ce);
  }
  auto pf = net_full.collect(), pr = net_res.collect();
  for (size_t i = 0; i < pf.size(); ++i)
    CHECK(std::memcmp(pf[i].tensor->data(), pr[i].tensor->data(),
                      sizeof(float) * pf[i].tensor->size()) == 0);
}

TEST_CASE("training: non-finite loss aborts with a diagnostic") {
  auto train_set = toy_set(1, 600);
  TrainConfig tc;
  tc.max_steps = 2;
  LossConfig lc;
  TsubfNet<float> net(tiny_config());
  auto params = net.collect();
  params[0].tensor->data()[0] = std::numeric_limits<float>::infinity();
  Trainer<float> t(net, tc, lc);
  CHECK_THROWS_WITH(t.run(train_set, {}),
                    Catch::Matchers::ContainsSubstring("non-finite"));
}

TEST_CASE("training: input validation") {
  TrainConfig tc;
  LossConfig lc;
  TsubfNet<float> net(tiny_config());
  Trainer<float> t(net, tc, lc);
  CHECK_THROWS_AS(t.run({}, {}), UsageError);

  // unnormalized sample rejected
  SyntheticSpec spec;
  spec.dims = {64, 64, 64};
  auto raw = make_synthetic(spec, 1);
  CHECK_THROWS_AS(t.run({raw}, {}), UsageError);

  // label-free sample rejected
  auto nolabel = normalize_hu(make_synthetic(spec, 2));
  nolabel.label.reset();
  CHECK_THROWS_AS(t.run({nolabel}, {}), UsageError);

  CHECK_THROWS_AS(validate_dsc(net, {}), UsageError);
}
