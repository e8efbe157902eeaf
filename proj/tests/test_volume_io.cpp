#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "tsubf/metrics.hpp"
#include "tsubf/volume_io.hpp"

using namespace tsubf;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& leaf) {
  auto d = fs::temp_directory_path() / ("tsubf_io_" + leaf);
  fs::create_directories(d);
  return d;
}

VolumeSample random_sample(Rng& rng, Shape dims = {6, 5, 4},
                           bool with_label = true) {
  VolumeSample v;
  v.image = random_uniform<float>(dims, rng, -800.0f, 800.0f);
  if (with_label) {
    Tensor<int> l(dims);
    for (long long i = 0; i < l.size(); ++i)
      l.data()[i] = static_cast<int>(rng() % 2);
    v.label = std::move(l);
  }
  v.spacing = {0.5, 0.5, 2.0};
  v.source_id = "rand";
  return v;
}

}  // namespace

TEST_CASE("normalize_hu: mapping, clamping, double-normalize guard") {
  VolumeSample v;
  v.image = Tensor<float>({5, 1, 1},
                          {-1000.0f, 0.0f, 1000.0f, -2500.0f, 250.0f});
  auto n = normalize_hu(v);
  CHECK(n.image.data()[0] == 0.0f);
  CHECK(n.image.data()[1] == 0.5f);
  CHECK(n.image.data()[2] == 1.0f);
  CHECK(n.image.data()[3] == 0.0f);  // clamped
  CHECK(n.image.data()[4] == 0.625f);
  CHECK(n.units == Units::normalized);
  CHECK(v.image.data()[0] == -1000.0f);  // input untouched
  CHECK_THROWS_AS(normalize_hu(n), UsageError);
}

TEST_CASE("native container: bit-exact round trips and errors") {
  auto dir = temp_dir("native");
  Rng rng(21);

  auto f = random_uniform<float>({4, 3, 5}, rng, -1.0f, 1.0f);
  const std::string fp = (dir / "f32vol").string();
  write_native(fp, f, {0.3, 0.3, 1.0}, "hu");
  NativeHeader h;
  auto fr = read_native<float>(fp, &h);
  REQUIRE(fr.shape() == f.shape());
  CHECK(std::memcmp(fr.data(), f.data(), sizeof(float) * f.size()) == 0);
  CHECK(h.dtype == "f32");
  CHECK(h.spacing == std::array<double, 3>{0.3, 0.3, 1.0});
  CHECK(h.units == "hu");

  Tensor<std::int16_t> s({2, 2, 3});
  for (long long i = 0; i < s.size(); ++i)
    s.data()[i] = static_cast<std::int16_t>(rng() % 4096 - 1024);
  const std::string sp = (dir / "i16vol").string();
  write_native(sp, s, {1, 1, 1}, "label");
  auto sr = read_native<std::int16_t>(sp);
  CHECK(std::memcmp(sr.data(), s.data(), 2 * s.size()) == 0);

  CHECK_THROWS_AS(read_native<float>(sp), IoError);  // dtype mismatch
  CHECK_THROWS_AS(read_native<float>((dir / "nope").string()), IoError);

  // truncated payload
  fs::resize_file(fp + ".raw", 10);
  CHECK_THROWS_AS(read_native<float>(fp), IoError);
}

TEST_CASE("sample and manifest round trips") {
  auto dir = temp_dir("sample");
  Rng rng(22);
  auto v = random_sample(rng);
  const std::string prefix = (dir / "case0").string();
  write_sample(prefix, v);
  auto r = read_sample(prefix);
  CHECK(std::memcmp(r.image.data(), v.image.data(),
                    sizeof(float) * v.image.size()) == 0);
  REQUIRE(r.label.has_value());
  CHECK(r.label->vec() == v.label->vec());
  CHECK(r.spacing == v.spacing);
  CHECK(r.units == Units::hounsfield);

  auto nolbl = random_sample(rng, {3, 3, 3}, false);
  const std::string p2 = (dir / "case1").string();
  write_sample(p2, nolbl);
  CHECK_FALSE(read_sample(p2).label.has_value());

  const std::string mpath = (dir / "manifest.txt").string();
  std::vector<ManifestEntry> entries = {
      {"case0", "train"}, {"case1", "val"}, {"case2", "test"}};
  write_manifest(mpath, entries);
  auto back = read_manifest(mpath);
  REQUIRE(back.size() == 3);
  for (size_t i = 0; i < 3; ++i) {
    CHECK(back[i].name == entries[i].name);
    CHECK(back[i].split == entries[i].split);
  }
  std::ofstream bad(mpath);
  bad << "case0 banana\n";
  bad.close();
  CHECK_THROWS_AS(read_manifest(mpath), IoError);
}

TEST_CASE("extract_patch: identity, padding, bounds") {
  Rng rng(23);
  auto v = random_sample(rng, {8, 8, 8});
  auto ident = extract_patch(v, center_origin(v, {8, 8, 8}), {8, 8, 8});
  CHECK(ident.image.vec() == v.image.vec());
  CHECK(ident.label->vec() == v.label->vec());

  // smaller volume: padded with zeros before the crop
  auto small = random_sample(rng, {5, 5, 5});
  auto padded = extract_patch(small, {0, 0, 0}, {8, 8, 8});
  REQUIRE(padded.image.shape() == Shape{8, 8, 8});
  CHECK(padded.image.data()[(0 * 8 + 0) * 8 + 7] == 0.0f);
  CHECK(padded.image.data()[(7 * 8 + 7) * 8 + 7] == 0.0f);
  CHECK(padded.label->data()[(7 * 8 + 0) * 8 + 0] == 0);
  CHECK(padded.image.data()[(1 * 8 + 2) * 8 + 3] ==
        small.image.data()[(1 * 5 + 2) * 5 + 3]);

  CHECK_THROWS_AS(extract_patch(v, {1, 0, 0}, {8, 8, 8}), UsageError);
  CHECK_THROWS_AS(extract_patch(v, {-1, 0, 0}, {4, 4, 4}), UsageError);

  // random-foreground origins stay in range and are seed-deterministic
  Rng ra(9), rb(9);
  for (int i = 0; i < 20; ++i) {
    auto oa = random_foreground_origin(v, {4, 4, 4}, ra);
    auto ob = random_foreground_origin(v, {4, 4, 4}, rb);
    CHECK(oa == ob);
    for (int a = 0; a < 3; ++a) {
      CHECK(oa[a] >= 0);
      CHECK(oa[a] + 4 <= 8);
    }
  }
}

TEST_CASE("grid tiling: half-stride offsets and full coverage") {
  Rng rng(24);
  auto v = random_sample(rng, {256, 192, 64}, false);
  auto origins = grid_origins(v, {192, 192, 64});
  REQUIRE(origins.size() == 3);  // three offsets along the first axis
  CHECK(origins[0] == Voxel3{0, 0, 0});
  CHECK(origins[1] == Voxel3{96, 0, 0});
  CHECK(origins[2] == Voxel3{192, 0, 0});

  auto exact = random_sample(rng, {64, 64, 64}, false);
  CHECK(grid_origins(exact, {64, 64, 64}).size() == 1);

  auto odd = random_sample(rng, {10, 6, 6}, false);
  auto og = grid_origins(odd, {4, 4, 4});
  std::vector<int> covered(10 * 6 * 6, 0);
  for (const auto& o : og)
    for (int x = o[0]; x < o[0] + 4; ++x)
      for (int y = o[1]; y < o[1] + 4; ++y)
        for (int z = o[2]; z < o[2] + 4; ++z)
          if (x < 10 && y < 6 && z < 6) covered[(x * 6 + y) * 6 + z]++;
  CHECK(*std::min_element(covered.begin(), covered.end()) >= 1);
}

TEST_CASE("nifti reader: fixtures from the independent packer") {
  auto dir = temp_dir("nifti");
  const std::string cmd = std::string("python3 ") + TSUBF_TEST_DIR +
                          "/make_nifti_fixture.py " + dir.string();
  REQUIRE(std::system(cmd.c_str()) == 0);

  auto ramp = read_nifti1((dir / "ramp.nii").string());
  REQUIRE(ramp.image.shape() == Shape{4, 4, 4});
  for (long long i = 0; i < 64; ++i)
    CHECK(ramp.image.data()[i] == static_cast<float>(i));
  // file pixdim (x,y,z) = (1.5, 0.5, 2.0); axes come back reversed
  CHECK(ramp.spacing == std::array<double, 3>{2.0, 0.5, 1.5});
  CHECK(ramp.units == Units::hounsfield);

  auto scaled = read_nifti1((dir / "scaled.nii").string());
  for (long long i = 0; i < 64; ++i)
    CHECK(scaled.image.data()[i] == 2.0f * static_cast<float>(i) - 1.0f);

  CHECK_THROWS_WITH(read_nifti1((dir / "detached.nii").string()),
                    Catch::Matchers::ContainsSubstring("ni1"));
  CHECK_THROWS_WITH(read_nifti1((dir / "badmagic.nii").string()),
                    Catch::Matchers::ContainsSubstring("magic"));
  CHECK_THROWS_WITH(read_nifti1((dir / "baddtype.nii").string()),
                    Catch::Matchers::ContainsSubstring("datatype"));
  CHECK_THROWS_WITH(read_nifti1((dir / "truncated.nii").string()),
                    Catch::Matchers::ContainsSubstring("truncated"));
  CHECK_THROWS_AS(read_nifti1((dir / "missing.nii").string()), IoError);
}

TEST_CASE("make_synthetic: determinism, analytic labels, blur effect") {
  SyntheticSpec spec;
  spec.dims = {32, 32, 32};
  spec.radii = {8, 8, 8};
  spec.noise_sigma = 20.0;
  auto a = make_synthetic(spec, 5);
  auto b = make_synthetic(spec, 5);
  CHECK(std::memcmp(a.image.data(), b.image.data(),
                    sizeof(float) * a.image.size()) == 0);
  CHECK(a.label->vec() == b.label->vec());
  auto c = make_synthetic(spec, 6);
  CHECK(std::memcmp(a.image.data(), c.image.data(),
                    sizeof(float) * a.image.size()) != 0);

  // label equals the analytic inside-test
  long long count = 0, match = 0;
  for (int x = 0; x < 32; ++x)
    for (int y = 0; y < 32; ++y)
      for (int z = 0; z < 32; ++z) {
        const double cx = 15.5;
        const double q = (std::pow((x - cx) / 8, 2) +
                          std::pow((y - cx) / 8, 2) +
                          std::pow((z - cx) / 8, 2));
        const bool inside = q <= 1.0;
        count += inside;
        match += (a.label->data()[(x * 32 + y) * 32 + z] == 1) == inside;
      }
  CHECK(match == 32LL * 32 * 32);
  CHECK(count > 0);

  SyntheticSpec bad = spec;
  bad.radii = {0, 8, 8};
  CHECK_THROWS_AS(make_synthetic(bad, 1), UsageError);

  // boundary blur smooths the intensity image
  SyntheticSpec sharp = spec, soft = spec;
  sharp.noise_sigma = soft.noise_sigma = 0;
  soft.blur_sigma = 1.5;
  auto to_double = [](const Tensor<float>& img) {
    Tensor<double> t({1, img.dim(0), img.dim(1), img.dim(2)});
    for (long long i = 0; i < img.size(); ++i)
      t.data()[i] = img.data()[i];
    return t;
  };
  CHECK(smoothness_score(to_double(make_synthetic(soft, 1).image)) <
        smoothness_score(to_double(make_synthetic(sharp, 1).image)));
}

TEST_CASE("epoch_order: deterministic permutation") {
  auto a = epoch_order(40, 99);
  auto b = epoch_order(40, 99);
  CHECK(a == b);
  CHECK(epoch_order(40, 100) != a);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (size_t i = 0; i < 40; ++i) CHECK(sorted[i] == i);
}
