// SPDX-License-Identifier: Apache-2.0
#include <filesystem>
#include <fstream>

#include "plgdf/data.hpp"
#include "plgdf/errors.hpp"
#include "plgdf/rng.hpp"

#include <doctest.h>

using namespace plgdf;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("plgdf_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("clip_and_normalize maps the HU window to [0,1]") {
  auto vals = torch::tensor({-500.0f, 275.0f, 75.0f, -125.0f}).reshape({1, 1, 4});
  auto out = clip_and_normalize(make_image(vals, {2, 3, 4}), -125.0, 275.0);
  auto a = out.values.flatten();
  CHECK(a[0].item<float>() == doctest::Approx(0.0));   // clamp floor
  CHECK(a[1].item<float>() == doctest::Approx(1.0));   // clamp ceiling
  CHECK(a[2].item<float>() == doctest::Approx(0.5));   // (75+125)/400
  CHECK(a[3].item<float>() == doctest::Approx(0.0));
  CHECK(out.values.sizes() == vals.sizes());
  CHECK((out.spacing == std::array<double, 3>{2, 3, 4}));
}

TEST_CASE("clip_and_normalize is idempotent once in range") {
  auto vals = torch::rand({3, 4, 5});
  auto once = clip_and_normalize(make_image(vals), 0.0, 1.0);
  auto twice = clip_and_normalize(once, 0.0, 1.0);
  CHECK(torch::equal(once.values, twice.values));
}

TEST_CASE("clip_and_normalize rejects non-finite voxels naming the index") {
  auto vals = torch::zeros({2, 3, 4});
  vals[1][2][3] = std::numeric_limits<float>::quiet_NaN();
  try {
    clip_and_normalize(make_image(vals), 0.0, 1.0);
    FAIL("expected an exception");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("x=3") != std::string::npos);
    CHECK(msg.find("y=2") != std::string::npos);
    CHECK(msg.find("z=1") != std::string::npos);
  }
  CHECK_THROWS_AS(clip_and_normalize(make_image(torch::zeros({2, 2, 2})), 1.0, 1.0),
                  std::invalid_argument);
}

TEST_CASE("resample_isotropic at the source spacing is the identity") {
  auto vals = torch::rand({4, 5, 6});
  auto out = resample_isotropic(make_image(vals, {1, 1, 1}), 1.0);
  CHECK(torch::allclose(out.values, vals, 1e-6, 1e-7));
  CHECK((out.spacing == std::array<double, 3>{1, 1, 1}));
}

TEST_CASE("resample_isotropic keeps constants constant at any spacing") {
  auto vals = torch::full({5, 4, 3}, 0.7f);
  auto out = resample_isotropic(make_image(vals, {2.0, 1.5, 1.0}), 1.0);
  CHECK((out.dims_xyz() == std::array<std::int64_t, 3>{6, 6, 5}));
  CHECK((out.values - 0.7f).abs().max().item<float>() < 1e-6);
}

TEST_CASE("resample_isotropic inserts midpoints when upsampling a ramp 2x") {
  auto vals = torch::tensor({1.0f, 2.0f}).reshape({1, 1, 2});
  auto out = resample_isotropic(make_image(vals, {1, 1, 1}), 0.5);
  auto x = out.values.index({0, 0});
  REQUIRE(x.numel() == 4);
  CHECK(x[0].item<float>() == doctest::Approx(1.0));
  CHECK(x[1].item<float>() == doctest::Approx(1.5));  // inserted midpoint
  CHECK(x[2].item<float>() == doctest::Approx(2.0));
}

TEST_CASE("resample_isotropic uses nearest-neighbor for labels") {
  auto vals = torch::tensor({0L, 3L}).reshape({1, 1, 2});
  auto out = resample_isotropic(make_label(vals, 4, {1, 1, 1}), 0.5);
  for (std::int64_t i = 0; i < out.values.numel(); ++i) {
    const auto v = out.values.flatten()[i].item<std::int64_t>();
    CHECK((v == 0 || v == 3));
  }
}

TEST_CASE("resample_isotropic rejects dimensions that round to zero") {
  auto v = make_image(torch::rand({4, 4, 1}), {0.3, 1, 1});  // X dim 1, sx=0.3
  CHECK_THROWS_AS(resample_isotropic(v, 1.0), std::invalid_argument);
}

TEST_CASE("sample_patch returns the whole volume when shapes match") {
  auto vals = torch::rand({4, 5, 6});
  auto out = sample_patch(make_image(vals), {6, 5, 4}, 123);
  CHECK(torch::equal(out.values, vals));
}

TEST_CASE("sample_patch is deterministic under a fixed seed") {
  auto v = make_image(torch::rand({100, 100, 100}));
  auto a = sample_patch(v, {96, 96, 96}, 42);
  auto b = sample_patch(v, {96, 96, 96}, 42);
  CHECK(torch::equal(a.values, b.values));
  bool any_diff = false;
  for (int s = 0; s < 8; ++s)
    any_diff |= !torch::equal(sample_patch(v, {96, 96, 96}, s).values, a.values);
  CHECK(any_diff);
}

TEST_CASE("sample_patch pads undersized axes symmetrically with zeros") {
  auto v = make_image(torch::ones({96, 96, 90}));  // x dim 90
  auto out = sample_patch(v, {96, 96, 96}, 7);
  REQUIRE(out.values.sizes() == torch::IntArrayRef({96, 96, 96}));
  using torch::indexing::Slice;
  CHECK(out.values.index({Slice(), Slice(), Slice(0, 3)}).abs().sum().item<double>() == 0.0);
  CHECK(out.values.index({Slice(), Slice(), Slice(93, 96)}).abs().sum().item<double>() == 0.0);
  CHECK(out.values.index({Slice(), Slice(), Slice(3, 93)}).min().item<float>() == 1.0f);
}

TEST_CASE("phantom dataset: noiseless intensities recover the labels exactly") {
  auto dir = temp_dir("phantom_noiseless");
  PhantomOptions opts;
  opts.class_count = 3;
  opts.noise_sigma = 0.0;
  opts.volume_shape = {24, 24, 24};
  auto manifest = generate_phantom_dataset(dir, 3, opts, 99);
  REQUIRE(manifest.labeled_entries.size() == 3);
  for (const auto& e : manifest.labeled_entries) {
    auto img = load_volume(e.image);
    auto lab = load_volume(e.label);
    // threshold halfway between adjacent class means
    auto recovered = torch::zeros_like(lab.values);
    for (std::int64_t c = 1; c < 3; ++c) {
      const double thresh =
          0.5 * (phantom_class_mean(c - 1, 3) + phantom_class_mean(c, 3));
      recovered = torch::where(img.values > thresh, torch::full_like(recovered, c), recovered);
    }
    CHECK(torch::equal(recovered, lab.values));
    CHECK((lab.values > 0).sum().item<std::int64_t>() >= 1);
  }
}

TEST_CASE("phantom dataset is byte-deterministic under a fixed seed") {
  auto dir_a = temp_dir("phantom_det_a");
  auto dir_b = temp_dir("phantom_det_b");
  PhantomOptions opts;
  opts.volume_shape = {16, 16, 16};
  generate_phantom_dataset(dir_a, 2, opts, 5);
  generate_phantom_dataset(dir_b, 2, opts, 5);
  for (const char* name : {"img_000.raw", "img_001.raw", "lbl_000.raw", "lbl_001.raw"})
    CHECK(file_bytes(dir_a / name) == file_bytes(dir_b / name));
  generate_phantom_dataset(dir_b, 2, opts, 6);
  CHECK(file_bytes(dir_a / "img_000.raw") != file_bytes(dir_b / "img_000.raw"));
}

TEST_CASE("phantom dataset: every label has foreground, manifest loads back") {
  auto dir = temp_dir("phantom_count");
  PhantomOptions opts;
  opts.class_count = 2;
  opts.volume_shape = {24, 24, 24};
  auto manifest = generate_phantom_dataset(dir, 8, opts, 3);
  auto reloaded = load_manifest(dir / "manifest.txt");
  REQUIRE(reloaded.labeled_entries.size() == 8);
  CHECK(reloaded.class_count == 2);
  for (const auto& e : reloaded.labeled_entries) {
    auto lab = load_volume(e.label);
    CHECK((lab.values > 0).sum().item<std::int64_t>() >= 1);
  }
}

TEST_CASE("volume IO round-trips bit-exactly with the documented header fields") {
  auto dir = temp_dir("volume_io");
  auto img = make_image(torch::rand({3, 4, 5}), {1.5, 2.0, 2.5});
  save_volume(img, dir / "v.hdr");

  const std::string hdr = file_bytes(dir / "v.hdr");
  for (const char* field : {"dims:", "spacing_mm:", "dtype:", "role:", "class_count:"})
    CHECK(hdr.find(field) != std::string::npos);
  CHECK(hdr.find("dims: 5 4 3") != std::string::npos);  // x y z order

  auto back = load_volume(dir / "v.hdr");
  CHECK(torch::equal(back.values, img.values));
  CHECK(back.spacing == img.spacing);
  CHECK(back.role == VolumeRole::image);

  auto lab = make_label(torch::randint(0, 4, {3, 4, 5}), 4);
  save_volume(lab, dir / "l.hdr");
  auto lab2 = load_volume(dir / "l.hdr");
  CHECK(torch::equal(lab2.values, lab.values));
  CHECK(lab2.values.dtype() == torch::kLong);

  auto probs = torch::rand({2, 3, 4, 5});
  probs = probs / probs.sum(0, true);
  auto prob = make_probability(probs);
  save_volume(prob, dir / "p.hdr");
  auto prob2 = load_volume(dir / "p.hdr");
  CHECK(torch::allclose(prob2.values, probs));
}

TEST_CASE("volume invariants are enforced") {
  CHECK_THROWS(validate_volume(make_image(torch::rand({2, 2, 2}), {0, 1, 1})));
  CHECK_THROWS(validate_volume(make_label(torch::full({2, 2, 2}, 7L), 3)));
  auto bad_probs = torch::full({2, 2, 2, 2}, 0.9f);
  CHECK_THROWS(validate_volume(make_probability(bad_probs)));
  auto ok = torch::full({2, 2, 2, 2}, 0.5f);
  CHECK_NOTHROW(validate_volume(make_probability(ok)));
}

TEST_CASE("assemble_batch: alignment, determinism, with-replacement") {
  auto dir = temp_dir("assemble");
  PhantomOptions opts;
  opts.class_count = 2;
  opts.noise_sigma = 0.0;
  opts.volume_shape = {20, 20, 20};
  auto manifest = generate_phantom_dataset(dir, 2, opts, 11);
  auto [train, eval] = split_manifest(manifest, 1, 0);
  REQUIRE(train.labeled_entries.size() == 1);
  REQUIRE(train.unlabeled_entries.size() == 1);

  DatasetCache cache(train);
  BatchSpec spec;
  spec.patch_shape = {12, 12, 12};

  auto a = assemble_batch(cache, spec, 77);
  auto b = assemble_batch(cache, spec, 77);
  CHECK(torch::equal(a.labeled_images, b.labeled_images));
  CHECK(torch::equal(a.labels, b.labels));
  CHECK(torch::equal(a.unlabeled_images, b.unlabeled_images));
  CHECK(a.labeled_images.sizes() == torch::IntArrayRef({2, 1, 12, 12, 12}));
  CHECK(a.labels.sizes() == torch::IntArrayRef({2, 12, 12, 12}));

  // single labeled entry + counts (2,2): with-replacement repetition and
  // index-aligned label patches (noiseless: threshold recovers the label)
  for (std::int64_t i = 0; i < 2; ++i) {
    auto img = a.labeled_images[i][0];
    auto lab = a.labels[i];
    auto recovered = (img > 0.5).to(torch::kLong);
    CHECK(torch::equal(recovered, lab));
  }
}

TEST_CASE("assemble_batch rejects an empty unlabeled list when semi losses are on") {
  auto dir = temp_dir("assemble_empty");
  PhantomOptions opts;
  opts.volume_shape = {16, 16, 16};
  auto manifest = generate_phantom_dataset(dir, 1, opts, 2);
  DatasetCache cache(manifest);
  BatchSpec spec;
  spec.patch_shape = {8, 8, 8};
  spec.require_unlabeled = true;
  CHECK_THROWS_AS(assemble_batch(cache, spec, 1), ConfigError);
  spec.require_unlabeled = false;
  auto b = assemble_batch(cache, spec, 1);
  CHECK(b.unlabeled_images.size(0) == 0);
}

TEST_CASE("split_manifest partitions without path overlap") {
  auto dir = temp_dir("split");
  PhantomOptions opts;
  opts.volume_shape = {12, 12, 12};
  auto manifest = generate_phantom_dataset(dir, 6, opts, 4);
  auto [train, eval] = split_manifest(manifest, 2, 1);
  CHECK(train.labeled_entries.size() == 2);
  CHECK(train.unlabeled_entries.size() == 3);
  CHECK(eval.labeled_entries.size() == 1);
  CHECK_NOTHROW(train.validate());
  CHECK_THROWS_AS(split_manifest(manifest, 6, 1), ConfigError);
}
