#include <cmath>

#include "doctest.h"
#include "mrfn/data.hpp"
#include "mrfn/haze.hpp"
#include "support.hpp"

using namespace mrfn;

namespace {

Image random_clean(int h, int w, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(h, w);
  for (auto& v : img.data) v = u(rng);
  return img;
}

// I = J t + A (1 - t), written out per pixel.
Image scatter_oracle(const Image& J, const std::vector<double>& t, const std::array<double, 3>& A) {
  Image out(J.height, J.width);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < J.height; ++y) {
      for (int x = 0; x < J.width; ++x) {
        const double tt = t[static_cast<std::size_t>(y) * J.width + x];
        out.at(c, y, x) = static_cast<float>(J.at(c, y, x) * tt + A[c] * (1.0 - tt));
      }
    }
  }
  return out;
}

double max_diff(const Image& a, const Image& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::abs(double(a.data[i]) - b.data[i]));
  return m;
}

}  // namespace

TEST_CASE("scattering: hand value and agreement with a per-pixel oracle") {
  Image J(1, 1, 0.8f);
  const std::vector<double> half{0.5};
  const Image I = apply_scattering(J, half, {1.0, 1.0, 1.0});
  for (float v : I.data) CHECK(v == doctest::Approx(0.9).epsilon(1e-7));

  std::mt19937_64 rng(1);
  const Image clean = random_clean(9, 11, rng);
  const HazeParams p{{0.8, 0.9, 0.75}, 1.3, 42, 16.0};
  const auto depth = gen_depth_field(9, 11, p.depth_seed, p.depth_smoothness);
  const Image ref = scatter_oracle(clean, transmission(depth, p.beta), p.A);
  CHECK(max_diff(synthesize_hazy(clean, p), ref) < 1e-6);
}

TEST_CASE("scattering limits: t = 1 keeps J, t -> 0 gives A") {
  std::mt19937_64 rng(2);
  const Image J = random_clean(8, 8, rng);
  const std::array<double, 3> A{0.7, 0.85, 1.0};
  const std::vector<double> ones(J.plane(), 1.0), zeros(J.plane(), 0.0);
  CHECK(apply_scattering(J, ones, A) == J);
  const Image opaque = apply_scattering(J, zeros, A);
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < J.plane(); ++i) CHECK(opaque.data[c * J.plane() + i] == float(A[c]));
  }

  HazeParams faint{{0.9, 0.9, 0.9}, 1e-12, 3, 32.0};
  CHECK(max_diff(synthesize_hazy(J, faint), J) < 1e-9);
  HazeParams dense{{0.9, 0.9, 0.9}, 60.0, 3, 32.0};
  for (float v : synthesize_hazy(J, dense).data) CHECK(v == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("convexity and beta-monotonicity on 100 random fields") {
  std::mt19937_64 rng(3);
  HazeRanges ranges;
  ranges.per_channel_A = true;
  for (int trial = 0; trial < 100; ++trial) {
    const Image J = random_clean(12, 10, rng);
    HazeParams p = sample_haze_params(rng, ranges);
    p.depth_seed = rng();
    const Image I = synthesize_hazy(J, p);
    HazeParams thicker = p;
    thicker.beta = p.beta * 1.5;
    const Image I2 = synthesize_hazy(J, thicker);
    for (int c = 0; c < 3; ++c) {
      const float a = static_cast<float>(p.A[c]);
      for (int y = 0; y < J.height; ++y) {
        for (int x = 0; x < J.width; ++x) {
          const float j = J.at(c, y, x), i = I.at(c, y, x);
          const float slack = 1e-6f;
          REQUIRE(i >= std::min(j, a) - slack);
          REQUIRE(i <= std::max(j, a) + slack);
          REQUIRE(std::abs(I2.at(c, y, x) - a) <= std::abs(i - a) + slack);
        }
      }
    }
  }
}

TEST_CASE("depth field: determinism, range, gradient bound, constant limit") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const double smooth = 4.0 + static_cast<double>(seed % 7) * 8.0;
    const auto f = gen_depth_field(24, 31, seed, smooth);
    REQUIRE(f.measured_gradient() <= DepthField::max_gradient(smooth) + 1e-12);
    for (double v : f.values) {
      REQUIRE(v >= kDepthMin - 1e-12);
      REQUIRE(v <= kDepthMax + 1e-12);
    }
  }
  CHECK(gen_depth_field(16, 16, 5, 10.0).values == gen_depth_field(16, 16, 5, 10.0).values);
  CHECK(gen_depth_field(16, 16, 5, 10.0).values != gen_depth_field(16, 16, 6, 10.0).values);

  const auto flat = gen_depth_field(10, 10, 9, std::numeric_limits<double>::infinity());
  for (double v : flat.values) CHECK(v == flat.values.front());

  CHECK_THROWS_AS(gen_depth_field(4, 4, 0, 0.0), std::invalid_argument);
}

TEST_CASE("parameter validation") {
  Image bad(2, 2, 1.5f);
  CHECK_THROWS_AS(synthesize_hazy(bad, HazeParams{}), std::domain_error);
  CHECK_THROWS_AS(synthesize_hazy(Image(2, 2, 0.5f), HazeParams{{0.5, 1.0, 1.0}, 1.0, 0, 32.0}),
                  std::invalid_argument);
  CHECK_THROWS_AS(synthesize_hazy(Image(2, 2, 0.5f), HazeParams{{1.0, 1.0, 1.0}, -1.0, 0, 32.0}),
                  std::invalid_argument);
  HazeRanges r;
  r.beta_min = 2.0;
  CHECK_THROWS_AS(r.validate(), std::invalid_argument);

  std::mt19937_64 rng(0);
  HazeRanges shared;
  for (int i = 0; i < 50; ++i) {
    const auto p = sample_haze_params(rng, shared);
    CHECK(p.A[0] == p.A[1]);
    CHECK(p.A[1] == p.A[2]);
    CHECK(p.beta >= 0.6);
    CHECK(p.beta <= 1.8);
  }
}

TEST_CASE("make_dataset: counts, re-derivation, determinism, error paths") {
  const auto root = support::scratch_dir("dataset");
  write_procedural_set(root / "clean", 4, 24, 20, 11);

  DatasetOptions opt;
  opt.per_clean = 2;
  opt.seed = 7;
  const auto entries = make_dataset(root / "clean", root / "a", opt);
  REQUIRE(entries.size() == 8);
  CHECK(read_manifest(root / "a" / "manifest.jsonl").size() == 8);

  for (const auto& e : entries) {
    const Image clean = read_image(e.clean_path);
    const Image hazy = read_image(e.hazy_path);
    const Image again = synthesize_hazy(clean, e.params);
    CHECK(max_diff(hazy, again) <= 0.5 / 255.0 + 1e-6);
  }

  const auto again = make_dataset(root / "clean", root / "a", opt);
  CHECK(again.size() == entries.size());
  const auto first_bytes = read_file(root / "a" / "manifest.jsonl");
  const auto hazy_bytes = read_file(entries[3].hazy_path);
  make_dataset(root / "clean", root / "a", opt);
  CHECK(read_file(root / "a" / "manifest.jsonl") == first_bytes);
  CHECK(read_file(entries[3].hazy_path) == hazy_bytes);

  CHECK_THROWS_AS(make_dataset(root / "missing", root / "b", opt), std::invalid_argument);
  CHECK_FALSE(std::filesystem::exists(root / "b" / "manifest.jsonl"));

  std::filesystem::create_directories(root / "broken");
  write_file(root / "broken" / "x.ppm", std::vector<std::uint8_t>{'P', '6', '\n'});
  CHECK_THROWS_AS(make_dataset(root / "broken", root / "c", opt), std::invalid_argument);
  CHECK_FALSE(std::filesystem::exists(root / "c" / "manifest.jsonl"));
}

TEST_CASE("f32 sidecars reproduce the scattering model exactly") {
  const auto root = support::scratch_dir("dataset_f32");
  write_procedural_set(root / "clean", 2, 16, 16, 3);
  DatasetOptions opt;
  opt.f32_sidecar = true;
  const auto entries = make_dataset(root / "clean", root / "out", opt);
  for (const auto& e : entries) {
    REQUIRE_FALSE(e.hazy_f32_path.empty());
    CHECK(read_f32_image(e.hazy_f32_path) == synthesize_hazy(read_image(e.clean_path), e.params));
  }
  const auto pairs = load_pairs(entries, true);
  CHECK(pairs[0].hazy == read_f32_image(entries[0].hazy_f32_path));
}

TEST_CASE("manifest round trip with relative paths") {
  const auto root = support::scratch_dir("manifest");
  ManifestEntry e;
  e.id = "x";
  e.clean_path = "clean/x.png";
  e.hazy_path = "hazy/x.png";
  e.params = HazeParams{{0.7, 0.8, 0.9}, 1.25, 99, 12.5};
  write_manifest(root / "m.jsonl", {e});
  const auto back = read_manifest(root / "m.jsonl");
  REQUIRE(back.size() == 1);
  CHECK(back[0].id == "x");
  CHECK(back[0].clean_path == root / "clean/x.png");
  CHECK(back[0].params.A == e.params.A);
  CHECK(back[0].params.beta == e.params.beta);
  CHECK(back[0].params.depth_seed == 99);
  CHECK(back[0].params.depth_smoothness == 12.5);

  write_file(root / "bad.jsonl", std::vector<std::uint8_t>{'{', '\n'});
  CHECK_THROWS(read_manifest(root / "bad.jsonl"));
}

TEST_CASE("crops, symmetries and batch sampling") {
  std::mt19937_64 rng(8);
  const Image img = random_clean(6, 6, rng);
  CHECK(dihedral(img, 0) == img);
  CHECK(dihedral(dihedral(img, 4), 4) == img);
  Image r = img;
  for (int k = 0; k < 4; ++k) r = dihedral(r, 1);
  CHECK(r == img);
  CHECK(dihedral(img, 1).at(0, 0, 0) != dihedral(img, 3).at(0, 0, 0));

  const Image c = crop_image(img, 1, 2, 3, 4);
  CHECK(c.height == 3);
  CHECK(c.width == 4);
  CHECK(c.at(2, 1, 1) == img.at(2, 2, 3));
  CHECK_THROWS(crop_image(img, 4, 0, 3, 3));

  std::vector<ImagePair> pairs;
  for (int i = 0; i < 3; ++i) {
    Image clean = random_clean(20, 24, rng);
    pairs.push_back({"p" + std::to_string(i), clean, synthesize_hazy(clean, HazeParams{}), HazeParams{}});
  }
  std::mt19937_64 g1(5), g2(5);
  const Batch a = sample_batch(pairs, 4, 16, {true, true}, g1);
  const Batch b = sample_batch(pairs, 4, 16, {true, true}, g2);
  CHECK(a.hazy.shape() == Shape{4, 3, 16, 16});
  CHECK(support::bitwise_equal(a.hazy, b.hazy));
  CHECK(support::bitwise_equal(a.clean, b.clean));
}

TEST_CASE("procedural scenes are deterministic and in range") {
  const Image a = procedural_clean(32, 40, 4);
  CHECK(a == procedural_clean(32, 40, 4));
  CHECK_FALSE(a == procedural_clean(32, 40, 5));
  for (float v : a.data) {
    REQUIRE(v >= 0.0f);
    REQUIRE(v <= 1.0f);
  }
  CHECK(mix_seed(1, 2) == mix_seed(1, 2));
  CHECK(mix_seed(1, 2) != mix_seed(2, 1));
}
