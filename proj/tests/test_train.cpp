#include <cmath>

#include "doctest.h"
#include "mrfn/checkpoint.hpp"
#include "mrfn/metrics.hpp"
#include "mrfn/parallel.hpp"
#include "mrfn/train.hpp"
#include "support.hpp"

using namespace mrfn;

namespace {

std::vector<ImagePair> make_pairs(int n, int size, std::uint64_t seed) {
  std::vector<ImagePair> pairs;
  for (int i = 0; i < n; ++i) {
    ImagePair p;
    p.id = "p" + std::to_string(i);
    p.clean = procedural_clean(size, size, mix_seed(seed, i));
    p.params.beta = 0.8;
    p.params.depth_seed = mix_seed(seed, 100 + i);
    p.hazy = synthesize_hazy(p.clean, p.params);
    pairs.push_back(std::move(p));
  }
  return pairs;
}

TrainConfig small_run() {
  TrainConfig t;
  t.iterations = 6;
  t.batch_size = 2;
  t.crop_size = 16;
  t.lr_init = 1e-3;
  t.lr_final = 1e-5;
  t.seed = 5;
  t.checkpoint_every = 2;
  t.log_every = 1;
  return t;
}

bool same_parameters(Module& a, Module& b) {
  const auto pa = a.named_parameters(), pb = b.named_parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].first != pb[i].first || !support::bitwise_equal(pa[i].second, pb[i].second)) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("resuming from a checkpoint reproduces an uninterrupted run bitwise") {
  set_num_threads(1);
  const auto dir = support::scratch_dir("resume");
  const auto pairs = make_pairs(3, 24, 1);
  const auto cfg = NetworkConfig::preset("tiny");
  const TrainConfig t = small_run();
  const CRConfig none = CRConfig::make(CRVariant::None);

  auto full = build_model(cfg, 9);
  TrainHooks h_full;
  h_full.checkpoint = dir / "full.ckpt";
  const auto s_full = train_model(*full, pairs, t, none, nullptr, h_full);
  CHECK(s_full.start_step == 0);
  CHECK(s_full.end_step == 6);

  auto part = build_model(cfg, 9);
  TrainHooks h_part;
  h_part.checkpoint = dir / "part.ckpt";
  h_part.stop_at = 3;
  const auto s1 = train_model(*part, pairs, t, none, nullptr, h_part);
  CHECK(s1.end_step == 3);
  CHECK_FALSE(same_parameters(*full, *part));

  auto resumed = build_model(cfg, 77);
  h_part.stop_at = -1;
  h_part.resume = true;
  const auto s2 = train_model(*resumed, pairs, t, none, nullptr, h_part);
  CHECK(s2.start_step == 3);
  CHECK(s2.end_step == 6);
  CHECK(same_parameters(*full, *resumed));

  REQUIRE(s_full.log.size() >= 6);
  for (const auto& l : s2.log) {
    for (const auto& f : s_full.log) {
      if (f.step == l.step) CHECK(f.loss == l.loss);
    }
  }
  CHECK(read_file(dir / "full.ckpt") == read_file(dir / "part.ckpt"));
}

TEST_CASE("training logs the schedule and reduces the loss") {
  set_num_threads(1);
  const auto pairs = make_pairs(2, 32, 2);
  auto model = build_model(NetworkConfig::preset("tiny"), 3);
  TrainConfig t = small_run();
  t.iterations = 30;
  t.checkpoint_every = 0;
  t.log_every = 10;
  t.rotate = false;
  t.flip = false;
  std::vector<StepLog> seen;
  TrainHooks hooks;
  hooks.on_log = [&](const StepLog& l) { seen.push_back(l); };
  const auto s = train_model(*model, pairs, t, CRConfig::make(CRVariant::None), nullptr, hooks);
  REQUIRE(seen.size() == s.log.size());
  REQUIRE(seen.size() >= 3);
  CHECK(seen.front().lr == doctest::Approx(cosine_lr(seen.front().step - 1, 30, 1e-3, 1e-5)));
  for (const auto& l : seen) {
    CHECK(std::isfinite(l.loss));
    CHECK(l.cr == 0.0);
    CHECK(l.loss == l.l1);
  }
  CHECK(seen.back().loss < seen.front().loss);
}

TEST_CASE("non-finite loss aborts naming the step and term") {
  auto pairs = make_pairs(2, 16, 3);
  for (auto& p : pairs) p.hazy.data[5] = std::numeric_limits<float>::quiet_NaN();
  auto model = build_model(NetworkConfig::preset("tiny"), 1);
  TrainConfig t = small_run();
  t.rotate = false;
  t.flip = false;
  t.checkpoint_every = 0;
  try {
    train_model(*model, pairs, t, CRConfig::make(CRVariant::None), nullptr);
    FAIL("expected NonFiniteLoss");
  } catch (const NonFiniteLoss& e) {
    CHECK(e.step() == 1);
    CHECK(e.term() == "l1");
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("contrastive loss requires an extractor") {
  const auto pairs = make_pairs(2, 16, 4);
  auto model = build_model(NetworkConfig::preset("tiny"), 1);
  CHECK_THROWS(train_model(*model, pairs, small_run(), CRConfig::make(CRVariant::DFCR), nullptr));
}

TEST_CASE("evaluation: identity model gives the infinite sentinel, runs are deterministic") {
  auto pairs = make_pairs(2, 20, 5);
  for (auto& p : pairs) p.hazy = p.clean;
  NetworkConfig cfg = NetworkConfig::preset("tiny");
  cfg.global_residual = true;
  auto model = build_model(cfg, 1);
  for (auto& p : model->parameters()) std::fill(p.data<float>().begin(), p.data<float>().end(), 0.0f);
  const auto e = evaluate(*model, pairs);
  REQUIRE(e.images.size() == 2);
  CHECK(std::isinf(e.mean_psnr));
  CHECK(e.mean_ssim == doctest::Approx(1.0).epsilon(1e-9));

  const auto hazy = make_pairs(3, 20, 6);
  auto random = build_model(NetworkConfig::preset("tiny"), 2);
  const auto a = evaluate(*random, hazy), b = evaluate(*random, hazy);
  CHECK(std::isfinite(a.mean_psnr));
  CHECK(a.mean_psnr > 3.0);
  CHECK(a.mean_psnr == b.mean_psnr);
  CHECK(a.mean_ssim == b.mean_ssim);
  double sum = 0.0;
  for (const auto& s : a.images) sum += s.psnr;
  CHECK(a.mean_psnr == doctest::Approx(sum / 3.0));
  CHECK(a.images[1].psnr ==
        doctest::Approx(psnr(tensor_to_image(random->infer(image_to_tensor(hazy[1].hazy))), hazy[1].clean)));
}
