#include <cmath>

#include "doctest.h"
#include "mrfn/accounting.hpp"
#include "mrfn/blocks.hpp"
#include "support.hpp"

using namespace mrfn;
using support::gradcheck;
using support::leaf64;
using support::with_input;

namespace {

const BlockKind kAllKinds[] = {BlockKind::RB, BlockKind::FAB, BlockKind::ParallelFE, BlockKind::MSFE_SA,
                               BlockKind::MSFAB};

}  // namespace

TEST_CASE("blocks preserve shape and match their closed-form parameter count") {
  std::mt19937_64 rng(11);
  for (BlockKind k : kAllKinds) {
    BlockConfig cfg{k, 16, 8, 2};
    auto b = make_block(cfg, DType::F64);
    b->init(rng);
    const Tensor x = support::randn64({2, 16, 9, 7}, rng);
    INFO(block_kind_name(k));
    CHECK(b->forward(x).shape() == x.shape());
    CHECK(b->parameter_count() == block_param_count(cfg));
  }
  CHECK_THROWS(BlockConfig{BlockKind::MSFAB, 12, 8, 2}.validate());
}

TEST_CASE("block kind names round-trip") {
  for (BlockKind k : kAllKinds) CHECK(parse_block_kind(block_kind_name(k)) == k);
  CHECK_THROWS_AS(parse_block_kind("MSFABX"), std::invalid_argument);
}

TEST_CASE("spatial attention: one-channel map, C/2 intermediate, dilated support") {
  std::mt19937_64 rng(12);
  SpatialAttention plain(16, 2, false, DType::F64), dilated(16, 2, true, DType::F64);
  plain.init(rng);
  dilated.init(rng);
  CHECK(plain.reduce.spec().out_ch == 8);
  CHECK(dilated.reduce.spec().out_ch == 8);
  const Tensor y = support::randn64({1, 16, 11, 11}, rng);
  const Tensor m = dilated.weight_map(y);
  CHECK(m.shape() == Shape{1, 1, 11, 11});
  for (double v : m.to_vector()) CHECK((v > 0.0 && v < 1.0));

  // Perturbing one input pixel changes the dilated map inside a 9x9 window only.
  Tensor y2 = y.clone();
  y2.data<double>()[5 * 11 + 5] += 10.0;
  const auto a = m.to_vector(), b = dilated.weight_map(y2).to_vector();
  for (int r = 0; r < 11; ++r) {
    for (int c = 0; c < 11; ++c) {
      if (std::abs(r - 5) > 4 || std::abs(c - 5) > 4) CHECK(a[r * 11 + c] == b[r * 11 + c]);
    }
  }
  const auto pa = plain.weight_map(y).to_vector(), pb = plain.weight_map(y2).to_vector();
  for (int i = 0; i < 121; ++i) {
    if (i != 5 * 11 + 5) CHECK(pa[i] == pb[i]);
  }
}

TEST_CASE("multi-stream extractor streams see 1x1, 3x3 and 5x5 neighbourhoods") {
  std::mt19937_64 rng(13);
  FeatureExtractor fe(ExtractorKind::MultiStream, 4, DType::F64);
  fe.init(rng);
  Tensor x = Tensor::zeros({1, 4, 11, 11}, DType::F64);
  for (int c = 0; c < 4; ++c) x.data<double>()[c * 121 + 5 * 11 + 5] = 1.0;
  const int expected_extent[3] = {1, 3, 5};
  for (int s = 0; s < 3; ++s) {
    const Tensor zero_response = fe.stream(s, Tensor::zeros({1, 4, 11, 11}, DType::F64));
    const auto base = zero_response.to_vector();
    const auto v = fe.stream(s, x).to_vector();
    int lo = 11, hi = -1;
    for (int r = 0; r < 11; ++r) {
      for (int c = 0; c < 11; ++c) {
        if (v[r * 11 + c] != base[r * 11 + c]) {
          lo = std::min(lo, r);
          hi = std::max(hi, r);
        }
      }
    }
    CHECK(hi - lo + 1 == expected_extent[s]);
  }
}

TEST_CASE("channel attention weights are per channel and in (0,1)") {
  std::mt19937_64 rng(14);
  ChannelAttention ca(16, 8, DType::F64);
  ca.init(rng);
  CHECK(ca.squeeze.spec().out_ch == 2);
  const Tensor w = ca.weights(support::randn64({2, 16, 5, 5}, rng));
  CHECK(w.shape() == Shape{2, 16, 1, 1});
  for (double v : w.to_vector()) CHECK((v > 0.0 && v < 1.0));
}

TEST_CASE("gradient check: blocks and attention") {
  std::mt19937_64 rng(15);
  for (const auto& c : support::block_gradchecks(rng)) {
    INFO(c.name << " rel err " << c.result.max_rel);
    CHECK(c.result.max_rel < 1e-4);
  }
}

TEST_CASE("attention matches the explicit-loop oracle") {
  std::mt19937_64 rng(16);
  const Shape shapes[] = {{1, 8, 16, 16}, {1, 8, 8, 16}, {1, 8, 16, 8}, {1, 8, 32, 16}, {1, 8, 8, 8}};
  for (const auto& shape : shapes) {
    NonLocalAttention att(8, 16, DType::F64);
    att.init(rng);
    FusePreceding fuse(8, 3, DType::F64);
    fuse.init(rng);
    const Tensor x = support::randn64(shape, rng);
    const Tensor srcs[3] = {support::randn64(shape, rng), support::randn64(shape, rng), x};
    const Tensor fused = fuse.forward(srcs);

    // Fusion oracle: 1x1 conv over the channel concatenation.
    support::Map cat{24, static_cast<int>(shape[2]), static_cast<int>(shape[3]), {}};
    for (const auto& s : srcs) {
      const auto v = s.to_vector();
      cat.v.insert(cat.v.end(), v.begin(), v.end());
    }
    CHECK(support::max_abs_diff(support::pointwise(cat, fuse.reduce), fused) < 1e-12);

    const auto xm = support::map_of(x);
    const auto fm = support::map_of(fused);
    SamplerSpec none{SamplerKind::None, {}, {}};
    CHECK(support::max_abs_diff(support::attention_oracle(att, xm, xm, none), att.forward(x)) < 1e-6);
    for (SamplerKind sk : {SamplerKind::None, SamplerKind::SPP, SamplerKind::SPDS}) {
      SamplerSpec spec{sk, {1, 3, 6, 8}, {2, 4}};
      const double err = support::max_abs_diff(support::attention_oracle(att, xm, fm, spec),
                                               att.forward(x, fused, spec));
      INFO(shape_str(shape) << " " << sampler_kind_name(sk) << " err " << err);
      CHECK(err < 1e-6);
    }
  }
}

TEST_CASE("cross attention with an identity fusion reduces to self attention bitwise") {
  std::mt19937_64 rng(17);
  NonLocalAttention att(8, 16, DType::F64);
  att.init(rng);
  FusePreceding fuse(8, 3, DType::F64);
  fuse.reduce.weight.fill(0.0);
  fuse.reduce.bias.fill(0.0);
  auto w = fuse.reduce.weight.data<double>();
  for (int c = 0; c < 8; ++c) w[static_cast<std::size_t>(c) * 24 + 16 + c] = 1.0;  // pick the last source
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor x = support::randn64({1, 8, 16, 16}, rng);
    const Tensor srcs[3] = {support::randn64({1, 8, 16, 16}, rng), support::randn64({1, 8, 16, 16}, rng), x};
    const Tensor cross = att.forward(x, fuse.forward(srcs), SamplerSpec{SamplerKind::None, {}, {}});
    CHECK(support::bitwise_equal(cross, att.forward(x)));
  }
}

TEST_CASE("sampler token counts, MAC ratio and validation") {
  SamplerSpec spds;
  CHECK(spds.token_count(64, 64) == 32 * 32 + 16 * 16);
  SamplerSpec spp{SamplerKind::SPP, {1, 3, 6, 8}, {2, 4}};
  CHECK(spp.token_count(64, 64) == 1 + 9 + 36 + 64);
  for (std::int64_t h : {16, 32, 64, 48}) {
    for (std::int64_t w : {16, 64, 80}) {
      const auto a = attention_dims(64, h, w, spds);
      const auto n = attention_dims(64, h, w, SamplerSpec{SamplerKind::None, {}, {}});
      CHECK(static_cast<double>(a.matmul_macs()) / static_cast<double>(n.matmul_macs()) == 0.3125);
    }
  }
  CHECK_THROWS_AS(spds.validate(6, 8), ShapeError);
  CHECK_THROWS_AS((SamplerSpec{SamplerKind::SPDS, {}, {4, 2}}.validate(16, 16)), ShapeError);
  CHECK_THROWS_AS(spp.validate(4, 4), ShapeError);
  std::mt19937_64 rng(18);
  const Tensor e = support::randn64({1, 4, 8, 8}, rng);
  CHECK(spds_sample(e, spds.spds_factors).shape() == Shape{1, 20, 4});
  CHECK(support::bitwise_equal(from_tokens(to_tokens(e), 8, 8), e));
}

TEST_CASE("preset parameter counts (frozen regression values)") {
  CHECK(count_params(NetworkConfig::preset("B")) == 1200340);
  CHECK(count_params(NetworkConfig::preset("L")) == 1265876);
  CHECK(count_params(NetworkConfig::preset("base")) == 822164);
  CHECK(count_params(NetworkConfig::preset("tiny")) == 73784);
  // L doubles every depth; only the fusion conv grows, by (8-4) * 128 * 128 weights.
  CHECK(count_params(NetworkConfig::preset("L")) - count_params(NetworkConfig::preset("B")) ==
        (8 - 4) * 128 * 128);
  CHECK_THROWS_AS(NetworkConfig::preset("XL"), std::invalid_argument);
}

TEST_CASE("built models agree with the closed-form count") {
  for (const char* name : {"B", "L", "base", "tiny"}) {
    NetworkConfig cfg = NetworkConfig::preset(name);
    for (Recursion r : {Recursion::Shared, Recursion::Independent}) {
      cfg.recursion = r;
      auto m = build_model(cfg, 1);
      INFO(name << " " << recursion_name(r));
      CHECK(m->parameter_count() == count_params(cfg));
    }
  }
}

TEST_CASE("independent recursion strictly adds parameters") {
  NetworkConfig cfg = NetworkConfig::preset("tiny");
  const auto shared = count_params(cfg);
  cfg.recursion = Recursion::Independent;
  CHECK(count_params(cfg) > shared);
  NetworkConfig flat = NetworkConfig::preset("tiny");
  flat.depths = {1, 1, 1, 1, 1};
  const auto a = count_params(flat);
  flat.recursion = Recursion::Independent;
  CHECK(count_params(flat) == a);
}

TEST_CASE("model handles sizes that are not multiples of 16") {
  std::mt19937_64 rng(19);
  auto m = build_model(NetworkConfig::preset("tiny"), 3);
  const Tensor x = Tensor::uniform({2, 3, 37, 45}, rng, 0.0, 1.0);
  const Tensor y = m->forward(x);
  CHECK(y.shape() == x.shape());
  const Tensor z = m->infer(x);
  for (double v : z.to_vector()) CHECK((v >= 0.0 && v <= 1.0));
  CHECK_THROWS_AS(m->forward(Tensor::zeros({1, 4, 16, 16})), ShapeError);
}

TEST_CASE("identical seeds build identical models") {
  auto a = build_model(NetworkConfig::preset("tiny"), 42);
  auto b = build_model(NetworkConfig::preset("tiny"), 42);
  auto c = build_model(NetworkConfig::preset("tiny"), 43);
  const auto pa = a->parameters(), pb = b->parameters(), pc = c->parameters();
  bool all_same = true, any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    all_same = all_same && support::bitwise_equal(pa[i], pb[i]);
    any_diff = any_diff || !support::bitwise_equal(pa[i], pc[i]);
  }
  CHECK(all_same);
  CHECK(any_diff);
}

TEST_CASE("gradient check: full tiny model") {
  std::mt19937_64 rng(20);
  for (AttentionKind att : {AttentionKind::CNLB, AttentionKind::NLB}) {
    const auto r = support::model_gradcheck(att, rng);
    INFO(attention_kind_name(att) << " rel err " << r.max_rel << " over " << r.coords << " coords");
    CHECK(r.max_rel < 1e-3);
  }
}
