#include <cmath>

#include "doctest.h"
#include "mrfn/config.hpp"
#include "support.hpp"

using namespace mrfn;

namespace {

std::string error_of(const std::string& text) {
  try {
    parse_run_config(text);
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("emitted config parses back to the same config") {
  CHECK(parse_run_config(emit_run_config(RunConfig{})) == RunConfig{});

  RunConfig c;
  c.model = NetworkConfig::preset("L");
  c.model.sampler.kind = SamplerKind::SPP;
  c.model.recursion = Recursion::Independent;
  c.model.global_residual = true;
  c.model.encoder_kind = BlockKind::FAB;
  c.train.lr_init = 1.0 / 3.0;
  c.train.lr_final = 1e-9;
  c.train.seed = 123456789012345ULL;
  c.train.rotate = false;
  c.train.adam.eps = 3e-7;
  c.loss = CRConfig::make(CRVariant::SIFCR, 0.25);
  c.haze.beta_min = 0.1;
  c.haze.beta_max = 0.3;
  c.haze.per_channel_A = true;
  c.data.manifest = "data/with \"quotes\" and \\ slash.jsonl";
  c.data.f32_sidecar = true;
  c.threads = 3;
  const std::string text = emit_run_config(c);
  CHECK(parse_run_config(text) == c);
  CHECK(emit_run_config(parse_run_config(text)) == text);

  for (const char* p : {"B", "L", "tiny", "base"}) {
    RunConfig r;
    r.model = NetworkConfig::preset(p);
    CHECK(parse_run_config(emit_run_config(r)) == r);
  }
}

TEST_CASE("doubles are emitted in shortest round-trip form") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (int i = 0; i < 200; ++i) {
    const double v = u(rng) * std::pow(10.0, static_cast<int>(rng() % 20) - 10);
    CHECK(std::stod(format_double(v)) == v);
  }
  CHECK(format_double(0.1) == "0.1");
  CHECK(format_double(2e-4) == "0.0002");
  CHECK(parse_toml("x = 1.0").values.at("x").type == TomlValue::Type::Float);
}

TEST_CASE("partial configs apply on top of a base") {
  const RunConfig c = parse_run_config(
      "# comment\n[model]\nchannels = 8 # trailing\ndepths = [1, 1, 2, 1, 1]\n\n[train]\nlr_init = 1e-3\n");
  CHECK(c.model.channels == 8);
  CHECK(c.model.depths == std::array<int, 5>{1, 1, 2, 1, 1});
  CHECK(c.train.lr_init == 1e-3);
  CHECK(c.train.batch_size == RunConfig{}.train.batch_size);

  RunConfig base;
  base.model = NetworkConfig::preset("tiny");
  const RunConfig d = parse_run_config("[loss]\ncr = \"none\"\n", base);
  CHECK(d.model == base.model);
  CHECK_FALSE(d.loss.enabled());
}

TEST_CASE("config errors name the line and key") {
  CHECK(error_of("[model]\nchanels = 8\n").find("line 2") != std::string::npos);
  CHECK(error_of("[model]\nchanels = 8\n").find("unknown key 'model.chanels'") != std::string::npos);
  CHECK(error_of("[model]\nchannels = \"wide\"\n").find("model.channels") != std::string::npos);
  CHECK(error_of("[train]\nrotate = 1\n").find("true or false") != std::string::npos);
  CHECK(error_of("[model]\ndepths = [1, 2]\n").find("5 entries") != std::string::npos);
  CHECK(error_of("[model\nchannels = 8\n").find(":1:") != std::string::npos);
  CHECK(error_of("[model]\nchannels\n").find("key = value") != std::string::npos);
  CHECK(error_of("[a]\nx = 1\nx = 2\n").find("duplicate") != std::string::npos);
  CHECK_FALSE(error_of("[train]\nlr_init = 1e-6\nlr_final = 1e-3\n").empty());
  CHECK_FALSE(error_of("[train]\ncrop_size = 40\n").empty());
  CHECK_FALSE(error_of("[model]\nattention = \"global\"\n").empty());
  CHECK_FALSE(error_of("[loss]\ncr = \"VGG\"\n").empty());
  CHECK_FALSE(error_of("[haze]\na_min = 0.2\n").empty());
  CHECK_THROWS_AS(load_run_config("/nonexistent/run.toml"), ConfigError);
}

TEST_CASE("config files load from disk") {
  const auto dir = support::scratch_dir("config");
  RunConfig c;
  c.model = NetworkConfig::preset("tiny");
  c.train.iterations = 17;
  const std::string text = emit_run_config(c);
  write_file(dir / "run.toml", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  CHECK(load_run_config(dir / "run.toml") == c);
}
