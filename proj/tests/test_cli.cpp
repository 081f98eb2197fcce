#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "mrfn/cli.hpp"
#include "mrfn/config.hpp"
#include "support.hpp"

using namespace mrfn;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run_cli(std::vector<std::string> args) {
  args.insert(args.begin(), "mrfn");
  std::ostringstream out, err;
  Result r;
  r.code = cli::run(args, out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::vector<json> records(const fs::path& dir) {
  std::vector<json> out;
  std::ifstream is(dir / "records.jsonl");
  std::string line;
  while (std::getline(is, line)) out.push_back(json::parse(line));
  return out;
}

std::size_t line_count(const fs::path& p) {
  std::ifstream is(p);
  std::size_t n = 0;
  std::string line;
  while (std::getline(is, line)) ++n;
  return n;
}

// Small, fast run settings for end-to-end command tests.
fs::path quick_config(const fs::path& dir) {
  const fs::path p = dir / "quick.toml";
  std::ofstream(p) << "[model]\nchannels = 8\ndepths = [1, 1, 2, 1, 1]\n"
                   << "[train]\niterations = 4\nbatch_size = 2\ncrop_size = 16\n"
                   << "checkpoint_every = 2\nlog_every = 2\n"
                   << "[haze]\nbeta_min = 0.1\nbeta_max = 0.3\n";
  return p;
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
  CHECK(run_cli({}).code == cli::kUsageError);
  CHECK(run_cli({"frobnicate"}).code == cli::kUsageError);
  CHECK(run_cli({"count", "--preset", "XL"}).code == cli::kUsageError);
  CHECK(run_cli({"count", "--convention", "flops"}).code == cli::kUsageError);
  CHECK(run_cli({"--help"}).code == cli::kOk);

  const auto dir = support::scratch_dir("cli_usage");
  std::ofstream(dir / "bad.toml") << "[model]\nchanels = 8\n";
  const auto r = run_cli({"count", "--config", (dir / "bad.toml").string()});
  CHECK(r.code == cli::kUsageError);
  CHECK(r.err.find("chanels") != std::string::npos);
  CHECK(run_cli({"count", "--config", (dir / "absent.toml").string()}).code == cli::kUsageError);
}

TEST_CASE("synth: counts, missing input, byte-identical reruns") {
  const auto dir = support::scratch_dir("cli_synth");
  REQUIRE(run_cli({"synth", "--procedural", "3", "--size", "32", "--out", (dir / "clean").string()}).code == 0);

  const auto a = run_cli({"synth", "--clean", (dir / "clean" / "clean").string(), "--per-clean", "2", "--seed",
                          "7", "--out", (dir / "a").string()});
  REQUIRE(a.code == 0);
  CHECK(line_count(dir / "a" / "manifest.jsonl") == 6);
  const auto first = read_file(dir / "a" / "manifest.jsonl");
  const auto hazy = read_file(dir / "a" / "hazy" / "clean_0001_h1.png");
  REQUIRE(run_cli({"synth", "--clean", (dir / "clean" / "clean").string(), "--per-clean", "2", "--seed", "7",
                   "--out", (dir / "a").string()})
              .code == 0);
  CHECK(read_file(dir / "a" / "manifest.jsonl") == first);
  CHECK(read_file(dir / "a" / "hazy" / "clean_0001_h1.png") == hazy);

  const auto miss = run_cli({"synth", "--clean", (dir / "nowhere").string(), "--out", (dir / "b").string()});
  CHECK(miss.code == cli::kUsageError);
  CHECK_FALSE(miss.err.empty());
  CHECK_FALSE(fs::exists(dir / "b" / "manifest.jsonl"));

  const auto recs = records(dir / "a");
  REQUIRE(recs.size() == 2);
  CHECK(recs[0]["command"] == "synth");
  CHECK(recs[0]["config_sha1"] == recs[1]["config_sha1"]);
  CHECK(recs[0]["config_sha1"] == cli::sha1_hex(recs[0]["config"].get<std::string>()));
}

TEST_CASE("emit-config round trips the effective configuration") {
  const auto dir = support::scratch_dir("cli_emit");
  const auto r = run_cli({"train", "--preset", "tiny", "--seed", "42", "--threads", "2", "--emit-config"});
  REQUIRE(r.code == 0);
  const RunConfig cfg = parse_run_config(r.out);
  CHECK(cfg.model == NetworkConfig::preset("tiny"));
  CHECK(cfg.train.seed == 42);
  CHECK(cfg.threads == 2);
  std::ofstream(dir / "e.toml") << r.out;
  const auto again = run_cli({"train", "--config", (dir / "e.toml").string(), "--emit-config"});
  CHECK(again.out == r.out);
}

TEST_CASE("sha1 matches known digests") {
  CHECK(cli::sha1_hex("") == "da39a3ee5e6b4b0d3255bfef95601890afd80709");
  CHECK(cli::sha1_hex("abc") == "a9993e364706816aba3e25717850c26c9cd0d89d");
  CHECK(cli::source_hash().size() == 40);
}

TEST_CASE("train, resume and eval end to end") {
  const auto dir = support::scratch_dir("cli_train");
  const auto cfg = quick_config(dir).string();
  REQUIRE(run_cli({"synth", "--procedural", "3", "--size", "32", "--config", cfg, "--out", dir.string()}).code ==
          0);
  const auto manifest = (dir / "manifest.jsonl").string();

  const auto missing = run_cli({"train", "--config", cfg, "--manifest", manifest, "--out", (dir / "t").string()});
  CHECK(missing.code == cli::kMissingProxy);
  CHECK(missing.err.find("proxy") != std::string::npos);

  std::ofstream(dir / "quick_nocr.toml") << std::ifstream(cfg).rdbuf() << "[loss]\ncr = \"none\"\n";
  const std::vector<std::string> nocr{"--config", (dir / "quick_nocr.toml").string(), "--manifest", manifest};
  auto train = [&](std::vector<std::string> extra, const fs::path& out) {
    std::vector<std::string> v{"train"};
    v.insert(v.end(), nocr.begin(), nocr.end());
    v.insert(v.end(), extra.begin(), extra.end());
    v.push_back("--out");
    v.push_back(out.string());
    return run_cli(v);
  };

  const auto full = train({"--eval"}, dir / "full");
  REQUIRE(full.code == 0);
  CHECK(full.out.find("training-set PSNR") != std::string::npos);
  REQUIRE(train({"--stop-at", "2"}, dir / "part").code == 0);
  REQUIRE(train({"--resume"}, dir / "part").code == 0);
  CHECK(read_file(dir / "full" / "model.ckpt") == read_file(dir / "part" / "model.ckpt"));

  const auto recs = records(dir / "part");
  REQUIRE(recs.size() == 2);
  CHECK(recs[1]["start_step"] == 2);
  CHECK(recs[1]["end_step"] == 4);
  CHECK(recs[1]["seed"] == 0);
  CHECK(recs[1]["threads"] == 1);
  CHECK(recs[1].contains("run_hash"));
  CHECK(recs[1].contains("train_loss"));

  const auto ckpt = (dir / "full" / "model.ckpt").string();
  const auto e1 = run_cli({"eval", "--checkpoint", ckpt, "--manifest", manifest, "--out", (dir / "ev").string()});
  const auto e2 = run_cli({"eval", "--checkpoint", ckpt, "--manifest", manifest, "--out", (dir / "ev").string()});
  REQUIRE(e1.code == 0);
  CHECK(e1.out == e2.out);
  CHECK(e1.out.find("mean over 3 images") != std::string::npos);
  const auto ev = records(dir / "ev");
  REQUIRE(ev.size() == 2);
  CHECK(ev[0]["eval"] == ev[1]["eval"]);
  CHECK(ev[0]["checkpoint_sha1"].get<std::string>().size() == 40);

  const auto mismatch =
      run_cli({"eval", "--checkpoint", ckpt, "--manifest", manifest, "--preset", "B", "--out", (dir / "ev").string()});
  CHECK(mismatch.code == cli::kRuntimeError);
  CHECK(mismatch.err.find("mismatch") != std::string::npos);
  CHECK(run_cli({"eval", "--manifest", manifest}).code == cli::kUsageError);
}

TEST_CASE("ablate: 2x2x2 grid yields 8 records and a PSNR-sorted summary") {
  const auto dir = support::scratch_dir("cli_ablate");
  const auto cfg = quick_config(dir).string();
  REQUIRE(run_cli({"synth", "--procedural", "4", "--size", "32", "--config", cfg, "--out", dir.string()}).code ==
          0);
  const auto manifest = (dir / "manifest.jsonl").string();
  REQUIRE(run_cli({"train-proxy", "--config", cfg, "--manifest", manifest, "--epochs", "2", "--crop", "16",
                   "--batch", "2", "--out", (dir / "proxy").string()})
              .code == 0);
  const auto r = run_cli({"ablate", "--config", cfg, "--manifest", manifest, "--proxy",
                          (dir / "proxy" / "proxy.ckpt").string(), "--blocks", "FAB,MSFAB", "--attention",
                          "none,cnlb+spds", "--losses", "none,DFCR", "--out", (dir / "ab").string()});
  REQUIRE(r.code == 0);
  const auto recs = records(dir / "ab");
  REQUIRE(recs.size() == 8);
  for (const auto& rec : recs) CHECK(rec["status"] == "ok");

  std::istringstream lines(r.out);
  std::string line;
  bool in_table = false;
  std::vector<double> psnrs;
  while (std::getline(lines, line)) {
    if (line.rfind("block", 0) == 0) {
      in_table = true;
      continue;
    }
    if (!in_table || line.empty() || line.rfind("observation", 0) == 0) continue;
    std::istringstream row(line);
    std::string b, a, l;
    double p = 0.0;
    row >> b >> a >> l >> p;
    psnrs.push_back(p);
  }
  REQUIRE(psnrs.size() == 8);
  CHECK(std::is_sorted(psnrs.rbegin(), psnrs.rend()));
  CHECK(r.out.find("observation: MSFAB") != std::string::npos);
  CHECK(r.out.find("observation: DFCR") != std::string::npos);

  CHECK(run_cli({"ablate", "--config", cfg, "--manifest", manifest, "--blocks", "FAB", "--attention", "bogus",
                 "--out", (dir / "ab2").string()})
            .code == cli::kUsageError);
}

TEST_CASE("ablate keeps going when a cell fails") {
  const auto dir = support::scratch_dir("cli_ablate_fail");
  const auto cfg = quick_config(dir).string();
  REQUIRE(run_cli({"synth", "--procedural", "2", "--size", "32", "--config", cfg, "--out", dir.string()}).code ==
          0);
  const auto r = run_cli({"ablate", "--config", cfg, "--manifest", (dir / "manifest.jsonl").string(), "--blocks",
                          "FAB", "--attention", "none", "--losses", "DFCR,none", "--out", (dir / "ab").string()});
  CHECK(r.code == cli::kRuntimeError);
  const auto recs = records(dir / "ab");
  REQUIRE(recs.size() == 2);
  CHECK(recs[0]["status"] == "error");
  CHECK(recs[1]["status"] == "ok");
}

TEST_CASE("ablation grid validation and labels") {
  const auto g = cli::ablation_grid({"FAB", "MSFAB"}, {"none", "nlb", "cnlb+spp"}, {"none"});
  CHECK(g.size() == 6);
  CHECK(g.front().label() == "FAB/none/none");
  CHECK_THROWS(cli::ablation_grid({"XYZ"}, {"none"}, {"none"}));
  CHECK_THROWS(cli::ablation_grid({"FAB"}, {"none"}, {"perceptual"}));
}

TEST_CASE("count and bench report the reference comparison") {
  const auto dir = support::scratch_dir("cli_count");
  const auto r = run_cli({"count", "--preset", "B", "--out", dir.string()});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("1200340") != std::string::npos);
  CHECK(r.out.find("1196052") != std::string::npos);
  CHECK(r.out.find("macs") != std::string::npos);
  CHECK(fs::exists(dir / "cost_B.jsonl"));
  const auto recs = records(dir);
  REQUIRE(recs.size() == 1);
  CHECK(recs[0]["command"] == "count");

  const auto b = run_cli({"bench", "--preset", "tiny", "--res", "64", "--repeats", "1", "--sampler", "spds",
                          "--out", dir.string()});
  REQUIRE(b.code == 0);
  CHECK(b.out.find("ratio") != std::string::npos);
  const auto br = records(dir);
  CHECK(br.back()["attention_mac_ratio"].get<double>() == 0.3125);
}
