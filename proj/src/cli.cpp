#include "mrfn/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "CLI11.hpp"
#include "json.hpp"
#include "mrfn/accounting.hpp"
#include "mrfn/checkpoint.hpp"
#include "mrfn/config.hpp"
#include "mrfn/parallel.hpp"
#include "mrfn/train.hpp"

namespace mrfn::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

std::string sha1_hex(std::string_view data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

std::string_view source_hash() { return MRFN_SOURCE_HASH; }

std::string AblationCell::label() const { return block + "/" + attention + "/" + loss; }

namespace {

const std::vector<std::string> kAllBlocks{"FAB", "ParallelFE", "MSFE_SA", "MSFAB"};
const std::vector<std::string> kAllAttention{"none", "nlb", "cnlb+none", "cnlb+spp", "cnlb+spds"};
const std::vector<std::string> kAllLosses{"none", "originalCR", "DFCR", "SIFCR"};

void apply_attention(NetworkConfig& model, const std::string& name) {
  if (name == "none") {
    model.attention = AttentionKind::None;
  } else if (name == "nlb") {
    model.attention = AttentionKind::NLB;
  } else if (name.rfind("cnlb+", 0) == 0) {
    model.attention = AttentionKind::CNLB;
    model.sampler.kind = parse_sampler_kind(name.substr(5));
  } else {
    throw UsageError("unknown attention setting '" + name +
                     "' (expected none, nlb, cnlb+none, cnlb+spp or cnlb+spds)");
  }
}

}  // namespace

std::vector<AblationCell> ablation_grid(const std::vector<std::string>& blocks,
                                        const std::vector<std::string>& attentions,
                                        const std::vector<std::string>& losses) {
  std::vector<AblationCell> cells;
  for (const auto& b : blocks) {
    parse_block_kind(b);
    for (const auto& a : attentions) {
      NetworkConfig probe;
      apply_attention(probe, a);
      for (const auto& l : losses) {
        parse_cr_variant(l);
        cells.push_back({b, a, l});
      }
    }
  }
  return cells;
}

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string preset;
  int threads = 0;
  std::string out = ".";
  bool emit = false;
};

struct Context {
  Common common;
  RunConfig cfg;
  std::ostream& out;
  std::ostream& err;

  fs::path out_dir() const { return common.out; }
};

RunConfig resolve_config(const Common& c, RunConfig base) {
  if (!c.preset.empty()) base.model = NetworkConfig::preset(c.preset);
  if (!c.config.empty()) {
    if (!fs::exists(c.config)) throw UsageError("config file '" + c.config + "' not found");
    base = load_run_config(c.config, base);
  }
  if (c.seed) base.train.seed = *c.seed;
  if (c.threads > 0) base.threads = c.threads;
  base.validate();
  return base;
}

void apply_threads(int threads) {
  set_num_threads(threads);
#ifdef _OPENMP
  omp_set_num_threads(std::max(1, threads));
#else
  (void)threads;
#endif
}

json number_or_inf(double v) {
  if (std::isfinite(v)) return v;
  return v > 0 ? "inf" : (v < 0 ? "-inf" : "nan");
}

json base_record(const std::string& command, const RunConfig& cfg) {
  const std::string text = emit_run_config(cfg);
  const std::string config_hash = sha1_hex(text);
  json r;
  r["command"] = command;
  r["config"] = text;
  r["config_sha1"] = config_hash;
  r["source_hash"] = std::string(source_hash());
  r["run_hash"] = sha1_hex(std::string(source_hash()) + config_hash);
  r["seed"] = cfg.train.seed;
  r["threads"] = cfg.threads;
  return r;
}

void append_record(const fs::path& dir, const json& record) {
  fs::create_directories(dir);
  std::ofstream f(dir / "records.jsonl", std::ios::app);
  if (!f) throw std::runtime_error("cannot open records file in '" + dir.string() + "'");
  f << record.dump() << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string manifest_path(const std::string& flag, const RunConfig& cfg) {
  const std::string m = flag.empty() ? cfg.data.manifest : flag;
  if (m.empty()) throw UsageError("no manifest given (use --manifest or data.manifest)");
  if (!fs::exists(m)) throw UsageError("manifest '" + m + "' not found");
  return m;
}

std::unique_ptr<PerceptualExtractor> load_proxy(const std::string& path, DType dtype) {
  if (path.empty()) {
    throw MissingProxy("contrastive loss enabled but no proxy checkpoint configured "
                       "(use --proxy or data.proxy, or set loss.cr = \"none\")");
  }
  if (!fs::exists(path)) throw MissingProxy("proxy checkpoint '" + path + "' not found");
  ExtractorConfig ec;
  ec.dtype = dtype;
  auto ex = std::make_unique<PerceptualExtractor>(ec);
  load_checkpoint(*ex, path);
  ex->freeze();
  return ex;
}

json log_json(const std::vector<StepLog>& log) {
  json arr = json::array();
  for (const auto& s : log) {
    arr.push_back({{"step", s.step}, {"lr", s.lr}, {"loss", s.loss}, {"l1", s.l1}, {"cr", s.cr}});
  }
  return arr;
}

json eval_json(const EvalSummary& e) {
  json images = json::array();
  for (const auto& s : e.images) {
    images.push_back({{"id", s.id}, {"psnr", number_or_inf(s.psnr)}, {"ssim", s.ssim}});
  }
  return {{"mean_psnr", number_or_inf(e.mean_psnr)}, {"mean_ssim", e.mean_ssim}, {"images", images}};
}

std::string fixed(double v, int digits) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string clean;
  int procedural = 0;
  int size = 64;
  int per_clean = 1;
  bool f32 = false;
};

int cmd_synth(Context& ctx, const SynthArgs& a) {
  const auto t0 = Clock::now();
  const fs::path out = ctx.out_dir();
  fs::path clean = a.clean;
  if (a.procedural > 0) {
    if (a.size < 16) throw UsageError("--size must be at least 16");
    clean = out / "clean";
    write_procedural_set(clean, a.procedural, a.size, a.size, mix_seed(ctx.cfg.train.seed, 0xC1EA));
  } else if (a.clean.empty()) {
    throw UsageError("synth needs --clean DIR or --procedural N");
  } else if (!fs::is_directory(clean)) {
    throw UsageError("clean directory '" + a.clean + "' does not exist");
  }
  if (a.per_clean <= 0) throw UsageError("--per-clean must be positive");
  DatasetOptions opts;
  opts.per_clean = a.per_clean;
  opts.seed = ctx.cfg.train.seed;
  opts.ranges = ctx.cfg.haze;
  opts.f32_sidecar = a.f32 || ctx.cfg.data.f32_sidecar;
  std::vector<ManifestEntry> entries;
  try {
    entries = make_dataset(clean, out, opts);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  ctx.out << "wrote " << entries.size() << " pairs to " << (out / "manifest.jsonl").string() << '\n';
  json rec = base_record("synth", ctx.cfg);
  rec["clean_dir"] = clean.string();
  rec["per_clean"] = a.per_clean;
  rec["pairs"] = entries.size();
  rec["manifest"] = (out / "manifest.jsonl").string();
  rec["wall_seconds"] = seconds_since(t0);
  append_record(out, rec);
  return kOk;
}

// ---------------------------------------------------------------------------

struct ProxyArgs {
  std::string manifest;
  ProxyTrainOptions opts;
};

int cmd_train_proxy(Context& ctx, ProxyArgs a) {
  const auto t0 = Clock::now();
  const auto entries = read_manifest(manifest_path(a.manifest, ctx.cfg));
  a.opts.seed = ctx.cfg.train.seed;
  ExtractorConfig ec;
  ec.dtype = ctx.cfg.model.dtype;
  PerceptualExtractor ex(ec);
  const ProxyTrainResult r = train_proxy_classifier(ex, entries, a.opts);
  const fs::path ckpt = ctx.out_dir() / "proxy.ckpt";
  fs::create_directories(ctx.out_dir());
  save_checkpoint(ex, ckpt);
  ctx.out << "proxy: final train loss " << fixed(r.train_loss, 4) << ", held-out accuracy "
          << fixed(r.heldout_accuracy, 3) << " on " << r.heldout_count << " images\n"
          << "saved " << ckpt.string() << '\n';
  json rec = base_record("train-proxy", ctx.cfg);
  rec["epochs"] = a.opts.epochs;
  rec["train_loss"] = r.train_loss;
  rec["heldout_accuracy"] = r.heldout_accuracy;
  rec["heldout_count"] = r.heldout_count;
  rec["checkpoint"] = ckpt.string();
  rec["wall_seconds"] = seconds_since(t0);
  append_record(ctx.out_dir(), rec);
  return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string manifest;
  std::string proxy;
  bool resume = false;
  int stop_at = -1;
  bool eval = false;
};

int cmd_train(Context& ctx, const TrainArgs& a) {
  const auto t0 = Clock::now();
  RunConfig& cfg = ctx.cfg;
  if (!a.proxy.empty()) cfg.data.proxy = a.proxy;
  const auto pairs = load_pairs(read_manifest(manifest_path(a.manifest, cfg)), cfg.data.f32_sidecar);
  std::unique_ptr<PerceptualExtractor> ex;
  if (cfg.loss.enabled()) ex = load_proxy(cfg.data.proxy, cfg.model.dtype);

  const fs::path dir = ctx.out_dir();
  fs::create_directories(dir);
  const fs::path ckpt = dir / "model.ckpt";
  const fs::path sidecar = dir / "model.ckpt.cfg";
  const std::string cfg_text = emit_run_config(cfg);
  if (a.resume) {
    if (!fs::exists(ckpt)) throw UsageError("--resume: no checkpoint at '" + ckpt.string() + "'");
    if (fs::exists(sidecar) && !(load_run_config(sidecar) == cfg)) {
      throw UsageError("--resume: effective config differs from the one stored with the checkpoint");
    }
  }
  write_text(sidecar, cfg_text);

  auto model = build_model(cfg.model, cfg.train.seed);
  TrainHooks hooks;
  hooks.checkpoint = ckpt;
  hooks.resume = a.resume;
  hooks.stop_at = a.stop_at;
  hooks.on_log = [&](const StepLog& s) {
    ctx.out << "step " << s.step << " lr " << s.lr << " loss " << s.loss << " l1 " << s.l1;
    if (cfg.loss.enabled()) ctx.out << " cr " << s.cr;
    ctx.out << '\n' << std::flush;
  };
  const TrainSummary summary = train_model(*model, pairs, cfg.train, cfg.loss, ex.get(), hooks);

  json rec = base_record("train", cfg);
  rec["start_step"] = summary.start_step;
  rec["end_step"] = summary.end_step;
  rec["train_loss"] = log_json(summary.log);
  rec["checkpoint"] = ckpt.string();
  if (a.eval) {
    const EvalSummary e = evaluate(*model, pairs, cfg.data.eval_clamp);
    ctx.out << "training-set PSNR " << fixed(e.mean_psnr, 2) << " dB, SSIM " << fixed(e.mean_ssim, 4)
            << '\n';
    rec["eval"] = eval_json(e);
  }
  rec["wall_seconds"] = seconds_since(t0);
  append_record(dir, rec);
  ctx.out << "saved " << ckpt.string() << " after " << summary.end_step << " steps\n";
  return kOk;
}

// ---------------------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
};

int cmd_eval(Context& ctx, const EvalArgs& a) {
  const auto t0 = Clock::now();
  if (!fs::exists(a.checkpoint)) throw UsageError("checkpoint '" + a.checkpoint + "' not found");
  const auto entries = read_manifest(manifest_path(a.manifest, ctx.cfg));
  auto model = build_model(ctx.cfg.model, 0);
  load_checkpoint(*model, a.checkpoint);
  const auto pairs = load_pairs(entries, ctx.cfg.data.f32_sidecar);
  const EvalSummary e = evaluate(*model, pairs, ctx.cfg.data.eval_clamp);
  for (const auto& s : e.images) {
    ctx.out << s.id << "  PSNR " << fixed(s.psnr, 2) << "  SSIM " << fixed(s.ssim, 4) << '\n';
  }
  ctx.out << "mean over " << e.images.size() << " images: PSNR " << fixed(e.mean_psnr, 2)
          << " dB, SSIM " << fixed(e.mean_ssim, 4) << '\n';
  json rec = base_record("eval", ctx.cfg);
  rec["checkpoint"] = a.checkpoint;
  const auto bytes = read_file(a.checkpoint);
  rec["checkpoint_sha1"] = sha1_hex({reinterpret_cast<const char*>(bytes.data()), bytes.size()});
  rec["eval"] = eval_json(e);
  rec["wall_seconds"] = seconds_since(t0);
  append_record(ctx.out_dir(), rec);
  return kOk;
}

// ---------------------------------------------------------------------------

struct AblateArgs {
  std::string manifest;
  std::string eval_manifest;
  std::string proxy;
  std::vector<std::string> blocks = kAllBlocks;
  std::vector<std::string> attention = kAllAttention;
  std::vector<std::string> losses = kAllLosses;
};

struct CellResult {
  AblationCell cell;
  bool ok = false;
  double psnr = 0.0;
  double ssim = 0.0;
  std::string error;
};

std::optional<double> mean_psnr_where(const std::vector<CellResult>& rs,
                                      const std::function<bool(const AblationCell&)>& pick) {
  double sum = 0.0;
  int n = 0;
  for (const auto& r : rs) {
    if (r.ok && pick(r.cell)) {
      sum += r.psnr;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return sum / n;
}

int cmd_ablate(Context& ctx, const AblateArgs& a) {
  std::vector<AblationCell> cells;
  try {
    cells = ablation_grid(a.blocks, a.attention, a.losses);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  RunConfig& base = ctx.cfg;
  if (!a.proxy.empty()) base.data.proxy = a.proxy;
  const auto train_pairs = load_pairs(read_manifest(manifest_path(a.manifest, base)),
                                      base.data.f32_sidecar);
  const auto eval_pairs = a.eval_manifest.empty()
                              ? train_pairs
                              : load_pairs(read_manifest(manifest_path(a.eval_manifest, base)),
                                           base.data.f32_sidecar);
  std::unique_ptr<PerceptualExtractor> ex;
  std::string proxy_error;
  try {
    if (std::any_of(a.losses.begin(), a.losses.end(), [](const std::string& l) { return l != "none"; })) {
      ex = load_proxy(base.data.proxy, base.model.dtype);
    }
  } catch (const std::exception& e) {
    proxy_error = e.what();
  }

  std::vector<CellResult> results;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto t0 = Clock::now();
    const AblationCell& cell = cells[i];
    RunConfig cfg = base;
    CellResult r;
    r.cell = cell;
    try {
      cfg.model.bottleneck_kind = parse_block_kind(cell.block);
      apply_attention(cfg.model, cell.attention);
      const CRConfig loss = CRConfig::make(parse_cr_variant(cell.loss), base.loss.beta);
      cfg.loss = loss;
      cfg.loss.epsilon = base.loss.epsilon;
      cfg.validate();
      if (cfg.loss.enabled() && !ex) throw MissingProxy(proxy_error);
      auto model = build_model(cfg.model, cfg.train.seed);
      TrainHooks hooks;
      train_model(*model, train_pairs, cfg.train, cfg.loss, ex.get(), hooks);
      const EvalSummary e = evaluate(*model, eval_pairs, cfg.data.eval_clamp);
      r.ok = true;
      r.psnr = e.mean_psnr;
      r.ssim = e.mean_ssim;
    } catch (const std::exception& e) {
      r.error = e.what();
    }
    json rec = base_record("ablate", cfg);
    rec["cell"] = {{"index", i}, {"block", cell.block}, {"attention", cell.attention}, {"loss", cell.loss}};
    rec["status"] = r.ok ? "ok" : "error";
    if (r.ok) {
      rec["eval"] = {{"mean_psnr", number_or_inf(r.psnr)}, {"mean_ssim", r.ssim}};
    } else {
      rec["error"] = r.error;
    }
    rec["wall_seconds"] = seconds_since(t0);
    append_record(ctx.out_dir(), rec);
    ctx.out << "[" << (i + 1) << "/" << cells.size() << "] " << cell.label() << ": "
            << (r.ok ? fixed(r.psnr, 2) + " dB" : "failed: " + r.error) << '\n'
            << std::flush;
    results.push_back(r);
  }

  std::vector<CellResult> sorted = results;
  std::stable_sort(sorted.begin(), sorted.end(), [](const CellResult& x, const CellResult& y) {
    if (x.ok != y.ok) return x.ok;
    return x.psnr > y.psnr;
  });
  ctx.out << '\n'
          << std::left << std::setw(12) << "block" << std::setw(12) << "attention" << std::setw(12)
          << "loss" << std::right << std::setw(10) << "PSNR" << std::setw(9) << "SSIM" << '\n';
  for (const auto& r : sorted) {
    ctx.out << std::left << std::setw(12) << r.cell.block << std::setw(12) << r.cell.attention
            << std::setw(12) << r.cell.loss << std::right;
    if (r.ok) {
      ctx.out << std::setw(10) << fixed(r.psnr, 2) << std::setw(9) << fixed(r.ssim, 4) << '\n';
    } else {
      ctx.out << std::setw(10) << "error" << '\n';
    }
  }

  const auto msfab = mean_psnr_where(results, [](const AblationCell& c) { return c.block == "MSFAB"; });
  const auto fab = mean_psnr_where(results, [](const AblationCell& c) { return c.block == "FAB"; });
  if (msfab && fab) {
    ctx.out << "observation: MSFAB " << fixed(*msfab, 2) << " dB vs FAB " << fixed(*fab, 2)
            << " dB (MSFAB >= FAB: " << (*msfab >= *fab ? "yes" : "no") << ")\n";
  }
  const auto dfcr = mean_psnr_where(results, [](const AblationCell& c) { return c.loss == "DFCR"; });
  const auto nocr = mean_psnr_where(results, [](const AblationCell& c) { return c.loss == "none"; });
  if (dfcr && nocr) {
    ctx.out << "observation: DFCR " << fixed(*dfcr, 2) << " dB vs no CR " << fixed(*nocr, 2)
            << " dB (DFCR >= none: " << (*dfcr >= *nocr ? "yes" : "no") << ")\n";
  }
  const bool all_ok = std::all_of(results.begin(), results.end(), [](const CellResult& r) { return r.ok; });
  return all_ok ? kOk : kRuntimeError;
}

// ---------------------------------------------------------------------------

struct Reference {
  std::int64_t params;
  double flops;
};

const std::map<std::string, Reference> kReferences{
    {"B", {1196052, 19.03e9}},
    {"base", {861091, 0.0}},
};

struct CountArgs {
  int res = 256;
  std::string convention = "macs";
};

std::string percent_delta(double value, double reference) {
  const double d = 100.0 * (value - reference) / reference;
  return (d >= 0 ? "+" : "") + fixed(d, 2) + "%";
}

int cmd_count(Context& ctx, const CountArgs& a) {
  const auto t0 = Clock::now();
  if (a.res <= 0) throw UsageError("--res must be positive");
  const FlopConvention conv = parse_flop_convention(a.convention);
  const std::string name = ctx.common.preset.empty() ? "config" : ctx.common.preset;
  const CostReport report = make_cost_report(ctx.cfg.model, a.res, a.res, conv, name);
  ctx.out << report.to_table();
  if (auto it = kReferences.find(ctx.common.preset); it != kReferences.end()) {
    const Reference& ref = it->second;
    ctx.out << "reference params " << ref.params << " ("
            << percent_delta(static_cast<double>(report.param_count), static_cast<double>(ref.params))
            << ")\n";
    if (ref.flops > 0.0) {
      ctx.out << "reference FLOPs " << fixed(ref.flops / 1e9, 2) << "G at 256x256; this run "
              << fixed(static_cast<double>(report.flops) / 1e9, 2) << "G at " << a.res << "x" << a.res
              << " counted as " << flop_convention_name(conv);
      if (a.res == 256) ctx.out << " (" << percent_delta(static_cast<double>(report.flops), ref.flops) << ")";
      ctx.out << '\n';
    }
  }
  fs::create_directories(ctx.out_dir());
  write_text(ctx.out_dir() / ("cost_" + name + ".jsonl"), report.to_jsonl());
  json rec = base_record("count", ctx.cfg);
  rec["resolution"] = a.res;
  rec["convention"] = std::string(flop_convention_name(conv));
  rec["param_count"] = report.param_count;
  rec["flops"] = report.flops;
  rec["peak_activation_elements"] = report.activations.peak_elements;
  rec["peak_at"] = report.activations.peak_at;
  rec["attention_map_elements"] = report.activations.attention_map_elements;
  rec["wall_seconds"] = seconds_since(t0);
  append_record(ctx.out_dir(), rec);
  return kOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
  int res = 256;
  int repeats = 3;
  std::string sampler;
};

double median_seconds(int repeats, const std::function<void()>& fn) {
  std::vector<double> t;
  for (int i = 0; i < repeats; ++i) {
    const auto t0 = Clock::now();
    fn();
    t.push_back(seconds_since(t0));
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

int cmd_bench(Context& ctx, const BenchArgs& a) {
  if (a.res <= 0 || a.res % kSpatialMultiple != 0) {
    throw UsageError("--res must be a positive multiple of " + std::to_string(kSpatialMultiple));
  }
  if (a.repeats <= 0) throw UsageError("--repeats must be positive");
  RunConfig& cfg = ctx.cfg;
  if (!a.sampler.empty()) cfg.model.sampler.kind = parse_sampler_kind(a.sampler);
  cfg.validate();
  auto model = build_model(cfg.model, cfg.train.seed);
  std::mt19937_64 rng(cfg.train.seed);
  const DType dt = cfg.model.dtype;
  NoGradGuard guard;
  const Tensor x = Tensor::uniform({1, 3, a.res, a.res}, rng, 0.0, 1.0, dt);
  const double t_forward = median_seconds(a.repeats, [&] { model->forward(x); });

  json rec = base_record("bench", cfg);
  rec["resolution"] = a.res;
  rec["repeats"] = a.repeats;
  rec["forward_seconds"] = t_forward;
  ctx.out << "forward " << a.res << "x" << a.res << ": " << fixed(t_forward * 1e3, 1) << " ms (median of "
          << a.repeats << ")\n";
  if (cfg.model.attention != AttentionKind::None) {
    const std::int64_t c = cfg.model.level_channels(2);
    const std::int64_t hb = a.res / 4;
    const Tensor q = Tensor::randn({1, c, hb, hb}, rng, 1.0, dt);
    const Tensor src = Tensor::randn({1, c, hb, hb}, rng, 1.0, dt);
    const SamplerSpec chosen =
        cfg.model.attention == AttentionKind::NLB ? SamplerSpec{SamplerKind::None, {}, {}} : cfg.model.sampler;
    SamplerSpec none = chosen;
    none.kind = SamplerKind::None;
    const double t_att = median_seconds(a.repeats, [&] { model->attention.forward(q, src, chosen); });
    const double t_none = median_seconds(a.repeats, [&] { model->attention.forward(q, src, none); });
    const double ratio = t_att / t_none;
    ctx.out << "attention stage (" << sampler_kind_name(chosen.kind) << "): " << fixed(t_att * 1e3, 2)
            << " ms; without sampling: " << fixed(t_none * 1e3, 2) << " ms; ratio " << fixed(ratio, 3)
            << '\n';
    rec["sampler"] = std::string(sampler_kind_name(chosen.kind));
    rec["attention_seconds"] = t_att;
    rec["attention_none_seconds"] = t_none;
    rec["attention_time_ratio"] = ratio;
    rec["attention_mac_ratio"] =
        static_cast<double>(attention_dims(cfg.model.embed(), hb, hb, chosen).matmul_macs()) /
        static_cast<double>(attention_dims(cfg.model.embed(), hb, hb, none).matmul_macs());
  }
  fs::create_directories(ctx.out_dir());
  append_record(ctx.out_dir(), rec);
  return kOk;
}

// ---------------------------------------------------------------------------

void add_common(CLI::App& app, Common& c) {
  app.add_option("--config", c.config, "TOML config file");
  app.add_option("--seed", c.seed, "Run seed");
  app.add_option("--preset", c.preset, "Model preset")->check(CLI::IsMember({"B", "L", "tiny", "base"}));
  app.add_option("--threads", c.threads, "Worker threads (1 = reference mode)")->check(CLI::PositiveNumber);
  app.add_option("--out", c.out, "Output directory");
  app.add_flag("--emit-config", c.emit, "Print the effective config and exit");
}

std::vector<std::string> split_list(const std::vector<std::string>& items) {
  std::vector<std::string> out;
  for (const auto& item : items) {
    std::stringstream ss(item);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (!tok.empty()) out.push_back(tok);
    }
  }
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Multi-stream recursive feature network with non-local attention for image dehazing"};
  app.require_subcommand(1);
  Common common;
  add_common(app, common);
  app.fallthrough();

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Synthesize hazy/clean pairs and a manifest");
  s->add_option("--clean", synth.clean, "Directory of clean PNG/PPM images");
  s->add_option("--procedural", synth.procedural, "Generate N procedural clean images instead");
  s->add_option("--size", synth.size, "Procedural image side length");
  s->add_option("--per-clean", synth.per_clean, "Hazy versions per clean image");
  s->add_flag("--f32", synth.f32, "Also write lossless float sidecars");

  ProxyArgs proxy;
  auto* p = app.add_subcommand("train-proxy", "Train the hazy/clean proxy feature extractor");
  p->add_option("--manifest", proxy.manifest, "Training manifest");
  p->add_option("--epochs", proxy.opts.epochs, "Epochs")->check(CLI::PositiveNumber);
  p->add_option("--batch", proxy.opts.batch, "Crops per class per step")->check(CLI::PositiveNumber);
  p->add_option("--crop", proxy.opts.crop, "Crop size (multiple of 16)")->check(CLI::PositiveNumber);
  p->add_option("--lr", proxy.opts.lr, "Initial learning rate");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Train the dehazing network");
  t->add_option("--manifest", train.manifest, "Training manifest");
  t->add_option("--proxy", train.proxy, "Proxy extractor checkpoint");
  t->add_flag("--resume", train.resume, "Continue from <out>/model.ckpt");
  t->add_option("--stop-at", train.stop_at, "Stop after this many total steps");
  t->add_flag("--eval", train.eval, "Report training-set PSNR/SSIM at the end");

  EvalArgs eval;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest (full images)");
  e->add_option("--checkpoint", eval.checkpoint, "Model checkpoint")->required();
  e->add_option("--manifest", eval.manifest, "Evaluation manifest");

  AblateArgs ablate;
  std::vector<std::string> blocks, attentions, losses;
  auto* ab = app.add_subcommand("ablate", "Sweep block kind x attention x loss");
  ab->add_option("--manifest", ablate.manifest, "Training manifest");
  ab->add_option("--eval-manifest", ablate.eval_manifest, "Evaluation manifest (default: training)");
  ab->add_option("--proxy", ablate.proxy, "Proxy extractor checkpoint");
  ab->add_option("--blocks", blocks, "Comma-separated block kinds");
  ab->add_option("--attention", attentions, "Comma-separated attention settings");
  ab->add_option("--losses", losses, "Comma-separated CR variants");

  CountArgs count;
  auto* c = app.add_subcommand("count", "Parameter, FLOP and activation accounting");
  c->add_option("--res", count.res, "Square input resolution");
  c->add_option("--convention", count.convention, "FLOP convention")
      ->check(CLI::IsMember({"macs", "2xmacs"}));

  BenchArgs bench;
  auto* b = app.add_subcommand("bench", "Wall-clock forward and attention timing");
  b->add_option("--res", bench.res, "Square input resolution");
  b->add_option("--repeats", bench.repeats, "Timed repetitions");
  b->add_option("--sampler", bench.sampler, "Override the key/value sampler")
      ->check(CLI::IsMember({"none", "spp", "spds"}));

  for (auto* sub : {s, p, t, e, ab, c, b}) sub->fallthrough();

  std::vector<std::string> reversed(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& ex) {
    const int code = app.exit(ex, out, err);
    return code == 0 ? kOk : kUsageError;
  }

  if (!blocks.empty()) ablate.blocks = split_list(blocks);
  if (!attentions.empty()) ablate.attention = split_list(attentions);
  if (!losses.empty()) ablate.losses = split_list(losses);

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    RunConfig base;
    if (name == "eval") {
      const fs::path sidecar = fs::path(eval.checkpoint).concat(".cfg");
      if (fs::exists(sidecar)) base = load_run_config(sidecar);
    }
    Context ctx{common, resolve_config(common, base), out, err};
    if (common.emit) {
      out << emit_run_config(ctx.cfg);
      return kOk;
    }
    apply_threads(ctx.cfg.threads);
    if (name == "synth") return cmd_synth(ctx, synth);
    if (name == "train-proxy") return cmd_train_proxy(ctx, proxy);
    if (name == "train") return cmd_train(ctx, train);
    if (name == "eval") return cmd_eval(ctx, eval);
    if (name == "ablate") return cmd_ablate(ctx, ablate);
    if (name == "count") return cmd_count(ctx, count);
    if (name == "bench") return cmd_bench(ctx, bench);
    throw UsageError("unknown command '" + name + "'");
  } catch (const UsageError& ex) {
    err << "error: " << ex.what() << '\n';
    return kUsageError;
  } catch (const ConfigError& ex) {
    err << "config error: " << ex.what() << '\n';
    return kUsageError;
  } catch (const MissingProxy& ex) {
    err << "error: " << ex.what() << '\n';
    return kMissingProxy;
  } catch (const NonFiniteLoss& ex) {
    err << "error: " << ex.what() << '\n';
    return kNonFiniteLoss;
  } catch (const std::exception& ex) {
    err << "error: " << ex.what() << '\n';
    return kRuntimeError;
  }
}

int run(int argc, char** argv) {
  return run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

}  // namespace mrfn::cli
