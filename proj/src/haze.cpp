#include "mrfn/haze.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "json.hpp"

namespace mrfn {

namespace fs = std::filesystem;
using nlohmann::json;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 over the combined value
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

double DepthField::measured_gradient() const {
  double g = 0.0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double dx = x + 1 < width ? at(y, x + 1) - at(y, x) : 0.0;
      const double dy = y + 1 < height ? at(y + 1, x) - at(y, x) : 0.0;
      g = std::max(g, std::hypot(dx, dy));
    }
  }
  return g;
}

DepthField gen_depth_field(int h, int w, std::uint64_t seed, double smoothness) {
  if (h <= 0 || w <= 0) throw std::invalid_argument("depth field dims must be positive");
  if (!(smoothness > 0.0)) throw std::invalid_argument("depth smoothness must be positive");
  constexpr int kWaves = 6;
  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double span = static_cast<double>(std::max(h, w));

  struct Wave {
    double wx, wy, phase, amp;
  };
  std::array<Wave, kWaves> waves{};
  double sum_amp = 0.0, sum_slope = 0.0;
  for (auto& wv : waves) {
    const double theta = kTwoPi * unit(rng);
    const double freq = kTwoPi / span * (0.25 + 1.75 * unit(rng));
    wv = {freq * std::cos(theta), freq * std::sin(theta), kTwoPi * unit(rng), 0.5 + 0.5 * unit(rng)};
    sum_amp += wv.amp;
    sum_slope += wv.amp * freq;
  }
  const double half_range = 0.5 * (kDepthMax - kDepthMin);
  double scale = half_range / sum_amp;
  if (std::isfinite(smoothness)) {
    // A forward difference is bounded by the per-axis slope; the 2-D norm by sqrt(2) of it.
    scale = std::min(scale, DepthField::max_gradient(smoothness) / (std::numbers::sqrt2 * sum_slope));
  } else {
    scale = 0.0;
  }
  const double amp = scale * sum_amp;
  const double centre = (kDepthMin + amp) + (kDepthMax - kDepthMin - 2.0 * amp) * unit(rng);

  DepthField f{h, w, std::vector<double>(static_cast<std::size_t>(h) * w, centre)};
  if (scale == 0.0) return f;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double v = 0.0;
      for (const auto& wv : waves) v += wv.amp * std::cos(wv.wx * x + wv.wy * y + wv.phase);
      f.values[static_cast<std::size_t>(y) * w + x] =
          std::clamp(centre + scale * v, kDepthMin, kDepthMax);
    }
  }
  return f;
}

void HazeParams::validate() const {
  for (double a : A) {
    if (!(a >= 0.7 && a <= 1.0)) {
      throw std::invalid_argument("atmospheric light " + std::to_string(a) + " outside [0.7, 1.0]");
    }
  }
  if (!(beta > 0.0) || !std::isfinite(beta)) {
    throw std::invalid_argument("scattering coefficient must be positive and finite");
  }
  if (!(depth_smoothness > 0.0)) throw std::invalid_argument("depth smoothness must be positive");
}

void HazeRanges::validate() const {
  if (!(0.7 <= a_min && a_min <= a_max && a_max <= 1.0)) {
    throw std::invalid_argument("haze A range must satisfy 0.7 <= a_min <= a_max <= 1.0");
  }
  if (!(0.0 < beta_min && beta_min <= beta_max)) {
    throw std::invalid_argument("haze beta range must satisfy 0 < beta_min <= beta_max");
  }
  if (!(smoothness > 0.0)) throw std::invalid_argument("depth smoothness must be positive");
}

HazeParams sample_haze_params(std::mt19937_64& rng, const HazeRanges& ranges) {
  ranges.validate();
  std::uniform_real_distribution<double> a(ranges.a_min, ranges.a_max);
  std::uniform_real_distribution<double> b(ranges.beta_min, ranges.beta_max);
  HazeParams p;
  p.A[0] = a(rng);
  p.A[1] = ranges.per_channel_A ? a(rng) : p.A[0];
  p.A[2] = ranges.per_channel_A ? a(rng) : p.A[0];
  p.beta = b(rng);
  p.depth_seed = rng();
  p.depth_smoothness = ranges.smoothness;
  return p;
}

std::vector<double> transmission(const DepthField& depth, double beta) {
  std::vector<double> t(depth.values.size());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::exp(-beta * depth.values[i]);
  return t;
}

Image apply_scattering(const Image& clean, std::span<const double> t, const std::array<double, 3>& A) {
  if (t.size() != clean.plane()) {
    throw std::invalid_argument("transmission map size differs from image plane");
  }
  for (float v : clean.data) {
    if (!(v >= 0.0f && v <= 1.0f)) throw std::domain_error("clean image value outside [0,1]");
  }
  Image out(clean.height, clean.width);
  const std::size_t plane = clean.plane();
  for (int c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double j = clean.data[c * plane + i];
      out.data[c * plane + i] = static_cast<float>(j * t[i] + A[c] * (1.0 - t[i]));
    }
  }
  return out;
}

Image synthesize_hazy(const Image& clean, const HazeParams& params) {
  params.validate();
  const DepthField d =
      gen_depth_field(clean.height, clean.width, params.depth_seed, params.depth_smoothness);
  return apply_scattering(clean, transmission(d, params.beta), params.A);
}

// ---------------------------------------------------------------------------

namespace {

json entry_to_json(const ManifestEntry& e) {
  json j;
  j["id"] = e.id;
  j["clean_path"] = e.clean_path.generic_string();
  j["hazy_path"] = e.hazy_path.generic_string();
  j["A"] = {e.params.A[0], e.params.A[1], e.params.A[2]};
  j["beta"] = e.params.beta;
  j["depth_seed"] = e.params.depth_seed;
  j["depth_smoothness"] = e.params.depth_smoothness;
  if (!e.hazy_f32_path.empty()) j["hazy_f32_path"] = e.hazy_f32_path.generic_string();
  return j;
}

}  // namespace

std::vector<ManifestEntry> read_manifest(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest " + path.string());
  const fs::path base = path.parent_path();
  auto resolve = [&base](const std::string& p) {
    const fs::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const json j = json::parse(line);
      ManifestEntry e;
      e.id = j.at("id").get<std::string>();
      e.clean_path = resolve(j.at("clean_path").get<std::string>());
      e.hazy_path = resolve(j.at("hazy_path").get<std::string>());
      if (j.contains("hazy_f32_path")) e.hazy_f32_path = resolve(j["hazy_f32_path"].get<std::string>());
      const auto& a = j.at("A");
      if (!a.is_array() || a.size() != 3) throw std::runtime_error("A must be [r,g,b]");
      for (int c = 0; c < 3; ++c) e.params.A[c] = a[c].get<double>();
      e.params.beta = j.at("beta").get<double>();
      e.params.depth_seed = j.at("depth_seed").get<std::uint64_t>();
      e.params.depth_smoothness = j.value("depth_smoothness", 32.0);
      out.push_back(std::move(e));
    } catch (const std::exception& ex) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  return out;
}

void write_manifest(const fs::path& path, const std::vector<ManifestEntry>& entries) {
  const fs::path base = path.parent_path();
  std::string text;
  for (auto e : entries) {
    auto rel = [&base](const fs::path& p) {
      return p.empty() || !p.is_absolute() ? p : fs::relative(p, fs::absolute(base));
    };
    e.clean_path = rel(e.clean_path);
    e.hazy_path = rel(e.hazy_path);
    e.hazy_f32_path = rel(e.hazy_f32_path);
    text += entry_to_json(e).dump() + "\n";
  }
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write manifest " + tmp.string());
    os << text;
    if (!os) throw std::runtime_error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<ManifestEntry> make_dataset(const fs::path& clean_dir, const fs::path& out_dir,
                                        const DatasetOptions& options) {
  if (!fs::is_directory(clean_dir)) {
    throw std::invalid_argument("clean image directory not found: " + clean_dir.string());
  }
  if (options.per_clean <= 0) throw std::invalid_argument("per-clean count must be positive");
  options.ranges.validate();
  std::vector<fs::path> cleans;
  for (const auto& de : fs::directory_iterator(clean_dir)) {
    if (!de.is_regular_file()) continue;
    auto ext = de.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
    if (ext == ".png" || ext == ".ppm") cleans.push_back(fs::absolute(de.path()));
  }
  if (cleans.empty()) {
    throw std::invalid_argument("no .png or .ppm images in " + clean_dir.string());
  }
  std::sort(cleans.begin(), cleans.end());
  // Decode everything first so a bad input leaves no partial output behind.
  std::vector<Image> images;
  images.reserve(cleans.size());
  for (const auto& p : cleans) {
    try {
      images.push_back(read_image(p));
    } catch (const std::exception& e) {
      throw std::invalid_argument(std::string("unreadable clean image: ") + e.what());
    }
  }

  const fs::path hazy_dir = out_dir / "hazy";
  fs::create_directories(hazy_dir);
  std::vector<ManifestEntry> entries;
  for (std::size_t i = 0; i < cleans.size(); ++i) {
    for (int k = 0; k < options.per_clean; ++k) {
      const std::uint64_t index = i * options.per_clean + k;
      std::mt19937_64 rng(mix_seed(options.seed, index));
      ManifestEntry e;
      e.id = cleans[i].stem().string() + "_h" + std::to_string(k);
      e.clean_path = cleans[i];
      e.params = sample_haze_params(rng, options.ranges);
      const Image hazy = synthesize_hazy(images[i], e.params);
      e.hazy_path = fs::absolute(hazy_dir / (e.id + ".png"));
      write_image(e.hazy_path, hazy);
      if (options.f32_sidecar) {
        e.hazy_f32_path = fs::absolute(hazy_dir / (e.id + ".f32"));
        write_f32_image(e.hazy_f32_path, hazy);
      }
      entries.push_back(std::move(e));
    }
  }
  write_manifest(out_dir / "manifest.jsonl", entries);
  return read_manifest(out_dir / "manifest.jsonl");
}

// ---------------------------------------------------------------------------

Image procedural_clean(int h, int w, std::uint64_t seed) {
  if (h <= 0 || w <= 0) throw std::invalid_argument("image dims must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto colour = [&] { return std::array<double, 3>{0.05 + 0.9 * u(rng), 0.05 + 0.9 * u(rng), 0.05 + 0.9 * u(rng)}; };

  Image img(h, w);
  const auto c0 = colour(), c1 = colour();
  const double gx = u(rng) - 0.5, gy = u(rng) - 0.5;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double s = std::clamp(0.5 + gx * (2.0 * x / w - 1.0) + gy * (2.0 * y / h - 1.0), 0.0, 1.0);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<float>(c0[c] * (1 - s) + c1[c] * s);
    }
  }
  const int shapes = 4 + static_cast<int>(u(rng) * 5);
  for (int s = 0; s < shapes; ++s) {
    const auto col = colour();
    const int kind = static_cast<int>(u(rng) * 3);
    const double cx = u(rng) * w, cy = u(rng) * h;
    const double r = (0.08 + 0.22 * u(rng)) * std::min(h, w);
    const double period = 3.0 + 6.0 * u(rng);
    const double angle = std::numbers::pi * u(rng);
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
        double cover = 0.0;
        if (kind == 0) {
          cover = std::clamp(r - std::hypot(dx, dy) + 0.5, 0.0, 1.0);
        } else if (kind == 1) {
          cover = std::clamp(r - std::max(std::abs(dx), 0.6 * std::abs(dy)) + 0.5, 0.0, 1.0);
        } else if (std::max(std::abs(dx), std::abs(dy)) < r) {
          const double proj = dx * std::cos(angle) + dy * std::sin(angle);
          cover = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * proj / period);
        }
        if (cover <= 0.0) continue;
        for (int c = 0; c < 3; ++c) {
          float& v = img.at(c, y, x);
          v = static_cast<float>(v * (1.0 - cover) + col[c] * cover);
        }
      }
    }
  }
  return quantize8(img);
}

std::vector<fs::path> write_procedural_set(const fs::path& dir, int n, int h, int w,
                                           std::uint64_t seed) {
  if (n <= 0) throw std::invalid_argument("procedural image count must be positive");
  fs::create_directories(dir);
  std::vector<fs::path> out;
  for (int i = 0; i < n; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "clean_%04d.png", i);
    out.push_back(dir / name);
    write_image(out.back(), procedural_clean(h, w, mix_seed(seed, static_cast<std::uint64_t>(i))));
  }
  return out;
}

}  // namespace mrfn
