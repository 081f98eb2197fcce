#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mrfn/image_io.hpp"

namespace mrfn {

constexpr double kDepthMin = 0.5;
constexpr double kDepthMax = 5.0;

/// Smooth random scene depth: a centred sum of plane cosines. The finite
/// difference gradient magnitude never exceeds max_gradient(smoothness), so
/// `smoothness` reads as "pixels needed to cross the whole depth range".
/// An infinite smoothness yields a constant field.
struct DepthField {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  /// Largest |(f(y,x+1)-f(y,x), f(y+1,x)-f(y,x))| over the grid.
  double measured_gradient() const;
  static double max_gradient(double smoothness) { return (kDepthMax - kDepthMin) / smoothness; }
};

DepthField gen_depth_field(int h, int w, std::uint64_t seed, double smoothness);

struct HazeParams {
  std::array<double, 3> A{1.0, 1.0, 1.0};
  double beta = 1.0;
  std::uint64_t depth_seed = 0;
  double depth_smoothness = 32.0;

  /// A in [0.7,1.0] per channel, beta > 0, smoothness > 0.
  void validate() const;
};

/// Sampling ranges for random haze; A is shared over channels unless
/// `per_channel_A` is set.
struct HazeRanges {
  double a_min = 0.7;
  double a_max = 1.0;
  double beta_min = 0.6;
  double beta_max = 1.8;
  double smoothness = 32.0;
  bool per_channel_A = false;

  void validate() const;
  bool operator==(const HazeRanges&) const = default;
};

HazeParams sample_haze_params(std::mt19937_64& rng, const HazeRanges& ranges);

/// t(x) = exp(-beta d(x)).
std::vector<double> transmission(const DepthField& depth, double beta);

/// I = J t + A (1 - t) with an explicit transmission map (one value per pixel).
Image apply_scattering(const Image& clean, std::span<const double> t, const std::array<double, 3>& A);
/// Full synthesis from parameters; the depth field is regenerated from its seed.
Image synthesize_hazy(const Image& clean, const HazeParams& params);

struct ManifestEntry {
  std::string id;
  std::filesystem::path clean_path;
  std::filesystem::path hazy_path;
  std::filesystem::path hazy_f32_path;  // empty unless sidecars were written
  HazeParams params;
};

/// JSON lines; relative paths are resolved against the manifest's directory.
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

struct DatasetOptions {
  int per_clean = 1;
  std::uint64_t seed = 0;
  HazeRanges ranges;
  bool f32_sidecar = false;
};

/// Synthesizes `per_clean` hazy versions of every PNG/PPM in clean_dir (sorted
/// by name), writes them to out_dir/hazy and returns the entries written to
/// out_dir/manifest.jsonl. Throws std::invalid_argument before writing
/// anything when inputs are unusable.
std::vector<ManifestEntry> make_dataset(const std::filesystem::path& clean_dir,
                                        const std::filesystem::path& out_dir,
                                        const DatasetOptions& options);

/// Deterministic synthetic "clean" scene: shaded background with random
/// discs, boxes and stripe patches.
Image procedural_clean(int h, int w, std::uint64_t seed);
/// Writes n procedural PNGs named clean_XXXX.png; returns their paths.
std::vector<std::filesystem::path> write_procedural_set(const std::filesystem::path& dir, int n,
                                                        int h, int w, std::uint64_t seed);

/// Per-item seed derived from a run seed and an index, stable across platforms.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace mrfn
