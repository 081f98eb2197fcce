#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrfn/haze.hpp"
#include "mrfn/losses.hpp"
#include "mrfn/network.hpp"
#include "mrfn/optim.hpp"

namespace mrfn {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Value of the small TOML subset we read: booleans, integers, floats,
/// strings and flat arrays of those.
struct TomlValue {
  enum class Type { Bool, Int, Float, String, Array };
  Type type = Type::Int;
  bool b = false;
  std::int64_t i = 0;
  double d = 0.0;
  std::string s;
  std::vector<TomlValue> items;

  double as_double() const;
  std::int64_t as_int() const;
};

/// "section.key" -> value, in file order of first appearance.
struct TomlDocument {
  std::vector<std::string> order;
  std::map<std::string, TomlValue> values;
  std::map<std::string, int> lines;
};

TomlDocument parse_toml(const std::string& text, const std::string& origin = "<config>");

struct TrainConfig {
  double lr_init = 2e-4;
  double lr_final = 1e-6;
  int batch_size = 4;
  int iterations = 2000;
  int crop_size = 64;
  bool rotate = true;
  bool flip = true;
  std::uint64_t seed = 0;
  int checkpoint_every = 500;
  int log_every = 50;
  AdamOptions adam;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct DataConfig {
  std::string manifest;
  std::string proxy;
  bool f32_sidecar = false;
  bool eval_clamp = true;

  bool operator==(const DataConfig&) const = default;
};

struct RunConfig {
  NetworkConfig model;
  TrainConfig train;
  CRConfig loss = CRConfig::make(CRVariant::DFCR);
  HazeRanges haze;
  DataConfig data;
  int threads = 1;

  void validate() const;
  bool operator==(const RunConfig&) const = default;
};

/// Applies every key of `doc` on top of `base`; unknown keys and wrong types
/// raise ConfigError naming the line.
RunConfig apply_toml(const RunConfig& base, const TomlDocument& doc);
RunConfig parse_run_config(const std::string& text, const RunConfig& base = {});
RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base = {});
/// Fully resolved config; parse_run_config(emit_run_config(c)) == c.
std::string emit_run_config(const RunConfig& cfg);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);

}  // namespace mrfn
