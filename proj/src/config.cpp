#include "mrfn/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace mrfn {

double TomlValue::as_double() const {
  if (type == Type::Float) return d;
  if (type == Type::Int) return static_cast<double>(i);
  throw ConfigError("expected a number");
}

std::int64_t TomlValue::as_int() const {
  if (type == Type::Int) return i;
  throw ConfigError("expected an integer");
}

std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  for (int prec = 1; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  std::string s = buf;
  // Keep floats recognisable as floats.
  if (s.find_first_of(".eE") == std::string::npos) s += ".0";
  return s;
}

// ---------------------------------------------------------------------------

namespace {

class TomlParser {
 public:
  TomlParser(const std::string& line, int lineno, const std::string& origin)
      : s_(line), line_(lineno), origin_(origin) {}

  TomlValue value() {
    skip_ws();
    if (pos_ >= s_.size()) fail("missing value");
    const char c = s_[pos_];
    if (c == '"') return string_value();
    if (c == '[') return array_value();
    if (s_.compare(pos_, 4, "true") == 0) {
      pos_ += 4;
      TomlValue v;
      v.type = TomlValue::Type::Bool;
      v.b = true;
      return v;
    }
    if (s_.compare(pos_, 5, "false") == 0) {
      pos_ += 5;
      TomlValue v;
      v.type = TomlValue::Type::Bool;
      return v;
    }
    return number_value();
  }

  void expect_end() {
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] != '#') fail("unexpected text after value");
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError(origin_ + ":" + std::to_string(line_) + ": " + what);
  }

 private:
  void skip_ws() {
    while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t' || s_[pos_] == '\r')) ++pos_;
  }

  TomlValue string_value() {
    ++pos_;
    TomlValue v;
    v.type = TomlValue::Type::String;
    while (pos_ < s_.size() && s_[pos_] != '"') {
      if (s_[pos_] == '\\') {
        if (++pos_ >= s_.size()) break;
        const char e = s_[pos_];
        v.s += e == 'n' ? '\n' : e == 't' ? '\t' : e;
      } else {
        v.s += s_[pos_];
      }
      ++pos_;
    }
    if (pos_ >= s_.size()) fail("unterminated string");
    ++pos_;
    return v;
  }

  TomlValue array_value() {
    ++pos_;
    TomlValue v;
    v.type = TomlValue::Type::Array;
    skip_ws();
    if (pos_ < s_.size() && s_[pos_] == ']') {
      ++pos_;
      return v;
    }
    while (true) {
      v.items.push_back(value());
      if (v.items.back().type == TomlValue::Type::Array) fail("nested arrays are not supported");
      skip_ws();
      if (pos_ >= s_.size()) fail("unterminated array");
      if (s_[pos_] == ',') {
        ++pos_;
        skip_ws();
        if (pos_ < s_.size() && s_[pos_] == ']') {
          ++pos_;
          return v;
        }
        continue;
      }
      if (s_[pos_] == ']') {
        ++pos_;
        return v;
      }
      fail("expected ',' or ']' in array");
    }
  }

  TomlValue number_value() {
    const std::size_t start = pos_;
    while (pos_ < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[pos_])) ||
                                s_[pos_] == '+' || s_[pos_] == '-' || s_[pos_] == '.' ||
                                s_[pos_] == '_')) {
      ++pos_;
    }
    std::string tok = s_.substr(start, pos_ - start);
    tok.erase(std::remove(tok.begin(), tok.end(), '_'), tok.end());
    if (tok.empty()) fail("expected a value");
    TomlValue v;
    if (tok == "inf" || tok == "+inf" || tok == "-inf" || tok == "nan") {
      v.type = TomlValue::Type::Float;
      v.d = std::strtod(tok.c_str(), nullptr);
      return v;
    }
    const bool is_float = tok.find_first_of(".eE") != std::string::npos;
    if (!is_float) {
      const char* b = tok.data() + (tok[0] == '+' ? 1 : 0);
      auto [p, ec] = std::from_chars(b, tok.data() + tok.size(), v.i);
      if (ec != std::errc() || p != tok.data() + tok.size()) fail("bad integer '" + tok + "'");
      v.type = TomlValue::Type::Int;
      return v;
    }
    char* end = nullptr;
    v.d = std::strtod(tok.c_str(), &end);
    if (end != tok.c_str() + tok.size()) fail("bad number '" + tok + "'");
    v.type = TomlValue::Type::Float;
    return v;
  }

  const std::string& s_;
  std::size_t pos_ = 0;
  int line_;
  const std::string& origin_;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

TomlDocument parse_toml(const std::string& text, const std::string& origin) {
  TomlDocument doc;
  std::istringstream is(text);
  std::string raw, section;
  int lineno = 0;
  while (std::getline(is, raw)) {
    ++lineno;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#') continue;
    if (line[0] == '[') {
      const auto close = line.find(']');
      if (close == std::string::npos) {
        throw ConfigError(origin + ":" + std::to_string(lineno) + ": unterminated section header");
      }
      section = trim(line.substr(1, close - 1));
      if (section.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty section name");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected key = value");
    }
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    const std::string rest = line.substr(eq + 1);
    TomlParser p(rest, lineno, origin);
    TomlValue v = p.value();
    p.expect_end();
    const std::string full = section.empty() ? key : section + "." + key;
    if (doc.values.count(full)) {
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": duplicate key '" + full + "'");
    }
    doc.order.push_back(full);
    doc.values[full] = std::move(v);
    doc.lines[full] = lineno;
  }
  return doc;
}

// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (!(lr_init > 0.0) || !(lr_final >= 0.0) || lr_final > lr_init) {
    throw ConfigError("train: need 0 <= lr_final <= lr_init and lr_init > 0");
  }
  if (batch_size <= 0) throw ConfigError("train: batch_size must be positive");
  if (iterations <= 0) throw ConfigError("train: iterations must be positive");
  if (crop_size <= 0 || crop_size % kSpatialMultiple != 0) {
    throw ConfigError("train: crop_size must be a positive multiple of 16");
  }
  if (checkpoint_every < 0 || log_every <= 0) {
    throw ConfigError("train: checkpoint_every >= 0 and log_every > 0 required");
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0)) {
    throw ConfigError("adam: betas in [0,1) and eps > 0 required");
  }
}

void RunConfig::validate() const {
  try {
    model.validate();
    loss.validate();
    haze.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  train.validate();
  if (threads <= 0) throw ConfigError("threads must be positive");
}

namespace {

struct Field {
  const char* key;
  std::function<void(RunConfig&, const TomlValue&)> set;
  std::function<std::string(const RunConfig&)> get;
};

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

std::string str_of(const TomlValue& v) {
  if (v.type != TomlValue::Type::String) throw ConfigError("expected a string");
  return v.s;
}

bool bool_of(const TomlValue& v) {
  if (v.type != TomlValue::Type::Bool) throw ConfigError("expected true or false");
  return v.b;
}

int int_of(const TomlValue& v) {
  const auto i = v.as_int();
  if (i < INT32_MIN || i > INT32_MAX) throw ConfigError("integer out of range");
  return static_cast<int>(i);
}

std::vector<int> ints_of(const TomlValue& v) {
  if (v.type != TomlValue::Type::Array) throw ConfigError("expected an array of integers");
  std::vector<int> out;
  for (const auto& x : v.items) out.push_back(int_of(x));
  return out;
}

std::vector<double> doubles_of(const TomlValue& v) {
  if (v.type != TomlValue::Type::Array) throw ConfigError("expected an array of numbers");
  std::vector<double> out;
  for (const auto& x : v.items) out.push_back(x.as_double());
  return out;
}

template <typename T, typename F>
std::string list(const std::vector<T>& xs, F fmt) {
  std::string s = "[";
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? ", " : "") + fmt(xs[i]);
  return s + "]";
}

std::string ints(const std::vector<int>& xs) {
  return list(xs, [](int v) { return std::to_string(v); });
}

std::string doubles(const std::vector<double>& xs) { return list(xs, format_double); }

std::string boolean(bool b) { return b ? "true" : "false"; }

const std::vector<Field>& fields() {
  static const std::vector<Field> kFields = {
      {"model.channels", [](RunConfig& c, const TomlValue& v) { c.model.channels = int_of(v); },
       [](const RunConfig& c) { return std::to_string(c.model.channels); }},
      {"model.depths",
       [](RunConfig& c, const TomlValue& v) {
         const auto d = ints_of(v);
         if (d.size() != 5) throw ConfigError("model.depths needs exactly 5 entries");
         std::copy(d.begin(), d.end(), c.model.depths.begin());
       },
       [](const RunConfig& c) {
         return ints(std::vector<int>(c.model.depths.begin(), c.model.depths.end()));
       }},
      {"model.encoder_block",
       [](RunConfig& c, const TomlValue& v) { c.model.encoder_kind = parse_block_kind(str_of(v)); },
       [](const RunConfig& c) { return quote(std::string(block_kind_name(c.model.encoder_kind))); }},
      {"model.bottleneck_block",
       [](RunConfig& c, const TomlValue& v) { c.model.bottleneck_kind = parse_block_kind(str_of(v)); },
       [](const RunConfig& c) { return quote(std::string(block_kind_name(c.model.bottleneck_kind))); }},
      {"model.decoder_block",
       [](RunConfig& c, const TomlValue& v) { c.model.decoder_kind = parse_block_kind(str_of(v)); },
       [](const RunConfig& c) { return quote(std::string(block_kind_name(c.model.decoder_kind))); }},
      {"model.ca_reduction", [](RunConfig& c, const TomlValue& v) { c.model.ca_reduction = int_of(v); },
       [](const RunConfig& c) { return std::to_string(c.model.ca_reduction); }},
      {"model.attention",
       [](RunConfig& c, const TomlValue& v) { c.model.attention = parse_attention_kind(str_of(v)); },
       [](const RunConfig& c) { return quote(std::string(attention_kind_name(c.model.attention))); }},
      {"model.sampler",
       [](RunConfig& c, const TomlValue& v) { c.model.sampler.kind = parse_sampler_kind(str_of(v)); },
       [](const RunConfig& c) { return quote(std::string(sampler_kind_name(c.model.sampler.kind))); }},
      {"model.spp_sizes", [](RunConfig& c, const TomlValue& v) { c.model.sampler.spp_sizes = ints_of(v); },
       [](const RunConfig& c) { return ints(c.model.sampler.spp_sizes); }},
      {"model.spds_factors",
       [](RunConfig& c, const TomlValue& v) { c.model.sampler.spds_factors = ints_of(v); },
       [](const RunConfig& c) { return ints(c.model.sampler.spds_factors); }},
      {"model.embed_channels", [](RunConfig& c, const TomlValue& v) { c.model.embed_channels = int_of(v); },
       [](const RunConfig& c) { return std::to_string(c.model.embed_channels); }},
      {"model.recursion",
       [](RunConfig& c, const TomlValue& v) { c.model.recursion = parse_recursion(str_of(v)); },
       [](const RunConfig& c) { return quote(std::string(recursion_name(c.model.recursion))); }},
      {"model.global_residual",
       [](RunConfig& c, const TomlValue& v) { c.model.global_residual = bool_of(v); },
       [](const RunConfig& c) { return boolean(c.model.global_residual); }},

      {"train.lr_init", [](RunConfig& c, const TomlValue& v) { c.train.lr_init = v.as_double(); },
       [](const RunConfig& c) { return format_double(c.train.lr_init); }},
      {"train.lr_final", [](RunConfig& c, const TomlValue& v) { c.train.lr_final = v.as_double(); },
       [](const RunConfig& c) { return format_double(c.train.lr_final); }},
      {"train.batch_size", [](RunConfig& c, const TomlValue& v) { c.train.batch_size = int_of(v); },
       [](const RunConfig& c) { return std::to_string(c.train.batch_size); }},
      {"train.iterations", [](RunConfig& c, const TomlValue& v) { c.train.iterations = int_of(v); },
       [](const RunConfig& c) { return std::to_string(c.train.iterations); }},
      {"train.crop_size", [](RunConfig& c, const TomlValue& v) { c.train.crop_size = int_of(v); },
       [](const RunConfig& c) { return std::to_string(c.train.crop_size); }},
      {"train.rotate", [](RunConfig& c, const TomlValue& v) { c.train.rotate = bool_of(v); },
       [](const RunConfig& c) { return boolean(c.train.rotate); }},
      {"train.flip", [](RunConfig& c, const TomlValue& v) { c.train.flip = bool_of(v); },
       [](const RunConfig& c) { return boolean(c.train.flip); }},
      {"train.seed",
       [](RunConfig& c, const TomlValue& v) {
         if (v.as_int() < 0) throw ConfigError("seed must be non-negative");
         c.train.seed = static_cast<std::uint64_t>(v.as_int());
       },
       [](const RunConfig& c) { return std::to_string(c.train.seed); }},
      {"train.checkpoint_every",
       [](RunConfig& c, const TomlValue& v) { c.train.checkpoint_every = int_of(v); },
       [](const RunConfig& c) { return std::to_string(c.train.checkpoint_every); }},
      {"train.log_every", [](RunConfig& c, const TomlValue& v) { c.train.log_every = int_of(v); },
       [](const RunConfig& c) { return std::to_string(c.train.log_every); }},
      {"train.threads", [](RunConfig& c, const TomlValue& v) { c.threads = int_of(v); },
       [](const RunConfig& c) { return std::to_string(c.threads); }},

      {"adam.beta1", [](RunConfig& c, const TomlValue& v) { c.train.adam.beta1 = v.as_double(); },
       [](const RunConfig& c) { return format_double(c.train.adam.beta1); }},
      {"adam.beta2", [](RunConfig& c, const TomlValue& v) { c.train.adam.beta2 = v.as_double(); },
       [](const RunConfig& c) { return format_double(c.train.adam.beta2); }},
      {"adam.eps", [](RunConfig& c, const TomlValue& v) { c.train.adam.eps = v.as_double(); },
       [](const RunConfig& c) { return format_double(c.train.adam.eps); }},

      {"loss.cr",
       [](RunConfig& c, const TomlValue& v) {
         const double beta = c.loss.beta, eps = c.loss.epsilon;
         c.loss = CRConfig::make(parse_cr_variant(str_of(v)), beta);
         c.loss.epsilon = eps;
         if (c.loss.variant == CRVariant::None) c.loss.beta = 0.0;
       },
       [](const RunConfig& c) { return quote(std::string(cr_variant_name(c.loss.variant))); }},
      {"loss.beta", [](RunConfig& c, const TomlValue& v) { c.loss.beta = v.as_double(); },
       [](const RunConfig& c) { return format_double(c.loss.beta); }},
      {"loss.epsilon", [](RunConfig& c, const TomlValue& v) { c.loss.epsilon = v.as_double(); },
       [](const RunConfig& c) { return format_double(c.loss.epsilon); }},
      {"loss.taps", [](RunConfig& c, const TomlValue& v) { c.loss.taps = ints_of(v); },
       [](const RunConfig& c) { return ints(c.loss.taps); }},
      {"loss.weights", [](RunConfig& c, const TomlValue& v) { c.loss.weights = doubles_of(v); },
       [](const RunConfig& c) { return doubles(c.loss.weights); }},

      {"haze.a_min", [](RunConfig& c, const TomlValue& v) { c.haze.a_min = v.as_double(); },
       [](const RunConfig& c) { return format_double(c.haze.a_min); }},
      {"haze.a_max", [](RunConfig& c, const TomlValue& v) { c.haze.a_max = v.as_double(); },
       [](const RunConfig& c) { return format_double(c.haze.a_max); }},
      {"haze.beta_min", [](RunConfig& c, const TomlValue& v) { c.haze.beta_min = v.as_double(); },
       [](const RunConfig& c) { return format_double(c.haze.beta_min); }},
      {"haze.beta_max", [](RunConfig& c, const TomlValue& v) { c.haze.beta_max = v.as_double(); },
       [](const RunConfig& c) { return format_double(c.haze.beta_max); }},
      {"haze.smoothness", [](RunConfig& c, const TomlValue& v) { c.haze.smoothness = v.as_double(); },
       [](const RunConfig& c) { return format_double(c.haze.smoothness); }},
      {"haze.per_channel_A", [](RunConfig& c, const TomlValue& v) { c.haze.per_channel_A = bool_of(v); },
       [](const RunConfig& c) { return boolean(c.haze.per_channel_A); }},

      {"data.manifest", [](RunConfig& c, const TomlValue& v) { c.data.manifest = str_of(v); },
       [](const RunConfig& c) { return quote(c.data.manifest); }},
      {"data.proxy", [](RunConfig& c, const TomlValue& v) { c.data.proxy = str_of(v); },
       [](const RunConfig& c) { return quote(c.data.proxy); }},
      {"data.f32_sidecar", [](RunConfig& c, const TomlValue& v) { c.data.f32_sidecar = bool_of(v); },
       [](const RunConfig& c) { return boolean(c.data.f32_sidecar); }},
      {"data.eval_clamp", [](RunConfig& c, const TomlValue& v) { c.data.eval_clamp = bool_of(v); },
       [](const RunConfig& c) { return boolean(c.data.eval_clamp); }},
  };
  return kFields;
}

}  // namespace

RunConfig apply_toml(const RunConfig& base, const TomlDocument& doc) {
  RunConfig cfg = base;
  std::map<std::string, const Field*> by_key;
  for (const auto& f : fields()) by_key[f.key] = &f;
  for (const auto& k : doc.order) {
    if (!by_key.count(k)) {
      throw ConfigError("line " + std::to_string(doc.lines.at(k)) + ": unknown key '" + k + "'");
    }
  }
  // loss.cr resets taps and weights, so it must run before explicit overrides.
  std::vector<std::string> keys = doc.order;
  std::stable_partition(keys.begin(), keys.end(), [](const std::string& k) { return k == "loss.cr"; });
  for (const auto& k : keys) {
    try {
      by_key[k]->set(cfg, doc.values.at(k));
    } catch (const std::exception& e) {
      throw ConfigError("line " + std::to_string(doc.lines.at(k)) + ": " + k + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig parse_run_config(const std::string& text, const RunConfig& base) {
  return apply_toml(base, parse_toml(text));
}

RunConfig load_run_config(const std::filesystem::path& path, const RunConfig& base) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return apply_toml(base, parse_toml(ss.str(), path.string()));
  } catch (const ConfigError& e) {
    const std::string what = e.what();
    if (what.rfind(path.string(), 0) == 0) throw;
    throw ConfigError(path.string() + ": " + what);
  }
}

std::string emit_run_config(const RunConfig& cfg) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const std::string key = f.key;
    const auto dot = key.find('.');
    const std::string sec = key.substr(0, dot);
    if (sec != section) {
      out += (section.empty() ? "" : "\n") + std::string("[") + sec + "]\n";
      section = sec;
    }
    out += key.substr(dot + 1) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

}  // namespace mrfn
