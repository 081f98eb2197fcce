#include "mrfn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace mrfn {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

void TensorTable::put(const std::string& name, const Tensor& t) {
  if (!contains(name)) names.push_back(name);
  tensors[name] = t;
}

const Tensor& TensorTable::get(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) {
    throw CheckpointError(CheckpointError::Kind::ParameterMismatch, "missing entry '" + name + "'");
  }
  return it->second;
}

namespace {

constexpr char kMagic[4] = {'M', 'R', 'F', 'N'};

template <typename T>
void put_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

  template <typename T>
  T get(const char* what) {
    T v;
    need(sizeof(T), what);
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void get_floats(float* dst, std::size_t n, const char* what) {
    need(n * sizeof(float), what);
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
  }

  bool at_end() const { return pos_ == bytes_.size(); }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                            origin_ + ": truncated while reading " + what + " at byte " +
                                std::to_string(pos_));
    }
  }

  const std::string& bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

void write_table(const std::filesystem::path& path, const TensorTable& table) {
  std::string out;
  out.append(kMagic, 4);
  put_raw<std::uint32_t>(out, kCheckpointVersion);
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(table.names.size()));
  for (const auto& name : table.names) {
    const Tensor& t = table.get(name);
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_raw<std::uint8_t>(out, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put_raw<std::uint64_t>(out, static_cast<std::uint64_t>(d));
    const Tensor f = t.dtype() == DType::F32 ? t : t.to(DType::F32);
    const auto data = f.data<float>();
    out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(float));
  }
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError(CheckpointError::Kind::Io, "cannot open " + tmp + " for writing");
    os.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!os) throw CheckpointError(CheckpointError::Kind::Io, "write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw CheckpointError(CheckpointError::Kind::Io, "cannot rename " + tmp + ": " + ec.message());
}

TensorTable read_table(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError(CheckpointError::Kind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  const std::string bytes = ss.str();
  Reader r(bytes, path.string());

  const std::string magic = r.get_string(4, "magic");
  if (std::memcmp(magic.data(), kMagic, 4) != 0) {
    throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                          path.string() + ": bad magic, not a checkpoint");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointError::Kind::VersionMismatch,
                          path.string() + ": version " + std::to_string(version) +
                              ", expected " + std::to_string(kCheckpointVersion));
  }
  const auto count = r.get<std::uint32_t>("entry count");
  TensorTable table;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto len = r.get<std::uint32_t>("name length");
    if (len == 0 || len > 4096) {
      throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                            path.string() + ": implausible name length " + std::to_string(len) +
                                " at byte " + std::to_string(r.pos() - 4));
    }
    std::string name = r.get_string(len, "name");
    const auto rank = r.get<std::uint8_t>("rank");
    if (rank > 8) {
      throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                            path.string() + ": implausible rank for '" + name + "'");
    }
    Shape shape;
    std::uint64_t numel = 1;
    for (int d = 0; d < rank; ++d) {
      const auto dim = r.get<std::uint64_t>("dims");
      if (dim == 0 || dim > (1ull << 32)) {
        throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                              path.string() + ": bad dimension for '" + name + "'");
      }
      shape.push_back(static_cast<std::int64_t>(dim));
      numel *= dim;
      if (numel > (1ull << 34)) {
        throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                              path.string() + ": entry '" + name + "' too large");
      }
    }
    std::vector<float> data(numel);
    r.get_floats(data.data(), data.size(), "payload");
    if (table.contains(name)) {
      throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                            path.string() + ": duplicate entry '" + name + "'");
    }
    table.put(name, Tensor::from_storage(shape, Storage(std::move(data))));
  }
  if (!r.at_end()) {
    throw CheckpointError(CheckpointError::Kind::CorruptHeader,
                          path.string() + ": trailing bytes after entry " + std::to_string(count));
  }
  return table;
}

void save_checkpoint(Module& module, const std::filesystem::path& path, const TensorTable& extras) {
  TensorTable table;
  for (auto& [name, p] : module.named_parameters()) table.put(name, p);
  for (const auto& name : extras.names) {
    if (table.contains(name)) {
      throw CheckpointError(CheckpointError::Kind::ParameterMismatch,
                            "extra entry '" + name + "' collides with a parameter");
    }
    table.put(name, extras.get(name));
  }
  write_table(path, table);
}

TensorTable load_checkpoint(Module& module, const std::filesystem::path& path) {
  const TensorTable table = read_table(path);
  auto params = module.named_parameters();
  std::vector<std::string> missing, wrong_shape, unexpected;
  std::map<std::string, bool> known;
  for (auto& [name, p] : params) {
    known[name] = true;
    auto it = table.tensors.find(name);
    if (it == table.tensors.end()) {
      missing.push_back(name);
    } else if (it->second.shape() != p.shape()) {
      wrong_shape.push_back(name + " " + shape_str(it->second.shape()) + " vs " +
                            shape_str(p.shape()));
    }
  }
  TensorTable extras;
  for (const auto& name : table.names) {
    if (known.count(name)) continue;
    if (name.find('/') != std::string::npos) {
      extras.put(name, table.get(name));
    } else {
      unexpected.push_back(name);
    }
  }
  if (!missing.empty() || !wrong_shape.empty() || !unexpected.empty()) {
    std::string msg = path.string() + ": parameter mismatch";
    auto list = [&msg](const char* label, const std::vector<std::string>& xs) {
      if (xs.empty()) return;
      msg += std::string("; ") + label + ":";
      for (const auto& x : xs) msg += " " + x;
    };
    list("missing", missing);
    list("shape", wrong_shape);
    list("unexpected", unexpected);
    throw CheckpointError(CheckpointError::Kind::ParameterMismatch, msg);
  }
  for (auto& [name, p] : params) p.copy_from(table.get(name));
  return extras;
}

}  // namespace mrfn
