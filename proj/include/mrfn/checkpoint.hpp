#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrfn/module.hpp"

namespace mrfn {

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, CorruptHeader, VersionMismatch, ParameterMismatch };

  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

constexpr std::uint32_t kCheckpointVersion = 1;

/// Ordered name -> tensor table as stored on disk (f32 payloads, little-endian).
struct TensorTable {
  std::vector<std::string> names;
  std::map<std::string, Tensor> tensors;

  void put(const std::string& name, const Tensor& t);
  bool contains(const std::string& name) const { return tensors.count(name) != 0; }
  const Tensor& get(const std::string& name) const;
};

void write_table(const std::filesystem::path& path, const TensorTable& table);
TensorTable read_table(const std::filesystem::path& path);

/// Extra entries (optimizer state, counters) live under names with a '/'
/// prefix so they never collide with module parameter names.
void save_checkpoint(Module& module, const std::filesystem::path& path,
                     const TensorTable& extras = {});

/// Copies stored parameters into `module`. Every module parameter must be
/// present with the right shape, and the file may not hold parameters the
/// module lacks; offenders are listed in the ParameterMismatch message.
/// Returns the extra (prefixed) entries.
TensorTable load_checkpoint(Module& module, const std::filesystem::path& path);

}  // namespace mrfn
