#pragma once

#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mrfn::cli {

enum ExitCode : int {
  kOk = 0,
  kRuntimeError = 1,
  kUsageError = 2,
  kMissingProxy = 3,
  kNonFiniteLoss = 4,
};

/// Bad arguments or unusable inputs detected before any work starts.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingProxy : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Runs one command line (argv[0] is the program name) and returns its exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);
int run(int argc, char** argv);

std::string sha1_hex(std::string_view data);
/// Hash of the library sources this binary was built from.
std::string_view source_hash();

/// One cell of the ablation grid.
struct AblationCell {
  std::string block;
  std::string attention;  // none | nlb | cnlb+none | cnlb+spp | cnlb+spds
  std::string loss;
  std::string label() const;
};

std::vector<AblationCell> ablation_grid(const std::vector<std::string>& blocks,
                                        const std::vector<std::string>& attentions,
                                        const std::vector<std::string>& losses);

}  // namespace mrfn::cli
