#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "mrfn/network.hpp"

namespace mrfn {

enum class FlopConvention { Macs, TwoMacs };

std::string_view flop_convention_name(FlopConvention c);
FlopConvention parse_flop_convention(std::string_view name);

/// One learnable layer (or attention matmul) of the analytic plan. Shared
/// blocks contribute their parameters once and their MACs once per application.
struct LayerCost {
  std::string name;
  std::string kind;  // conv, convT, matmul
  std::int64_t params = 0;
  std::int64_t macs = 0;  // summed over applications
  int applications = 1;
};

/// Closed-form layer list of the network on an h x w input (padded up to a
/// multiple of 16 exactly as the model does).
std::vector<LayerCost> layer_plan(const NetworkConfig& cfg, std::int64_t h, std::int64_t w);

std::int64_t count_params(const NetworkConfig& cfg);
std::int64_t count_flops(const NetworkConfig& cfg, std::int64_t h, std::int64_t w,
                         FlopConvention convention = FlopConvention::Macs);
/// MACs of the two attention matmuls only (Q K and softmax(.) V).
std::int64_t attention_macs(const NetworkConfig& cfg, std::int64_t h, std::int64_t w);

struct ActivationEstimate {
  std::int64_t peak_elements = 0;
  std::string peak_at;                  // op at which the peak occurs
  std::int64_t largest_tensor = 0;
  std::string largest_tensor_name;
  std::int64_t attention_map_elements = 0;  // one [n, S] similarity matrix
};

/// Forward-only liveness schedule of a batch-1 inference pass: each op's
/// output lives from its creation until its last consumer runs.
ActivationEstimate peak_activation_estimate(const NetworkConfig& cfg, std::int64_t h, std::int64_t w);

struct CostReport {
  std::string config_name;
  std::int64_t height = 0;
  std::int64_t width = 0;
  FlopConvention convention = FlopConvention::Macs;
  std::int64_t param_count = 0;
  std::int64_t flops = 0;
  ActivationEstimate activations;
  std::vector<LayerCost> rows;

  std::string to_table() const;
  /// One JSON object per row, then a "total" object.
  std::string to_jsonl() const;
};

CostReport make_cost_report(const NetworkConfig& cfg, std::int64_t h, std::int64_t w,
                            FlopConvention convention, const std::string& name = "");

}  // namespace mrfn
