#include "mrfn/module.hpp"

#include <cmath>

namespace mrfn {

std::vector<std::pair<std::string, Tensor>> Module::named_parameters() {
  std::vector<std::pair<std::string, Tensor>> out;
  visit("", [&](const std::string& name, Tensor& p) { out.emplace_back(name, p); });
  return out;
}

std::vector<Tensor> Module::parameters() {
  std::vector<Tensor> out;
  visit("", [&](const std::string&, Tensor& p) { out.push_back(p); });
  return out;
}

std::int64_t Module::parameter_count() {
  std::int64_t n = 0;
  visit("", [&](const std::string&, Tensor& p) { n += p.numel(); });
  return n;
}

void Module::zero_grad() {
  visit("", [](const std::string&, Tensor& p) { p.zero_grad(); });
}

void Module::set_trainable(bool trainable) {
  visit("", [trainable](const std::string&, Tensor& p) { p.set_requires_grad(trainable); });
}

namespace {

void fill_uniform(Tensor& t, std::mt19937_64& rng, double bound) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  dispatch(t.dtype(), [&]<typename T>() {
    for (auto& v : t.data<T>()) v = static_cast<T>(dist(rng));
  });
}

}  // namespace

Conv2d::Conv2d(const ConvSpec& spec, DType dtype) : spec_(spec) {
  spec_.validate();
  weight = Tensor::zeros(spec_.weight_shape(), dtype, true);
  if (spec_.has_bias) bias = Tensor::zeros({spec_.out_ch}, dtype, true);
}

void Conv2d::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(join_name(prefix, "weight"), weight);
  if (bias.defined()) fn(join_name(prefix, "bias"), bias);
}

void Conv2d::init(std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(spec_.in_ch) * spec_.kernel * spec_.kernel;
  fill_uniform(weight, rng, 1.0 / std::sqrt(fan_in));
  if (bias.defined()) fill_uniform(bias, rng, 1.0 / std::sqrt(fan_in));
}

ConvTranspose2d::ConvTranspose2d(const ConvSpec& spec, DType dtype) : spec_(spec) {
  spec_.validate();
  weight = Tensor::zeros(spec_.transposed_weight_shape(), dtype, true);
  if (spec_.has_bias) bias = Tensor::zeros({spec_.out_ch}, dtype, true);
}

void ConvTranspose2d::visit(const std::string& prefix, const ParamVisitor& fn) {
  fn(join_name(prefix, "weight"), weight);
  if (bias.defined()) fn(join_name(prefix, "bias"), bias);
}

void ConvTranspose2d::init(std::mt19937_64& rng) {
  // Each output pixel sees in_ch * (kernel / stride)^2 taps.
  const double taps = static_cast<double>(spec_.kernel) / spec_.stride;
  const double fan_in = static_cast<double>(spec_.in_ch) * taps * taps;
  fill_uniform(weight, rng, 1.0 / std::sqrt(fan_in));
  if (bias.defined()) fill_uniform(bias, rng, 1.0 / std::sqrt(fan_in));
}

}  // namespace mrfn
