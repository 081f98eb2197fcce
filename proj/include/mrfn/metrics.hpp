#pragma once

#include <limits>
#include <span>

#include "mrfn/image_io.hpp"

namespace mrfn {

constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// 10 log10(peak^2 / MSE) over all values; identical inputs give +inf.
double psnr(std::span<const float> a, std::span<const float> b, double peak = 1.0);
double psnr(const Image& a, const Image& b, double peak = 1.0);

struct SsimOptions {
  int window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

/// Single-scale SSIM of one plane (row-major h x w), Gaussian window with
/// mirrored borders (edge sample not repeated).
double ssim_plane(std::span<const float> a, std::span<const float> b, int h, int w,
                  const SsimOptions& opt = {});
/// Mean of the per-channel SSIM values.
double ssim(const Image& a, const Image& b, const SsimOptions& opt = {});

}  // namespace mrfn
