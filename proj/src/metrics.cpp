#include "mrfn/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace mrfn {

double psnr(std::span<const float> a, std::span<const float> b, double peak) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("psnr: size mismatch or empty input");
  double se = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    se += d * d;
  }
  if (se == 0.0) return kPsnrIdentical;
  const double mse = se / static_cast<double>(a.size());
  return 10.0 * std::log10(peak * peak / mse);
}

double psnr(const Image& a, const Image& b, double peak) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument("psnr: image sizes differ");
  }
  return psnr(std::span<const float>(a.data), std::span<const float>(b.data), peak);
}

namespace {

int mirror(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

/// Separable Gaussian filtering of a plane with mirrored borders.
std::vector<double> blur(const std::vector<double>& src, int h, int w, const std::vector<double>& k) {
  const int r = static_cast<int>(k.size() / 2);
  std::vector<double> tmp(src.size()), out(src.size());
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int j = -r; j <= r; ++j) s += k[j + r] * src[static_cast<std::size_t>(y) * w + mirror(x + j, w)];
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  }
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int j = -r; j <= r; ++j) s += k[j + r] * tmp[static_cast<std::size_t>(mirror(y + j, h)) * w + x];
      out[static_cast<std::size_t>(y) * w + x] = s;
    }
  }
  return out;
}

}  // namespace

double ssim_plane(std::span<const float> a, std::span<const float> b, int h, int w,
                  const SsimOptions& opt) {
  if (a.size() != b.size() || a.size() != static_cast<std::size_t>(h) * w) {
    throw std::invalid_argument("ssim: plane size mismatch");
  }
  if (h < opt.window || w < opt.window) {
    throw std::invalid_argument("ssim: image " + std::to_string(h) + "x" + std::to_string(w) +
                                " smaller than the " + std::to_string(opt.window) + "x" +
                                std::to_string(opt.window) + " window");
  }
  std::vector<double> k(opt.window);
  double ksum = 0.0;
  const int r = opt.window / 2;
  for (int i = 0; i < opt.window; ++i) {
    k[i] = std::exp(-0.5 * (i - r) * (i - r) / (opt.sigma * opt.sigma));
    ksum += k[i];
  }
  for (auto& v : k) v /= ksum;

  const std::size_t n = a.size();
  std::vector<double> x(n), y(n), xx(n), yy(n), xy(n);
  for (std::size_t i = 0; i < n; ++i) {
    x[i] = a[i];
    y[i] = b[i];
    xx[i] = x[i] * x[i];
    yy[i] = y[i] * y[i];
    xy[i] = x[i] * y[i];
  }
  const auto mx = blur(x, h, w, k), my = blur(y, h, w, k);
  const auto sxx = blur(xx, h, w, k), syy = blur(yy, h, w, k), sxy = blur(xy, h, w, k);
  const double c1 = std::pow(opt.k1 * opt.dynamic_range, 2);
  const double c2 = std::pow(opt.k2 * opt.dynamic_range, 2);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cov = sxy[i] - mx[i] * my[i];
    total += ((2 * mx[i] * my[i] + c1) * (2 * cov + c2)) /
             ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
  }
  return total / static_cast<double>(n);
}

double ssim(const Image& a, const Image& b, const SsimOptions& opt) {
  if (a.height != b.height || a.width != b.width) {
    throw std::invalid_argument("ssim: image sizes differ");
  }
  const std::size_t plane = a.plane();
  double s = 0.0;
  for (int c = 0; c < 3; ++c) {
    s += ssim_plane(std::span<const float>(a.data).subspan(c * plane, plane),
                    std::span<const float>(b.data).subspan(c * plane, plane), a.height, a.width, opt);
  }
  return s / 3.0;
}

}  // namespace mrfn
