#include "mrfn/data.hpp"

#include <stdexcept>

#include "mrfn/ops.hpp"

namespace mrfn {

std::vector<ImagePair> load_pairs(const std::vector<ManifestEntry>& entries, bool prefer_f32) {
  std::vector<ImagePair> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    ImagePair p{e.id, read_image(e.clean_path),
                prefer_f32 && !e.hazy_f32_path.empty() ? read_f32_image(e.hazy_f32_path)
                                                        : read_image(e.hazy_path),
                e.params};
    if (p.clean.height != p.hazy.height || p.clean.width != p.hazy.width) {
      throw std::runtime_error("pair '" + e.id + "': clean and hazy sizes differ");
    }
    out.push_back(std::move(p));
  }
  return out;
}

Image crop_image(const Image& img, int y0, int x0, int h, int w) {
  if (y0 < 0 || x0 < 0 || y0 + h > img.height || x0 + w > img.width) {
    throw std::out_of_range("crop window outside image");
  }
  Image out(h, w);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
    }
  }
  return out;
}

Image dihedral(const Image& img, int code) {
  const int turns = code & 3;
  const bool flip = (code & 4) != 0;
  if (turns != 0 && img.height != img.width) throw std::invalid_argument("rotation needs a square image");
  const int n = img.height, m = img.width;
  Image out(n, m);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < m; ++x) {
        int sy = y, sx = flip ? m - 1 - x : x;
        for (int t = 0; t < turns; ++t) {
          const int ny = sx, nx = n - 1 - sy;  // quarter turn of the source coordinate
          sy = ny;
          sx = nx;
        }
        out.at(c, y, x) = img.at(c, sy, sx);
      }
    }
  }
  return out;
}

Batch sample_batch(const std::vector<ImagePair>& pairs, int batch, int crop, Augment augment,
                   std::mt19937_64& rng, DType dtype) {
  if (pairs.empty()) throw std::invalid_argument("no training pairs");
  if (batch <= 0 || crop <= 0) throw std::invalid_argument("batch and crop must be positive");
  std::vector<Tensor> hazy, clean;
  for (int b = 0; b < batch; ++b) {
    const auto& p = pairs[std::uniform_int_distribution<std::size_t>(0, pairs.size() - 1)(rng)];
    if (p.clean.height < crop || p.clean.width < crop) {
      throw std::invalid_argument("image '" + p.id + "' smaller than crop " + std::to_string(crop));
    }
    const int y0 = std::uniform_int_distribution<int>(0, p.clean.height - crop)(rng);
    const int x0 = std::uniform_int_distribution<int>(0, p.clean.width - crop)(rng);
    const int code = std::uniform_int_distribution<int>(0, 7)(rng) &
                     ((augment.rotate ? 3 : 0) | (augment.flip ? 4 : 0));
    hazy.push_back(image_to_tensor(dihedral(crop_image(p.hazy, y0, x0, crop, crop), code), dtype));
    clean.push_back(image_to_tensor(dihedral(crop_image(p.clean, y0, x0, crop, crop), code), dtype));
  }
  return {reshape(stack_batch(hazy), {batch, 3, crop, crop}),
          reshape(stack_batch(clean), {batch, 3, crop, crop})};
}

}  // namespace mrfn
