#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mrfn/tensor.hpp"

namespace mrfn {

/// RGB image, planar CHW, values nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int h, int w, float value = 0.0f) : height(h), width(w), data(3ull * h * w, value) {}

  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::size_t plane() const { return static_cast<std::size_t>(height) * width; }
  bool operator==(const Image&) const = default;
};

class ImageError : public std::runtime_error {
 public:
  ImageError(const std::string& what, std::size_t offset)
      : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  explicit ImageError(const std::string& what)
      : std::runtime_error(what), offset_(static_cast<std::size_t>(-1)) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

Image decode_png(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_png(const Image& img);
Image decode_ppm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_ppm(const Image& img);

/// Format chosen by extension: .png or .ppm. Values are stored as round(255 v).
Image read_image(const std::filesystem::path& path);
void write_image(const std::filesystem::path& path, const Image& img);

/// Raw float32 sidecar (lossless), stored as a one-entry checkpoint table.
Image read_f32_image(const std::filesystem::path& path);
void write_f32_image(const std::filesystem::path& path, const Image& img);

/// Round every value to the nearest multiple of 1/255 after clamping to [0,1].
Image quantize8(const Image& img);

/// [1,3,H,W] tensor view of an image.
Tensor image_to_tensor(const Image& img, DType dtype = DType::F32);
/// Batch element `n` of an [N,3,H,W] tensor.
Image tensor_to_image(const Tensor& t, std::int64_t n = 0);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace mrfn
