#include "mrfn/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>

#include "mrfn/checkpoint.hpp"
#include "mrfn/ops.hpp"

namespace mrfn {

namespace {

std::uint8_t to_byte(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

struct PngSource {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;
  std::string error;
};

void png_read_mem(png_structp png, png_bytep out, png_size_t n) {
  auto* src = static_cast<PngSource*>(png_get_io_ptr(png));
  if (src->bytes.size() - src->pos < n) {
    src->error = "truncated PNG stream";
    png_error(png, "truncated");
  }
  std::memcpy(out, src->bytes.data() + src->pos, n);
  src->pos += n;
}

void png_on_error(png_structp png, png_const_charp msg) {
  auto* src = static_cast<PngSource*>(png_get_error_ptr(png));
  if (src->error.empty()) src->error = msg;
  png_longjmp(png, 1);
}

void png_on_warning(png_structp, png_const_charp) {}

void png_write_mem(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + n);
}

void png_flush_mem(png_structp) {}

}  // namespace

Image decode_png(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) {
    throw ImageError("not a PNG file (bad signature)", 0);
  }
  PngSource src{bytes, 0, {}};
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &src, png_on_error, png_on_warning);
  if (png == nullptr) throw ImageError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw ImageError("libpng initialisation failed");
  }
  // Only trivially destructible locals may live across setjmp.
  std::vector<std::uint8_t>* rows_storage = new std::vector<std::uint8_t>();
  std::vector<png_bytep>* row_ptrs = new std::vector<png_bytep>();
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    delete rows_storage;
    delete row_ptrs;
    throw ImageError("PNG parse error: " + src.error, src.pos);
  }
  png_set_read_fn(png, &src, png_read_mem);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_palette_to_rgb(png);
  png_set_expand_gray_1_2_4_to_8(png);
  png_set_gray_to_rgb(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  if (rowbytes != 3ull * w) png_error(png, "unsupported PNG pixel layout");
  rows_storage->resize(rowbytes * h);
  row_ptrs->resize(h);
  for (png_uint_32 y = 0; y < h; ++y) (*row_ptrs)[y] = rows_storage->data() + y * rowbytes;
  png_read_image(png, row_ptrs->data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);

  Image img(static_cast<int>(h), static_cast<int>(w));
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        img.at(c, y, x) = (*rows_storage)[static_cast<std::size_t>(y) * rowbytes + 3 * x + c] / 255.0f;
      }
    }
  }
  delete rows_storage;
  delete row_ptrs;
  return img;
}

std::vector<std::uint8_t> encode_png(const Image& img) {
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw ImageError("libpng initialisation failed");
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> rows(static_cast<std::size_t>(img.height) * img.width * 3);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        rows[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] = to_byte(img.at(c, y, x));
      }
    }
  }
  if (info == nullptr || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw ImageError("PNG encode failed");
  }
  png_set_write_fn(png, &out, png_write_mem, png_flush_mem);
  png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    png_write_row(png, rows.data() + static_cast<std::size_t>(y) * img.width * 3);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

namespace {

class PpmCursor {
 public:
  explicit PpmCursor(std::span<const std::uint8_t> b) : b_(b) {}

  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      if (b_[pos_] == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n') ++pos_;
      } else if (std::isspace(b_[pos_])) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  long number(const char* what) {
    skip_space_and_comments();
    const std::size_t start = pos_;
    long v = 0;
    while (pos_ < b_.size() && std::isdigit(b_[pos_])) {
      v = v * 10 + (b_[pos_] - '0');
      if (v > 1'000'000) throw ImageError(std::string("PPM ") + what + " too large", start);
      ++pos_;
    }
    if (pos_ == start) throw ImageError(std::string("PPM: expected ") + what, start);
    return v;
  }

  std::size_t& p() { return pos_; }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

Image decode_ppm(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') {
    throw ImageError("not a binary PPM (expected P6 magic)", 0);
  }
  PpmCursor cur(bytes);
  cur.p() = 2;
  const long w = cur.number("width");
  const long h = cur.number("height");
  cur.skip_space_and_comments();
  const std::size_t maxval_at = cur.p();
  const long maxval = cur.number("max value");
  if (w <= 0 || h <= 0) throw ImageError("PPM dimensions must be positive", maxval_at);
  if (maxval != 255) {
    throw ImageError("unsupported PPM max value " + std::to_string(maxval) + " (only 255)",
                     maxval_at);
  }
  if (cur.p() >= bytes.size() || !std::isspace(bytes[cur.p()])) {
    throw ImageError("PPM header not terminated by whitespace", cur.p());
  }
  ++cur.p();
  const std::size_t need = static_cast<std::size_t>(w) * h * 3;
  if (bytes.size() - cur.p() < need) {
    throw ImageError("truncated PPM pixel data: need " + std::to_string(need) + " bytes, have " +
                         std::to_string(bytes.size() - cur.p()),
                     bytes.size());
  }
  Image img(static_cast<int>(h), static_cast<int>(w));
  const std::uint8_t* px = bytes.data() + cur.p();
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = px[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0f;
    }
  }
  return img;
}

std::vector<std::uint8_t> encode_ppm(const Image& img) {
  const std::string header =
      "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(out.size() + img.data.size());
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      for (int c = 0; c < 3; ++c) out.push_back(to_byte(img.at(c, y, x)));
    }
  }
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ImageError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ImageError("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw ImageError("write failed: " + path.string());
}

namespace {

std::string lower_ext(const std::filesystem::path& path) {
  std::string ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext;
}

}  // namespace

Image read_image(const std::filesystem::path& path) {
  const auto ext = lower_ext(path);
  const auto bytes = read_file(path);
  try {
    if (ext == ".png") return decode_png(bytes);
    if (ext == ".ppm") return decode_ppm(bytes);
  } catch (const ImageError& e) {
    throw ImageError(path.string() + ": " + e.what());
  }
  throw ImageError(path.string() + ": unsupported image extension '" + ext + "'");
}

void write_image(const std::filesystem::path& path, const Image& img) {
  const auto ext = lower_ext(path);
  if (ext == ".png") return write_file(path, encode_png(img));
  if (ext == ".ppm") return write_file(path, encode_ppm(img));
  throw ImageError(path.string() + ": unsupported image extension '" + ext + "'");
}

Image read_f32_image(const std::filesystem::path& path) {
  const TensorTable table = read_table(path);
  const Tensor& t = table.get("image");
  if (t.rank() != 3 || t.dim(0) != 3) {
    throw ImageError(path.string() + ": sidecar is not a [3,H,W] image");
  }
  Image img(static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)));
  const auto d = t.data<float>();
  std::copy(d.begin(), d.end(), img.data.begin());
  return img;
}

void write_f32_image(const std::filesystem::path& path, const Image& img) {
  TensorTable table;
  table.put("image", Tensor::from_storage({3, img.height, img.width}, Storage(img.data)));
  write_table(path, table);
}

Image quantize8(const Image& img) {
  Image out = img;
  for (auto& v : out.data) v = to_byte(v) / 255.0f;
  return out;
}

Tensor image_to_tensor(const Image& img, DType dtype) {
  Tensor t = Tensor::from_storage({1, 3, img.height, img.width}, Storage(img.data));
  return dtype == DType::F32 ? t : t.to(dtype);
}

Image tensor_to_image(const Tensor& t, std::int64_t n) {
  if (t.rank() != 4 || t.dim(1) != 3) {
    throw ShapeError("tensor_to_image: expected [N,3,H,W], got " + shape_str(t.shape()));
  }
  const Tensor item = batch_item(t, n).to(DType::F32);
  Image img(static_cast<int>(t.dim(2)), static_cast<int>(t.dim(3)));
  const auto d = item.data<float>();
  std::copy(d.begin(), d.end(), img.data.begin());
  return img;
}

}  // namespace mrfn
