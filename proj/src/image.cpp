#include "gwvlm/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include <openssl/evp.h>
#include <png.h>

#include "gwvlm/error.hpp"

namespace gwvlm {

namespace {

bool has_png_signature(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  return in.gcount() == 8 && png_sig_cmp(sig, 0, 8) == 0;
}

// Skips whitespace and '#' comments in a PNM header, then reads an integer.
int read_pnm_int(std::istream& in) {
  int c = in.peek();
  while (c != EOF) {
    if (c == '#') {
      std::string skip;
      std::getline(in, skip);
    } else if (std::isspace(c)) {
      in.get();
    } else {
      break;
    }
    c = in.peek();
  }
  int value = -1;
  in >> value;
  return value;
}

struct PpmHeader {
  int width = 0;
  int height = 0;
  int maxval = 0;
};

PpmHeader read_ppm_header(std::istream& in, const std::filesystem::path& path) {
  char magic[2] = {};
  in.read(magic, 2);
  if (in.gcount() != 2 || magic[0] != 'P' || magic[1] != '6') {
    throw Error(ErrorCode::kDecode, path.string() + " is neither PNG nor binary PPM");
  }
  PpmHeader h;
  h.width = read_pnm_int(in);
  h.height = read_pnm_int(in);
  h.maxval = read_pnm_int(in);
  if (h.width <= 0 || h.height <= 0 || h.maxval <= 0 || h.maxval > 255) {
    throw Error(ErrorCode::kDecode, "unsupported PPM header in " + path.string());
  }
  in.get();  // single whitespace before raster
  return h;
}

}  // namespace

Image load_image(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::kIo, "image file " + path.string() + " not found");
  }
  Image img;
  if (has_png_signature(path)) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
      throw Error(ErrorCode::kDecode, "cannot decode " + path.string() + ": " + png.message);
    }
    png.format = PNG_FORMAT_RGB;
    img.width = static_cast<int>(png.width);
    img.height = static_cast<int>(png.height);
    img.rgb.resize(PNG_IMAGE_SIZE(png));
    if (!png_image_finish_read(&png, nullptr, img.rgb.data(), 0, nullptr)) {
      png_image_free(&png);
      throw Error(ErrorCode::kDecode, "cannot decode " + path.string() + ": " + png.message);
    }
    return img;
  }

  std::ifstream in(path, std::ios::binary);
  const auto h = read_ppm_header(in, path);
  img.width = h.width;
  img.height = h.height;
  img.rgb.resize(static_cast<std::size_t>(h.width) * h.height * 3);
  in.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size())) {
    throw Error(ErrorCode::kDecode, "truncated PPM raster in " + path.string());
  }
  if (h.maxval != 255) {
    for (auto& v : img.rgb) v = static_cast<std::uint8_t>(v * 255 / h.maxval);
  }
  return img;
}

std::pair<int, int> image_size(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::kIo, "image file " + path.string() + " not found");
  }
  if (has_png_signature(path)) {
    png_image png;
    std::memset(&png, 0, sizeof(png));
    png.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&png, path.string().c_str())) {
      throw Error(ErrorCode::kDecode, "cannot decode " + path.string() + ": " + png.message);
    }
    std::pair<int, int> size{static_cast<int>(png.width), static_cast<int>(png.height)};
    png_image_free(&png);
    return size;
  }
  std::ifstream in(path, std::ios::binary);
  const auto h = read_ppm_header(in, path);
  return {h.width, h.height};
}

Image crop_image(const Image& image, const BBox& box) {
  const int x0 = std::clamp(static_cast<int>(std::floor(box.x1())), 0, image.width - 1);
  const int y0 = std::clamp(static_cast<int>(std::floor(box.y1())), 0, image.height - 1);
  const int x1 = std::clamp(static_cast<int>(std::ceil(box.x2())), x0 + 1, image.width);
  const int y1 = std::clamp(static_cast<int>(std::ceil(box.y2())), y0 + 1, image.height);
  Image out;
  out.width = x1 - x0;
  out.height = y1 - y0;
  out.rgb.resize(static_cast<std::size_t>(out.width) * out.height * 3);
  for (int y = 0; y < out.height; ++y) {
    const auto* src = &image.rgb[(static_cast<std::size_t>(y0 + y) * image.width + x0) * 3];
    std::copy(src, src + static_cast<std::ptrdiff_t>(out.width) * 3,
              &out.rgb[static_cast<std::size_t>(y) * out.width * 3]);
  }
  return out;
}

Image resize_bilinear(const Image& image, int width, int height) {
  if (width <= 0 || height <= 0 || image.width <= 0 || image.height <= 0) {
    throw Error(ErrorCode::kInvalidArgument, "resize needs non-empty source and target");
  }
  Image out;
  out.width = width;
  out.height = height;
  out.rgb.resize(static_cast<std::size_t>(width) * height * 3);
  const double sx = static_cast<double>(image.width) / width;
  const double sy = static_cast<double>(image.height) / height;
  for (int y = 0; y < height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, image.height - 1.0);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, image.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, image.width - 1.0);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, image.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = image.at(x0, y0, c) * (1 - wx) + image.at(x1, y0, c) * wx;
        const double bottom = image.at(x0, y1, c) * (1 - wx) + image.at(x1, y1, c) * wx;
        const double v = top * (1 - wy) + bottom * wy;
        out.rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c] =
            static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return out;
}

std::string encode_png(const Image& image) {
  png_image png;
  std::memset(&png, 0, sizeof(png));
  png.version = PNG_IMAGE_VERSION;
  png.width = static_cast<png_uint_32>(image.width);
  png.height = static_cast<png_uint_32>(image.height);
  png.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&png, nullptr, &size, 0, image.rgb.data(), 0, nullptr)) {
    throw Error(ErrorCode::kDecode, std::string("PNG encode failed: ") + png.message);
  }
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&png, out.data(), &size, 0, image.rgb.data(), 0, nullptr)) {
    throw Error(ErrorCode::kDecode, std::string("PNG encode failed: ") + png.message);
  }
  out.resize(size);
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  const std::string bytes = encode_png(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw Error(ErrorCode::kDecode, "base64 length not a multiple of 4");
  std::string out(3 * text.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw Error(ErrorCode::kDecode, "invalid base64");
  std::size_t len = static_cast<std::size_t>(n);
  if (!text.empty() && text.back() == '=') --len;
  if (text.size() >= 2 && text[text.size() - 2] == '=') --len;
  out.resize(len);
  return out;
}

}  // namespace gwvlm
