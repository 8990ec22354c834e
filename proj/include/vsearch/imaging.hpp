#pragma once

// Image decoding, sRGB -> CIE Lab conversion and the dyadic Lab pyramid.

#include <algorithm>
#include <array>
#include <cmath>
#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <jpeglib.h>
#include <png.h>

#include "vsearch/detail/bytes.hpp"
#include "vsearch/error.hpp"

namespace vsearch {

/// Smallest side accepted for feature extraction (one descriptor patch).
inline constexpr int kMinImageSide = 32;

/// Row-major interleaved 8-bit sRGB raster.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // 3 * width * height

  RgbImage() = default;
  RgbImage(int w, int h) : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, 0) {}

  std::uint8_t* at(int x, int y) { return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const std::uint8_t* at(int x, int y) const {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }

  friend bool operator==(const RgbImage&, const RgbImage&) = default;
};

enum class LabChannel { kL = 0, kA = 1, kB = 2 };
inline constexpr int kLabChannels = 3;

/// Planar CIE Lab image with every channel affinely normalized to [0,1].
struct LabImage {
  int width = 0;
  int height = 0;
  std::array<std::vector<float>, kLabChannels> planes;

  LabImage() = default;
  LabImage(int w, int h) : width(w), height(h) {
    for (auto& p : planes) p.assign(static_cast<std::size_t>(w) * h, 0.0f);
  }

  std::span<const float> channel(int c) const { return planes[c]; }
  std::span<float> channel(int c) { return planes[c]; }
  float at(int c, int x, int y) const { return planes[c][static_cast<std::size_t>(y) * width + x]; }
};

inline constexpr int kPyramidLevels = 4;

struct LabPyramid {
  std::array<LabImage, kPyramidLevels> levels;
};

namespace detail {

inline bool is_png(std::span<const std::uint8_t> b) {
  static constexpr std::uint8_t kSig[8] = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
  return b.size() >= 8 && std::equal(kSig, kSig + 8, b.begin());
}

inline bool is_jpeg(std::span<const std::uint8_t> b) {
  return b.size() >= 3 && b[0] == 0xff && b[1] == 0xd8 && b[2] == 0xff;
}

inline RgbImage decode_png(std::span<const std::uint8_t> bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw Error(ErrorCode::kDecodeError, std::string("png: ") + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  RgbImage out(static_cast<int>(image.width), static_cast<int>(image.height));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string message = image.message;
    png_image_free(&image);
    throw Error(ErrorCode::kDecodeError, "png: " + message);
  }
  return out;
}

struct JpegState {
  jpeg_decompress_struct cinfo{};
  jpeg_error_mgr err{};
  std::jmp_buf jump{};
  char message[JMSG_LENGTH_MAX] = {};
  bool created = false;
  std::vector<std::uint8_t> pixels;

  ~JpegState() {
    if (created) jpeg_destroy_decompress(&cinfo);
  }
};

extern "C" inline void vsearch_jpeg_error_exit(j_common_ptr cinfo) {
  auto* state = reinterpret_cast<JpegState*>(cinfo->client_data);
  (*cinfo->err->format_message)(cinfo, state->message);
  std::longjmp(state->jump, 1);
}

// Corrupt-data warnings (e.g. premature end of data) are promoted to errors.
extern "C" inline void vsearch_jpeg_emit_message(j_common_ptr cinfo, int level) {
  if (level < 0) vsearch_jpeg_error_exit(cinfo);
}

inline RgbImage decode_jpeg(std::span<const std::uint8_t> bytes) {
  auto state = std::make_unique<JpegState>();
  JpegState* s = state.get();
  s->cinfo.err = jpeg_std_error(&s->err);
  s->err.error_exit = vsearch_jpeg_error_exit;
  s->err.emit_message = vsearch_jpeg_emit_message;
  s->cinfo.client_data = s;
  int width = 0;
  int height = 0;
  if (setjmp(s->jump) != 0) {
    throw Error(ErrorCode::kDecodeError, std::string("jpeg: ") + s->message);
  }
  jpeg_create_decompress(&s->cinfo);
  s->created = true;
  jpeg_mem_src(&s->cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&s->cinfo, TRUE);
  s->cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&s->cinfo);
  width = static_cast<int>(s->cinfo.output_width);
  height = static_cast<int>(s->cinfo.output_height);
  s->pixels.resize(static_cast<std::size_t>(width) * height * 3);
  while (s->cinfo.output_scanline < s->cinfo.output_height) {
    JSAMPROW row = s->pixels.data() + static_cast<std::size_t>(s->cinfo.output_scanline) * width * 3;
    jpeg_read_scanlines(&s->cinfo, &row, 1);
  }
  jpeg_finish_decompress(&s->cinfo);
  RgbImage out;
  out.width = width;
  out.height = height;
  out.pixels = std::move(s->pixels);
  return out;
}

}  // namespace detail

/// Decodes a PNG or JPEG byte stream. Rejects images with a side below 32 px.
inline RgbImage decode_image(std::span<const std::uint8_t> bytes) {
  RgbImage img;
  if (detail::is_png(bytes)) {
    img = detail::decode_png(bytes);
  } else if (detail::is_jpeg(bytes)) {
    img = detail::decode_jpeg(bytes);
  } else {
    throw Error(ErrorCode::kDecodeError, "unsupported or unrecognised image format");
  }
  if (img.width < kMinImageSide || img.height < kMinImageSide) {
    throw Error(ErrorCode::kTooSmall, "image is " + std::to_string(img.width) + "x" +
                                          std::to_string(img.height) + ", need at least 32x32");
  }
  return img;
}

inline RgbImage decode_image(std::string_view bytes) {
  return decode_image(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
}

/// PNG encoder, used by tooling and tests to produce corpora.
inline std::vector<std::uint8_t> encode_png(const RgbImage& img) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width);
  image.height = static_cast<png_uint_32>(img.height);
  image.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, img.pixels.data(), 0, nullptr)) {
    throw Error(ErrorCode::kIoError, std::string("png encode: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
    throw Error(ErrorCode::kIoError, std::string("png encode: ") + image.message);
  }
  out.resize(size);
  return out;
}

/// Hex SHA-256 over (width, height, pixels); keys detector fixtures.
inline std::string content_hash(const RgbImage& img) {
  detail::ByteWriter w;
  w.u64(static_cast<std::uint64_t>(img.width));
  w.u64(static_cast<std::uint64_t>(img.height));
  w.raw(img.pixels);
  return detail::to_hex(detail::sha256(w.bytes()));
}

struct Lab {
  double l = 0, a = 0, b = 0;
};

// Fixed affine normalization ranges.
inline constexpr double kLabLMax = 100.0;
inline constexpr double kLabAbMin = -128.0;
inline constexpr double kLabAbMax = 127.0;

/// sRGB (D65) to unnormalized CIE Lab.
inline Lab srgb_to_lab(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
  auto linear = [](std::uint8_t v) {
    const double c = v / 255.0;
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
  };
  const double r = linear(r8), g = linear(g8), b = linear(b8);
  const double x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
  const double y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
  const double z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
  constexpr double kXn = 0.95047, kYn = 1.0, kZn = 1.08883;
  auto f = [](double t) {
    constexpr double kDelta = 6.0 / 29.0;
    return t > kDelta * kDelta * kDelta ? std::cbrt(t) : t / (3 * kDelta * kDelta) + 4.0 / 29.0;
  };
  const double fx = f(x / kXn), fy = f(y / kYn), fz = f(z / kZn);
  return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

inline std::array<float, 3> normalize_lab(const Lab& lab) {
  auto unit = [](double v, double lo, double hi) {
    return static_cast<float>(std::clamp((v - lo) / (hi - lo), 0.0, 1.0));
  };
  return {unit(lab.l, 0.0, kLabLMax), unit(lab.a, kLabAbMin, kLabAbMax),
          unit(lab.b, kLabAbMin, kLabAbMax)};
}

inline LabImage rgb_to_lab(const RgbImage& img) {
  LabImage out(img.width, img.height);
  const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
  for (std::size_t i = 0; i < n; ++i) {
    const auto* p = img.pixels.data() + i * 3;
    const auto lab = normalize_lab(srgb_to_lab(p[0], p[1], p[2]));
    for (int c = 0; c < kLabChannels; ++c) out.planes[c][i] = lab[c];
  }
  return out;
}

/// Factor-2 downsample by 2x2 mean; trailing odd rows/columns average what exists.
inline LabImage downsample(const LabImage& src) {
  const int w = (src.width + 1) / 2;
  const int h = (src.height + 1) / 2;
  LabImage out(w, h);
  for (int c = 0; c < kLabChannels; ++c) {
    const auto& in = src.planes[c];
    auto& dst = out.planes[c];
    for (int y = 0; y < h; ++y) {
      const int y0 = 2 * y;
      const int y1 = std::min(y0 + 1, src.height - 1);
      for (int x = 0; x < w; ++x) {
        const int x0 = 2 * x;
        const int x1 = std::min(x0 + 1, src.width - 1);
        double sum = 0;
        int count = 0;
        for (int yy = y0; yy <= y1; ++yy) {
          for (int xx = x0; xx <= x1; ++xx) {
            sum += in[static_cast<std::size_t>(yy) * src.width + xx];
            ++count;
          }
        }
        dst[static_cast<std::size_t>(y) * w + x] = static_cast<float>(sum / count);
      }
    }
  }
  return out;
}

inline LabPyramid build_pyramid(LabImage img) {
  LabPyramid pyr;
  pyr.levels[0] = std::move(img);
  for (int i = 1; i < kPyramidLevels; ++i) pyr.levels[i] = downsample(pyr.levels[i - 1]);
  return pyr;
}

}  // namespace vsearch
