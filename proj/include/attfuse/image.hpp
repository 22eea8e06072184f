#pragma once

// Interleaved raster images and binary PNM (PPM P6, PGM P5) I/O.

#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "attfuse/errors.hpp"

namespace attfuse {

template <class T>
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<T> data;  // row-major, channels interleaved

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c = 1, T fill = T{})
      : width(w), height(h), channels(c), data(w * h * c, fill) {}

  bool empty() const { return data.empty(); }
  T& at(std::size_t x, std::size_t y, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
  const T& at(std::size_t x, std::size_t y, std::size_t c = 0) const { return data[(y * width + x) * channels + c]; }

  bool operator==(const Image&) const = default;
};

using Image8 = Image<std::uint8_t>;
using Image16 = Image<std::uint16_t>;

namespace detail {

inline std::size_t pnm_header_value(std::istream& is, const std::string& path) {
  int ch = is.get();
  while (ch != EOF) {
    if (ch == '#') {
      while (ch != EOF && ch != '\n') ch = is.get();
    } else if (!std::isspace(ch)) {
      break;
    }
    ch = is.get();
  }
  std::size_t v = 0;
  bool any = false;
  while (ch != EOF && ch >= '0' && ch <= '9') {
    v = v * 10 + static_cast<std::size_t>(ch - '0');
    any = true;
    ch = is.get();
  }
  if (!any) throw DataError(path + ": malformed PNM header");
  // `ch` is the single whitespace byte that terminates the field.
  return v;
}

struct PnmHeader {
  char kind;  // '5' or '6'
  std::size_t width, height, maxval;
};

inline PnmHeader read_pnm_header(std::istream& is, const std::string& path) {
  char magic[2];
  if (!is.read(magic, 2) || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
    throw DataError(path + ": not a binary PPM/PGM file");
  }
  PnmHeader h{magic[1], 0, 0, 0};
  h.width = pnm_header_value(is, path);
  h.height = pnm_header_value(is, path);
  h.maxval = pnm_header_value(is, path);
  if (h.width == 0 || h.height == 0) throw DataError(path + ": zero image dimension");
  if (h.maxval == 0 || h.maxval > 65535) throw DataError(path + ": unsupported maxval " + std::to_string(h.maxval));
  return h;
}

template <class T>
Image<T> read_pnm_body(std::istream& is, const PnmHeader& h, std::size_t channels, const std::string& path) {
  Image<T> img(h.width, h.height, channels);
  const bool wide = h.maxval > 255;
  if (wide && sizeof(T) == 1) throw DataError(path + ": 16-bit image where 8-bit was expected");
  const std::size_t n = img.data.size();
  std::vector<unsigned char> raw(n * (wide ? 2 : 1));
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
    throw DataError(path + ": truncated pixel data");
  }
  for (std::size_t i = 0; i < n; ++i) {
    img.data[i] = static_cast<T>(wide ? (raw[2 * i] << 8) | raw[2 * i + 1] : raw[i]);
  }
  return img;
}

inline std::ifstream open_image(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open image " + path.string());
  return is;
}

inline void write_pnm(const std::filesystem::path& path, char kind, std::size_t w, std::size_t h, std::size_t maxval,
                      const std::vector<unsigned char>& raw) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot write image " + path.string());
  os << 'P' << kind << '\n' << w << ' ' << h << '\n' << maxval << '\n';
  os.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!os) throw Error("failed writing image " + path.string());
}

}  // namespace detail

/// Reads an 8-bit binary PPM (3 channels).
inline Image8 read_ppm(const std::filesystem::path& path) {
  auto is = detail::open_image(path);
  const auto h = detail::read_pnm_header(is, path.string());
  if (h.kind != '6') throw DataError(path.string() + ": expected a PPM (P6) file");
  return detail::read_pnm_body<std::uint8_t>(is, h, 3, path.string());
}

/// Reads an 8-bit binary PGM.
inline Image8 read_pgm8(const std::filesystem::path& path) {
  auto is = detail::open_image(path);
  const auto h = detail::read_pnm_header(is, path.string());
  if (h.kind != '5') throw DataError(path.string() + ": expected a PGM (P5) file");
  return detail::read_pnm_body<std::uint8_t>(is, h, 1, path.string());
}

/// Reads an 8- or 16-bit binary PGM into 16-bit samples.
inline Image16 read_pgm16(const std::filesystem::path& path) {
  auto is = detail::open_image(path);
  const auto h = detail::read_pnm_header(is, path.string());
  if (h.kind != '5') throw DataError(path.string() + ": expected a PGM (P5) file");
  return detail::read_pnm_body<std::uint16_t>(is, h, 1, path.string());
}

inline void write_ppm(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 3) throw DimensionError("write_ppm: image must have 3 channels");
  detail::write_pnm(path, '6', img.width, img.height, 255, std::vector<unsigned char>(img.data.begin(), img.data.end()));
}

inline void write_pgm(const std::filesystem::path& path, const Image8& img) {
  if (img.channels != 1) throw DimensionError("write_pgm: image must have 1 channel");
  detail::write_pnm(path, '5', img.width, img.height, 255, std::vector<unsigned char>(img.data.begin(), img.data.end()));
}

/// 16-bit big-endian PGM, maxval 65535.
inline void write_pgm16(const std::filesystem::path& path, const Image16& img) {
  if (img.channels != 1) throw DimensionError("write_pgm16: image must have 1 channel");
  std::vector<unsigned char> raw(img.data.size() * 2);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    raw[2 * i] = static_cast<unsigned char>(img.data[i] >> 8);
    raw[2 * i + 1] = static_cast<unsigned char>(img.data[i] & 0xFF);
  }
  detail::write_pnm(path, '5', img.width, img.height, 65535, raw);
}

}  // namespace attfuse
