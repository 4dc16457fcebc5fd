#pragma once

#include "rfb/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace rfb {

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// 8-bit interleaved RGB image.
struct Image {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> rgb;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::array<std::uint8_t, 3> fill = {0, 0, 0})
      : width(w), height(h), rgb(w * h * 3) {
    for (std::size_t i = 0; i < w * h; ++i)
      for (std::size_t c = 0; c < 3; ++c)
        rgb[i * 3 + c] = fill[c];
  }

  std::uint8_t &at(std::size_t x, std::size_t y, std::size_t c) {
    return rgb[(y * width + x) * 3 + c];
  }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return rgb[(y * width + x) * 3 + c];
  }
  bool operator==(const Image &) const = default;
};

inline void write_ppm(const std::filesystem::path &path, const Image &img) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("cannot write " + path.string());
  out << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  out.write(reinterpret_cast<const char *>(img.rgb.data()),
            static_cast<std::streamsize>(img.rgb.size()));
  if (!out)
    throw IoError("write failed: " + path.string());
}

namespace detail {
inline std::size_t read_header_int(std::istream &in) {
  in >> std::ws;
  while (in.peek() == '#') {
    std::string line;
    std::getline(in, line);
    in >> std::ws;
  }
  std::size_t v = 0;
  if (!(in >> v))
    throw IoError("malformed PNM header");
  return v;
}
} // namespace detail

inline Image read_ppm(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in)
    throw IoError("cannot read " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6")
    throw IoError(path.string() + ": not a binary PPM (P6)");
  Image img;
  img.width = detail::read_header_int(in);
  img.height = detail::read_header_int(in);
  if (detail::read_header_int(in) != 255)
    throw IoError(path.string() + ": only 8-bit PPM supported");
  in.get();
  img.rgb.resize(img.width * img.height * 3);
  in.read(reinterpret_cast<char *>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.rgb.size()))
    throw IoError(path.string() + ": truncated pixel data");
  return img;
}

/// 8-bit grayscale P5.
inline void write_pgm(const std::filesystem::path &path, std::size_t width, std::size_t height,
                      const std::vector<std::uint8_t> &gray) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError("cannot write " + path.string());
  out << "P5\n" << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char *>(gray.data()), static_cast<std::streamsize>(gray.size()));
  if (!out)
    throw IoError("write failed: " + path.string());
}

/// (1, 3, H, W) tensor with values (v - 127.5) / 64.
template <typename T> Tensor<T> image_to_tensor(const Image &img) {
  Tensor<T> t(Shape{1, 3, img.height, img.width});
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x)
        t.at(0, c, y, x) = (static_cast<T>(img.at(x, y, c)) - T(127.5)) / T(64);
  return t;
}

} // namespace rfb
