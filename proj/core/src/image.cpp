#include "mao/image.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <string>

#include "mao/numkit.hpp"

namespace mao {
namespace {

// Reads the next whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in) {
  std::string token;
  char c;
  while (in.get(c)) {
    if (c == '#') {
      std::string ignored;
      std::getline(in, ignored);
      continue;
    }
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!token.empty()) break;
      continue;
    }
    token.push_back(c);
  }
  return token;
}

int parse_positive(const std::string& token, const std::filesystem::path& path) {
  try {
    const int v = std::stoi(token);
    if (v > 0) return v;
  } catch (const std::exception&) {
  }
  throw Error("netpbm header: bad value '" + token + "' in " + path.string());
}

struct NetpbmHeader {
  std::string magic;
  int width = 0;
  int height = 0;
  int maxval = 1;
};

NetpbmHeader read_header(std::istream& in, const std::filesystem::path& path) {
  NetpbmHeader h;
  h.magic = next_token(in);
  if (h.magic != "P6" && h.magic != "P4") {
    throw Error("netpbm: unsupported magic '" + h.magic + "' in " + path.string());
  }
  h.width = parse_positive(next_token(in), path);
  h.height = parse_positive(next_token(in), path);
  if (h.magic == "P6") {
    h.maxval = parse_positive(next_token(in), path);
    if (h.maxval > 255) throw Error("netpbm: 16-bit PPM not supported: " + path.string());
  }
  return h;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

std::size_t BinaryMask::area() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

void write_ppm(const std::filesystem::path& path, const ImageGrid& image) {
  if (image.channels != 3) throw Error("write_ppm: expects 3 channels");
  auto out = open_out(path);
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::vector<char> bytes(image.data.size());
  std::transform(image.data.begin(), image.data.end(), bytes.begin(),
                 [](double v) { return static_cast<char>(to_byte(v)); });
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("write_ppm: write failed for " + path.string());
}

ImageGrid read_ppm(const std::filesystem::path& path) {
  auto in = open_in(path);
  const auto h = read_header(in, path);
  if (h.magic != "P6") throw Error("read_ppm: not a P6 file: " + path.string());
  ImageGrid image(h.width, h.height, 3);
  std::vector<unsigned char> bytes(image.data.size());
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw Error("read_ppm: truncated pixel data in " + path.string());
  }
  const double maxval = h.maxval;
  for (std::size_t i = 0; i < bytes.size(); ++i) image.data[i] = bytes[i] / maxval;
  return image;
}

ImageSize read_ppm_size(const std::filesystem::path& path) {
  auto in = open_in(path);
  const auto h = read_header(in, path);
  return {h.width, h.height};
}

void write_pbm(const std::filesystem::path& path, const BinaryMask& mask) {
  auto out = open_out(path);
  out << "P4\n" << mask.width << ' ' << mask.height << '\n';
  const int row_bytes = (mask.width + 7) / 8;
  std::vector<char> row(row_bytes);
  for (int y = 0; y < mask.height; ++y) {
    std::fill(row.begin(), row.end(), 0);
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(x, y)) row[x / 8] = static_cast<char>(row[x / 8] | (0x80 >> (x % 8)));
    }
    out.write(row.data(), row_bytes);
  }
  if (!out) throw Error("write_pbm: write failed for " + path.string());
}

BinaryMask read_pbm(const std::filesystem::path& path) {
  auto in = open_in(path);
  const auto h = read_header(in, path);
  if (h.magic != "P4") throw Error("read_pbm: not a P4 file: " + path.string());
  BinaryMask mask(h.width, h.height);
  const int row_bytes = (h.width + 7) / 8;
  std::vector<unsigned char> row(row_bytes);
  for (int y = 0; y < h.height; ++y) {
    in.read(reinterpret_cast<char*>(row.data()), row_bytes);
    if (in.gcount() != row_bytes) throw Error("read_pbm: truncated data in " + path.string());
    for (int x = 0; x < h.width; ++x) {
      mask.at(x, y) = (row[x / 8] >> (7 - x % 8)) & 1;
    }
  }
  return mask;
}

void quantize_8bit(ImageGrid& image) {
  for (double& v : image.data) v = to_byte(v) / 255.0;
}

ImageGrid resize_area(const ImageGrid& image, int out_width, int out_height) {
  if (out_width <= 0 || out_height <= 0 || image.empty()) {
    throw Error("resize_area: invalid dimensions");
  }
  ImageGrid out(out_width, out_height, image.channels);
  const double sx = static_cast<double>(image.width) / out_width;
  const double sy = static_cast<double>(image.height) / out_height;
  for (int oy = 0; oy < out_height; ++oy) {
    const double y0 = oy * sy;
    const double y1 = y0 + sy;
    for (int ox = 0; ox < out_width; ++ox) {
      const double x0 = ox * sx;
      const double x1 = x0 + sx;
      double weight_sum = 0.0;
      std::vector<double> acc(image.channels, 0.0);
      for (int iy = static_cast<int>(std::floor(y0)); iy < std::min<double>(std::ceil(y1), image.height); ++iy) {
        const double wy = std::min<double>(iy + 1, y1) - std::max<double>(iy, y0);
        if (wy <= 0.0) continue;
        for (int ix = static_cast<int>(std::floor(x0)); ix < std::min<double>(std::ceil(x1), image.width); ++ix) {
          const double wx = std::min<double>(ix + 1, x1) - std::max<double>(ix, x0);
          if (wx <= 0.0) continue;
          const double w = wx * wy;
          weight_sum += w;
          for (int c = 0; c < image.channels; ++c) acc[c] += w * image.at(ix, iy, c);
        }
      }
      for (int c = 0; c < image.channels; ++c) {
        out.at(ox, oy, c) = weight_sum > 0.0 ? acc[c] / weight_sum : 0.0;
      }
    }
  }
  return out;
}

ImageGrid crop_window(const ImageGrid& image, int x, int y, int w, int h) {
  ImageGrid out(w, h, image.channels);
  for (int cy = 0; cy < h; ++cy) {
    const int sy = y + cy;
    if (sy < 0 || sy >= image.height) continue;
    for (int cx = 0; cx < w; ++cx) {
      const int sx = x + cx;
      if (sx < 0 || sx >= image.width) continue;
      for (int c = 0; c < image.channels; ++c) out.at(cx, cy, c) = image.at(sx, sy, c);
    }
  }
  return out;
}

}  // namespace mao
