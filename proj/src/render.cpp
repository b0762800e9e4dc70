#include "tipnet/render.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <memory>

#include "tipnet/error.hpp"

namespace tipnet {

View parse_view(const std::string& name) {
  if (name == "short") return View::ShortAxis;
  if (name == "long") return View::LongAxis;
  throw ConfigError("unknown view '" + name + "' (expected short or long)");
}

Window shared_window(std::span<const VolumeGrid* const> volumes) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -lo;
  for (const auto* v : volumes) {
    for (float x : v->values()) {
      lo = std::min<double>(lo, x);
      hi = std::max<double>(hi, x);
    }
  }
  if (!std::isfinite(lo) || !std::isfinite(hi)) return {};
  if (hi <= lo) hi = lo + 1.0;
  return {lo, hi};
}

Image8 slice_grid(const VolumeGrid& v, View view, const Window& window, int columns) {
  if (columns < 0) throw ConfigError("render: columns must be >= 0");
  if (!(window.hi > window.lo)) throw ConfigError("render: window must have hi > lo");
  // Slice (w x h) and count for the view.
  const int n = view == View::ShortAxis ? v.nx() : v.nz();
  const int w = view == View::ShortAxis ? v.ny() : v.nx();
  const int h = view == View::ShortAxis ? v.nz() : v.ny();
  const int cols = columns == 0 ? n : std::min(columns, n);
  const int rows = (n + cols - 1) / cols;

  Image8 img;
  img.width = cols * (w + 1) - 1;
  img.height = rows * (h + 1) - 1;
  img.pixels.assign(static_cast<std::size_t>(img.width) * img.height, 0);
  const double scale = 255.0 / (window.hi - window.lo);
  for (int s = 0; s < n; ++s) {
    const int x0 = (s % cols) * (w + 1);
    const int y0 = (s / cols) * (h + 1);
    for (int r = 0; r < h; ++r) {
      for (int c = 0; c < w; ++c) {
        // Image rows run top-down, so the last voxel row is drawn first.
        const float val = view == View::ShortAxis ? v.at(s, c, h - 1 - r) : v.at(c, h - 1 - r, s);
        const double g = std::clamp((val - window.lo) * scale, 0.0, 255.0);
        img.pixels[static_cast<std::size_t>(y0 + r) * img.width + x0 + c] =
            static_cast<std::uint8_t>(std::lround(g));
      }
    }
  }
  return img;
}

Image8 stack_images(std::span<const Image8> images) {
  Image8 out;
  for (const auto& im : images) {
    out.width = std::max(out.width, im.width);
    out.height += im.height;
  }
  if (!images.empty()) out.height += static_cast<int>(images.size()) - 1;
  out.pixels.assign(static_cast<std::size_t>(out.width) * out.height, 0);
  int y = 0;
  for (const auto& im : images) {
    for (int r = 0; r < im.height; ++r) {
      std::copy_n(im.pixels.begin() + static_cast<std::ptrdiff_t>(r) * im.width, im.width,
                  out.pixels.begin() + static_cast<std::ptrdiff_t>(y + r) * out.width);
    }
    y += im.height + 1;
  }
  return out;
}

void write_pgm(const std::filesystem::path& path, const Image8& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (image.width < 1 || image.height < 1) throw DataError("render: empty image");
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
               PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < image.height; ++r) {
    png_write_row(png, image.pixels.data() + static_cast<std::size_t>(r) * image.width);
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

void write_image(const std::filesystem::path& path, const Image8& image) {
  const auto ext = path.extension().string();
  if (ext == ".png") write_png(path, image);
  else if (ext == ".pgm") write_pgm(path, image);
  else throw ConfigError("render: output must end in .png or .pgm, got '" + path.string() + "'");
}

}  // namespace tipnet
