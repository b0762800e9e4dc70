#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "tipnet/volume.hpp"

namespace tipnet {

/// Grid-aligned cardiac views. Phantoms point the LV long axis roughly
/// along +x, so short-axis cuts are y-z planes stepped along x and
/// long-axis cuts are x-y planes stepped along z.
enum class View { ShortAxis, LongAxis };

View parse_view(const std::string& name);

struct Image8 {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  ///< row-major, top row first
};

struct Window {
  double lo = 0.0;
  double hi = 1.0;
};

/// [min, max] over every voxel of every volume; widened to [lo, lo + 1]
/// when flat.
Window shared_window(std::span<const VolumeGrid* const> volumes);

/// All slices of one view tiled left to right, `columns` per row (0: all in
/// one row), separated by a one-pixel black gap.
Image8 slice_grid(const VolumeGrid& volume, View view, const Window& window, int columns = 0);

/// Stacks images vertically with a one-pixel gap; widths may differ.
Image8 stack_images(std::span<const Image8> images);

void write_pgm(const std::filesystem::path& path, const Image8& image);
void write_png(const std::filesystem::path& path, const Image8& image);
/// Chooses PNG or PGM by extension.
void write_image(const std::filesystem::path& path, const Image8& image);

}  // namespace tipnet
