#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "crowdx/render.hpp"

namespace crowdx {

/// 8-bit interleaved RGB, row-major.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  std::uint8_t* at(int x, int y) { return &pixels[3 * (static_cast<std::size_t>(y) * width + x)]; }
  const std::uint8_t* at(int x, int y) const {
    return &pixels[3 * (static_cast<std::size_t>(y) * width + x)];
  }
};

RgbImage to_image(const Framebuffer& fb);

/// Deterministic PNG encoding (fixed compression, no timestamps).
std::string encode_png(const RgbImage& img);
RgbImage decode_png(std::string_view bytes);

void write_png(const RgbImage& img, const std::filesystem::path& path);
RgbImage read_png(const std::filesystem::path& path);

std::string read_file(const std::filesystem::path& path);
/// Writes to a temporary sibling and renames, so readers never see partial files.
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace crowdx
