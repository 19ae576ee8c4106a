#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mmgpt::data {

/// Ground-truth facts of a generated scene.
struct SceneAttributes {
  int count = 0;
  std::string color;
  std::string shape = "square";
  std::string background;

  bool operator==(const SceneAttributes&) const = default;
};

/// H x W x C grid of values in [0, 1], stored channel-last.
struct ToyImage {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> pixels;
  std::optional<SceneAttributes> attributes;

  float at(std::size_t y, std::size_t x, std::size_t c) const { return pixels[(y * width + x) * channels + c]; }
  float& at(std::size_t y, std::size_t x, std::size_t c) { return pixels[(y * width + x) * channels + c]; }

  bool operator==(const ToyImage&) const = default;
};

// File format:
//   TOYIMG v1 H W C
//   #attr count=4 color=red shape=square background=black     (optional)
//   v v v ...                                                   (H*W*C values)
// Values use the shortest decimal form that reloads to the same float.
std::string serialize_image(const ToyImage& image);
ToyImage parse_image(std::string_view contents, const std::string& origin = "<memory>");
void save_image(const ToyImage& image, const std::filesystem::path& path);
ToyImage load_image(const std::filesystem::path& path);

}  // namespace mmgpt::data
