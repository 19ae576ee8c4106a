#include "mmgpt/data/toy_image.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "mmgpt/common/error.hpp"

namespace mmgpt::data {

namespace {

constexpr std::string_view kMagic = "TOYIMG";
constexpr std::string_view kAttrPrefix = "#attr ";

std::string format_float(float v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

SceneAttributes parse_attributes(std::string_view line, const std::string& origin) {
  SceneAttributes attrs;
  std::istringstream in{std::string(line)};
  std::string field;
  while (in >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos) throw IoError(origin + ": malformed attribute '" + field + "'");
    const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
    if (key == "count")
      attrs.count = std::stoi(value);
    else if (key == "color")
      attrs.color = value;
    else if (key == "shape")
      attrs.shape = value;
    else if (key == "background")
      attrs.background = value;
    else
      throw IoError(origin + ": unknown attribute '" + key + "'");
  }
  return attrs;
}

}  // namespace

std::string serialize_image(const ToyImage& image) {
  std::string out = std::string(kMagic) + " v1 " + std::to_string(image.height) + ' ' + std::to_string(image.width) +
                    ' ' + std::to_string(image.channels) + '\n';
  if (image.attributes) {
    const auto& a = *image.attributes;
    out += std::string(kAttrPrefix) + "count=" + std::to_string(a.count) + " color=" + a.color + " shape=" + a.shape +
           " background=" + a.background + '\n';
  }
  for (std::size_t y = 0; y < image.height; ++y) {
    for (std::size_t i = 0; i < image.width * image.channels; ++i) {
      if (i) out += ' ';
      out += format_float(image.pixels[y * image.width * image.channels + i]);
    }
    out += '\n';
  }
  return out;
}

ToyImage parse_image(std::string_view contents, const std::string& origin) {
  std::istringstream in{std::string(contents)};
  std::string line;
  if (!std::getline(in, line)) throw IoError(origin + ": empty image file");
  std::istringstream header(line);
  std::string magic, version;
  ToyImage image;
  if (!(header >> magic >> version >> image.height >> image.width >> image.channels) || magic != kMagic ||
      version != "v1")
    throw IoError(origin + ": expected header 'TOYIMG v1 H W C'");
  if (image.height == 0 || image.width == 0 || image.channels == 0) throw IoError(origin + ": zero image extent");

  const auto body_start = in.tellg();
  if (std::getline(in, line) && line.rfind(kAttrPrefix, 0) == 0) {
    image.attributes = parse_attributes(std::string_view(line).substr(kAttrPrefix.size()), origin);
  } else {
    in.clear();
    in.seekg(body_start);
  }

  const std::size_t n = image.height * image.width * image.channels;
  image.pixels.reserve(n);
  std::string token;
  while (in >> token) {
    float v = 0;
    const auto res = std::from_chars(token.data(), token.data() + token.size(), v);
    if (res.ec != std::errc() || res.ptr != token.data() + token.size())
      throw IoError(origin + ": bad pixel value '" + token + "'");
    image.pixels.push_back(v);
  }
  if (image.pixels.size() != n)
    throw IoError(origin + ": expected " + std::to_string(n) + " values, found " + std::to_string(image.pixels.size()));
  return image;
}

void save_image(const ToyImage& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write image " + path.string());
  out << serialize_image(image);
}

ToyImage load_image(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read image " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_image(buf.str(), path.string());
}

}  // namespace mmgpt::data
