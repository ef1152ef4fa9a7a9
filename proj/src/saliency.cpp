#include "cxrsev/saliency.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>

namespace cxrsev {

namespace {

constexpr char kMagic[4] = {'X', 'G', 'R', 'D'};
constexpr std::size_t kHeaderBytes = 16;

std::uint32_t load_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void store_u32le(std::uint32_t v, unsigned char* p) {
  p[0] = static_cast<unsigned char>(v);
  p[1] = static_cast<unsigned char>(v >> 8);
  p[2] = static_cast<unsigned char>(v >> 16);
  p[3] = static_cast<unsigned char>(v >> 24);
}

}  // namespace

GradientRaster read_xgrd(std::istream& in, const std::string& source) {
  unsigned char header[kHeaderBytes];
  in.read(reinterpret_cast<char*>(header), kHeaderBytes);
  if (in.gcount() != static_cast<std::streamsize>(kHeaderBytes))
    throw DataError(source + ": truncated XGRD header (" + std::to_string(in.gcount()) + " of 16 bytes)");
  if (std::memcmp(header, kMagic, 4) != 0) throw DataError(source + ": bad magic, not an XGRD file");

  GradientRaster r;
  r.width = load_u32le(header + 4);
  r.height = load_u32le(header + 8);
  const std::uint64_t count = static_cast<std::uint64_t>(r.width) * r.height;
  const std::uint64_t expected = count * 4;

  std::vector<unsigned char> payload;
  payload.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(expected, 1u << 26)));
  char buf[1 << 16];
  while (in.read(buf, sizeof buf) || in.gcount() > 0)
    payload.insert(payload.end(), buf, buf + in.gcount());
  if (payload.size() != expected)
    throw DataError(source + ": payload size mismatch, expected " + std::to_string(expected) +
                    " bytes for " + std::to_string(r.width) + "x" + std::to_string(r.height) +
                    ", found " + std::to_string(payload.size()));

  r.values.resize(static_cast<std::size_t>(count));
  for (std::size_t i = 0; i < r.values.size(); ++i)
    r.values[i] = std::bit_cast<float>(load_u32le(payload.data() + 4 * i));
  for (std::size_t i = 0; i < r.values.size(); ++i)
    if (!std::isfinite(r.values[i]))
      throw DataError(source + ": non-finite value at pixel " + std::to_string(i));
  return r;
}

GradientRaster load_gradient_raster(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  return read_xgrd(in, path.string());
}

void write_xgrd(const GradientRaster& r, std::ostream& out) {
  if (r.values.size() != static_cast<std::size_t>(r.width) * r.height)
    throw std::invalid_argument("write_xgrd: value count does not match width*height");
  unsigned char header[kHeaderBytes] = {};
  std::memcpy(header, kMagic, 4);
  store_u32le(r.width, header + 4);
  store_u32le(r.height, header + 8);
  out.write(reinterpret_cast<const char*>(header), kHeaderBytes);
  std::vector<unsigned char> payload(r.values.size() * 4);
  for (std::size_t i = 0; i < r.values.size(); ++i)
    store_u32le(std::bit_cast<std::uint32_t>(r.values[i]), payload.data() + 4 * i);
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
}

void store_gradient_raster(const GradientRaster& raster, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  write_xgrd(raster, out);
}

std::filesystem::path raster_path(const std::filesystem::path& dir, const std::string& image_id,
                                  std::string_view task) {
  return dir / image_id / (std::string(task) + ".xgrd");
}

std::map<std::string, GradientRaster> load_rasters_for(const RegressionModel& model,
                                                       const std::filesystem::path& dir,
                                                       const std::string& image_id) {
  std::map<std::string, GradientRaster> out;
  for (const auto& task : column_names(model.feature_set)) {
    auto r = load_gradient_raster(raster_path(dir, image_id, task));
    r.image_id = image_id;
    r.task = task;
    out.emplace(task, std::move(r));
  }
  return out;
}

SaliencyMap compose_saliency(const RegressionModel& model,
                             const std::map<std::string, GradientRaster>& grads) {
  const auto names = column_names(model.feature_set);
  if (static_cast<std::size_t>(model.weights.size()) != names.size())
    throw std::invalid_argument("compose_saliency: model weight count does not match its feature set");
  if (names.empty()) throw std::invalid_argument("compose_saliency: intercept-only model has no saliency");

  SaliencyMap map;
  for (std::size_t k = 0; k < names.size(); ++k) {
    const auto it = grads.find(names[k]);
    if (it == grads.end()) throw DataError("missing gradient raster for task '" + names[k] + "'");
    const auto& g = it->second;
    if (k == 0) {
      map.image_id = g.image_id;
      map.width = g.width;
      map.height = g.height;
      map.values.assign(static_cast<std::size_t>(g.width) * g.height, 0.0);
    } else if (g.width != map.width || g.height != map.height) {
      throw DataError("raster '" + names[k] + "' is " + std::to_string(g.width) + "x" +
                      std::to_string(g.height) + ", expected " + std::to_string(map.width) + "x" +
                      std::to_string(map.height));
    }
    if (g.values.size() != map.values.size())
      throw DataError("raster '" + names[k] + "' has the wrong number of values");
    const double w = model.weights(static_cast<Eigen::Index>(k));
    for (std::size_t i = 0; i < map.values.size(); ++i) map.values[i] += w * static_cast<double>(g.values[i]);
  }
  return map;
}

SaliencyMap absolute(SaliencyMap map) {
  for (auto& v : map.values) v = std::abs(v);
  return map;
}

Kernel5 gaussian_kernel_5x5(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian kernel: sigma must be positive");
  Kernel5 k{};
  double sum = 0.0;
  for (int dy = -2; dy <= 2; ++dy)
    for (int dx = -2; dx <= 2; ++dx) {
      const double v = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      k[dy + 2][dx + 2] = v;
      sum += v;
    }
  for (auto& row : k)
    for (auto& v : row) v /= sum;
  return k;
}

SaliencyMap gaussian_blur_5x5(const SaliencyMap& map, double sigma) {
  if (map.width < 5 || map.height < 5)
    throw std::invalid_argument("gaussian_blur_5x5: raster must be at least 5x5, got " +
                                std::to_string(map.width) + "x" + std::to_string(map.height));
  const auto k = gaussian_kernel_5x5(sigma);
  const auto w = static_cast<std::ptrdiff_t>(map.width);
  const auto h = static_cast<std::ptrdiff_t>(map.height);
  const auto clamp = [](std::ptrdiff_t v, std::ptrdiff_t hi) { return std::clamp<std::ptrdiff_t>(v, 0, hi - 1); };

  SaliencyMap out = map;
  for (std::ptrdiff_t y = 0; y < h; ++y)
    for (std::ptrdiff_t x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int dy = -2; dy <= 2; ++dy) {
        const auto sy = clamp(y + dy, h);
        for (int dx = -2; dx <= 2; ++dx)
          acc += k[dy + 2][dx + 2] * map.values[static_cast<std::size_t>(sy * w + clamp(x + dx, w))];
      }
      out.values[static_cast<std::size_t>(y * w + x)] = acc;
    }
  return out;
}

RenderResult render_saliency(const SaliencyMap& map) {
  if (map.values.empty()) throw std::invalid_argument("render_saliency: empty map");
  RenderResult r;
  r.image.width = map.width;
  r.image.height = map.height;
  const auto [lo_it, hi_it] = std::minmax_element(map.values.begin(), map.values.end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (!(hi > lo)) {
    r.constant = true;
    r.image.pixels.assign(map.values.size(), 128);
    return r;
  }
  r.image.pixels.resize(map.values.size());
  for (std::size_t i = 0; i < map.values.size(); ++i) {
    const double t = (map.values[i] - lo) / (hi - lo);
    r.image.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(255.0 * t), 0L, 255L));
  }
  return r;
}

void write_pgm(const GrayImage& image, std::ostream& out) {
  if (image.pixels.size() != image.width * image.height)
    throw std::invalid_argument("write_pgm: pixel count does not match dimensions");
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
}

void write_pgm(const GrayImage& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  write_pgm(image, out);
}

GrayImage read_pgm(std::istream& in) {
  std::string magic;
  std::size_t w = 0, h = 0;
  int maxval = 0;
  if (!(in >> magic) || magic != "P5") throw DataError("not a binary PGM (P5) image");
  if (!(in >> w >> h >> maxval) || maxval != 255) throw DataError("unsupported PGM header");
  in.get();  // single whitespace before the raster
  GrayImage img;
  img.width = w;
  img.height = h;
  img.pixels.resize(w * h);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (static_cast<std::size_t>(in.gcount()) != img.pixels.size()) throw DataError("truncated PGM raster");
  return img;
}

}  // namespace cxrsev
