#ifndef CXRSEV_SALIENCY_HPP
#define CXRSEV_SALIENCY_HPP

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "cxrsev/regress.hpp"

namespace cxrsev {

/// Row-major single-precision grid of d(pre-sigmoid output) / d(pixel).
struct GradientRaster {
  std::string image_id;
  std::string task;
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::vector<float> values;

  bool operator==(const GradientRaster&) const = default;
};

struct SaliencyMap {
  std::string image_id;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> values;

  double at(std::size_t x, std::size_t y) const { return values[y * width + x]; }
};

/// XGRD: "XGRD", u32 LE width, u32 LE height, u32 LE reserved (0), then
/// width*height f32 LE values, row-major.
GradientRaster read_xgrd(std::istream& in, const std::string& source = "<stream>");
GradientRaster load_gradient_raster(const std::filesystem::path& path);
void write_xgrd(const GradientRaster& raster, std::ostream& out);
void store_gradient_raster(const GradientRaster& raster, const std::filesystem::path& path);

/// Location of a raster inside a gradients directory: <dir>/<image_id>/<task>.xgrd
std::filesystem::path raster_path(const std::filesystem::path& dir, const std::string& image_id,
                                  std::string_view task);

/// Loads the rasters needed by `model` for one image.
std::map<std::string, GradientRaster> load_rasters_for(const RegressionModel& model,
                                                       const std::filesystem::path& dir,
                                                       const std::string& image_id);

/// Pixel-wise sum of weight_k * raster_k over the model's feature columns.
SaliencyMap compose_saliency(const RegressionModel& model,
                             const std::map<std::string, GradientRaster>& grads);

SaliencyMap absolute(SaliencyMap map);

using Kernel5 = std::array<std::array<double, 5>, 5>;

/// Normalised 5x5 Gaussian sampled at integer offsets -2..2.
Kernel5 gaussian_kernel_5x5(double sigma);

/// 5x5 Gaussian convolution with replicate-edge padding.
SaliencyMap gaussian_blur_5x5(const SaliencyMap& map, double sigma = 1.0);

struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;

  bool operator==(const GrayImage&) const = default;
};

struct RenderResult {
  GrayImage image;
  bool constant = false;  // map had no range; rendered as uniform 128
};

/// Min-max normalisation to 0..255 (rounded to nearest).
RenderResult render_saliency(const SaliencyMap& map);

/// Binary PGM: "P5\n<w> <h>\n255\n" followed by w*h bytes.
void write_pgm(const GrayImage& image, std::ostream& out);
void write_pgm(const GrayImage& image, const std::filesystem::path& path);
GrayImage read_pgm(std::istream& in);

}  // namespace cxrsev

#endif  // CXRSEV_SALIENCY_HPP
