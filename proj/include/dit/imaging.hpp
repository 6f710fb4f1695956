#pragma once

#include <cstddef>
#include <filesystem>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dit/rng.hpp"

namespace dit {

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Row-major, channel-interleaved raster. Values are intensities in [0,255]
/// until normalize() maps them to floats around zero.
struct Image {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 1;
  std::vector<float> data;

  Image() = default;
  Image(std::size_t w, std::size_t h, std::size_t c, float fill = 0.0f);

  float& at(std::size_t x, std::size_t y, std::size_t c = 0) { return data[(y * width + x) * channels + c]; }
  float at(std::size_t x, std::size_t y, std::size_t c = 0) const { return data[(y * width + x) * channels + c]; }
  bool operator==(const Image&) const = default;
};

struct PatchSequence {
  std::size_t patch_size = 0;
  std::size_t grid_h = 0;
  std::size_t grid_w = 0;
  std::size_t channels = 1;
  std::vector<std::vector<float>> patches;  // row-major over the grid; each (y, x, c) flattened
};

/// Integer crop rectangle in pixels.
struct CropRect {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t w = 0;
  std::size_t h = 0;
  bool operator==(const CropRect&) const = default;
};

// PNG (8-bit gray/RGB) and binary PGM (P5), chosen by file content.
Image load_image(const std::filesystem::path& path);
void save_png(const Image& img, const std::filesystem::path& path);
void save_pgm(const Image& img, const std::filesystem::path& path);

/// Bilinear, align-corners-false.
Image resize(const Image& img, std::size_t w, std::size_t h);
Image crop(const Image& img, const CropRect& r);
/// Pads on the right and bottom with `fill`.
Image pad_to(const Image& img, std::size_t w, std::size_t h, float fill);
/// Replicates a gray image to c channels, or averages RGB down to gray.
Image to_channels(const Image& img, std::size_t c);

struct ResizedCropParams {
  double area_min = 0.7;
  double area_max = 1.0;
  double aspect_min = 3.0 / 4.0;
  double aspect_max = 4.0 / 3.0;
};

/// Samples the crop rectangle: up to 10 draws of (area fraction, log-uniform
/// aspect), falling back to the largest centred crop within the aspect range.
CropRect sample_resized_crop(Rng& rng, std::size_t width, std::size_t height, const ResizedCropParams& p);
Image random_resized_crop(const Image& img, Rng& rng, const ResizedCropParams& p, std::size_t out,
                          CropRect* used = nullptr);

/// Output size for a chosen shortest side with the 1333 longest-side cap.
std::pair<std::size_t, std::size_t> multiscale_target_dims(std::size_t w, std::size_t h, std::size_t short_side,
                                                          std::size_t max_long = 1333);

/// Geometry applied by multiscale_resize, for mapping annotations.
struct ScaleTransform {
  CropRect crop;
  double sx = 1.0;
  double sy = 1.0;
};

/// DETR-style multi-scale augmentation: with probability 0.5 crop a random
/// rectangle, then resize to a shortest side drawn from {480, 512, ..., 800}
/// with the longest side capped at 1333.
Image multiscale_resize(const Image& img, Rng& rng, ScaleTransform* tf = nullptr);

/// Gaussian-weighted local-mean thresholding: 255 where pixel > mean - offset.
Image adaptive_binarize(const Image& img, std::size_t window = 31, float offset = 10.0f);

PatchSequence patchify(const Image& img, std::size_t patch);
Image unpatchify(const PatchSequence& seq);

/// (pixel / 255 - mean[c]) / std[c].
Image normalize(const Image& img, const std::vector<float>& mean, const std::vector<float>& stdev);

}  // namespace dit
