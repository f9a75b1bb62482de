#ifndef MILKIT_PREPROCESS_HPP_
#define MILKIT_PREPROCESS_HPP_

#include <opencv2/core.hpp>

#include <filesystem>
#include <functional>
#include <memory>
#include <vector>

#include "milkit/bagio.hpp"

namespace milkit::preprocess {

struct PyramidLevel {
  double downsample = 1.0;
  int width = 0;
  int height = 0;
};

// Read-only multi-resolution slide. Level 0 is the highest resolution.
// read_region follows the OpenSlide convention: (x, y) are level-0
// coordinates, (w, h) is the size in pixels of the requested level.
// Implementations must be safe for concurrent read_region calls.
class PyramidalImage {
 public:
  virtual ~PyramidalImage() = default;
  virtual const std::vector<PyramidLevel>& levels() const = 0;
  virtual double base_magnification() const = 0;
  // Returns a CV_8UC3 block in RGB channel order.
  virtual cv::Mat read_region(int level, int x, int y, int w, int h) const = 0;
};

// Pyramid held in memory; extra levels are built by repeated 2x box
// averaging of level 0.
class InMemoryPyramid : public PyramidalImage {
 public:
  InMemoryPyramid(cv::Mat level0_rgb, double base_magnification,
                  int num_levels = 1);
  InMemoryPyramid(std::vector<cv::Mat> levels_rgb,
                  std::vector<double> downsamples, double base_magnification);

  const std::vector<PyramidLevel>& levels() const override { return levels_; }
  double base_magnification() const override { return base_mag_; }
  cv::Mat read_region(int level, int x, int y, int w, int h) const override;

 private:
  std::vector<cv::Mat> images_;
  std::vector<PyramidLevel> levels_;
  double base_mag_;
};

// Opens any image OpenCV can decode as a single-level slide (plus
// derived levels). Vendor pyramidal formats plug in through
// PyramidalImage instead.
std::unique_ptr<PyramidalImage> open_image(const std::filesystem::path& path,
                                           double base_magnification,
                                           int num_levels = 1);

// Integer-factor box downsample with round-half-up; factor 1 is identity.
cv::Mat box_downsample(const cv::Mat& rgb, int factor);

struct SegmentationParams {
  int saturation_threshold = 8;
  int median_blur_kernel = 7;
  int morph_close_kernel = 4;
  double min_contour_area = 0.005;  // fraction of thumbnail area
  double hole_area_max = 0.0005;    // holes at or below this fraction are filled
  int thumbnail_level = -1;         // -1: level with downsample closest to 64

  void validate() const;
};

nlohmann::json segmentation_params_to_json(const SegmentationParams& p);
SegmentationParams segmentation_params_from_json(const nlohmann::json& j);

using Polygon = std::vector<cv::Point>;

struct TissueMask {
  std::vector<Polygon> foreground;
  std::vector<Polygon> holes;
  double downsample = 1.0;  // thumbnail pixel -> level-0 pixels
  SegmentationParams params;
};

TissueMask segment_tissue(const PyramidalImage& img,
                          const SegmentationParams& params = {});

// True when the level-0 point lies in some foreground contour and not
// strictly inside a hole.
bool mask_contains(const TissueMask& mask, double x0, double y0);

bagio::PatchManifest extract_patch_grid(const PyramidalImage& img,
                                        const TissueMask& mask,
                                        double magnification,
                                        int patch_size = 256, int stride = 0);

// Calls sink(coordinate, patch) for each manifest entry in order. Each
// patch is patch_size x patch_size RGB at the manifest magnification.
void crop_patches(
    const PyramidalImage& img, const bagio::PatchManifest& manifest,
    const std::function<void(const bagio::Coordinate&, const cv::Mat&)>& sink);

cv::Mat crop_patch(const PyramidalImage& img,
                   const bagio::PatchManifest& manifest,
                   const bagio::Coordinate& at);

}  // namespace milkit::preprocess

#endif  // MILKIT_PREPROCESS_HPP_
