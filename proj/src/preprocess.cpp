#include "milkit/preprocess.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <limits>

#include "milkit/error.hpp"

namespace fs = std::filesystem;

namespace milkit::preprocess {

cv::Mat box_downsample(const cv::Mat& rgb, int factor) {
  if (factor < 1) {
    throw MilError(ErrorCode::kInvalidArgument, "downsample factor must be >= 1");
  }
  if (factor == 1) return rgb.clone();
  const int w = rgb.cols / factor;
  const int h = rgb.rows / factor;
  const int area = factor * factor;
  cv::Mat out(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int acc[3] = {0, 0, 0};
      for (int dy = 0; dy < factor; ++dy) {
        const auto* row = rgb.ptr<cv::Vec3b>(y * factor + dy) + x * factor;
        for (int dx = 0; dx < factor; ++dx) {
          for (int c = 0; c < 3; ++c) acc[c] += row[dx][c];
        }
      }
      auto& px = out.at<cv::Vec3b>(y, x);
      for (int c = 0; c < 3; ++c) {
        px[c] = static_cast<uchar>((acc[c] + area / 2) / area);
      }
    }
  }
  return out;
}

InMemoryPyramid::InMemoryPyramid(cv::Mat level0_rgb, double base_magnification,
                                 int num_levels)
    : base_mag_(base_magnification) {
  if (level0_rgb.empty() || level0_rgb.type() != CV_8UC3) {
    throw MilError(ErrorCode::kUnreadableImage, "level 0 must be non-empty 8-bit RGB");
  }
  if (num_levels < 1) num_levels = 1;
  images_.push_back(level0_rgb);
  levels_.push_back({1.0, level0_rgb.cols, level0_rgb.rows});
  for (int i = 1; i < num_levels; ++i) {
    const int f = 1 << i;
    if (level0_rgb.cols / f < 1 || level0_rgb.rows / f < 1) break;
    cv::Mat lvl = box_downsample(level0_rgb, f);
    levels_.push_back({static_cast<double>(f), lvl.cols, lvl.rows});
    images_.push_back(std::move(lvl));
  }
}

InMemoryPyramid::InMemoryPyramid(std::vector<cv::Mat> levels_rgb,
                                 std::vector<double> downsamples,
                                 double base_magnification)
    : images_(std::move(levels_rgb)), base_mag_(base_magnification) {
  if (images_.empty() || images_.size() != downsamples.size()) {
    throw MilError(ErrorCode::kUnreadableImage, "level list and downsamples disagree");
  }
  double prev = 0.0;
  for (std::size_t i = 0; i < images_.size(); ++i) {
    if (images_[i].empty() || images_[i].type() != CV_8UC3) {
      throw MilError(ErrorCode::kUnreadableImage, "levels must be 8-bit RGB");
    }
    if (downsamples[i] <= prev) {
      throw MilError(ErrorCode::kUnreadableImage,
                     "downsample factors must increase from level 0");
    }
    prev = downsamples[i];
    levels_.push_back({downsamples[i], images_[i].cols, images_[i].rows});
  }
}

cv::Mat InMemoryPyramid::read_region(int level, int x, int y, int w, int h) const {
  if (level < 0 || level >= static_cast<int>(images_.size())) {
    throw MilError(ErrorCode::kOutOfBounds, "no level " + std::to_string(level));
  }
  const double ds = levels_[static_cast<std::size_t>(level)].downsample;
  const int lx = static_cast<int>(std::lround(x / ds));
  const int ly = static_cast<int>(std::lround(y / ds));
  const cv::Mat& img = images_[static_cast<std::size_t>(level)];
  if (lx < 0 || ly < 0 || w <= 0 || h <= 0 || lx + w > img.cols ||
      ly + h > img.rows) {
    throw MilError(ErrorCode::kOutOfBounds,
                   "region (" + std::to_string(x) + "," + std::to_string(y) +
                       ") " + std::to_string(w) + "x" + std::to_string(h) +
                       " exceeds level " + std::to_string(level));
  }
  return img(cv::Rect(lx, ly, w, h)).clone();
}

std::unique_ptr<PyramidalImage> open_image(const fs::path& path,
                                           double base_magnification,
                                           int num_levels) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) {
    throw MilError(ErrorCode::kUnreadableImage, path.string());
  }
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  return std::make_unique<InMemoryPyramid>(std::move(rgb), base_magnification,
                                           num_levels);
}

void SegmentationParams::validate() const {
  const auto bad = [](const std::string& why) {
    return MilError(ErrorCode::kInvalidArgument, why);
  };
  if (saturation_threshold < 0 || saturation_threshold > 255) {
    throw bad("saturation_threshold must be in 0..255");
  }
  if (median_blur_kernel < 1 || median_blur_kernel % 2 == 0) {
    throw bad("median_blur_kernel must be a positive odd integer");
  }
  if (morph_close_kernel < 0) throw bad("morph_close_kernel must be >= 0");
  if (min_contour_area < 0.0 || min_contour_area > 1.0) {
    throw bad("min_contour_area must be a fraction in [0, 1]");
  }
  if (hole_area_max < 0.0 || hole_area_max > 1.0) {
    throw bad("hole_area_max must be a fraction in [0, 1]");
  }
}

nlohmann::json segmentation_params_to_json(const SegmentationParams& p) {
  return {{"saturation_threshold", p.saturation_threshold},
          {"median_blur_kernel", p.median_blur_kernel},
          {"morph_close_kernel", p.morph_close_kernel},
          {"min_contour_area", p.min_contour_area},
          {"hole_area_max", p.hole_area_max},
          {"thumbnail_level", p.thumbnail_level}};
}

SegmentationParams segmentation_params_from_json(const nlohmann::json& j) {
  SegmentationParams p;
  p.saturation_threshold = j.value("saturation_threshold", p.saturation_threshold);
  p.median_blur_kernel = j.value("median_blur_kernel", p.median_blur_kernel);
  p.morph_close_kernel = j.value("morph_close_kernel", p.morph_close_kernel);
  p.min_contour_area = j.value("min_contour_area", p.min_contour_area);
  p.hole_area_max = j.value("hole_area_max", p.hole_area_max);
  p.thumbnail_level = j.value("thumbnail_level", p.thumbnail_level);
  return p;
}

namespace {

int pick_thumbnail_level(const PyramidalImage& img, int requested) {
  const auto& levels = img.levels();
  if (levels.empty()) throw MilError(ErrorCode::kUnreadableImage, "image has no levels");
  if (requested >= 0) {
    if (requested >= static_cast<int>(levels.size())) {
      throw MilError(ErrorCode::kInvalidArgument,
                     "thumbnail_level " + std::to_string(requested) + " out of range");
    }
    return requested;
  }
  int best = 0;
  double best_gap = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < levels.size(); ++i) {
    const double gap = std::abs(std::log(levels[i].downsample / 64.0));
    if (gap < best_gap) {
      best_gap = gap;
      best = static_cast<int>(i);
    }
  }
  return best;
}

}  // namespace

TissueMask segment_tissue(const PyramidalImage& img, const SegmentationParams& params) {
  params.validate();
  const int lvl = pick_thumbnail_level(img, params.thumbnail_level);
  const PyramidLevel& info = img.levels()[static_cast<std::size_t>(lvl)];
  const cv::Mat thumb = img.read_region(lvl, 0, 0, info.width, info.height);

  cv::Mat hsv;
  cv::cvtColor(thumb, hsv, cv::COLOR_RGB2HSV);
  cv::Mat sat;
  cv::extractChannel(hsv, sat, 1);
  cv::medianBlur(sat, sat, params.median_blur_kernel);
  cv::Mat binary;
  cv::threshold(sat, binary, params.saturation_threshold, 255, cv::THRESH_BINARY);
  if (params.morph_close_kernel > 0) {
    const cv::Mat kernel = cv::Mat::ones(params.morph_close_kernel,
                                         params.morph_close_kernel, CV_8U);
    cv::morphologyEx(binary, binary, cv::MORPH_CLOSE, kernel);
  }

  std::vector<Polygon> contours;
  std::vector<cv::Vec4i> hierarchy;
  cv::findContours(binary, contours, hierarchy, cv::RETR_CCOMP,
                   cv::CHAIN_APPROX_NONE);

  const double thumb_area = static_cast<double>(info.width) * info.height;
  const double min_area = params.min_contour_area * thumb_area;
  const double max_filled_hole = params.hole_area_max * thumb_area;

  TissueMask mask;
  mask.downsample = info.downsample;
  mask.params = params;
  for (std::size_t i = 0; i < contours.size(); ++i) {
    if (hierarchy[i][3] >= 0) continue;  // holes handled with their parent
    if (cv::contourArea(contours[i]) < min_area) continue;
    mask.foreground.push_back(contours[i]);
    for (int h = hierarchy[i][2]; h >= 0; h = hierarchy[static_cast<std::size_t>(h)][0]) {
      const auto& hole = contours[static_cast<std::size_t>(h)];
      if (cv::contourArea(hole) > max_filled_hole) mask.holes.push_back(hole);
    }
  }
  if (mask.foreground.empty()) {
    throw MilError(ErrorCode::kEmptyTissue, "no contour survived filtering");
  }
  return mask;
}

bool mask_contains(const TissueMask& mask, double x0, double y0) {
  const cv::Point2f p(static_cast<float>(x0 / mask.downsample),
                      static_cast<float>(y0 / mask.downsample));
  bool inside = false;
  for (const auto& poly : mask.foreground) {
    if (cv::pointPolygonTest(poly, p, false) >= 0) {
      inside = true;
      break;
    }
  }
  if (!inside) return false;
  for (const auto& hole : mask.holes) {
    if (cv::pointPolygonTest(hole, p, false) > 0) return false;
  }
  return true;
}

namespace {

struct PlaneInfo {
  double factor = 1.0;  // level-0 pixels per target pixel
  int native_level = -1;
};

PlaneInfo resolve_plane(const PyramidalImage& img, double magnification) {
  const double base = img.base_magnification();
  if (!(magnification > 0.0) || magnification > base * (1.0 + 1e-9)) {
    throw MilError(ErrorCode::kMagnificationUnavailable,
                   std::to_string(magnification) + "x from a " +
                       std::to_string(base) + "x slide");
  }
  PlaneInfo info;
  info.factor = base / magnification;
  const auto& levels = img.levels();
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (std::abs(levels[i].downsample - info.factor) < 1e-6) {
      info.native_level = static_cast<int>(i);
      return info;
    }
  }
  if (std::abs(info.factor - std::round(info.factor)) > 1e-6) {
    throw MilError(ErrorCode::kMagnificationUnavailable,
                   "no level and no integer downsample reaches " +
                       std::to_string(magnification) + "x");
  }
  return info;
}

}  // namespace

bagio::PatchManifest extract_patch_grid(const PyramidalImage& img,
                                        const TissueMask& mask,
                                        double magnification, int patch_size,
                                        int stride) {
  if (patch_size <= 0) {
    throw MilError(ErrorCode::kInvalidArgument, "patch_size must be positive");
  }
  if (stride <= 0) stride = patch_size;
  const PlaneInfo plane = resolve_plane(img, magnification);
  const int extent = static_cast<int>(std::lround(patch_size * plane.factor));
  const int step = static_cast<int>(std::lround(stride * plane.factor));
  const PyramidLevel& l0 = img.levels().front();

  bagio::PatchManifest manifest;
  manifest.magnification = magnification;
  manifest.patch_size = patch_size;
  manifest.segmentation_params = segmentation_params_to_json(mask.params);
  for (int y = 0; y + extent <= l0.height; y += step) {
    for (int x = 0; x + extent <= l0.width; x += step) {
      if (mask_contains(mask, x + extent / 2.0, y + extent / 2.0)) {
        manifest.coordinates.push_back({x, y});
      }
    }
  }
  if (manifest.coordinates.empty()) {
    throw MilError(ErrorCode::kEmptyManifest, "no patch centre falls on tissue");
  }
  return manifest;
}

cv::Mat crop_patch(const PyramidalImage& img, const bagio::PatchManifest& manifest,
                   const bagio::Coordinate& at) {
  const PlaneInfo plane = resolve_plane(img, manifest.magnification);
  const int ps = manifest.patch_size;
  if (plane.native_level >= 0) {
    return img.read_region(plane.native_level, at.x, at.y, ps, ps);
  }
  // Finest level whose downsample divides the target factor.
  const auto& levels = img.levels();
  int source = 0;
  int ratio = static_cast<int>(std::lround(plane.factor));
  for (std::size_t i = 1; i < levels.size(); ++i) {
    const double r = plane.factor / levels[i].downsample;
    if (r >= 1.0 && std::abs(r - std::round(r)) < 1e-6) {
      source = static_cast<int>(i);
      ratio = static_cast<int>(std::lround(r));
    }
  }
  const cv::Mat block = img.read_region(source, at.x, at.y, ps * ratio, ps * ratio);
  return box_downsample(block, ratio);
}

void crop_patches(
    const PyramidalImage& img, const bagio::PatchManifest& manifest,
    const std::function<void(const bagio::Coordinate&, const cv::Mat&)>& sink) {
  for (const auto& c : manifest.coordinates) sink(c, crop_patch(img, manifest, c));
}

}  // namespace milkit::preprocess
