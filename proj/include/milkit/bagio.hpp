#ifndef MILKIT_BAGIO_HPP_
#define MILKIT_BAGIO_HPP_

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace milkit::bagio {

using FeatureMatrix =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct SlideRecord {
  std::string slide_id;
  std::string patient_id;
  int label = 0;
  std::string class_name;
  std::string source_path;  // empty for synthetic bags
  std::vector<double> available_magnifications;
};

struct DatasetIndex {
  std::vector<SlideRecord> slides;
  std::vector<std::string> classes;  // lexicographic; label = position

  int num_classes() const { return static_cast<int>(classes.size()); }
  const SlideRecord* find(const std::string& slide_id) const;
  const SlideRecord& at(const std::string& slide_id) const;
  std::vector<int> class_counts() const;
};

// A manifest entry before labels are assigned.
struct RawRecord {
  std::string slide_id;
  std::string patient_id;
  std::string class_name;
  std::string path;
  std::vector<double> magnifications;
};

DatasetIndex build_index(const std::vector<RawRecord>& records);
// Accepts a JSON manifest file, a directory holding manifest.json, or a
// directory laid out as <root>/<class_name>/<slide image>.
DatasetIndex build_index(const std::filesystem::path& root);

nlohmann::json index_to_json(const DatasetIndex& index);
void write_index(const DatasetIndex& index, const std::filesystem::path& path);

struct Coordinate {
  int x = 0;
  int y = 0;
  friend bool operator==(const Coordinate&, const Coordinate&) = default;
};

struct PatchManifest {
  std::string slide_id;
  double magnification = 20.0;
  int patch_size = 256;
  std::vector<Coordinate> coordinates;  // level-0 top-left corners
  nlohmann::json segmentation_params = nlohmann::json::object();
};

nlohmann::json manifest_to_json(const PatchManifest& manifest);
PatchManifest manifest_from_json(const nlohmann::json& j);
void write_manifest(const PatchManifest& manifest,
                    const std::filesystem::path& path);
PatchManifest read_manifest(const std::filesystem::path& path);

struct FeatureBag {
  std::string slide_id;
  std::string encoder_id;
  FeatureMatrix features;  // N x D, row i <-> coordinates[i]

  std::int64_t num_instances() const { return features.rows(); }
  std::int64_t feature_dim() const { return features.cols(); }
};

// MILFB1 layout, little-endian:
//   "MILFB1" 0x00 | u32 version | u64 N | u32 D | u8 dtype |
//   u16 len + encoder_id | u16 len + slide_id | N*D float32 row-major
inline constexpr std::uint32_t kBagFormatVersion = 1;
inline constexpr std::uint8_t kDtypeFloat32 = 0;

std::size_t bag_header_size(const FeatureBag& bag);
std::vector<std::uint8_t> encode_feature_bag(const FeatureBag& bag);
FeatureBag decode_feature_bag(const std::vector<std::uint8_t>& bytes);
void write_feature_bag(const FeatureBag& bag, const std::filesystem::path& path);
FeatureBag read_feature_bag(const std::filesystem::path& path);

struct SplitFractions {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
};

struct SplitSpec {
  std::int64_t data_seed = 0;
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::vector<std::string> test;
  SplitFractions fractions;
};

// Patients are shuffled by the seed and whole patients are assigned
// greedily to train, then val, until each target slide count is reached;
// test takes the remainder.
SplitSpec make_split(const DatasetIndex& index, std::int64_t data_seed,
                     const SplitFractions& fractions = {});

nlohmann::json split_to_json(const SplitSpec& split);
SplitSpec split_from_json(const nlohmann::json& j);
void write_split(const SplitSpec& split, const std::filesystem::path& path);
SplitSpec read_split(const std::filesystem::path& path);

struct SyntheticSpec {
  int num_classes = 2;
  int bags_per_class = 20;
  int min_instances = 20;
  int max_instances = 60;
  int feature_dim = 64;
  double signal_fraction = 0.05;
  double signal_separation = 6.0;
  double noise_sigma = 1.0;
  std::uint64_t seed = 0;
};

nlohmann::json synthetic_spec_to_json(const SyntheticSpec& spec);
SyntheticSpec synthetic_spec_from_json(const nlohmann::json& j);

struct SyntheticDataset {
  DatasetIndex index;
  std::vector<FeatureBag> bags;
  std::vector<PatchManifest> manifests;
  std::vector<std::vector<std::uint8_t>> signal_masks;  // 1 = planted signal
};

inline constexpr const char* kSyntheticEncoderId = "synthetic";

// Signal instances of class c are drawn around separation * e_c, the rest
// around the origin, all with isotropic noise_sigma.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace milkit::bagio

#endif  // MILKIT_BAGIO_HPP_
