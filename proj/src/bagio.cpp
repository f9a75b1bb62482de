#include "milkit/bagio.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "milkit/error.hpp"
#include "milkit/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace milkit::bagio {

const SlideRecord* DatasetIndex::find(const std::string& slide_id) const {
  for (const auto& s : slides) {
    if (s.slide_id == slide_id) return &s;
  }
  return nullptr;
}

const SlideRecord& DatasetIndex::at(const std::string& slide_id) const {
  const SlideRecord* s = find(slide_id);
  if (s == nullptr) {
    throw MilError(ErrorCode::kInvalidArgument, "unknown slide " + slide_id);
  }
  return *s;
}

std::vector<int> DatasetIndex::class_counts() const {
  std::vector<int> counts(classes.size(), 0);
  for (const auto& s : slides) ++counts[static_cast<std::size_t>(s.label)];
  return counts;
}

DatasetIndex build_index(const std::vector<RawRecord>& records) {
  if (records.empty()) throw MilError(ErrorCode::kEmptyIndex, "no records");
  std::set<std::string> seen;
  std::set<std::string> class_names;
  for (const auto& r : records) {
    if (r.class_name.empty()) {
      throw MilError(ErrorCode::kUnknownClass,
                     "record " + r.slide_id + " has no class_name");
    }
    if (r.slide_id.empty()) {
      throw MilError(ErrorCode::kInvalidArgument, "record without slide_id");
    }
    if (r.patient_id.empty()) {
      throw MilError(ErrorCode::kInvalidArgument,
                     "record " + r.slide_id + " has no patient_id");
    }
    if (!seen.insert(r.slide_id).second) {
      throw MilError(ErrorCode::kDuplicateSlideId, r.slide_id);
    }
    class_names.insert(r.class_name);
  }
  DatasetIndex index;
  index.classes.assign(class_names.begin(), class_names.end());
  for (const auto& r : records) {
    SlideRecord s;
    s.slide_id = r.slide_id;
    s.patient_id = r.patient_id;
    s.class_name = r.class_name;
    s.label = static_cast<int>(
        std::lower_bound(index.classes.begin(), index.classes.end(),
                         r.class_name) -
        index.classes.begin());
    s.source_path = r.path;
    s.available_magnifications = r.magnifications;
    index.slides.push_back(std::move(s));
  }
  return index;
}

namespace {

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MilError(ErrorCode::kIoError, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw MilError(ErrorCode::kIoError,
                   "malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const json& j, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw MilError(ErrorCode::kIoError, "cannot write " + path.string());
  out << j.dump(2) << "\n";
}

std::vector<RawRecord> records_from_json(const json& arr) {
  if (!arr.is_array()) {
    throw MilError(ErrorCode::kInvalidArgument,
                   "dataset manifest must be a JSON array");
  }
  std::vector<RawRecord> out;
  for (const auto& e : arr) {
    RawRecord r;
    r.slide_id = e.value("slide_id", "");
    r.patient_id = e.value("patient_id", "");
    r.class_name = e.value("class_name", "");
    r.path = e.value("path", "");
    if (e.contains("magnifications")) {
      r.magnifications = e.at("magnifications").get<std::vector<double>>();
    }
    out.push_back(std::move(r));
  }
  return out;
}

bool is_slide_image(const fs::path& p) {
  static const std::set<std::string> kExt = {
      ".png", ".jpg", ".jpeg", ".tif", ".tiff", ".bmp",
      ".svs", ".ndpi", ".mrxs", ".scn"};
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return kExt.count(ext) > 0;
}

}  // namespace

DatasetIndex build_index(const fs::path& root) {
  if (fs::is_regular_file(root)) {
    return build_index(records_from_json(read_json_file(root)));
  }
  if (!fs::is_directory(root)) {
    throw MilError(ErrorCode::kIoError, "no such manifest " + root.string());
  }
  if (fs::is_regular_file(root / "manifest.json")) {
    return build_index(records_from_json(read_json_file(root / "manifest.json")));
  }
  std::vector<fs::path> files;
  for (const auto& cls : fs::directory_iterator(root)) {
    if (!cls.is_directory()) continue;
    for (const auto& f : fs::directory_iterator(cls.path())) {
      if (f.is_regular_file() && is_slide_image(f.path())) {
        files.push_back(f.path());
      }
    }
  }
  std::sort(files.begin(), files.end());
  std::vector<RawRecord> records;
  for (const auto& f : files) {
    RawRecord r;
    r.slide_id = f.stem().string();
    r.patient_id = r.slide_id;
    r.class_name = f.parent_path().filename().string();
    r.path = f.string();
    records.push_back(std::move(r));
  }
  return build_index(records);
}

json index_to_json(const DatasetIndex& index) {
  json arr = json::array();
  for (const auto& s : index.slides) {
    arr.push_back({{"slide_id", s.slide_id},
                   {"patient_id", s.patient_id},
                   {"class_name", s.class_name},
                   {"path", s.source_path},
                   {"magnifications", s.available_magnifications}});
  }
  return arr;
}

void write_index(const DatasetIndex& index, const fs::path& path) {
  write_json_file(index_to_json(index), path);
}

json manifest_to_json(const PatchManifest& m) {
  json coords = json::array();
  for (const auto& c : m.coordinates) coords.push_back({c.x, c.y});
  return {{"slide_id", m.slide_id},
          {"magnification", m.magnification},
          {"patch_size", m.patch_size},
          {"coordinates", coords},
          {"segmentation_params", m.segmentation_params}};
}

PatchManifest manifest_from_json(const json& j) {
  PatchManifest m;
  m.slide_id = j.at("slide_id").get<std::string>();
  m.magnification = j.at("magnification").get<double>();
  m.patch_size = j.at("patch_size").get<int>();
  for (const auto& c : j.at("coordinates")) {
    m.coordinates.push_back({c.at(0).get<int>(), c.at(1).get<int>()});
  }
  if (j.contains("segmentation_params")) {
    m.segmentation_params = j.at("segmentation_params");
  }
  return m;
}

void write_manifest(const PatchManifest& manifest, const fs::path& path) {
  write_json_file(manifest_to_json(manifest), path);
}

PatchManifest read_manifest(const fs::path& path) {
  return manifest_from_json(read_json_file(path));
}

// ---------------------------------------------------------------- MILFB1

namespace {

constexpr char kMagic[7] = {'M', 'I', 'L', 'F', 'B', '1', '\0'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(
        (static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
  }
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw MilError(ErrorCode::kTruncatedFile,
                     "need " + std::to_string(n) + " bytes at offset " +
                         std::to_string(pos_));
    }
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  const std::uint8_t* cursor() const { return bytes_.data() + pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  if (s.size() > 0xFFFF) {
    throw MilError(ErrorCode::kInvalidArgument, "identifier longer than 65535 bytes");
  }
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

}  // namespace

std::size_t bag_header_size(const FeatureBag& bag) {
  return sizeof(kMagic) + 4 + 8 + 4 + 1 + 2 + bag.encoder_id.size() + 2 +
         bag.slide_id.size();
}

std::vector<std::uint8_t> encode_feature_bag(const FeatureBag& bag) {
  if (bag.features.rows() < 1 || bag.features.cols() < 1) {
    throw MilError(ErrorCode::kInvalidArgument, "bag must be non-empty");
  }
  if (!bag.features.allFinite()) {
    throw MilError(ErrorCode::kNonFiniteFeature, bag.slide_id);
  }
  std::vector<std::uint8_t> out;
  const std::size_t count = static_cast<std::size_t>(bag.features.size());
  out.reserve(bag_header_size(bag) + count * 4);
  out.insert(out.end(), kMagic, kMagic + sizeof(kMagic));
  put_le<std::uint32_t>(out, kBagFormatVersion);
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(bag.features.rows()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(bag.features.cols()));
  put_le<std::uint8_t>(out, kDtypeFloat32);
  put_string(out, bag.encoder_id);
  put_string(out, bag.slide_id);
  const float* data = bag.features.data();
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, &data[i], 4);
    put_le<std::uint32_t>(out, bits);
  }
  return out;
}

FeatureBag decode_feature_bag(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  r.need(sizeof(kMagic));
  if (std::memcmp(r.cursor(), kMagic, sizeof(kMagic)) != 0) {
    throw MilError(ErrorCode::kBadMagic, "not an MILFB1 file");
  }
  r.str(sizeof(kMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kBagFormatVersion) {
    throw MilError(ErrorCode::kUnsupportedVersion,
                   "version " + std::to_string(version));
  }
  const auto n = r.get<std::uint64_t>();
  const auto d = r.get<std::uint32_t>();
  const auto dtype = r.get<std::uint8_t>();
  if (dtype != kDtypeFloat32) {
    throw MilError(ErrorCode::kUnsupportedVersion,
                   "dtype code " + std::to_string(dtype));
  }
  FeatureBag bag;
  bag.encoder_id = r.str(r.get<std::uint16_t>());
  bag.slide_id = r.str(r.get<std::uint16_t>());
  if (n == 0 || d == 0) {
    throw MilError(ErrorCode::kTruncatedFile, "empty bag dimensions");
  }
  if (n > r.remaining() / 4 / d) {
    throw MilError(ErrorCode::kTruncatedFile,
                   "payload shorter than " + std::to_string(n) + "x" +
                       std::to_string(d));
  }
  bag.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  float* data = bag.features.data();
  const std::size_t count = static_cast<std::size_t>(n) * d;
  for (std::size_t i = 0; i < count; ++i) {
    const auto bits = r.get<std::uint32_t>();
    std::memcpy(&data[i], &bits, 4);
    if (!std::isfinite(data[i])) {
      throw MilError(ErrorCode::kNonFiniteFeature,
                     bag.slide_id + " element " + std::to_string(i));
    }
  }
  return bag;
}

void write_feature_bag(const FeatureBag& bag, const fs::path& path) {
  const auto bytes = encode_feature_bag(bag);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MilError(ErrorCode::kIoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw MilError(ErrorCode::kIoError, "short write " + path.string());
}

FeatureBag read_feature_bag(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MilError(ErrorCode::kIoError, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_feature_bag(bytes);
}

// ------------------------------------------------------------------ split

SplitSpec make_split(const DatasetIndex& index, std::int64_t data_seed,
                     const SplitFractions& f) {
  if (!(f.train > 0 && f.val > 0 && f.test > 0) ||
      std::abs(f.train + f.val + f.test - 1.0) > 1e-9) {
    throw MilError(ErrorCode::kInvalidFractions,
                   "fractions must be positive and sum to 1");
  }
  std::map<std::string, std::vector<std::string>> by_patient;
  for (const auto& s : index.slides) by_patient[s.patient_id].push_back(s.slide_id);
  std::vector<std::string> patients;
  for (const auto& [p, _] : by_patient) patients.push_back(p);

  Rng rng(mix_seed(static_cast<std::uint64_t>(data_seed), 0x5b1d));
  rng.shuffle(patients);

  const double total = static_cast<double>(index.slides.size());
  const auto n_train = static_cast<std::size_t>(std::llround(f.train * total));
  const auto n_val = static_cast<std::size_t>(std::llround(f.val * total));

  SplitSpec split;
  split.data_seed = data_seed;
  split.fractions = f;
  for (const auto& p : patients) {
    const auto& slides = by_patient[p];
    std::vector<std::string>* dest = &split.test;
    if (split.train.size() < n_train) {
      dest = &split.train;
    } else if (split.val.size() < n_val) {
      dest = &split.val;
    }
    dest->insert(dest->end(), slides.begin(), slides.end());
  }
  if (split.train.empty() || split.val.empty() || split.test.empty()) {
    throw MilError(ErrorCode::kTooFewPatients,
                   std::to_string(patients.size()) +
                       " patients cannot fill three partitions");
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

json split_to_json(const SplitSpec& s) {
  return {{"data_seed", s.data_seed},
          {"train", s.train},
          {"val", s.val},
          {"test", s.test},
          {"fractions", {s.fractions.train, s.fractions.val, s.fractions.test}}};
}

SplitSpec split_from_json(const json& j) {
  SplitSpec s;
  s.data_seed = j.at("data_seed").get<std::int64_t>();
  s.train = j.at("train").get<std::vector<std::string>>();
  s.val = j.at("val").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
  if (j.contains("fractions")) {
    const auto f = j.at("fractions").get<std::vector<double>>();
    if (f.size() == 3) s.fractions = {f[0], f[1], f[2]};
  }
  return s;
}

void write_split(const SplitSpec& split, const fs::path& path) {
  write_json_file(split_to_json(split), path);
}

SplitSpec read_split(const fs::path& path) {
  return split_from_json(read_json_file(path));
}

// -------------------------------------------------------------- synthetic

json synthetic_spec_to_json(const SyntheticSpec& s) {
  return {{"num_classes", s.num_classes},
          {"bags_per_class", s.bags_per_class},
          {"min_instances", s.min_instances},
          {"max_instances", s.max_instances},
          {"feature_dim", s.feature_dim},
          {"signal_fraction", s.signal_fraction},
          {"signal_separation", s.signal_separation},
          {"noise_sigma", s.noise_sigma},
          {"seed", s.seed}};
}

SyntheticSpec synthetic_spec_from_json(const json& j) {
  SyntheticSpec s;
  s.num_classes = j.value("num_classes", s.num_classes);
  s.bags_per_class = j.value("bags_per_class", s.bags_per_class);
  s.min_instances = j.value("min_instances", s.min_instances);
  s.max_instances = j.value("max_instances", s.max_instances);
  s.feature_dim = j.value("feature_dim", s.feature_dim);
  s.signal_fraction = j.value("signal_fraction", s.signal_fraction);
  s.signal_separation = j.value("signal_separation", s.signal_separation);
  s.noise_sigma = j.value("noise_sigma", s.noise_sigma);
  s.seed = j.value("seed", s.seed);
  return s;
}

namespace {

int signal_count(double fraction, int n) {
  // The epsilon keeps e.g. 0.05 * 60 from rounding up to 4.
  return std::max(1, static_cast<int>(std::ceil(fraction * n - 1e-9)));
}

std::string class_label(int c, int num_classes) {
  const int width = static_cast<int>(std::to_string(num_classes - 1).size());
  std::string digits = std::to_string(c);
  return "class_" + std::string(static_cast<std::size_t>(width) - digits.size(), '0') +
         digits;
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  const auto invalid = [](const std::string& why) {
    return MilError(ErrorCode::kInvalidSpec, why);
  };
  if (spec.num_classes < 2) throw invalid("num_classes must be >= 2");
  if (spec.bags_per_class < 1) throw invalid("bags_per_class must be >= 1");
  if (spec.min_instances < 1 || spec.max_instances < spec.min_instances) {
    throw invalid("instance range must satisfy 1 <= min <= max");
  }
  if (spec.feature_dim < spec.num_classes) {
    throw invalid("feature_dim must be >= num_classes");
  }
  if (!(spec.signal_fraction > 0.0 && spec.signal_fraction <= 1.0)) {
    throw invalid("signal_fraction must lie in (0, 1]");
  }
  if (spec.signal_fraction * spec.min_instances < 1.0 - 1e-9) {
    throw invalid("signal_fraction * min_instances must be >= 1");
  }
  if (!(spec.signal_separation > 0.0) || spec.noise_sigma < 0.0) {
    throw invalid("separation must be positive and sigma non-negative");
  }

  Rng rng(spec.seed);
  SyntheticDataset out;
  std::vector<RawRecord> records;
  constexpr int kPatch = 256;
  for (int c = 0; c < spec.num_classes; ++c) {
    const std::string cls = class_label(c, spec.num_classes);
    for (int b = 0; b < spec.bags_per_class; ++b) {
      std::ostringstream id;
      id << "syn_" << c << "_" << b;
      const int span = spec.max_instances - spec.min_instances + 1;
      const int n = spec.min_instances +
                    static_cast<int>(rng.index(static_cast<std::size_t>(span)));
      const int k = std::min(n, signal_count(spec.signal_fraction, n));

      std::vector<int> order(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
      rng.shuffle(order);
      std::vector<std::uint8_t> mask(static_cast<std::size_t>(n), 0);
      for (int i = 0; i < k; ++i) mask[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;

      FeatureBag bag;
      bag.slide_id = id.str();
      bag.encoder_id = kSyntheticEncoderId;
      bag.features.resize(n, spec.feature_dim);
      for (int i = 0; i < n; ++i) {
        for (int d = 0; d < spec.feature_dim; ++d) {
          double v = spec.noise_sigma * rng.normal();
          if (mask[static_cast<std::size_t>(i)] && d == c) v += spec.signal_separation;
          bag.features(i, d) = static_cast<float>(v);
        }
      }

      PatchManifest manifest;
      manifest.slide_id = bag.slide_id;
      manifest.magnification = 20.0;
      manifest.patch_size = kPatch;
      manifest.segmentation_params = {{"synthetic", true}};
      const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
      for (int i = 0; i < n; ++i) {
        manifest.coordinates.push_back({(i % cols) * kPatch, (i / cols) * kPatch});
      }

      records.push_back({bag.slide_id, bag.slide_id, cls, "", {20.0}});
      out.bags.push_back(std::move(bag));
      out.manifests.push_back(std::move(manifest));
      out.signal_masks.push_back(std::move(mask));
    }
  }
  out.index = build_index(records);
  return out;
}

}  // namespace milkit::bagio
