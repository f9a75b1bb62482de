#include "milkit/encode.hpp"

#include <opencv2/dnn.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <filesystem>

#include "milkit/error.hpp"
#include "milkit/rng.hpp"

namespace milkit::encode {

nlohmann::json encoder_spec_to_json(const EncoderSpec& s) {
  return {{"encoder_id", s.encoder_id},
          {"output_dim", s.output_dim},
          {"input_size", s.input_size},
          {"mean", s.normalization.mean},
          {"std", s.normalization.std},
          {"weights_source", s.weights_source}};
}

EncoderSpec encoder_spec_from_json(const nlohmann::json& j) {
  EncoderSpec s;
  s.encoder_id = j.at("encoder_id").get<std::string>();
  if (EncoderRegistry::global().contains(s.encoder_id)) {
    s = EncoderRegistry::global().default_spec(s.encoder_id);
  }
  s.output_dim = j.value("output_dim", s.output_dim);
  s.input_size = j.value("input_size", s.input_size);
  if (j.contains("mean")) s.normalization.mean = j.at("mean").get<std::array<float, 3>>();
  if (j.contains("std")) s.normalization.std = j.at("std").get<std::array<float, 3>>();
  s.weights_source = j.value("weights_source", s.weights_source);
  return s;
}

std::vector<float> normalize_patch(const cv::Mat& rgb, int input_size,
                                   const Normalization& norm) {
  if (rgb.empty() || rgb.type() != CV_8UC3) {
    throw MilError(ErrorCode::kInvalidArgument, "patch must be 8-bit RGB");
  }
  cv::Mat src = rgb;
  if (rgb.cols != input_size || rgb.rows != input_size) {
    const int interp = rgb.cols > input_size ? cv::INTER_AREA : cv::INTER_LINEAR;
    cv::resize(rgb, src, cv::Size(input_size, input_size), 0, 0, interp);
  }
  const std::size_t plane = static_cast<std::size_t>(input_size) * input_size;
  std::vector<float> out(3 * plane);
  for (int y = 0; y < input_size; ++y) {
    const auto* row = src.ptr<cv::Vec3b>(y);
    for (int x = 0; x < input_size; ++x) {
      const std::size_t at = static_cast<std::size_t>(y) * input_size + x;
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = static_cast<float>(row[x][static_cast<int>(c)]) / 255.0f;
        out[c * plane + at] = (v - norm.mean[c]) / norm.std[c];
      }
    }
  }
  return out;
}

// ----------------------------------------------------------- randproj-test

RandomProjectionEncoder::RandomProjectionEncoder(EncoderSpec spec)
    : spec_(std::move(spec)) {
  if (spec_.output_dim <= 0 || spec_.input_size <= 0) {
    throw MilError(ErrorCode::kInvalidArgument,
                   "randproj-test needs positive output_dim and input_size");
  }
  const Eigen::Index in = 3 * static_cast<Eigen::Index>(spec_.input_size) * spec_.input_size;
  projection_.resize(spec_.output_dim, in);
  Rng rng(fnv1a64(spec_.encoder_id));
  const double scale = 1.0 / std::sqrt(static_cast<double>(in));
  for (Eigen::Index i = 0; i < projection_.size(); ++i) {
    projection_.data()[i] = static_cast<float>(rng.normal() * scale);
  }
}

bagio::FeatureMatrix RandomProjectionEncoder::encode_batch(
    std::span<const cv::Mat> blocks) const {
  bagio::FeatureMatrix out(static_cast<Eigen::Index>(blocks.size()), spec_.output_dim);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto x = normalize_patch(blocks[b], spec_.input_size, spec_.normalization);
    const Eigen::Map<const Eigen::VectorXf> v(x.data(), static_cast<Eigen::Index>(x.size()));
    out.row(static_cast<Eigen::Index>(b)) = (projection_ * v).transpose();
  }
  return out;
}

// -------------------------------------------------------------- DNN bundle

struct DnnEncoder::Impl {
  cv::dnn::Net net;
  std::mutex mutex;  // cv::dnn::Net::forward mutates internal buffers
};

DnnEncoder::DnnEncoder(EncoderSpec spec) : spec_(std::move(spec)), impl_(new Impl) {
  namespace fs = std::filesystem;
  if (spec_.weights_source.empty() || !fs::exists(spec_.weights_source)) {
    throw MilError(ErrorCode::kWeightsNotFound,
                   spec_.encoder_id + " weights at '" + spec_.weights_source + "'");
  }
  try {
    impl_->net = cv::dnn::readNet(spec_.weights_source);
  } catch (const cv::Exception& e) {
    throw MilError(ErrorCode::kWeightsNotFound,
                   "cannot load " + spec_.weights_source + ": " + e.what());
  }
  if (impl_->net.empty()) {
    throw MilError(ErrorCode::kWeightsNotFound, spec_.weights_source);
  }
  impl_->net.setPreferableBackend(cv::dnn::DNN_BACKEND_OPENCV);
  impl_->net.setPreferableTarget(cv::dnn::DNN_TARGET_CPU);
  cv::Mat probe(spec_.input_size, spec_.input_size, CV_8UC3, cv::Scalar(0, 0, 0));
  const auto out = encode_batch(std::span<const cv::Mat>(&probe, 1));
  if (out.cols() != spec_.output_dim) {
    throw MilError(ErrorCode::kDimMismatch,
                   spec_.encoder_id + " produces " + std::to_string(out.cols()) +
                       " features, expected " + std::to_string(spec_.output_dim));
  }
}

DnnEncoder::~DnnEncoder() = default;

bagio::FeatureMatrix DnnEncoder::encode_batch(std::span<const cv::Mat> blocks) const {
  const int n = static_cast<int>(blocks.size());
  const int s = spec_.input_size;
  const int dims[4] = {n, 3, s, s};
  cv::Mat blob(4, dims, CV_32F);
  const std::size_t per = 3 * static_cast<std::size_t>(s) * s;
  for (int b = 0; b < n; ++b) {
    const auto x = normalize_patch(blocks[static_cast<std::size_t>(b)], s, spec_.normalization);
    std::copy(x.begin(), x.end(), blob.ptr<float>() + per * static_cast<std::size_t>(b));
  }
  cv::Mat out;
  {
    std::lock_guard<std::mutex> lock(impl_->mutex);
    impl_->net.setInput(blob);
    out = impl_->net.forward().clone();
  }
  const std::size_t total = out.total();
  if (n == 0 || total % static_cast<std::size_t>(n) != 0) {
    throw MilError(ErrorCode::kDimMismatch, "network output not divisible by batch");
  }
  const Eigen::Index d = static_cast<Eigen::Index>(total / static_cast<std::size_t>(n));
  bagio::FeatureMatrix features(n, d);
  std::copy(out.ptr<float>(), out.ptr<float>() + total, features.data());
  return features;
}

// ----------------------------------------------------------------- registry

EncoderRegistry& EncoderRegistry::global() {
  static EncoderRegistry registry;
  return registry;
}

EncoderRegistry::EncoderRegistry() {
  const auto dnn = [](const EncoderSpec& s) -> std::unique_ptr<Encoder> {
    return std::make_unique<DnnEncoder>(s);
  };
  // Pooled DenseNet121 features and the truncated third ResNet50 stage
  // are both 1024-wide.
  register_encoder({"resnet50-imagenet", 1024, 224, Normalization{}, ""}, dnn);
  register_encoder({"densenet121-imagenet", 1024, 224, Normalization{}, ""}, dnn);
  register_encoder({"kimianet", 1024, 224, Normalization{}, ""}, dnn);
  Normalization centred;
  centred.mean = {128.0f / 255.0f, 128.0f / 255.0f, 128.0f / 255.0f};
  centred.std = {0.25f, 0.25f, 0.25f};
  register_encoder({kRandProjId, 64, 256, centred, ""},
                   [](const EncoderSpec& s) -> std::unique_ptr<Encoder> {
                     return std::make_unique<RandomProjectionEncoder>(s);
                   });
}

void EncoderRegistry::register_encoder(const EncoderSpec& defaults,
                                       EncoderFactory factory) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (defaults.encoder_id.empty() || defaults.output_dim <= 0) {
    throw MilError(ErrorCode::kInvalidArgument, "encoder needs an id and output_dim > 0");
  }
  if (!entries_.emplace(defaults.encoder_id, Entry{defaults, std::move(factory)}).second) {
    throw MilError(ErrorCode::kDuplicateEncoder, defaults.encoder_id);
  }
}

bool EncoderRegistry::contains(const std::string& encoder_id) const {
  std::lock_guard<std::mutex> lock(mutex_);
  return entries_.count(encoder_id) > 0;
}

EncoderSpec EncoderRegistry::default_spec(const std::string& encoder_id) const {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = entries_.find(encoder_id);
  if (it == entries_.end()) throw MilError(ErrorCode::kUnknownEncoder, encoder_id);
  return it->second.defaults;
}

std::unique_ptr<Encoder> EncoderRegistry::create(const EncoderSpec& spec) const {
  EncoderFactory factory;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    auto it = entries_.find(spec.encoder_id);
    if (it == entries_.end()) throw MilError(ErrorCode::kUnknownEncoder, spec.encoder_id);
    factory = it->second.factory;
  }
  if (spec.output_dim <= 0) {
    throw MilError(ErrorCode::kInvalidArgument, "output_dim must be positive");
  }
  return factory(spec);
}

std::vector<std::string> EncoderRegistry::ids() const {
  std::lock_guard<std::mutex> lock(mutex_);
  std::vector<std::string> out;
  for (const auto& [id, _] : entries_) out.push_back(id);
  return out;
}

std::unique_ptr<Encoder> load_encoder(const EncoderSpec& spec) {
  return EncoderRegistry::global().create(spec);
}

bagio::FeatureBag encode_slide(const Encoder& encoder,
                               const preprocess::PyramidalImage& img,
                               const bagio::PatchManifest& manifest, int batch_size) {
  if (manifest.coordinates.empty()) {
    throw MilError(ErrorCode::kEmptyManifest, manifest.slide_id);
  }
  if (batch_size < 1) batch_size = 1;
  const auto n = static_cast<Eigen::Index>(manifest.coordinates.size());
  bagio::FeatureBag bag;
  bag.slide_id = manifest.slide_id;
  bag.encoder_id = encoder.spec().encoder_id;
  bag.features.resize(n, encoder.spec().output_dim);
  std::vector<cv::Mat> batch;
  Eigen::Index row = 0;
  const auto flush = [&] {
    if (batch.empty()) return;
    const auto f = encoder.encode_batch(batch);
    if (f.cols() != bag.features.cols()) {
      throw MilError(ErrorCode::kDimMismatch, "encoder returned wrong width");
    }
    bag.features.middleRows(row, f.rows()) = f;
    row += f.rows();
    batch.clear();
  };
  for (const auto& c : manifest.coordinates) {
    batch.push_back(preprocess::crop_patch(img, manifest, c));
    if (static_cast<int>(batch.size()) == batch_size) flush();
  }
  flush();
  if (!bag.features.allFinite()) {
    throw MilError(ErrorCode::kNonFiniteFeature, manifest.slide_id);
  }
  return bag;
}

}  // namespace milkit::encode
