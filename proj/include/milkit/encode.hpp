#ifndef MILKIT_ENCODE_HPP_
#define MILKIT_ENCODE_HPP_

#include <opencv2/core.hpp>

#include <array>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>

#include "milkit/bagio.hpp"
#include "milkit/preprocess.hpp"

namespace milkit::encode {

struct Normalization {
  std::array<float, 3> mean{0.485f, 0.456f, 0.406f};
  std::array<float, 3> std{0.229f, 0.224f, 0.225f};
};

struct EncoderSpec {
  std::string encoder_id;
  int output_dim = 0;
  int input_size = 224;
  Normalization normalization;
  std::string weights_source;  // path to a network file; unused by randproj-test
};

nlohmann::json encoder_spec_to_json(const EncoderSpec& spec);
EncoderSpec encoder_spec_from_json(const nlohmann::json& j);

// Maps RGB uint8 patches to float features. Implementations are read-only
// after construction and accept concurrent encode_batch calls.
class Encoder {
 public:
  virtual ~Encoder() = default;
  virtual const EncoderSpec& spec() const = 0;
  // Rows follow the order of `blocks`.
  virtual bagio::FeatureMatrix encode_batch(std::span<const cv::Mat> blocks) const = 0;
};

// Resize to input_size, scale to [0, 1], subtract mean, divide by std.
// Returns CHW-planar floats.
std::vector<float> normalize_patch(const cv::Mat& rgb, int input_size,
                                   const Normalization& norm);

inline constexpr const char* kRandProjId = "randproj-test";

// Seeded Gaussian projection of the flattened normalised patch. The seed is
// a hash of the encoder id so every process builds the same matrix.
class RandomProjectionEncoder : public Encoder {
 public:
  explicit RandomProjectionEncoder(EncoderSpec spec);

  const EncoderSpec& spec() const override { return spec_; }
  bagio::FeatureMatrix encode_batch(std::span<const cv::Mat> blocks) const override;

  // D x (3 * input_size^2), columns in CHW order.
  const bagio::FeatureMatrix& projection() const { return projection_; }

 private:
  EncoderSpec spec_;
  bagio::FeatureMatrix projection_;
};

// Runs an externally trained backbone (ONNX, Caffe, TensorFlow, Darknet)
// through OpenCV's DNN module. The network's output is flattened per
// image and must have output_dim entries.
class DnnEncoder : public Encoder {
 public:
  explicit DnnEncoder(EncoderSpec spec);
  ~DnnEncoder() override;

  const EncoderSpec& spec() const override { return spec_; }
  bagio::FeatureMatrix encode_batch(std::span<const cv::Mat> blocks) const override;

 private:
  struct Impl;
  EncoderSpec spec_;
  std::unique_ptr<Impl> impl_;
};

using EncoderFactory = std::function<std::unique_ptr<Encoder>(const EncoderSpec&)>;

// Registry keyed by encoder_id. The built-in entries are
// resnet50-imagenet, densenet121-imagenet, kimianet and randproj-test.
class EncoderRegistry {
 public:
  static EncoderRegistry& global();

  EncoderRegistry();
  void register_encoder(const EncoderSpec& defaults, EncoderFactory factory);
  bool contains(const std::string& encoder_id) const;
  EncoderSpec default_spec(const std::string& encoder_id) const;
  std::unique_ptr<Encoder> create(const EncoderSpec& spec) const;
  std::vector<std::string> ids() const;

 private:
  struct Entry {
    EncoderSpec defaults;
    EncoderFactory factory;
  };
  mutable std::mutex mutex_;
  std::map<std::string, Entry> entries_;
};

std::unique_ptr<Encoder> load_encoder(const EncoderSpec& spec);

// Crops every manifest patch, encodes in batches of batch_size and returns
// the bag with row i for coordinate i.
bagio::FeatureBag encode_slide(const Encoder& encoder,
                               const preprocess::PyramidalImage& img,
                               const bagio::PatchManifest& manifest,
                               int batch_size = 32);

}  // namespace milkit::encode

#endif  // MILKIT_ENCODE_HPP_
