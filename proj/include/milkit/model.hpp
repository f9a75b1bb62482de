#ifndef MILKIT_MODEL_HPP_
#define MILKIT_MODEL_HPP_

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "milkit/autograd.hpp"

namespace milkit {
class Rng;
}

namespace milkit::model {

using ag::Matrix;

// Named parameters in registration order. Registration order fixes the
// order of initialisation draws and the checkpoint layout.
class ParamStore {
 public:
  ag::Var add(const std::string& name, Matrix init);
  ag::Var get(const std::string& name) const;
  bool contains(const std::string& name) const;

  const std::vector<std::pair<std::string, ag::Var>>& items() const { return items_; }
  std::size_t scalar_count() const;
  void zero_grad();

  std::vector<Matrix> snapshot() const;
  void restore(const std::vector<Matrix>& values);

 private:
  std::vector<std::pair<std::string, ag::Var>> items_;
};

Matrix xavier_normal(int rows, int cols, Rng& rng);
Matrix uniform_matrix(int rows, int cols, double bound, Rng& rng);

struct LossTerms {
  double total = 0.0;
  double bag_ce = 0.0;
  double instance = 0.0;
};

struct Prediction {
  std::vector<double> probabilities;
  int predicted = 0;  // argmax, lowest index on ties
  // One score per input instance, used for heatmaps.
  std::vector<double> instance_attention;
};

int argmax(const std::vector<double>& values);

class MilModel {
 public:
  virtual ~MilModel() = default;

  // "clam_sb", "clam_mb" or "transmil".
  virtual std::string family() const = 0;
  virtual int num_classes() const = 0;
  virtual int input_dim() const = 0;
  virtual nlohmann::json config_json() const = 0;

  // Builds the training objective on `tape`. Dropout is active iff
  // dropout_rng is non-null.
  virtual ag::Var loss(ag::Tape& tape, const Matrix& features, int label,
                       Rng* dropout_rng, LossTerms* terms) = 0;

  // Inference without dropout; safe to call concurrently on a frozen model.
  virtual Prediction predict(const Matrix& features) const = 0;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

 protected:
  ParamStore params_;
};

std::unique_ptr<MilModel> make_model(const std::string& family,
                                     const nlohmann::json& config,
                                     std::uint64_t init_seed);

// Single-file archive: "MILCK1\0", u32 version, u64 header length, JSON
// header {family, config, metadata, tensors:[{name, rows, cols}]}, then
// every tensor as little-endian float64, row-major, in header order.
void save_checkpoint(const MilModel& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata = nlohmann::json::object());

struct LoadedCheckpoint {
  std::unique_ptr<MilModel> model;
  nlohmann::json metadata;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace milkit::model

#endif  // MILKIT_MODEL_HPP_
