#ifndef MILKIT_TRAIN_HPP_
#define MILKIT_TRAIN_HPP_

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "milkit/bagio.hpp"
#include "milkit/model.hpp"

namespace milkit::train {

using ag::Matrix;

enum class OptimizerKind { kAdam, kLookaheadAdam };

struct TrainConfig {
  double learning_rate = 2e-4;
  double weight_decay = 1e-5;
  int max_epochs = 200;
  int min_epochs = 50;
  int patience = 20;
  int batch_size = 1;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  int lookahead_k = 5;
  double lookahead_alpha = 0.5;
  std::int64_t model_seed = 0;
  double grad_clip_norm = 0.0;  // 0 disables clipping

  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

// CLAM trains with plain Adam, TransMIL with Lookahead(Adam).
OptimizerKind default_optimizer(const std::string& family);

// Multinomial over slides with weight 1 / count(class of slide).
class ClassBalancedSampler {
 public:
  ClassBalancedSampler(std::span<const int> labels, int num_classes);

  const std::vector<double>& weights() const { return weights_; }
  std::size_t draw(Rng& rng) const;

 private:
  std::vector<double> weights_;
  std::vector<double> cumulative_;
};

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step() = 0;
  virtual double learning_rate() const = 0;
};

// Adam with coupled L2 weight decay (g += wd * theta).
class Adam : public Optimizer {
 public:
  Adam(std::vector<ag::Var> params, double lr, double weight_decay,
       double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step() override;
  double learning_rate() const override { return lr_; }
  const std::vector<ag::Var>& params() const { return params_; }

 private:
  std::vector<ag::Var> params_;
  std::vector<Matrix> m_, v_;
  double lr_, wd_, beta1_, beta2_, eps_;
  long long t_ = 0;
};

// Every k inner steps: slow += alpha (fast - slow), fast = slow.
class Lookahead : public Optimizer {
 public:
  Lookahead(std::unique_ptr<Optimizer> inner, std::vector<ag::Var> params, int k,
            double alpha);
  void step() override;
  double learning_rate() const override { return inner_->learning_rate(); }
  const std::vector<Matrix>& slow_weights() const { return slow_; }

 private:
  std::unique_ptr<Optimizer> inner_;
  std::vector<ag::Var> params_;
  std::vector<Matrix> slow_;
  int k_;
  double alpha_;
  long long count_ = 0;
};

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& config, model::ParamStore& params);

// Epochs are 1-indexed. A strict improvement resets the counter; stopping
// is allowed once epoch >= min_epochs and the counter has reached patience.
class EarlyStopping {
 public:
  EarlyStopping(int min_epochs, int max_epochs, int patience);

  // Records the monitored loss for `epoch`; returns true on improvement.
  bool update(int epoch, double val_loss);
  bool should_stop() const;

  int epoch() const { return epoch_; }
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_loss_; }
  int epochs_since_improvement() const { return since_; }

 private:
  int min_epochs_, max_epochs_, patience_;
  int epoch_ = 0;
  int best_epoch_ = 0;
  double best_loss_;
  int since_ = 0;
};

struct LabeledBag {
  std::string slide_id;
  int label = 0;
  Matrix features;  // N x D, float64
};

// Looks up every id in `bags`; throws MissingBags listing absent ids and
// DimMismatch when feature widths disagree.
std::vector<LabeledBag> gather_bags(const bagio::DatasetIndex& index,
                                    const std::map<std::string, const bagio::FeatureBag*>& bags,
                                    const std::vector<std::string>& ids);

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double lr = 0.0;
};

nlohmann::json epoch_log_to_json(const EpochLog& e);

struct ModelSpec {
  std::string family;  // clam_sb | clam_mb | transmil
  nlohmann::json config = nlohmann::json::object();
};

struct TrainOptions {
  // JSON-lines log, one object per epoch.
  std::ostream* log_stream = nullptr;
  std::optional<std::filesystem::path> checkpoint_path;
  nlohmann::json checkpoint_metadata = nlohmann::json::object();
  // Replaces the measured validation loss (testing the stopping rule).
  std::function<double(int epoch, double measured)> val_loss_override;
};

struct TrainResult {
  std::unique_ptr<model::MilModel> model;  // best weights
  std::vector<EpochLog> log;
  int epochs_trained = 0;
  int best_epoch = 0;
  double best_val_loss = 0.0;
};

struct ValidationStats {
  double loss = 0.0;      // mean bag cross-entropy
  double accuracy = 0.0;
};

ValidationStats validate_model(const model::MilModel& model, std::span<const LabeledBag> bags);

// Seed streams derived from model_seed.
inline constexpr std::uint64_t kInitStream = 1;
inline constexpr std::uint64_t kSamplerStream = 2;
inline constexpr std::uint64_t kDropoutStream = 3;

TrainResult train_model(const ModelSpec& spec, std::span<const LabeledBag> train,
                        std::span<const LabeledBag> val, const TrainConfig& config,
                        const TrainOptions& options = {});

}  // namespace milkit::train

#endif  // MILKIT_TRAIN_HPP_
