#include "milkit/train.hpp"

#include <algorithm>
#include <cfloat>
#include <cmath>
#include <limits>

#include "milkit/error.hpp"
#include "milkit/rng.hpp"

namespace milkit::train {

void TrainConfig::validate() const {
  const auto bad = [](const std::string& why) {
    return MilError(ErrorCode::kInvalidArgument, "TrainConfig: " + why);
  };
  if (!(learning_rate > 0.0)) throw bad("learning_rate must be > 0");
  if (weight_decay < 0.0) throw bad("weight_decay must be >= 0");
  if (max_epochs < 1) throw bad("max_epochs must be >= 1");
  if (min_epochs < 0 || min_epochs > max_epochs) throw bad("need 0 <= min_epochs <= max_epochs");
  if (patience < 1) throw bad("patience must be >= 1");
  if (batch_size != 1) throw bad("batch_size must be 1");
  if (lookahead_k < 1) throw bad("lookahead_k must be >= 1");
  if (!(lookahead_alpha > 0.0 && lookahead_alpha <= 1.0)) throw bad("lookahead_alpha must be in (0, 1]");
  if (grad_clip_norm < 0.0) throw bad("grad_clip_norm must be >= 0");
}

nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"max_epochs", c.max_epochs},
          {"min_epochs", c.min_epochs},
          {"patience", c.patience},
          {"batch_size", c.batch_size},
          {"optimizer", c.optimizer == OptimizerKind::kAdam ? "adam" : "lookahead_adam"},
          {"lookahead_k", c.lookahead_k},
          {"lookahead_alpha", c.lookahead_alpha},
          {"model_seed", c.model_seed},
          {"grad_clip_norm", c.grad_clip_norm}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.min_epochs = j.value("min_epochs", c.min_epochs);
  c.patience = j.value("patience", c.patience);
  c.batch_size = j.value("batch_size", c.batch_size);
  const std::string opt = j.value("optimizer", std::string("adam"));
  if (opt == "adam") {
    c.optimizer = OptimizerKind::kAdam;
  } else if (opt == "lookahead_adam") {
    c.optimizer = OptimizerKind::kLookaheadAdam;
  } else {
    throw MilError(ErrorCode::kInvalidArgument, "unknown optimizer '" + opt + "'");
  }
  c.lookahead_k = j.value("lookahead_k", c.lookahead_k);
  c.lookahead_alpha = j.value("lookahead_alpha", c.lookahead_alpha);
  c.model_seed = j.value("model_seed", c.model_seed);
  c.grad_clip_norm = j.value("grad_clip_norm", c.grad_clip_norm);
  return c;
}

OptimizerKind default_optimizer(const std::string& family) {
  return family == "transmil" ? OptimizerKind::kLookaheadAdam : OptimizerKind::kAdam;
}

// ---------------------------------------------------------------- sampler

ClassBalancedSampler::ClassBalancedSampler(std::span<const int> labels, int num_classes) {
  if (labels.empty()) throw MilError(ErrorCode::kEmptyClass, "no training slides");
  std::vector<int> counts(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) {
    if (y < 0 || y >= num_classes) throw MilError(ErrorCode::kInvalidArgument, "label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int c = 0; c < num_classes; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0) {
      throw MilError(ErrorCode::kEmptyClass, "class " + std::to_string(c) + " has no training slides");
    }
  }
  double total = 0.0;
  for (int y : labels) {
    const double w = 1.0 / counts[static_cast<std::size_t>(y)];
    weights_.push_back(w);
    total += w;
    cumulative_.push_back(total);
  }
}

std::size_t ClassBalancedSampler::draw(Rng& rng) const {
  const double u = rng.uniform() * cumulative_.back();
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  const auto i = static_cast<std::size_t>(it - cumulative_.begin());
  return std::min(i, cumulative_.size() - 1);
}

// ------------------------------------------------------------- optimizers

Adam::Adam(std::vector<ag::Var> params, double lr, double weight_decay, double beta1,
           double beta2, double eps)
    : params_(std::move(params)), lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2),
      eps_(eps) {
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Matrix& w = params_[i]->value;
    Matrix g = params_[i]->grad.size() == 0 ? Matrix::Zero(w.rows(), w.cols()) : params_[i]->grad;
    if (wd_ != 0.0) g += wd_ * w;
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * g;
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * g.cwiseProduct(g);
    w.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps_);
  }
}

Lookahead::Lookahead(std::unique_ptr<Optimizer> inner, std::vector<ag::Var> params, int k,
                     double alpha)
    : inner_(std::move(inner)), params_(std::move(params)), k_(k), alpha_(alpha) {
  if (k_ < 1 || !(alpha_ > 0.0 && alpha_ <= 1.0)) {
    throw MilError(ErrorCode::kInvalidArgument, "Lookahead needs k >= 1 and 0 < alpha <= 1");
  }
  for (const auto& p : params_) slow_.push_back(p->value);
}

void Lookahead::step() {
  inner_->step();
  if (++count_ % k_ != 0) return;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    slow_[i] += alpha_ * (params_[i]->value - slow_[i]);
    params_[i]->value = slow_[i];
  }
}

std::unique_ptr<Optimizer> make_optimizer(const TrainConfig& config, model::ParamStore& params) {
  std::vector<ag::Var> vars;
  for (const auto& item : params.items()) vars.push_back(item.second);
  auto adam = std::make_unique<Adam>(vars, config.learning_rate, config.weight_decay);
  if (config.optimizer == OptimizerKind::kAdam) return adam;
  return std::make_unique<Lookahead>(std::move(adam), vars, config.lookahead_k,
                                     config.lookahead_alpha);
}

// ---------------------------------------------------------- early stopping

EarlyStopping::EarlyStopping(int min_epochs, int max_epochs, int patience)
    : min_epochs_(min_epochs), max_epochs_(max_epochs), patience_(patience),
      best_loss_(std::numeric_limits<double>::infinity()) {}

bool EarlyStopping::update(int epoch, double val_loss) {
  epoch_ = epoch;
  if (val_loss < best_loss_) {
    best_loss_ = val_loss;
    best_epoch_ = epoch;
    since_ = 0;
    return true;
  }
  ++since_;
  return false;
}

bool EarlyStopping::should_stop() const {
  if (epoch_ >= max_epochs_) return true;
  return epoch_ >= min_epochs_ && since_ >= patience_;
}

// -------------------------------------------------------------------- data

std::vector<LabeledBag> gather_bags(const bagio::DatasetIndex& index,
                                    const std::map<std::string, const bagio::FeatureBag*>& bags,
                                    const std::vector<std::string>& ids) {
  std::vector<std::string> missing;
  for (const auto& id : ids) {
    if (bags.find(id) == bags.end()) missing.push_back(id);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : ", ") + id;
    throw MilError(ErrorCode::kMissingBags, "no feature bag for: " + list);
  }
  std::vector<LabeledBag> out;
  out.reserve(ids.size());
  for (const auto& id : ids) {
    const bagio::FeatureBag& bag = *bags.at(id);
    if (!out.empty() && out.front().features.cols() != bag.feature_dim()) {
      throw MilError(ErrorCode::kDimMismatch, "bag " + id + " has D=" +
                                                  std::to_string(bag.feature_dim()) +
                                                  ", expected " +
                                                  std::to_string(out.front().features.cols()));
    }
    out.push_back({id, index.at(id).label, bag.features.cast<double>()});
  }
  return out;
}

nlohmann::json epoch_log_to_json(const EpochLog& e) {
  return {{"epoch", e.epoch},
          {"train_loss", e.train_loss},
          {"val_loss", e.val_loss},
          {"val_accuracy", e.val_accuracy},
          {"lr", e.lr}};
}

ValidationStats validate_model(const model::MilModel& model, std::span<const LabeledBag> bags) {
  if (bags.empty()) throw MilError(ErrorCode::kInvalidArgument, "validation set is empty");
  ValidationStats s;
  int correct = 0;
  for (const auto& bag : bags) {
    const model::Prediction p = model.predict(bag.features);
    const double prob = p.probabilities[static_cast<std::size_t>(bag.label)];
    s.loss -= std::log(std::max(prob, DBL_MIN));
    if (p.predicted == bag.label) ++correct;
  }
  s.loss /= static_cast<double>(bags.size());
  s.accuracy = static_cast<double>(correct) / static_cast<double>(bags.size());
  return s;
}

namespace {

void clip_gradients(model::ParamStore& params, double max_norm) {
  double sq = 0.0;
  for (const auto& item : params.items()) {
    if (item.second->grad.size() != 0) sq += item.second->grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm <= max_norm) return;
  for (const auto& item : params.items()) {
    if (item.second->grad.size() != 0) item.second->grad *= max_norm / norm;
  }
}

}  // namespace

TrainResult train_model(const ModelSpec& spec, std::span<const LabeledBag> train,
                        std::span<const LabeledBag> val, const TrainConfig& config,
                        const TrainOptions& options) {
  config.validate();
  if (train.empty()) throw MilError(ErrorCode::kEmptyClass, "training set is empty");
  if (val.empty()) throw MilError(ErrorCode::kInvalidArgument, "validation set is empty");
  const auto dim = train.front().features.cols();
  for (const auto* set : {&train, &val}) {
    for (const auto& bag : *set) {
      if (bag.features.cols() != dim) {
        throw MilError(ErrorCode::kDimMismatch, "bag " + bag.slide_id + " has inconsistent D");
      }
    }
  }

  nlohmann::json model_config = spec.config;
  if (!model_config.contains("input_dim")) model_config["input_dim"] = dim;
  if (!model_config.contains("num_classes")) {
    int max_label = 1;
    for (const auto& b : train) max_label = std::max(max_label, b.label);
    for (const auto& b : val) max_label = std::max(max_label, b.label);
    model_config["num_classes"] = max_label + 1;
  }
  const auto seed = static_cast<std::uint64_t>(config.model_seed);
  auto model = model::make_model(spec.family, model_config, mix_seed(seed, kInitStream));

  std::vector<int> labels;
  for (const auto& b : train) labels.push_back(b.label);
  const ClassBalancedSampler sampler(labels, model->num_classes());
  Rng sampler_rng(mix_seed(seed, kSamplerStream));
  Rng dropout_rng(mix_seed(seed, kDropoutStream));
  auto optimizer = make_optimizer(config, model->params());
  EarlyStopping stopper(config.min_epochs, config.max_epochs, config.patience);

  TrainResult result;
  std::vector<Matrix> best = model->params().snapshot();
  model->params().zero_grad();
  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    double total = 0.0;
    for (std::size_t step = 0; step < train.size(); ++step) {
      const LabeledBag& bag = train[sampler.draw(sampler_rng)];
      ag::Tape tape;
      model::LossTerms terms;
      const ag::Var loss = model->loss(tape, bag.features, bag.label, &dropout_rng, &terms);
      if (!std::isfinite(terms.total)) {
        throw MilError(ErrorCode::kNonFiniteLoss,
                       "non-finite loss on slide " + bag.slide_id + " at epoch " +
                           std::to_string(epoch));
      }
      tape.backward(loss);
      if (config.grad_clip_norm > 0.0) clip_gradients(model->params(), config.grad_clip_norm);
      optimizer->step();
      model->params().zero_grad();
      total += terms.total;
    }

    const ValidationStats vs = validate_model(*model, val);
    EpochLog entry{epoch, total / static_cast<double>(train.size()), vs.loss, vs.accuracy,
                   optimizer->learning_rate()};
    if (options.val_loss_override) entry.val_loss = options.val_loss_override(epoch, vs.loss);
    if (!std::isfinite(entry.val_loss)) {
      throw MilError(ErrorCode::kNonFiniteLoss, "non-finite validation loss at epoch " +
                                                    std::to_string(epoch));
    }
    result.log.push_back(entry);
    if (options.log_stream != nullptr) {
      *options.log_stream << epoch_log_to_json(entry).dump() << '\n';
      options.log_stream->flush();
    }
    if (stopper.update(epoch, entry.val_loss)) best = model->params().snapshot();
    if (stopper.should_stop()) break;
  }

  model->params().restore(best);
  result.epochs_trained = stopper.epoch();
  result.best_epoch = stopper.best_epoch();
  result.best_val_loss = stopper.best_loss();
  if (options.checkpoint_path) {
    nlohmann::json meta = options.checkpoint_metadata;
    meta["best_epoch"] = result.best_epoch;
    meta["best_val_loss"] = result.best_val_loss;
    meta["epochs_trained"] = result.epochs_trained;
    meta["train_config"] = train_config_to_json(config);
    model::save_checkpoint(*model, *options.checkpoint_path, meta);
  }
  result.model = std::move(model);
  return result;
}

}  // namespace milkit::train
