#include "milkit/attnmil.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "milkit/error.hpp"
#include "milkit/rng.hpp"

namespace milkit::attnmil {

void ClamConfig::validate() const {
  const auto bad = [](const std::string& why) {
    return MilError(ErrorCode::kInvalidArgument, "ClamConfig: " + why);
  };
  if (input_dim < 1 || embed_dim < 1 || attn_hidden < 1) throw bad("dimensions must be positive");
  if (num_classes < 2) throw bad("num_classes must be >= 2");
  if (B < 1) throw bad("B must be >= 1");
  if (std::abs(bag_loss_weight + instance_loss_weight - 1.0) > 1e-9) {
    throw bad("bag and instance loss weights must sum to 1");
  }
  if (bag_loss_weight < 0 || instance_loss_weight < 0) throw bad("loss weights must be >= 0");
  if (!(svm_temperature > 0.0)) throw bad("svm_temperature must be > 0");
  if (svm_margin < 0.0) throw bad("svm_margin must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) throw bad("dropout must be in [0, 1)");
}

nlohmann::json clam_config_to_json(const ClamConfig& c) {
  return {{"input_dim", c.input_dim},
          {"embed_dim", c.embed_dim},
          {"attn_hidden", c.attn_hidden},
          {"num_classes", c.num_classes},
          {"branch_mode", c.branch_mode == BranchMode::kMulti ? "MB" : "SB"},
          {"B", c.B},
          {"bag_loss_weight", c.bag_loss_weight},
          {"instance_loss_weight", c.instance_loss_weight},
          {"svm_temperature", c.svm_temperature},
          {"svm_margin", c.svm_margin},
          {"dropout", c.dropout}};
}

ClamConfig clam_config_from_json(const nlohmann::json& j) {
  ClamConfig c;
  c.input_dim = j.value("input_dim", c.input_dim);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.attn_hidden = j.value("attn_hidden", c.attn_hidden);
  c.num_classes = j.value("num_classes", c.num_classes);
  const std::string mode = j.value("branch_mode", std::string("SB"));
  if (mode != "SB" && mode != "MB") {
    throw MilError(ErrorCode::kInvalidArgument, "branch_mode must be SB or MB");
  }
  c.branch_mode = mode == "MB" ? BranchMode::kMulti : BranchMode::kSingle;
  c.B = j.value("B", c.B);
  c.bag_loss_weight = j.value("bag_loss_weight", c.bag_loss_weight);
  c.instance_loss_weight = j.value("instance_loss_weight", c.instance_loss_weight);
  c.svm_temperature = j.value("svm_temperature", c.svm_temperature);
  c.svm_margin = j.value("svm_margin", c.svm_margin);
  c.dropout = j.value("dropout", c.dropout);
  return c;
}

GatedAttention gated_attention(ag::Tape& tape, const ag::Var& h,
                               const AttentionParams& p) {
  if (h->value.rows() < 1) throw MilError(ErrorCode::kEmptyBag, "gated_attention");
  const ag::Var a = tape.tanh(tape.linear(h, p.V, p.V_b));
  const ag::Var b = tape.sigmoid(tape.linear(h, p.U, p.U_b));
  GatedAttention out;
  out.raw = tape.transpose(tape.linear(tape.mul(a, b), p.w, p.w_b));
  out.weights = tape.softmax_rows(out.raw);
  return out;
}

ag::Var pool(ag::Tape& tape, const ag::Var& h, const ag::Var& weights) {
  if (weights->value.cols() != h->value.rows()) {
    throw MilError(ErrorCode::kShapeMismatch,
                   "attention width " + std::to_string(weights->value.cols()) +
                       " vs " + std::to_string(h->value.rows()) + " instances");
  }
  return tape.matmul(weights, h);
}

InstanceSelection select_instances(std::span<const double> logits, int B,
                                   bool in_class) {
  const int n = static_cast<int>(logits.size());
  if (n < 2) throw MilError(ErrorCode::kEmptyBag, "instance selection needs N >= 2");
  const int k = std::min(B, n / 2);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const auto at = [&](int i) { return logits[static_cast<std::size_t>(i)]; };

  InstanceSelection sel;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return at(a) > at(b); });
  sel.positive.assign(order.begin(), order.begin() + k);
  sel.positive_targets.assign(static_cast<std::size_t>(k), in_class ? 1 : 0);
  if (in_class) {
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      if (at(a) != at(b)) return at(a) < at(b);
      return a < b;
    });
    sel.negative.assign(order.begin(), order.begin() + k);
    sel.negative_targets.assign(static_cast<std::size_t>(k), 0);
  }
  return sel;
}

double smooth_svm_loss(const Matrix& scores, std::span<const int> targets,
                       double margin, double tau) {
  ag::Tape tape(false);
  return tape.smooth_svm(ag::constant(scores), targets, margin, tau)->value(0, 0);
}

// ------------------------------------------------------------------ model

ClamModel::ClamModel(const ClamConfig& config, std::uint64_t init_seed)
    : config_(config) {
  config_.validate();
  Rng rng(init_seed);
  const int e = config_.embed_dim;
  const int hdim = config_.attn_hidden;
  const int k = config_.num_branches();
  const int c = config_.num_classes;
  params_.add("embed.W", model::xavier_normal(e, config_.input_dim, rng));
  params_.add("embed.b", Matrix::Zero(1, e));
  params_.add("attn.V", model::xavier_normal(hdim, e, rng));
  params_.add("attn.V.b", Matrix::Zero(1, hdim));
  params_.add("attn.U", model::xavier_normal(hdim, e, rng));
  params_.add("attn.U.b", Matrix::Zero(1, hdim));
  params_.add("attn.w", model::xavier_normal(k, hdim, rng));
  params_.add("attn.w.b", Matrix::Zero(1, k));
  if (config_.branch_mode == BranchMode::kSingle) {
    params_.add("clf0.W", model::xavier_normal(c, e, rng));
    params_.add("clf0.b", Matrix::Zero(1, c));
  } else {
    for (int i = 0; i < c; ++i) {
      params_.add("clf" + std::to_string(i) + ".W", model::xavier_normal(1, e, rng));
      params_.add("clf" + std::to_string(i) + ".b", Matrix::Zero(1, 1));
    }
  }
  for (int i = 0; i < c; ++i) {
    params_.add("inst" + std::to_string(i) + ".W", model::xavier_normal(2, e, rng));
    params_.add("inst" + std::to_string(i) + ".b", Matrix::Zero(1, 2));
  }
}

std::string ClamModel::family() const {
  return config_.branch_mode == BranchMode::kMulti ? "clam_mb" : "clam_sb";
}

AttentionParams ClamModel::attention_params() const {
  return {params_.get("attn.V"), params_.get("attn.V.b"), params_.get("attn.U"),
          params_.get("attn.U.b"), params_.get("attn.w"), params_.get("attn.w.b")};
}

ClamModel::Graph ClamModel::forward(ag::Tape& tape, const Matrix& features,
                                    Rng* dropout_rng) const {
  if (features.rows() < 1) throw MilError(ErrorCode::kEmptyBag, "empty bag");
  if (features.cols() != config_.input_dim) {
    throw MilError(ErrorCode::kDimMismatch,
                   "bag has D=" + std::to_string(features.cols()) + ", model expects " +
                       std::to_string(config_.input_dim));
  }
  Graph g;
  const ag::Var x = ag::constant(features);
  g.h = tape.relu(tape.linear(x, params_.get("embed.W"), params_.get("embed.b")));
  if (dropout_rng != nullptr) g.h = tape.dropout(g.h, config_.dropout, *dropout_rng);
  g.attention = gated_attention(tape, g.h, attention_params());
  g.pooled = pool(tape, g.h, g.attention.weights);
  if (config_.branch_mode == BranchMode::kSingle) {
    g.logits = tape.linear(g.pooled, params_.get("clf0.W"), params_.get("clf0.b"));
  } else {
    std::vector<ag::Var> parts;
    for (int c = 0; c < config_.num_classes; ++c) {
      const int row[1] = {c};
      const std::string p = "clf" + std::to_string(c);
      parts.push_back(tape.linear(tape.gather_rows(g.pooled, row), params_.get(p + ".W"),
                                  params_.get(p + ".b")));
    }
    g.logits = tape.concat_cols(parts);
  }
  return g;
}

ag::Var ClamModel::clam_loss(ag::Tape& tape, const Graph& graph, int label,
                             model::LossTerms* terms) const {
  if (label < 0 || label >= config_.num_classes) {
    throw MilError(ErrorCode::kInvalidArgument, "label out of range");
  }
  const ag::Var ce = tape.cross_entropy(graph.logits, label);
  const Matrix& raw = graph.attention.raw->value;
  const int n = static_cast<int>(raw.cols());

  ag::Var total = tape.scale(ce, config_.bag_loss_weight);
  double inst_value = 0.0;
  if (n >= 2) {
    std::vector<ag::Var> scores;
    std::vector<int> targets;
    const auto add_branch = [&](int branch_row, int cls, bool in_class) {
      std::vector<double> logits(raw.row(branch_row).data(),
                                 raw.row(branch_row).data() + n);
      const InstanceSelection sel = select_instances(logits, config_.B, in_class);
      std::vector<int> rows = sel.positive;
      rows.insert(rows.end(), sel.negative.begin(), sel.negative.end());
      targets.insert(targets.end(), sel.positive_targets.begin(), sel.positive_targets.end());
      targets.insert(targets.end(), sel.negative_targets.begin(), sel.negative_targets.end());
      const std::string p = "inst" + std::to_string(cls);
      scores.push_back(tape.linear(tape.gather_rows(graph.h, rows), params_.get(p + ".W"),
                                   params_.get(p + ".b")));
    };
    if (config_.branch_mode == BranchMode::kSingle) {
      add_branch(0, label, true);
    } else {
      for (int c = 0; c < config_.num_classes; ++c) add_branch(c, c, c == label);
    }
    const ag::Var svm = tape.smooth_svm(tape.concat_rows(scores), targets,
                                        config_.svm_margin, config_.svm_temperature);
    inst_value = svm->value(0, 0);
    total = tape.add(total, tape.scale(svm, config_.instance_loss_weight));
  }
  if (terms != nullptr) {
    terms->bag_ce = ce->value(0, 0);
    terms->instance = inst_value;
    terms->total = total->value(0, 0);
  }
  return total;
}

ag::Var ClamModel::loss(ag::Tape& tape, const Matrix& features, int label,
                        Rng* dropout_rng, model::LossTerms* terms) {
  return clam_loss(tape, forward(tape, features, dropout_rng), label, terms);
}

model::Prediction ClamModel::predict(const Matrix& features) const {
  const ClamResult r = clam_forward(*this, features);
  model::Prediction p;
  p.probabilities = r.probabilities;
  p.predicted = model::argmax(p.probabilities);
  const int row = config_.branch_mode == BranchMode::kMulti ? p.predicted : 0;
  const auto& w = r.attention.weights;
  p.instance_attention.assign(w.row(row).data(), w.row(row).data() + w.cols());
  return p;
}

ClamResult clam_forward(const ClamModel& model, const Matrix& features) {
  ag::Tape tape(false);
  const auto g = model.forward(tape, features, nullptr);
  ClamResult r;
  r.attention.weights = g.attention.weights->value;
  r.attention.instance_scores = g.attention.raw->value;
  r.attention.slide_representation = g.pooled->value;
  r.attention.logits.assign(g.logits->value.data(),
                            g.logits->value.data() + g.logits->value.size());
  const Matrix p = ag::softmax_rows(g.logits->value);
  r.probabilities.assign(p.data(), p.data() + p.size());
  return r;
}

}  // namespace milkit::attnmil
