#ifndef MILKIT_ATTNMIL_HPP_
#define MILKIT_ATTNMIL_HPP_

// Clustering-constrained attention MIL: gated attention pooling with a
// single branch (SB) or one branch per class (MB), plus an instance-level
// clustering objective on the most and least attended instances.

#include <cstdint>
#include <span>
#include <vector>

#include "milkit/model.hpp"

namespace milkit::attnmil {

using ag::Matrix;

enum class BranchMode { kSingle, kMulti };

struct ClamConfig {
  int input_dim = 1024;
  int embed_dim = 512;
  int attn_hidden = 256;
  int num_classes = 2;
  BranchMode branch_mode = BranchMode::kSingle;
  int B = 8;  // instances sampled per side, per branch
  double bag_loss_weight = 0.7;
  double instance_loss_weight = 0.3;
  double svm_temperature = 1.0;
  double svm_margin = 1.0;
  double dropout = 0.25;

  void validate() const;
  int num_branches() const {
    return branch_mode == BranchMode::kMulti ? num_classes : 1;
  }
};

nlohmann::json clam_config_to_json(const ClamConfig& c);
ClamConfig clam_config_from_json(const nlohmann::json& j);

struct AttentionParams {
  ag::Var V, V_b, U, U_b, w, w_b;
};

struct GatedAttention {
  ag::Var raw;      // branches x N pre-softmax logits
  ag::Var weights;  // branches x N, rows sum to 1
};

// weights = softmax_k( w^T (tanh(V h_k) * sigmoid(U h_k)) ) per branch.
GatedAttention gated_attention(ag::Tape& tape, const ag::Var& h,
                               const AttentionParams& p);

// branches x embed: each row is sum_k weights[b, k] * h_k.
ag::Var pool(ag::Tape& tape, const ag::Var& h, const ag::Var& weights);

struct InstanceSelection {
  std::vector<int> positive;
  std::vector<int> positive_targets;
  std::vector<int> negative;
  std::vector<int> negative_targets;
};

// In-class branches take the top-B' instances as target 1 and bottom-B' as
// target 0; out-of-class branches take only the top-B' as target 0, with
// B' = min(B, N / 2). Ties go to the lower index. Top entries are listed
// in descending logit order, bottom entries in ascending order.
InstanceSelection select_instances(std::span<const double> logits, int B,
                                   bool in_class);

// Mean over rows of tau * log sum_j exp((margin [j != y] + s_j - s_y) / tau).
double smooth_svm_loss(const Matrix& scores, std::span<const int> targets,
                       double margin, double tau);

struct AttentionOutput {
  Matrix weights;         // branches x N
  Matrix instance_scores; // raw logits, branches x N
  Matrix slide_representation;  // branches x embed
  std::vector<double> logits;   // C
};

class ClamModel : public model::MilModel {
 public:
  ClamModel(const ClamConfig& config, std::uint64_t init_seed);

  std::string family() const override;
  int num_classes() const override { return config_.num_classes; }
  int input_dim() const override { return config_.input_dim; }
  nlohmann::json config_json() const override { return clam_config_to_json(config_); }
  const ClamConfig& config() const { return config_; }

  struct Graph {
    ag::Var h;       // N x embed
    GatedAttention attention;
    ag::Var pooled;  // branches x embed
    ag::Var logits;  // 1 x C
  };
  Graph forward(ag::Tape& tape, const Matrix& features, Rng* dropout_rng) const;

  // total = c1 * CE + c2 * mean smooth-SVM over all selected instances.
  ag::Var clam_loss(ag::Tape& tape, const Graph& graph, int label,
                    model::LossTerms* terms) const;

  ag::Var loss(ag::Tape& tape, const Matrix& features, int label,
               Rng* dropout_rng, model::LossTerms* terms) override;
  model::Prediction predict(const Matrix& features) const override;

 private:
  AttentionParams attention_params() const;

  ClamConfig config_;
};

struct ClamResult {
  AttentionOutput attention;
  std::vector<double> probabilities;
};

ClamResult clam_forward(const ClamModel& model, const Matrix& features);

}  // namespace milkit::attnmil

#endif  // MILKIT_ATTNMIL_HPP_
