#ifndef MILKIT_TRANSMIL_HPP_
#define MILKIT_TRANSMIL_HPP_

// Transformer MIL: projected instance tokens padded to a square grid, a
// class token, two Nystrom self-attention layers with a pyramid positional
// encoding (PPEG) between them, and a linear head on the class token.

#include <cstdint>
#include <vector>

#include "milkit/model.hpp"

namespace milkit::transmil {

using ag::Matrix;

struct TransmilConfig {
  int input_dim = 1024;
  int model_dim = 512;
  int num_heads = 8;
  int num_landmarks = 256;
  int pinv_iterations = 6;
  int num_classes = 2;
  double dropout = 0.1;
  // Depthwise convolution of V along the sequence, added to each head's
  // output. Off by default.
  bool value_residual_conv = false;
  int residual_kernel = 33;

  void validate() const;
  int head_dim() const { return model_dim / num_heads; }
};

nlohmann::json transmil_config_to_json(const TransmilConfig& c);
TransmilConfig transmil_config_from_json(const nlohmann::json& j);

struct TokenSequence {
  ag::Var tokens;  // (1 + M) x model_dim, class token first
  int num_instances = 0;  // N
  int num_patch_tokens = 0;  // M = ceil(sqrt(N))^2
  int grid_side = 0;
};

// ceil(sqrt(n))^2 computed in integers.
int padded_token_count(int n);

// Landmark averaging matrix: m x n, row i averages the contiguous segment
// [floor(i n / m), floor((i + 1) n / m)).
Matrix segment_mean_matrix(int n, int m);

// Iterative Moore-Penrose approximation:
//   Z0 = A^T / (max col sum * max row sum)
//   Z <- Z (13 I - AZ (15 I - AZ (7 I - AZ))) / 4
ag::Var iterative_pinv(ag::Tape& tape, const ag::Var& a, int iterations);

struct NystromOutput {
  ag::Var out;                     // n x d_head
  std::vector<double> cls_row;     // approximate attention of token 0, length n
};

// softmax(Q K~^T / sqrt d) pinv(softmax(Q~ K~^T / sqrt d)) softmax(Q~ K^T / sqrt d) V
// with Q~, K~ the segment means of Q and K; landmarks clamp to n.
NystromOutput nystrom_attention(ag::Tape& tape, const ag::Var& q, const ag::Var& k,
                                const ag::Var& v, int num_landmarks,
                                int pinv_iterations, bool want_cls_row = false);

struct PpegParams {
  ag::Var conv7, conv7_b, conv5, conv5_b, conv3, conv3_b;
};

// x + conv7(x) + conv5(x) + conv3(x) on the patch tokens; class token
// passes through unchanged.
ag::Var ppeg(ag::Tape& tape, const ag::Var& tokens, int grid_side, const PpegParams& p);

class TransMilModel : public model::MilModel {
 public:
  TransMilModel(const TransmilConfig& config, std::uint64_t init_seed);

  std::string family() const override { return "transmil"; }
  int num_classes() const override { return config_.num_classes; }
  int input_dim() const override { return config_.input_dim; }
  nlohmann::json config_json() const override { return transmil_config_to_json(config_); }
  const TransmilConfig& config() const { return config_; }

  TokenSequence tokenize(ag::Tape& tape, const Matrix& features) const;

  struct Graph {
    ag::Var logits;                       // 1 x C
    std::vector<double> cls_attention;    // per instance, head-averaged, last layer
  };
  Graph forward(ag::Tape& tape, const Matrix& features, Rng* dropout_rng,
                bool want_attention = false) const;

  ag::Var loss(ag::Tape& tape, const Matrix& features, int label,
               Rng* dropout_rng, model::LossTerms* terms) override;
  model::Prediction predict(const Matrix& features) const override;

 private:
  ag::Var attention_layer(ag::Tape& tape, const ag::Var& x, int layer,
                          Rng* dropout_rng, std::vector<double>* cls_row) const;
  PpegParams ppeg_params() const;

  TransmilConfig config_;
};

struct TransmilResult {
  std::vector<double> probabilities;
  std::vector<double> cls_attention;
};

TransmilResult transmil_forward(const TransMilModel& model, const Matrix& features);

}  // namespace milkit::transmil

#endif  // MILKIT_TRANSMIL_HPP_
