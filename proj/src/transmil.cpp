#include "milkit/transmil.hpp"

#include <algorithm>
#include <cmath>

#include "milkit/error.hpp"
#include "milkit/rng.hpp"

namespace milkit::transmil {

void TransmilConfig::validate() const {
  const auto bad = [](const std::string& why) {
    return MilError(ErrorCode::kInvalidArgument, "TransmilConfig: " + why);
  };
  if (input_dim < 1 || model_dim < 1 || num_heads < 1) throw bad("dimensions must be positive");
  if (model_dim % num_heads != 0) throw bad("model_dim must be divisible by num_heads");
  if (num_landmarks < 1) throw bad("num_landmarks must be >= 1");
  if (pinv_iterations < 0) throw bad("pinv_iterations must be >= 0");
  if (num_classes < 2) throw bad("num_classes must be >= 2");
  if (dropout < 0.0 || dropout >= 1.0) throw bad("dropout must be in [0, 1)");
  if (residual_kernel < 1 || residual_kernel % 2 == 0) throw bad("residual_kernel must be odd");
}

nlohmann::json transmil_config_to_json(const TransmilConfig& c) {
  return {{"input_dim", c.input_dim},
          {"model_dim", c.model_dim},
          {"num_heads", c.num_heads},
          {"num_landmarks", c.num_landmarks},
          {"pinv_iterations", c.pinv_iterations},
          {"num_classes", c.num_classes},
          {"dropout", c.dropout},
          {"value_residual_conv", c.value_residual_conv},
          {"residual_kernel", c.residual_kernel}};
}

TransmilConfig transmil_config_from_json(const nlohmann::json& j) {
  TransmilConfig c;
  c.input_dim = j.value("input_dim", c.input_dim);
  c.model_dim = j.value("model_dim", c.model_dim);
  c.num_heads = j.value("num_heads", c.num_heads);
  c.num_landmarks = j.value("num_landmarks", c.num_landmarks);
  c.pinv_iterations = j.value("pinv_iterations", c.pinv_iterations);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.dropout = j.value("dropout", c.dropout);
  c.value_residual_conv = j.value("value_residual_conv", c.value_residual_conv);
  c.residual_kernel = j.value("residual_kernel", c.residual_kernel);
  return c;
}

int padded_token_count(int n) {
  int side = static_cast<int>(std::sqrt(static_cast<double>(n)));
  while (side * side < n) ++side;
  while (side > 0 && (side - 1) * (side - 1) >= n) --side;
  return side * side;
}

Matrix segment_mean_matrix(int n, int m) {
  Matrix p = Matrix::Zero(m, n);
  for (int i = 0; i < m; ++i) {
    const int lo = static_cast<int>(static_cast<long long>(i) * n / m);
    const int hi = static_cast<int>(static_cast<long long>(i + 1) * n / m);
    for (int j = lo; j < hi; ++j) p(i, j) = 1.0 / (hi - lo);
  }
  return p;
}

ag::Var iterative_pinv(ag::Tape& tape, const ag::Var& a, int iterations) {
  if (a->value.rows() != a->value.cols()) {
    throw MilError(ErrorCode::kShapeMismatch, "pinv expects a square matrix");
  }
  if ((a->value.array() < 0.0).any()) {
    throw MilError(ErrorCode::kInvalidArgument,
                   "iterative_pinv expects a non-negative kernel matrix");
  }
  const ag::Var max_col = tape.max_all(tape.col_sums(a));
  const ag::Var max_row = tape.max_all(tape.row_sums(a));
  ag::Var z = tape.scale_by(tape.transpose(a), tape.reciprocal(tape.mul(max_col, max_row)));
  for (int it = 0; it < iterations; ++it) {
    const ag::Var az = tape.matmul(a, z);
    const ag::Var t7 = tape.add_identity(tape.scale(az, -1.0), 7.0);
    const ag::Var t15 = tape.add_identity(tape.scale(tape.matmul(az, t7), -1.0), 15.0);
    const ag::Var t13 = tape.add_identity(tape.scale(tape.matmul(az, t15), -1.0), 13.0);
    z = tape.scale(tape.matmul(z, t13), 0.25);
  }
  if (!z->value.allFinite()) {
    throw MilError(ErrorCode::kNonFinite, "pseudo-inverse iteration diverged");
  }
  return z;
}

NystromOutput nystrom_attention(ag::Tape& tape, const ag::Var& q, const ag::Var& k,
                                const ag::Var& v, int num_landmarks,
                                int pinv_iterations, bool want_cls_row) {
  const int n = static_cast<int>(q->value.rows());
  if (n < 1) throw MilError(ErrorCode::kEmptyBag, "nystrom_attention");
  if (k->value.rows() != n || v->value.rows() != n || k->value.cols() != q->value.cols()) {
    throw MilError(ErrorCode::kShapeMismatch, "nystrom_attention q/k/v shapes");
  }
  const int m = std::clamp(num_landmarks, 1, n);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q->value.cols()));
  const ag::Var qs = tape.scale(q, scale);
  const ag::Var seg = ag::constant(segment_mean_matrix(n, m));
  const ag::Var q_land = tape.matmul(seg, qs);
  const ag::Var k_land = tape.matmul(seg, k);
  const ag::Var attn1 = tape.softmax_rows(tape.matmul_nt(qs, k_land));
  const ag::Var attn2 = tape.softmax_rows(tape.matmul_nt(q_land, k_land));
  const ag::Var attn3 = tape.softmax_rows(tape.matmul_nt(q_land, k));
  const ag::Var pinv = iterative_pinv(tape, attn2, pinv_iterations);
  NystromOutput out;
  out.out = tape.matmul(attn1, tape.matmul(pinv, tape.matmul(attn3, v)));
  if (!out.out->value.allFinite()) {
    throw MilError(ErrorCode::kNonFinite, "Nystrom attention output");
  }
  if (want_cls_row) {
    const Matrix row = attn1->value.row(0) * pinv->value * attn3->value;
    out.cls_row.assign(row.data(), row.data() + row.size());
  }
  return out;
}

ag::Var ppeg(ag::Tape& tape, const ag::Var& tokens, int grid_side, const PpegParams& p) {
  const int m = static_cast<int>(tokens->value.rows()) - 1;
  if (m < 1 || grid_side * grid_side != m) {
    throw MilError(ErrorCode::kNotSquare,
                   std::to_string(m) + " patch tokens do not form a square grid");
  }
  std::vector<int> patch_rows(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) patch_rows[static_cast<std::size_t>(i)] = i + 1;
  const int cls_row[1] = {0};
  const ag::Var cls = tape.gather_rows(tokens, cls_row);
  const ag::Var feat = tape.gather_rows(tokens, patch_rows);
  ag::Var out = tape.add(feat, tape.depthwise_conv2d(feat, grid_side, p.conv7, 7, p.conv7_b));
  out = tape.add(out, tape.depthwise_conv2d(feat, grid_side, p.conv5, 5, p.conv5_b));
  out = tape.add(out, tape.depthwise_conv2d(feat, grid_side, p.conv3, 3, p.conv3_b));
  const ag::Var parts[2] = {cls, out};
  return tape.concat_rows(parts);
}

// ------------------------------------------------------------------ model

TransMilModel::TransMilModel(const TransmilConfig& config, std::uint64_t init_seed)
    : config_(config) {
  config_.validate();
  Rng rng(init_seed);
  const int d = config_.model_dim;
  params_.add("proj.W", model::xavier_normal(d, config_.input_dim, rng));
  params_.add("proj.b", Matrix::Zero(1, d));
  Matrix cls(1, d);
  for (int i = 0; i < d; ++i) cls(0, i) = rng.normal();
  params_.add("cls_token", cls);
  const auto add_layer = [&](const std::string& p) {
    params_.add(p + ".ln.gamma", Matrix::Ones(1, d));
    params_.add(p + ".ln.beta", Matrix::Zero(1, d));
    params_.add(p + ".qkv.W", model::xavier_normal(3 * d, d, rng));
    params_.add(p + ".out.W", model::xavier_normal(d, d, rng));
    params_.add(p + ".out.b", Matrix::Zero(1, d));
    if (config_.value_residual_conv) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(config_.residual_kernel));
      params_.add(p + ".res_conv",
                  model::uniform_matrix(config_.num_heads, config_.residual_kernel, bound, rng));
    }
  };
  add_layer("layer1");
  for (int k : {7, 5, 3}) {
    const std::string p = "ppeg.conv" + std::to_string(k);
    const double bound = 1.0 / k;
    params_.add(p + ".W", model::uniform_matrix(d, k * k, bound, rng));
    params_.add(p + ".b", model::uniform_matrix(1, d, bound, rng));
  }
  add_layer("layer2");
  params_.add("norm.gamma", Matrix::Ones(1, d));
  params_.add("norm.beta", Matrix::Zero(1, d));
  params_.add("head.W", model::xavier_normal(config_.num_classes, d, rng));
  params_.add("head.b", Matrix::Zero(1, config_.num_classes));
}

PpegParams TransMilModel::ppeg_params() const {
  return {params_.get("ppeg.conv7.W"), params_.get("ppeg.conv7.b"),
          params_.get("ppeg.conv5.W"), params_.get("ppeg.conv5.b"),
          params_.get("ppeg.conv3.W"), params_.get("ppeg.conv3.b")};
}

TokenSequence TransMilModel::tokenize(ag::Tape& tape, const Matrix& features) const {
  const int n = static_cast<int>(features.rows());
  if (n < 1) throw MilError(ErrorCode::kEmptyBag, "empty bag");
  if (features.cols() != config_.input_dim) {
    throw MilError(ErrorCode::kDimMismatch,
                   "bag has D=" + std::to_string(features.cols()) + ", model expects " +
                       std::to_string(config_.input_dim));
  }
  TokenSequence seq;
  seq.num_instances = n;
  seq.num_patch_tokens = padded_token_count(n);
  seq.grid_side = static_cast<int>(std::lround(std::sqrt(seq.num_patch_tokens)));
  const ag::Var h = tape.relu(
      tape.linear(ag::constant(features), params_.get("proj.W"), params_.get("proj.b")));
  std::vector<int> rows(static_cast<std::size_t>(seq.num_patch_tokens));
  for (int i = 0; i < seq.num_patch_tokens; ++i) rows[static_cast<std::size_t>(i)] = i % n;
  const ag::Var parts[2] = {params_.get("cls_token"), tape.gather_rows(h, rows)};
  seq.tokens = tape.concat_rows(parts);
  return seq;
}

ag::Var TransMilModel::attention_layer(ag::Tape& tape, const ag::Var& x, int layer,
                                       Rng* dropout_rng, std::vector<double>* cls_row) const {
  const std::string p = "layer" + std::to_string(layer);
  const int d = config_.model_dim;
  const int dh = config_.head_dim();
  const ag::Var xn = tape.layer_norm(x, params_.get(p + ".ln.gamma"), params_.get(p + ".ln.beta"));
  const ag::Var qkv = tape.linear(xn, params_.get(p + ".qkv.W"));
  std::vector<ag::Var> heads;
  if (cls_row != nullptr) cls_row->assign(static_cast<std::size_t>(x->value.rows()), 0.0);
  for (int h = 0; h < config_.num_heads; ++h) {
    const ag::Var q = tape.slice_cols(qkv, h * dh, dh);
    const ag::Var k = tape.slice_cols(qkv, d + h * dh, dh);
    const ag::Var v = tape.slice_cols(qkv, 2 * d + h * dh, dh);
    NystromOutput att = nystrom_attention(tape, q, k, v, config_.num_landmarks,
                                          config_.pinv_iterations, cls_row != nullptr);
    ag::Var out = att.out;
    if (config_.value_residual_conv) {
      const int row[1] = {h};
      out = tape.add(out, tape.conv_rows(v, tape.gather_rows(params_.get(p + ".res_conv"), row)));
    }
    heads.push_back(out);
    if (cls_row != nullptr) {
      for (std::size_t i = 0; i < cls_row->size(); ++i) {
        (*cls_row)[i] += att.cls_row[i] / config_.num_heads;
      }
    }
  }
  ag::Var merged = tape.linear(tape.concat_cols(heads), params_.get(p + ".out.W"),
                               params_.get(p + ".out.b"));
  if (dropout_rng != nullptr) merged = tape.dropout(merged, config_.dropout, *dropout_rng);
  return tape.add(x, merged);
}

TransMilModel::Graph TransMilModel::forward(ag::Tape& tape, const Matrix& features,
                                            Rng* dropout_rng, bool want_attention) const {
  const TokenSequence seq = tokenize(tape, features);
  ag::Var x = attention_layer(tape, seq.tokens, 1, dropout_rng, nullptr);
  x = ppeg(tape, x, seq.grid_side, ppeg_params());
  std::vector<double> cls_row;
  x = attention_layer(tape, x, 2, dropout_rng, want_attention ? &cls_row : nullptr);
  x = tape.layer_norm(x, params_.get("norm.gamma"), params_.get("norm.beta"));
  const int first[1] = {0};
  Graph g;
  g.logits = tape.linear(tape.gather_rows(x, first), params_.get("head.W"), params_.get("head.b"));
  if (want_attention) {
    // Drop the class token and the padding copies.
    g.cls_attention.assign(cls_row.begin() + 1, cls_row.begin() + 1 + seq.num_instances);
  }
  return g;
}

ag::Var TransMilModel::loss(ag::Tape& tape, const Matrix& features, int label,
                            Rng* dropout_rng, model::LossTerms* terms) {
  if (label < 0 || label >= config_.num_classes) {
    throw MilError(ErrorCode::kInvalidArgument, "label out of range");
  }
  const Graph g = forward(tape, features, dropout_rng);
  const ag::Var ce = tape.cross_entropy(g.logits, label);
  if (terms != nullptr) {
    terms->bag_ce = ce->value(0, 0);
    terms->instance = 0.0;
    terms->total = terms->bag_ce;
  }
  return ce;
}

model::Prediction TransMilModel::predict(const Matrix& features) const {
  const TransmilResult r = transmil_forward(*this, features);
  model::Prediction p;
  p.probabilities = r.probabilities;
  p.predicted = model::argmax(p.probabilities);
  p.instance_attention = r.cls_attention;
  return p;
}

TransmilResult transmil_forward(const TransMilModel& model, const Matrix& features) {
  ag::Tape tape(false);
  const auto g = model.forward(tape, features, nullptr, true);
  TransmilResult r;
  const Matrix p = ag::softmax_rows(g.logits->value);
  r.probabilities.assign(p.data(), p.data() + p.size());
  r.cls_attention = g.cls_attention;
  return r;
}

}  // namespace milkit::transmil
