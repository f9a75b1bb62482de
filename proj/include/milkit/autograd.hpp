#ifndef MILKIT_AUTOGRAD_HPP_
#define MILKIT_AUTOGRAD_HPP_

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape records every operation applied to Vars that require gradients;
// Tape::backward walks the record in reverse and accumulates into each
// node's `grad`. Parameters are leaf Vars owned by the model and outlive
// any tape. A tape built with record=false computes values only.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace milkit {
class Rng;
}

namespace milkit::ag {

using Matrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
  Matrix value;
  Matrix grad;  // empty until something flows into it
  bool requires_grad = false;

  void accumulate(const Matrix& g);
  void zero_grad() { grad.resize(0, 0); }
};

using Var = std::shared_ptr<Node>;

Var parameter(Matrix value);
Var constant(Matrix value);

class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  // Linear algebra.
  Var matmul(const Var& a, const Var& b);
  Var matmul_nt(const Var& a, const Var& b);  // a * b^T
  Var transpose(const Var& a);
  // x W^T + b, with W stored out x in and b 1 x out.
  Var linear(const Var& x, const Var& w, const Var& b);
  Var linear(const Var& x, const Var& w);

  // Elementwise.
  Var add(const Var& a, const Var& b);
  Var sub(const Var& a, const Var& b);
  Var mul(const Var& a, const Var& b);
  Var scale(const Var& a, double s);
  Var add_identity(const Var& a, double s);  // a + s*I, a square
  Var add_row(const Var& a, const Var& row);  // broadcast 1 x cols
  Var relu(const Var& a);
  Var tanh(const Var& a);
  Var sigmoid(const Var& a);
  // Multiplies by a fixed 0/(1/keep) mask drawn from rng.
  Var dropout(const Var& a, double rate, Rng& rng);

  // Scalars (1x1 Vars).
  Var scale_by(const Var& a, const Var& s);
  Var reciprocal(const Var& s);
  Var sum(const Var& a);
  Var mean(const Var& a);
  Var max_all(const Var& a);
  Var row_sums(const Var& a);  // n x 1
  Var col_sums(const Var& a);  // 1 x m

  // Shape manipulation.
  Var gather_rows(const Var& a, std::span<const int> rows);
  Var concat_rows(std::span<const Var> parts);
  Var slice_cols(const Var& a, int start, int count);
  Var concat_cols(std::span<const Var> parts);

  // Normalisation.
  Var softmax_rows(const Var& a);
  Var layer_norm(const Var& x, const Var& gamma, const Var& beta,
                 double eps = 1e-5);

  // Depthwise 2-D convolution over a side x side grid stored as
  // (side*side) x channels tokens, zero padding, odd kernel size.
  // kernel is channels x (k*k) row-major taps, bias 1 x channels.
  Var depthwise_conv2d(const Var& x, int side, const Var& kernel, int k,
                       const Var& bias);
  // One k-tap kernel (1 x k) applied along rows of x, per column, zero
  // padding; the same kernel for all columns.
  Var conv_rows(const Var& x, const Var& kernel);

  // Losses.
  // logits 1 x C; returns -log softmax(logits)[label].
  Var cross_entropy(const Var& logits, int label);
  // scores n x K, targets length n; mean over rows of
  // tau * logsumexp_j((margin*[j != y] + s_j - s_y) / tau).
  Var smooth_svm(const Var& scores, std::span<const int> targets,
                 double margin, double tau);

  void backward(const Var& loss);

 private:
  Var emit(Matrix value, std::initializer_list<const Var*> inputs,
           std::function<void(Node&)> backward_fn);

  bool record_;
  struct Entry {
    Var out;
    std::function<void(Node&)> fn;
  };
  std::vector<Entry> entries_;
};

// Plain-value helpers shared by the models and their tests.
Matrix softmax_rows(const Matrix& a);
double log_sum_exp(std::span<const double> values);

}  // namespace milkit::ag

#endif  // MILKIT_AUTOGRAD_HPP_
