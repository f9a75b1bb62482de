#include "milkit/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "milkit/error.hpp"
#include "milkit/rng.hpp"

namespace milkit::ag {

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

Var parameter(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return n;
}

Var constant(Matrix value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return n;
}

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw MilError(ErrorCode::kShapeMismatch, what);
}

Matrix scalar(double v) {
  Matrix m(1, 1);
  m(0, 0) = v;
  return m;
}

}  // namespace

Var Tape::emit(Matrix value, std::initializer_list<const Var*> inputs,
               std::function<void(Node&)> backward_fn) {
  auto out = std::make_shared<Node>();
  out->value = std::move(value);
  if (!record_) return out;
  bool any = false;
  for (const Var* in : inputs) any = any || (*in)->requires_grad;
  if (!any) return out;
  out->requires_grad = true;
  entries_.push_back({out, std::move(backward_fn)});
  return out;
}

void Tape::backward(const Var& loss) {
  require(loss->value.rows() == 1 && loss->value.cols() == 1,
          "backward expects a scalar loss");
  loss->accumulate(scalar(1.0));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    Node& out = *it->out;
    if (out.grad.size() == 0) continue;
    it->fn(out);
  }
  entries_.clear();
}

Var Tape::matmul(const Var& a, const Var& b) {
  require(a->value.cols() == b->value.rows(), "matmul inner dimension");
  return emit(a->value * b->value, {&a, &b}, [a, b](Node& o) {
    if (a->requires_grad) a->accumulate(o.grad * b->value.transpose());
    if (b->requires_grad) b->accumulate(a->value.transpose() * o.grad);
  });
}

Var Tape::matmul_nt(const Var& a, const Var& b) {
  require(a->value.cols() == b->value.cols(), "matmul_nt inner dimension");
  return emit(a->value * b->value.transpose(), {&a, &b}, [a, b](Node& o) {
    if (a->requires_grad) a->accumulate(o.grad * b->value);
    if (b->requires_grad) b->accumulate(o.grad.transpose() * a->value);
  });
}

Var Tape::transpose(const Var& a) {
  return emit(a->value.transpose(), {&a}, [a](Node& o) {
    a->accumulate(o.grad.transpose());
  });
}

Var Tape::linear(const Var& x, const Var& w, const Var& b) {
  require(x->value.cols() == w->value.cols(), "linear input dimension");
  require(b->value.rows() == 1 && b->value.cols() == w->value.rows(),
          "linear bias shape");
  Matrix y = x->value * w->value.transpose();
  y.rowwise() += b->value.row(0);
  return emit(std::move(y), {&x, &w, &b}, [x, w, b](Node& o) {
    if (x->requires_grad) x->accumulate(o.grad * w->value);
    if (w->requires_grad) w->accumulate(o.grad.transpose() * x->value);
    if (b->requires_grad) b->accumulate(o.grad.colwise().sum());
  });
}

Var Tape::linear(const Var& x, const Var& w) {
  require(x->value.cols() == w->value.cols(), "linear input dimension");
  return emit(x->value * w->value.transpose(), {&x, &w}, [x, w](Node& o) {
    if (x->requires_grad) x->accumulate(o.grad * w->value);
    if (w->requires_grad) w->accumulate(o.grad.transpose() * x->value);
  });
}

Var Tape::add(const Var& a, const Var& b) {
  require(a->value.rows() == b->value.rows() &&
              a->value.cols() == b->value.cols(),
          "add shape");
  return emit(a->value + b->value, {&a, &b}, [a, b](Node& o) {
    if (a->requires_grad) a->accumulate(o.grad);
    if (b->requires_grad) b->accumulate(o.grad);
  });
}

Var Tape::sub(const Var& a, const Var& b) {
  require(a->value.rows() == b->value.rows() &&
              a->value.cols() == b->value.cols(),
          "sub shape");
  return emit(a->value - b->value, {&a, &b}, [a, b](Node& o) {
    if (a->requires_grad) a->accumulate(o.grad);
    if (b->requires_grad) b->accumulate(-o.grad);
  });
}

Var Tape::mul(const Var& a, const Var& b) {
  require(a->value.rows() == b->value.rows() &&
              a->value.cols() == b->value.cols(),
          "mul shape");
  return emit(a->value.cwiseProduct(b->value), {&a, &b}, [a, b](Node& o) {
    if (a->requires_grad) a->accumulate(o.grad.cwiseProduct(b->value));
    if (b->requires_grad) b->accumulate(o.grad.cwiseProduct(a->value));
  });
}

Var Tape::scale(const Var& a, double s) {
  return emit(a->value * s, {&a}, [a, s](Node& o) {
    a->accumulate(o.grad * s);
  });
}

Var Tape::add_identity(const Var& a, double s) {
  require(a->value.rows() == a->value.cols(), "add_identity needs square");
  Matrix y = a->value;
  y.diagonal().array() += s;
  return emit(std::move(y), {&a}, [a](Node& o) { a->accumulate(o.grad); });
}

Var Tape::add_row(const Var& a, const Var& row) {
  require(row->value.rows() == 1 && row->value.cols() == a->value.cols(),
          "add_row shape");
  Matrix y = a->value;
  y.rowwise() += row->value.row(0);
  return emit(std::move(y), {&a, &row}, [a, row](Node& o) {
    if (a->requires_grad) a->accumulate(o.grad);
    if (row->requires_grad) row->accumulate(o.grad.colwise().sum());
  });
}

Var Tape::relu(const Var& a) {
  Matrix y = a->value.cwiseMax(0.0);
  return emit(std::move(y), {&a}, [a](Node& o) {
    a->accumulate((a->value.array() > 0.0).cast<double>().matrix()
                      .cwiseProduct(o.grad));
  });
}

Var Tape::tanh(const Var& a) {
  Matrix y = a->value.array().tanh().matrix();
  auto out = emit(y, {&a}, [a, y](Node& o) {
    a->accumulate(
        (o.grad.array() * (1.0 - y.array().square())).matrix());
  });
  return out;
}

Var Tape::sigmoid(const Var& a) {
  Matrix y = (1.0 / (1.0 + (-a->value.array()).exp())).matrix();
  return emit(y, {&a}, [a, y](Node& o) {
    a->accumulate((o.grad.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

Var Tape::dropout(const Var& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  const double keep = 1.0 - rate;
  Matrix mask(a->value.rows(), a->value.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) {
    mask.data()[i] = rng.uniform() < keep ? 1.0 / keep : 0.0;
  }
  Matrix y = a->value.cwiseProduct(mask);
  return emit(std::move(y), {&a}, [a, mask](Node& o) {
    a->accumulate(o.grad.cwiseProduct(mask));
  });
}

Var Tape::scale_by(const Var& a, const Var& s) {
  require(s->value.size() == 1, "scale_by expects a 1x1 scale");
  const double sv = s->value(0, 0);
  return emit(a->value * sv, {&a, &s}, [a, s, sv](Node& o) {
    if (a->requires_grad) a->accumulate(o.grad * sv);
    if (s->requires_grad) {
      s->accumulate(scalar(o.grad.cwiseProduct(a->value).sum()));
    }
  });
}

Var Tape::reciprocal(const Var& s) {
  require(s->value.size() == 1, "reciprocal expects 1x1");
  const double v = s->value(0, 0);
  return emit(scalar(1.0 / v), {&s}, [s, v](Node& o) {
    s->accumulate(scalar(-o.grad(0, 0) / (v * v)));
  });
}

Var Tape::sum(const Var& a) {
  return emit(scalar(a->value.sum()), {&a}, [a](Node& o) {
    a->accumulate(Matrix::Constant(a->value.rows(), a->value.cols(),
                                   o.grad(0, 0)));
  });
}

Var Tape::mean(const Var& a) {
  const double n = static_cast<double>(a->value.size());
  return emit(scalar(a->value.sum() / n), {&a}, [a, n](Node& o) {
    a->accumulate(Matrix::Constant(a->value.rows(), a->value.cols(),
                                   o.grad(0, 0) / n));
  });
}

Var Tape::max_all(const Var& a) {
  require(a->value.size() > 0, "max_all of empty matrix");
  // First maximal entry receives the subgradient.
  Eigen::Index best = 0;
  const double* d = a->value.data();
  for (Eigen::Index i = 1; i < a->value.size(); ++i) {
    if (d[i] > d[best]) best = i;
  }
  return emit(scalar(d[best]), {&a}, [a, best](Node& o) {
    Matrix g = Matrix::Zero(a->value.rows(), a->value.cols());
    g.data()[best] = o.grad(0, 0);
    a->accumulate(g);
  });
}

Var Tape::row_sums(const Var& a) {
  return emit(a->value.rowwise().sum(), {&a}, [a](Node& o) {
    Matrix g(a->value.rows(), a->value.cols());
    g.colwise() = o.grad.col(0);
    a->accumulate(g);
  });
}

Var Tape::col_sums(const Var& a) {
  return emit(a->value.colwise().sum(), {&a}, [a](Node& o) {
    Matrix g(a->value.rows(), a->value.cols());
    g.rowwise() = o.grad.row(0);
    a->accumulate(g);
  });
}

Var Tape::gather_rows(const Var& a, std::span<const int> rows) {
  std::vector<int> idx(rows.begin(), rows.end());
  Matrix y(static_cast<Eigen::Index>(idx.size()), a->value.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < a->value.rows(), "gather_rows index");
    y.row(static_cast<Eigen::Index>(i)) = a->value.row(idx[i]);
  }
  return emit(std::move(y), {&a}, [a, idx](Node& o) {
    Matrix g = Matrix::Zero(a->value.rows(), a->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      g.row(idx[i]) += o.grad.row(static_cast<Eigen::Index>(i));
    }
    a->accumulate(g);
  });
}

Var Tape::concat_rows(std::span<const Var> parts) {
  require(!parts.empty(), "concat_rows of nothing");
  const Eigen::Index cols = parts[0]->value.cols();
  Eigen::Index rows = 0;
  for (const auto& p : parts) {
    require(p->value.cols() == cols, "concat_rows column mismatch");
    rows += p->value.rows();
  }
  Matrix y(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    y.middleRows(at, p->value.rows()) = p->value;
    at += p->value.rows();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  auto out = std::make_shared<Node>();
  out->value = std::move(y);
  if (!record_) return out;
  bool any = std::any_of(ins.begin(), ins.end(),
                         [](const Var& v) { return v->requires_grad; });
  if (!any) return out;
  out->requires_grad = true;
  entries_.push_back({out, [ins](Node& o) {
                        Eigen::Index r = 0;
                        for (const auto& p : ins) {
                          const Eigen::Index n = p->value.rows();
                          if (p->requires_grad) {
                            p->accumulate(o.grad.middleRows(r, n));
                          }
                          r += n;
                        }
                      }});
  return out;
}

Var Tape::slice_cols(const Var& a, int start, int count) {
  require(start >= 0 && count >= 0 && start + count <= a->value.cols(),
          "slice_cols range");
  Matrix y = a->value.middleCols(start, count);
  return emit(std::move(y), {&a}, [a, start, count](Node& o) {
    Matrix g = Matrix::Zero(a->value.rows(), a->value.cols());
    g.middleCols(start, count) = o.grad;
    a->accumulate(g);
  });
}

Var Tape::concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols of nothing");
  const Eigen::Index rows = parts[0]->value.rows();
  Eigen::Index cols = 0;
  for (const auto& p : parts) {
    require(p->value.rows() == rows, "concat_cols row mismatch");
    cols += p->value.cols();
  }
  Matrix y(rows, cols);
  Eigen::Index at = 0;
  for (const auto& p : parts) {
    y.middleCols(at, p->value.cols()) = p->value;
    at += p->value.cols();
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  auto out = std::make_shared<Node>();
  out->value = std::move(y);
  if (!record_) return out;
  bool any = std::any_of(ins.begin(), ins.end(),
                         [](const Var& v) { return v->requires_grad; });
  if (!any) return out;
  out->requires_grad = true;
  entries_.push_back({out, [ins](Node& o) {
                        Eigen::Index c = 0;
                        for (const auto& p : ins) {
                          const Eigen::Index n = p->value.cols();
                          if (p->requires_grad) {
                            p->accumulate(o.grad.middleCols(c, n));
                          }
                          c += n;
                        }
                      }});
  return out;
}

Matrix softmax_rows(const Matrix& a) {
  Matrix y(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    const double m = a.row(i).maxCoeff();
    y.row(i) = (a.row(i).array() - m).exp().matrix();
    y.row(i) /= y.row(i).sum();
  }
  return y;
}

double log_sum_exp(std::span<const double> values) {
  double m = -std::numeric_limits<double>::infinity();
  for (double v : values) m = std::max(m, v);
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double v : values) s += std::exp(v - m);
  return m + std::log(s);
}

Var Tape::softmax_rows(const Var& a) {
  Matrix y = ag::softmax_rows(a->value);
  return emit(y, {&a}, [a, y](Node& o) {
    Matrix inner = o.grad.cwiseProduct(y).rowwise().sum();
    Matrix g = o.grad;
    g.colwise() -= inner.col(0);
    a->accumulate(g.cwiseProduct(y));
  });
}

Var Tape::layer_norm(const Var& x, const Var& gamma, const Var& beta,
                     double eps) {
  const Eigen::Index n = x->value.rows();
  const Eigen::Index d = x->value.cols();
  require(gamma->value.cols() == d && beta->value.cols() == d,
          "layer_norm affine shape");
  Matrix xhat(n, d);
  Eigen::VectorXd inv_std(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x->value.row(i).mean();
    const double var =
        (x->value.row(i).array() - mu).square().sum() / static_cast<double>(d);
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x->value.row(i).array() - mu) * inv_std(i);
  }
  Matrix y = xhat;
  y.array().rowwise() *= gamma->value.row(0).array();
  y.rowwise() += beta->value.row(0);
  return emit(std::move(y), {&x, &gamma, &beta},
              [x, gamma, beta, xhat, inv_std, d](Node& o) {
                if (gamma->requires_grad) {
                  gamma->accumulate(
                      o.grad.cwiseProduct(xhat).colwise().sum());
                }
                if (beta->requires_grad) {
                  beta->accumulate(o.grad.colwise().sum());
                }
                if (x->requires_grad) {
                  Matrix g = o.grad;
                  g.array().rowwise() *= gamma->value.row(0).array();
                  Matrix dx(g.rows(), g.cols());
                  const double dn = static_cast<double>(d);
                  for (Eigen::Index i = 0; i < g.rows(); ++i) {
                    const double mg = g.row(i).sum() / dn;
                    const double mgx = g.row(i).dot(xhat.row(i)) / dn;
                    dx.row(i) = inv_std(i) *
                                (g.row(i).array() - mg -
                                 xhat.row(i).array() * mgx)
                                    .matrix();
                  }
                  x->accumulate(dx);
                }
              });
}

Var Tape::depthwise_conv2d(const Var& x, int side, const Var& kernel, int k,
                           const Var& bias) {
  const Eigen::Index ch = x->value.cols();
  require(x->value.rows() == static_cast<Eigen::Index>(side) * side,
          "depthwise_conv2d grid size");
  require(k % 2 == 1, "depthwise_conv2d kernel must be odd");
  require(kernel->value.rows() == ch && kernel->value.cols() == k * k,
          "depthwise_conv2d kernel shape");
  require(bias->value.rows() == 1 && bias->value.cols() == ch,
          "depthwise_conv2d bias shape");
  const int h = k / 2;
  const Matrix& xv = x->value;
  const Matrix& kv = kernel->value;
  Matrix y(xv.rows(), ch);
  y.rowwise() = bias->value.row(0);
  for (int r = 0; r < side; ++r) {
    for (int c = 0; c < side; ++c) {
      auto out_row = y.row(r * side + c);
      for (int dy = -h; dy <= h; ++dy) {
        const int rr = r + dy;
        if (rr < 0 || rr >= side) continue;
        for (int dx = -h; dx <= h; ++dx) {
          const int cc = c + dx;
          if (cc < 0 || cc >= side) continue;
          const int tap = (dy + h) * k + (dx + h);
          out_row.array() +=
              kv.col(tap).transpose().array() * xv.row(rr * side + cc).array();
        }
      }
    }
  }
  return emit(std::move(y), {&x, &kernel, &bias},
              [x, kernel, bias, side, k, h](Node& o) {
                const Matrix& xv = x->value;
                const Matrix& kv = kernel->value;
                Matrix gx = Matrix::Zero(xv.rows(), xv.cols());
                Matrix gk = Matrix::Zero(kv.rows(), kv.cols());
                for (int r = 0; r < side; ++r) {
                  for (int c = 0; c < side; ++c) {
                    auto g_row = o.grad.row(r * side + c);
                    for (int dy = -h; dy <= h; ++dy) {
                      const int rr = r + dy;
                      if (rr < 0 || rr >= side) continue;
                      for (int dx = -h; dx <= h; ++dx) {
                        const int cc = c + dx;
                        if (cc < 0 || cc >= side) continue;
                        const int tap = (dy + h) * k + (dx + h);
                        const int src = rr * side + cc;
                        gx.row(src).array() +=
                            kv.col(tap).transpose().array() * g_row.array();
                        gk.col(tap).array() +=
                            (xv.row(src).array() * g_row.array()).transpose();
                      }
                    }
                  }
                }
                if (x->requires_grad) x->accumulate(gx);
                if (kernel->requires_grad) kernel->accumulate(gk);
                if (bias->requires_grad) {
                  bias->accumulate(o.grad.colwise().sum());
                }
              });
}

Var Tape::conv_rows(const Var& x, const Var& kernel) {
  require(kernel->value.rows() == 1 && kernel->value.cols() % 2 == 1,
          "conv_rows kernel must be 1 x odd");
  const int k = static_cast<int>(kernel->value.cols());
  const int h = k / 2;
  const Eigen::Index n = x->value.rows();
  Matrix y = Matrix::Zero(n, x->value.cols());
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int t = 0; t < k; ++t) {
      const Eigen::Index src = i + t - h;
      if (src < 0 || src >= n) continue;
      y.row(i) += kernel->value(0, t) * x->value.row(src);
    }
  }
  return emit(std::move(y), {&x, &kernel}, [x, kernel, k, h](Node& o) {
    const Eigen::Index n = x->value.rows();
    Matrix gx = Matrix::Zero(n, x->value.cols());
    Matrix gk = Matrix::Zero(1, k);
    for (Eigen::Index i = 0; i < n; ++i) {
      for (int t = 0; t < k; ++t) {
        const Eigen::Index src = i + t - h;
        if (src < 0 || src >= n) continue;
        gx.row(src) += kernel->value(0, t) * o.grad.row(i);
        gk(0, t) += o.grad.row(i).dot(x->value.row(src));
      }
    }
    if (x->requires_grad) x->accumulate(gx);
    if (kernel->requires_grad) kernel->accumulate(gk);
  });
}

Var Tape::cross_entropy(const Var& logits, int label) {
  require(logits->value.rows() == 1, "cross_entropy expects 1 x C logits");
  require(label >= 0 && label < logits->value.cols(), "label out of range");
  Matrix p = ag::softmax_rows(logits->value);
  const Eigen::Index c = logits->value.cols();
  std::vector<double> row(logits->value.data(), logits->value.data() + c);
  const double loss = log_sum_exp(row) - logits->value(0, label);
  return emit(scalar(loss), {&logits}, [logits, p, label](Node& o) {
    Matrix g = p;
    g(0, label) -= 1.0;
    logits->accumulate(g * o.grad(0, 0));
  });
}

Var Tape::smooth_svm(const Var& scores, std::span<const int> targets,
                     double margin, double tau) {
  const Eigen::Index n = scores->value.rows();
  const Eigen::Index kc = scores->value.cols();
  require(static_cast<Eigen::Index>(targets.size()) == n,
          "smooth_svm target count");
  require(n > 0, "smooth_svm of no instances");
  Matrix probs(n, kc);
  double total = 0.0;
  std::vector<double> z(static_cast<std::size_t>(kc));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int y = targets[static_cast<std::size_t>(i)];
    require(y >= 0 && y < kc, "smooth_svm target out of range");
    for (Eigen::Index j = 0; j < kc; ++j) {
      z[static_cast<std::size_t>(j)] =
          ((j != y ? margin : 0.0) + scores->value(i, j) -
           scores->value(i, y)) /
          tau;
    }
    const double lse = log_sum_exp(z);
    total += tau * lse;
    for (Eigen::Index j = 0; j < kc; ++j) {
      probs(i, j) = std::exp(z[static_cast<std::size_t>(j)] - lse);
    }
  }
  std::vector<int> ys(targets.begin(), targets.end());
  return emit(scalar(total / static_cast<double>(n)), {&scores},
              [scores, probs, ys, n](Node& o) {
                Matrix g = probs;
                for (Eigen::Index i = 0; i < n; ++i) {
                  g(i, ys[static_cast<std::size_t>(i)]) -= 1.0;
                }
                scores->accumulate(g * (o.grad(0, 0) / static_cast<double>(n)));
              });
}

}  // namespace milkit::ag
