#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "milkit/transmil.hpp"
#include "support.hpp"

namespace milkit::transmil {
namespace {

using testing::check_gradients;
using testing::random_matrix;

TransmilConfig small_config() {
  TransmilConfig c;
  c.input_dim = 6;
  c.model_dim = 8;
  c.num_heads = 2;
  c.num_landmarks = 4;
  c.num_classes = 3;
  return c;
}

Matrix exact_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
  const Matrix s = (q * k.transpose()) / std::sqrt(static_cast<double>(q.cols()));
  return ag::softmax_rows(s) * v;
}

TEST(Tokens, PaddedCount) {
  EXPECT_EQ(padded_token_count(1), 1);
  EXPECT_EQ(padded_token_count(2), 4);
  EXPECT_EQ(padded_token_count(5), 9);
  EXPECT_EQ(padded_token_count(9), 9);
  EXPECT_EQ(padded_token_count(10), 16);
  for (int n = 1; n < 5000; ++n) {
    const int m = padded_token_count(n);
    const int side = static_cast<int>(std::lround(std::sqrt(m)));
    EXPECT_EQ(side * side, m);
    EXPECT_GE(m, n);
    EXPECT_LT((side - 1) * (side - 1), n);
  }
}

TEST(Tokens, PadsWithLeadingCopies) {
  TransMilModel model(small_config(), 1);
  Rng rng(2);
  const Matrix bag = random_matrix(5, 6, rng);
  ag::Tape t(false);
  const auto seq = model.tokenize(t, bag);
  EXPECT_EQ(seq.num_instances, 5);
  EXPECT_EQ(seq.num_patch_tokens, 9);
  EXPECT_EQ(seq.grid_side, 3);
  ASSERT_EQ(seq.tokens->value.rows(), 10);
  EXPECT_EQ(seq.tokens->value.row(0), model.params().get("cls_token")->value.row(0));
  for (int i = 0; i < 4; ++i) EXPECT_EQ(seq.tokens->value.row(6 + i), seq.tokens->value.row(1 + i));
  // Projection is linear + ReLU.
  const Matrix proj = (bag * model.params().get("proj.W")->value.transpose()).rowwise() +
                      model.params().get("proj.b")->value.row(0);
  for (int i = 0; i < 5; ++i) {
    for (int j = 0; j < 8; ++j) EXPECT_NEAR(seq.tokens->value(1 + i, j), std::max(0.0, proj(i, j)), 1e-12);
  }
  EXPECT_EQ(model.tokenize(t, bag.topRows(1)).tokens->value.rows(), 2);
  EXPECT_EQ(model.tokenize(t, random_matrix(9, 6, rng)).tokens->value.rows(), 10);
}

TEST(Landmarks, SegmentMeans) {
  const Matrix p = segment_mean_matrix(10, 4);
  // Segments [0,2), [2,5), [5,7), [7,10).
  EXPECT_DOUBLE_EQ(p(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(p(1, 2), 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(p(3, 9), 1.0 / 3.0);
  for (int r = 0; r < 4; ++r) EXPECT_NEAR(p.row(r).sum(), 1.0, 1e-15);
  for (int c = 0; c < 10; ++c) EXPECT_EQ((p.col(c).array() > 0).count(), 1);
  EXPECT_TRUE(segment_mean_matrix(7, 7).isIdentity());
}

TEST(Pinv, ReproducesMatrixOnWellConditionedKernel) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const int m = 8 + static_cast<int>(rng.index(8));
    // Softmax kernel with a dominant diagonal.
    Matrix s = random_matrix(m, m, rng, 0.3);
    s.diagonal().array() += 2.0;
    const Matrix a = ag::softmax_rows(s);
    ag::Tape t(false);
    const Matrix z = iterative_pinv(t, ag::constant(a), 6)->value;
    const double rel = (a * z * a - a).norm() / a.norm();
    EXPECT_LE(rel, 1e-3);
  }
}

TEST(Pinv, RejectsNegativeEntries) {
  ag::Tape t(false);
  EXPECT_MIL_ERROR(iterative_pinv(t, ag::constant(Matrix{{1.0, -1.0}, {0.0, 1.0}}), 6),
                   ErrorCode::kInvalidArgument);
}

TEST(Nystrom, FullLandmarksMatchExactAttention) {
  Rng rng(4);
  const int n = 65, d = 16;
  const Matrix q = random_matrix(n, d, rng), k = random_matrix(n, d, rng), v = random_matrix(n, d, rng);
  ag::Tape t(false);
  const auto out = nystrom_attention(t, ag::constant(q), ag::constant(k), ag::constant(v), n, 20, true);
  const Matrix exact = exact_attention(q, k, v);
  EXPECT_LE((out.out->value - exact).cwiseAbs().maxCoeff(), 1e-4);
  const Matrix row0 = ag::softmax_rows((q.row(0) * k.transpose()) / std::sqrt(double(d)));
  for (int j = 0; j < n; ++j) EXPECT_NEAR(out.cls_row[static_cast<std::size_t>(j)], row0(0, j), 1e-4);
}

TEST(Nystrom, DegenerateCases) {
  Rng rng(5);
  ag::Tape t(false);
  const Matrix v1 = random_matrix(1, 4, rng);
  const auto single = nystrom_attention(t, ag::constant(random_matrix(1, 4, rng)),
                                        ag::constant(random_matrix(1, 4, rng)), ag::constant(v1), 8, 6);
  EXPECT_NEAR((single.out->value - v1).cwiseAbs().maxCoeff(), 0.0, 1e-14);

  const Matrix keys = random_matrix(1, 4, rng).replicate(12, 1);
  const Matrix v = random_matrix(12, 4, rng);
  const auto flat = nystrom_attention(t, ag::constant(random_matrix(12, 4, rng)), ag::constant(keys),
                                      ag::constant(v), 3, 6);
  const Matrix mean = v.colwise().mean();
  for (int i = 0; i < 12; ++i) {
    EXPECT_NEAR((flat.out->value.row(i) - mean).cwiseAbs().maxCoeff(), 0.0, 1e-12);
  }
}

TEST(Nystrom, LandmarksClampToTokenCount) {
  Rng rng(6);
  const Matrix q = random_matrix(5, 4, rng), k = random_matrix(5, 4, rng), v = random_matrix(5, 4, rng);
  ag::Tape t(false);
  const Matrix a = nystrom_attention(t, ag::constant(q), ag::constant(k), ag::constant(v), 5, 6).out->value;
  const Matrix b = nystrom_attention(t, ag::constant(q), ag::constant(k), ag::constant(v), 50, 6).out->value;
  EXPECT_EQ(a, b);
}

PpegParams ppeg_with(int channels, double fill) {
  return {ag::constant(Matrix::Constant(channels, 49, fill)), ag::constant(Matrix::Zero(1, channels)),
          ag::constant(Matrix::Constant(channels, 25, fill)), ag::constant(Matrix::Zero(1, channels)),
          ag::constant(Matrix::Constant(channels, 9, fill)), ag::constant(Matrix::Zero(1, channels))};
}

TEST(Ppeg, ZeroKernelsAreIdentity) {
  Rng rng(7);
  const Matrix tokens = random_matrix(10, 3, rng);
  ag::Tape t(false);
  EXPECT_EQ(ppeg(t, ag::constant(tokens), 3, ppeg_with(3, 0.0))->value, tokens);
}

TEST(Ppeg, ConstantFieldScalesInterior) {
  // Every kernel sums to s; interior cells see the full footprint.
  const int side = 15, ch = 2;
  const double s = 0.3;
  PpegParams p{ag::constant(Matrix::Constant(ch, 49, s / 49)), ag::constant(Matrix::Zero(1, ch)),
               ag::constant(Matrix::Constant(ch, 25, s / 25)), ag::constant(Matrix::Zero(1, ch)),
               ag::constant(Matrix::Constant(ch, 9, s / 9)), ag::constant(Matrix::Zero(1, ch))};
  Matrix tokens = Matrix::Constant(1 + side * side, ch, 2.0);
  tokens.row(0).setConstant(-5.0);
  ag::Tape t(false);
  const Matrix out = ppeg(t, ag::constant(tokens), side, p)->value;
  EXPECT_EQ(out.row(0), tokens.row(0));
  for (int r = 3; r < side - 3; ++r) {
    for (int c = 3; c < side - 3; ++c) {
      for (int j = 0; j < ch; ++j) EXPECT_NEAR(out(1 + r * side + c, j), (1.0 + 3.0 * s) * 2.0, 1e-12);
    }
  }
  EXPECT_MIL_ERROR(ppeg(t, ag::constant(Matrix::Zero(9, ch)), 3, p), ErrorCode::kNotSquare);
}

TEST(TransMil, ProbabilitiesForAnyBagSize) {
  TransMilModel model(small_config(), 9);
  Rng rng(10);
  for (int n : {1, 2, 3, 4, 5, 9, 10, 17, 40}) {
    const auto r = transmil_forward(model, random_matrix(n, 6, rng));
    ASSERT_EQ(r.probabilities.size(), 3u);
    EXPECT_NEAR(std::accumulate(r.probabilities.begin(), r.probabilities.end(), 0.0), 1.0, 1e-6);
    for (double p : r.probabilities) {
      EXPECT_GT(p, 0.0);
      EXPECT_LT(p, 1.0);
    }
    EXPECT_EQ(r.cls_attention.size(), static_cast<std::size_t>(n));
  }
}

TEST(TransMil, DeterministicAndSeedSensitive) {
  Rng rng(11);
  const Matrix bag = random_matrix(7, 6, rng);
  TransMilModel a(small_config(), 3), b(small_config(), 3), c(small_config(), 4);
  EXPECT_EQ(transmil_forward(a, bag).probabilities, transmil_forward(b, bag).probabilities);
  EXPECT_NE(transmil_forward(a, bag).probabilities, transmil_forward(c, bag).probabilities);
}

TEST(TransMil, PerfectSquareBagHasNoPaddingDependence) {
  // With N a perfect square the sequence holds each instance once, so the
  // only order dependence comes from PPEG's spatial layout; same order
  // must reproduce bit-identically.
  TransMilModel model(small_config(), 5);
  Rng rng(12);
  const Matrix bag = random_matrix(9, 6, rng);
  EXPECT_EQ(transmil_forward(model, bag).probabilities, transmil_forward(model, bag).probabilities);
}

TEST(TransMil, Errors) {
  TransMilModel model(small_config(), 1);
  EXPECT_MIL_ERROR(transmil_forward(model, Matrix(0, 6)), ErrorCode::kEmptyBag);
  EXPECT_MIL_ERROR(transmil_forward(model, Matrix::Zero(3, 4)), ErrorCode::kDimMismatch);
  TransmilConfig bad = small_config();
  bad.num_heads = 3;
  EXPECT_MIL_ERROR(TransMilModel(bad, 1), ErrorCode::kInvalidArgument);
}

TEST(TransMil, GradientMatchesFiniteDifferences) {
  TransMilModel model(small_config(), 17);
  Rng rng(18);
  const Matrix bag = random_matrix(4, 6, rng);
  const auto r = check_gradients(model.params().items(), [&](ag::Tape& t) {
    return model.loss(t, bag, 2, nullptr, nullptr);
  });
  EXPECT_LE(r.worst, 1e-3) << r.where;
}

TEST(TransMil, GradientWithValueConvolution) {
  TransmilConfig cfg = small_config();
  cfg.value_residual_conv = true;
  cfg.residual_kernel = 3;
  TransMilModel model(cfg, 19);
  Rng rng(20);
  const Matrix bag = random_matrix(6, 6, rng);
  const auto r = check_gradients(model.params().items(), [&](ag::Tape& t) {
    return model.loss(t, bag, 0, nullptr, nullptr);
  });
  EXPECT_LE(r.worst, 1e-3) << r.where;
}

}  // namespace
}  // namespace milkit::transmil
