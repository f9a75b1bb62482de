#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "milkit/evalx.hpp"
#include "milkit/rng.hpp"
#include "support.hpp"

namespace milkit::evalx {
namespace {

PredictionRecord rec(int label, std::vector<double> p, std::string id = "s") {
  return {std::move(id), label, std::move(p)};
}

// Exhaustive pair counting, independent of the rank-based implementation.
double brute_force_macro_auc(const std::vector<PredictionRecord>& rs) {
  const int c = static_cast<int>(rs.front().probabilities.size());
  double sum = 0.0;
  int scored = 0;
  for (int k = 0; k < c; ++k) {
    double wins = 0.0;
    int pairs = 0;
    for (const auto& pos : rs) {
      if (pos.true_label != k) continue;
      for (const auto& neg : rs) {
        if (neg.true_label == k) continue;
        const double a = pos.probabilities[static_cast<std::size_t>(k)];
        const double b = neg.probabilities[static_cast<std::size_t>(k)];
        wins += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
        ++pairs;
      }
    }
    if (pairs > 0) {
      sum += wins / pairs;
      ++scored;
    }
  }
  return sum / scored;
}

std::vector<double> random_simplex(int c, Rng& rng, int levels = 0) {
  std::vector<double> p(static_cast<std::size_t>(c));
  double total = 0.0;
  for (auto& v : p) {
    // Coarse levels make ties likely.
    v = levels > 0 ? 1.0 + static_cast<double>(rng.index(static_cast<std::size_t>(levels))) : rng.uniform() + 1e-3;
    total += v;
  }
  for (auto& v : p) v /= total;
  return p;
}

std::vector<PredictionRecord> random_records(int n, int c, Rng& rng, int levels = 0) {
  std::vector<PredictionRecord> rs;
  for (int i = 0; i < n; ++i) {
    rs.push_back(rec(i < c ? i : static_cast<int>(rng.index(static_cast<std::size_t>(c))), random_simplex(c, rng, levels),
                     "s" + std::to_string(i)));
  }
  return rs;
}

TEST(Accuracy, Examples) {
  const std::vector<PredictionRecord> all = {rec(0, {0.9, 0.1}), rec(1, {0.2, 0.8})};
  EXPECT_DOUBLE_EQ(accuracy(all), 1.0);
  const std::vector<PredictionRecord> three = {rec(0, {0.9, 0.1}), rec(1, {0.2, 0.8}), rec(1, {0.3, 0.7}),
                                               rec(0, {0.4, 0.6})};
  EXPECT_DOUBLE_EQ(accuracy(three), 0.75);
  const std::vector<PredictionRecord> tie = {rec(1, {0.5, 0.5})};
  EXPECT_EQ(tie[0].predicted(), 0);
  EXPECT_DOUBLE_EQ(accuracy(tie), 0.0);
  EXPECT_MIL_ERROR(accuracy(std::vector<PredictionRecord>{}), ErrorCode::kEmptyTestSet);
}

TEST(Auc, Examples) {
  const std::vector<PredictionRecord> perfect = {rec(0, {0.9, 0.1}), rec(1, {0.1, 0.9})};
  EXPECT_DOUBLE_EQ(auc(perfect), 1.0);
  const std::vector<PredictionRecord> flat = {rec(0, {0.5, 0.5}), rec(1, {0.5, 0.5}), rec(1, {0.5, 0.5})};
  EXPECT_DOUBLE_EQ(auc(flat), 0.5);
  const std::vector<PredictionRecord> six = {
      rec(0, {0.6, 0.3, 0.1}), rec(0, {0.3, 0.4, 0.3}), rec(1, {0.2, 0.5, 0.3}),
      rec(1, {0.3, 0.3, 0.4}), rec(2, {0.1, 0.2, 0.7}), rec(2, {0.4, 0.4, 0.2})};
  // By hand: class 0 wins 6.5 of 8 pairs, class 1 5.5 of 8, class 2 5 of 8.
  EXPECT_NEAR(auc(six), (6.5 / 8 + 5.5 / 8 + 5.0 / 8) / 3, 1e-15);
  EXPECT_NEAR(auc(six), brute_force_macro_auc(six), 1e-15);
}

TEST(Auc, MatchesPairCountingOracle) {
  Rng rng(1);
  for (int trial = 0; trial < 300; ++trial) {
    const int c = 2 + static_cast<int>(rng.index(4));
    const int n = c + static_cast<int>(rng.index(20));
    const auto rs = random_records(n, c, rng, trial % 2 ? 3 : 0);
    ASSERT_NEAR(auc(rs), brute_force_macro_auc(rs), 1e-12) << "trial " << trial;
  }
}

TEST(Auc, AbsentClassSkippedAndReported) {
  const std::vector<PredictionRecord> rs = {rec(0, {0.7, 0.2, 0.1}), rec(1, {0.2, 0.7, 0.1}),
                                            rec(0, {0.5, 0.4, 0.1})};
  const auto d = auc_detail(rs);
  EXPECT_EQ(d.scored_classes, (std::vector<int>{0, 1}));
  EXPECT_EQ(d.skipped_classes, (std::vector<int>{2}));
  EXPECT_DOUBLE_EQ(d.value, 1.0);
  const std::vector<PredictionRecord> one = {rec(1, {0.2, 0.8}), rec(1, {0.6, 0.4})};
  EXPECT_MIL_ERROR(auc(one), ErrorCode::kAllOneClass);
}

TEST(Auc, MonotoneTransformInvariance) {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    auto rs = random_records(15, 3, rng);
    const double before = auc(rs);
    // A strictly increasing map would break the simplex, so compare the
    // per-class binary AUCs that the macro average is built from.
    for (int k = 0; k < 3; ++k) {
      std::vector<double> s, t;
      std::vector<int> pos;
      for (const auto& r : rs) {
        const double v = r.probabilities[static_cast<std::size_t>(k)];
        s.push_back(v);
        t.push_back(std::exp(5.0 * v) + v * v * v);
        pos.push_back(r.true_label == k);
      }
      EXPECT_DOUBLE_EQ(binary_auc(s, pos), binary_auc(t, pos));
    }
    EXPECT_GE(before, 0.0);
    EXPECT_LE(before, 1.0);
  }
}

TEST(Metrics, PermutationInvariance) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    auto rs = random_records(12, 4, rng, 4);
    const double a = accuracy(rs), u = auc(rs), c = confidence(rs);
    rng.shuffle(rs);
    EXPECT_DOUBLE_EQ(accuracy(rs), a);
    EXPECT_NEAR(auc(rs), u, 1e-15);
    EXPECT_NEAR(confidence(rs), c, 1e-15);
  }
}

TEST(Confidence, ExamplesAndBounds) {
  EXPECT_DOUBLE_EQ(confidence(std::vector<PredictionRecord>{rec(0, {0.7, 0.2, 0.1})}), 0.7);
  EXPECT_DOUBLE_EQ(confidence(std::vector<PredictionRecord>{rec(0, {0.9, 0.1}), rec(1, {0.5, 0.5})}), 0.7);
  EXPECT_DOUBLE_EQ(confidence(std::vector<PredictionRecord>{rec(3, {0.2, 0.2, 0.2, 0.2, 0.2})}), 0.2);
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const int c = 2 + static_cast<int>(rng.index(6));
    const double v = confidence(random_records(10, c, rng));
    EXPECT_GE(v, 1.0 / c - 1e-12);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_MIL_ERROR(confidence(std::vector<PredictionRecord>{}), ErrorCode::kEmptyTestSet);
}

TEST(Records, Validation) {
  EXPECT_MIL_ERROR(check_records(std::vector<PredictionRecord>{rec(0, {0.6, 0.6})}), ErrorCode::kInvalidArgument);
  EXPECT_MIL_ERROR(check_records(std::vector<PredictionRecord>{rec(0, {1.1, -0.1})}), ErrorCode::kInvalidArgument);
  EXPECT_MIL_ERROR(check_records(std::vector<PredictionRecord>{rec(2, {0.5, 0.5})}), ErrorCode::kInvalidArgument);
  EXPECT_MIL_ERROR(check_records(std::vector<PredictionRecord>{rec(0, {0.5, 0.5}), rec(0, {0.2, 0.3, 0.5})}),
                   ErrorCode::kInvalidArgument);
}

TEST(EvaluateRun, CombinesMetrics) {
  const std::vector<PredictionRecord> rs = {rec(0, {0.8, 0.2}), rec(1, {0.4, 0.6}), rec(1, {0.7, 0.3})};
  const auto m = evaluate_run(rs);
  EXPECT_EQ(m.n_test, 3);
  EXPECT_NEAR(m.accuracy, 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(m.confidence, (0.8 + 0.6 + 0.7) / 3, 1e-15);
  // Ranking is perfect even though one argmax is wrong.
  EXPECT_DOUBLE_EQ(m.auc, 1.0);
}

RunMetrics run(const std::string& model, const std::string& enc, double acc, double a, double c) {
  RunMetrics m;
  m.model = model;
  m.encoder_id = enc;
  m.accuracy = acc;
  m.auc = a;
  m.confidence = c;
  m.n_test = 10;
  return m;
}

TEST(Aggregate, HandComputedStd) {
  const std::vector<double> v = {0.90, 0.92};
  const auto s = summarize(v);
  EXPECT_NEAR(s.mean, 0.91, 1e-15);
  EXPECT_NEAR(s.std, std::sqrt(2.0) / 100, 1e-15);
  EXPECT_EQ(format_mean_std(s), "91.00 (± 1.41)");
  EXPECT_EQ(format_mean_std({0.9586, 0.0180}), "95.86 (± 1.80)");
  const std::vector<double> one = {0.5};
  EXPECT_EQ(summarize(one).std, 0.0);
  EXPECT_MIL_ERROR(summarize(std::vector<double>{}), ErrorCode::kEmptyGroup);
}

TEST(Aggregate, GroupsInFirstAppearanceOrder) {
  std::vector<RunMetrics> runs;
  for (int i = 0; i < 15; ++i) runs.push_back(run("transmil", "kimianet", 0.8, 0.9, 0.7));
  runs.push_back(run("clam_sb", "kimianet", 0.5, 0.5, 0.5));
  runs.insert(runs.begin() + 3, run("clam_sb", "resnet", 0.6, 0.6, 0.6));
  const auto rows = aggregate(runs);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].model, "transmil");
  EXPECT_EQ(rows[0].n, 15);
  EXPECT_NEAR(rows[0].accuracy.std, 0.0, 1e-15);
  EXPECT_EQ(rows[1].encoder_id, "resnet");
  EXPECT_TRUE(rows[1].single_run);
  EXPECT_FALSE(rows[0].single_run);
  EXPECT_MIL_ERROR(aggregate(std::vector<RunMetrics>{}), ErrorCode::kEmptyGroup);
}

TEST(Csv, ResultsRoundTripAndTables) {
  std::vector<RunMetrics> runs = {run("clam_sb", "randproj-test", 0.875, 0.93, 0.8125),
                                  run("clam_sb", "randproj-test", 0.9, 0.95, 0.85)};
  runs[1].data_seed = 3;
  runs[1].model_seed = 2;
  runs[1].epochs_trained = 57;
  std::ostringstream out;
  write_results_csv(out, runs);
  EXPECT_EQ(out.str().substr(0, out.str().find('\n')),
            "encoder,model,data_seed,model_seed,n_test,accuracy,auc,confidence,epochs_trained");
  EXPECT_NE(out.str().find("randproj-test,clam_sb,3,2,10,0.900000,0.950000,0.850000,57"), std::string::npos);
  std::istringstream in(out.str());
  const auto back = read_results_csv(in);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].epochs_trained, 57);
  EXPECT_DOUBLE_EQ(back[0].confidence, 0.8125);

  std::ostringstream agg, text;
  write_aggregate_csv(agg, aggregate(runs));
  write_aggregate_text(text, aggregate(runs));
  EXPECT_NE(text.str().find("88.75 (± 1.77)"), std::string::npos) << text.str();
  EXPECT_EQ(text.str().find("single run"), std::string::npos);
  std::ostringstream lone;
  write_aggregate_text(lone, aggregate(std::span(runs).first(1)));
  EXPECT_NE(lone.str().find("single run"), std::string::npos);
}

}  // namespace
}  // namespace milkit::evalx
