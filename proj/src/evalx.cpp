#include "milkit/evalx.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <istream>
#include <numeric>
#include <sstream>

#include "milkit/error.hpp"

namespace milkit::evalx {

int PredictionRecord::predicted() const {
  int best = 0;
  for (int i = 1; i < static_cast<int>(probabilities.size()); ++i) {
    if (probabilities[static_cast<std::size_t>(i)] > probabilities[static_cast<std::size_t>(best)]) {
      best = i;
    }
  }
  return best;
}

void check_records(std::span<const PredictionRecord> records) {
  if (records.empty()) throw MilError(ErrorCode::kEmptyTestSet, "no prediction records");
  const std::size_t c = records.front().probabilities.size();
  if (c < 2) throw MilError(ErrorCode::kInvalidArgument, "need at least two classes");
  for (const auto& r : records) {
    if (r.probabilities.size() != c) {
      throw MilError(ErrorCode::kInvalidArgument, r.slide_id + ": probability length differs");
    }
    double sum = 0.0;
    for (double p : r.probabilities) {
      if (!std::isfinite(p) || p < 0.0) {
        throw MilError(ErrorCode::kInvalidArgument, r.slide_id + ": invalid probability");
      }
      sum += p;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
      throw MilError(ErrorCode::kInvalidArgument, r.slide_id + ": probabilities do not sum to 1");
    }
    if (r.true_label < 0 || r.true_label >= static_cast<int>(c)) {
      throw MilError(ErrorCode::kInvalidArgument, r.slide_id + ": label out of range");
    }
  }
}

double accuracy(std::span<const PredictionRecord> records) {
  if (records.empty()) throw MilError(ErrorCode::kEmptyTestSet, "accuracy of empty set");
  const auto hits = std::count_if(records.begin(), records.end(),
                                  [](const PredictionRecord& r) { return r.predicted() == r.true_label; });
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

double binary_auc(std::span<const double> scores, std::span<const int> positive) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Midranks: a run of ties shares the average of its 1-based ranks.
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double mid = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = mid;
    i = j + 1;
  }
  double pos = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (positive[i] != 0) {
      pos += 1.0;
      rank_sum += rank[i];
    }
  }
  const double neg = static_cast<double>(n) - pos;
  if (pos == 0.0 || neg == 0.0) {
    throw MilError(ErrorCode::kAllOneClass, "binary AUC needs both positives and negatives");
  }
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

AucResult auc_detail(std::span<const PredictionRecord> records, AucAverage average) {
  check_records(records);
  const int c = static_cast<int>(records.front().probabilities.size());
  AucResult out;
  std::vector<int> counts(static_cast<std::size_t>(c), 0);
  for (const auto& r : records) ++counts[static_cast<std::size_t>(r.true_label)];
  const int n = static_cast<int>(records.size());
  for (int k = 0; k < c; ++k) {
    const int cnt = counts[static_cast<std::size_t>(k)];
    (cnt > 0 && cnt < n ? out.scored_classes : out.skipped_classes).push_back(k);
  }
  if (out.scored_classes.empty()) {
    throw MilError(ErrorCode::kAllOneClass, "no class has both positive and negative records");
  }
  if (average == AucAverage::kMicro) {
    std::vector<double> scores;
    std::vector<int> pos;
    for (const auto& r : records) {
      for (int k = 0; k < c; ++k) {
        scores.push_back(r.probabilities[static_cast<std::size_t>(k)]);
        pos.push_back(r.true_label == k ? 1 : 0);
      }
    }
    out.value = binary_auc(scores, pos);
    return out;
  }
  double sum = 0.0;
  for (int k : out.scored_classes) {
    std::vector<double> scores;
    std::vector<int> pos;
    for (const auto& r : records) {
      scores.push_back(r.probabilities[static_cast<std::size_t>(k)]);
      pos.push_back(r.true_label == k ? 1 : 0);
    }
    sum += binary_auc(scores, pos);
  }
  out.value = sum / static_cast<double>(out.scored_classes.size());
  return out;
}

double auc(std::span<const PredictionRecord> records, AucAverage average) {
  return auc_detail(records, average).value;
}

double confidence(std::span<const PredictionRecord> records) {
  if (records.empty()) throw MilError(ErrorCode::kEmptyTestSet, "confidence of empty set");
  double sum = 0.0;
  for (const auto& r : records) {
    sum += *std::max_element(r.probabilities.begin(), r.probabilities.end());
  }
  return sum / static_cast<double>(records.size());
}

RunMetrics evaluate_run(std::span<const PredictionRecord> records) {
  check_records(records);
  RunMetrics m;
  m.n_test = static_cast<int>(records.size());
  m.accuracy = accuracy(records);
  m.auc = auc(records);
  m.confidence = confidence(records);
  return m;
}

Summary summarize(std::span<const double> values) {
  if (values.empty()) throw MilError(ErrorCode::kEmptyGroup, "cannot summarize zero runs");
  Summary s;
  const double n = static_cast<double>(values.size());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / (n - 1.0));
  }
  return s;
}

std::vector<AggregateRow> aggregate(std::span<const RunMetrics> runs) {
  if (runs.empty()) throw MilError(ErrorCode::kEmptyGroup, "no runs to aggregate");
  std::vector<std::pair<std::string, std::string>> keys;
  for (const auto& r : runs) {
    const std::pair<std::string, std::string> key{r.model, r.encoder_id};
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
  }
  std::vector<AggregateRow> rows;
  for (const auto& [model, encoder] : keys) {
    std::vector<double> acc, au, conf;
    for (const auto& r : runs) {
      if (r.model != model || r.encoder_id != encoder) continue;
      acc.push_back(r.accuracy);
      au.push_back(r.auc);
      conf.push_back(r.confidence);
    }
    AggregateRow row;
    row.model = model;
    row.encoder_id = encoder;
    row.n = static_cast<int>(acc.size());
    row.single_run = row.n == 1;
    row.accuracy = summarize(acc);
    row.auc = summarize(au);
    row.confidence = summarize(conf);
    rows.push_back(row);
  }
  return rows;
}

std::string format_mean_std(const Summary& s) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.2f (± %.2f)", 100.0 * s.mean, 100.0 * s.std);
  return buf;
}

namespace {

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

}  // namespace

void write_results_csv(std::ostream& os, std::span<const RunMetrics> runs) {
  os << "encoder,model,data_seed,model_seed,n_test,accuracy,auc,confidence,epochs_trained\n";
  for (const auto& r : runs) {
    os << r.encoder_id << ',' << r.model << ',' << r.data_seed << ',' << r.model_seed << ','
       << r.n_test << ',' << fixed(r.accuracy) << ',' << fixed(r.auc) << ','
       << fixed(r.confidence) << ',' << r.epochs_trained << '\n';
  }
}

std::vector<RunMetrics> read_results_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw MilError(ErrorCode::kIoError, "empty results CSV");
  std::vector<RunMetrics> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 9) throw MilError(ErrorCode::kIoError, "malformed results row: " + line);
    RunMetrics m;
    m.encoder_id = f[0];
    m.model = f[1];
    m.data_seed = std::stoll(f[2]);
    m.model_seed = std::stoll(f[3]);
    m.n_test = std::stoi(f[4]);
    m.accuracy = std::stod(f[5]);
    m.auc = std::stod(f[6]);
    m.confidence = std::stod(f[7]);
    m.epochs_trained = std::stoi(f[8]);
    out.push_back(m);
  }
  return out;
}

void write_aggregate_csv(std::ostream& os, std::span<const AggregateRow> rows) {
  os << "model,encoder,n,accuracy_mean,accuracy_std,auc_mean,auc_std,confidence_mean,"
        "confidence_std,single_run\n";
  for (const auto& r : rows) {
    os << r.model << ',' << r.encoder_id << ',' << r.n << ',' << fixed(r.accuracy.mean) << ','
       << fixed(r.accuracy.std) << ',' << fixed(r.auc.mean) << ',' << fixed(r.auc.std) << ','
       << fixed(r.confidence.mean) << ',' << fixed(r.confidence.std) << ','
       << (r.single_run ? 1 : 0) << '\n';
  }
}

void write_aggregate_text(std::ostream& os, std::span<const AggregateRow> rows) {
  const std::vector<std::string> head = {"model", "encoder", "n", "AUC", "Accuracy", "Confidence"};
  std::vector<std::vector<std::string>> table = {head};
  for (const auto& r : rows) {
    table.push_back({r.model, r.encoder_id, std::to_string(r.n) + (r.single_run ? "*" : ""),
                     format_mean_std(r.auc), format_mean_std(r.accuracy),
                     format_mean_std(r.confidence)});
  }
  // Width in code points so the plus-minus sign aligns.
  const auto width = [](const std::string& s) {
    return static_cast<std::size_t>(std::count_if(
        s.begin(), s.end(), [](char ch) { return (static_cast<unsigned char>(ch) & 0xC0) != 0x80; }));
  };
  std::vector<std::size_t> w(head.size(), 0);
  for (const auto& row : table) {
    for (std::size_t i = 0; i < row.size(); ++i) w[i] = std::max(w[i], width(row[i]));
  }
  for (const auto& row : table) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      os << row[i];
      if (i + 1 < row.size()) os << std::string(w[i] - width(row[i]) + 2, ' ');
    }
    os << '\n';
  }
  const bool any_single = std::any_of(rows.begin(), rows.end(),
                                      [](const AggregateRow& r) { return r.single_run; });
  if (any_single) os << "* single run: std undefined, reported as 0\n";
}

}  // namespace milkit::evalx
