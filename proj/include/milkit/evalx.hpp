#ifndef MILKIT_EVALX_HPP_
#define MILKIT_EVALX_HPP_

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace milkit::evalx {

struct PredictionRecord {
  std::string slide_id;
  int true_label = 0;
  std::vector<double> probabilities;

  // argmax, lowest index on ties.
  int predicted() const;
};

// Throws InvalidArgument unless probabilities are finite, non-negative,
// sum to 1 within 1e-6, agree in length, and true labels are in range.
void check_records(std::span<const PredictionRecord> records);

double accuracy(std::span<const PredictionRecord> records);

enum class AucAverage { kMacro, kMicro };

struct AucResult {
  double value = 0.0;
  std::vector<int> scored_classes;
  std::vector<int> skipped_classes;  // absent from the test set (or present in every record)
};

// One-vs-rest AUC with class-c probability as score; tied pairs count 0.5.
// Macro averages over scoreable classes; micro pools all (record, class)
// pairs into one binary problem.
AucResult auc_detail(std::span<const PredictionRecord> records,
                     AucAverage average = AucAverage::kMacro);
double auc(std::span<const PredictionRecord> records, AucAverage average = AucAverage::kMacro);

// Binary AUC from scores and 0/1 labels via midranks.
double binary_auc(std::span<const double> scores, std::span<const int> positive);

// Mean over records of the largest class probability.
double confidence(std::span<const PredictionRecord> records);

struct RunMetrics {
  std::string encoder_id;
  std::string model;
  std::int64_t data_seed = 0;
  std::int64_t model_seed = 0;
  int n_test = 0;
  double accuracy = 0.0;
  double auc = 0.0;
  double confidence = 0.0;
  int epochs_trained = 0;
};

RunMetrics evaluate_run(std::span<const PredictionRecord> records);

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample (n - 1); 0 when n == 1
};

Summary summarize(std::span<const double> values);

struct AggregateRow {
  std::string model;
  std::string encoder_id;
  int n = 0;
  bool single_run = false;
  Summary accuracy, auc, confidence;
};

// Groups by (model, encoder_id) in order of first appearance.
std::vector<AggregateRow> aggregate(std::span<const RunMetrics> runs);

// "95.86 (± 1.80)" with values in percent.
std::string format_mean_std(const Summary& s);

void write_results_csv(std::ostream& os, std::span<const RunMetrics> runs);
std::vector<RunMetrics> read_results_csv(std::istream& is);
void write_aggregate_csv(std::ostream& os, std::span<const AggregateRow> rows);
void write_aggregate_text(std::ostream& os, std::span<const AggregateRow> rows);

}  // namespace milkit::evalx

#endif  // MILKIT_EVALX_HPP_
