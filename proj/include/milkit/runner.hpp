#ifndef MILKIT_RUNNER_HPP_
#define MILKIT_RUNNER_HPP_

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>

#include "json.hpp"
#include "milkit/bagio.hpp"
#include "milkit/evalx.hpp"
#include "milkit/model.hpp"
#include "milkit/train.hpp"

namespace milkit::preprocess {
class PyramidalImage;
}

namespace milkit::runner {

// Set to anything but "0" to drop wall-clock fields from reports and logs.
inline constexpr const char* kDeterministicEnv = "MILKIT_DETERMINISTIC";
bool deterministic_mode();

struct ExperimentPlan {
  std::vector<std::int64_t> data_seeds = {0, 1, 2, 3, 4};
  std::vector<std::int64_t> model_seeds = {0, 1, 2};
  std::vector<std::string> models = {"clam_sb", "clam_mb", "transmil"};
  std::vector<std::string> encoders;
  std::filesystem::path dataset;     // index JSON, or a directory build_index accepts
  std::filesystem::path bags_dir;    // <bags_dir>/<encoder_id>/<slide_id>.milfb
  std::filesystem::path output_dir;
  bagio::SplitFractions fractions;
  // Per-family model configuration (input_dim and num_classes are filled in).
  std::map<std::string, nlohmann::json> model_configs;
  // Shared training settings; per-family overrides are merged on top. The
  // optimizer defaults to Adam for CLAM and Lookahead(Adam) for TransMIL.
  nlohmann::json training = nlohmann::json::object();
  std::map<std::string, nlohmann::json> training_overrides;
  int workers = 1;

  void validate() const;
};

// Relative paths in the file resolve against the file's directory.
ExperimentPlan plan_from_json(const nlohmann::json& j,
                              const std::filesystem::path& base = {});
nlohmann::json plan_to_json(const ExperimentPlan& plan);
ExperimentPlan read_plan(const std::filesystem::path& path);

std::filesystem::path bag_path(const std::filesystem::path& bags_dir,
                               const std::string& encoder_id, const std::string& slide_id);

// Loads every bag of `index` for one encoder; throws MissingBags listing
// absent slide ids and EncoderMismatch on a foreign encoder_id.
std::vector<bagio::FeatureBag> load_bags(const bagio::DatasetIndex& index,
                                         const std::filesystem::path& bags_dir,
                                         const std::string& encoder_id);

struct RunKey {
  std::string encoder_id;
  std::string model;
  std::int64_t data_seed = 0;
  std::int64_t model_seed = 0;

  std::string label() const;
  std::filesystem::path relative_dir() const;
};

// Resolved model and training configuration for one family.
train::ModelSpec model_spec_for(const ExperimentPlan& plan, const std::string& family,
                                int input_dim, int num_classes);
train::TrainConfig train_config_for(const ExperimentPlan& plan, const std::string& family,
                                    std::int64_t model_seed);

// Content hash of everything that determines a run's outcome.
std::string run_hash(const RunKey& key, const train::ModelSpec& model,
                     const train::TrainConfig& config, const bagio::SplitSpec& split);

struct SweepReport {
  std::vector<evalx::RunMetrics> runs;
  std::vector<evalx::AggregateRow> aggregate;
  nlohmann::json provenance;
  int executed = 0;  // runs trained in this invocation
  int reused = 0;    // runs restored from disk
};

// encoder -> data seed -> model seed -> model; writes results.csv,
// aggregate.csv, aggregate.txt and report.json under output_dir. Each run
// lives in runs/<encoder>/<model>/d<data_seed>_m<model_seed>/ and is
// skipped when its metrics.json carries the current content hash.
SweepReport run_sweep(const ExperimentPlan& plan);

std::vector<evalx::PredictionRecord> predict_all(const model::MilModel& model,
                                                 std::span<const train::LabeledBag> bags);

struct HeatmapOptions {
  int colormap = cv::COLORMAP_JET;
  double alpha = 0.5;            // overlay opacity over the thumbnail
  double downsample = 16.0;      // level-0 pixels per output pixel
  // Level-0 pixels per target pixel; 0 takes it from the slide image when
  // given, else 1.
  double level0_factor = 0.0;
};

struct HeatmapResult {
  std::vector<double> attention;    // raw, per instance
  std::vector<double> normalized;   // min-max over the slide; all 0 if constant
  cv::Mat intensity;                // CV_8U, 0 outside patches, 1 + 254 * normalized inside
  cv::Mat image;                    // BGR overlay written to disk
};

HeatmapResult render_heatmap(const bagio::PatchManifest& manifest, const bagio::FeatureBag& bag,
                             const model::MilModel& model, const std::string& model_encoder_id,
                             const preprocess::PyramidalImage* slide,
                             const HeatmapOptions& options = {});

HeatmapResult export_heatmap(const bagio::PatchManifest& manifest, const bagio::FeatureBag& bag,
                             const model::LoadedCheckpoint& checkpoint,
                             const std::filesystem::path& out_png,
                             const preprocess::PyramidalImage* slide = nullptr,
                             const HeatmapOptions& options = {});

// Min-max normalisation; constant input maps to zeros.
std::vector<double> min_max_normalize(const std::vector<double>& values);

}  // namespace milkit::runner

#endif  // MILKIT_RUNNER_HPP_
