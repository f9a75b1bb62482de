#include "milkit/runner.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <thread>

#include <opencv2/imgcodecs.hpp>

#include "milkit/error.hpp"
#include "milkit/preprocess.hpp"
#include "milkit/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace milkit::runner {

bool deterministic_mode() {
  const char* v = std::getenv(kDeterministicEnv);
  return v != nullptr && std::string(v) != "0" && std::string(v) != "";
}

// -------------------------------------------------------------------- plan

void ExperimentPlan::validate() const {
  const auto bad = [](const std::string& why) {
    return MilError(ErrorCode::kInvalidArgument, "plan: " + why);
  };
  if (data_seeds.empty() || model_seeds.empty()) throw bad("seed lists must be non-empty");
  if (std::set(data_seeds.begin(), data_seeds.end()).size() != data_seeds.size()) {
    throw bad("data_seeds must be distinct");
  }
  if (std::set(model_seeds.begin(), model_seeds.end()).size() != model_seeds.size()) {
    throw bad("model_seeds must be distinct");
  }
  if (models.empty()) throw bad("models must be non-empty");
  static const std::set<std::string> kFamilies = {"clam_sb", "clam_mb", "transmil"};
  for (const auto& m : models) {
    if (!kFamilies.count(m)) throw bad("unknown model '" + m + "'");
  }
  if (std::set(models.begin(), models.end()).size() != models.size()) throw bad("duplicate model");
  if (encoders.empty()) throw bad("encoders must be non-empty");
  if (dataset.empty()) throw bad("dataset path is required");
  if (output_dir.empty()) throw bad("output_dir is required");
  if (workers < 1) throw bad("workers must be >= 1");
}

ExperimentPlan plan_from_json(const json& j, const fs::path& base) {
  ExperimentPlan p;
  const auto path_of = [&](const char* key) {
    fs::path v = j.value(key, std::string());
    if (!v.empty() && v.is_relative() && !base.empty()) v = base / v;
    return v;
  };
  if (j.contains("data_seeds")) p.data_seeds = j.at("data_seeds").get<std::vector<std::int64_t>>();
  if (j.contains("model_seeds")) p.model_seeds = j.at("model_seeds").get<std::vector<std::int64_t>>();
  if (j.contains("models")) p.models = j.at("models").get<std::vector<std::string>>();
  if (j.contains("encoders")) p.encoders = j.at("encoders").get<std::vector<std::string>>();
  p.dataset = path_of("dataset");
  p.bags_dir = path_of("bags_dir");
  p.output_dir = path_of("output_dir");
  if (p.bags_dir.empty() && !p.dataset.empty()) p.bags_dir = p.dataset.parent_path() / "bags";
  if (j.contains("fractions")) {
    const auto& f = j.at("fractions");
    p.fractions.train = f.value("train", p.fractions.train);
    p.fractions.val = f.value("val", p.fractions.val);
    p.fractions.test = f.value("test", p.fractions.test);
  }
  if (j.contains("model_configs")) {
    for (const auto& [k, v] : j.at("model_configs").items()) p.model_configs[k] = v;
  }
  p.training = j.value("training", json::object());
  if (j.contains("training_overrides")) {
    for (const auto& [k, v] : j.at("training_overrides").items()) p.training_overrides[k] = v;
  }
  p.workers = j.value("workers", p.workers);
  return p;
}

json plan_to_json(const ExperimentPlan& p) {
  json mc = json::object();
  for (const auto& [k, v] : p.model_configs) mc[k] = v;
  json to = json::object();
  for (const auto& [k, v] : p.training_overrides) to[k] = v;
  return {{"data_seeds", p.data_seeds},
          {"model_seeds", p.model_seeds},
          {"models", p.models},
          {"encoders", p.encoders},
          {"dataset", p.dataset.string()},
          {"bags_dir", p.bags_dir.string()},
          {"output_dir", p.output_dir.string()},
          {"fractions", {{"train", p.fractions.train}, {"val", p.fractions.val}, {"test", p.fractions.test}}},
          {"model_configs", mc},
          {"training", p.training},
          {"training_overrides", to},
          {"workers", p.workers}};
}

ExperimentPlan read_plan(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw MilError(ErrorCode::kIoError, "cannot open plan " + path.string());
  json j;
  try {
    j = json::parse(is);
  } catch (const json::exception& e) {
    throw MilError(ErrorCode::kInvalidArgument, "plan " + path.string() + ": " + e.what());
  }
  return plan_from_json(j, path.parent_path());
}

fs::path bag_path(const fs::path& bags_dir, const std::string& encoder_id,
                  const std::string& slide_id) {
  return bags_dir / encoder_id / (slide_id + ".milfb");
}

std::vector<bagio::FeatureBag> load_bags(const bagio::DatasetIndex& index, const fs::path& bags_dir,
                                         const std::string& encoder_id) {
  std::vector<std::string> missing;
  for (const auto& s : index.slides) {
    if (!fs::is_regular_file(bag_path(bags_dir, encoder_id, s.slide_id))) missing.push_back(s.slide_id);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : ", ") + id;
    throw MilError(ErrorCode::kMissingBags,
                   "encoder " + encoder_id + " has no bags for: " + list);
  }
  std::vector<bagio::FeatureBag> bags;
  bags.reserve(index.slides.size());
  for (const auto& s : index.slides) {
    bags.push_back(bagio::read_feature_bag(bag_path(bags_dir, encoder_id, s.slide_id)));
    if (bags.back().encoder_id != encoder_id) {
      throw MilError(ErrorCode::kEncoderMismatch,
                     s.slide_id + " was encoded by " + bags.back().encoder_id + ", not " + encoder_id);
    }
  }
  return bags;
}

std::string RunKey::label() const {
  return encoder_id + "/" + model + " data_seed=" + std::to_string(data_seed) +
         " model_seed=" + std::to_string(model_seed);
}

fs::path RunKey::relative_dir() const {
  return fs::path("runs") / encoder_id / model /
         ("d" + std::to_string(data_seed) + "_m" + std::to_string(model_seed));
}

train::ModelSpec model_spec_for(const ExperimentPlan& plan, const std::string& family,
                                int input_dim, int num_classes) {
  train::ModelSpec spec;
  spec.family = family;
  const auto it = plan.model_configs.find(family);
  spec.config = it != plan.model_configs.end() ? it->second : json::object();
  spec.config["input_dim"] = input_dim;
  spec.config["num_classes"] = num_classes;
  // Canonical form: parse and re-serialise so defaults are explicit.
  const auto probe = model::make_model(family, spec.config, 0);
  spec.config = probe->config_json();
  return spec;
}

train::TrainConfig train_config_for(const ExperimentPlan& plan, const std::string& family,
                                    std::int64_t model_seed) {
  json merged = plan.training;
  const auto it = plan.training_overrides.find(family);
  if (it != plan.training_overrides.end()) merged.merge_patch(it->second);
  train::TrainConfig c = train::train_config_from_json(merged);
  if (!merged.contains("optimizer")) c.optimizer = train::default_optimizer(family);
  c.model_seed = model_seed;
  c.validate();
  return c;
}

namespace {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

json metrics_to_json(const evalx::RunMetrics& m) {
  return {{"encoder", m.encoder_id}, {"model", m.model},         {"data_seed", m.data_seed},
          {"model_seed", m.model_seed}, {"n_test", m.n_test},   {"accuracy", m.accuracy},
          {"auc", m.auc},              {"confidence", m.confidence},
          {"epochs_trained", m.epochs_trained}};
}

evalx::RunMetrics metrics_from_json(const json& j) {
  evalx::RunMetrics m;
  m.encoder_id = j.at("encoder");
  m.model = j.at("model");
  m.data_seed = j.at("data_seed");
  m.model_seed = j.at("model_seed");
  m.n_test = j.at("n_test");
  m.accuracy = j.at("accuracy");
  m.auc = j.at("auc");
  m.confidence = j.at("confidence");
  m.epochs_trained = j.at("epochs_trained");
  return m;
}

void write_text(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw MilError(ErrorCode::kIoError, "cannot write " + tmp.string());
    os << text;
  }
  fs::rename(tmp, path);
}

std::optional<evalx::RunMetrics> completed_run(const fs::path& dir, const std::string& hash) {
  const fs::path file = dir / "metrics.json";
  if (!fs::is_regular_file(file)) return std::nullopt;
  try {
    std::ifstream is(file);
    const json j = json::parse(is);
    if (j.value("hash", std::string()) != hash) return std::nullopt;
    return metrics_from_json(j.at("metrics"));
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

struct RunJob {
  RunKey key;
  std::size_t encoder_slot = 0;
  std::size_t split_slot = 0;
  train::ModelSpec spec;
  train::TrainConfig config;
  std::string hash;
};

struct EncoderData {
  std::vector<bagio::FeatureBag> bags;
  std::map<std::string, const bagio::FeatureBag*> by_id;
};

evalx::RunMetrics execute_run(const RunJob& job, const fs::path& dir, const EncoderData& data,
                              const bagio::DatasetIndex& index, const bagio::SplitSpec& split) {
  const auto train_set = train::gather_bags(index, data.by_id, split.train);
  const auto val_set = train::gather_bags(index, data.by_id, split.val);
  const auto test_set = train::gather_bags(index, data.by_id, split.test);
  if (test_set.empty()) throw MilError(ErrorCode::kEmptyTestSet, "split has no test slides");

  fs::create_directories(dir);
  std::ofstream log(dir / "train_log.jsonl", std::ios::trunc);
  train::TrainOptions opts;
  opts.log_stream = &log;
  opts.checkpoint_path = dir / "model.milck";
  opts.checkpoint_metadata = {{"encoder_id", job.key.encoder_id},
                              {"data_seed", job.key.data_seed},
                              {"model_seed", job.key.model_seed},
                              {"run_hash", job.hash}};
  const auto t0 = std::chrono::steady_clock::now();
  const train::TrainResult result = train::train_model(job.spec, train_set, val_set, job.config, opts);

  const auto records = predict_all(*result.model, test_set);
  std::string preds = "slide_id,true_label,predicted";
  for (int c = 0; c < result.model->num_classes(); ++c) preds += ",p" + std::to_string(c);
  preds += "\n";
  for (const auto& r : records) {
    preds += r.slide_id + "," + std::to_string(r.true_label) + "," + std::to_string(r.predicted());
    for (double p : r.probabilities) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), ",%.9f", p);
      preds += buf;
    }
    preds += "\n";
  }
  write_text(dir / "predictions.csv", preds);

  evalx::RunMetrics m = evalx::evaluate_run(records);
  m.encoder_id = job.key.encoder_id;
  m.model = job.key.model;
  m.data_seed = job.key.data_seed;
  m.model_seed = job.key.model_seed;
  m.epochs_trained = result.epochs_trained;

  json meta = {{"hash", job.hash},
               {"metrics", metrics_to_json(m)},
               {"best_epoch", result.best_epoch},
               {"best_val_loss", result.best_val_loss}};
  if (!deterministic_mode()) {
    meta["wall_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
  // Written last: its presence marks the run complete.
  write_text(dir / "metrics.json", meta.dump(2) + "\n");
  return m;
}

}  // namespace

std::string run_hash(const RunKey& key, const train::ModelSpec& model,
                     const train::TrainConfig& config, const bagio::SplitSpec& split) {
  const json j = {{"encoder", key.encoder_id},
                  {"model", key.model},
                  {"data_seed", key.data_seed},
                  {"model_seed", key.model_seed},
                  {"model_config", model.config},
                  {"train_config", train::train_config_to_json(config)},
                  {"split", bagio::split_to_json(split)}};
  return hex64(fnv1a64(j.dump()));
}

std::vector<evalx::PredictionRecord> predict_all(const model::MilModel& model,
                                                 std::span<const train::LabeledBag> bags) {
  std::vector<evalx::PredictionRecord> out;
  out.reserve(bags.size());
  for (const auto& b : bags) {
    out.push_back({b.slide_id, b.label, model.predict(b.features).probabilities});
  }
  return out;
}

SweepReport run_sweep(const ExperimentPlan& plan) {
  plan.validate();
  const bagio::DatasetIndex index = bagio::build_index(plan.dataset);
  if (index.slides.empty()) throw MilError(ErrorCode::kEmptyIndex, "dataset has no slides");

  std::vector<EncoderData> encoders(plan.encoders.size());
  for (std::size_t e = 0; e < plan.encoders.size(); ++e) {
    encoders[e].bags = load_bags(index, plan.bags_dir, plan.encoders[e]);
    for (const auto& b : encoders[e].bags) encoders[e].by_id[b.slide_id] = &b;
  }
  std::vector<bagio::SplitSpec> splits;
  for (auto ds : plan.data_seeds) splits.push_back(bagio::make_split(index, ds, plan.fractions));

  std::vector<RunJob> jobs;
  for (std::size_t e = 0; e < plan.encoders.size(); ++e) {
    const int dim = static_cast<int>(encoders[e].bags.front().feature_dim());
    for (std::size_t d = 0; d < plan.data_seeds.size(); ++d) {
      for (auto ms : plan.model_seeds) {
        for (const auto& family : plan.models) {
          RunJob job;
          job.key = {plan.encoders[e], family, plan.data_seeds[d], ms};
          job.encoder_slot = e;
          job.split_slot = d;
          job.spec = model_spec_for(plan, family, dim, index.num_classes());
          job.config = train_config_for(plan, family, ms);
          job.hash = run_hash(job.key, job.spec, job.config, splits[d]);
          jobs.push_back(std::move(job));
        }
      }
    }
  }

  SweepReport report;
  report.runs.resize(jobs.size());
  std::vector<char> reused(jobs.size(), 0);
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (auto m = completed_run(plan.output_dir / jobs[i].key.relative_dir(), jobs[i].hash)) {
      report.runs[i] = *m;
      reused[i] = 1;
    }
  }

  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  const auto worker = [&] {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      if (reused[i]) continue;
      {
        std::lock_guard lock(err_mu);
        if (first_error) return;
      }
      const RunJob& job = jobs[i];
      try {
        report.runs[i] = execute_run(job, plan.output_dir / job.key.relative_dir(),
                                     encoders[job.encoder_slot], index, splits[job.split_slot]);
      } catch (const MilError& e) {
        std::lock_guard lock(err_mu);
        if (!first_error) {
          first_error = std::make_exception_ptr(MilError(e.code(), "[" + job.key.label() + "] " + e.what()));
        }
      } catch (...) {
        std::lock_guard lock(err_mu);
        if (!first_error) first_error = std::current_exception();
      }
    }
  };
  const int pool = std::min<int>(plan.workers, static_cast<int>(jobs.size()));
  if (pool <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int t = 0; t < pool; ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (first_error) std::rethrow_exception(first_error);

  for (char r : reused) (r ? report.reused : report.executed)++;
  report.aggregate = evalx::aggregate(report.runs);

  json plan_json = plan_to_json(plan);
  plan_json.erase("workers");
  plan_json.erase("output_dir");
  json hashes = json::array();
  for (const auto& job : jobs) hashes.push_back({{"run", job.key.label()}, {"hash", job.hash}});
  report.provenance = {{"config_hash", hex64(fnv1a64(plan_json.dump()))},
                       {"data_seeds", plan.data_seeds},
                       {"model_seeds", plan.model_seeds},
                       {"encoders", plan.encoders},
                       {"models", plan.models},
                       {"run_hashes", hashes}};

  fs::create_directories(plan.output_dir);
  std::ostringstream results, agg_csv, agg_txt;
  evalx::write_results_csv(results, report.runs);
  evalx::write_aggregate_csv(agg_csv, report.aggregate);
  evalx::write_aggregate_text(agg_txt, report.aggregate);
  write_text(plan.output_dir / "results.csv", results.str());
  write_text(plan.output_dir / "aggregate.csv", agg_csv.str());
  write_text(plan.output_dir / "aggregate.txt", agg_txt.str());

  json runs = json::array();
  for (const auto& m : report.runs) runs.push_back(metrics_to_json(m));
  json agg = json::array();
  for (const auto& r : report.aggregate) {
    agg.push_back({{"model", r.model},
                   {"encoder", r.encoder_id},
                   {"n", r.n},
                   {"single_run", r.single_run},
                   {"accuracy", evalx::format_mean_std(r.accuracy)},
                   {"auc", evalx::format_mean_std(r.auc)},
                   {"confidence", evalx::format_mean_std(r.confidence)}});
  }
  json doc = {{"provenance", report.provenance}, {"runs", runs}, {"aggregate", agg}};
  if (!deterministic_mode()) {
    doc["generated_unix_time"] = std::chrono::duration_cast<std::chrono::seconds>(
                                     std::chrono::system_clock::now().time_since_epoch())
                                     .count();
  }
  write_text(plan.output_dir / "report.json", doc.dump(2) + "\n");
  return report;
}

// ----------------------------------------------------------------- heatmap

std::vector<double> min_max_normalize(const std::vector<double>& values) {
  std::vector<double> out(values.size(), 0.0);
  if (values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < values.size(); ++i) out[i] = (values[i] - *lo) / range;
  return out;
}

HeatmapResult render_heatmap(const bagio::PatchManifest& manifest, const bagio::FeatureBag& bag,
                             const model::MilModel& model, const std::string& model_encoder_id,
                             const preprocess::PyramidalImage* slide,
                             const HeatmapOptions& options) {
  if (!model_encoder_id.empty() && model_encoder_id != bag.encoder_id) {
    throw MilError(ErrorCode::kEncoderMismatch, "model was trained on " + model_encoder_id +
                                                    " features, bag is " + bag.encoder_id);
  }
  if (bag.feature_dim() != model.input_dim()) {
    throw MilError(ErrorCode::kEncoderMismatch, "bag D=" + std::to_string(bag.feature_dim()) +
                                                    " but model expects " +
                                                    std::to_string(model.input_dim()));
  }
  if (static_cast<std::size_t>(bag.num_instances()) != manifest.coordinates.size()) {
    throw MilError(ErrorCode::kShapeMismatch, "bag and manifest disagree on instance count");
  }
  if (!(options.downsample > 0.0) || options.alpha < 0.0 || options.alpha > 1.0) {
    throw MilError(ErrorCode::kInvalidArgument, "heatmap downsample must be > 0, alpha in [0, 1]");
  }

  HeatmapResult out;
  out.attention = model.predict(bag.features.cast<double>()).instance_attention;
  out.normalized = min_max_normalize(out.attention);

  double factor = options.level0_factor;
  if (!(factor > 0.0)) factor = slide ? slide->base_magnification() / manifest.magnification : 1.0;
  const double footprint = manifest.patch_size * factor;

  int width = 0, height = 0;
  if (slide != nullptr) {
    width = slide->levels().front().width;
    height = slide->levels().front().height;
  } else {
    for (const auto& c : manifest.coordinates) {
      width = std::max(width, static_cast<int>(std::ceil(c.x + footprint)));
      height = std::max(height, static_cast<int>(std::ceil(c.y + footprint)));
    }
  }
  const int cw = std::max(1, static_cast<int>(std::ceil(width / options.downsample)));
  const int ch = std::max(1, static_cast<int>(std::ceil(height / options.downsample)));

  cv::Mat base(ch, cw, CV_8UC3, cv::Scalar(255, 255, 255));
  if (slide != nullptr) {
    const auto& levels = slide->levels();
    std::size_t best = 0;
    for (std::size_t i = 1; i < levels.size(); ++i) {
      if (std::abs(std::log(levels[i].downsample / options.downsample)) <
          std::abs(std::log(levels[best].downsample / options.downsample))) {
        best = i;
      }
    }
    const cv::Mat rgb = slide->read_region(static_cast<int>(best), 0, 0, levels[best].width,
                                           levels[best].height);
    cv::Mat bgr;
    cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
    cv::resize(bgr, base, cv::Size(cw, ch), 0, 0, cv::INTER_AREA);
  }

  out.intensity = cv::Mat::zeros(ch, cw, CV_8U);
  for (std::size_t i = 0; i < manifest.coordinates.size(); ++i) {
    const auto& c = manifest.coordinates[i];
    const int x0 = static_cast<int>(std::floor(c.x / options.downsample));
    const int y0 = static_cast<int>(std::floor(c.y / options.downsample));
    const int x1 = std::min(cw, std::max(x0 + 1, static_cast<int>(std::ceil((c.x + footprint) / options.downsample))));
    const int y1 = std::min(ch, std::max(y0 + 1, static_cast<int>(std::ceil((c.y + footprint) / options.downsample))));
    if (x0 >= cw || y0 >= ch) continue;
    const auto level = static_cast<unsigned char>(1 + std::lround(254.0 * out.normalized[i]));
    out.intensity(cv::Rect(x0, y0, x1 - x0, y1 - y0)).setTo(level);
  }

  cv::Mat lut_in;
  out.intensity.convertTo(lut_in, CV_8U);
  cv::Mat colored;
  cv::applyColorMap(lut_in, colored, options.colormap);
  out.image = base.clone();
  for (int y = 0; y < ch; ++y) {
    for (int x = 0; x < cw; ++x) {
      if (out.intensity.at<unsigned char>(y, x) == 0) continue;
      const cv::Vec3b a = colored.at<cv::Vec3b>(y, x);
      const cv::Vec3b b = base.at<cv::Vec3b>(y, x);
      cv::Vec3b& dst = out.image.at<cv::Vec3b>(y, x);
      for (int k = 0; k < 3; ++k) {
        dst[k] = cv::saturate_cast<unsigned char>(options.alpha * a[k] + (1.0 - options.alpha) * b[k]);
      }
    }
  }
  return out;
}

HeatmapResult export_heatmap(const bagio::PatchManifest& manifest, const bagio::FeatureBag& bag,
                             const model::LoadedCheckpoint& checkpoint, const fs::path& out_png,
                             const preprocess::PyramidalImage* slide,
                             const HeatmapOptions& options) {
  const std::string encoder = checkpoint.metadata.value("encoder_id", std::string());
  HeatmapResult r = render_heatmap(manifest, bag, *checkpoint.model, encoder, slide, options);
  if (out_png.has_parent_path()) fs::create_directories(out_png.parent_path());
  if (!cv::imwrite(out_png.string(), r.image)) {
    throw MilError(ErrorCode::kIoError, "cannot write " + out_png.string());
  }
  return r;
}

}  // namespace milkit::runner
