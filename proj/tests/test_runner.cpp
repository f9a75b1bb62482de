#include <gtest/gtest.h>

#include <opencv2/imgcodecs.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "milkit/cli.hpp"
#include "milkit/preprocess.hpp"
#include "milkit/runner.hpp"
#include "support.hpp"

namespace milkit::runner {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_file(const fs::path& p, const std::string& text) {
  fs::create_directories(p.parent_path());
  std::ofstream(p) << text;
}

// Small planted-signal dataset on disk: index.json plus bags/synthetic/.
fs::path make_dataset(const std::string& name, int per_class = 20) {
  const auto root = testing::temp_dir(name);
  bagio::SyntheticSpec spec;
  spec.bags_per_class = per_class;
  spec.feature_dim = 8;
  spec.min_instances = 20;
  spec.max_instances = 30;
  spec.seed = 3;
  const auto data = bagio::generate_synthetic(spec);
  bagio::write_index(data.index, root / "index.json");
  for (const auto& b : data.bags) bagio::write_feature_bag(b, bag_path(root / "bags", b.encoder_id, b.slide_id));
  return root;
}

ExperimentPlan tiny_plan(const fs::path& root, const fs::path& out) {
  ExperimentPlan p;
  p.models = {"clam_sb"};
  p.encoders = {bagio::kSyntheticEncoderId};
  p.dataset = root / "index.json";
  p.bags_dir = root / "bags";
  p.output_dir = out;
  p.model_configs["clam_sb"] = {{"embed_dim", 8}, {"attn_hidden", 4}, {"B", 2}};
  p.model_configs["transmil"] = {{"model_dim", 8}, {"num_heads", 2}, {"num_landmarks", 4}};
  p.training = {{"max_epochs", 2}, {"min_epochs", 1}, {"patience", 1}, {"learning_rate", 1e-3}};
  return p;
}

class Deterministic : public ::testing::Test {
 protected:
  void SetUp() override { ::setenv(kDeterministicEnv, "1", 1); }
  void TearDown() override { ::unsetenv(kDeterministicEnv); }
};

TEST_F(Deterministic, FifteenRunsThenResumeOne) {
  const auto root = make_dataset("sweep15");
  const auto plan = tiny_plan(root, root / "out");
  const auto first = run_sweep(plan);
  ASSERT_EQ(first.runs.size(), 15u);
  EXPECT_EQ(first.executed, 15);
  ASSERT_EQ(first.aggregate.size(), 1u);
  EXPECT_EQ(first.aggregate[0].n, 15);

  // Nesting order: data seed outer, model seed inner.
  EXPECT_EQ(first.runs[0].data_seed, 0);
  EXPECT_EQ(first.runs[1].model_seed, 1);
  EXPECT_EQ(first.runs[3].data_seed, 1);

  std::istringstream csv(slurp(root / "out" / "results.csv"));
  EXPECT_EQ(evalx::read_results_csv(csv).size(), 15u);
  for (const char* f : {"aggregate.csv", "aggregate.txt", "report.json"}) EXPECT_TRUE(fs::exists(root / "out" / f)) << f;
  const auto report = json::parse(slurp(root / "out" / "report.json"));
  EXPECT_EQ(report.at("provenance").at("run_hashes").size(), 15u);
  EXPECT_FALSE(report.contains("generated_unix_time"));
  const RunKey key{bagio::kSyntheticEncoderId, "clam_sb", 2, 1};
  const auto run_dir = root / "out" / key.relative_dir();
  for (const char* f : {"metrics.json", "model.milck", "predictions.csv", "train_log.jsonl"}) {
    EXPECT_TRUE(fs::exists(run_dir / f)) << f;
  }
  const auto ck = model::load_checkpoint(run_dir / "model.milck");
  EXPECT_EQ(ck.metadata.at("encoder_id"), bagio::kSyntheticEncoderId);

  const std::string results_before = slurp(root / "out" / "results.csv");
  fs::remove_all(run_dir);
  const auto second = run_sweep(plan);
  EXPECT_EQ(second.executed, 1);
  EXPECT_EQ(second.reused, 14);
  EXPECT_EQ(slurp(root / "out" / "results.csv"), results_before);

  // A changed training config invalidates every run.
  auto edited = plan;
  edited.training["learning_rate"] = 5e-4;
  EXPECT_EQ(run_sweep(edited).executed, 15);
  fs::remove_all(root);
}

TEST_F(Deterministic, IdenticalPlansGiveIdenticalFiles) {
  const auto root = make_dataset("sweep_det");
  auto plan = tiny_plan(root, root / "a");
  plan.models = {"clam_mb", "transmil"};
  plan.data_seeds = {4};
  plan.model_seeds = {0, 7};
  run_sweep(plan);
  plan.output_dir = root / "b";
  plan.workers = 3;
  run_sweep(plan);
  for (const char* f : {"results.csv", "aggregate.csv", "aggregate.txt"}) {
    EXPECT_EQ(slurp(root / "a" / f), slurp(root / "b" / f)) << f;
  }
  const RunKey key{bagio::kSyntheticEncoderId, "transmil", 4, 7};
  EXPECT_EQ(slurp(root / "a" / key.relative_dir() / "predictions.csv"),
            slurp(root / "b" / key.relative_dir() / "predictions.csv"));
  EXPECT_EQ(slurp(root / "a" / key.relative_dir() / "model.milck"),
            slurp(root / "b" / key.relative_dir() / "model.milck"));
  fs::remove_all(root);
}

TEST_F(Deterministic, SingleRunFlaggedInAggregate) {
  const auto root = make_dataset("sweep_one");
  auto plan = tiny_plan(root, root / "out");
  plan.data_seeds = {0};
  plan.model_seeds = {0};
  const auto r = run_sweep(plan);
  ASSERT_EQ(r.runs.size(), 1u);
  EXPECT_TRUE(r.aggregate[0].single_run);
  EXPECT_EQ(r.aggregate[0].accuracy.std, 0.0);
  EXPECT_NE(slurp(root / "out" / "aggregate.txt").find("single run"), std::string::npos);
  fs::remove_all(root);
}

TEST(Sweep, MissingBagsAndForeignEncoder) {
  const auto root = make_dataset("sweep_missing");
  auto plan = tiny_plan(root, root / "out");
  fs::remove(bag_path(root / "bags", bagio::kSyntheticEncoderId, "syn_1_3"));
  try {
    run_sweep(plan);
    ADD_FAILURE();
  } catch (const MilError& e) {
    EXPECT_EQ(e.code(), ErrorCode::kMissingBags);
    EXPECT_NE(std::string(e.what()).find("syn_1_3"), std::string::npos);
  }
  // A bag written by another encoder under this encoder's directory.
  bagio::FeatureBag foreign = bagio::read_feature_bag(bag_path(root / "bags", bagio::kSyntheticEncoderId, "syn_0_0"));
  foreign.slide_id = "syn_1_3";
  foreign.encoder_id = "kimianet";
  bagio::write_feature_bag(foreign, bag_path(root / "bags", bagio::kSyntheticEncoderId, "syn_1_3"));
  EXPECT_MIL_ERROR(run_sweep(plan), ErrorCode::kEncoderMismatch);
  fs::remove_all(root);
}

TEST(Sweep, TrainingErrorsCarryRunLabel) {
  const auto root = make_dataset("sweep_err");
  auto plan = tiny_plan(root, root / "out");
  plan.data_seeds = {0};
  plan.model_seeds = {0};
  plan.training["learning_rate"] = 1e300;  // diverges to non-finite weights
  plan.training["max_epochs"] = 3;
  try {
    run_sweep(plan);
    ADD_FAILURE();
  } catch (const MilError& e) {
    EXPECT_EQ(e.code(), ErrorCode::kNonFiniteLoss) << e.what();
    EXPECT_NE(std::string(e.what()).find("clam_sb data_seed=0 model_seed=0"), std::string::npos) << e.what();
  }
  fs::remove_all(root);
}

TEST(Plan, JsonResolvesRelativePaths) {
  const auto dir = testing::temp_dir("plan");
  write_file(dir / "plan.json", R"({"encoders": ["kimianet"], "dataset": "data/index.json",
    "output_dir": "results", "models": ["transmil"], "data_seeds": [3, 1],
    "training": {"max_epochs": 7, "min_epochs": 2}, "training_overrides": {"transmil": {"learning_rate": 1e-3}}})");
  const auto p = read_plan(dir / "plan.json");
  EXPECT_EQ(p.dataset, dir / "data" / "index.json");
  EXPECT_EQ(p.bags_dir, dir / "data" / "bags");
  EXPECT_EQ(p.output_dir, dir / "results");
  EXPECT_EQ(p.data_seeds, (std::vector<std::int64_t>{3, 1}));
  EXPECT_EQ(p.model_seeds.size(), 3u);
  const auto c = train_config_for(p, "transmil", 2);
  EXPECT_EQ(c.max_epochs, 7);
  EXPECT_EQ(c.learning_rate, 1e-3);
  EXPECT_EQ(c.optimizer, train::OptimizerKind::kLookaheadAdam);
  EXPECT_EQ(c.model_seed, 2);
  EXPECT_EQ(train_config_for(p, "clam_sb", 0).optimizer, train::OptimizerKind::kAdam);
  const auto back = plan_from_json(plan_to_json(p));
  EXPECT_EQ(back.dataset, p.dataset);
  EXPECT_EQ(back.training_overrides.at("transmil"), p.training_overrides.at("transmil"));

  ExperimentPlan bad = p;
  bad.data_seeds = {1, 1};
  EXPECT_MIL_ERROR(bad.validate(), ErrorCode::kInvalidArgument);
  bad = p;
  bad.models = {"abmil"};
  EXPECT_MIL_ERROR(bad.validate(), ErrorCode::kInvalidArgument);
  fs::remove_all(dir);
}

TEST(Plan, RunHashTracksInputs) {
  ExperimentPlan p;
  p.encoders = {"e"};
  const auto spec = model_spec_for(p, "clam_sb", 8, 2);
  EXPECT_EQ(spec.config.at("embed_dim"), 512);
  const auto cfg = train_config_for(p, "clam_sb", 0);
  bagio::SplitSpec split{0, {"a"}, {"b"}, {"c"}, {}};
  const RunKey key{"e", "clam_sb", 0, 0};
  const auto h = run_hash(key, spec, cfg, split);
  EXPECT_EQ(h.size(), 16u);
  EXPECT_EQ(h, run_hash(key, spec, cfg, split));
  auto other_split = split;
  other_split.test = {"d"};
  EXPECT_NE(h, run_hash(key, spec, cfg, other_split));
  EXPECT_NE(h, run_hash(key, spec, train_config_for(p, "clam_sb", 1), split));
  EXPECT_EQ(key.relative_dir(), fs::path("runs/e/clam_sb/d0_m0"));
}

// ---------------------------------------------------------------- heatmaps

// Returns fixed attention, regardless of the bag.
class FixedAttention : public model::MilModel {
 public:
  explicit FixedAttention(std::vector<double> a) : a_(std::move(a)) {}
  std::string family() const override { return "clam_sb"; }
  int num_classes() const override { return 2; }
  int input_dim() const override { return 3; }
  json config_json() const override { return json::object(); }
  ag::Var loss(ag::Tape&, const ag::Matrix&, int, Rng*, model::LossTerms*) override { return nullptr; }
  model::Prediction predict(const ag::Matrix&) const override { return {{0.5, 0.5}, 0, a_}; }

 private:
  std::vector<double> a_;
};

bagio::PatchManifest row_manifest(int n) {
  bagio::PatchManifest m;
  m.patch_size = 256;
  for (int i = 0; i < n; ++i) m.coordinates.push_back({256 * i, 0});
  return m;
}

bagio::FeatureBag zero_bag(int n, const std::string& enc = "e") {
  return {"s", enc, bagio::FeatureMatrix::Zero(n, 3)};
}

TEST(Heatmap, MinMaxEndpoints) {
  EXPECT_EQ(min_max_normalize({0.2, 0.8}), (std::vector<double>{0.0, 1.0}));
  EXPECT_EQ(min_max_normalize({0.3, 0.3, 0.3}), (std::vector<double>{0.0, 0.0, 0.0}));
  const FixedAttention m({0.2, 0.8});
  const auto r = render_heatmap(row_manifest(2), zero_bag(2), m, "e", nullptr);
  EXPECT_EQ(r.normalized, (std::vector<double>{0.0, 1.0}));
  EXPECT_EQ(r.intensity.at<uchar>(0, 0), 1);
  EXPECT_EQ(r.intensity.at<uchar>(0, 16), 255);
}

TEST(Heatmap, IntensityOrderFollowsAttention) {
  Rng rng(1);
  std::vector<double> a(12);
  for (auto& v : a) v = rng.uniform();
  const FixedAttention m(a);
  HeatmapOptions opt;
  opt.downsample = 32.0;
  const auto r = render_heatmap(row_manifest(12), zero_bag(12), m, "e", nullptr, opt);
  ASSERT_EQ(r.intensity.cols, 12 * 8);
  ASSERT_EQ(r.image.size(), r.intensity.size());
  for (int i = 0; i < 12; ++i) {
    for (int j = 0; j < 12; ++j) {
      const int ii = r.intensity.at<uchar>(4, 8 * i + 3), ij = r.intensity.at<uchar>(4, 8 * j + 3);
      if (a[static_cast<std::size_t>(i)] < a[static_cast<std::size_t>(j)]) EXPECT_LE(ii, ij);
    }
  }
}

TEST(Heatmap, UniformAttentionGivesUniformOverlay) {
  const FixedAttention m(std::vector<double>(6, 1.0 / 6));
  auto manifest = row_manifest(3);
  for (int i = 0; i < 3; ++i) manifest.coordinates.push_back({256 * i, 256});
  const auto r = render_heatmap(manifest, zero_bag(6), m, "e", nullptr);
  cv::Mat channels[3];
  cv::split(r.image, channels);
  for (const auto& ch : channels) {
    double lo, hi;
    cv::minMaxLoc(ch, &lo, &hi);
    EXPECT_EQ(lo, hi);
  }
}

TEST(Heatmap, Errors) {
  const FixedAttention m({0.5, 0.5});
  EXPECT_MIL_ERROR(render_heatmap(row_manifest(2), zero_bag(2, "other"), m, "e", nullptr),
                   ErrorCode::kEncoderMismatch);
  bagio::FeatureBag wide{"s", "e", bagio::FeatureMatrix::Zero(2, 5)};
  EXPECT_MIL_ERROR(render_heatmap(row_manifest(2), wide, m, "e", nullptr), ErrorCode::kEncoderMismatch);
  EXPECT_MIL_ERROR(render_heatmap(row_manifest(3), zero_bag(2), m, "e", nullptr), ErrorCode::kShapeMismatch);
}

TEST(Heatmap, ExportWritesPngOverSlide) {
  const auto dir = testing::temp_dir("heatmap");
  const auto model = model::make_model("clam_sb", {{"input_dim", 3}, {"embed_dim", 4}, {"attn_hidden", 2}, {"num_classes", 2}}, 1);
  model::save_checkpoint(*model, dir / "m.milck", {{"encoder_id", "e"}});
  const auto ck = model::load_checkpoint(dir / "m.milck");
  const preprocess::InMemoryPyramid slide(cv::Mat(256, 768, CV_8UC3, cv::Scalar(200, 100, 150)), 20.0, 3);
  const auto r = export_heatmap(row_manifest(3), zero_bag(3), ck, dir / "h" / "out.png", &slide);
  const cv::Mat png = cv::imread((dir / "h" / "out.png").string());
  ASSERT_FALSE(png.empty());
  EXPECT_EQ(png.cols, 48);
  EXPECT_EQ(png.rows, 16);
  EXPECT_EQ(r.attention.size(), 3u);
  EXPECT_MIL_ERROR(export_heatmap(row_manifest(3), zero_bag(3, "x"), ck, dir / "o.png", &slide),
                   ErrorCode::kEncoderMismatch);
  fs::remove_all(dir);
}

// --------------------------------------------------------------------- CLI

struct CliResult {
  int code;
  std::string out, err;
};

CliResult run_cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = cli(args, out, err);
  return {code, out.str(), err.str()};
}

TEST(Cli, UsageErrors) {
  auto r = run_cli({"frobnicate"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("frobnicate"), std::string::npos);
  EXPECT_NE(r.err.find("Usage"), std::string::npos);
  r = run_cli({});
  EXPECT_EQ(r.code, 1);
  r = run_cli({"split", "--dataset", "x.json"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--out"), std::string::npos);
  r = run_cli({"split", "--dataset", "x", "--out", "y", "--bogus", "1"});
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("--bogus"), std::string::npos);
  r = run_cli({"--help"});
  EXPECT_EQ(r.code, 0);
  EXPECT_NE(r.out.find("sweep"), std::string::npos);
}

TEST(Cli, RuntimeErrorIsExitTwo) {
  const auto dir = testing::temp_dir("cli_rt");
  const auto r = run_cli({"split", "--dataset", (dir / "none.json").string(), "--out", (dir / "s.json").string()});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Cli, ConfigFilePrecedence) {
  const auto dir = testing::temp_dir("cli_cfg");
  bagio::SyntheticSpec spec;
  spec.bags_per_class = 10;
  write_file(dir / "spec.json", bagio::synthetic_spec_to_json(spec).dump());
  ASSERT_EQ(run_cli({"synth", "--spec", (dir / "spec.json").string(), "--out", (dir / "d").string()}).code, 0);
  const auto index = (dir / "d" / "index.json").string();

  // Defaults: seed 0.
  ASSERT_EQ(run_cli({"split", "--dataset", index, "--out", (dir / "s0.json").string()}).code, 0);
  // File sets data-seed 5.
  write_file(dir / "cfg.json", json{{"dataset", index}, {"data-seed", 5}, {"out", (dir / "s5.json").string()}}.dump());
  ASSERT_EQ(run_cli({"split", "--config", (dir / "cfg.json").string()}).code, 0);
  // Flag overrides the file.
  ASSERT_EQ(run_cli({"split", "--config", (dir / "cfg.json").string(), "--data-seed", "9", "--out",
                     (dir / "s9.json").string()})
                .code,
            0);
  const auto idx = bagio::build_index(fs::path(index));
  EXPECT_EQ(bagio::read_split(dir / "s0.json").test, bagio::make_split(idx, 0).test);
  EXPECT_EQ(bagio::read_split(dir / "s5.json").data_seed, 5);
  EXPECT_EQ(bagio::read_split(dir / "s9.json").data_seed, 9);
  EXPECT_EQ(bagio::read_split(dir / "s9.json").test, bagio::make_split(idx, 9).test);
  fs::remove_all(dir);
}

TEST_F(Deterministic, CliEndToEnd) {
  const auto dir = testing::temp_dir("cli_e2e");
  bagio::SyntheticSpec spec;
  spec.bags_per_class = 20;
  spec.feature_dim = 8;
  write_file(dir / "spec.json", bagio::synthetic_spec_to_json(spec).dump());
  auto r = run_cli({"synth", "--spec", (dir / "spec.json").string(), "--out", (dir / "d").string(), "--seed", "4"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "d" / "bags" / "synthetic" / "syn_1_19.milfb"));
  EXPECT_TRUE(fs::exists(dir / "d" / "manifests" / "syn_0_0.json"));
  EXPECT_TRUE(fs::exists(dir / "d" / "signal_masks.json"));

  const auto index = (dir / "d" / "index.json").string();
  ASSERT_EQ(run_cli({"split", "--dataset", index, "--out", (dir / "split.json").string(), "--data-seed", "1"}).code, 0);
  write_file(dir / "model.json", R"({"embed_dim": 8, "attn_hidden": 4, "B": 2})");
  r = run_cli({"train", "--dataset", index, "--bags-dir", (dir / "d" / "bags").string(), "--encoder", "synthetic",
               "--split", (dir / "split.json").string(), "--model", "clam_mb", "--model-config",
               (dir / "model.json").string(), "--out", (dir / "m.milck").string(), "--log",
               (dir / "log.jsonl").string(), "--max-epochs", "3", "--min-epochs", "1"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto ck = model::load_checkpoint(dir / "m.milck");
  EXPECT_EQ(ck.model->family(), "clam_mb");
  EXPECT_EQ(ck.metadata.at("encoder_id"), "synthetic");

  r = run_cli({"evaluate", "--dataset", index, "--bags-dir", (dir / "d" / "bags").string(), "--split",
               (dir / "split.json").string(), "--checkpoint", (dir / "m.milck").string(), "--out",
               (dir / "metrics.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto metrics = json::parse(slurp(dir / "metrics.json"));
  EXPECT_EQ(metrics.at("n_test"), 6);

  r = run_cli({"heatmap", "--checkpoint", (dir / "m.milck").string(), "--bag",
               (dir / "d" / "bags" / "synthetic" / "syn_0_2.milfb").string(), "--manifest",
               (dir / "d" / "manifests" / "syn_0_2.json").string(), "--out", (dir / "h.png").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir / "h.png"));

  write_file(dir / "plan.json", R"({"models": ["clam_sb"], "encoders": ["synthetic"], "dataset": "d/index.json",
    "output_dir": "sweep", "model_configs": {"clam_sb": {"embed_dim": 8, "attn_hidden": 4, "B": 2}},
    "training": {"max_epochs": 1, "min_epochs": 1}})");
  r = run_cli({"sweep", "--plan", (dir / "plan.json").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  std::istringstream csv(slurp(dir / "sweep" / "results.csv"));
  EXPECT_EQ(evalx::read_results_csv(csv).size(), 15u);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace milkit::runner
