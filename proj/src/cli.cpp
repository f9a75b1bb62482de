#include "milkit/cli.hpp"

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "milkit/bagio.hpp"
#include "milkit/encode.hpp"
#include "milkit/error.hpp"
#include "milkit/evalx.hpp"
#include "milkit/model.hpp"
#include "milkit/preprocess.hpp"
#include "milkit/runner.hpp"
#include "milkit/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace milkit {
namespace {

json read_json(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw MilError(ErrorCode::kIoError, "cannot open " + path.string());
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw MilError(ErrorCode::kInvalidArgument, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw MilError(ErrorCode::kIoError, "cannot write " + path.string());
  os << j.dump(2) << "\n";
}

CLI::App* add_sub(CLI::App& app, const std::string& name, const std::string& help) {
  CLI::App* sub = app.add_subcommand(name, help);
  // Declared for --help only; expand_config consumes it before parsing.
  sub->add_option("--config", "JSON object of option values, keyed by long flag name");
  return sub;
}

// Rewrites `<sub> ... --config f ...` as `<sub> <flags from f> ...` so that
// command-line flags, parsed later, take precedence over file values.
std::vector<std::string> expand_config(const std::vector<std::string>& args) {
  std::vector<std::string> rest;
  std::vector<std::string> from_file;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config") {
      if (i + 1 == args.size()) throw CLI::ArgumentMismatch("--config needs a file");
      path = args[++i];
    } else if (args[i].starts_with("--config=")) {
      path = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
      continue;
    }
    std::ifstream is(path);
    if (!is) throw CLI::FileError::Missing(path);
    json j;
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw CLI::ConversionError("--config " + path + ": " + e.what());
    }
    if (!j.is_object()) throw CLI::ConversionError("--config " + path + " must hold a JSON object");
    for (const auto& [key, value] : j.items()) {
      const std::string flag = "--" + key;
      if (value.is_boolean()) {
        if (value.get<bool>()) from_file.push_back(flag);
        continue;
      }
      from_file.push_back(flag);
      for (const auto& v : value.is_array() ? value : json::array({value})) {
        from_file.push_back(v.is_string() ? v.get<std::string>() : v.dump());
      }
    }
  }
  if (!rest.empty()) rest.insert(rest.begin() + 1, from_file.begin(), from_file.end());
  return rest;
}

std::map<std::string, const bagio::FeatureBag*> by_id(const std::vector<bagio::FeatureBag>& bags) {
  std::map<std::string, const bagio::FeatureBag*> m;
  for (const auto& b : bags) m[b.slide_id] = &b;
  return m;
}

double slide_base_magnification(const bagio::SlideRecord& s, double fallback) {
  double best = 0.0;
  for (double m : s.available_magnifications) best = std::max(best, m);
  return best > 0.0 ? best : fallback;
}

// ------------------------------------------------------------- subcommands

struct SynthArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
};

void run_synth(const SynthArgs& a, std::ostream& out) {
  bagio::SyntheticSpec spec;
  if (!a.spec.empty()) spec = bagio::synthetic_spec_from_json(read_json(a.spec));
  if (a.seed) spec.seed = *a.seed;
  const auto data = bagio::generate_synthetic(spec);
  const fs::path root = a.out;
  bagio::write_index(data.index, root / "index.json");
  json masks = json::object();
  for (std::size_t i = 0; i < data.bags.size(); ++i) {
    const auto& bag = data.bags[i];
    bagio::write_feature_bag(bag, runner::bag_path(root / "bags", bag.encoder_id, bag.slide_id));
    bagio::write_manifest(data.manifests[i], root / "manifests" / (bag.slide_id + ".json"));
    masks[bag.slide_id] = data.signal_masks[i];
  }
  write_json(root / "signal_masks.json", masks);
  write_json(root / "synthetic_spec.json", bagio::synthetic_spec_to_json(spec));
  out << "wrote " << data.bags.size() << " bags to " << root.string() << "\n";
}

struct PreprocessArgs {
  std::string dataset, out_dir;
  double magnification = 20.0;
  double base_magnification = 40.0;
  int levels = 4;
  int patch_size = 256;
  int stride = 0;
  preprocess::SegmentationParams seg;
};

void run_preprocess(const PreprocessArgs& a, std::ostream& out) {
  a.seg.validate();
  const auto index = bagio::build_index(fs::path(a.dataset));
  int total = 0;
  for (const auto& s : index.slides) {
    if (s.source_path.empty()) {
      throw MilError(ErrorCode::kIoError, s.slide_id + " has no source image");
    }
    const auto img = preprocess::open_image(s.source_path, slide_base_magnification(s, a.base_magnification),
                                            a.levels);
    const auto mask = preprocess::segment_tissue(*img, a.seg);
    auto manifest = preprocess::extract_patch_grid(*img, mask, a.magnification, a.patch_size, a.stride);
    manifest.slide_id = s.slide_id;
    bagio::write_manifest(manifest, fs::path(a.out_dir) / (s.slide_id + ".json"));
    total += static_cast<int>(manifest.coordinates.size());
    out << s.slide_id << ": " << manifest.coordinates.size() << " patches\n";
  }
  out << "total " << total << " patches over " << index.slides.size() << " slides\n";
}

struct EncodeArgs {
  std::string dataset, manifests, out, encoder, encoder_spec, weights;
  double base_magnification = 40.0;
  int levels = 4;
  int batch_size = 32;
};

void run_encode(const EncodeArgs& a, std::ostream& out) {
  encode::EncoderSpec spec;
  if (!a.encoder_spec.empty()) {
    spec = encode::encoder_spec_from_json(read_json(a.encoder_spec));
  } else {
    spec = encode::EncoderRegistry::global().default_spec(a.encoder);
  }
  if (!a.weights.empty()) spec.weights_source = a.weights;
  const auto encoder = encode::load_encoder(spec);
  const auto index = bagio::build_index(fs::path(a.dataset));
  for (const auto& s : index.slides) {
    const auto manifest = bagio::read_manifest(fs::path(a.manifests) / (s.slide_id + ".json"));
    const auto img = preprocess::open_image(s.source_path, slide_base_magnification(s, a.base_magnification),
                                            a.levels);
    auto bag = encode::encode_slide(*encoder, *img, manifest, a.batch_size);
    bag.slide_id = s.slide_id;
    bagio::write_feature_bag(bag, runner::bag_path(a.out, spec.encoder_id, s.slide_id));
    out << s.slide_id << ": " << bag.num_instances() << " x " << bag.feature_dim() << "\n";
  }
}

struct SplitArgs {
  std::string dataset, out;
  std::int64_t data_seed = 0;
  bagio::SplitFractions fractions;
};

void run_split(const SplitArgs& a, std::ostream& out) {
  const auto index = bagio::build_index(fs::path(a.dataset));
  const auto split = bagio::make_split(index, a.data_seed, a.fractions);
  bagio::write_split(split, a.out);
  out << "train " << split.train.size() << ", val " << split.val.size() << ", test "
      << split.test.size() << "\n";
}

struct TrainArgs {
  std::string dataset, bags_dir, encoder, split, model, model_config, train_config, out, log;
  std::optional<double> lr, weight_decay;
  std::optional<int> max_epochs, min_epochs, patience;
  std::optional<std::int64_t> model_seed;
  std::optional<std::string> optimizer;
};

void run_train(const TrainArgs& a, std::ostream& out) {
  const auto index = bagio::build_index(fs::path(a.dataset));
  const auto split = bagio::read_split(a.split);
  const auto bags = runner::load_bags(index, a.bags_dir, a.encoder);
  const auto ids = by_id(bags);
  const auto train_set = train::gather_bags(index, ids, split.train);
  const auto val_set = train::gather_bags(index, ids, split.val);

  json tc = a.train_config.empty() ? json::object() : read_json(a.train_config);
  if (a.lr) tc["learning_rate"] = *a.lr;
  if (a.weight_decay) tc["weight_decay"] = *a.weight_decay;
  if (a.max_epochs) tc["max_epochs"] = *a.max_epochs;
  if (a.min_epochs) tc["min_epochs"] = *a.min_epochs;
  if (a.patience) tc["patience"] = *a.patience;
  if (a.model_seed) tc["model_seed"] = *a.model_seed;
  if (a.optimizer) tc["optimizer"] = *a.optimizer;
  train::TrainConfig config = train::train_config_from_json(tc);
  if (!tc.contains("optimizer")) config.optimizer = train::default_optimizer(a.model);

  train::ModelSpec spec;
  spec.family = a.model;
  spec.config = a.model_config.empty() ? json::object() : read_json(a.model_config);
  spec.config["input_dim"] = bags.front().feature_dim();
  spec.config["num_classes"] = index.num_classes();

  std::ofstream log_file;
  train::TrainOptions opts;
  if (!a.log.empty()) {
    if (fs::path(a.log).has_parent_path()) fs::create_directories(fs::path(a.log).parent_path());
    log_file.open(a.log, std::ios::trunc);
    opts.log_stream = &log_file;
  }
  opts.checkpoint_path = fs::path(a.out);
  opts.checkpoint_metadata = {{"encoder_id", a.encoder}, {"data_seed", split.data_seed},
                              {"model_seed", config.model_seed}};
  const auto result = train::train_model(spec, train_set, val_set, config, opts);
  out << "trained " << result.epochs_trained << " epochs; best epoch " << result.best_epoch
      << " (val loss " << result.best_val_loss << ")\n";
}

struct EvaluateArgs {
  std::string dataset, bags_dir, split, checkpoint, out;
  bool micro = false;
};

void run_evaluate(const EvaluateArgs& a, std::ostream& out) {
  const auto index = bagio::build_index(fs::path(a.dataset));
  const auto split = bagio::read_split(a.split);
  const auto ck = model::load_checkpoint(a.checkpoint);
  const std::string encoder = ck.metadata.value("encoder_id", std::string());
  if (encoder.empty()) throw MilError(ErrorCode::kBadCheckpoint, "checkpoint lacks encoder_id");
  const auto bags = runner::load_bags(index, a.bags_dir, encoder);
  const auto test_set = train::gather_bags(index, by_id(bags), split.test);
  const auto records = runner::predict_all(*ck.model, test_set);
  const auto auc = evalx::auc_detail(records, a.micro ? evalx::AucAverage::kMicro : evalx::AucAverage::kMacro);
  json j = {{"encoder", encoder},
            {"model", ck.model->family()},
            {"n_test", records.size()},
            {"accuracy", evalx::accuracy(records)},
            {"auc", auc.value},
            {"auc_average", a.micro ? "micro" : "macro"},
            {"auc_skipped_classes", auc.skipped_classes},
            {"confidence", evalx::confidence(records)}};
  if (!a.out.empty()) write_json(a.out, j);
  out << j.dump(2) << "\n";
}

struct SweepArgs {
  std::string plan, output_dir;
  std::optional<int> workers;
};

void run_sweep_cmd(const SweepArgs& a, std::ostream& out) {
  auto plan = runner::read_plan(a.plan);
  if (!a.output_dir.empty()) plan.output_dir = a.output_dir;
  if (a.workers) plan.workers = *a.workers;
  const auto report = runner::run_sweep(plan);
  out << report.runs.size() << " runs (" << report.executed << " executed, " << report.reused
      << " reused); results in " << plan.output_dir.string() << "\n";
  evalx::write_aggregate_text(out, report.aggregate);
}

struct HeatmapArgs {
  std::string checkpoint, bag, manifest, out, image;
  double base_magnification = 40.0;
  int levels = 4;
  runner::HeatmapOptions options;
};

void run_heatmap(const HeatmapArgs& a, std::ostream& out) {
  const auto ck = model::load_checkpoint(a.checkpoint);
  const auto bag = bagio::read_feature_bag(a.bag);
  const auto manifest = bagio::read_manifest(a.manifest);
  std::unique_ptr<preprocess::PyramidalImage> slide;
  if (!a.image.empty()) slide = preprocess::open_image(a.image, a.base_magnification, a.levels);
  const auto r = runner::export_heatmap(manifest, bag, ck, a.out, slide.get(), a.options);
  out << "wrote " << a.out << " (" << r.image.cols << " x " << r.image.rows << ")\n";
}

}  // namespace

int cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"milkit: multiple-instance learning for whole-slide images", "milkit"};
  app.require_subcommand(1, 1);
  // Repeated options keep the last value; this is what lets flags
  // override --config values.
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);

  SynthArgs synth;
  auto* s_synth = add_sub(app, "synth", "Generate a planted-signal synthetic dataset");
  s_synth->add_option("--spec", synth.spec, "SyntheticSpec JSON file")->check(CLI::ExistingFile);
  s_synth->add_option("--out", synth.out, "Output directory")->required();
  s_synth->add_option("--seed", synth.seed, "Override the generator seed");

  PreprocessArgs pre;
  auto* s_pre = add_sub(app, "preprocess", "Segment tissue and tile patches for every slide");
  s_pre->add_option("--dataset", pre.dataset, "Dataset manifest or class-folder root")->required();
  s_pre->add_option("--out-dir", pre.out_dir, "Directory for <slide_id>.json patch manifests")->required();
  s_pre->add_option("--magnification", pre.magnification, "Target magnification")->capture_default_str();
  s_pre->add_option("--base-magnification", pre.base_magnification,
                    "Level-0 magnification when the manifest gives none")->capture_default_str();
  s_pre->add_option("--levels", pre.levels, "Pyramid levels built for plain images")->capture_default_str();
  s_pre->add_option("--patch-size", pre.patch_size)->capture_default_str();
  s_pre->add_option("--stride", pre.stride, "0 means non-overlapping")->capture_default_str();
  s_pre->add_option("--sat-threshold", pre.seg.saturation_threshold)->capture_default_str();
  s_pre->add_option("--median-kernel", pre.seg.median_blur_kernel)->capture_default_str();
  s_pre->add_option("--close-kernel", pre.seg.morph_close_kernel)->capture_default_str();
  s_pre->add_option("--min-contour-area", pre.seg.min_contour_area)->capture_default_str();
  s_pre->add_option("--hole-area-max", pre.seg.hole_area_max)->capture_default_str();
  s_pre->add_option("--thumbnail-level", pre.seg.thumbnail_level)->capture_default_str();

  EncodeArgs enc;
  auto* s_enc = add_sub(app, "encode", "Encode patches into MILFB1 feature bags");
  s_enc->add_option("--dataset", enc.dataset)->required();
  s_enc->add_option("--manifests", enc.manifests, "Directory of patch manifests")->required();
  s_enc->add_option("--out", enc.out, "Bags root; files go to <out>/<encoder>/")->required();
  auto* enc_id = s_enc->add_option("--encoder", enc.encoder, "Registered encoder id");
  auto* enc_spec = s_enc->add_option("--encoder-spec", enc.encoder_spec, "EncoderSpec JSON file");
  enc_id->excludes(enc_spec);
  s_enc->add_option("--weights", enc.weights, "Network file for external backbones");
  s_enc->add_option("--base-magnification", enc.base_magnification)->capture_default_str();
  s_enc->add_option("--levels", enc.levels)->capture_default_str();
  s_enc->add_option("--batch-size", enc.batch_size)->capture_default_str();

  SplitArgs spl;
  auto* s_split = add_sub(app, "split", "Patient-disjoint train/val/test split");
  s_split->add_option("--dataset", spl.dataset)->required();
  s_split->add_option("--out", spl.out)->required();
  s_split->add_option("--data-seed", spl.data_seed)->capture_default_str();
  s_split->add_option("--train-fraction", spl.fractions.train)->capture_default_str();
  s_split->add_option("--val-fraction", spl.fractions.val)->capture_default_str();
  s_split->add_option("--test-fraction", spl.fractions.test)->capture_default_str();

  TrainArgs tr;
  auto* s_train = add_sub(app, "train", "Train one model on one split");
  s_train->add_option("--dataset", tr.dataset)->required();
  s_train->add_option("--bags-dir", tr.bags_dir)->required();
  s_train->add_option("--encoder", tr.encoder)->required();
  s_train->add_option("--split", tr.split)->required();
  s_train->add_option("--model", tr.model)->required()->check(CLI::IsMember({"clam_sb", "clam_mb", "transmil"}));
  s_train->add_option("--model-config", tr.model_config, "Model config JSON file");
  s_train->add_option("--train-config", tr.train_config, "TrainConfig JSON file");
  s_train->add_option("--out", tr.out, "Checkpoint path")->required();
  s_train->add_option("--log", tr.log, "JSON-lines training log");
  s_train->add_option("--lr", tr.lr);
  s_train->add_option("--weight-decay", tr.weight_decay);
  s_train->add_option("--max-epochs", tr.max_epochs);
  s_train->add_option("--min-epochs", tr.min_epochs);
  s_train->add_option("--patience", tr.patience);
  s_train->add_option("--model-seed", tr.model_seed);
  s_train->add_option("--optimizer", tr.optimizer)->check(CLI::IsMember({"adam", "lookahead_adam"}));

  EvaluateArgs ev;
  auto* s_eval = add_sub(app, "evaluate", "Score a checkpoint on a split's test slides");
  s_eval->add_option("--dataset", ev.dataset)->required();
  s_eval->add_option("--bags-dir", ev.bags_dir)->required();
  s_eval->add_option("--split", ev.split)->required();
  s_eval->add_option("--checkpoint", ev.checkpoint)->required();
  s_eval->add_option("--out", ev.out, "Metrics JSON file");
  s_eval->add_flag("--micro", ev.micro, "Micro-averaged AUC instead of macro");

  SweepArgs sw;
  auto* s_sweep = add_sub(app, "sweep", "Run the encoder x data-seed x model-seed x model grid");
  s_sweep->add_option("--plan", sw.plan, "ExperimentPlan JSON file")->required();
  s_sweep->add_option("--output-dir", sw.output_dir, "Override the plan's output_dir");
  s_sweep->add_option("--workers", sw.workers, "Concurrent runs");

  HeatmapArgs hm;
  auto* s_heat = add_sub(app, "heatmap", "Render per-patch attention over a slide thumbnail");
  s_heat->add_option("--checkpoint", hm.checkpoint)->required();
  s_heat->add_option("--bag", hm.bag, "MILFB1 bag")->required();
  s_heat->add_option("--manifest", hm.manifest, "Patch manifest JSON")->required();
  s_heat->add_option("--out", hm.out, "Output PNG")->required();
  s_heat->add_option("--image", hm.image, "Slide image for the background");
  s_heat->add_option("--base-magnification", hm.base_magnification)->capture_default_str();
  s_heat->add_option("--levels", hm.levels)->capture_default_str();
  s_heat->add_option("--downsample", hm.options.downsample)->capture_default_str();
  s_heat->add_option("--alpha", hm.options.alpha)->capture_default_str();
  s_heat->add_option("--level0-factor", hm.options.level0_factor)->capture_default_str();

  if (!args.empty() && !args.front().starts_with('-') &&
      app.get_subcommand_no_throw(args.front()) == nullptr) {
    err << "error: unknown subcommand '" << args.front() << "'\n" << app.help();
    return 1;
  }

  try {
    const auto expanded = expand_config(args);
    std::vector<std::string> reversed(expanded.rbegin(), expanded.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
    err << sub->help();
    return 1;
  }

  try {
    if (s_synth->parsed()) run_synth(synth, out);
    if (s_pre->parsed()) run_preprocess(pre, out);
    if (s_enc->parsed()) {
      if (enc.encoder.empty() && enc.encoder_spec.empty()) {
        err << "error: encode needs --encoder or --encoder-spec\n" << s_enc->help();
        return 1;
      }
      run_encode(enc, out);
    }
    if (s_split->parsed()) run_split(spl, out);
    if (s_train->parsed()) run_train(tr, out);
    if (s_eval->parsed()) run_evaluate(ev, out);
    if (s_sweep->parsed()) run_sweep_cmd(sw, out);
    if (s_heat->parsed()) run_heatmap(hm, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

}  // namespace milkit
