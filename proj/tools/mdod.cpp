// mdod: generate synthetic data, train, evaluate, run inference and
// recompute training diagnostics.
//
// Exit codes: 0 success, 1 I/O or data error, 2 usage or config error,
// 3 non-finite loss, 4 checkpoint error, 5 evaluation undefined.

#include <cstdlib>
#include <functional>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mdod/config.hpp"
#include "mdod/pipeline.hpp"

namespace fs = std::filesystem;
using namespace mdod;

namespace {

enum ExitCode { kOk = 0, kIoError = 1, kUsage = 2, kNonFinite = 3, kCheckpoint = 4, kUndefined = 5 };

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

RunConfig resolve_config(const CommonOptions& common, bool required) {
  if (common.config.empty()) {
    if (required) throw UsageError("--config is required");
    return RunConfig{};
  }
  if (!fs::exists(common.config)) throw UsageError("config file " + common.config + " does not exist");
  return load_run_config(common.config);
}

std::vector<Scene> load_split(const fs::path& dataset, const std::string& split) {
  return load_dataset(fs::is_directory(dataset / split) ? dataset / split : dataset);
}

void write_file(const fs::path& path, const std::function<void(std::ostream&)>& body) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw DatasetError("cannot write " + path.string());
  body(os);
  if (!os) throw DatasetError("write failed for " + path.string());
}

int cmd_gen_data(const CommonOptions& common, std::optional<std::size_t> n_train, std::optional<std::size_t> n_val) {
  RunConfig cfg = resolve_config(common, true);
  if (common.seed) cfg.data.seed = *common.seed;
  const fs::path out = common.out.empty() ? fs::path(cfg.paths.dataset) : fs::path(common.out);
  const auto train = generate_dataset(cfg.data, n_train.value_or(cfg.train_scenes), "train", 0);
  const auto val = generate_dataset(cfg.data, n_val.value_or(cfg.val_scenes), "val", 1);
  save_dataset(train, out / cfg.paths.train_split);
  save_dataset(val, out / cfg.paths.val_split);
  std::cout << "wrote " << train.size() << " train and " << val.size() << " val scenes to " << out.string() << "\n";
  return kOk;
}

int cmd_train(const CommonOptions& common, const std::string& distribution, const std::string& ablation,
              std::optional<std::size_t> epochs, const std::string& dataset) {
  RunConfig cfg = resolve_config(common, true);
  if (!distribution.empty()) cfg.train.distribution = parse_distribution(distribution);
  if (!ablation.empty()) apply_ablation(cfg.network.head, ablation);
  if (epochs) cfg.train.epochs = *epochs;
  if (common.seed) cfg.train.seed = *common.seed;
  const fs::path out = common.out.empty() ? fs::path(cfg.paths.output) : fs::path(common.out);
  const fs::path data_dir = dataset.empty() ? fs::path(cfg.paths.dataset) : fs::path(dataset);

  const auto scenes = load_split(data_dir, cfg.paths.train_split);
  if (scenes.empty()) throw DatasetError("no training scenes in " + data_dir.string());
  Detector net(cfg.network, cfg.init_seed);
  try {
    train_loop(net, scenes, cfg.train, out, network_metadata(cfg.network), [](const TrainDiagnostics& d) {
      std::cout << "epoch " << d.epoch << " loss_moc " << d.loss_moc << " loss_mm " << d.loss_mm << " fg "
                << d.foreground_ratio << " underflow cauchy/gaussian " << d.underflow_cauchy << "/"
                << d.underflow_gaussian << std::endl;
    });
  } catch (const NonFiniteLossError& e) {
    std::error_code ec;
    fs::create_directories(out, ec);
    std::ofstream dump(out / "nonfinite-dump.txt");
    dump << "scene " << e.scene_id() << "\n" << e.what() << "\n";
    diff::save_checkpoint(out / "checkpoint-nonfinite", net.to_checkpoint(network_metadata(cfg.network)));
    std::cerr << "error: " << e.what() << " (state dumped to " << out.string() << ")\n";
    return kNonFinite;
  }
  std::cout << "wrote " << (out / "metrics.csv").string() << " and " << (out / "checkpoint-final").string() << "\n";
  return kOk;
}

int cmd_eval(const CommonOptions& common, const std::string& checkpoint, const std::string& dataset,
             const std::string& split) {
  const RunConfig cfg = resolve_config(common, false);
  const Detector net = load_detector(checkpoint);
  const auto scenes = load_split(dataset, split);
  if (scenes.empty()) {
    std::cerr << "error: dataset " << dataset << " is empty; AP is undefined\n";
    return kUndefined;
  }
  const auto dets = detect_dataset(net, scenes, cfg.inference);
  const auto gts = ground_truths(scenes);
  const auto report = evaluate(dets, gts);
  if (!report) {
    std::cerr << "error: dataset " << dataset << " has no ground truth; AP is undefined\n";
    return kUndefined;
  }
  const fs::path out = common.out.empty() ? fs::path(".") : fs::path(common.out);
  fs::create_directories(out);
  std::vector<std::string> ids;
  for (const auto& s : scenes) ids.push_back(s.image_id);
  write_file(out / "detections.csv", [&](std::ostream& os) { write_detections_csv(os, ids, dets); });
  write_file(out / "detections.json", [&](std::ostream& os) { write_detections_json(os, ids, dets); });
  write_file(out / "eval.csv", [&](std::ostream& os) { write_eval_csv(os, *report); });
  std::cout << "AP " << report->ap << "\nAP50 " << report->ap50 << "\n";
  return kOk;
}

int cmd_infer(const CommonOptions& common, const std::string& checkpoint, const std::string& image, bool json) {
  const RunConfig cfg = resolve_config(common, false);
  const Detector net = load_detector(checkpoint);
  const auto img = read_png(image);
  const auto dets = detect(net, diff::Tensor::from({img.height, img.width, 3}, img.pixels), cfg.inference);
  std::vector<std::vector<Box>> boxes(1);
  for (const auto& d : dets) boxes[0].push_back(d.box);
  const std::vector<std::string> ids{fs::path(image).stem().string()};
  auto emit = [&](std::ostream& os) {
    if (json) write_detections_json(os, ids, boxes);
    else write_detections_csv(os, ids, boxes);
  };
  if (common.out.empty()) emit(std::cout);
  else write_file(common.out, emit);
  return kOk;
}

int cmd_diagnose(const CommonOptions& common, const std::string& checkpoint, const std::string& dataset,
                 const std::string& split) {
  const RunConfig cfg = resolve_config(common, false);
  const Detector net = load_detector(checkpoint);
  const auto scenes = load_split(dataset, split);
  if (scenes.empty()) {
    std::cerr << "error: dataset " << dataset << " is empty\n";
    return kUndefined;
  }
  const auto diag = diagnose_dataset(net, scenes, cfg.train);
  const fs::path out = common.out.empty() ? fs::path(".") : fs::path(common.out);
  fs::create_directories(out);
  write_file(out / "diagnostics.csv", [&](std::ostream& os) {
    write_metrics_header(os);
    write_metrics_row(os, diag.summary);
  });
  write_file(out / "underflow.csv", [&](std::ostream& os) { write_underflow_csv(os, diag); });
  std::cout << "foreground_ratio " << diag.summary.foreground_ratio << "\nunderflow_cauchy_half "
            << diag.summary.underflow_cauchy << "\nunderflow_gaussian_half " << diag.summary.underflow_gaussian
            << "\nnonfinite_cauchy_logliks " << diag.nonfinite_cauchy_logliks << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mixture-density object detector on synthetic scenes"};
  app.require_subcommand(1);
  CommonOptions common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "run configuration (JSON)");
    sub->add_option("--seed", common.seed, "override the relevant seed");
    sub->add_option("--out", common.out, "output location");
  };

  auto* gen = app.add_subcommand("gen-data", "write train/val synthetic datasets");
  add_common(gen);
  std::optional<std::size_t> n_train, n_val;
  gen->add_option("--train", n_train, "number of training scenes");
  gen->add_option("--val", n_val, "number of validation scenes");

  auto* train = app.add_subcommand("train", "train a detector; writes metrics.csv and checkpoints");
  add_common(train);
  std::string distribution, ablation, dataset, checkpoint, split = "val", image;
  std::optional<std::size_t> epochs;
  train->add_option("--distribution", distribution, "cauchy|gaussian")->check(CLI::IsMember({"cauchy", "gaussian"}));
  train->add_option("--ablation", ablation, "none|no-ltrb|no-center-limit|no-level-scale")
      ->check(CLI::IsMember({"none", "no-ltrb", "no-center-limit", "no-level-scale"}));
  train->add_option("--epochs", epochs, "override train.epochs");
  train->add_option("--dataset", dataset, "dataset root (overrides paths.dataset)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  add_common(eval);
  eval->add_option("--checkpoint", checkpoint)->required();
  eval->add_option("--dataset", dataset)->required();
  eval->add_option("--split", split, "split subdirectory (default val)");

  auto* infer = app.add_subcommand("infer", "detect objects in one PNG image");
  add_common(infer);
  bool json = false;
  infer->add_option("--checkpoint", checkpoint)->required();
  infer->add_option("--image", image)->required();
  infer->add_flag("--json", json, "emit JSON instead of CSV");

  auto* diagnose = app.add_subcommand("diagnose", "recompute foreground and underflow ratios");
  add_common(diagnose);
  diagnose->add_option("--checkpoint", checkpoint)->required();
  diagnose->add_option("--dataset", dataset)->required();
  diagnose->add_option("--split", split, "split subdirectory (default val)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return kUsage;
  }

  CLI::App* active = app.get_subcommands().front();
  try {
    if (active == gen) return cmd_gen_data(common, n_train, n_val);
    if (active == train) return cmd_train(common, distribution, ablation, epochs, dataset);
    if (active == eval) return cmd_eval(common, checkpoint, dataset, split);
    if (active == infer) return cmd_infer(common, checkpoint, image, json);
    if (active == diagnose) return cmd_diagnose(common, checkpoint, dataset, split);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << active->help();
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const diff::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kCheckpoint;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIoError;
  }
  return kUsage;
}
