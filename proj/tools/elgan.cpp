// elgan: synth / train / predict / postprocess / evaluate / matrix / taps / report

#include "elgan/config.hpp"
#include "elgan/lane_data.hpp"
#include "elgan/lane_eval.hpp"
#include "elgan/lane_postprocess.hpp"
#include "elgan/runtime.hpp"
#include "elgan/trainer.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using namespace elgan;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitCollapse = 4;

std::pair<int, int> parse_size(const std::string& s) {
  int h = 0, w = 0;
  char x = 0, extra = 0;
  if (std::sscanf(s.c_str(), "%d%c%d%c", &h, &x, &w, &extra) != 3 || (x != 'x' && x != 'X') || h < 1 || w < 1)
    throw ConfigError("size '" + s + "' is not of the form HxW");
  return {h, w};
}

struct ConfigFlags {
  std::string preset = "desk";
  std::string file;
  std::vector<std::string> overrides;

  void attach(CLI::App* cmd) {
    cmd->add_option("--preset", preset, "Base preset: desk (scaled) or paper (reference values)")
        ->check(CLI::IsMember({"desk", "paper"}))
        ->capture_default_str();
    cmd->add_option("--config", file, "Config file of key = value lines applied over the preset");
    cmd->add_option("--set", overrides, "Extra key=value override (repeatable)");
  }

  ExperimentConfig resolve() const {
    ExperimentConfig cfg = preset == "paper" ? ExperimentConfig::paper() : ExperimentConfig::desk();
    if (!file.empty()) {
      std::string text;
      try {
        text = read_file(file);
      } catch (const DataError& e) {
        throw ConfigError(e.what());
      }
      cfg = ExperimentConfig::from_text(text, cfg);
    }
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
      set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  }
};

bool non_empty_dir(const fs::path& p) { return fs::exists(p) && (!fs::is_directory(p) || !fs::is_empty(p)); }

int cmd_synth(const fs::path& out, int count, std::uint64_t seed, const std::string& size, const std::string& difficulty,
              int stride, double sigma, bool force) {
  if (count < 0) throw ConfigError("--count must be >= 0");
  const auto [h, w] = parse_size(size);
  const Difficulty diff = parse_difficulty(difficulty);
  if (non_empty_dir(out)) {
    if (!force) throw DataError("output directory '" + out.string() + "' is not empty (use --force to overwrite)");
    fs::remove_all(out);
  }
  RasterizeSpec spec;
  spec.height = h;
  spec.width = w;
  spec.sigma = sigma;
  std::vector<SceneRecord> records;
  for (int i = 0; i < count; ++i) {
    SceneRecord r = synth_scene(derive_seed(seed, static_cast<std::uint64_t>(i)), spec, diff, stride);
    char id[32];
    std::snprintf(id, sizeof(id), "scene_%05d", i);
    r.source_id = id;
    records.push_back(std::move(r));
  }
  fs::create_directories(out);
  write_corpus(out, records, stride);
  std::cout << "wrote " << count << " scenes to " << out.string() << "\n";
  return 0;
}

int cmd_train(const ConfigFlags& flags, const fs::path& data, const fs::path& out, const std::string& resume) {
  ExperimentConfig cfg;
  if (!resume.empty() && flags.file.empty() && flags.overrides.empty()) {
    // Resume without a config: continue under the checkpoint's own config.
    cfg = load_checkpoint(resume).config;
  } else {
    cfg = flags.resolve();
  }
  const auto records = read_corpus(data, cfg.sigma);
  const RunResult r = run_experiment(cfg, records, out, resume.empty() ? std::nullopt : std::optional<fs::path>(resume));
  std::cout << report_table("EL-GAN run", r.final_report);
  std::cout << "iterations " << r.iterations << ", checkpoints " << r.history.size() << ", run dir "
            << r.run_dir.string() << "\n";
  if (r.collapsed) {
    std::cerr << "run collapsed: " << r.reason << "\n";
    return kExitCollapse;
  }
  return 0;
}

int cmd_predict(const std::string& checkpoint, const fs::path& data, const fs::path& out, bool oracle) {
  if (oracle == !checkpoint.empty()) throw ConfigError("predict needs exactly one of --checkpoint or --oracle");
  std::optional<RunState> state;
  double sigma = 1.0;
  if (!oracle) {
    state.emplace(load_checkpoint(checkpoint));
    sigma = state->config.sigma;
  }
  const auto records = read_corpus(data, sigma);
  fs::create_directories(out);
  for (const auto& r : records) {
    const Tensor<float> pred = oracle ? r.label : state->gen.predict(r.image);
    const Shape s = pred.shape();
    Tensor<float> plane(Shape{1, 1, s.h, s.w});
    std::copy(lane_plane(pred), lane_plane(pred) + s.plane(), plane.data());
    write_pfm(out / (r.source_id + ".pfm"), plane);
  }
  std::cout << "wrote " << records.size() << " prediction maps to " << out.string() << "\n";
  return 0;
}

int cmd_postprocess(const fs::path& pred_dir, const fs::path& out, const std::string& variant, double threshold,
                    int stride, int min_points) {
  ExtractOptions opt;
  opt.variant = parse_variant(variant);
  opt.threshold = threshold;
  opt.stride = stride;
  opt.min_points = min_points;
  if (!fs::is_directory(pred_dir)) throw DataError("prediction directory '" + pred_dir.string() + "' does not exist");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(pred_dir))
    if (e.path().extension() == ".pfm") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::string lines;
  for (const auto& f : files) {
    const Tensor<float> plane = read_pfm(f);
    const LaneSet lanes = extract_lanes(plane, opt);
    const auto h = static_cast<int>(plane.shape().h);
    lines += label_line(lanes, default_h_samples(h, stride), "images/" + f.stem().string() + ".ppm") + "\n";
  }
  write_file_atomic(out, lines);
  std::cout << "wrote lanes for " << files.size() << " images to " << out.string() << "\n";
  return 0;
}

int cmd_evaluate(const fs::path& pred, fs::path gt, const std::string& out, const std::string& size,
                 const std::string& name) {
  const auto [h, w] = parse_size(size);
  if (fs::is_directory(gt)) gt /= "labels.jsonl";
  const auto preds = parse_label_file(pred, h, w);
  const auto gts = parse_label_file(gt, h, w);
  std::map<std::string, const LabelRecord*> by_file;
  for (const auto& p : preds) by_file[p.raw_file] = &p;
  std::vector<LaneSet> pl, gl;
  for (const auto& g : gts) {
    const auto it = by_file.find(g.raw_file);
    pl.push_back(it == by_file.end() ? LaneSet{} : it->second->lanes);
    gl.push_back(g.lanes);
  }
  const EvalReport r = evaluate_corpus(pl, gl, w);
  if (!out.empty()) write_file_atomic(out, report_json(r) + "\n");
  std::cout << report_table(name, r);
  return 0;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stoull(item));
    } catch (const std::exception&) {
      throw ConfigError("--seeds expects a comma separated list of integers, got '" + s + "'");
    }
  }
  if (out.empty()) throw ConfigError("--seeds is empty");
  return out;
}

int cmd_report(const std::string& matrix_dir, const std::string& taps_dir, const fs::path& out) {
  if (matrix_dir.empty() && taps_dir.empty()) throw ConfigError("report needs --matrix and/or --taps");
  fs::create_directories(out);
  if (!matrix_dir.empty()) {
    const auto rows = collect_matrix(matrix_dir);
    if (rows.empty()) throw DataError("no completed matrix runs under '" + matrix_dir + "'");
    const std::string table = matrix_table(rows);
    write_file_atomic(out / "stability.txt", table);
    write_file_atomic(out / "stability.svg", stability_svg(rows));
    std::cout << table;
  }
  if (!taps_dir.empty()) {
    const auto rows = collect_taps(taps_dir);
    if (rows.empty()) throw DataError("no completed tap runs under '" + taps_dir + "'");
    const std::string table = tap_table(rows);
    write_file_atomic(out / "taps.txt", table);
    std::cout << table;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Adversarial lane segmentation with an embedding loss"};
  app.require_subcommand(1);

  std::string out, data, config_path, resume, checkpoint, pred, gt, variant = "basicpp", size = "128x128";
  std::string difficulty = "easy", name = "EL-GAN", seeds = "1,2,3,4,5", matrix_dir, taps_dir;
  int count = 200, stride = 10, min_points = 3;
  std::uint64_t seed = 1;
  double sigma = 1.0, threshold = 0.5;
  bool force = false, oracle = false;
  ConfigFlags train_cfg, matrix_cfg, taps_cfg;

  auto* synth = app.add_subcommand("synth", "Write a seeded synthetic lane corpus");
  synth->add_option("--out", out, "Output dataset directory")->required();
  synth->add_option("--count", count, "Number of scenes")->capture_default_str();
  synth->add_option("--seed", seed, "Corpus seed")->capture_default_str();
  synth->add_option("--size", size, "Image size HxW")->capture_default_str();
  synth->add_option("--difficulty", difficulty, "easy or occluded")->capture_default_str();
  synth->add_option("--stride", stride, "Label row stride in pixels")->capture_default_str();
  synth->add_option("--sigma", sigma, "Label blur sigma in pixels")->capture_default_str();
  synth->add_flag("--force", force, "Overwrite a non-empty output directory");

  auto* train = app.add_subcommand("train", "Pretrain and adversarially train one run");
  train_cfg.attach(train);
  train->add_option("--data", data, "Dataset directory")->required();
  train->add_option("--out", out, "Run directory")->required();
  train->add_option("--resume", resume, "Checkpoint to continue from");

  auto* predict = app.add_subcommand("predict", "Write lane probability maps (.pfm) for a dataset");
  predict->add_option("--checkpoint", checkpoint, "Checkpoint whose generator predicts");
  predict->add_option("--data", data, "Dataset directory")->required();
  predict->add_option("--out", out, "Output directory of <id>.pfm maps")->required();
  predict->add_flag("--oracle", oracle, "Write the label maps instead of predictions");

  auto* post = app.add_subcommand("postprocess", "Turn prediction maps into lanes (JSON lines)");
  post->add_option("--pred", pred, "Directory of .pfm maps")->required();
  post->add_option("--out", out, "Output lanes file")->required();
  post->add_option("--variant", variant, "basic or basicpp")->capture_default_str();
  post->add_option("--threshold", threshold, "Binarization threshold")->capture_default_str();
  post->add_option("--stride", stride, "Polyline row stride")->capture_default_str();
  post->add_option("--min-points", min_points, "Drop lanes with fewer points")->capture_default_str();

  auto* eval = app.add_subcommand("evaluate", "Score predicted lanes against labels");
  eval->add_option("--pred", pred, "Predicted lanes file")->required();
  eval->add_option("--gt", gt, "Label file or dataset directory")->required();
  eval->add_option("--out", out, "Report JSON path");
  eval->add_option("--size", size, "Image size HxW")->capture_default_str();
  eval->add_option("--name", name, "Row label in the summary table")->capture_default_str();

  auto* matrix = app.add_subcommand("matrix", "Run the 2x2 adversarial loss matrix");
  matrix_cfg.attach(matrix);
  matrix->add_option("--data", data, "Dataset directory")->required();
  matrix->add_option("--out", out, "Sweep directory")->required();
  matrix->add_option("--seeds", seeds, "Comma separated seeds")->capture_default_str();

  auto* taps = app.add_subcommand("taps", "Run the embedding tap ablation");
  taps_cfg.attach(taps);
  taps->add_option("--data", data, "Dataset directory")->required();
  taps->add_option("--out", out, "Sweep directory")->required();

  auto* report = app.add_subcommand("report", "Tables and plot from finished sweep directories");
  report->add_option("--matrix", matrix_dir, "Matrix sweep directory");
  report->add_option("--taps", taps_dir, "Tap sweep directory");
  report->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*synth) return cmd_synth(out, count, seed, size, difficulty, stride, sigma, force);
    if (*train) return cmd_train(train_cfg, data, out, resume);
    if (*predict) return cmd_predict(checkpoint, data, out, oracle);
    if (*post) return cmd_postprocess(pred, out, variant, threshold, stride, min_points);
    if (*eval) return cmd_evaluate(pred, gt, out, size, name);
    if (*matrix) {
      const ExperimentConfig cfg = matrix_cfg.resolve();
      const auto rows = run_loss_matrix(cfg, read_corpus(data, cfg.sigma), out, parse_seeds(seeds));
      const std::string table = matrix_table(rows);
      write_file_atomic(fs::path(out) / "stability.txt", table);
      std::cout << table;
      return 0;
    }
    if (*taps) {
      const ExperimentConfig cfg = taps_cfg.resolve();
      const auto rows = run_tap_ablation(cfg, read_corpus(data, cfg.sigma), out);
      const std::string table = tap_table(rows);
      write_file_atomic(fs::path(out) / "taps.txt", table);
      std::cout << table;
      return 0;
    }
    if (*report) return cmd_report(matrix_dir, taps_dir, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return kExitData;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ShapeError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
