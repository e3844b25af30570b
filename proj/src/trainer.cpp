#include "elgan/trainer.hpp"

#include "elgan/lane_postprocess.hpp"
#include "json.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace elgan {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

double lr_at(const OptimizerPolicy& policy, std::int64_t iteration) {
  return policy.lr_init *
         std::pow(policy.lr_decay_power, static_cast<double>(iteration) / static_cast<double>(policy.lr_decay_interval));
}

Phase phase_of(const TrainSchedule& s, std::int64_t iteration) {
  if (iteration < s.gen_pretrain_iters) return Phase::gen_pretrain;
  if (iteration < s.gen_pretrain_iters + s.disc_pretrain_iters) return Phase::disc_pretrain;
  const std::int64_t k = (iteration - s.gen_pretrain_iters - s.disc_pretrain_iters) % (s.gen_phase_len + s.disc_phase_len);
  if (s.phase_order == PhaseOrder::gen_first) return k < s.gen_phase_len ? Phase::gen : Phase::disc;
  return k < s.disc_phase_len ? Phase::disc : Phase::gen;
}

RunState::RunState(const ExperimentConfig& cfg)
    : config(cfg),
      schedule(cfg.schedule),
      gen(cfg.generator, derive_seed(cfg.seed, 1)),
      disc(cfg.discriminator, derive_seed(cfg.seed, 2)) {
  config.validate();
  gen_opt.reset(gen.params());
  disc_opt.reset(disc.params());
}

namespace {

std::string dump_losses(const std::map<std::string, double>& losses) {
  json j = json::object();
  for (const auto& [k, v] : losses) j[k] = v;
  return j.dump();
}

void require_finite_losses(const RunState& s, Phase phase, const std::map<std::string, double>& losses) {
  for (const auto& [k, v] : losses)
    if (!std::isfinite(v))
      throw NonFiniteLoss("non-finite loss at iteration " + std::to_string(s.iteration) + " (phase " +
                          to_string(phase) + "): " + dump_losses(losses));
}

}  // namespace

StepMetrics train_step(RunState& state, const Batch& batch) {
  const ExperimentConfig& cfg = state.config;
  const Phase phase = phase_of(state.schedule, state.iteration);
  StepMetrics m;
  m.phase = phase;
  try {
    if (is_generator_phase(phase)) {
      LossSelection sel = cfg.loss;
      if (phase == Phase::gen_pretrain) sel.lambda_adv = 0.0;
      state.gen.params().zero_grad();
      const LossValue v = generator_loss(batch.images, batch.labels, state.gen, state.disc, sel, Mode::train,
                                         derive_seed(derive_seed(cfg.seed, 3), static_cast<std::uint64_t>(state.iteration)));
      m.losses["gen_fit"] = v.components.at("fit");
      if (const auto it = v.components.find("adv"); it != v.components.end()) m.losses["gen_adv"] = it->second;
      m.losses["gen_total"] = v.total;
      require_finite_losses(state, phase, m.losses);
      apply_update(state.gen.params(), state.gen_opt, cfg.gen_optimizer);
    } else {
      state.disc.params().zero_grad();
      m.losses["disc"] = discriminator_loss(batch.images, batch.labels, state.gen, state.disc, cfg.loss);
      require_finite_losses(state, phase, m.losses);
      apply_update(state.disc.params(), state.disc_opt, cfg.disc_optimizer);
    }
  } catch (const LossError& e) {
    throw NonFiniteLoss("loss failure at iteration " + std::to_string(state.iteration) + " (phase " + to_string(phase) +
                        "): " + e.what());
  }
  ++state.iteration;
  m.iteration = state.iteration;
  return m;
}

MetricEntry evaluate_generator(Generator<float>& gen, const std::vector<SceneRecord>& records,
                               const ExperimentConfig& cfg) {
  if (records.empty()) throw DataError("evaluate_generator: empty validation set");
  std::vector<LaneSet> preds, gts;
  double cce_sum = 0.0;
  const std::size_t step = static_cast<std::size_t>(cfg.batch_size);
  for (std::size_t start = 0; start < records.size(); start += step) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(records.size(), start + step); ++i) idx.push_back(i);
    const Batch b = stack_records(records, idx);
    const Tensor<float> pred = gen.predict(b.images);
    cce_sum += loss_cce(pred, b.labels) * static_cast<double>(idx.size());
    const Shape s = pred.shape();
    for (Index n = 0; n < s.n; ++n) {
      Tensor<float> one(Shape{1, s.c, s.h, s.w});
      one.sample(0) = pred.sample(n);
      preds.push_back(extract_lanes(one, cfg.post));
      gts.push_back(records[idx[static_cast<std::size_t>(n)]].lanes);
    }
  }
  const int width = static_cast<int>(records.front().image.shape().w);
  const EvalReport r = evaluate_corpus(preds, gts, width);
  MetricEntry e;
  e.accuracy = r.accuracy;
  e.fp = r.fp;
  e.fn = r.fn;
  e.losses["val_cce"] = cce_sum / static_cast<double>(records.size());
  return e;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

constexpr char kMagic[8] = {'E', 'L', 'G', 'A', 'N', 'C', 'K', 'P'};
constexpr std::uint32_t kVersion = 1;

class Writer {
 public:
  template <typename T>
  void pod(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    buf_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buf_ += s;
  }
  void reals(const std::vector<double>& v) {
    pod<std::uint64_t>(v.size());
    for (double x : v) pod(x);
  }
  void losses(const std::map<std::string, double>& m) {
    pod<std::uint64_t>(m.size());
    for (const auto& [k, v] : m) {
      str(k);
      pod(v);
    }
  }
  void tensor(const Tensor<float>& t) {
    const Shape s = t.shape();
    for (Index d : {s.n, s.c, s.h, s.w}) pod<std::int64_t>(d);
    buf_.append(reinterpret_cast<const char*>(t.data()), sizeof(float) * static_cast<std::size_t>(t.size()));
  }
  void params(const ParameterSet<float>& p, const OptimizerState<float>& opt) {
    pod<std::uint64_t>(p.size());
    for (const auto& x : p) tensor(x.value);
    pod<std::int64_t>(opt.steps);
    for (const auto& t : opt.first) tensor(t);
    for (const auto& t : opt.second) tensor(t);
  }
  std::string finish() {
    pod(fnv1a(buf_));
    return std::move(buf_);
  }

 private:
  std::string buf_;
};

class Reader {
 public:
  Reader(const std::string& bytes, std::string name) : bytes_(bytes), name_(std::move(name)) {}

  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<double> reals() {
    std::vector<double> v(pod<std::uint64_t>());
    for (double& x : v) x = pod<double>();
    return v;
  }
  std::map<std::string, double> losses() {
    std::map<std::string, double> m;
    const auto n = pod<std::uint64_t>();
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string k = str();
      m[k] = pod<double>();
    }
    return m;
  }
  void tensor(Tensor<float>& t) {
    Shape s;
    s.n = pod<std::int64_t>();
    s.c = pod<std::int64_t>();
    s.h = pod<std::int64_t>();
    s.w = pod<std::int64_t>();
    if (!(s == t.shape())) fail("tensor shape " + s.str() + " does not match " + t.shape().str());
    const std::size_t n = sizeof(float) * static_cast<std::size_t>(t.size());
    need(n);
    std::memcpy(t.data(), bytes_.data() + pos_, n);
    pos_ += n;
  }
  void params(ParameterSet<float>& p, OptimizerState<float>& opt) {
    if (pod<std::uint64_t>() != p.size()) fail("parameter count mismatch");
    for (auto& x : p) tensor(x.value);
    opt.reset(p);
    opt.steps = pod<std::int64_t>();
    for (auto& t : opt.first) tensor(t);
    for (auto& t : opt.second) tensor(t);
  }
  [[noreturn]] void fail(const std::string& why) const {
    throw CheckpointError("checkpoint '" + name_ + "': " + why);
  }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) fail("truncated");
  }
  const std::string& bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

std::uint64_t generator_fingerprint(const GeneratorSpec& spec) { return fnv1a(spec.serialize()); }

Phase phase_from_byte(std::uint8_t b, const Reader& r) {
  if (b > static_cast<std::uint8_t>(Phase::disc)) r.fail("bad phase code");
  return static_cast<Phase>(b);
}

}  // namespace

void save_checkpoint(const fs::path& path, const RunState& s) {
  Writer w;
  for (char c : kMagic) w.pod(c);
  w.pod(kVersion);
  w.pod(s.config.spec_fingerprint());
  w.pod(s.config.config_fingerprint());
  w.pod(generator_fingerprint(s.config.generator));
  w.str(s.config.to_text());
  w.pod<std::int64_t>(s.iteration);
  w.pod<std::int64_t>(s.schedule.gen_pretrain_iters);
  w.pod<std::int64_t>(s.schedule.disc_pretrain_iters);
  w.pod<std::int64_t>(s.schedule.total_iters);
  w.pod<std::uint8_t>(s.collapsed);
  w.str(s.collapse_reason);
  w.pod<std::uint8_t>(s.baseline_accuracy.has_value());
  w.pod<double>(s.baseline_accuracy.value_or(0.0));
  w.pod<std::int32_t>(s.collapse_streak);
  w.reals(s.pretrain_val_cce);
  w.losses(s.last_losses);
  w.pod<std::uint64_t>(s.history.size());
  for (const auto& e : s.history) {
    w.pod<std::int64_t>(e.iteration);
    w.pod<std::uint8_t>(static_cast<std::uint8_t>(e.phase));
    w.pod(e.accuracy);
    w.pod(e.fp);
    w.pod(e.fn);
    w.losses(e.losses);
  }
  w.params(s.gen.params(), s.gen_opt);
  w.params(s.disc.params(), s.disc_opt);
  write_file_atomic(path, w.finish());
}

namespace {

std::string read_verified(const fs::path& path) {
  std::string bytes;
  try {
    bytes = read_file(path);
  } catch (const DataError& e) {
    throw CheckpointError(e.what());
  }
  const std::string name = path.string();
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint64_t) || std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("checkpoint '" + name + "': not a checkpoint file");
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof(stored), sizeof(stored));
  bytes.resize(bytes.size() - sizeof(stored));
  if (fnv1a(bytes) != stored) throw CheckpointError("checkpoint '" + name + "': integrity check failed (corrupt file)");
  return bytes;
}

struct Header {
  std::uint64_t spec_fp, config_fp, gen_fp;
  ExperimentConfig config;
};

Header read_header(Reader& r) {
  for (std::size_t i = 0; i < sizeof(kMagic); ++i) r.pod<char>();
  const auto version = r.pod<std::uint32_t>();
  if (version != kVersion) r.fail("unsupported version " + std::to_string(version));
  Header h;
  h.spec_fp = r.pod<std::uint64_t>();
  h.config_fp = r.pod<std::uint64_t>();
  h.gen_fp = r.pod<std::uint64_t>();
  try {
    h.config = ExperimentConfig::from_text(r.str());
  } catch (const ConfigError& e) {
    r.fail(std::string("embedded config: ") + e.what());
  }
  if (h.config.spec_fingerprint() != h.spec_fp) r.fail("embedded config does not match its spec fingerprint");
  return h;
}

}  // namespace

RunState load_checkpoint(const fs::path& path, const ExperimentConfig* expected) {
  const std::string bytes = read_verified(path);
  Reader r(bytes, path.string());
  const Header h = read_header(r);
  if (expected) {
    if (expected->spec_fingerprint() != h.spec_fp)
      r.fail("spec fingerprint mismatch (architecture or loss selection differs from the checkpoint)");
    if (expected->config_fingerprint() != h.config_fp) r.fail("config fingerprint mismatch");
  }
  RunState s(h.config);
  s.iteration = r.pod<std::int64_t>();
  s.schedule.gen_pretrain_iters = r.pod<std::int64_t>();
  s.schedule.disc_pretrain_iters = r.pod<std::int64_t>();
  s.schedule.total_iters = r.pod<std::int64_t>();
  s.collapsed = r.pod<std::uint8_t>() != 0;
  s.collapse_reason = r.str();
  const bool has_baseline = r.pod<std::uint8_t>() != 0;
  const double baseline = r.pod<double>();
  if (has_baseline) s.baseline_accuracy = baseline;
  s.collapse_streak = r.pod<std::int32_t>();
  s.pretrain_val_cce = r.reals();
  s.last_losses = r.losses();
  s.history.resize(r.pod<std::uint64_t>());
  for (auto& e : s.history) {
    e.iteration = r.pod<std::int64_t>();
    e.phase = phase_from_byte(r.pod<std::uint8_t>(), r);
    e.accuracy = r.pod<double>();
    e.fp = r.pod<double>();
    e.fn = r.pod<double>();
    e.losses = r.losses();
  }
  r.params(s.gen.params(), s.gen_opt);
  r.params(s.disc.params(), s.disc_opt);
  return s;
}

void load_generator_weights(const fs::path& path, Generator<float>& gen) {
  const std::string bytes = read_verified(path);
  Reader r(bytes, path.string());
  const Header h = read_header(r);
  if (h.gen_fp != generator_fingerprint(gen.spec())) r.fail("generator architecture mismatch");
  const RunState s = load_checkpoint(path);
  auto& dst = gen.params();
  const auto& src = s.gen.params();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i].value = src[i].value;
}

std::optional<fs::path> latest_checkpoint(const fs::path& run_dir) {
  const fs::path dir = run_dir / "checkpoints";
  if (!fs::is_directory(dir)) return std::nullopt;
  std::optional<fs::path> best;
  long long best_iter = -1;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    long long it = 0;
    char tail[8] = {};
    if (std::sscanf(name.c_str(), "iter_%lld.%5s", &it, tail) == 2 && std::string(tail) == "ckpt" && it > best_iter) {
      best_iter = it;
      best = entry.path();
    }
  }
  return best;
}

// ---------------------------------------------------------------------------
// runs

namespace {

json entry_json(const MetricEntry& e) {
  json j;
  j["iteration"] = e.iteration;
  j["phase"] = to_string(e.phase);
  j["accuracy"] = e.accuracy;
  j["fp"] = e.fp;
  j["fn"] = e.fn;
  j["losses"] = json::object();
  for (const auto& [k, v] : e.losses) j["losses"][k] = v;
  return j;
}

Phase parse_phase(const std::string& s) {
  for (Phase p : {Phase::gen_pretrain, Phase::disc_pretrain, Phase::gen, Phase::disc})
    if (to_string(p) == s) return p;
  throw DataError("unknown phase '" + s + "'");
}

void write_metrics(const fs::path& run_dir, const std::vector<MetricEntry>& history) {
  std::string out;
  for (const auto& e : history) out += entry_json(e).dump() + "\n";
  write_file_atomic(run_dir / "metrics.jsonl", out);
}

fs::path checkpoint_path(const fs::path& run_dir, std::int64_t iteration) {
  return run_dir / "checkpoints" / ("iter_" + std::to_string(iteration) + ".ckpt");
}

void write_report(const fs::path& run_dir, const RunState& s) {
  json j;
  j["status"] = s.collapsed ? "collapsed" : "completed";
  j["reason"] = s.collapse_reason;
  j["iterations"] = s.iteration;
  j["pretrain_end"] = s.pretrain_end();
  j["baseline_accuracy"] = s.baseline_accuracy ? json(*s.baseline_accuracy) : json(nullptr);
  json fin;
  const MetricEntry last = s.history.empty() ? MetricEntry{} : s.history.back();
  fin["accuracy"] = last.accuracy;
  fin["fp"] = last.fp;
  fin["fn"] = last.fn;
  j["final"] = fin;
  write_file_atomic(run_dir / "report.json", j.dump(2) + "\n");
}

}  // namespace

std::pair<std::vector<SceneRecord>, std::vector<SceneRecord>> split_corpus(std::vector<SceneRecord> records,
                                                                           const ExperimentConfig& cfg) {
  const auto val = static_cast<std::size_t>(cfg.val_count);
  if (records.size() < val + static_cast<std::size_t>(cfg.batch_size))
    throw DataError("corpus of " + std::to_string(records.size()) + " scenes is too small for val_count " +
                    std::to_string(cfg.val_count) + " plus one batch of " + std::to_string(cfg.batch_size));
  std::vector<SceneRecord> held(std::make_move_iterator(records.end() - static_cast<std::ptrdiff_t>(val)),
                                std::make_move_iterator(records.end()));
  records.resize(records.size() - val);
  return {std::move(records), std::move(held)};
}

RunResult run_experiment(const ExperimentConfig& cfg, const std::vector<SceneRecord>& records, const fs::path& run_dir,
                         const std::optional<fs::path>& resume) {
  cfg.validate();
  auto [train, val] = split_corpus(records, cfg);
  for (const auto& r : val)
    for (const auto& lane : r.lanes)
      if (lane.stride != cfg.post.stride)
        throw DataError("scene '" + r.source_id + "' is labelled at stride " + std::to_string(lane.stride) +
                        " but post_stride is " + std::to_string(cfg.post.stride));

  fs::create_directories(run_dir / "checkpoints");
  write_file_atomic(run_dir / "config.snapshot", cfg.to_text());

  RunState state = resume ? load_checkpoint(*resume, &cfg) : RunState(cfg);
  if (!resume && !cfg.init_generator.empty()) load_generator_weights(cfg.init_generator, state.gen);
  const BatchSequence batches(train, static_cast<std::size_t>(cfg.batch_size), derive_seed(cfg.seed, 4));
  const std::int64_t every = cfg.schedule.checkpoint_every;

  if (!state.baseline_accuracy && state.iteration == state.schedule.gen_pretrain_iters)
    state.baseline_accuracy = evaluate_generator(state.gen, val, cfg).accuracy;

  std::int64_t saved = -1;
  try {
    while (!state.done()) {
      const StepMetrics step = train_step(state, batches.batch(static_cast<std::uint64_t>(state.iteration)));
      for (const auto& [k, v] : step.losses) state.last_losses[k] = v;
      const bool checkpoint = state.iteration % every == 0;
      const bool pretrain_ends = !state.baseline_accuracy && state.iteration == state.schedule.gen_pretrain_iters;
      if (!checkpoint && !pretrain_ends) continue;

      MetricEntry e = evaluate_generator(state.gen, val, cfg);
      e.iteration = state.iteration;
      e.phase = step.phase;
      for (const auto& [k, v] : state.last_losses) e.losses[k] = v;

      if (step.phase == Phase::gen_pretrain && cfg.pretrain_early_stop && checkpoint) {
        auto& hist = state.pretrain_val_cce;
        hist.push_back(e.losses["val_cce"]);
        const auto window = static_cast<std::size_t>(cfg.early_stop_window);
        if (hist.size() > window && state.iteration < state.schedule.gen_pretrain_iters) {
          const double old = hist[hist.size() - 1 - window];
          if ((old - hist.back()) / old < cfg.early_stop_tolerance) {
            // Converged: the rest of the schedule moves up.
            const std::int64_t cut = state.schedule.gen_pretrain_iters - state.iteration;
            state.schedule.gen_pretrain_iters -= cut;
            state.schedule.total_iters -= cut;
          }
        }
      }
      if (!state.baseline_accuracy && state.iteration == state.schedule.gen_pretrain_iters)
        state.baseline_accuracy = e.accuracy;
      if (checkpoint && state.baseline_accuracy && state.iteration > state.pretrain_end()) {
        state.collapse_streak = e.accuracy < cfg.collapse_fraction * *state.baseline_accuracy ? state.collapse_streak + 1 : 0;
        if (state.collapse_streak >= cfg.collapse_patience) {
          state.collapsed = true;
          state.collapse_reason = "validation accuracy below " + std::to_string(cfg.collapse_fraction) +
                                  " of baseline for " + std::to_string(cfg.collapse_patience) + " checkpoints";
        }
      }
      if (!checkpoint) continue;
      state.history.push_back(e);
      save_checkpoint(checkpoint_path(run_dir, state.iteration), state);
      saved = state.iteration;
      write_metrics(run_dir, state.history);
    }
  } catch (const NonFiniteLoss& e) {
    state.collapsed = true;
    state.collapse_reason = e.what();
    json diag;
    diag["iteration"] = state.iteration;
    diag["phase"] = to_string(phase_of(state.schedule, state.iteration));
    diag["message"] = e.what();
    diag["last_losses"] = json::object();
    for (const auto& [k, v] : state.last_losses) diag["last_losses"][k] = v;
    write_file_atomic(run_dir / "abort.json", diag.dump(2) + "\n");
  }
  if (saved != state.iteration && !state.collapsed) save_checkpoint(checkpoint_path(run_dir, state.iteration), state);
  write_metrics(run_dir, state.history);
  write_report(run_dir, state);
  return read_run(run_dir);
}

RunResult read_run(const fs::path& run_dir) {
  RunResult out;
  out.run_dir = run_dir;
  json report;
  try {
    report = json::parse(read_file(run_dir / "report.json"));
    out.collapsed = report.at("status").get<std::string>() == "collapsed";
    out.reason = report.at("reason").get<std::string>();
    out.iterations = report.at("iterations").get<std::int64_t>();
    if (!report.at("baseline_accuracy").is_null()) out.baseline_accuracy = report["baseline_accuracy"].get<double>();
    out.final_report.accuracy = report.at("final").at("accuracy").get<double>();
    out.final_report.fp = report.at("final").at("fp").get<double>();
    out.final_report.fn = report.at("final").at("fn").get<double>();
    std::istringstream lines(read_file(run_dir / "metrics.jsonl"));
    std::string line;
    while (std::getline(lines, line)) {
      if (line.empty()) continue;
      const json j = json::parse(line);
      MetricEntry e;
      e.iteration = j.at("iteration").get<std::int64_t>();
      e.phase = parse_phase(j.at("phase").get<std::string>());
      e.accuracy = j.at("accuracy").get<double>();
      e.fp = j.at("fp").get<double>();
      e.fn = j.at("fn").get<double>();
      for (const auto& [k, v] : j.at("losses").items()) e.losses[k] = v.get<double>();
      out.history.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw DataError("run directory '" + run_dir.string() + "': " + e.what());
  }
  return out;
}

std::vector<double> alternation_accuracies(const RunResult& run) {
  std::vector<double> out;
  for (const auto& e : run.history)
    if (e.phase == Phase::gen || e.phase == Phase::disc) out.push_back(e.accuracy);
  return out;
}

// ---------------------------------------------------------------------------
// sweeps

std::vector<MatrixCell> matrix_cells() {
  return {{"ce/ce", AdvLoss::cross_entropy, AdvLoss::cross_entropy},
          {"ce/emb", AdvLoss::cross_entropy, AdvLoss::embedding},
          {"emb/ce", AdvLoss::embedding, AdvLoss::cross_entropy},
          {"emb/emb", AdvLoss::embedding, AdvLoss::embedding}};
}

namespace {

bool finished(const fs::path& run_dir) { return fs::exists(run_dir / "report.json"); }

RunResult run_or_resume(const ExperimentConfig& cfg, const std::vector<SceneRecord>& records, const fs::path& dir) {
  if (finished(dir)) {
    if (read_file(dir / "config.snapshot") != cfg.to_text())
      throw ConfigError("finished run '" + dir.string() + "' was produced by a different config");
    return read_run(dir);
  }
  return run_experiment(cfg, records, dir, latest_checkpoint(dir));
}

/// Generator-only pretraining shared by the cells of one seed.
fs::path shared_pretrain(const ExperimentConfig& base, const std::vector<SceneRecord>& records, const fs::path& dir) {
  ExperimentConfig pre = base;
  pre.schedule.disc_pretrain_iters = 0;
  pre.schedule.total_iters = base.schedule.gen_pretrain_iters;
  const RunResult r = run_or_resume(pre, records, dir);
  if (r.collapsed) throw std::runtime_error("generator pretraining in '" + dir.string() + "' aborted: " + r.reason);
  const auto ckpt = latest_checkpoint(dir);
  if (!ckpt) throw std::runtime_error("generator pretraining in '" + dir.string() + "' left no checkpoint");
  return *ckpt;
}

ExperimentConfig cell_config(const ExperimentConfig& base, const fs::path& pretrained) {
  ExperimentConfig c = base;
  c.schedule.total_iters = base.schedule.total_iters - base.schedule.gen_pretrain_iters;
  c.schedule.gen_pretrain_iters = 0;
  c.init_generator = fs::absolute(pretrained).string();
  return c;
}

StabilityStats run_stats(const RunResult& r) {
  const auto acc = alternation_accuracies(r);
  return acc.empty() ? StabilityStats{} : stability_stats(acc);
}

std::vector<std::uint64_t> seed_dirs(const fs::path& out_dir) {
  std::vector<std::uint64_t> seeds;
  if (!fs::is_directory(out_dir)) return seeds;
  for (const auto& entry : fs::directory_iterator(out_dir)) {
    unsigned long long s = 0;
    const std::string name = entry.path().filename().string();
    if (entry.is_directory() && std::sscanf(name.c_str(), "seed_%llu", &s) == 1 && name == "seed_" + std::to_string(s))
      seeds.push_back(s);
  }
  std::sort(seeds.begin(), seeds.end());
  return seeds;
}

std::string cell_dir_name(const std::string& label) {
  std::string s = label;
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

std::string tap_label(std::size_t rank, std::size_t count, int tap) {
  if (count == 3) return rank == 0 ? "shallow" : rank == 1 ? "middle" : "deep";
  return "tap_" + std::to_string(tap);
}

}  // namespace

std::vector<MatrixRow> run_loss_matrix(const ExperimentConfig& base, const std::vector<SceneRecord>& records,
                                       const fs::path& out_dir, const std::vector<std::uint64_t>& seeds) {
  base.validate();
  std::vector<MatrixRow> rows;
  for (const std::uint64_t seed : seeds) {
    ExperimentConfig seeded = base;
    seeded.seed = seed;
    const fs::path seed_dir = out_dir / ("seed_" + std::to_string(seed));
    const fs::path pretrained = shared_pretrain(seeded, records, seed_dir / "pretrain");
    for (const auto& cell : matrix_cells()) {
      ExperimentConfig c = cell_config(seeded, pretrained);
      c.loss.generator_adv = cell.gen;
      c.loss.discriminator = cell.disc;
      const RunResult r = run_or_resume(c, records, seed_dir / cell_dir_name(cell.label));
      rows.push_back({cell.label, seed, run_stats(r), r.collapsed});
    }
  }
  return rows;
}

std::vector<MatrixRow> collect_matrix(const fs::path& out_dir) {
  std::vector<MatrixRow> rows;
  for (const std::uint64_t seed : seed_dirs(out_dir))
    for (const auto& cell : matrix_cells()) {
      const fs::path dir = out_dir / ("seed_" + std::to_string(seed)) / cell_dir_name(cell.label);
      if (!finished(dir)) continue;
      const RunResult r = read_run(dir);
      rows.push_back({cell.label, seed, run_stats(r), r.collapsed});
    }
  return rows;
}

std::vector<TapRow> run_tap_ablation(const ExperimentConfig& base, const std::vector<SceneRecord>& records,
                                     const fs::path& out_dir) {
  base.validate();
  const fs::path pretrained = shared_pretrain(base, records, out_dir / "pretrain");
  std::vector<int> taps = base.discriminator.taps;
  std::sort(taps.begin(), taps.end());
  for (const int tap : taps) {
    ExperimentConfig c = cell_config(base, pretrained);
    c.loss.generator_adv = AdvLoss::embedding;
    c.discriminator.embedding_tap = tap;
    run_or_resume(c, records, out_dir / ("tap_" + std::to_string(tap)));
  }
  return collect_taps(out_dir);
}

std::vector<TapRow> collect_taps(const fs::path& out_dir) {
  std::vector<std::pair<int, fs::path>> found;
  if (fs::is_directory(out_dir))
    for (const auto& entry : fs::directory_iterator(out_dir)) {
      int tap = 0;
      const std::string name = entry.path().filename().string();
      if (std::sscanf(name.c_str(), "tap_%d", &tap) == 1 && name == "tap_" + std::to_string(tap) && finished(entry.path()))
        found.emplace_back(tap, entry.path());
    }
  std::sort(found.begin(), found.end());
  std::vector<TapRow> rows;
  for (std::size_t i = 0; i < found.size(); ++i) {
    const RunResult r = read_run(found[i].second);
    rows.push_back({tap_label(i, found.size(), found[i].first), found[i].first, r.final_report, r.collapsed});
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const TapRow& a, const TapRow& b) { return a.report.accuracy > b.report.accuracy; });
  return rows;
}

std::string matrix_table(const std::vector<MatrixRow>& rows) {
  std::string out;
  char buf[200];
  std::snprintf(buf, sizeof(buf), "%-10s %-10s %10s %12s %10s %9s\n", "Gen loss", "Disc loss", "mean (%)", "var (%^2)",
                "max (%)", "collapsed");
  out += buf;
  for (const auto& cell : matrix_cells()) {
    double mean = 0.0, var = 0.0, max = 0.0;
    int n = 0, collapsed = 0;
    for (const auto& r : rows)
      if (r.label == cell.label) {
        mean += r.stats.mean;
        var += r.stats.variance;
        max += r.stats.max;
        collapsed += r.collapsed ? 1 : 0;
        ++n;
      }
    if (n == 0) continue;
    std::snprintf(buf, sizeof(buf), "%-10s %-10s %10.2f %12.3f %10.2f %6d/%-2d\n", to_string(cell.gen).c_str(),
                  to_string(cell.disc).c_str(), 100.0 * mean / n, 1e4 * var / n, 100.0 * max / n, collapsed, n);
    out += buf;
  }
  // Per seed: every emb-generator variance below every ce-generator variance.
  std::map<std::uint64_t, std::vector<const MatrixRow*>> by_seed;
  for (const auto& r : rows) by_seed[r.seed].push_back(&r);
  int complete = 0, ordered = 0;
  for (const auto& [seed, cells] : by_seed) {
    if (cells.size() != matrix_cells().size()) continue;
    ++complete;
    double worst_emb = -1.0, best_ce = std::numeric_limits<double>::infinity();
    for (const MatrixRow* r : cells) {
      if (r->label.rfind("emb/", 0) == 0)
        worst_emb = std::max(worst_emb, r->stats.variance);
      else
        best_ce = std::min(best_ce, r->stats.variance);
    }
    const bool ok = worst_emb < best_ce;
    ordered += ok ? 1 : 0;
    std::snprintf(buf, sizeof(buf), "seed %llu: max emb-gen var %.3f, min ce-gen var %.3f -> %s\n",
                  static_cast<unsigned long long>(seed), 1e4 * worst_emb, 1e4 * best_ce, ok ? "emb lower" : "not lower");
    out += buf;
  }
  std::snprintf(buf, sizeof(buf), "emb-generator variance lower in %d of %d seeds (population variance)\n", ordered,
                complete);
  out += buf;
  return out;
}

std::string tap_table(const std::vector<TapRow>& rows) {
  std::string out;
  char buf[200];
  std::snprintf(buf, sizeof(buf), "%-10s %5s %12s %8s %8s %9s\n", "Tap", "Block", "Accuracy (%)", "FP", "FN",
                "collapsed");
  out += buf;
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%-10s %5d %12.2f %8.4f %8.4f %9s\n", r.label.c_str(), r.tap,
                  100.0 * r.report.accuracy, r.report.fp, r.report.fn, r.collapsed ? "yes" : "no");
    out += buf;
  }
  return out;
}

std::string stability_svg(const std::vector<MatrixRow>& rows) {
  const int width = 480, height = 320, left = 60, right = 20, top = 20, bottom = 50;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  const auto ypix = [&](double pct) { return top + plot_h * (1.0 - std::clamp(pct, 0.0, 100.0) / 100.0); };
  std::string out;
  char buf[320];
  std::snprintf(buf, sizeof(buf),
                "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%d\" height=\"%d\" viewBox=\"0 0 %d %d\">\n"
                "<rect width=\"%d\" height=\"%d\" fill=\"white\"/>\n",
                width, height, width, height, width, height);
  out += buf;
  std::snprintf(buf, sizeof(buf),
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n"
                "<line x1=\"%d\" y1=\"%d\" x2=\"%d\" y2=\"%d\" stroke=\"black\"/>\n",
                left, top, left, height - bottom, left, height - bottom, width - right, height - bottom);
  out += buf;
  for (int pct = 0; pct <= 100; pct += 20) {
    std::snprintf(buf, sizeof(buf),
                  "<text x=\"%d\" y=\"%.1f\" font-size=\"11\" text-anchor=\"end\">%d</text>\n"
                  "<line x1=\"%d\" y1=\"%.1f\" x2=\"%d\" y2=\"%.1f\" stroke=\"#ddd\"/>\n",
                  left - 6, ypix(pct) + 4, pct, left, ypix(pct), width - right, ypix(pct));
    out += buf;
  }
  std::snprintf(buf, sizeof(buf),
                "<text x=\"16\" y=\"%.1f\" font-size=\"12\" transform=\"rotate(-90 16 %.1f)\" "
                "text-anchor=\"middle\">checkpoint accuracy (%%)</text>\n",
                top + plot_h / 2, top + plot_h / 2);
  out += buf;
  const auto cells = matrix_cells();
  for (std::size_t i = 0; i < cells.size(); ++i) {
    double mean = 0.0, var = 0.0;
    int n = 0;
    for (const auto& r : rows)
      if (r.label == cells[i].label) {
        mean += r.stats.mean;
        var += r.stats.variance;
        ++n;
      }
    const double x = left + plot_w * (static_cast<double>(i) + 0.5) / static_cast<double>(cells.size());
    std::snprintf(buf, sizeof(buf), "<text x=\"%.1f\" y=\"%d\" font-size=\"12\" text-anchor=\"middle\">%s</text>\n", x,
                  height - bottom + 18, cells[i].label.c_str());
    out += buf;
    if (n == 0) continue;
    mean = 100.0 * mean / n;
    const double sd = 100.0 * std::sqrt(var / n);
    std::snprintf(buf, sizeof(buf),
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n"
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n"
                  "<line x1=\"%.1f\" y1=\"%.1f\" x2=\"%.1f\" y2=\"%.1f\" stroke=\"#1f77b4\" stroke-width=\"2\"/>\n"
                  "<circle cx=\"%.1f\" cy=\"%.1f\" r=\"4\" fill=\"#d62728\"/>\n",
                  x, ypix(mean - sd), x, ypix(mean + sd), x - 8, ypix(mean - sd), x + 8, ypix(mean - sd), x - 8,
                  ypix(mean + sd), x + 8, ypix(mean + sd), x, ypix(mean));
    out += buf;
    std::snprintf(buf, sizeof(buf), "<text x=\"%.1f\" y=\"%d\" font-size=\"10\" text-anchor=\"middle\">%.2f</text>\n", x,
                  height - bottom + 32, mean);
    out += buf;
  }
  out += "</svg>\n";
  return out;
}

}  // namespace elgan
