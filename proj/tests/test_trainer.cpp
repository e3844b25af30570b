#include "elgan/trainer.hpp"

#include <gtest/gtest.h>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include <sys/wait.h>
#include <unistd.h>

using namespace elgan;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("elgan_trainer_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// 32x32 scenes labelled every 4 rows; 12 for training and 4 for validation.
std::vector<SceneRecord> tiny_corpus(std::size_t n = 16) {
  std::vector<SceneRecord> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(synth_scene(100 + i, RasterizeSpec{1.0, 32, 32}, Difficulty::easy, 4));
  return out;
}

ExperimentConfig tiny_config() {
  ExperimentConfig c = ExperimentConfig::desk();
  c.label_stride = 4;
  c.post.stride = 4;
  c.val_count = 4;
  c.batch_size = 2;
  c.schedule.gen_pretrain_iters = 20;
  c.schedule.disc_pretrain_iters = 10;
  c.schedule.total_iters = 60;
  c.schedule.gen_phase_len = 10;
  c.schedule.disc_phase_len = 10;
  c.schedule.checkpoint_every = 10;
  c.pretrain_early_stop = false;
  return c;
}

Batch tiny_batch() {
  const auto recs = tiny_corpus(2);
  return stack_records(recs, {0, 1});
}

template <typename Scalar>
bool same_params(const ParameterSet<Scalar>& a, const ParameterSet<Scalar>& b) {
  return a == b;
}

}  // namespace

TEST(LearningRate, PaperPolicyValues) {
  OptimizerPolicy p;
  p.lr_init = 5e-4;
  p.lr_decay_power = 0.99;
  p.lr_decay_interval = 200;
  EXPECT_EQ(lr_at(p, 0), 5e-4);
  EXPECT_DOUBLE_EQ(lr_at(p, 200), 4.95e-4);
  EXPECT_DOUBLE_EQ(lr_at(p, 400), 4.9005e-4);
  EXPECT_NEAR(lr_at(p, 100), 5e-4 * std::sqrt(0.99), 1e-18);
  double last = lr_at(p, 0);
  for (std::int64_t it = 1; it < 5000; it += 7) {
    const double now = lr_at(p, it);
    EXPECT_LE(now, last);
    last = now;
  }
}

TEST(Schedule, PhaseExamples) {
  TrainSchedule s;
  s.total_iters = 100000;
  EXPECT_EQ(phase_of(s, 0), Phase::gen);
  EXPECT_EQ(phase_of(s, 299), Phase::gen);
  EXPECT_EQ(phase_of(s, 300), Phase::disc);
  EXPECT_EQ(phase_of(s, 499), Phase::disc);
  EXPECT_EQ(phase_of(s, 500), Phase::gen);
  s.gen_pretrain_iters = 100;
  s.disc_pretrain_iters = 50;
  EXPECT_EQ(phase_of(s, 99), Phase::gen_pretrain);
  EXPECT_EQ(phase_of(s, 100), Phase::disc_pretrain);
  EXPECT_EQ(phase_of(s, 149), Phase::disc_pretrain);
  EXPECT_EQ(phase_of(s, 150), Phase::gen);
  s.phase_order = PhaseOrder::disc_first;
  EXPECT_EQ(phase_of(s, 150), Phase::disc);
  EXPECT_EQ(phase_of(s, 350), Phase::gen);
}

TEST(Schedule, TenThousandIterationSweep) {
  TrainSchedule s;
  s.total_iters = 10000;
  std::map<Phase, int> counts;
  Phase prev = Phase::disc;
  int switches = 0;
  for (std::int64_t it = 0; it < 10000; ++it) {
    const Phase p = phase_of(s, it);
    ++counts[p];
    if (p != prev) ++switches;
    prev = p;
    // closed form: position inside a 500-iteration cycle
    EXPECT_EQ(p, it % 500 < 300 ? Phase::gen : Phase::disc) << it;
  }
  EXPECT_EQ(counts[Phase::gen], 6000);
  EXPECT_EQ(counts[Phase::disc], 4000);
  EXPECT_EQ(switches, 40);
}

TEST(Schedule, StepAccountingAddsUp) {
  TrainSchedule s;
  s.gen_pretrain_iters = 37;
  s.disc_pretrain_iters = 11;
  s.gen_phase_len = 7;
  s.disc_phase_len = 5;
  s.total_iters = 1000;
  std::map<Phase, std::int64_t> counts;
  for (std::int64_t it = 0; it < s.total_iters; ++it) ++counts[phase_of(s, it)];
  EXPECT_EQ(counts[Phase::gen_pretrain], 37);
  EXPECT_EQ(counts[Phase::disc_pretrain], 11);
  EXPECT_EQ(counts[Phase::gen] + counts[Phase::disc] + 48, 1000);
  EXPECT_EQ(counts[Phase::gen], 79 * 7 + 4);  // 952 = 79 cycles of 12 + 4
}

TEST(TrainStep, StopGradientContract) {
  ExperimentConfig cfg = tiny_config();
  cfg.schedule.gen_pretrain_iters = 0;
  cfg.schedule.disc_pretrain_iters = 0;
  cfg.schedule.gen_phase_len = 1;
  cfg.schedule.disc_phase_len = 1;
  const Batch b = tiny_batch();
  for (AdvLoss gen_adv : {AdvLoss::cross_entropy, AdvLoss::embedding})
    for (AdvLoss disc_adv : {AdvLoss::cross_entropy, AdvLoss::embedding}) {
      cfg.loss.generator_adv = gen_adv;
      cfg.loss.discriminator = disc_adv;
      RunState st(cfg);
      const auto disc_before = st.disc.params();
      const auto gen_before = st.gen.params();
      train_step(st, b);  // generator
      EXPECT_TRUE(same_params(st.disc.params(), disc_before));
      EXPECT_FALSE(same_params(st.gen.params(), gen_before));
      const auto gen_after = st.gen.params();
      const auto disc_mid = st.disc.params();
      train_step(st, b);  // discriminator
      EXPECT_TRUE(same_params(st.gen.params(), gen_after));
      EXPECT_FALSE(same_params(st.disc.params(), disc_mid));
      EXPECT_EQ(st.gen_opt.steps, 1);
      EXPECT_EQ(st.disc_opt.steps, 1);
    }
}

TEST(TrainStep, ZeroLambdaIsPlainCrossEntropyTraining) {
  ExperimentConfig cfg = tiny_config();
  cfg.schedule.gen_pretrain_iters = 0;
  cfg.schedule.disc_pretrain_iters = 0;
  cfg.loss.lambda_adv = 0.0;
  const Batch b = tiny_batch();
  RunState st(cfg);
  Generator<float> baseline = st.gen;
  OptimizerState<float> opt;

  const std::uint64_t dropout_seed = derive_seed(derive_seed(cfg.seed, 3), 0);
  baseline.params().zero_grad();
  Graph<float> g;
  const Var pred = baseline.forward(g, g.input(b.images), Mode::train, true, dropout_seed);
  g.backward(ops::cce(g, pred, g.input(b.labels)));
  apply_update(baseline.params(), opt, cfg.gen_optimizer);

  const StepMetrics m = train_step(st, b);
  EXPECT_EQ(m.phase, Phase::gen);
  EXPECT_EQ(m.losses.count("gen_adv"), 0u);
  EXPECT_TRUE(same_params(st.gen.params(), baseline.params()));
}

TEST(Optimizer, AdamFirstStepMovesEveryWeightByTheLearningRate) {
  ParameterSet<double> params;
  auto& p = params[params.add("w", Shape{1, 1, 1, 3}, true)];
  p.value.data()[0] = 1.0;
  p.grad.data()[0] = 0.5;
  p.grad.data()[1] = -2.0;
  OptimizerPolicy pol;
  pol.l2_scale = 0.0;
  OptimizerState<double> st;
  apply_update(params, st, pol);
  EXPECT_NEAR(params[0].value.data()[0], 1.0 - 5e-4, 1e-10);
  EXPECT_NEAR(params[0].value.data()[1], 5e-4, 1e-10);
  EXPECT_EQ(params[0].value.data()[2], 0.0);

  OptimizerPolicy sgd;
  sgd.kind = OptimizerKind::sgd;
  sgd.momentum = 0.0;
  sgd.lr_init = 0.1;
  sgd.l2_scale = 0.5;
  ParameterSet<double> q;
  auto& w = q[q.add("w", Shape{1, 1, 1, 1}, true)];
  w.value.data()[0] = 2.0;
  w.grad.data()[0] = 1.0;
  OptimizerState<double> s2;
  apply_update(q, s2, sgd);
  EXPECT_DOUBLE_EQ(q[0].value.data()[0], 2.0 - 0.1 * (1.0 + 0.5 * 2.0));
}

TEST(Checkpoint, SaveLoadIsIdentity) {
  const fs::path dir = scratch("ckpt");
  ExperimentConfig cfg = tiny_config();
  RunState st(cfg);
  const Batch b = tiny_batch();
  for (int i = 0; i < 3; ++i) train_step(st, b);
  st.history.push_back(MetricEntry{3, Phase::gen_pretrain, 0.5, 0.25, 0.125, {{"val_cce", 0.3}}});
  st.last_losses["gen_fit"] = 0.7;
  save_checkpoint(dir / "a.ckpt", st);
  RunState back = load_checkpoint(dir / "a.ckpt", &cfg);
  EXPECT_EQ(back.iteration, 3);
  EXPECT_TRUE(same_params(back.gen.params(), st.gen.params()));
  EXPECT_TRUE(same_params(back.disc.params(), st.disc.params()));
  EXPECT_EQ(back.gen_opt.steps, st.gen_opt.steps);
  for (std::size_t i = 0; i < st.gen_opt.first.size(); ++i) {
    EXPECT_TRUE(back.gen_opt.first[i] == st.gen_opt.first[i]);
    EXPECT_TRUE(back.gen_opt.second[i] == st.gen_opt.second[i]);
  }
  ASSERT_EQ(back.history.size(), 1u);
  EXPECT_EQ(back.history[0].fn, 0.125);
  EXPECT_EQ(back.last_losses, st.last_losses);
  EXPECT_TRUE(back.gen.predict(b.images) == st.gen.predict(b.images));
  fs::remove_all(dir);
}

TEST(Checkpoint, MismatchAndCorruptionRefused) {
  const fs::path dir = scratch("bad");
  ExperimentConfig cfg = tiny_config();
  RunState st(cfg);
  save_checkpoint(dir / "a.ckpt", st);

  ExperimentConfig other = cfg;
  other.generator.growth_rate = 6;
  EXPECT_THROW(load_checkpoint(dir / "a.ckpt", &other), CheckpointError);
  other = cfg;
  other.schedule.total_iters = 90;
  EXPECT_THROW(load_checkpoint(dir / "a.ckpt", &other), CheckpointError);
  other.generator.levels = 2;
  other.generator.convs_per_block = {2, 3};
  Generator<float> shallow(other.generator, 1);
  EXPECT_THROW(load_generator_weights(dir / "a.ckpt", shallow), CheckpointError);

  std::string bytes = read_file(dir / "a.ckpt");
  std::string flipped = bytes;
  flipped[bytes.size() / 2] ^= 0x10;
  write_file_atomic(dir / "flip.ckpt", flipped);
  EXPECT_THROW(load_checkpoint(dir / "flip.ckpt"), CheckpointError);
  write_file_atomic(dir / "short.ckpt", bytes.substr(0, bytes.size() / 3));
  EXPECT_THROW(load_checkpoint(dir / "short.ckpt"), CheckpointError);
  EXPECT_THROW(load_checkpoint(dir / "missing.ckpt"), CheckpointError);
  fs::remove_all(dir);
}

TEST(Checkpoint, KilledWriterLeavesPreviousFileIntact) {
  const fs::path dir = scratch("kill");
  ExperimentConfig cfg = tiny_config();
  RunState st(cfg);
  save_checkpoint(dir / "c.ckpt", st);
  Rng rng(5);
  for (int round = 0; round < 15; ++round) {
    const pid_t pid = ::fork();
    ASSERT_GE(pid, 0);
    if (pid == 0) {
      RunState mine(cfg);
      for (int i = 0;; ++i) {
        mine.iteration = i;
        save_checkpoint(dir / "c.ckpt", mine);
      }
    }
    ::usleep(static_cast<useconds_t>(rng.uniform_int(2000, 60000)));
    ::kill(pid, SIGKILL);
    int status = 0;
    ::waitpid(pid, &status, 0);
    EXPECT_NO_THROW(load_checkpoint(dir / "c.ckpt", &cfg)) << "round " << round;
  }
  fs::remove_all(dir);
}

TEST(Checkpoint, LatestByIteration) {
  const fs::path dir = scratch("latest");
  fs::create_directories(dir / "checkpoints");
  EXPECT_FALSE(latest_checkpoint(dir));
  for (const char* name : {"iter_50.ckpt", "iter_400.ckpt", "iter_100.ckpt", "notes.txt"})
    write_file_atomic(dir / "checkpoints" / name, "x");
  EXPECT_EQ(latest_checkpoint(dir)->filename(), "iter_400.ckpt");
  fs::remove_all(dir);
}

TEST(RunExperiment, MetricLogAndReport) {
  const fs::path dir = scratch("run");
  const auto recs = tiny_corpus();
  const ExperimentConfig cfg = tiny_config();
  const RunResult r = run_experiment(cfg, recs, dir / "a");
  EXPECT_FALSE(r.collapsed);
  EXPECT_EQ(r.iterations, 60);
  ASSERT_EQ(r.history.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(r.history[i].iteration, static_cast<std::int64_t>(10 * (i + 1)));
  EXPECT_EQ(r.history[1].phase, Phase::gen_pretrain);
  EXPECT_EQ(r.history[2].phase, Phase::disc_pretrain);
  EXPECT_EQ(alternation_accuracies(r).size(), 3u);
  EXPECT_TRUE(r.baseline_accuracy.has_value());
  EXPECT_TRUE(fs::exists(dir / "a" / "config.snapshot"));
  EXPECT_EQ(ExperimentConfig::load(dir / "a" / "config.snapshot").to_text(), cfg.to_text());
  for (int it = 10; it <= 60; it += 10) EXPECT_TRUE(fs::exists(dir / "a" / "checkpoints" / ("iter_" + std::to_string(it) + ".ckpt")));
  fs::remove_all(dir);
}

TEST(RunExperiment, DeterministicAndResumable) {
  const fs::path dir = scratch("repro");
  const auto recs = tiny_corpus();
  const ExperimentConfig cfg = tiny_config();
  run_experiment(cfg, recs, dir / "a");
  run_experiment(cfg, recs, dir / "b");
  EXPECT_EQ(read_file(dir / "a" / "metrics.jsonl"), read_file(dir / "b" / "metrics.jsonl"));

  run_experiment(cfg, recs, dir / "c", dir / "b" / "checkpoints" / "iter_30.ckpt");
  EXPECT_EQ(read_file(dir / "a" / "metrics.jsonl"), read_file(dir / "c" / "metrics.jsonl"));
  const RunState a = load_checkpoint(dir / "a" / "checkpoints" / "iter_60.ckpt");
  const RunState c = load_checkpoint(dir / "c" / "checkpoints" / "iter_60.ckpt");
  EXPECT_TRUE(same_params(a.gen.params(), c.gen.params()));
  EXPECT_TRUE(same_params(a.disc.params(), c.disc.params()));

  ExperimentConfig changed = cfg;
  changed.loss.lambda_adv = 0.5;
  EXPECT_THROW(run_experiment(changed, recs, dir / "d", dir / "b" / "checkpoints" / "iter_30.ckpt"), CheckpointError);
  fs::remove_all(dir);
}

TEST(RunExperiment, EarlyStopShiftsTheSchedule) {
  const fs::path dir = scratch("early");
  const auto recs = tiny_corpus();
  ExperimentConfig cfg = tiny_config();
  cfg.pretrain_early_stop = true;
  cfg.early_stop_window = 1;
  cfg.early_stop_tolerance = 10.0;  // any evaluation counts as converged
  cfg.schedule.gen_pretrain_iters = 40;
  cfg.schedule.total_iters = 80;
  const RunResult r = run_experiment(cfg, recs, dir);
  // stops at the second evaluation (iteration 20); everything after moves up by 20
  EXPECT_EQ(r.iterations, 60);
  EXPECT_EQ(r.history[2].phase, Phase::disc_pretrain);
  fs::remove_all(dir);
}

TEST(RunExperiment, NonFiniteLossMarksCollapse) {
  const fs::path dir = scratch("nan");
  const auto recs = tiny_corpus();
  ExperimentConfig cfg = tiny_config();
  cfg.gen_optimizer.lr_init = 1e30;
  const RunResult r = run_experiment(cfg, recs, dir);
  EXPECT_TRUE(r.collapsed);
  EXPECT_TRUE(fs::exists(dir / "abort.json"));
  EXPECT_NE(r.reason.find("iteration"), std::string::npos) << r.reason;
  fs::remove_all(dir);
}

TEST(Sweeps, LossMatrixAndTapAblation) {
  const fs::path dir = scratch("sweep");
  const auto recs = tiny_corpus();
  const ExperimentConfig cfg = tiny_config();
  const auto rows = run_loss_matrix(cfg, recs, dir / "matrix", {3});
  ASSERT_EQ(rows.size(), 4u);
  std::vector<std::string> labels;
  for (const auto& r : rows) labels.push_back(r.label);
  EXPECT_EQ(labels, (std::vector<std::string>{"ce/ce", "ce/emb", "emb/ce", "emb/emb"}));
  // every cell starts from the same pretrained generator
  const RunState p = load_checkpoint(*latest_checkpoint(dir / "matrix" / "seed_3" / "pretrain"));
  EXPECT_EQ(p.iteration, cfg.schedule.gen_pretrain_iters);
  const auto again = collect_matrix(dir / "matrix");
  ASSERT_EQ(again.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(again[i].stats.variance, rows[i].stats.variance);
  const std::string table = matrix_table(rows);
  for (const auto& l : labels) EXPECT_NE(table.find(l.substr(0, l.find('/'))), std::string::npos);
  EXPECT_EQ(stability_svg(rows), stability_svg(again));
  EXPECT_EQ(stability_svg(rows).rfind("<svg", 0), 0u);
  // a second call finds finished cells and does not retrain them
  const auto stamp = fs::last_write_time(dir / "matrix" / "seed_3" / "ce_ce" / "report.json");
  run_loss_matrix(cfg, recs, dir / "matrix", {3});
  EXPECT_EQ(fs::last_write_time(dir / "matrix" / "seed_3" / "ce_ce" / "report.json"), stamp);
  ExperimentConfig changed = cfg;
  changed.loss.lambda_adv = 0.5;
  EXPECT_THROW(run_loss_matrix(changed, recs, dir / "matrix", {3}), ConfigError);

  const auto taps = run_tap_ablation(cfg, recs, dir / "taps");
  ASSERT_EQ(taps.size(), 3u);
  std::set<std::string> names;
  for (std::size_t i = 0; i < taps.size(); ++i) {
    names.insert(taps[i].label);
    if (i) EXPECT_GE(taps[i - 1].report.accuracy, taps[i].report.accuracy);
  }
  EXPECT_EQ(names, (std::set<std::string>{"shallow", "middle", "deep"}));
  EXPECT_EQ(collect_taps(dir / "taps").size(), 3u);
  EXPECT_NE(tap_table(taps).find("deep"), std::string::npos);
  fs::remove_all(dir);
}
