#pragma once

#include "elgan/config.hpp"
#include "elgan/lane_data.hpp"
#include "elgan/lane_eval.hpp"
#include "elgan/losses.hpp"
#include "elgan/networks.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace elgan {

/// Raised when a loss turns non-finite; the message carries the diagnostic dump.
class NonFiniteLoss : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised for unreadable, corrupt or mismatched checkpoint files.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// lr_init * power^(iteration / interval), real-valued exponent.
double lr_at(const OptimizerPolicy& policy, std::int64_t iteration);

/// Pretraining first (generator, then discriminator), then the cyclic alternation.
Phase phase_of(const TrainSchedule& schedule, std::int64_t iteration);

inline bool is_generator_phase(Phase p) { return p == Phase::gen || p == Phase::gen_pretrain; }

/// Moment buffers of one network's optimizer. `steps` counts updates applied and
/// also drives that network's learning-rate decay.
template <typename Scalar>
struct OptimizerState {
  std::int64_t steps = 0;
  std::vector<Tensor<Scalar>> first;
  std::vector<Tensor<Scalar>> second;

  void reset(const ParameterSet<Scalar>& params) {
    steps = 0;
    first.clear();
    second.clear();
    for (const auto& p : params) {
      first.emplace_back(p.value.shape());
      second.emplace_back(p.value.shape());
    }
  }
};

/// One update of every parameter from its accumulated gradient. L2 regularization
/// (l2_scale/2 * ||w||^2 on decay parameters) is folded into the gradient.
template <typename Scalar>
void apply_update(ParameterSet<Scalar>& params, OptimizerState<Scalar>& state, const OptimizerPolicy& policy) {
  if (state.first.size() != params.size()) state.reset(params);
  const double lr = lr_at(policy, state.steps);
  const auto l2 = static_cast<Scalar>(policy.l2_scale);
  const auto b1 = static_cast<Scalar>(policy.momentum);
  const auto b2 = static_cast<Scalar>(policy.adam_beta2);
  const double t = static_cast<double>(state.steps + 1);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    auto& w = p.value.array();
    auto& g = p.grad.array();
    if (p.decay && l2 != Scalar(0)) g += l2 * w;
    auto& m = state.first[i].array();
    if (policy.kind == OptimizerKind::adam) {
      auto& v = state.second[i].array();
      m = b1 * m + (Scalar(1) - b1) * g;
      v = b2 * v + (Scalar(1) - b2) * g.square();
      const auto c1 = static_cast<Scalar>(lr / (1.0 - std::pow(policy.momentum, t)));
      const auto c2 = static_cast<Scalar>(1.0 / (1.0 - std::pow(policy.adam_beta2, t)));
      const auto eps = static_cast<Scalar>(policy.adam_epsilon);
      w -= c1 * m / ((c2 * v).sqrt() + eps);
    } else if (policy.momentum > 0.0) {
      m = b1 * m + g;
      w -= static_cast<Scalar>(lr) * m;
    } else {
      w -= static_cast<Scalar>(lr) * g;
    }
  }
  ++state.steps;
}

struct MetricEntry {
  std::int64_t iteration = 0;
  Phase phase = Phase::gen_pretrain;
  double accuracy = 0.0;
  double fp = 0.0;
  double fn = 0.0;
  std::map<std::string, double> losses;
};

struct StepMetrics {
  std::int64_t iteration = 0;  // value after the step
  Phase phase = Phase::gen_pretrain;
  std::map<std::string, double> losses;
};

/// Everything needed to continue a run exactly. Batch order and dropout masks are
/// pure functions of (seed, iteration), so no generator state beyond the counters
/// is carried.
struct RunState {
  ExperimentConfig config;
  TrainSchedule schedule;  // effective schedule (pretraining may stop early)
  Generator<float> gen;
  Discriminator<float> disc;
  OptimizerState<float> gen_opt;
  OptimizerState<float> disc_opt;
  std::int64_t iteration = 0;
  std::vector<MetricEntry> history;
  std::map<std::string, double> last_losses;
  std::optional<double> baseline_accuracy;
  int collapse_streak = 0;
  bool collapsed = false;
  std::string collapse_reason;
  std::vector<double> pretrain_val_cce;

  explicit RunState(const ExperimentConfig& cfg);

  std::int64_t pretrain_end() const { return schedule.gen_pretrain_iters + schedule.disc_pretrain_iters; }
  bool done() const { return collapsed || iteration >= schedule.total_iters; }
};

/// One optimizer step of the network that owns the current phase. Generator
/// pretraining uses the fitness term only.
StepMetrics train_step(RunState& state, const Batch& batch);

/// Prediction on `records`, basic++ lanes and image-averaged lane metrics, plus the
/// mean validation cce under key "val_cce".
MetricEntry evaluate_generator(Generator<float>& gen, const std::vector<SceneRecord>& records,
                               const ExperimentConfig& cfg);

void save_checkpoint(const std::filesystem::path& path, const RunState& state);
/// Loads and verifies integrity and version. With `expected` given, the spec and
/// config fingerprints must match it.
RunState load_checkpoint(const std::filesystem::path& path, const ExperimentConfig* expected = nullptr);
/// Copies the generator weights of a checkpoint into `gen` (architectures must match).
void load_generator_weights(const std::filesystem::path& path, Generator<float>& gen);

/// Highest-iteration checkpoints/iter_N.ckpt under a run directory.
std::optional<std::filesystem::path> latest_checkpoint(const std::filesystem::path& run_dir);

struct RunResult {
  std::filesystem::path run_dir;
  bool collapsed = false;
  std::string reason;
  std::int64_t iterations = 0;
  std::optional<double> baseline_accuracy;
  std::vector<MetricEntry> history;
  EvalReport final_report;
};

/// Splits a corpus into (train, validation); validation is the last val_count records.
std::pair<std::vector<SceneRecord>, std::vector<SceneRecord>> split_corpus(std::vector<SceneRecord> records,
                                                                           const ExperimentConfig& cfg);

/// Full run into `run_dir`: config.snapshot, checkpoints/, metrics.jsonl, report.json.
/// With `resume` the run continues from that checkpoint. Collapse ends the run early
/// and is reported, not thrown.
RunResult run_experiment(const ExperimentConfig& cfg, const std::vector<SceneRecord>& records,
                         const std::filesystem::path& run_dir,
                         const std::optional<std::filesystem::path>& resume = std::nullopt);

/// Reads report.json and metrics.jsonl of a finished run directory.
RunResult read_run(const std::filesystem::path& run_dir);

/// Checkpoint accuracies after pretraining (the alternation phase).
std::vector<double> alternation_accuracies(const RunResult& run);

struct MatrixCell {
  std::string label;  // "<gen>/<disc>"
  AdvLoss gen = AdvLoss::cross_entropy;
  AdvLoss disc = AdvLoss::cross_entropy;
};

/// ce/ce, ce/emb, emb/ce, emb/emb.
std::vector<MatrixCell> matrix_cells();

struct MatrixRow {
  std::string label;
  std::uint64_t seed = 0;
  StabilityStats stats;
  bool collapsed = false;
};

/// Runs the 2x2 loss matrix per seed: the generator is pretrained once per seed and
/// shared by the four cells. Finished cells are skipped, partial ones resumed.
std::vector<MatrixRow> run_loss_matrix(const ExperimentConfig& base, const std::vector<SceneRecord>& records,
                                       const std::filesystem::path& out_dir, const std::vector<std::uint64_t>& seeds);

struct TapRow {
  std::string label;  // shallow / middle / deep
  int tap = 0;
  EvalReport report;
  bool collapsed = false;
};

/// One embedding-loss run per tap in the discriminator tap set; rows ordered by
/// descending final accuracy.
std::vector<TapRow> run_tap_ablation(const ExperimentConfig& base, const std::vector<SceneRecord>& records,
                                     const std::filesystem::path& out_dir);

/// Stability table text: per cell mean/var/max (averaged over seeds, in percent) and
/// the per-seed comparison of embedding- vs cross-entropy-generator variance.
std::string matrix_table(const std::vector<MatrixRow>& rows);
std::string tap_table(const std::vector<TapRow>& rows);

/// Rebuilds matrix rows from the run directories under `out_dir` without training.
std::vector<MatrixRow> collect_matrix(const std::filesystem::path& out_dir);
std::vector<TapRow> collect_taps(const std::filesystem::path& out_dir);

/// Mean +/- std of checkpoint accuracy per matrix cell as a deterministic SVG.
std::string stability_svg(const std::vector<MatrixRow>& rows);

}  // namespace elgan
