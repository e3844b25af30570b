#pragma once

#include "elgan/lane_postprocess.hpp"
#include "elgan/losses.hpp"
#include "elgan/specs.hpp"

#include <cstdint>
#include <filesystem>
#include <string>

namespace elgan {

enum class Phase { gen_pretrain, disc_pretrain, gen, disc };
enum class PhaseOrder { gen_first, disc_first };

std::string to_string(Phase p);
std::string to_string(PhaseOrder o);
PhaseOrder parse_phase_order(const std::string& s);

struct TrainSchedule {
  std::int64_t gen_pretrain_iters = 0;
  std::int64_t disc_pretrain_iters = 0;
  std::int64_t total_iters = 0;  // includes both pretraining stages
  std::int64_t gen_phase_len = 300;
  std::int64_t disc_phase_len = 200;
  PhaseOrder phase_order = PhaseOrder::gen_first;
  std::int64_t checkpoint_every = 10000;

  void validate() const;
};

enum class OptimizerKind { adam, sgd };

std::string to_string(OptimizerKind k);
OptimizerKind parse_optimizer(const std::string& s);

struct OptimizerPolicy {
  OptimizerKind kind = OptimizerKind::adam;
  double momentum = 0.9;  // Adam beta1, or SGD heavy-ball momentum (0 = vanilla)
  double lr_init = 5e-4;
  double lr_decay_power = 0.99;
  std::int64_t lr_decay_interval = 200;
  double l2_scale = 1e-4;
  double adam_beta2 = 0.999;
  double adam_epsilon = 1e-8;

  void validate(const std::string& who) const;
};

/// Every tunable of a training run. Serialized as flat `key = value` lines.
struct ExperimentConfig {
  std::uint64_t seed = 1;

  // data
  double sigma = 1.0;
  int label_stride = 10;
  int val_count = 20;
  int batch_size = 4;

  GeneratorSpec generator = GeneratorSpec::desk();
  DiscriminatorSpec discriminator = DiscriminatorSpec::desk();
  LossSelection loss;
  TrainSchedule schedule;
  OptimizerPolicy gen_optimizer;
  OptimizerPolicy disc_optimizer;

  // generator pretraining early stop: relative validation-cce gain below
  // `early_stop_tolerance` across `early_stop_window` evaluations
  bool pretrain_early_stop = true;
  int early_stop_window = 5;
  double early_stop_tolerance = 1e-3;

  // collapse detection
  double collapse_fraction = 0.05;
  int collapse_patience = 3;

  // post-processing used for validation metrics
  ExtractOptions post;

  // optional checkpoint whose generator weights replace the seeded initialization
  std::string init_generator;

  static ExperimentConfig desk();
  static ExperimentConfig paper();

  void validate() const;
  std::string to_text() const;
  static ExperimentConfig from_text(const std::string& text, const ExperimentConfig& base = desk());
  static ExperimentConfig load(const std::filesystem::path& path);

  /// Hash of the architecture and loss fields that a checkpoint must match.
  std::uint64_t spec_fingerprint() const;
  /// Hash of the whole serialized configuration.
  std::uint64_t config_fingerprint() const;
};

/// Applies one `key=value` assignment; unknown keys and malformed values throw ConfigError.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);

}  // namespace elgan
