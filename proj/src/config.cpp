#include "elgan/config.hpp"

#include "elgan/lane_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <functional>
#include <map>
#include <sstream>

namespace elgan {

std::string to_string(Phase p) {
  switch (p) {
    case Phase::gen_pretrain:
      return "gen_pretrain";
    case Phase::disc_pretrain:
      return "disc_pretrain";
    case Phase::gen:
      return "gen";
    case Phase::disc:
      return "disc";
  }
  return "?";
}

std::string to_string(PhaseOrder o) { return o == PhaseOrder::gen_first ? "gen_first" : "disc_first"; }

PhaseOrder parse_phase_order(const std::string& s) {
  if (s == "gen_first") return PhaseOrder::gen_first;
  if (s == "disc_first") return PhaseOrder::disc_first;
  throw ConfigError("unknown phase_order '" + s + "' (expected gen_first or disc_first)");
}

std::string to_string(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "adam") return OptimizerKind::adam;
  if (s == "sgd") return OptimizerKind::sgd;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam or sgd)");
}

void TrainSchedule::validate() const {
  if (gen_pretrain_iters < 0 || disc_pretrain_iters < 0 || total_iters < 0 || gen_phase_len < 0 ||
      disc_phase_len < 0)
    throw ConfigError("schedule: iteration counts must be >= 0");
  if (gen_phase_len + disc_phase_len < 1) throw ConfigError("schedule: gen_phase_len + disc_phase_len must be >= 1");
  if (checkpoint_every < 1) throw ConfigError("schedule: checkpoint_every must be >= 1");
}

void OptimizerPolicy::validate(const std::string& who) const {
  if (!(lr_init > 0.0)) throw ConfigError(who + ": lr must be > 0");
  if (!(lr_decay_power > 0.0 && lr_decay_power <= 1.0)) throw ConfigError(who + ": lr_decay_power must lie in (0, 1]");
  if (lr_decay_interval < 1) throw ConfigError(who + ": lr_decay_interval must be >= 1");
  if (!(l2_scale >= 0.0)) throw ConfigError(who + ": l2 must be >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError(who + ": momentum must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ConfigError(who + ": adam_beta2 must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) throw ConfigError(who + ": adam_epsilon must be > 0");
}

ExperimentConfig ExperimentConfig::desk() {
  ExperimentConfig c;
  c.schedule.gen_pretrain_iters = 600;
  c.schedule.disc_pretrain_iters = 100;
  c.schedule.total_iters = 1200;
  c.schedule.gen_phase_len = 30;
  c.schedule.disc_phase_len = 20;
  c.schedule.checkpoint_every = 50;
  c.disc_optimizer.kind = OptimizerKind::sgd;
  c.disc_optimizer.momentum = 0.0;
  c.disc_optimizer.lr_init = 1e-3;
  c.disc_optimizer.lr_decay_interval = 800;
  c.disc_optimizer.l2_scale = 1e-5;
  // the raw norm grows with the embedding size and swamps the fit term at this scale
  c.loss.emb_normalize = true;
  return c;
}

ExperimentConfig ExperimentConfig::paper() {
  ExperimentConfig c;
  c.label_stride = 20;
  c.val_count = 100;
  c.batch_size = 8;
  c.generator = GeneratorSpec::paper();
  c.discriminator = DiscriminatorSpec::paper();
  c.schedule.gen_pretrain_iters = 100000;
  c.schedule.disc_pretrain_iters = 10000;
  c.schedule.total_iters = 260000;
  c.schedule.gen_phase_len = 300;
  c.schedule.disc_phase_len = 200;
  c.schedule.checkpoint_every = 10000;
  c.post.stride = 20;
  c.disc_optimizer.kind = OptimizerKind::sgd;
  c.disc_optimizer.momentum = 0.0;
  c.disc_optimizer.lr_init = 1e-5;
  c.disc_optimizer.lr_decay_interval = 800;
  c.disc_optimizer.l2_scale = 1e-5;
  return c;
}

void ExperimentConfig::validate() const {
  if (!(sigma > 0.0)) throw ConfigError("sigma must be > 0");
  if (label_stride < 1) throw ConfigError("label_stride must be >= 1");
  if (val_count < 1) throw ConfigError("val_count must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  generator.validate();
  discriminator.validate();
  if (discriminator.map_channels != generator.num_classes)
    throw ConfigError("discriminator map channels must equal generator num_classes");
  if (discriminator.image_channels != generator.input_channels)
    throw ConfigError("discriminator image channels must equal generator input channels");
  loss.validate();
  schedule.validate();
  if (schedule.gen_pretrain_iters + schedule.disc_pretrain_iters > schedule.total_iters)
    throw ConfigError("schedule: pretraining exceeds total_iters");
  gen_optimizer.validate("gen optimizer");
  disc_optimizer.validate("disc optimizer");
  if (early_stop_window < 1) throw ConfigError("early_stop_window must be >= 1");
  if (!(early_stop_tolerance >= 0.0)) throw ConfigError("early_stop_tolerance must be >= 0");
  if (!(collapse_fraction >= 0.0)) throw ConfigError("collapse_fraction must be >= 0");
  if (collapse_patience < 1) throw ConfigError("collapse_patience must be >= 1");
  if (!(post.threshold >= 0.0 && post.threshold < 1.0)) throw ConfigError("post_threshold must lie in [0, 1)");
  if (post.stride < 1) throw ConfigError("post_stride must be >= 1");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  // shortest text that parses back to the same double
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::string fmt(bool v) { return v ? "true" : "false"; }

std::string fmt(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("config key '" + key + "': expected an integer, got '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected a real number, got '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected true or false, got '" + v + "'");
}

std::vector<int> parse_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int<int>(key, trim(item)));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

struct Field {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, const std::string&, const std::string&)> set;
};

#define ELGAN_INT(getter)                                                                                       \
  Field {                                                                                                       \
    [](const ExperimentConfig& c) { return std::to_string(c.getter); },                                        \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) {                                  \
          c.getter = parse_int<std::remove_cvref_t<decltype(c.getter)>>(k, v);                                 \
        }                                                                                                       \
  }
#define ELGAN_REAL(getter)                                                                                      \
  Field {                                                                                                       \
    [](const ExperimentConfig& c) { return fmt(c.getter); },                                                   \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.getter = parse_real(k, v); } \
  }
#define ELGAN_BOOL(getter)                                                                                      \
  Field {                                                                                                       \
    [](const ExperimentConfig& c) { return fmt(c.getter); },                                                   \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.getter = parse_bool(k, v); } \
  }
#define ELGAN_LIST(getter)                                                                                      \
  Field {                                                                                                       \
    [](const ExperimentConfig& c) { return fmt(c.getter); },                                                   \
        [](ExperimentConfig& c, const std::string& k, const std::string& v) { c.getter = parse_list(k, v); } \
  }
#define ELGAN_ENUM(getter, parser)                                                                              \
  Field {                                                                                                       \
    [](const ExperimentConfig& c) { return to_string(c.getter); },                                             \
        [](ExperimentConfig& c, const std::string&, const std::string& v) { c.getter = parser(v); }           \
  }

// Ordered so that to_text() groups related keys.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"seed", ELGAN_INT(seed)},
      {"sigma", ELGAN_REAL(sigma)},
      {"label_stride", ELGAN_INT(label_stride)},
      {"val_count", ELGAN_INT(val_count)},
      {"batch_size", ELGAN_INT(batch_size)},
      {"gen_levels", ELGAN_INT(generator.levels)},
      {"gen_convs", ELGAN_LIST(generator.convs_per_block)},
      {"gen_growth", ELGAN_INT(generator.growth_rate)},
      {"gen_stem", ELGAN_INT(generator.stem_channels)},
      {"gen_dropout", ELGAN_REAL(generator.dropout_rate)},
      {"gen_nonlinearity", ELGAN_ENUM(generator.nonlinearity, parse_nonlinearity)},
      {"gen_init", Field{[](const ExperimentConfig& c) { return c.generator.init_scheme; },
                         [](ExperimentConfig& c, const std::string&, const std::string& v) { c.generator.init_scheme = v; }}},
      {"gen_classes", ELGAN_INT(generator.num_classes)},
      {"gen_input_channels", ELGAN_INT(generator.input_channels)},
      {"disc_blocks", ELGAN_INT(discriminator.blocks)},
      {"disc_convs", ELGAN_LIST(discriminator.convs_per_block)},
      {"disc_growth", ELGAN_INT(discriminator.growth_rate)},
      {"disc_join", ELGAN_INT(discriminator.join_after_block)},
      {"disc_stem", ELGAN_INT(discriminator.stem_channels)},
      {"disc_nonlinearity", ELGAN_ENUM(discriminator.nonlinearity, parse_nonlinearity)},
      {"disc_taps", ELGAN_LIST(discriminator.taps)},
      {"disc_embedding_tap", ELGAN_INT(discriminator.embedding_tap)},
      {"disc_image_channels", ELGAN_INT(discriminator.image_channels)},
      {"disc_map_channels", ELGAN_INT(discriminator.map_channels)},
      {"gen_adv_loss", ELGAN_ENUM(loss.generator_adv, parse_adv_loss)},
      {"disc_loss", ELGAN_ENUM(loss.discriminator, parse_adv_loss)},
      {"lambda_adv", ELGAN_REAL(loss.lambda_adv)},
      {"emb_normalize", ELGAN_BOOL(loss.emb_normalize)},
      {"gen_pretrain_iters", ELGAN_INT(schedule.gen_pretrain_iters)},
      {"disc_pretrain_iters", ELGAN_INT(schedule.disc_pretrain_iters)},
      {"total_iters", ELGAN_INT(schedule.total_iters)},
      {"gen_phase_len", ELGAN_INT(schedule.gen_phase_len)},
      {"disc_phase_len", ELGAN_INT(schedule.disc_phase_len)},
      {"phase_order", ELGAN_ENUM(schedule.phase_order, parse_phase_order)},
      {"checkpoint_every", ELGAN_INT(schedule.checkpoint_every)},
      {"gen_optimizer", ELGAN_ENUM(gen_optimizer.kind, parse_optimizer)},
      {"gen_momentum", ELGAN_REAL(gen_optimizer.momentum)},
      {"gen_lr", ELGAN_REAL(gen_optimizer.lr_init)},
      {"gen_lr_decay_power", ELGAN_REAL(gen_optimizer.lr_decay_power)},
      {"gen_lr_decay_interval", ELGAN_INT(gen_optimizer.lr_decay_interval)},
      {"gen_l2", ELGAN_REAL(gen_optimizer.l2_scale)},
      {"gen_adam_beta2", ELGAN_REAL(gen_optimizer.adam_beta2)},
      {"gen_adam_epsilon", ELGAN_REAL(gen_optimizer.adam_epsilon)},
      {"disc_optimizer", ELGAN_ENUM(disc_optimizer.kind, parse_optimizer)},
      {"disc_momentum", ELGAN_REAL(disc_optimizer.momentum)},
      {"disc_lr", ELGAN_REAL(disc_optimizer.lr_init)},
      {"disc_lr_decay_power", ELGAN_REAL(disc_optimizer.lr_decay_power)},
      {"disc_lr_decay_interval", ELGAN_INT(disc_optimizer.lr_decay_interval)},
      {"disc_l2", ELGAN_REAL(disc_optimizer.l2_scale)},
      {"disc_adam_beta2", ELGAN_REAL(disc_optimizer.adam_beta2)},
      {"disc_adam_epsilon", ELGAN_REAL(disc_optimizer.adam_epsilon)},
      {"pretrain_early_stop", ELGAN_BOOL(pretrain_early_stop)},
      {"early_stop_window", ELGAN_INT(early_stop_window)},
      {"early_stop_tolerance", ELGAN_REAL(early_stop_tolerance)},
      {"collapse_fraction", ELGAN_REAL(collapse_fraction)},
      {"collapse_patience", ELGAN_INT(collapse_patience)},
      {"post_variant", ELGAN_ENUM(post.variant, parse_variant)},
      {"post_threshold", ELGAN_REAL(post.threshold)},
      {"post_stride", ELGAN_INT(post.stride)},
      {"post_min_points", ELGAN_INT(post.min_points)},
      {"init_generator", Field{[](const ExperimentConfig& c) { return c.init_generator; },
                               [](ExperimentConfig& c, const std::string&, const std::string& v) { c.init_generator = v; }}},
  };
  return table;
}

}  // namespace

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& [name, field] : fields())
    if (name == key) {
      try {
        field.set(cfg, key, value);
      } catch (const ConfigError&) {
        throw;
      } catch (const std::exception& e) {
        throw ConfigError("config key '" + key + "': " + e.what());
      }
      return;
    }
  throw ConfigError("unknown config key '" + key + "'");
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& [name, field] : fields()) out += name + " = " + field.get(*this) + "\n";
  return out;
}

ExperimentConfig ExperimentConfig::from_text(const std::string& text, const ExperimentConfig& base) {
  ExperimentConfig cfg = base;
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string s = trim(raw.substr(0, raw.find('#')));
    if (s.empty()) continue;
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line) + ": expected key = value");
    const std::string key = trim(s.substr(0, eq));
    try {
      set_config_value(cfg, key, trim(s.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError("config line " + std::to_string(line) + ": " + e.what());
    }
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const DataError& e) {
    throw ConfigError(e.what());
  }
  return from_text(text);
}

std::uint64_t ExperimentConfig::spec_fingerprint() const {
  return fnv1a(generator.serialize() + "|" + discriminator.serialize() + "|" + to_string(loss.generator_adv) + "," +
               to_string(loss.discriminator) + "," + fmt(loss.lambda_adv) + "," + fmt(loss.emb_normalize));
}

std::uint64_t ExperimentConfig::config_fingerprint() const { return fnv1a(to_text()); }

}  // namespace elgan
