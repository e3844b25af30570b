#include "elgan/specs.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace elgan {

std::string to_string(Nonlinearity n) { return n == Nonlinearity::relu ? "relu" : "elu"; }

Nonlinearity parse_nonlinearity(const std::string& s) {
  if (s == "relu") return Nonlinearity::relu;
  if (s == "elu") return Nonlinearity::elu;
  throw ConfigError("unknown nonlinearity '" + s + "'");
}

namespace {

std::string join(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

}  // namespace

GeneratorSpec GeneratorSpec::desk() { return GeneratorSpec{}; }

GeneratorSpec GeneratorSpec::paper() {
  GeneratorSpec s;
  s.levels = 7;
  s.convs_per_block = {1, 2, 3, 4, 6, 8, 8};
  s.growth_rate = 18;
  s.stem_channels = 48;
  return s;
}

void GeneratorSpec::validate() const {
  if (levels < 1) throw ConfigError("generator: levels must be >= 1");
  if (static_cast<int>(convs_per_block.size()) != levels)
    throw ConfigError("generator: convs_per_block has " + std::to_string(convs_per_block.size()) +
                      " entries, expected levels = " + std::to_string(levels));
  for (int c : convs_per_block)
    if (c < 1) throw ConfigError("generator: every dense block needs >= 1 convolution");
  if (growth_rate < 1) throw ConfigError("generator: growth_rate must be >= 1");
  if (stem_channels < 1) throw ConfigError("generator: stem_channels must be >= 1");
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("generator: dropout_rate must be in [0, 1)");
  if (init_scheme != "he") throw ConfigError("generator: unsupported init scheme '" + init_scheme + "'");
  if (num_classes < 2) throw ConfigError("generator: num_classes must be >= 2");
  if (input_channels < 1) throw ConfigError("generator: input_channels must be >= 1");
}

int GeneratorSpec::dense_conv_count() const {
  const int mirrored = std::accumulate(convs_per_block.begin(), convs_per_block.end() - 1, 0);
  return 2 * mirrored + convs_per_block.back();
}

std::string GeneratorSpec::serialize() const {
  std::ostringstream os;
  os << "levels=" << levels << ";convs=" << join(convs_per_block) << ";growth=" << growth_rate
     << ";stem=" << stem_channels << ";dropout=" << dropout_rate << ";act=" << to_string(nonlinearity)
     << ";init=" << init_scheme << ";classes=" << num_classes << ";in=" << input_channels;
  return os.str();
}

DiscriminatorSpec DiscriminatorSpec::desk() { return DiscriminatorSpec{}; }

DiscriminatorSpec DiscriminatorSpec::paper() {
  DiscriminatorSpec s;
  s.blocks = 7;
  s.convs_per_block = {1, 2, 3, 4, 6, 8, 8};
  s.growth_rate = 8;
  s.stem_channels = 16;
  s.taps = {3, 5, 7};
  s.embedding_tap = 7;
  return s;
}

void DiscriminatorSpec::validate() const {
  if (blocks < 2) throw ConfigError("discriminator: blocks must be >= 2");
  if (static_cast<int>(convs_per_block.size()) != blocks)
    throw ConfigError("discriminator: convs_per_block has " + std::to_string(convs_per_block.size()) +
                      " entries, expected blocks = " + std::to_string(blocks));
  for (int c : convs_per_block)
    if (c < 1) throw ConfigError("discriminator: every dense block needs >= 1 convolution");
  if (growth_rate < 1) throw ConfigError("discriminator: growth_rate must be >= 1");
  if (stem_channels < 1) throw ConfigError("discriminator: stem_channels must be >= 1");
  if (join_after_block < 1 || join_after_block >= blocks)
    throw ConfigError("discriminator: join_after_block must satisfy 1 <= join < blocks");
  if (taps.empty()) throw ConfigError("discriminator: empty tap set");
  for (int t : taps)
    if (t < 1 || t > blocks) throw ConfigError("discriminator: tap " + std::to_string(t) + " outside 1..blocks");
  if (std::find(taps.begin(), taps.end(), embedding_tap) == taps.end())
    throw ConfigError("discriminator: embedding_tap " + std::to_string(embedding_tap) + " not in tap set");
  if (image_channels < 1 || map_channels < 1) throw ConfigError("discriminator: channel counts must be >= 1");
}

int DiscriminatorSpec::dense_conv_count() const {
  return std::accumulate(convs_per_block.begin(), convs_per_block.end(), 0);
}

std::string DiscriminatorSpec::serialize() const {
  std::ostringstream os;
  os << "blocks=" << blocks << ";convs=" << join(convs_per_block) << ";growth=" << growth_rate
     << ";join=" << join_after_block << ";stem=" << stem_channels << ";act=" << to_string(nonlinearity)
     << ";taps=" << join(taps) << ";tap=" << embedding_tap << ";image=" << image_channels
     << ";map=" << map_channels;
  return os.str();
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace elgan
