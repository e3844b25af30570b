#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace elgan {

/// Raised for invalid architecture / experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Nonlinearity { relu, elu };

std::string to_string(Nonlinearity n);
Nonlinearity parse_nonlinearity(const std::string& s);

/// Dense-block encoder-decoder. The last entry of `convs_per_block` is the
/// bottleneck; the others are mirrored on the down and up paths, so there are
/// `levels - 1` downsampling transitions.
struct GeneratorSpec {
  int levels = 3;
  std::vector<int> convs_per_block{2, 3, 4};
  int growth_rate = 8;
  int stem_channels = 16;
  double dropout_rate = 0.1;
  Nonlinearity nonlinearity = Nonlinearity::relu;
  std::string init_scheme = "he";
  int num_classes = 2;
  int input_channels = 3;

  static GeneratorSpec desk();
  static GeneratorSpec paper();

  void validate() const;
  int transitions() const { return levels - 1; }
  /// Number of 3x3 convolutions inside dense blocks (down + bottleneck + up).
  int dense_conv_count() const;
  std::string serialize() const;

  friend bool operator==(const GeneratorSpec&, const GeneratorSpec&) = default;
};

/// Two-headed DenseNet: image and map heads run separately through
/// `join_after_block` blocks, are concatenated, then share the remaining blocks.
/// Embedding taps are dense-block outputs (1-based block index).
struct DiscriminatorSpec {
  int blocks = 4;
  std::vector<int> convs_per_block{1, 2, 3, 4};
  int growth_rate = 4;
  int join_after_block = 2;
  int stem_channels = 8;
  Nonlinearity nonlinearity = Nonlinearity::elu;
  std::vector<int> taps{2, 3, 4};  // shallow, middle, deep
  int embedding_tap = 4;
  int image_channels = 3;
  int map_channels = 2;

  static DiscriminatorSpec desk();
  static DiscriminatorSpec paper();

  void validate() const;
  int transitions() const { return blocks - 1; }
  /// Downsampling transitions applied before the output of block `tap`.
  int transitions_before(int tap) const { return tap - 1; }
  int dense_conv_count() const;
  std::string serialize() const;

  friend bool operator==(const DiscriminatorSpec&, const DiscriminatorSpec&) = default;
};

/// FNV-1a 64-bit hash, used for spec fingerprints and checkpoint integrity.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 0xcbf29ce484222325ULL);
inline std::uint64_t fnv1a(const std::string& s) { return fnv1a(s.data(), s.size()); }

}  // namespace elgan
