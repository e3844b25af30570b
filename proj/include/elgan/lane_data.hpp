#pragma once

#include "elgan/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace elgan {

/// Malformed or inconsistent input data (label files, images, corpora).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Lane sampled at rows y0, y0 + stride, ... ; absent rows are std::nullopt.
/// Leading and trailing absent rows are trimmed by `trim()`.
struct Polyline {
  int y0 = 0;
  int stride = 20;
  std::vector<std::optional<double>> xs;

  int y_at(std::size_t i) const { return y0 + static_cast<int>(i) * stride; }
  int last_row() const { return y_at(xs.empty() ? 0 : xs.size() - 1); }
  std::size_t present_count() const;
  /// x at image row `y` if `y` is a sampled row with a present point.
  std::optional<double> at_row(int y) const;
  /// Linear interpolation between the nearest present samples around `y`.
  std::optional<double> interpolate(double y) const;
  /// x of the lowest present point (largest y); nullopt when empty.
  std::optional<double> bottom_x() const;
  void trim();

  friend bool operator==(const Polyline&, const Polyline&) = default;
};

using LaneSet = std::vector<Polyline>;

struct RasterizeSpec {
  double sigma = 1.0;
  int height = 128;
  int width = 128;

  void validate() const;
};

/// One image with its lanes and rasterized label. image: (1, 3, h, w); label: (1, 2, h, w)
/// with channel 0 = background and channel 1 = lane.
struct SceneRecord {
  Tensor<float> image;
  LaneSet lanes;
  Tensor<float> label;
  std::string source_id;
};

enum class Difficulty { easy, occluded };

std::string to_string(Difficulty d);
Difficulty parse_difficulty(const std::string& s);

/// Label map (1, 2, h, w). Each row's lane value is the max over lanes of a horizontal
/// Gaussian centred on the lane's interpolated x; background = 1 - lane.
Tensor<float> rasterize_lanes(const LaneSet& lanes, const RasterizeSpec& spec);

/// Synthetic road scene: 2-5 ordered quadratic lanes on a dark textured background.
/// `stride` is the polyline row spacing.
SceneRecord synth_scene(std::uint64_t seed, const RasterizeSpec& spec, Difficulty difficulty, int stride = 10);

/// Label-file entry before images are attached.
struct LabelRecord {
  LaneSet lanes;
  std::vector<int> h_samples;
  std::string raw_file;
};

/// Parses one JSON-lines label file. x == -2 means absent; x outside [0, width)
/// is also treated as absent. Lanes with fewer than two present points are dropped.
std::vector<LabelRecord> parse_label_file(const std::filesystem::path& path, int height, int width);
std::vector<LabelRecord> parse_label_text(const std::string& text, int height, int width);

/// Serializes one label record as a single JSON line (no trailing newline).
std::string label_line(const LaneSet& lanes, const std::vector<int>& h_samples, const std::string& raw_file);

/// h_samples used when writing `lanes`: every multiple of the lanes' stride below `height`.
std::vector<int> default_h_samples(int height, int stride);

/// Binary 8-bit PPM (P6) I/O. Values are stored as round(v * 255) and read back as byte / 255.
void write_ppm(const std::filesystem::path& path, const Tensor<float>& image);
Tensor<float> read_ppm(const std::filesystem::path& path);
/// The value a [0, 1] intensity takes after an 8-bit round trip.
float quantize8(double v);

/// Writes `content` to `path` through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

/// Corpus directory: images/<id>.ppm and labels.jsonl.
void write_corpus(const std::filesystem::path& dir, const std::vector<SceneRecord>& records, int stride);
std::vector<SceneRecord> read_corpus(const std::filesystem::path& dir, double sigma = 1.0);

struct Batch {
  Tensor<float> images;  // (B, 3, h, w)
  Tensor<float> labels;  // (B, 2, h, w)
  std::vector<std::size_t> indices;
};

/// Epoch-wise seeded shuffles; batch k is a pure function of (seed, k).
/// The final partial batch of every epoch is dropped. `records` must outlive the sequence.
class BatchSequence {
 public:
  BatchSequence(const std::vector<SceneRecord>& records, std::size_t batch_size, std::uint64_t seed);

  std::size_t batches_per_epoch() const { return per_epoch_; }
  std::vector<std::size_t> permutation(std::uint64_t epoch) const;
  std::vector<std::size_t> indices(std::uint64_t k) const;
  Batch batch(std::uint64_t k) const;

 private:
  const std::vector<SceneRecord>* records_;
  std::size_t batch_size_;
  std::uint64_t seed_;
  std::size_t per_epoch_;
};

/// Stacks the records at `indices` into one batch.
Batch stack_records(const std::vector<SceneRecord>& records, const std::vector<std::size_t>& indices);

}  // namespace elgan
