#pragma once

#include "elgan/lane_data.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

namespace elgan {

struct BinaryMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;  // row-major, 0 or 1

  BinaryMap() = default;
  BinaryMap(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0) {}

  bool at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c] != 0; }
  void set(int r, int c, bool v = true) { values[static_cast<std::size_t>(r) * width + c] = v ? 1 : 0; }

  friend bool operator==(const BinaryMap&, const BinaryMap&) = default;
};

/// Pixels as (row, col), sorted row-major.
struct Component {
  int id = 0;
  std::vector<std::pair<int, int>> pixels;
};

enum class PostprocessVariant { basic, basicpp };

std::string to_string(PostprocessVariant v);
PostprocessVariant parse_variant(const std::string& s);

/// Lane probability plane of a prediction: the last channel of sample 0.
/// Accepts (1, 1, h, w) lane maps and (1, C, h, w) class maps.
const float* lane_plane(const Tensor<float>& pred);

/// true iff lane value > threshold. threshold must lie in [0, 1).
BinaryMap binarize(const Tensor<float>& pred, double threshold);

/// 8-connected labeling; ids follow the row-major position of each component's first pixel.
std::vector<Component> connected_components(const BinaryMap& bin);

/// Mean column per sampled row (multiples of `stride` inside the component's row span).
Polyline component_to_polyline_basic(const Component& comp, int stride);

/// Maximal horizontal runs of one component row.
struct Run {
  int row = 0;
  int begin = 0;  // inclusive
  int end = 0;    // inclusive
};

/// Splits a component whose rows contain several runs into vertical run chains.
/// A chain's run links to the next-row run with the largest column overlap (touching
/// diagonally counts as overlap 0; ties go to the leftmost run). When several chains
/// claim the same run, its pixels are divided by nearest chain centre. Components with
/// a single run per row are returned unchanged.
std::vector<Component> split_multirun(const Component& comp);

struct ExtractOptions {
  PostprocessVariant variant = PostprocessVariant::basicpp;
  double threshold = 0.5;
  int stride = 10;
  std::size_t min_points = 3;
};

/// binarize -> components -> (split) -> polylines, dropping polylines with fewer than
/// min_points present points, sorted by bottom x.
LaneSet extract_lanes(const Tensor<float>& pred, const ExtractOptions& opt);

/// Greyscale PFM ("Pf", little-endian, rows stored bottom to top) of a single plane.
void write_pfm(const std::filesystem::path& path, const Tensor<float>& plane);
Tensor<float> read_pfm(const std::filesystem::path& path);

}  // namespace elgan
