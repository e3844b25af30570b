#include "elgan/lane_postprocess.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <limits>
#include <map>

namespace elgan {

std::string to_string(PostprocessVariant v) { return v == PostprocessVariant::basic ? "basic" : "basicpp"; }

PostprocessVariant parse_variant(const std::string& s) {
  if (s == "basic") return PostprocessVariant::basic;
  if (s == "basicpp" || s == "basic++") return PostprocessVariant::basicpp;
  throw DataError("unknown post-processing variant '" + s + "' (expected basic or basicpp)");
}

const float* lane_plane(const Tensor<float>& pred) {
  const Shape s = pred.shape();
  if (s.n < 1 || s.c < 1) throw ShapeError("lane_plane: empty prediction " + s.str());
  return pred.plane_ptr(0, s.c - 1);
}

BinaryMap binarize(const Tensor<float>& pred, double threshold) {
  if (!(threshold >= 0.0 && threshold < 1.0)) throw DataError("binarize: threshold must lie in [0, 1)");
  const Shape s = pred.shape();
  BinaryMap out(static_cast<int>(s.h), static_cast<int>(s.w));
  const float* lane = lane_plane(pred);
  for (std::size_t i = 0; i < out.values.size(); ++i) out.values[i] = lane[i] > threshold ? 1 : 0;
  return out;
}

std::vector<Component> connected_components(const BinaryMap& bin) {
  std::vector<int> label(bin.values.size(), -1);
  std::vector<Component> out;
  std::vector<std::pair<int, int>> stack;
  for (int r = 0; r < bin.height; ++r)
    for (int c = 0; c < bin.width; ++c) {
      const std::size_t i = static_cast<std::size_t>(r) * bin.width + c;
      if (!bin.values[i] || label[i] >= 0) continue;
      Component comp;
      comp.id = static_cast<int>(out.size());
      label[i] = comp.id;
      stack.assign(1, {r, c});
      while (!stack.empty()) {
        const auto [pr, pc] = stack.back();
        stack.pop_back();
        comp.pixels.push_back({pr, pc});
        for (int dr = -1; dr <= 1; ++dr)
          for (int dc = -1; dc <= 1; ++dc) {
            const int nr = pr + dr, nc = pc + dc;
            if (nr < 0 || nr >= bin.height || nc < 0 || nc >= bin.width) continue;
            const std::size_t j = static_cast<std::size_t>(nr) * bin.width + nc;
            if (bin.values[j] && label[j] < 0) {
              label[j] = comp.id;
              stack.push_back({nr, nc});
            }
          }
      }
      std::sort(comp.pixels.begin(), comp.pixels.end());
      out.push_back(std::move(comp));
    }
  return out;
}

Polyline component_to_polyline_basic(const Component& comp, int stride) {
  if (stride < 1) throw DataError("polyline: stride must be >= 1");
  Polyline p;
  p.stride = stride;
  if (comp.pixels.empty()) return p;
  std::map<int, std::pair<double, int>> rows;  // row -> (column sum, count)
  for (const auto& [r, c] : comp.pixels) {
    auto& acc = rows[r];
    acc.first += c;
    acc.second += 1;
  }
  const int lo = rows.begin()->first, hi = rows.rbegin()->first;
  const int first = (lo + stride - 1) / stride * stride;
  p.y0 = first;
  for (int y = first; y <= hi; y += stride) {
    const auto it = rows.find(y);
    p.xs.push_back(it == rows.end() ? std::nullopt : std::optional<double>(it->second.first / it->second.second));
  }
  p.trim();
  return p;
}

namespace {

std::vector<std::vector<Run>> runs_by_row(const Component& comp) {
  std::vector<std::vector<Run>> rows;
  int current = std::numeric_limits<int>::min();
  for (const auto& [r, c] : comp.pixels) {
    if (r != current) {
      rows.emplace_back();
      current = r;
    }
    auto& row = rows.back();
    if (!row.empty() && row.back().end + 1 == c)
      row.back().end = c;
    else
      row.push_back({r, c, c});
  }
  return rows;
}

int overlap(const Run& a, const Run& b) { return std::min(a.end, b.end) - std::max(a.begin, b.begin) + 1; }

struct Chain {
  std::vector<Run> runs;
  bool open = true;
  double centre() const { return 0.5 * (runs.back().begin + runs.back().end); }
};

}  // namespace

std::vector<Component> split_multirun(const Component& comp) {
  const auto rows = runs_by_row(comp);
  const bool multi = std::any_of(rows.begin(), rows.end(), [](const auto& r) { return r.size() >= 2; });
  if (!multi) return {comp};

  std::vector<Chain> chains;
  for (std::size_t ri = 0; ri < rows.size(); ++ri) {
    const auto& row = rows[ri];
    // claims[k]: open chains whose best continuation is run k of this row.
    std::vector<std::vector<std::size_t>> claims(row.size());
    for (std::size_t ci = 0; ci < chains.size(); ++ci) {
      Chain& ch = chains[ci];
      if (!ch.open) continue;
      const Run& last = ch.runs.back();
      if (last.row + 1 != row.front().row) {
        ch.open = false;
        continue;
      }
      int best = -1;
      int best_overlap = -1;
      for (std::size_t k = 0; k < row.size(); ++k) {
        const int o = overlap(last, row[k]);
        if (o > best_overlap) {
          best_overlap = o;
          best = static_cast<int>(k);
        }
      }
      if (best < 0)
        ch.open = false;
      else
        claims[static_cast<std::size_t>(best)].push_back(ci);
    }
    for (std::size_t k = 0; k < row.size(); ++k) {
      const Run& run = row[k];
      auto& owners = claims[k];
      if (owners.empty()) {
        chains.push_back({{run}, true});
        continue;
      }
      if (owners.size() == 1) {
        chains[owners.front()].runs.push_back(run);
        continue;
      }
      // Shared run: each column goes to the chain with the nearest centre (ties: leftmost).
      std::sort(owners.begin(), owners.end(),
                [&](std::size_t a, std::size_t b) { return chains[a].centre() < chains[b].centre(); });
      std::vector<double> centres;
      for (std::size_t o : owners) centres.push_back(chains[o].centre());
      std::vector<Run> parts(owners.size(), Run{run.row, 0, -1});
      for (int c = run.begin; c <= run.end; ++c) {
        std::size_t pick = 0;
        for (std::size_t j = 1; j < centres.size(); ++j)
          if (std::abs(c - centres[j]) < std::abs(c - centres[pick])) pick = j;
        Run& part = parts[pick];
        if (part.end < part.begin) part.begin = c;
        part.end = c;
      }
      for (std::size_t j = 0; j < owners.size(); ++j) {
        if (parts[j].end >= parts[j].begin)
          chains[owners[j]].runs.push_back(parts[j]);
        else
          chains[owners[j]].open = false;
      }
    }
  }

  std::vector<Component> out;
  for (const auto& ch : chains) {
    Component c;
    for (const auto& run : ch.runs)
      for (int col = run.begin; col <= run.end; ++col) c.pixels.push_back({run.row, col});
    std::sort(c.pixels.begin(), c.pixels.end());
    out.push_back(std::move(c));
  }
  std::sort(out.begin(), out.end(), [](const Component& a, const Component& b) { return a.pixels < b.pixels; });
  for (std::size_t i = 0; i < out.size(); ++i) out[i].id = static_cast<int>(i);
  return out;
}

LaneSet extract_lanes(const Tensor<float>& pred, const ExtractOptions& opt) {
  const auto keep = [&](const std::vector<Component>& comps) {
    LaneSet lanes;
    for (const auto& c : comps) {
      Polyline p = component_to_polyline_basic(c, opt.stride);
      if (p.present_count() >= opt.min_points) lanes.push_back(std::move(p));
    }
    return lanes;
  };
  LaneSet out;
  for (const auto& comp : connected_components(binarize(pred, opt.threshold))) {
    LaneSet whole = keep({comp});
    if (opt.variant == PostprocessVariant::basicpp) {
      LaneSet parts = keep(split_multirun(comp));
      // Splitting must never lose a lane that the unsplit component produced.
      if (parts.size() >= whole.size()) whole = std::move(parts);
    }
    for (auto& p : whole) out.push_back(std::move(p));
  }
  std::stable_sort(out.begin(), out.end(), [](const Polyline& a, const Polyline& b) {
    return a.bottom_x().value_or(0.0) < b.bottom_x().value_or(0.0);
  });
  return out;
}

void write_pfm(const std::filesystem::path& path, const Tensor<float>& plane) {
  const Shape s = plane.shape();
  if (s.n != 1 || s.c != 1) throw ShapeError("write_pfm: expected a (1, 1, h, w) plane, got " + s.str());
  std::string out = "Pf\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n-1.0\n";
  const std::size_t header = out.size();
  out.resize(header + sizeof(float) * static_cast<std::size_t>(s.plane()));
  char* dst = out.data() + header;
  for (Index y = 0; y < s.h; ++y) {
    const float* row = plane.data() + (s.h - 1 - y) * s.w;
    for (Index x = 0; x < s.w; ++x) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(row[x]);
      if constexpr (std::endian::native == std::endian::big) bits = __builtin_bswap32(bits);
      std::memcpy(dst, &bits, sizeof(bits));
      dst += sizeof(bits);
    }
  }
  write_file_atomic(path, out);
}

Tensor<float> read_pfm(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string bad = "'" + path.string() + "' is not a greyscale PFM";
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  if (token() != "Pf") throw DataError(bad);
  int w = 0, h = 0;
  double scale = 0.0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    scale = std::stod(token());
  } catch (const std::exception&) {
    throw DataError(bad);
  }
  if (w < 1 || h < 1 || scale == 0.0) throw DataError(bad);
  ++pos;
  const bool little = scale < 0.0;
  const auto count = static_cast<std::size_t>(w) * h;
  if (bytes.size() < pos + count * sizeof(float)) throw DataError("'" + path.string() + "' is truncated");
  Tensor<float> out(Shape{1, 1, h, w});
  const char* src = bytes.data() + pos;
  for (int y = 0; y < h; ++y) {
    float* row = out.data() + static_cast<std::size_t>(h - 1 - y) * w;
    for (int x = 0; x < w; ++x) {
      std::uint32_t bits;
      std::memcpy(&bits, src, sizeof(bits));
      src += sizeof(bits);
      if (little != (std::endian::native == std::endian::little)) bits = __builtin_bswap32(bits);
      row[x] = std::bit_cast<float>(bits);
    }
  }
  return out;
}

}  // namespace elgan
