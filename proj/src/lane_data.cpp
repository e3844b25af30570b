#include "elgan/lane_data.hpp"

#include "elgan/rng.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unistd.h>

namespace elgan {

namespace fs = std::filesystem;
using nlohmann::json;

std::size_t Polyline::present_count() const {
  return static_cast<std::size_t>(std::count_if(xs.begin(), xs.end(), [](const auto& x) { return x.has_value(); }));
}

std::optional<double> Polyline::at_row(int y) const {
  if (xs.empty() || y < y0 || (y - y0) % stride != 0) return std::nullopt;
  const auto i = static_cast<std::size_t>((y - y0) / stride);
  return i < xs.size() ? xs[i] : std::nullopt;
}

std::optional<double> Polyline::interpolate(double y) const {
  std::optional<std::size_t> lo, hi;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (!xs[i]) continue;
    const double yi = y_at(i);
    if (yi <= y) lo = i;
    if (yi >= y && !hi) hi = i;
  }
  if (!lo || !hi) return std::nullopt;
  if (*lo == *hi) return xs[*lo];
  const double ya = y_at(*lo), yb = y_at(*hi);
  const double xa = *xs[*lo], xb = *xs[*hi];
  return xa + (xb - xa) * (y - ya) / (yb - ya);
}

std::optional<double> Polyline::bottom_x() const {
  for (auto it = xs.rbegin(); it != xs.rend(); ++it)
    if (*it) return *it;
  return std::nullopt;
}

void Polyline::trim() {
  std::size_t first = 0;
  while (first < xs.size() && !xs[first]) ++first;
  std::size_t last = xs.size();
  while (last > first && !xs[last - 1]) --last;
  y0 += static_cast<int>(first) * stride;
  xs = std::vector<std::optional<double>>(xs.begin() + static_cast<std::ptrdiff_t>(first),
                                          xs.begin() + static_cast<std::ptrdiff_t>(last));
  if (xs.empty()) y0 = 0;
}

void RasterizeSpec::validate() const {
  if (!(sigma > 0.0)) throw DataError("rasterize: sigma must be > 0");
  if (height < 1 || width < 1) throw DataError("rasterize: image size must be positive");
}

std::string to_string(Difficulty d) { return d == Difficulty::easy ? "easy" : "occluded"; }

Difficulty parse_difficulty(const std::string& s) {
  if (s == "easy") return Difficulty::easy;
  if (s == "occluded") return Difficulty::occluded;
  throw DataError("unknown difficulty '" + s + "' (expected easy or occluded)");
}

Tensor<float> rasterize_lanes(const LaneSet& lanes, const RasterizeSpec& spec) {
  spec.validate();
  const int h = spec.height, w = spec.width;
  std::vector<double> lane(static_cast<std::size_t>(h) * w, 0.0);
  const double denom = 2.0 * spec.sigma * spec.sigma;
  for (const auto& l : lanes) {
    for (int r = 0; r < h; ++r) {
      const auto x = l.interpolate(r);
      if (!x) continue;
      double* row = lane.data() + static_cast<std::size_t>(r) * w;
      for (int cx = 0; cx < w; ++cx) {
        const double d = cx - *x;
        row[cx] = std::max(row[cx], std::exp(-d * d / denom));
      }
    }
  }
  Tensor<float> label(Shape{1, 2, h, w});
  float* bg = label.plane_ptr(0, 0);
  float* fg = label.plane_ptr(0, 1);
  for (std::size_t i = 0; i < lane.size(); ++i) {
    fg[i] = static_cast<float>(lane[i]);
    bg[i] = 1.0f - fg[i];
  }
  return label;
}

float quantize8(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

SceneRecord synth_scene(std::uint64_t seed, const RasterizeSpec& spec, Difficulty difficulty, int stride) {
  spec.validate();
  if (stride < 1) throw DataError("synth: stride must be >= 1");
  const int h = spec.height, w = spec.width;
  const double scale = w / 128.0;

  Rng geo(derive_seed(seed, 1));
  const int n = static_cast<int>(geo.uniform_int(2, 5));
  const int y_bot = ((h - 1) / stride) * stride;
  int y_top = static_cast<int>(std::lround(geo.uniform(0.45, 0.55) * h / stride)) * stride;
  y_top = std::clamp(y_top, 0, std::max(0, y_bot - 2 * stride));
  const double gap_bot = geo.uniform(18.0, 28.0) * scale;
  const double span_bot = (n - 1) * gap_bot;
  const double left_bot = geo.uniform(10.0 * scale, std::max(10.0 * scale, w - 1 - 10.0 * scale - span_bot));
  const double gap_top = geo.uniform(6.0, 10.0) * scale;
  const double vanish = geo.uniform(0.4, 0.6) * w;
  const double left_top = vanish - (n - 1) * gap_top / 2.0;
  // Shared bend: x gains a * (y - y_bot) * (y - y_top), peaking at `bend` mid-span.
  const double bend = geo.uniform(-8.0, 8.0) * scale;
  const double half = (y_bot - y_top) / 2.0;
  const double a = half > 0 ? -bend / (half * half) : 0.0;

  SceneRecord rec;
  rec.source_id = "synth_" + std::to_string(seed);
  for (int i = 0; i < n; ++i) {
    Polyline p;
    p.y0 = y_top;
    p.stride = stride;
    const double xt = left_top + i * gap_top;
    const double xb = left_bot + i * gap_bot;
    for (int y = y_top; y <= y_bot; y += stride) {
      const double t = y_bot > y_top ? static_cast<double>(y - y_top) / (y_bot - y_top) : 1.0;
      const double x = xt + (xb - xt) * t + a * (y - y_bot) * (y - y_top);
      p.xs.push_back(std::clamp(x, 0.0, w - 1.0));
    }
    rec.lanes.push_back(std::move(p));
  }
  rec.label = rasterize_lanes(rec.lanes, spec);

  Rng tex(derive_seed(seed, 2));
  double tint[3], paint[3];
  for (double& t : tint) t = tex.uniform(0.08, 0.18);
  const double brightness = tex.uniform(0.55, 0.8);
  for (double& c : paint) c = tex.uniform(0.85, 1.0);
  rec.image = Tensor<float>(Shape{1, 3, h, w});
  const float* lane = rec.label.plane_ptr(0, 1);
  for (int c = 0; c < 3; ++c) {
    float* dst = rec.image.plane_ptr(0, c);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * w + x;
        const double bg = tint[c] + 0.05 * y / h + 0.08 * (tex.uniform() - 0.5);
        dst[i] = quantize8(bg + brightness * paint[c] * lane[i]);
      }
  }

  if (difficulty == Difficulty::occluded) {
    Rng occ(derive_seed(seed, 3));
    const int count = static_cast<int>(occ.uniform_int(1, 3));
    for (int k = 0; k < count; ++k) {
      const int rw = std::max(1, static_cast<int>(occ.uniform(0.1, 0.25) * w));
      const int rh = std::max(1, static_cast<int>(occ.uniform(0.1, 0.25) * h));
      const int x0 = static_cast<int>(occ.uniform_int(0, w - rw));
      const int y0 = static_cast<int>(occ.uniform_int(h / 3, h - rh));
      const float shade = quantize8(occ.uniform(0.05, 0.3));
      for (int c = 0; c < 3; ++c)
        for (int y = y0; y < y0 + rh; ++y)
          std::fill_n(rec.image.plane_ptr(0, c) + y * w + x0, rw, shade);
    }
  }
  return rec;
}

namespace {

std::string where(std::size_t line) { return "label line " + std::to_string(line); }

LabelRecord parse_label_json(const json& j, std::size_t line, int height, int width) {
  if (!j.is_object()) throw DataError(where(line) + ": expected a JSON object");
  for (const char* key : {"lanes", "h_samples", "raw_file"})
    if (!j.contains(key)) throw DataError(where(line) + ": missing key '" + key + "'");
  const json& hs = j["h_samples"];
  const json& lanes = j["lanes"];
  if (!hs.is_array() || !lanes.is_array() || !j["raw_file"].is_string())
    throw DataError(where(line) + ": lanes/h_samples must be arrays and raw_file a string");
  LabelRecord rec;
  rec.raw_file = j["raw_file"].get<std::string>();
  for (const auto& v : hs) {
    if (!v.is_number_integer()) throw DataError(where(line) + ": h_samples must be integers");
    rec.h_samples.push_back(v.get<int>());
  }
  int stride = 1;
  if (rec.h_samples.size() >= 2) {
    stride = rec.h_samples[1] - rec.h_samples[0];
    if (stride < 1) throw DataError(where(line) + ": h_samples must be strictly increasing");
    for (std::size_t i = 1; i < rec.h_samples.size(); ++i)
      if (rec.h_samples[i] - rec.h_samples[i - 1] != stride)
        throw DataError(where(line) + ": h_samples are not evenly spaced");
  }
  for (std::size_t li = 0; li < lanes.size(); ++li) {
    const json& xs = lanes[li];
    if (!xs.is_array()) throw DataError(where(line) + ": lane " + std::to_string(li) + " is not an array");
    if (xs.size() != rec.h_samples.size())
      throw DataError(where(line) + ": lane " + std::to_string(li) + " has " + std::to_string(xs.size()) +
                      " points but h_samples has " + std::to_string(rec.h_samples.size()));
    Polyline p;
    p.y0 = rec.h_samples.empty() ? 0 : rec.h_samples.front();
    p.stride = stride;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      if (!xs[k].is_number()) throw DataError(where(line) + ": lane x values must be numbers");
      const double x = xs[k].get<double>();
      const int y = rec.h_samples[k];
      const bool inside = x >= 0.0 && x < width && y >= 0 && y < height;
      p.xs.push_back(x == -2.0 || !inside ? std::nullopt : std::optional<double>(x));
    }
    p.trim();
    if (p.present_count() >= 2) rec.lanes.push_back(std::move(p));
  }
  return rec;
}

json parse_json_line(const std::string& text, std::size_t line) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(where(line) + ": parse error: " + e.what());
  }
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

std::vector<LabelRecord> parse_label_text(const std::string& text, int height, int width) {
  std::vector<LabelRecord> out;
  std::istringstream in(text);
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (blank(raw)) continue;
    out.push_back(parse_label_json(parse_json_line(raw, line), line, height, width));
  }
  return out;
}

std::vector<LabelRecord> parse_label_file(const fs::path& path, int height, int width) {
  return parse_label_text(read_file(path), height, width);
}

std::vector<int> default_h_samples(int height, int stride) {
  std::vector<int> hs;
  for (int y = 0; y < height; y += stride) hs.push_back(y);
  return hs;
}

std::string label_line(const LaneSet& lanes, const std::vector<int>& h_samples, const std::string& raw_file) {
  json j;
  j["lanes"] = json::array();
  for (const auto& l : lanes) {
    json xs = json::array();
    std::size_t written = 0;
    for (int y : h_samples) {
      const auto x = l.at_row(y);
      if (x) {
        xs.push_back(*x);
        ++written;
      } else {
        xs.push_back(-2);
      }
    }
    if (written != l.present_count()) throw DataError("label_line: lane rows are not a subset of h_samples");
    j["lanes"].push_back(std::move(xs));
  }
  j["h_samples"] = h_samples;
  j["raw_file"] = raw_file;
  return j.dump();
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp." + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp.string() + "'");
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    out.flush();
    if (!out) throw DataError("short write to '" + tmp.string() + "'");
  }
  fs::rename(tmp, path);
}

void write_ppm(const fs::path& path, const Tensor<float>& image) {
  const Shape s = image.shape();
  if (s.n != 1 || s.c != 3) throw ShapeError("write_ppm: expected (1, 3, h, w), got " + s.str());
  std::string out = "P6\n" + std::to_string(s.w) + " " + std::to_string(s.h) + "\n255\n";
  const std::size_t header = out.size();
  out.resize(header + static_cast<std::size_t>(3 * s.plane()));
  for (Index i = 0; i < s.plane(); ++i)
    for (Index c = 0; c < 3; ++c) {
      const double v = std::clamp<double>(image.plane_ptr(0, c)[i], 0.0, 1.0);
      out[header + static_cast<std::size_t>(3 * i + c)] = static_cast<char>(std::lround(v * 255.0));
    }
  write_file_atomic(path, out);
}

Tensor<float> read_ppm(const fs::path& path) {
  const std::string bytes = read_file(path);
  std::size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size()) {
      if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
    return bytes.substr(start, pos - start);
  };
  const std::string bad = "'" + path.string() + "' is not a binary 8-bit PPM";
  if (token() != "P6") throw DataError(bad);
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw DataError(bad);
  }
  if (w < 1 || h < 1 || maxval != 255) throw DataError(bad);
  ++pos;  // single whitespace byte after maxval
  const auto plane = static_cast<std::size_t>(w) * h;
  if (bytes.size() < pos + 3 * plane) throw DataError("'" + path.string() + "' is truncated");
  Tensor<float> img(Shape{1, 3, h, w});
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      img.plane_ptr(0, c)[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + 3 * i + c])) / 255.0f;
  return img;
}

void write_corpus(const fs::path& dir, const std::vector<SceneRecord>& records, int stride) {
  fs::create_directories(dir / "images");
  std::string labels;
  for (const auto& r : records) {
    const std::string rel = "images/" + r.source_id + ".ppm";
    write_ppm(dir / rel, r.image);
    labels += label_line(r.lanes, default_h_samples(static_cast<int>(r.image.shape().h), stride), rel) + "\n";
  }
  write_file_atomic(dir / "labels.jsonl", labels);
}

std::vector<SceneRecord> read_corpus(const fs::path& dir, double sigma) {
  const fs::path labels = dir / "labels.jsonl";
  if (!fs::exists(labels)) throw DataError("no labels.jsonl in '" + dir.string() + "'");
  std::vector<SceneRecord> out;
  std::istringstream in(read_file(labels));
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (blank(raw)) continue;
    const json j = parse_json_line(raw, line);
    if (!j.is_object() || !j.contains("raw_file") || !j["raw_file"].is_string())
      throw DataError(where(line) + ": missing raw_file");
    SceneRecord rec;
    const std::string rel = j["raw_file"].get<std::string>();
    rec.image = read_ppm(dir / rel);
    const int h = static_cast<int>(rec.image.shape().h), w = static_cast<int>(rec.image.shape().w);
    rec.lanes = parse_label_json(j, line, h, w).lanes;
    rec.label = rasterize_lanes(rec.lanes, RasterizeSpec{sigma, h, w});
    rec.source_id = fs::path(rel).stem().string();
    out.push_back(std::move(rec));
  }
  return out;
}

BatchSequence::BatchSequence(const std::vector<SceneRecord>& records, std::size_t batch_size, std::uint64_t seed)
    : records_(&records), batch_size_(batch_size), seed_(seed) {
  if (records.empty()) throw DataError("make_batches: empty record list");
  if (batch_size < 1) throw DataError("make_batches: batch_size must be >= 1");
  per_epoch_ = records.size() / batch_size;
  if (per_epoch_ == 0)
    throw DataError("make_batches: batch_size " + std::to_string(batch_size) + " exceeds " +
                    std::to_string(records.size()) + " records");
}

std::vector<std::size_t> BatchSequence::permutation(std::uint64_t epoch) const {
  std::vector<std::size_t> perm(records_->size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  Rng rng(derive_seed(seed_, epoch));
  rng.shuffle(perm);
  return perm;
}

std::vector<std::size_t> BatchSequence::indices(std::uint64_t k) const {
  const auto perm = permutation(k / per_epoch_);
  const std::size_t start = static_cast<std::size_t>(k % per_epoch_) * batch_size_;
  return {perm.begin() + static_cast<std::ptrdiff_t>(start),
          perm.begin() + static_cast<std::ptrdiff_t>(start + batch_size_)};
}

Batch BatchSequence::batch(std::uint64_t k) const { return stack_records(*records_, indices(k)); }

Batch stack_records(const std::vector<SceneRecord>& records, const std::vector<std::size_t>& indices) {
  if (indices.empty()) throw DataError("stack_records: no indices");
  const Shape is = records.at(indices.front()).image.shape();
  const Shape ls = records.at(indices.front()).label.shape();
  const auto b = static_cast<Index>(indices.size());
  Batch out{Tensor<float>(Shape{b, is.c, is.h, is.w}), Tensor<float>(Shape{b, ls.c, ls.h, ls.w}), indices};
  for (Index i = 0; i < b; ++i) {
    const SceneRecord& r = records.at(indices[static_cast<std::size_t>(i)]);
    if (!(r.image.shape() == is) || !(r.label.shape() == ls))
      throw DataError("stack_records: record '" + r.source_id + "' has a different size");
    out.images.sample(i) = r.image.sample(0);
    out.labels.sample(i) = r.label.sample(0);
  }
  return out;
}

}  // namespace elgan
