#include "elgan/lane_eval.hpp"

#include "json.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

namespace elgan {

double match_threshold(int width) { return 20.0 * width / 1280.0; }

namespace {

struct Search {
  const std::vector<std::vector<int>>& counts;
  std::size_t preds;
  std::map<std::pair<std::size_t, std::uint64_t>, int> memo;

  // Best total for gt lanes [g, end) given the used-pred mask.
  int best(std::size_t g, std::uint64_t used) {
    if (g == counts.size()) return 0;
    const auto key = std::make_pair(g, used);
    if (const auto it = memo.find(key); it != memo.end()) return it->second;
    int value = best(g + 1, used);
    for (std::size_t p = 0; p < preds; ++p)
      if (!(used >> p & 1U) && counts[g][p] > 0) value = std::max(value, counts[g][p] + best(g + 1, used | 1ULL << p));
    memo[key] = value;
    return value;
  }
};

}  // namespace

std::vector<int> greedy_assignment(const std::vector<std::vector<int>>& counts) {
  const std::size_t gts = counts.size();
  const std::size_t preds = gts ? counts.front().size() : 0;
  std::vector<int> assignment(gts, -1);
  std::vector<bool> used(preds, false);
  for (;;) {
    int best = 0;
    std::size_t bg = 0, bp = 0;
    for (std::size_t p = 0; p < preds; ++p) {
      if (used[p]) continue;
      for (std::size_t g = 0; g < gts; ++g)
        if (assignment[g] < 0 && counts[g][p] > best) {
          best = counts[g][p];
          bg = g;
          bp = p;
        }
    }
    if (best == 0) return assignment;
    assignment[bg] = static_cast<int>(bp);
    used[bp] = true;
  }
}

MatchResult match_lanes(const LaneSet& pred, const LaneSet& gt, int width) {
  if (pred.size() > 64) throw DataError("match_lanes: more than 64 predicted lanes");
  std::optional<int> stride;
  for (const LaneSet* set : {&pred, &gt})
    for (const auto& l : *set) {
      if (stride && *stride != l.stride)
        throw DataError("match_lanes: lanes sampled at different strides (" + std::to_string(*stride) + " vs " +
                        std::to_string(l.stride) + ")");
      stride = l.stride;
    }
  MatchResult m;
  m.threshold_px = match_threshold(width);
  m.counts.assign(gt.size(), std::vector<int>(pred.size(), 0));
  for (std::size_t g = 0; g < gt.size(); ++g) {
    m.gt_points.push_back(static_cast<int>(gt[g].present_count()));
    for (std::size_t i = 0; i < gt[g].xs.size(); ++i) {
      if (!gt[g].xs[i]) continue;
      const int y = gt[g].y_at(i);
      for (std::size_t p = 0; p < pred.size(); ++p) {
        const auto x = pred[p].at_row(y);
        if (x && std::abs(*x - *gt[g].xs[i]) <= m.threshold_px) ++m.counts[g][p];
      }
    }
  }

  // Exact search; the reconstruction walks gt lanes in order and takes the leftmost
  // pred lane that still allows the optimum.
  Search search{m.counts, pred.size(), {}};
  m.assignment.assign(gt.size(), -1);
  std::uint64_t used = 0;
  int remaining = search.best(0, 0);
  for (std::size_t g = 0; g < gt.size(); ++g) {
    for (std::size_t p = 0; p < pred.size(); ++p) {
      if ((used >> p & 1U) || m.counts[g][p] == 0) continue;
      if (m.counts[g][p] + search.best(g + 1, used | 1ULL << p) == remaining) {
        m.assignment[g] = static_cast<int>(p);
        used |= 1ULL << p;
        remaining -= m.counts[g][p];
        break;
      }
    }
  }
  return m;
}

EvalReport evaluate(const LaneSet& pred, const LaneSet& gt, int width) {
  if (gt.empty()) throw DataError("evaluate: empty ground truth (accuracy undefined)");
  const MatchResult m = match_lanes(pred, gt, width);
  EvalReport r;
  int matched = 0, total = 0, tp = 0;
  for (std::size_t g = 0; g < gt.size(); ++g) {
    LaneMatch lm;
    lm.gt = static_cast<int>(g);
    lm.pred = m.assignment[g];
    lm.points = m.gt_points[g];
    lm.matched = lm.pred >= 0 ? m.counts[g][static_cast<std::size_t>(lm.pred)] : 0;
    lm.true_positive = lm.points > 0 && static_cast<double>(lm.matched) / lm.points >= kLaneMatchCutoff;
    matched += lm.matched;
    total += lm.points;
    tp += lm.true_positive ? 1 : 0;
    r.per_lane.push_back(lm);
  }
  r.accuracy = total > 0 ? static_cast<double>(matched) / total : 0.0;
  const auto np = static_cast<double>(pred.size());
  const auto ng = static_cast<double>(gt.size());
  r.fp = (np - tp) / std::max(1.0, np);
  r.fn = (ng - tp) / std::max(1.0, ng);
  return r;
}

EvalReport evaluate_corpus(const std::vector<LaneSet>& preds, const std::vector<LaneSet>& gts, int width) {
  if (preds.size() != gts.size()) throw DataError("evaluate_corpus: prediction and label counts differ");
  if (gts.empty()) throw DataError("evaluate_corpus: no images");
  EvalReport total;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    const EvalReport r = evaluate(preds[i], gts[i], width);
    total.accuracy += r.accuracy;
    total.fp += r.fp;
    total.fn += r.fn;
  }
  const auto n = static_cast<double>(gts.size());
  total.accuracy /= n;
  total.fp /= n;
  total.fn /= n;
  return total;
}

StabilityStats stability_stats(const std::vector<double>& series) {
  if (series.empty()) throw DataError("stability_stats: empty series");
  StabilityStats s;
  double sum = 0.0;
  s.max = -std::numeric_limits<double>::infinity();
  for (double v : series) {
    sum += v;
    s.max = std::max(s.max, v);
  }
  const auto n = static_cast<double>(series.size());
  s.mean = sum / n;
  // shifted by the first value so a constant series gives exactly 0
  double d1 = 0.0, d2 = 0.0;
  for (double v : series) {
    d1 += v - series.front();
    d2 += (v - series.front()) * (v - series.front());
  }
  s.variance = std::max(0.0, (d2 - d1 * d1 / n) / n);
  return s;
}

std::string report_json(const EvalReport& r) {
  nlohmann::ordered_json j;
  j["accuracy"] = r.accuracy;
  j["fp"] = r.fp;
  j["fn"] = r.fn;
  return j.dump(2);
}

std::string report_table(const std::string& name, const EvalReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-24s %12s %8s %8s\n%-24s %12.2f %8.4f %8.4f\n", "Method", "Accuracy (%)", "FP", "FN",
                name.c_str(), 100.0 * r.accuracy, r.fp, r.fn);
  return buf;
}

}  // namespace elgan
