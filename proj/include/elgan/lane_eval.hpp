#pragma once

#include "elgan/lane_data.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace elgan {

/// Per-lane match records and the lane assignment for one image.
struct MatchResult {
  double threshold_px = 0.0;
  std::vector<std::vector<int>> counts;  // counts[g][p]: gt points of lane g matched by pred lane p
  std::vector<int> gt_points;            // present points per gt lane
  std::vector<int> assignment;           // pred index per gt lane, -1 when unassigned
};

struct LaneMatch {
  int gt = 0;
  int pred = -1;
  int matched = 0;
  int points = 0;
  bool true_positive = false;
};

struct EvalReport {
  double accuracy = 0.0;
  double fp = 0.0;
  double fn = 0.0;
  std::vector<LaneMatch> per_lane;
};

struct StabilityStats {
  double mean = 0.0;
  double variance = 0.0;  // population variance
  double max = 0.0;
};

/// Lane-level true-positive cutoff on per-lane point accuracy.
inline constexpr double kLaneMatchCutoff = 0.85;

/// Horizontal match threshold: 20 px at 1280 px width, scaled linearly.
double match_threshold(int width);

/// Point matches between every gt/pred pair and the lane assignment that maximizes
/// the total number of matched gt points (each pred lane used at most once; among
/// equally good assignments the earliest gt lanes take the leftmost pred lanes).
/// Pairs without any matched point are never assigned.
MatchResult match_lanes(const LaneSet& pred, const LaneSet& gt, int width);

/// The greedy-by-count rule: repeatedly assign the unassigned pair with the largest
/// count (ties: leftmost pred lane, then earliest gt lane).
std::vector<int> greedy_assignment(const std::vector<std::vector<int>>& counts);

EvalReport evaluate(const LaneSet& pred, const LaneSet& gt, int width);

/// Image-averaged accuracy, fp and fn over paired lane sets.
EvalReport evaluate_corpus(const std::vector<LaneSet>& preds, const std::vector<LaneSet>& gts, int width);

StabilityStats stability_stats(const std::vector<double>& series);

/// {"accuracy": .., "fp": .., "fn": ..}
std::string report_json(const EvalReport& r);

/// One-line table in the Accuracy (%) / FP / FN layout.
std::string report_table(const std::string& name, const EvalReport& r);

}  // namespace elgan
