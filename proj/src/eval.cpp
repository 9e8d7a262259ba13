#include "hasmm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "hasmm/error.hpp"

namespace hasmm {

DetectionOutcome detect(const ScoredEpisode& e, double threshold) {
  DetectionOutcome out;
  out.id = e.id;
  out.label = e.label;
  out.censor_time = e.censor_time;
  for (std::size_t k = 0; k < e.times.size() && k < e.risk.size(); ++k) {
    if (e.times[k] >= e.censor_time) break;
    if (e.risk[k] >= threshold) {
      out.crossed = true;
      out.crossing_time = e.times[k];
      break;
    }
  }
  return out;
}

RocCurve roc_curve(const std::vector<ScoredEpisode>& episodes, std::vector<double> thresholds, int positive_label) {
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  long positives = 0;
  for (const auto& e : episodes) positives += e.label == positive_label;
  require(positives > 0, ErrorKind::MalformedInput, "roc: no positive episodes");
  RocCurve curve;
  for (double thr : thresholds) {
    long tp = 0, fp = 0;
    for (const auto& e : episodes) {
      if (!detect(e, thr).crossed) continue;
      if (e.label == positive_label) ++tp;
      else ++fp;
    }
    if (tp + fp == 0) {
      ++curve.omitted;
      continue;
    }
    curve.points.push_back({thr, static_cast<double>(tp) / positives, static_cast<double>(tp) / (tp + fp)});
  }
  if (!curve.points.empty()) {
    const auto& pts = curve.points;
    double area = pts[0].tpr * pts[0].ppv;
    for (std::size_t k = 1; k < pts.size(); ++k)
      area += (pts[k].tpr - pts[k - 1].tpr) * 0.5 * (pts[k].ppv + pts[k - 1].ppv);
    curve.auc = std::clamp(area, 0.0, 1.0);
  }
  return curve;
}

RocCurve roc_from_scores(const std::vector<ScoredEpisode>& episodes, int positive_label) {
  std::vector<double> thresholds;
  for (const auto& e : episodes) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < e.times.size() && k < e.risk.size(); ++k)
      if (e.times[k] < e.censor_time) best = std::max(best, e.risk[k]);
    if (std::isfinite(best)) thresholds.push_back(best);
  }
  return roc_curve(episodes, thresholds, positive_label);
}

std::optional<double> timeliness(const std::vector<DetectionOutcome>& outcomes, int positive_label) {
  double sum = 0.0;
  int count = 0;
  for (const auto& o : outcomes) {
    if (o.label != positive_label || !o.crossed) continue;
    sum += o.crossing_time - o.censor_time;
    ++count;
  }
  if (count == 0) return std::nullopt;
  return sum / count;
}

std::optional<OperatingPoint> operating_point(const std::vector<ScoredEpisode>& episodes, const RocCurve& curve,
                                              double target_tpr, int positive_label) {
  for (const auto& pt : curve.points) {
    if (pt.tpr < target_tpr) continue;
    OperatingPoint op{pt.threshold, pt.tpr, pt.ppv, std::nullopt};
    std::vector<DetectionOutcome> outcomes;
    for (const auto& e : episodes) outcomes.push_back(detect(e, pt.threshold));
    op.timeliness = timeliness(outcomes, positive_label);
    return op;
  }
  return std::nullopt;
}

ScoredEpisode score_episode(const Episode& e, const std::vector<PosteriorSnapshot>& snaps) {
  ScoredEpisode s;
  s.id = e.id;
  s.label = e.label;
  s.censor_time = e.censor_time;
  for (const auto& snap : snaps) {
    s.times.push_back(snap.t);
    s.risk.push_back(snap.risk);
  }
  return s;
}

}  // namespace hasmm
