#pragma once

// Pseudo-label quality histograms, deviation statistics and COCO-style AP.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "dpp/geom.hpp"
#include "dpp/objects.hpp"
#include "dpp/sample.hpp"
#include "dpp/scene.hpp"

namespace dpp {

inline constexpr int kQualityBins = 20;  // width 0.05 over [0, 1]
inline constexpr std::array<double, 5> kQualityThresholds{0.5, 0.6, 0.7, 0.8, 0.9};

struct PseudoQualityReport {
  std::array<long, kQualityBins> iou_bins{};
  std::array<long, kQualityThresholds.size()> correct_at_thresh{};
  long count = 0;
  long correct_category = 0;
  double mean_iou = 0.0;

  double category_accuracy() const {
    return count == 0 ? 0.0 : static_cast<double>(correct_category) / static_cast<double>(count);
  }
};

inline int quality_bin(double v) {
  return std::clamp(static_cast<int>(std::floor(v / 0.05)), 0, kQualityBins - 1);
}

struct GtMatch {
  int object = -1;  // -1 when the scene has no objects
  double overlap = 0.0;
};

/// Max-IoU object of a scene for a box; ties go to the lower object index.
inline GtMatch match_max_iou(const BBox& box, const Scene& scene) {
  GtMatch m;
  for (std::size_t i = 0; i < scene.objects.size(); ++i) {
    const double o = iou(box, scene.objects[i].box);
    if (m.object < 0 || o > m.overlap) {
      m.object = static_cast<int>(i);
      m.overlap = o;
    }
  }
  return m;
}

/// Looks up scenes by id.
class SceneIndex {
 public:
  SceneIndex() = default;
  explicit SceneIndex(std::span<const Scene> scenes) {
    for (const auto& s : scenes) add(s);
  }
  void add(const Scene& s) { by_id_[s.scene_id] = &s; }
  const Scene& at(int id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw std::out_of_range("unknown scene id " + std::to_string(id));
    return *it->second;
  }
  std::vector<const Scene*> scenes() const {
    std::vector<const Scene*> out;
    for (const auto& [_, s] : by_id_) out.push_back(s);
    return out;
  }

 private:
  std::map<int, const Scene*> by_id_;
};

inline PseudoQualityReport pseudo_quality(std::span<const PseudoDetection> pseudo,
                                          const SceneIndex& gt) {
  PseudoQualityReport r;
  double iou_sum = 0.0;
  for (const auto& p : pseudo) {
    const auto m = match_max_iou(p.box, gt.at(p.scene_id));
    const double o = m.object < 0 ? 0.0 : m.overlap;
    ++r.iou_bins[static_cast<std::size_t>(quality_bin(o))];
    ++r.count;
    iou_sum += o;
    const bool right =
        m.object >= 0 && gt.at(p.scene_id).objects[static_cast<std::size_t>(m.object)].category == p.category;
    if (!right) continue;
    ++r.correct_category;
    for (std::size_t t = 0; t < kQualityThresholds.size(); ++t) {
      if (o > kQualityThresholds[t]) ++r.correct_at_thresh[t];
    }
  }
  r.mean_iou = r.count == 0 ? 0.0 : iou_sum / static_cast<double>(r.count);
  return r;
}

struct GroupStats {
  long count = 0;
  MeanStd iou;
};

struct DeviationStats {
  std::optional<GroupStats> high;  // iou >= 0.5
  std::optional<GroupStats> low;   // iou < 0.5
  std::array<MeanStd, 4> deviation{};  // x1, y1, x2, y2, normalized by gt extent
  long count = 0;
};

struct BoxPair {
  BBox pseudo;
  BBox gt;
};

inline DeviationStats deviation_stats(std::span<const BoxPair> pairs) {
  if (pairs.empty()) throw std::invalid_argument("deviation_stats: empty pair list");
  struct Acc {
    double s = 0.0, s2 = 0.0;
    long n = 0;
    void add(double v) {
      s += v;
      s2 += v * v;
      ++n;
    }
    MeanStd finish() const {
      const double m = s / static_cast<double>(n);
      return {m, std::sqrt(std::max(0.0, s2 / static_cast<double>(n) - m * m))};
    }
  };
  Acc hi, lo;
  std::array<Acc, 4> dev;
  for (const auto& [p, g] : pairs) {
    require_valid(g, "deviation_stats(gt)");
    const double o = iou(p, g);
    (o >= 0.5 ? hi : lo).add(o);
    const auto pa = p.as_array();
    const auto ga = g.as_array();
    const std::array<double, 4> ext{g.width(), g.height(), g.width(), g.height()};
    for (std::size_t k = 0; k < 4; ++k) dev[k].add((pa[k] - ga[k]) / ext[k]);
  }
  DeviationStats out;
  out.count = static_cast<long>(pairs.size());
  if (hi.n > 0) out.high = GroupStats{hi.n, hi.finish()};
  if (lo.n > 0) out.low = GroupStats{lo.n, lo.finish()};
  for (std::size_t k = 0; k < 4; ++k) out.deviation[k] = dev[k].finish();
  return out;
}

// ---------------------------------------------------------------------------
// Average precision

struct Detection {
  int scene_id = 0;
  BBox box;
  int category = 0;
  double score = 0.0;
};

inline std::vector<double> coco_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

struct ApResult {
  double ap50 = 0.0;
  double ap50_95 = 0.0;
  std::vector<double> thresholds;
  std::vector<double> map_per_threshold;
  std::vector<std::optional<double>> per_class_ap50;  // empty when a class has no GT
};

/// Greedy matching in descending score order (stable on ties): each
/// detection takes the highest-IoU unmatched GT of its class and scene that
/// clears the threshold. Returns true-positive flags in that order.
inline std::vector<bool> match_detections(const std::vector<const Detection*>& sorted,
                                          const SceneIndex& gt, int category, double thresh) {
  std::map<int, std::vector<bool>> used;
  std::vector<bool> tp;
  tp.reserve(sorted.size());
  for (const auto* d : sorted) {
    const Scene& s = gt.at(d->scene_id);
    auto& u = used[d->scene_id];
    u.resize(s.objects.size(), false);
    int best = -1;
    double best_iou = thresh;
    for (std::size_t i = 0; i < s.objects.size(); ++i) {
      if (s.objects[i].category != category || u[i]) continue;
      const double o = iou(d->box, s.objects[i].box);
      if (o >= best_iou && (best < 0 || o > best_iou)) {
        best = static_cast<int>(i);
        best_iou = o;
      }
    }
    if (best >= 0) u[static_cast<std::size_t>(best)] = true;
    tp.push_back(best >= 0);
  }
  return tp;
}

/// 101-point interpolated AP from true-positive flags in score order.
inline double interpolated_ap(const std::vector<bool>& tp, long num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> precision(tp.size());
  std::vector<double> recall(tp.size());
  long hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    hits += tp[i] ? 1 : 0;
    precision[i] = static_cast<double>(hits) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(hits) / static_cast<double>(num_gt);
  }
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double sum = 0.0;
  std::size_t idx = 0;
  for (int k = 0; k <= 100; ++k) {
    const double r = k / 100.0;
    while (idx < recall.size() && recall[idx] < r - 1e-12) ++idx;
    if (idx < recall.size()) sum += precision[idx];
  }
  return sum / 101.0;
}

inline ApResult average_precision(std::span<const Detection> dets, const SceneIndex& gt, int num_classes,
                                  const std::vector<double>& thresholds = coco_iou_thresholds()) {
  if (thresholds.empty()) throw std::invalid_argument("average_precision: no thresholds");
  ApResult r;
  r.thresholds = thresholds;
  r.per_class_ap50.assign(static_cast<std::size_t>(num_classes), std::nullopt);
  std::vector<long> num_gt(static_cast<std::size_t>(num_classes), 0);
  for (const Scene* s : gt.scenes()) {
    for (const auto& o : s->objects) {
      if (o.category >= 0 && o.category < num_classes) ++num_gt[static_cast<std::size_t>(o.category)];
    }
  }
  std::vector<std::vector<const Detection*>> by_class(static_cast<std::size_t>(num_classes));
  for (const auto& d : dets) {
    if (d.category >= 0 && d.category < num_classes) by_class[static_cast<std::size_t>(d.category)].push_back(&d);
  }
  for (auto& v : by_class) {
    std::stable_sort(v.begin(), v.end(), [](const Detection* a, const Detection* b) { return a->score > b->score; });
  }

  for (double t : thresholds) {
    double sum = 0.0;
    int classes = 0;
    for (int c = 0; c < num_classes; ++c) {
      const auto cu = static_cast<std::size_t>(c);
      if (num_gt[cu] == 0) continue;
      const double ap = interpolated_ap(match_detections(by_class[cu], gt, c, t), num_gt[cu]);
      if (std::abs(t - 0.5) < 1e-12) r.per_class_ap50[cu] = ap;
      sum += ap;
      ++classes;
    }
    r.map_per_threshold.push_back(classes == 0 ? 0.0 : sum / classes);
  }
  for (std::size_t i = 0; i < thresholds.size(); ++i) {
    if (std::abs(thresholds[i] - 0.5) < 1e-12) r.ap50 = r.map_per_threshold[i];
  }
  double s = 0.0;
  for (double v : r.map_per_threshold) s += v;
  r.ap50_95 = s / static_cast<double>(r.map_per_threshold.size());
  return r;
}

// ---------------------------------------------------------------------------
// Serialization

inline nlohmann::json to_json(const PseudoQualityReport& r) {
  nlohmann::json bins = nlohmann::json::array();
  for (int b = 0; b < kQualityBins; ++b) {
    bins.push_back({{"lo", b * 0.05}, {"hi", (b + 1) * 0.05}, {"count", r.iou_bins[static_cast<std::size_t>(b)]}});
  }
  nlohmann::json thr = nlohmann::json::array();
  for (std::size_t t = 0; t < kQualityThresholds.size(); ++t) {
    thr.push_back({{"iou_gt", kQualityThresholds[t]}, {"correct", r.correct_at_thresh[t]}});
  }
  return {{"count", r.count},
          {"mean_iou", r.mean_iou},
          {"category_accuracy", r.category_accuracy()},
          {"iou_bins", bins},
          {"correct_at_thresh", thr}};
}

inline nlohmann::json to_json(const DeviationStats& d) {
  auto group = [](const std::optional<GroupStats>& g) -> nlohmann::json {
    if (!g) return nullptr;
    return {{"count", g->count}, {"mean", g->iou.mean}, {"std", g->iou.std}};
  };
  nlohmann::json dev = nlohmann::json::object();
  const char* names[4] = {"x1", "y1", "x2", "y2"};
  for (std::size_t k = 0; k < 4; ++k) {
    dev[names[k]] = {{"mean", d.deviation[k].mean}, {"std", d.deviation[k].std}};
  }
  return {{"count", d.count}, {"iou_ge_0.5", group(d.high)}, {"iou_lt_0.5", group(d.low)}, {"deviation", dev}};
}

inline nlohmann::json to_json(const ApResult& r) {
  nlohmann::json pc = nlohmann::json::array();
  for (const auto& v : r.per_class_ap50) pc.push_back(v ? nlohmann::json(*v) : nlohmann::json(nullptr));
  return {{"ap50", r.ap50},
          {"ap50_95", r.ap50_95},
          {"thresholds", r.thresholds},
          {"map_per_threshold", r.map_per_threshold},
          {"per_class_ap50", pc}};
}

}  // namespace dpp
