#pragma once

// Brute-force AP evaluator for cross-checking the library: quadratic, shares
// nothing with it beyond iou().

#include <algorithm>
#include <utility>
#include <vector>

#include "dpp/metrics.hpp"

namespace testutil {

inline double reference_ap(const std::vector<dpp::Detection>& dets, const std::vector<dpp::Scene>& scenes,
                           int category, double thresh) {
  long num_gt = 0;
  for (const auto& s : scenes) {
    for (const auto& o : s.objects) num_gt += o.category == category;
  }
  if (num_gt == 0) return 0.0;
  std::vector<dpp::Detection> mine;
  for (const auto& d : dets) {
    if (d.category == category) mine.push_back(d);
  }
  std::stable_sort(mine.begin(), mine.end(), [](const auto& a, const auto& b) { return a.score > b.score; });
  std::vector<std::pair<int, int>> taken;  // (scene id, object index)
  std::vector<double> prec;
  std::vector<double> rec;
  long tp = 0;
  for (std::size_t i = 0; i < mine.size(); ++i) {
    const dpp::Scene* scene = nullptr;
    for (const auto& s : scenes) {
      if (s.scene_id == mine[i].scene_id) scene = &s;
    }
    int best = -1;
    double best_iou = -1.0;
    for (std::size_t j = 0; j < scene->objects.size(); ++j) {
      if (scene->objects[j].category != category) continue;
      if (std::find(taken.begin(), taken.end(), std::pair{scene->scene_id, static_cast<int>(j)}) != taken.end()) {
        continue;
      }
      const double o = dpp::iou(mine[i].box, scene->objects[j].box);
      if (o >= thresh && o > best_iou) {
        best = static_cast<int>(j);
        best_iou = o;
      }
    }
    if (best >= 0) {
      taken.emplace_back(scene->scene_id, best);
      ++tp;
    }
    prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
  }
  double sum = 0.0;
  for (int k = 0; k <= 100; ++k) {
    double p = 0.0;
    for (std::size_t i = 0; i < prec.size(); ++i) {
      if (rec[i] >= k / 100.0 - 1e-12) p = std::max(p, prec[i]);
    }
    sum += p;
  }
  return sum / 101.0;
}

}  // namespace testutil
