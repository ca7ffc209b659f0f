#pragma once

// Gaussian synthesis of pseudo boxes around ground truth, and the training
// sets for both polishing networks built from it.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "dpp/geom.hpp"
#include "dpp/objects.hpp"
#include "dpp/rng.hpp"

namespace dpp {

struct PolishLearnConfig {
  double theta_cls_c = 0.1;
  double theta_cls_m = 0.4;
  double theta_reg = 0.2;
  int n_cls_c = 32;
  int n_cls_m = 32;
  int n_reg = 32;
  double tau_pos = 0.5;
  int n_prop_neg = -1;  // < 0: same as the number of generated negatives

  void validate() const {
    if (!(theta_cls_c >= 0.0) || !(theta_cls_m >= 0.0) || !(theta_reg >= 0.0)) {
      throw std::invalid_argument("PolishLearnConfig: theta must be >= 0");
    }
    if (!(theta_cls_c < theta_cls_m)) {
      throw std::invalid_argument("PolishLearnConfig: theta_cls_c must be < theta_cls_m");
    }
    if (!(tau_pos > 0.0 && tau_pos < 1.0)) {
      throw std::invalid_argument("PolishLearnConfig: tau_pos must be in (0, 1)");
    }
    if (n_cls_c < 0 || n_cls_m < 0 || n_reg < 0) {
      throw std::invalid_argument("PolishLearnConfig: sample counts must be >= 0");
    }
  }
};

struct CategorySample {
  BBox box;
  int target = 0;  // num_classes means background
};

struct RegressionSample {
  BBox input_box;
  BBox target_box;
};

class SamplingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kPerturbRetries = 100;

/// Applies fixed unit-Gaussian draws: corner_upper += theta * size * t_upper,
/// corner_lower += theta * size * t_lower.
inline BBox perturb_box_with(const BBox& box, double theta,
                             const std::array<double, 4>& t) {
  const double w = box.width();
  const double h = box.height();
  return {box.x1 + theta * w * t[0], box.y1 + theta * h * t[1],
          box.x2 + theta * w * t[2], box.y2 + theta * h * t[3]};
}

inline BBox perturb_box(const BBox& box, double theta, Rng& rng) {
  require_valid(box, "perturb_box");
  if (!(theta >= 0.0)) throw std::invalid_argument("perturb_box: theta must be >= 0");
  if (theta == 0.0) return box;
  for (int attempt = 0; attempt < kPerturbRetries; ++attempt) {
    std::array<double, 4> t{};
    for (auto& v : t) v = rng.normal();
    const BBox out = perturb_box_with(box, theta, t);
    if (out.finite() && out.width() > kMinBoxExtent && out.height() > kMinBoxExtent) return out;
  }
  throw SamplingError("perturb_box: " + std::to_string(kPerturbRetries) +
                      " consecutive degenerate draws at theta=" + std::to_string(theta));
}

/// Positives (small theta, iou >= tau_pos) labeled with the object's class;
/// negatives (large theta, iou < tau_pos) and low-overlap proposals labeled
/// background. Proposal negatives are taken highest IoU first.
inline std::vector<CategorySample> sample_category_set(
    const GroundTruthObject& gt, const std::vector<BBox>& proposals,
    const PolishLearnConfig& cfg, int num_classes, Rng& rng) {
  cfg.validate();
  std::vector<CategorySample> out;
  for (int j = 0; j < cfg.n_cls_c; ++j) {
    const BBox b = perturb_box(gt.box, cfg.theta_cls_c, rng);
    if (iou(b, gt.box) >= cfg.tau_pos) out.push_back({b, gt.category});
  }
  int generated_neg = 0;
  for (int j = 0; j < cfg.n_cls_m; ++j) {
    const BBox b = perturb_box(gt.box, cfg.theta_cls_m, rng);
    if (iou(b, gt.box) < cfg.tau_pos) {
      out.push_back({b, num_classes});
      ++generated_neg;
    }
  }

  struct Scored {
    double overlap;
    std::size_t index;
  };
  std::vector<Scored> low;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const double o = iou(proposals[i], gt.box);
    if (o < cfg.tau_pos) low.push_back({o, i});
  }
  std::stable_sort(low.begin(), low.end(),
                   [](const Scored& a, const Scored& b) { return a.overlap > b.overlap; });
  const std::size_t cap = cfg.n_prop_neg < 0 ? static_cast<std::size_t>(generated_neg)
                                             : static_cast<std::size_t>(cfg.n_prop_neg);
  for (std::size_t i = 0; i < std::min(cap, low.size()); ++i) {
    out.push_back({proposals[low[i].index], num_classes});
  }
  return out;
}

inline std::vector<RegressionSample> sample_regression_set(const GroundTruthObject& gt,
                                                           const PolishLearnConfig& cfg,
                                                           Rng& rng) {
  cfg.validate();
  std::vector<RegressionSample> out;
  out.reserve(static_cast<std::size_t>(cfg.n_reg));
  for (int j = 0; j < cfg.n_reg; ++j) {
    out.push_back({perturb_box(gt.box, cfg.theta_reg, rng), gt.box});
  }
  return out;
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

struct DeviationMoments {
  std::array<MeanStd, 4> coord{};  // x1, y1, x2, y2
};

/// Number of worker threads from DPP_THREADS (default 1). Results never
/// depend on it.
inline unsigned worker_threads() {
  if (const char* env = std::getenv("DPP_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<unsigned>(v);
  }
  return 1;
}

namespace detail {

inline constexpr std::size_t kMonteCarloShards = 16;

/// Running sums for one Monte Carlo shard; combined in shard order.
struct PerturbSums {
  double iou = 0.0;
  double iou_sq = 0.0;
  std::array<double, 4> dev{};
  std::array<double, 4> dev_sq{};
  std::size_t n = 0;
};

inline PerturbSums run_perturb_shard(const BBox& base, double theta, std::size_t n,
                                     std::uint64_t seed, std::size_t shard) {
  Rng rng(seed, shard);
  PerturbSums s;
  const std::array<double, 4> extent{base.width(), base.height(), base.width(),
                                     base.height()};
  const auto b = base.as_array();
  for (std::size_t i = 0; i < n; ++i) {
    const BBox p = perturb_box(base, theta, rng);
    const double o = iou(p, base);
    s.iou += o;
    s.iou_sq += o * o;
    const auto pa = p.as_array();
    for (std::size_t k = 0; k < 4; ++k) {
      const double d = (pa[k] - b[k]) / extent[k];
      s.dev[k] += d;
      s.dev_sq[k] += d * d;
    }
  }
  s.n = n;
  return s;
}

inline PerturbSums monte_carlo_perturb(const BBox& base, double theta, std::size_t n,
                                       std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("monte carlo: N must be >= 1");
  require_valid(base, "monte carlo base box");
  std::vector<PerturbSums> shards(kMonteCarloShards);
  auto shard_size = [&](std::size_t s) {
    return n / kMonteCarloShards + (s < n % kMonteCarloShards ? 1 : 0);
  };
  const unsigned threads = std::min<unsigned>(worker_threads(), kMonteCarloShards);
  if (threads <= 1) {
    for (std::size_t s = 0; s < kMonteCarloShards; ++s) {
      shards[s] = run_perturb_shard(base, theta, shard_size(s), seed, s);
    }
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t s = t; s < kMonteCarloShards; s += threads) {
          shards[s] = run_perturb_shard(base, theta, shard_size(s), seed, s);
        }
      });
    }
    for (auto& th : pool) th.join();
  }
  PerturbSums total;
  for (const auto& s : shards) {
    total.iou += s.iou;
    total.iou_sq += s.iou_sq;
    for (std::size_t k = 0; k < 4; ++k) {
      total.dev[k] += s.dev[k];
      total.dev_sq[k] += s.dev_sq[k];
    }
    total.n += s.n;
  }
  return total;
}

inline MeanStd finish(double sum, double sum_sq, std::size_t n) {
  const double mean = sum / static_cast<double>(n);
  const double var = std::max(0.0, sum_sq / static_cast<double>(n) - mean * mean);
  return {mean, std::sqrt(var)};
}

}  // namespace detail

inline const BBox kUnitBox{0.0, 0.0, 1.0, 1.0};

/// IoU statistics of perturbed boxes against the unperturbed base box.
inline MeanStd monte_carlo_iou_stats(double theta, std::size_t n, std::uint64_t seed,
                                     const BBox& base = kUnitBox) {
  const auto s = detail::monte_carlo_perturb(base, theta, n, seed);
  return detail::finish(s.iou, s.iou_sq, s.n);
}

/// Per-coordinate deviation (perturbed - original) / extent on that axis.
inline DeviationMoments monte_carlo_deviation_stats(double theta, std::size_t n,
                                                    std::uint64_t seed,
                                                    const BBox& base = kUnitBox) {
  const auto s = detail::monte_carlo_perturb(base, theta, n, seed);
  DeviationMoments out;
  for (std::size_t k = 0; k < 4; ++k) {
    out.coord[k] = detail::finish(s.dev[k], s.dev_sq[k], s.n);
  }
  return out;
}

}  // namespace dpp
