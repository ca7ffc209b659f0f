#pragma once

// Axis-aligned box geometry in continuous image coordinates (x right, y down).
// Areas are (x2 - x1) * (y2 - y1); there is no pixel-center convention.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace dpp {

/// Smallest extent a decoded or clipped box may have, in pixels.
inline constexpr double kMinBoxExtent = 1e-3;

/// Largest |dw|, |dh| accepted by decode_delta before clamping.
inline constexpr double kMaxLogScale = 10.0;

struct BBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  double diagonal() const { return std::hypot(width(), height()); }

  bool finite() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) &&
           std::isfinite(y2);
  }
  bool valid() const { return finite() && x1 < x2 && y1 < y2; }

  std::array<double, 4> as_array() const { return {x1, y1, x2, y2}; }
  static BBox from_array(const std::array<double, 4>& a) {
    return {a[0], a[1], a[2], a[3]};
  }

  friend bool operator==(const BBox&, const BBox&) = default;
};

/// Box-delta offsets: center shift normalized by the reference extent and
/// log extent ratios.
struct Delta {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;

  std::array<double, 4> as_array() const { return {dx, dy, dw, dh}; }
  static Delta from_array(const std::array<double, 4>& a) {
    return {a[0], a[1], a[2], a[3]};
  }

  friend bool operator==(const Delta&, const Delta&) = default;
};

struct ScoredBox {
  BBox box;
  double score = 0.0;
  int category = 0;
};

class InvalidBoxError : public std::invalid_argument {
 public:
  explicit InvalidBoxError(const std::string& what)
      : std::invalid_argument(what) {}
};

inline void require_valid(const BBox& b, const char* what) {
  if (!b.valid()) {
    throw InvalidBoxError(std::string(what) + ": invalid box (" +
                          std::to_string(b.x1) + ", " + std::to_string(b.y1) +
                          ", " + std::to_string(b.x2) + ", " +
                          std::to_string(b.y2) + ")");
  }
}

inline double intersection_area(const BBox& a, const BBox& b) {
  const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

inline BBox enclosing_box(const BBox& a, const BBox& b) {
  return {std::min(a.x1, b.x1), std::min(a.y1, b.y1), std::max(a.x2, b.x2),
          std::max(a.y2, b.y2)};
}

inline double iou(const BBox& a, const BBox& b) {
  require_valid(a, "iou");
  require_valid(b, "iou");
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return inter / uni;
}

inline double giou(const BBox& a, const BBox& b) {
  require_valid(a, "giou");
  require_valid(b, "giou");
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  const double enclosing = enclosing_box(a, b).area();
  return inter / uni - (enclosing - uni) / enclosing;
}

struct GiouLossGrad {
  double loss = 0.0;
  std::array<double, 4> grad{};  // d loss / d (x1, y1, x2, y2) of pred
};

/// loss = 1 - giou(pred, target) and its gradient with respect to the
/// predicted corners. Where a max/min selection is tied the target's branch
/// is taken, i.e. the selection is treated as locally constant.
inline GiouLossGrad giou_loss_grad(const BBox& pred, const BBox& target) {
  require_valid(pred, "giou_loss_grad(pred)");
  require_valid(target, "giou_loss_grad(target)");

  const double pw = pred.width();
  const double ph = pred.height();
  const double area_p = pw * ph;
  const double area_t = target.area();

  const double ix1 = std::max(pred.x1, target.x1);
  const double iy1 = std::max(pred.y1, target.y1);
  const double ix2 = std::min(pred.x2, target.x2);
  const double iy2 = std::min(pred.y2, target.y2);
  const double iw = ix2 - ix1;
  const double ih = iy2 - iy1;
  const bool overlap = iw > 0.0 && ih > 0.0;
  const double inter = overlap ? iw * ih : 0.0;
  const double uni = area_p + area_t - inter;

  const BBox c = enclosing_box(pred, target);
  const double cw = c.width();
  const double ch = c.height();
  const double enclosing = cw * ch;

  GiouLossGrad out;
  out.loss = 2.0 - inter / uni - uni / enclosing;

  // Partial derivatives of intersection, pred area and enclosing area.
  std::array<double, 4> d_inter{};
  if (overlap) {
    if (pred.x1 > target.x1) d_inter[0] = -ih;
    if (pred.y1 > target.y1) d_inter[1] = -iw;
    if (pred.x2 < target.x2) d_inter[2] = ih;
    if (pred.y2 < target.y2) d_inter[3] = iw;
  }
  const std::array<double, 4> d_area{-ph, -pw, ph, pw};
  std::array<double, 4> d_enc{};
  if (pred.x1 < target.x1) d_enc[0] = -ch;
  if (pred.y1 < target.y1) d_enc[1] = -cw;
  if (pred.x2 > target.x2) d_enc[2] = ch;
  if (pred.y2 > target.y2) d_enc[3] = cw;

  for (std::size_t k = 0; k < 4; ++k) {
    const double d_uni = d_area[k] - d_inter[k];
    const double d_iou = (d_inter[k] * uni - inter * d_uni) / (uni * uni);
    const double d_ratio =
        (d_uni * enclosing - uni * d_enc[k]) / (enclosing * enclosing);
    out.grad[k] = -d_iou - d_ratio;
  }
  return out;
}

inline Delta encode_delta(const BBox& ref, const BBox& target) {
  require_valid(ref, "encode_delta(ref)");
  require_valid(target, "encode_delta(target)");
  const double w = ref.width();
  const double h = ref.height();
  return {(target.cx() - ref.cx()) / w, (target.cy() - ref.cy()) / h,
          std::log(target.width() / w), std::log(target.height() / h)};
}

struct DecodedBox {
  BBox box;
  bool clamped = false;  // an extent fell below kMinBoxExtent or dw/dh saturated
  /// d(x1, y1, x2, y2) / d(dx, dy, dw, dh), row per corner coordinate.
  std::array<std::array<double, 4>, 4> jacobian{};
};

/// Decodes a delta against a reference box. Extents below kMinBoxExtent are
/// clamped to it and flagged; the clamped components carry zero gradient.
inline DecodedBox decode_delta_with_jacobian(const BBox& ref, const Delta& d) {
  require_valid(ref, "decode_delta(ref)");
  if (!std::isfinite(d.dx) || !std::isfinite(d.dy) || !std::isfinite(d.dw) ||
      !std::isfinite(d.dh)) {
    throw std::invalid_argument("decode_delta: non-finite delta");
  }
  const double w = ref.width();
  const double h = ref.height();
  DecodedBox out;

  const double dw = std::clamp(d.dw, -kMaxLogScale, kMaxLogScale);
  const double dh = std::clamp(d.dh, -kMaxLogScale, kMaxLogScale);
  const bool dw_sat = dw != d.dw;
  const bool dh_sat = dh != d.dh;

  const double cx = ref.cx() + d.dx * w;
  const double cy = ref.cy() + d.dy * h;
  double nw = w * std::exp(dw);
  double nh = h * std::exp(dh);
  bool w_clamped = dw_sat;
  bool h_clamped = dh_sat;
  if (nw < kMinBoxExtent) {
    nw = kMinBoxExtent;
    w_clamped = true;
  }
  if (nh < kMinBoxExtent) {
    nh = kMinBoxExtent;
    h_clamped = true;
  }
  out.clamped = w_clamped || h_clamped;
  out.box = {cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh};

  auto& j = out.jacobian;
  const double gw = w_clamped ? 0.0 : 0.5 * nw;
  const double gh = h_clamped ? 0.0 : 0.5 * nh;
  j[0] = {w, 0.0, -gw, 0.0};
  j[1] = {0.0, h, 0.0, -gh};
  j[2] = {w, 0.0, gw, 0.0};
  j[3] = {0.0, h, 0.0, gh};
  return out;
}

inline BBox decode_delta(const BBox& ref, const Delta& d) {
  return decode_delta_with_jacobian(ref, d).box;
}

struct ClippedBox {
  BBox box;
  bool degenerate = false;
};

inline ClippedBox clip(const BBox& b, double width, double height) {
  if (!(width > 0.0) || !(height > 0.0)) {
    throw std::invalid_argument("clip: image extent must be positive");
  }
  ClippedBox out;
  out.box = {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
             std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
  auto collapse = [&](double& lo, double& hi, double limit) {
    if (hi - lo >= kMinBoxExtent) return;
    out.degenerate = true;
    lo = std::min(lo, limit - kMinBoxExtent);
    hi = lo + kMinBoxExtent;
  };
  collapse(out.box.x1, out.box.x2, width);
  collapse(out.box.y1, out.box.y2, height);
  return out;
}

/// Greedy per-category suppression. Ordering is score descending, then x1
/// ascending, then y1 ascending; the result keeps that order.
inline std::vector<ScoredBox> nms(const std::vector<ScoredBox>& dets,
                                  double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& da = dets[a];
    const auto& db = dets[b];
    if (da.score != db.score) return da.score > db.score;
    if (da.box.x1 != db.box.x1) return da.box.x1 < db.box.x1;
    return da.box.y1 < db.box.y1;
  });

  std::vector<ScoredBox> kept;
  for (std::size_t idx : order) {
    const auto& cand = dets[idx];
    if (!std::isfinite(cand.score)) {
      throw std::invalid_argument("nms: non-finite score");
    }
    bool suppressed = false;
    for (const auto& k : kept) {
      if (k.category == cand.category && iou(k.box, cand.box) > iou_thresh) {
        suppressed = true;
        break;
      }
    }
    if (!suppressed) kept.push_back(cand);
  }
  return kept;
}

}  // namespace dpp
