#pragma once

#include "dpp/geom.hpp"

namespace dpp {

/// Labeled object: category in [0, K) and its box.
struct GroundTruthObject {
  int category = 0;
  BBox box;

  friend bool operator==(const GroundTruthObject&, const GroundTruthObject&) = default;
};

/// Teacher output for one object: box, category and classification confidence.
struct PseudoDetection {
  BBox box;
  int category = 0;
  double confidence = 0.0;
  int scene_id = -1;
};

}  // namespace dpp
