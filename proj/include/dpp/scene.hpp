#pragma once

// Synthetic world: scenes, dense feature maps with a context halo around each
// object, ROI extraction, simulated proposals and a noisy teacher oracle.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpp/geom.hpp"
#include "dpp/objects.hpp"
#include "dpp/rng.hpp"
#include "dpp/sample.hpp"

namespace dpp {

struct SceneGenConfig {
  int width = 64;
  int height = 64;
  int num_classes = 8;
  int max_objects = 4;
  double min_object_size = 8.0;
  double max_object_size = 32.0;
  double overlap_cap = 0.3;

  void validate() const {
    if (num_classes < 2) throw std::invalid_argument("SceneGenConfig: num_classes must be >= 2");
    if (min_object_size < 8.0) {
      throw std::invalid_argument("SceneGenConfig: min_object_size must be >= 8 px");
    }
    if (max_object_size < min_object_size) {
      throw std::invalid_argument("SceneGenConfig: max_object_size < min_object_size");
    }
    if (max_object_size > std::min(width, height)) {
      throw std::invalid_argument("SceneGenConfig: objects larger than the scene");
    }
    if (max_objects < 1) throw std::invalid_argument("SceneGenConfig: max_objects must be >= 1");
    if (!(overlap_cap >= 0.0 && overlap_cap <= 1.0)) {
      throw std::invalid_argument("SceneGenConfig: overlap_cap must be in [0, 1]");
    }
  }
};

struct FeatureConfig {
  int channels = 8;
  double feat_noise = 0.05;
  double sigma_ctx = 0.2;  // context falloff, in box diagonals
  double objectness = 0.6;  // shared signature component in channel 0
  std::uint64_t signature_seed = 7;

  void validate() const {
    if (channels < 4) throw std::invalid_argument("FeatureConfig: channels must be >= 4");
    if (!(feat_noise >= 0.0)) throw std::invalid_argument("FeatureConfig: feat_noise must be >= 0");
    if (!(sigma_ctx > 0.0)) throw std::invalid_argument("FeatureConfig: sigma_ctx must be > 0");
    if (!(objectness >= 0.0 && objectness < 1.0)) {
      throw std::invalid_argument("FeatureConfig: objectness must be in [0, 1)");
    }
  }
};

struct ProposalConfig {
  double anchor_stride = 16.0;
  std::vector<double> anchor_scales{16.0, 32.0};
  std::vector<double> anchor_ratios{0.5, 1.0, 2.0};  // height / width
  int n_jitter = 48;
  double theta_prop = 0.5;

  void validate() const {
    if (!(anchor_stride > 0.0)) throw std::invalid_argument("ProposalConfig: anchor_stride must be > 0");
    for (double s : anchor_scales) {
      if (!(s > 0.0)) throw std::invalid_argument("ProposalConfig: anchor scales must be > 0");
    }
    for (double r : anchor_ratios) {
      if (!(r > 0.0)) throw std::invalid_argument("ProposalConfig: anchor ratios must be > 0");
    }
    if (n_jitter < 0) throw std::invalid_argument("ProposalConfig: n_jitter must be >= 0");
    if (!(theta_prop >= 0.0)) throw std::invalid_argument("ProposalConfig: theta_prop must be >= 0");
  }
};

struct TeacherOracleConfig {
  double theta_noise = 0.2;
  double flip_rate = 0.15;
  double conf_slope = 8.0;
  double conf_offset = 0.5;
  double conf_noise_std = 0.05;
  double miss_rate = 0.0;
  double flip_penalty = 0.2;

  void validate() const {
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(flip_rate) || !prob(miss_rate) || !prob(flip_penalty)) {
      throw std::invalid_argument("TeacherOracleConfig: probabilities must be in [0, 1]");
    }
    if (!(theta_noise >= 0.0)) throw std::invalid_argument("TeacherOracleConfig: theta_noise must be >= 0");
    if (!(conf_noise_std >= 0.0)) {
      throw std::invalid_argument("TeacherOracleConfig: conf_noise_std must be >= 0");
    }
  }
};

struct Scene {
  int scene_id = 0;
  int width = 0;
  int height = 0;
  std::vector<GroundTruthObject> objects;

  friend bool operator==(const Scene&, const Scene&) = default;
};

/// Image-only view of a scene: what training code is allowed to see.
struct SceneView {
  int scene_id = 0;
  int width = 0;
  int height = 0;
};

inline SceneView view_of(const Scene& s) { return {s.scene_id, s.width, s.height}; }

/// Unannotated scene. Its ground truth is held back for evaluation.
class SealedScene {
 public:
  SealedScene() = default;
  explicit SealedScene(Scene s) : scene_(std::move(s)) {}

  SceneView view() const { return view_of(scene_); }
  int scene_id() const { return scene_.scene_id; }

  /// Evaluation hook. Never call from a gradient path.
  const Scene& reveal_for_evaluation() const { return scene_; }

  friend bool operator==(const SealedScene&, const SealedScene&) = default;

 private:
  Scene scene_;
};

inline constexpr int kSceneMaxAttempts = 1000;

inline Scene generate_scene(const SceneGenConfig& cfg, Rng& rng, int scene_id = 0) {
  cfg.validate();
  Scene s;
  s.scene_id = scene_id;
  s.width = cfg.width;
  s.height = cfg.height;
  const int target = rng.uniform_int(1, cfg.max_objects);
  int attempts = 0;
  while (static_cast<int>(s.objects.size()) < target && attempts < kSceneMaxAttempts) {
    ++attempts;
    const double w = rng.uniform(cfg.min_object_size, cfg.max_object_size);
    const double h = rng.uniform(cfg.min_object_size, cfg.max_object_size);
    const double x1 = rng.uniform(0.0, cfg.width - w);
    const double y1 = rng.uniform(0.0, cfg.height - h);
    const int category = static_cast<int>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
    const BBox box{x1, y1, x1 + w, y1 + h};
    const bool clash = std::any_of(s.objects.begin(), s.objects.end(), [&](const auto& o) {
      return iou(o.box, box) > cfg.overlap_cap;
    });
    if (!clash) s.objects.push_back({category, box});
  }
  return s;
}

/// Dense C x H x W grid stored height-major with channels innermost. Cell
/// (x, y) represents the point (x + 0.5, y + 0.5) in image coordinates.
struct FeatureMap {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<double> values;

  FeatureMap() = default;
  FeatureMap(int c, int h, int w)
      : channels(c), height(h), width(w),
        values(static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
               static_cast<std::size_t>(w), 0.0) {}

  double& at(int c, int y, int x) {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  double at(int c, int y, int x) const {
    return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
  const double* cell(int y, int x) const {
    return values.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
};

/// Unit-norm signature of a category, fixed by (category, seed). Channel 0
/// carries a shared objectness component of size `objectness`; the rest is a
/// random direction scaled to keep the vector unit length.
inline std::vector<double> category_signature(int category, int channels, std::uint64_t seed,
                                              double objectness = 0.6) {
  Rng rng(seed, static_cast<std::uint64_t>(category));
  std::vector<double> v(static_cast<std::size_t>(channels));
  double norm = 0.0;
  do {
    norm = 0.0;
    for (std::size_t c = 1; c < v.size(); ++c) {
      v[c] = rng.normal();
      norm += v[c] * v[c];
    }
  } while (norm <= 1e-12);
  const double rest = std::sqrt(1.0 - objectness * objectness) / std::sqrt(norm);
  v[0] = objectness;
  for (std::size_t c = 1; c < v.size(); ++c) v[c] *= rest;
  return v;
}

/// Spatial weight of an object at a point: 1 inside the box, Gaussian falloff
/// in the distance to the box (measured in box diagonals) outside.
inline double context_mask(const BBox& box, double px, double py, double sigma_ctx) {
  const double dx = std::max({box.x1 - px, 0.0, px - box.x2});
  const double dy = std::max({box.y1 - py, 0.0, py - box.y2});
  if (dx == 0.0 && dy == 0.0) return 1.0;
  const double diag = box.diagonal();
  const double r2 = (dx * dx + dy * dy) / (diag * diag);
  return std::exp(-r2 / (2.0 * sigma_ctx * sigma_ctx));
}

inline FeatureMap render_features(const Scene& scene, const FeatureConfig& cfg, Rng& rng) {
  cfg.validate();
  FeatureMap map(cfg.channels, scene.height, scene.width);
  for (const auto& obj : scene.objects) {
    const auto sig = category_signature(obj.category, cfg.channels, cfg.signature_seed, cfg.objectness);
    for (int y = 0; y < map.height; ++y) {
      for (int x = 0; x < map.width; ++x) {
        const double m = context_mask(obj.box, x + 0.5, y + 0.5, cfg.sigma_ctx);
        if (m == 0.0) continue;
        for (int c = 0; c < cfg.channels; ++c) map.at(c, y, x) += m * sig[c];
      }
    }
  }
  if (cfg.feat_noise > 0.0) {
    for (auto& v : map.values) v += cfg.feat_noise * rng.normal();
  }
  return map;
}

/// Bilinear sample at an image-coordinate point; cells outside the map read 0.
/// Written as nested lerps so that equal neighbours are reproduced exactly.
inline void bilinear_sample(const FeatureMap& map, double px, double py, double* out) {
  const double u = px - 0.5;
  const double v = py - 0.5;
  const double fu = std::floor(u);
  const double fv = std::floor(v);
  const int x0 = static_cast<int>(std::clamp(fu, -2.0, static_cast<double>(map.width)));
  const int y0 = static_cast<int>(std::clamp(fv, -2.0, static_cast<double>(map.height)));
  const double ax = u - fu;
  const double ay = v - fv;
  const int C = map.channels;
  auto read = [&](int y, int x, int c) {
    return (x < 0 || x >= map.width || y < 0 || y >= map.height) ? 0.0 : map.cell(y, x)[c];
  };
  for (int c = 0; c < C; ++c) {
    const double f00 = read(y0, x0, c);
    const double f10 = read(y0, x0 + 1, c);
    const double f01 = read(y0 + 1, x0, c);
    const double f11 = read(y0 + 1, x0 + 1, c);
    const double top = f00 + ax * (f10 - f00);
    const double bottom = f01 + ax * (f11 - f01);
    out[c] = top + ay * (bottom - top);
  }
}

inline std::size_t roi_feature_size(const FeatureMap& map, int resolution) {
  return static_cast<std::size_t>(resolution) * resolution * map.channels;
}

/// Writes a P x P x C block: one bilinear sample at each bin center.
inline void roi_align_into(const FeatureMap& map, const BBox& box, int resolution,
                           std::span<double> out) {
  require_valid(box, "roi_align");
  if (resolution < 1) throw std::invalid_argument("roi_align: resolution must be >= 1");
  if (out.size() != roi_feature_size(map, resolution)) {
    throw std::invalid_argument("roi_align: output size mismatch");
  }
  const double bw = box.width() / resolution;
  const double bh = box.height() / resolution;
  double* dst = out.data();
  for (int py = 0; py < resolution; ++py) {
    const double y = box.y1 + (py + 0.5) * bh;
    for (int px = 0; px < resolution; ++px) {
      const double x = box.x1 + (px + 0.5) * bw;
      bilinear_sample(map, x, y, dst);
      dst += map.channels;
    }
  }
}

inline std::vector<double> roi_align(const FeatureMap& map, const BBox& box, int resolution) {
  if (resolution < 1) throw std::invalid_argument("roi_align: resolution must be >= 1");
  std::vector<double> out(roi_feature_size(map, resolution));
  roi_align_into(map, box, resolution, out);
  return out;
}

/// Anchor grid followed by n_jitter perturbed copies of each object, all
/// clipped to the scene; boxes that collapse under clipping are dropped.
inline std::vector<BBox> generate_proposals(const Scene& scene, const ProposalConfig& cfg,
                                            Rng& rng) {
  cfg.validate();
  std::vector<BBox> out;
  auto push = [&](const BBox& b) {
    const auto c = clip(b, scene.width, scene.height);
    if (!c.degenerate) out.push_back(c.box);
  };
  for (double cy = 0.5 * cfg.anchor_stride; cy < scene.height; cy += cfg.anchor_stride) {
    for (double cx = 0.5 * cfg.anchor_stride; cx < scene.width; cx += cfg.anchor_stride) {
      for (double s : cfg.anchor_scales) {
        for (double r : cfg.anchor_ratios) {
          const double w = s / std::sqrt(r);
          const double h = s * std::sqrt(r);
          push({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
        }
      }
    }
  }
  for (const auto& obj : scene.objects) {
    for (int j = 0; j < cfg.n_jitter; ++j) push(perturb_box(obj.box, cfg.theta_prop, rng));
  }
  return out;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Simulated teacher: per object, maybe drop it, perturb the box, maybe flip
/// the category, and derive a confidence from the achieved IoU.
inline std::vector<PseudoDetection> oracle_teacher_labels(const Scene& scene,
                                                          const TeacherOracleConfig& cfg,
                                                          int num_classes, Rng& rng) {
  cfg.validate();
  std::vector<PseudoDetection> out;
  for (const auto& obj : scene.objects) {
    if (rng.bernoulli(cfg.miss_rate)) continue;
    const auto clipped = clip(perturb_box(obj.box, cfg.theta_noise, rng), scene.width, scene.height);
    int category = obj.category;
    const bool flipped = rng.bernoulli(cfg.flip_rate);
    if (flipped) {
      const int shift = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(num_classes - 1)));
      category = (obj.category + shift) % num_classes;
    }
    const double noise = cfg.conf_noise_std > 0.0 ? cfg.conf_noise_std * rng.normal() : 0.0;
    if (clipped.degenerate) continue;
    double conf = sigmoid(cfg.conf_slope * (iou(clipped.box, obj.box) - cfg.conf_offset));
    if (flipped) conf *= 1.0 - cfg.flip_penalty;
    conf = std::clamp(conf + noise, 0.01, 0.99);
    out.push_back({clipped.box, category, conf, scene.scene_id});
  }
  return out;
}

/// Annotated, unannotated and held-out evaluation scenes with the settings
/// needed to re-render every derived quantity.
struct DatasetSplit {
  std::uint64_t seed = 42;
  SceneGenConfig gen;
  FeatureConfig features;
  ProposalConfig proposals;
  TeacherOracleConfig oracle;
  std::vector<Scene> annotated;
  std::vector<SealedScene> unannotated;
  std::vector<SealedScene> test;

  Rng scene_rng(const char* purpose, int scene_id) const {
    return Rng(seed, stream_tag(purpose)).split(static_cast<std::uint64_t>(scene_id));
  }

  FeatureMap render(const Scene& s) const {
    Rng rng = scene_rng("features", s.scene_id);
    return render_features(s, features, rng);
  }
  FeatureMap render(const SealedScene& s) const { return render(s.reveal_for_evaluation()); }

  /// Simulated region proposals; the proposal generator is part of the
  /// environment and may look at hidden ground truth.
  std::vector<BBox> proposals_for(const Scene& s) const {
    Rng rng = scene_rng("proposals", s.scene_id);
    return generate_proposals(s, proposals, rng);
  }
  std::vector<BBox> proposals_for(const SealedScene& s) const {
    return proposals_for(s.reveal_for_evaluation());
  }

  std::vector<PseudoDetection> oracle_labels(const SealedScene& s) const {
    Rng rng = scene_rng("oracle", s.scene_id());
    return oracle_teacher_labels(s.reveal_for_evaluation(), oracle, gen.num_classes, rng);
  }

  friend bool operator==(const DatasetSplit& a, const DatasetSplit& b);
};

inline bool operator==(const ProposalConfig& a, const ProposalConfig& b) {
  return a.anchor_stride == b.anchor_stride && a.anchor_scales == b.anchor_scales &&
         a.anchor_ratios == b.anchor_ratios && a.n_jitter == b.n_jitter &&
         a.theta_prop == b.theta_prop;
}

inline bool same_config(const SceneGenConfig& a, const SceneGenConfig& b) {
  return a.width == b.width && a.height == b.height && a.num_classes == b.num_classes &&
         a.max_objects == b.max_objects && a.min_object_size == b.min_object_size &&
         a.max_object_size == b.max_object_size && a.overlap_cap == b.overlap_cap;
}

inline bool operator==(const DatasetSplit& a, const DatasetSplit& b) {
  const auto& fa = a.features;
  const auto& fb = b.features;
  const auto& oa = a.oracle;
  const auto& ob = b.oracle;
  return a.seed == b.seed && same_config(a.gen, b.gen) && fa.channels == fb.channels &&
         fa.feat_noise == fb.feat_noise && fa.sigma_ctx == fb.sigma_ctx &&
         fa.objectness == fb.objectness &&
         fa.signature_seed == fb.signature_seed && a.proposals == b.proposals &&
         oa.theta_noise == ob.theta_noise && oa.flip_rate == ob.flip_rate &&
         oa.conf_slope == ob.conf_slope && oa.conf_offset == ob.conf_offset &&
         oa.conf_noise_std == ob.conf_noise_std && oa.miss_rate == ob.miss_rate &&
         oa.flip_penalty == ob.flip_penalty && a.annotated == b.annotated &&
         a.unannotated == b.unannotated && a.test == b.test;
}

/// Scene ids: annotated [0, n_a), unannotated [n_a, n_a + n_u), test after.
inline DatasetSplit make_split(int n_annotated, int n_unannotated, const SceneGenConfig& gen,
                               const TeacherOracleConfig& oracle, std::uint64_t seed,
                               int n_test = 0, const FeatureConfig& features = {},
                               const ProposalConfig& proposals = {}) {
  if (n_annotated < 0 || n_unannotated < 0 || n_test < 0) {
    throw std::invalid_argument("make_split: counts must be >= 0");
  }
  gen.validate();
  oracle.validate();
  features.validate();
  proposals.validate();
  DatasetSplit split;
  split.seed = seed;
  split.gen = gen;
  split.features = features;
  split.proposals = proposals;
  split.oracle = oracle;
  int id = 0;
  auto next_scene = [&] {
    Rng rng = split.scene_rng("scene", id);
    return generate_scene(gen, rng, id++);
  };
  for (int i = 0; i < n_annotated; ++i) split.annotated.push_back(next_scene());
  for (int i = 0; i < n_unannotated; ++i) split.unannotated.emplace_back(next_scene());
  for (int i = 0; i < n_test; ++i) split.test.emplace_back(next_scene());
  return split;
}

// ---------------------------------------------------------------------------
// JSON serialization

using json = nlohmann::json;

inline void to_json(json& j, const SceneGenConfig& c) {
  j = json{{"width", c.width},
           {"height", c.height},
           {"num_classes", c.num_classes},
           {"max_objects", c.max_objects},
           {"min_object_size", c.min_object_size},
           {"max_object_size", c.max_object_size},
           {"overlap_cap", c.overlap_cap}};
}

inline void to_json(json& j, const FeatureConfig& c) {
  j = json{{"channels", c.channels},
           {"feat_noise", c.feat_noise},
           {"sigma_ctx", c.sigma_ctx},
           {"objectness", c.objectness},
           {"signature_seed", c.signature_seed}};
}

inline void to_json(json& j, const ProposalConfig& c) {
  j = json{{"anchor_stride", c.anchor_stride},
           {"anchor_scales", c.anchor_scales},
           {"anchor_ratios", c.anchor_ratios},
           {"n_jitter", c.n_jitter},
           {"theta_prop", c.theta_prop}};
}

inline void to_json(json& j, const TeacherOracleConfig& c) {
  j = json{{"theta_noise", c.theta_noise},
           {"flip_rate", c.flip_rate},
           {"conf_slope", c.conf_slope},
           {"conf_offset", c.conf_offset},
           {"conf_noise_std", c.conf_noise_std},
           {"miss_rate", c.miss_rate},
           {"flip_penalty", c.flip_penalty}};
}

/// Reads an object whose keys must all be known. Missing keys keep their
/// defaults; unknown keys are an error.
class StrictObject {
 public:
  StrictObject(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw std::invalid_argument(where_ + ": expected an object");
  }
  ~StrictObject() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items()) {
      if (std::find(seen_.begin(), seen_.end(), key) == seen_.end()) {
        throw std::invalid_argument(where_ + ": unknown key '" + key + "'");
      }
    }
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.emplace_back(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw std::invalid_argument(where_ + "." + key + ": " + e.what());
    }
  }

  /// For nested objects: marks the key and returns the sub-document, if any.
  const json* sub(const char* key) {
    seen_.emplace_back(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  const std::string& where() const { return where_; }

 private:
  const json& j_;
  std::string where_;
  std::vector<std::string> seen_;
};

inline void from_json_strict(const json& j, SceneGenConfig& c, const std::string& where) {
  StrictObject o(j, where);
  o.get("width", c.width);
  o.get("height", c.height);
  o.get("num_classes", c.num_classes);
  o.get("max_objects", c.max_objects);
  o.get("min_object_size", c.min_object_size);
  o.get("max_object_size", c.max_object_size);
  o.get("overlap_cap", c.overlap_cap);
}

inline void from_json_strict(const json& j, FeatureConfig& c, const std::string& where) {
  StrictObject o(j, where);
  o.get("channels", c.channels);
  o.get("feat_noise", c.feat_noise);
  o.get("sigma_ctx", c.sigma_ctx);
  o.get("objectness", c.objectness);
  o.get("signature_seed", c.signature_seed);
}

inline void from_json_strict(const json& j, ProposalConfig& c, const std::string& where) {
  StrictObject o(j, where);
  o.get("anchor_stride", c.anchor_stride);
  o.get("anchor_scales", c.anchor_scales);
  o.get("anchor_ratios", c.anchor_ratios);
  o.get("n_jitter", c.n_jitter);
  o.get("theta_prop", c.theta_prop);
}

inline void from_json_strict(const json& j, TeacherOracleConfig& c, const std::string& where) {
  StrictObject o(j, where);
  o.get("theta_noise", c.theta_noise);
  o.get("flip_rate", c.flip_rate);
  o.get("conf_slope", c.conf_slope);
  o.get("conf_offset", c.conf_offset);
  o.get("conf_noise_std", c.conf_noise_std);
  o.get("miss_rate", c.miss_rate);
  o.get("flip_penalty", c.flip_penalty);
}

inline json scene_to_json(const Scene& s) {
  json objs = json::array();
  for (const auto& o : s.objects) {
    objs.push_back(json::array({o.category, o.box.x1, o.box.y1, o.box.x2, o.box.y2}));
  }
  return json{{"id", s.scene_id}, {"width", s.width}, {"height", s.height}, {"objects", objs}};
}

inline Scene scene_from_json(const json& j) {
  Scene s;
  StrictObject o(j, "scene");
  o.get("id", s.scene_id);
  o.get("width", s.width);
  o.get("height", s.height);
  const json* objs = o.sub("objects");
  if (objs == nullptr || !objs->is_array()) throw std::invalid_argument("scene: missing objects");
  for (const auto& a : *objs) {
    if (!a.is_array() || a.size() != 5) {
      throw std::invalid_argument("scene: object must be [category, x1, y1, x2, y2]");
    }
    GroundTruthObject g;
    g.category = a[0].get<int>();
    g.box = {a[1].get<double>(), a[2].get<double>(), a[3].get<double>(), a[4].get<double>()};
    require_valid(g.box, "scene object");
    s.objects.push_back(g);
  }
  return s;
}

inline constexpr int kSplitFormatVersion = 1;

inline json split_to_json(const DatasetSplit& d) {
  json j;
  j["format"] = "dpp-split";
  j["version"] = kSplitFormatVersion;
  j["seeds"] = json{{"split", d.seed}};
  j["gen_config"] = d.gen;
  j["feature_config"] = d.features;
  j["proposal_config"] = d.proposals;
  j["oracle_cfg"] = d.oracle;
  auto list = [](const auto& scenes, auto&& fn) {
    json a = json::array();
    for (const auto& s : scenes) a.push_back(scene_to_json(fn(s)));
    return a;
  };
  j["annotated"] = list(d.annotated, [](const Scene& s) -> const Scene& { return s; });
  auto reveal = [](const SealedScene& s) -> const Scene& { return s.reveal_for_evaluation(); };
  j["unannotated"] = list(d.unannotated, reveal);
  j["test"] = list(d.test, reveal);
  return j;
}

inline DatasetSplit split_from_json(const json& j) {
  DatasetSplit d;
  StrictObject o(j, "split");
  std::string format;
  int version = 0;
  o.get("format", format);
  o.get("version", version);
  if (format != "dpp-split" || version != kSplitFormatVersion) {
    throw std::invalid_argument("split: unsupported format '" + format + "' version " +
                                std::to_string(version));
  }
  if (const json* seeds = o.sub("seeds")) {
    StrictObject so(*seeds, "split.seeds");
    so.get("split", d.seed);
  }
  if (const json* g = o.sub("gen_config")) from_json_strict(*g, d.gen, "split.gen_config");
  if (const json* f = o.sub("feature_config")) from_json_strict(*f, d.features, "split.feature_config");
  if (const json* p = o.sub("proposal_config")) from_json_strict(*p, d.proposals, "split.proposal_config");
  if (const json* c = o.sub("oracle_cfg")) from_json_strict(*c, d.oracle, "split.oracle_cfg");
  if (const json* a = o.sub("annotated")) {
    for (const auto& s : *a) d.annotated.push_back(scene_from_json(s));
  }
  if (const json* u = o.sub("unannotated")) {
    for (const auto& s : *u) d.unannotated.emplace_back(scene_from_json(s));
  }
  if (const json* t = o.sub("test")) {
    for (const auto& s : *t) d.test.emplace_back(scene_from_json(s));
  }
  return d;
}

}  // namespace dpp
