#pragma once

// Category and bounding-box polishing networks, and their training on
// Gaussian-synthesized samples from annotated objects.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpp/geom.hpp"
#include "dpp/net.hpp"
#include "dpp/sample.hpp"
#include "dpp/scene.hpp"

namespace dpp {

inline constexpr int kContextBoxCount = 7;

/// The original box, four diagonal shifts by gamma * diagonal (Euclidean),
/// in (+,+), (+,-), (-,+), (-,-) order, then two center-preserving
/// enlargements with side factor (1 + 2 t gamma), t = 1, 2.
inline std::array<BBox, kContextBoxCount> context_boxes(const BBox& box, double gamma) {
  require_valid(box, "context_boxes");
  if (!(gamma >= 0.0)) throw std::invalid_argument("context_boxes: gamma must be >= 0");
  std::array<BBox, kContextBoxCount> out;
  out[0] = box;
  const double s = gamma * box.diagonal() / std::numbers::sqrt2;
  const double signs[4][2] = {{1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
  for (int i = 0; i < 4; ++i) {
    const double dx = signs[i][0] * s;
    const double dy = signs[i][1] * s;
    out[1 + i] = {box.x1 + dx, box.y1 + dy, box.x2 + dx, box.y2 + dy};
  }
  for (int t = 1; t <= 2; ++t) {
    const double f = 1.0 + 2.0 * t * gamma;
    const double hw = 0.5 * box.width() * f;
    const double hh = 0.5 * box.height() * f;
    out[4 + t] = {box.cx() - hw, box.cy() - hh, box.cx() + hw, box.cy() + hh};
  }
  return out;
}

enum class BoxLossKind { giou, l1 };

inline const char* to_string(BoxLossKind k) { return k == BoxLossKind::giou ? "giou" : "l1"; }

inline BoxLossKind box_loss_from_string(const std::string& s) {
  if (s == "giou") return BoxLossKind::giou;
  if (s == "l1") return BoxLossKind::l1;
  throw std::invalid_argument("unknown box loss '" + s + "' (expected giou or l1)");
}

struct CategoryPolisher {
  int resolution = 4;
  int num_classes = 0;  // foreground classes; output has num_classes + 1 logits
  DenseNet net;

  int background() const { return num_classes; }
};

struct BoxPolisher {
  int resolution = 4;
  double gamma = 0.25;
  DenseNet net;
};

inline CategoryPolisher make_category_polisher(int num_classes, int channels, int resolution,
                                               int hidden, Rng& rng) {
  CategoryPolisher p;
  p.resolution = resolution;
  p.num_classes = num_classes;
  p.net = init_net({resolution * resolution * channels, hidden, num_classes + 1}, rng);
  return p;
}

inline BoxPolisher make_box_polisher(int channels, int resolution, double gamma,
                                     const std::vector<int>& hidden, Rng& rng) {
  if (hidden.size() != 3) throw std::invalid_argument("box polisher needs three hidden widths");
  BoxPolisher p;
  p.resolution = resolution;
  p.gamma = gamma;
  p.net = init_net({kContextBoxCount * resolution * resolution * channels, hidden[0], hidden[1],
                    hidden[2], 4},
                   rng);
  // Zero output layer: the untrained polisher is the identity refinement.
  p.net.layers.back().weight.setZero();
  p.net.layers.back().bias.setZero();
  return p;
}

inline Vec category_features(const CategoryPolisher& p, const FeatureMap& map, const BBox& box) {
  Vec x(static_cast<Eigen::Index>(roi_feature_size(map, p.resolution)));
  roi_align_into(map, box, p.resolution, std::span<double>(x.data(), static_cast<std::size_t>(x.size())));
  return x;
}

/// Seven ROI blocks, one per context box, concatenated.
inline Vec box_features(const BoxPolisher& p, const FeatureMap& map, const BBox& box) {
  const std::size_t block = roi_feature_size(map, p.resolution);
  Vec x(static_cast<Eigen::Index>(block * kContextBoxCount));
  const auto boxes = context_boxes(box, p.gamma);
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    roi_align_into(map, boxes[i], p.resolution, std::span<double>(x.data() + i * block, block));
  }
  return x;
}

inline int argmax_lowest(const Eigen::Ref<const Vec>& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = static_cast<int>(i);
  }
  return best;
}

struct CategoryPrediction {
  int label = 0;  // num_classes means background
  Vec probs;      // num_classes + 1 entries

  /// Best foreground class and its probability.
  int foreground_label() const { return argmax_lowest(probs.head(probs.size() - 1)); }
  double foreground_prob() const { return probs[foreground_label()]; }
};

inline CategoryPrediction polish_category(const CategoryPolisher& p, const FeatureMap& map,
                                          const BBox& box) {
  require_valid(box, "polish_category");
  CategoryPrediction out;
  out.probs = softmax(forward(p.net, category_features(p, map, box)));
  out.label = argmax_lowest(out.probs);
  return out;
}

inline Delta to_delta(const Eigen::Ref<const Vec>& v) { return {v[0], v[1], v[2], v[3]}; }

inline Vec to_vec(const Delta& d) {
  Vec v(4);
  v << d.dx, d.dy, d.dw, d.dh;
  return v;
}

inline BBox polish_box(const BoxPolisher& p, const FeatureMap& map, const BBox& box) {
  require_valid(box, "polish_box");
  const Vec d = forward(p.net, box_features(p, map, box));
  return clip(decode_delta(box, to_delta(d)), map.width, map.height).box;
}

struct CategoryExample {
  CategorySample sample;
  const FeatureMap* map = nullptr;
};

struct RegressionExample {
  RegressionSample sample;
  const FeatureMap* map = nullptr;
};

/// Mean cross-entropy over the batch; accumulates its gradient into grads.
inline double category_loss_grad(const CategoryPolisher& p, std::span<const CategoryExample> batch,
                                 NetGrads& grads) {
  if (batch.empty()) throw std::invalid_argument("category batch is empty");
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  ForwardCache cache;
  for (const auto& ex : batch) {
    const Vec logits = forward(p.net, category_features(p, *ex.map, ex.sample.box), &cache);
    const auto lg = softmax_cross_entropy(logits, ex.sample.target);
    total += lg.loss;
    backward(p.net, cache, lg.grad, grads, inv);
  }
  return total * inv;
}

/// Loss of one regression example and its gradient with respect to the
/// network's delta output.
inline LossGrad box_example_loss(const BBox& input_box, const BBox& target_box,
                                 const Eigen::Ref<const Vec>& out, BoxLossKind kind) {
  if (kind == BoxLossKind::l1) {
    return smooth_l1(out, to_vec(encode_delta(input_box, target_box)), 0.0);
  }
  const auto dec = decode_delta_with_jacobian(input_box, to_delta(out));
  const auto lg = giou_loss_grad(dec.box, target_box);
  LossGrad r;
  r.loss = lg.loss;
  r.grad = Vec::Zero(4);
  for (int corner = 0; corner < 4; ++corner) {
    for (int k = 0; k < 4; ++k) r.grad[k] += lg.grad[corner] * dec.jacobian[corner][k];
  }
  return r;
}

inline double box_loss_grad(const BoxPolisher& p, std::span<const RegressionExample> batch,
                            BoxLossKind kind, NetGrads& grads) {
  if (batch.empty()) throw std::invalid_argument("regression batch is empty");
  const double inv = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  ForwardCache cache;
  for (const auto& ex : batch) {
    const Vec out = forward(p.net, box_features(p, *ex.map, ex.sample.input_box), &cache);
    const auto lg = box_example_loss(ex.sample.input_box, ex.sample.target_box, out, kind);
    total += lg.loss;
    backward(p.net, cache, lg.grad, grads, inv);
  }
  return total * inv;
}

inline double train_category_step(CategoryPolisher& p, std::span<const CategoryExample> batch,
                                  OptimState& opt) {
  NetGrads grads = p.net.zeros_like();
  const double loss = category_loss_grad(p, batch, grads);
  if (!std::isfinite(loss)) throw DivergenceError("category polisher: non-finite loss");
  sgd_step(p.net, grads, opt);
  return loss;
}

inline double train_box_step(BoxPolisher& p, std::span<const RegressionExample> batch,
                             OptimState& opt, BoxLossKind kind) {
  NetGrads grads = p.net.zeros_like();
  const double loss = box_loss_grad(p, batch, kind, grads);
  if (!std::isfinite(loss)) throw DivergenceError("box polisher: non-finite loss");
  sgd_step(p.net, grads, opt);
  return loss;
}

// ---------------------------------------------------------------------------
// Dual polishing learning on annotated scenes

struct PolishConfig {
  int cls_resolution = 4;
  int box_resolution = 4;
  double gamma = 0.25;
  int cls_hidden = 128;
  std::vector<int> box_hidden{128, 128, 64};
  OptimConfig cls_opt{0.01, 0.9, 1e-4};
  OptimConfig box_opt{0.01, 0.9, 1e-4};
  BoxLossKind loss = BoxLossKind::giou;
  int batch_size = 16;
  bool enable_category = true;
  bool enable_box = true;
  // Offline schedule: passes over the annotated scenes, the last
  // *_decay_epochs of which run at lr * decay_factor.
  int cls_epochs = 8;
  int box_epochs = 12;
  int cls_decay_epochs = 2;
  int box_decay_epochs = 3;
  double decay_factor = 0.1;

  void validate() const {
    if (cls_resolution < 1 || box_resolution < 1) {
      throw std::invalid_argument("PolishConfig: resolutions must be >= 1");
    }
    if (!(gamma >= 0.0)) throw std::invalid_argument("PolishConfig: gamma must be >= 0");
    if (cls_hidden < 1 || box_hidden.size() != 3 ||
        std::any_of(box_hidden.begin(), box_hidden.end(), [](int h) { return h < 1; })) {
      throw std::invalid_argument("PolishConfig: hidden widths must be >= 1 (three for the box net)");
    }
    if (batch_size < 1) throw std::invalid_argument("PolishConfig: batch_size must be >= 1");
    if (cls_epochs < 0 || box_epochs < 0 || cls_decay_epochs < 0 || box_decay_epochs < 0) {
      throw std::invalid_argument("PolishConfig: epoch counts must be >= 0");
    }
    if (!(decay_factor > 0.0 && decay_factor <= 1.0)) {
      throw std::invalid_argument("PolishConfig: decay_factor must be in (0, 1]");
    }
  }
};

/// Category and regression samples drawn for every object of one scene.
/// Proposal negatives are restricted to proposals below tau_pos against
/// every object in the scene.
struct ScenePolishSamples {
  std::vector<CategorySample> category;
  std::vector<RegressionSample> regression;
};

inline ScenePolishSamples sample_scene_polish_sets(const Scene& scene,
                                                   const std::vector<BBox>& proposals,
                                                   const PolishLearnConfig& cfg, int num_classes,
                                                   Rng& rng) {
  std::vector<BBox> background;
  for (const auto& b : proposals) {
    const bool hits = std::any_of(scene.objects.begin(), scene.objects.end(),
                                  [&](const auto& o) { return iou(b, o.box) >= cfg.tau_pos; });
    if (!hits) background.push_back(b);
  }
  ScenePolishSamples out;
  for (const auto& obj : scene.objects) {
    auto cat = sample_category_set(obj, background, cfg, num_classes, rng);
    out.category.insert(out.category.end(), cat.begin(), cat.end());
    auto reg = sample_regression_set(obj, cfg, rng);
    out.regression.insert(out.regression.end(), reg.begin(), reg.end());
  }
  return out;
}

/// Both polishers with their optimizer state.
struct PolisherPair {
  CategoryPolisher category;
  BoxPolisher box;
  OptimState category_opt;
  OptimState box_opt;
};

inline PolisherPair make_polishers(const PolishConfig& cfg, int num_classes, int channels, Rng& rng) {
  cfg.validate();
  PolisherPair p;
  Rng cat_rng = rng.split("category-polisher");
  Rng box_rng = rng.split("box-polisher");
  p.category = make_category_polisher(num_classes, channels, cfg.cls_resolution, cfg.cls_hidden, cat_rng);
  p.box = make_box_polisher(channels, cfg.box_resolution, cfg.gamma, cfg.box_hidden, box_rng);
  p.category_opt = OptimState(p.category.net, cfg.cls_opt);
  p.box_opt = OptimState(p.box.net, cfg.box_opt);
  return p;
}

struct PolishStepLosses {
  double category = 0.0;  // L_pc
  double box = 0.0;       // L_pr
};

/// One pass of minibatch steps over the given examples, in the given order.
/// Returns the mean of per-step losses (0 for a disabled or empty side).
inline PolishStepLosses train_polishers_on(PolisherPair& p, const PolishConfig& cfg,
                                           std::span<const CategoryExample> cat,
                                           std::span<const RegressionExample> reg) {
  PolishStepLosses out;
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  if (cfg.enable_category && !cat.empty()) {
    double sum = 0.0;
    int steps = 0;
    for (std::size_t i = 0; i < cat.size(); i += bs) {
      sum += train_category_step(p.category, cat.subspan(i, std::min(bs, cat.size() - i)), p.category_opt);
      ++steps;
    }
    out.category = sum / steps;
  }
  if (cfg.enable_box && !reg.empty()) {
    double sum = 0.0;
    int steps = 0;
    for (std::size_t i = 0; i < reg.size(); i += bs) {
      sum += train_box_step(p.box, reg.subspan(i, std::min(bs, reg.size() - i)), p.box_opt, cfg.loss);
      ++steps;
    }
    out.box = sum / steps;
  }
  return out;
}

struct EpochLosses {
  int epoch = 0;
  std::size_t category_examples = 0;
  std::size_t box_examples = 0;
  PolishStepLosses losses;
};

/// Offline dual polishing learning over the annotated scenes of a split.
/// Each epoch draws fresh samples for every object, shuffles them and runs
/// one minibatch pass per polisher that is still inside its schedule.
template <class EpochSink>
void train_polishers_offline(PolisherPair& p, const PolishConfig& cfg,
                             const PolishLearnConfig& learn, const DatasetSplit& split, Rng& rng,
                             EpochSink&& on_epoch) {
  cfg.validate();
  learn.validate();
  std::vector<FeatureMap> maps;
  std::vector<std::vector<BBox>> proposals;
  maps.reserve(split.annotated.size());
  for (const auto& s : split.annotated) {
    maps.push_back(split.render(s));
    proposals.push_back(split.proposals_for(s));
  }
  const int epochs = std::max(cfg.enable_category ? cfg.cls_epochs : 0,
                              cfg.enable_box ? cfg.box_epochs : 0);
  const int num_classes = split.gen.num_classes;
  for (int e = 0; e < epochs; ++e) {
    if (e == cfg.cls_epochs - cfg.cls_decay_epochs) p.category_opt.cfg.lr *= cfg.decay_factor;
    if (e == cfg.box_epochs - cfg.box_decay_epochs) p.box_opt.cfg.lr *= cfg.decay_factor;
    std::vector<CategoryExample> cat;
    std::vector<RegressionExample> reg;
    for (std::size_t i = 0; i < split.annotated.size(); ++i) {
      const auto s = sample_scene_polish_sets(split.annotated[i], proposals[i], learn, num_classes, rng);
      for (const auto& c : s.category) cat.push_back({c, &maps[i]});
      for (const auto& r : s.regression) reg.push_back({r, &maps[i]});
    }
    rng.shuffle(cat.begin(), cat.end());
    rng.shuffle(reg.begin(), reg.end());
    if (e >= cfg.cls_epochs) cat.clear();
    if (e >= cfg.box_epochs) reg.clear();
    EpochLosses rec{e, cat.size(), reg.size(), {}};
    try {
      rec.losses = train_polishers_on(p, cfg, cat, reg);
    } catch (const DivergenceError& err) {
      throw DivergenceError(std::string(err.what()) + " at epoch " + std::to_string(e));
    }
    on_epoch(rec);
  }
}

// ---------------------------------------------------------------------------
// Checkpoints: net format plus a JSON sidecar with P, gamma and K.

inline nlohmann::json polisher_sidecar(const CategoryPolisher& c, const BoxPolisher& b) {
  return {{"format", "dpp-polisher"},
          {"version", 1},
          {"num_classes", c.num_classes},
          {"category_resolution", c.resolution},
          {"box_resolution", b.resolution},
          {"gamma", b.gamma}};
}

/// Rebuilds both polishers from the sidecar and the two network checkpoints.
/// Optimizer state is not restored.
inline PolisherPair restore_polishers(const nlohmann::json& sidecar, const nlohmann::json& category_net,
                                      const nlohmann::json& box_net) {
  if (sidecar.value("format", "") != "dpp-polisher" || sidecar.value("version", 0) != 1) {
    throw std::invalid_argument("polisher sidecar: unsupported format or version");
  }
  PolisherPair p;
  p.category.num_classes = sidecar.at("num_classes").get<int>();
  p.category.resolution = sidecar.at("category_resolution").get<int>();
  p.category.net = net_from_json(category_net);
  p.box.resolution = sidecar.at("box_resolution").get<int>();
  p.box.gamma = sidecar.at("gamma").get<double>();
  p.box.net = net_from_json(box_net);
  if (p.category.net.output_size() != static_cast<std::size_t>(p.category.num_classes + 1) ||
      p.box.net.output_size() != 4) {
    throw std::invalid_argument("polisher checkpoint: output sizes do not match the sidecar");
  }
  return p;
}

}  // namespace dpp
