#pragma once

// Toy teacher-student loop: proposal-based detector heads, an EMA teacher,
// disentangled selection of polished pseudo labels, and the joint objective
// L = L_s + lambda_u * L_u + L_p.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpp/geom.hpp"
#include "dpp/metrics.hpp"
#include "dpp/net.hpp"
#include "dpp/polish.hpp"
#include "dpp/sample.hpp"
#include "dpp/scene.hpp"

namespace dpp {

struct DetectorHeads {
  int resolution = 4;
  int num_classes = 0;
  DenseNet cls;  // P*P*C -> H -> K + 1
  DenseNet reg;  // P*P*C -> H -> 4, class agnostic

  friend bool operator==(const DetectorHeads&, const DetectorHeads&) = default;
};

inline DetectorHeads make_heads(int num_classes, int channels, int resolution, int hidden, Rng& rng) {
  DetectorHeads h;
  h.resolution = resolution;
  h.num_classes = num_classes;
  const int in = resolution * resolution * channels;
  Rng cls_rng = rng.split("cls-head");
  Rng reg_rng = rng.split("reg-head");
  h.cls = init_net({in, hidden, num_classes + 1}, cls_rng);
  h.reg = init_net({in, hidden, 4}, reg_rng);
  return h;
}

struct HeadGrads {
  NetGrads cls;
  NetGrads reg;

  explicit HeadGrads(const DetectorHeads& h) : cls(h.cls.zeros_like()), reg(h.reg.zeros_like()) {}
};

inline Vec head_features(const DetectorHeads& h, const FeatureMap& map, const BBox& box) {
  Vec x(static_cast<Eigen::Index>(roi_feature_size(map, h.resolution)));
  roi_align_into(map, box, h.resolution, std::span<double>(x.data(), static_cast<std::size_t>(x.size())));
  return x;
}

struct SelectionConfig {
  double eta = 0.5;
  double tau_cls = 0.9;

  void validate() const {
    if (!(eta >= 0.0 && eta <= 1.0) || !(tau_cls >= 0.0 && tau_cls <= 1.0)) {
      throw std::invalid_argument("SelectionConfig: thresholds must be in [0, 1]");
    }
  }
};

/// Which parts of polishing feed pseudo supervision.
struct PolishUsage {
  bool category = true;
  bool box = true;
  bool disentangle = true;
};

struct PseudoSupervision {
  std::vector<GroundTruthObject> cls_set;  // polished box + polished category
  std::vector<BBox> reg_set;
};

struct DetectionLoss {
  double cls = 0.0;
  double reg = 0.0;
  double total() const { return cls + reg; }
};

struct LossOptions {
  double fg_iou = 0.5;
  double bg_ratio = 3.0;   // background weight capped at bg_ratio x positives
  double reg_beta = 1.0 / 9.0;
};

/// Classification over all proposals against cls_targets and smooth-l1
/// regression of proposals matched (IoU >= fg_iou) to reg_targets.
/// Background proposals are down-weighted so their total weight is at most
/// bg_ratio times the positives' (all background when nothing matches).
/// An empty target list contributes 0 for its term. Gradients are scaled by
/// `scale` and accumulated into grads when given.
inline DetectionLoss detection_loss(const DetectorHeads& h, const FeatureMap& map,
                                    std::span<const BBox> proposals,
                                    std::span<const GroundTruthObject> cls_targets,
                                    std::span<const BBox> reg_targets, const LossOptions& opt,
                                    HeadGrads* grads, double scale = 1.0) {
  DetectionLoss out;
  if (proposals.empty()) return out;
  std::vector<Vec> feats;
  feats.reserve(proposals.size());
  for (const auto& p : proposals) feats.push_back(head_features(h, map, p));

  if (!cls_targets.empty()) {
    std::vector<int> label(proposals.size(), h.num_classes);
    long n_pos = 0;
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      double best = 0.0;
      int arg = -1;
      for (std::size_t t = 0; t < cls_targets.size(); ++t) {
        const double o = iou(proposals[i], cls_targets[t].box);
        if (o > best) {
          best = o;
          arg = static_cast<int>(t);
        }
      }
      if (arg >= 0 && best >= opt.fg_iou) {
        label[i] = cls_targets[static_cast<std::size_t>(arg)].category;
        ++n_pos;
      }
    }
    const long n_bg = static_cast<long>(proposals.size()) - n_pos;
    const double w_bg = (n_pos == 0 || n_bg == 0)
                            ? 1.0
                            : std::min(1.0, opt.bg_ratio * static_cast<double>(n_pos) / static_cast<double>(n_bg));
    const double denom = static_cast<double>(n_pos) + w_bg * static_cast<double>(n_bg);
    ForwardCache cache;
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      const double w = (label[i] == h.num_classes ? w_bg : 1.0) / denom;
      const Vec logits = forward(h.cls, feats[i], grads ? &cache : nullptr);
      const auto lg = softmax_cross_entropy(logits, label[i]);
      out.cls += w * lg.loss;
      if (grads) backward(h.cls, cache, lg.grad, grads->cls, scale * w);
    }
  }

  if (!reg_targets.empty()) {
    std::vector<std::pair<std::size_t, BBox>> pos;
    for (std::size_t i = 0; i < proposals.size(); ++i) {
      double best = 0.0;
      int arg = -1;
      for (std::size_t t = 0; t < reg_targets.size(); ++t) {
        const double o = iou(proposals[i], reg_targets[t]);
        if (o > best) {
          best = o;
          arg = static_cast<int>(t);
        }
      }
      if (arg >= 0 && best >= opt.fg_iou) pos.emplace_back(i, reg_targets[static_cast<std::size_t>(arg)]);
    }
    if (!pos.empty()) {
      const double inv = 1.0 / static_cast<double>(pos.size());
      ForwardCache cache;
      for (const auto& [i, target] : pos) {
        const Vec pred = forward(h.reg, feats[i], grads ? &cache : nullptr);
        const auto lg = smooth_l1(pred, to_vec(encode_delta(proposals[i], target)), opt.reg_beta);
        out.reg += inv * lg.loss;
        if (grads) backward(h.reg, cache, lg.grad, grads->reg, scale * inv);
      }
    }
  }
  return out;
}

/// L_s on an annotated scene.
inline DetectionLoss supervised_loss(const DetectorHeads& h, const Scene& scene, const FeatureMap& map,
                                     std::span<const BBox> proposals, const LossOptions& opt,
                                     HeadGrads* grads, double scale = 1.0) {
  std::vector<BBox> boxes;
  for (const auto& o : scene.objects) boxes.push_back(o.box);
  return detection_loss(h, map, proposals, scene.objects, boxes, opt, grads, scale);
}

/// L_u = L_u^c + L_u^r from pseudo supervision; cls is L_u^c, reg is L_u^r.
inline DetectionLoss unsupervised_loss(const DetectorHeads& h, const FeatureMap& map,
                                       std::span<const BBox> proposals, const PseudoSupervision& sup,
                                       const LossOptions& opt, HeadGrads* grads, double scale = 1.0) {
  return detection_loss(h, map, proposals, sup.cls_set, sup.reg_set, opt, grads, scale);
}

/// Proposal classification + class-agnostic box regression, score
/// filtering and per-category NMS. Confidence is the best foreground
/// softmax probability.
inline std::vector<PseudoDetection> detect(const DetectorHeads& h, const FeatureMap& map,
                                           std::span<const BBox> proposals, double score_thresh,
                                           double nms_thresh, int scene_id = -1) {
  std::vector<ScoredBox> cands;
  for (const auto& p : proposals) {
    const Vec x = head_features(h, map, p);
    const Vec probs = softmax(forward(h.cls, x));
    const int cat = argmax_lowest(probs.head(h.num_classes));
    const double score = probs[cat];
    if (score < score_thresh) continue;
    const auto c = clip(decode_delta(p, to_delta(forward(h.reg, x))), map.width, map.height);
    if (c.degenerate) continue;
    cands.push_back({c.box, score, cat});
  }
  std::vector<PseudoDetection> out;
  for (const auto& k : nms(cands, nms_thresh)) out.push_back({k.box, k.category, k.score, scene_id});
  return out;
}

/// Candidates are detections with confidence > eta. reg_set takes every
/// candidate's (polished) box; cls_set takes candidates whose polished
/// category is foreground with probability > tau_cls. Without
/// disentanglement the category is polished on the polished box and only
/// cls_set survivors feed regression.
inline PseudoSupervision select_disentangled(std::span<const PseudoDetection> dets,
                                             const CategoryPolisher& cat_p, const BoxPolisher& box_p,
                                             const FeatureMap& map, const SelectionConfig& sel,
                                             const PolishUsage& use = {}) {
  sel.validate();
  PseudoSupervision sup;
  for (const auto& d : dets) {
    if (!(d.confidence > sel.eta)) continue;
    const BBox box = use.box ? polish_box(box_p, map, d.box) : d.box;
    std::optional<int> category;
    if (use.category) {
      const auto pred = polish_category(cat_p, map, use.disentangle ? d.box : box);
      if (pred.label != cat_p.background() && pred.probs[pred.label] > sel.tau_cls) category = pred.label;
    } else {
      category = d.category;
    }
    if (category) sup.cls_set.push_back({*category, box});
    if (use.disentangle || category) sup.reg_set.push_back(box);
  }
  return sup;
}

// ---------------------------------------------------------------------------
// Training loop

struct SsodConfig {
  int iterations = 1500;
  int burn_in = 300;
  double lambda_u = 2.0;
  SelectionConfig selection;
  double ema_momentum = 0.99;
  double score_thresh = 0.3;
  double nms_thresh = 0.5;
  double eval_score_thresh = 0.05;
  int roi_resolution = 4;
  int hidden = 64;
  OptimConfig opt{0.01, 0.9, 1e-4};
  LossOptions loss;
  int eval_every = 0;  // 0: evaluate only at the end
  bool evaluate = true;
  PolishUsage use;
  bool train_polishers = true;
  PolishLearnConfig learn;
  PolishConfig polish;

  void validate() const {
    if (iterations < 0 || burn_in < 0) throw std::invalid_argument("SsodConfig: iteration counts must be >= 0");
    if (!(lambda_u >= 0.0)) throw std::invalid_argument("SsodConfig: lambda_u must be >= 0");
    if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) {
      throw std::invalid_argument("SsodConfig: ema_momentum must be in [0, 1]");
    }
    if (roi_resolution < 1 || hidden < 1) throw std::invalid_argument("SsodConfig: head sizes must be >= 1");
    if (eval_every < 0) throw std::invalid_argument("SsodConfig: eval_every must be >= 0");
    selection.validate();
    learn.validate();
    polish.validate();
  }

  bool polishing_used() const { return use.category || use.box; }
};

struct EvalPoint {
  double ap50 = 0.0;
  double ap50_95 = 0.0;
};

struct HistoryRecord {
  int iteration = 0;
  double l_s = 0.0;
  double l_u_c = 0.0;
  double l_u_r = 0.0;
  double l_pc = 0.0;
  double l_pr = 0.0;
  long n_cls_pseudo = 0;
  long n_reg_pseudo = 0;
  std::optional<EvalPoint> eval;

  double total(double lambda_u) const { return l_s + lambda_u * (l_u_c + l_u_r) + l_pc + l_pr; }
};

inline nlohmann::json to_json(const HistoryRecord& r, double lambda_u) {
  nlohmann::json j{{"iteration", r.iteration},
                   {"L", r.total(lambda_u)},
                   {"L_s", r.l_s},
                   {"L_u_c", r.l_u_c},
                   {"L_u_r", r.l_u_r},
                   {"L_pc", r.l_pc},
                   {"L_pr", r.l_pr},
                   {"n_cls_pseudo", r.n_cls_pseudo},
                   {"n_reg_pseudo", r.n_reg_pseudo}};
  if (r.eval) {
    j["eval"] = {{"ap50", r.eval->ap50}, {"ap50_95", r.eval->ap50_95}};
  } else {
    j["eval"] = nullptr;
  }
  return j;
}

struct SsodResult {
  DetectorHeads student;
  DetectorHeads teacher;
  PolisherPair polishers;
  std::vector<HistoryRecord> history;
  std::optional<ApResult> final_ap;
};

/// Evaluation hook: reads hidden ground truth of held-out scenes.
inline ApResult evaluate_heads(const DetectorHeads& h, const DatasetSplit& split, std::span<const SealedScene> scenes,
                               double score_thresh, double nms_thresh) {
  std::vector<Detection> dets;
  SceneIndex gt;
  for (const auto& s : scenes) {
    gt.add(s.reveal_for_evaluation());
    const auto map = split.render(s);
    const auto props = split.proposals_for(s);
    for (const auto& d : detect(h, map, props, score_thresh, nms_thresh, s.scene_id())) {
      dets.push_back({d.scene_id, d.box, d.category, d.confidence});
    }
  }
  return average_precision(dets, gt, split.gen.num_classes);
}

using HistorySink = std::function<void(const HistoryRecord&)>;

inline SsodResult run_ssod(const DatasetSplit& split, const SsodConfig& cfg, std::uint64_t seed,
                           const HistorySink& sink = {}) {
  cfg.validate();
  if (split.annotated.empty()) throw std::invalid_argument("run_ssod: no annotated scenes");
  const bool unsupervised = cfg.lambda_u > 0.0 && !split.unannotated.empty();
  const int K = split.gen.num_classes;
  const int C = split.features.channels;

  const Rng root(seed, stream_tag("ssod"));
  Rng init_rng = root.split("init");
  Rng pick_rng = root.split("pick-annotated");
  Rng unl_rng = root.split("pick-unannotated");
  Rng polish_rng = root.split("polish-samples");
  Rng polisher_init = root.split("polisher-init");

  SsodResult res;
  res.student = make_heads(K, C, cfg.roi_resolution, cfg.hidden, init_rng);
  res.teacher = res.student;
  res.polishers = make_polishers(cfg.polish, K, C, polisher_init);
  OptimState cls_opt(res.student.cls, cfg.opt);
  OptimState reg_opt(res.student.reg, cfg.opt);

  PolishConfig pcfg = cfg.polish;
  pcfg.enable_category = cfg.use.category;
  pcfg.enable_box = cfg.use.box;

  auto eval_now = [&]() -> EvalPoint {
    const auto ap = evaluate_heads(res.teacher, split, split.test, cfg.eval_score_thresh, cfg.nms_thresh);
    return {ap.ap50, ap.ap50_95};
  };

  for (int it = 0; it < cfg.iterations; ++it) {
    HistoryRecord rec;
    rec.iteration = it;
    HeadGrads grads(res.student);

    const Scene& a = split.annotated[pick_rng.below(split.annotated.size())];
    const auto map_a = split.render(a);
    const auto props_a = split.proposals_for(a);
    rec.l_s = supervised_loss(res.student, a, map_a, props_a, cfg.loss, &grads).total();

    if (unsupervised) {
      const SealedScene& u = split.unannotated[unl_rng.below(split.unannotated.size())];
      if (it >= cfg.burn_in) {
        const auto map_u = split.render(u);
        const auto props_u = split.proposals_for(u);
        const auto dets = detect(res.teacher, map_u, props_u, cfg.score_thresh, cfg.nms_thresh, u.scene_id());
        const auto sup = select_disentangled(dets, res.polishers.category, res.polishers.box, map_u,
                                             cfg.selection, cfg.use);
        rec.n_cls_pseudo = static_cast<long>(sup.cls_set.size());
        rec.n_reg_pseudo = static_cast<long>(sup.reg_set.size());
        const auto lu = unsupervised_loss(res.student, map_u, props_u, sup, cfg.loss, &grads, cfg.lambda_u);
        rec.l_u_c = lu.cls;
        rec.l_u_r = lu.reg;
      }
    }

    if (cfg.train_polishers && cfg.polishing_used()) {
      const auto samples = sample_scene_polish_sets(a, props_a, cfg.learn, K, polish_rng);
      std::vector<CategoryExample> cat;
      std::vector<RegressionExample> reg;
      for (const auto& s : samples.category) cat.push_back({s, &map_a});
      for (const auto& s : samples.regression) reg.push_back({s, &map_a});
      polish_rng.shuffle(cat.begin(), cat.end());
      polish_rng.shuffle(reg.begin(), reg.end());
      const auto lp = train_polishers_on(res.polishers, pcfg, cat, reg);
      rec.l_pc = lp.category;
      rec.l_pr = lp.box;
    }

    if (!std::isfinite(rec.total(cfg.lambda_u))) {
      throw DivergenceError("run_ssod: non-finite loss at iteration " + std::to_string(it));
    }
    sgd_step(res.student.cls, grads.cls, cls_opt);
    sgd_step(res.student.reg, grads.reg, reg_opt);
    ema_update(res.teacher.cls, res.student.cls, cfg.ema_momentum);
    ema_update(res.teacher.reg, res.student.reg, cfg.ema_momentum);

    if (cfg.evaluate && !split.test.empty()) {
      if (it + 1 == cfg.iterations) {
        res.final_ap = evaluate_heads(res.teacher, split, split.test, cfg.eval_score_thresh, cfg.nms_thresh);
        rec.eval = EvalPoint{res.final_ap->ap50, res.final_ap->ap50_95};
      } else if (cfg.eval_every > 0 && (it + 1) % cfg.eval_every == 0) {
        rec.eval = eval_now();
      }
    }
    if (sink) sink(rec);
    res.history.push_back(rec);
  }
  return res;
}

}  // namespace dpp
