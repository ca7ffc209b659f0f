#pragma once

// Run configuration: every tunable of an experiment in one strictly parsed
// JSON document. Missing keys keep their defaults; unknown keys are errors.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpp/polish.hpp"
#include "dpp/sample.hpp"
#include "dpp/scene.hpp"
#include "dpp/ssod.hpp"

namespace dpp {

inline constexpr std::uint64_t kDefaultSeed = 42;

struct DataConfig {
  int n_annotated = 200;
  int n_unannotated = 800;
  int n_test = 200;

  void validate() const {
    if (n_annotated < 0 || n_unannotated < 0 || n_test < 0) {
      throw std::invalid_argument("data: scene counts must be >= 0");
    }
  }
};

struct MetricsConfig {
  std::vector<double> mc_thetas{0.15, 0.2, 0.25};
  long mc_samples = 100000;

  void validate() const {
    if (mc_samples < 1) throw std::invalid_argument("metrics: mc_samples must be >= 1");
    for (double t : mc_thetas) {
      if (!(t >= 0.0)) throw std::invalid_argument("metrics: theta must be >= 0");
    }
  }
};

struct RunConfig {
  std::uint64_t seed = kDefaultSeed;
  std::string out_dir = "runs/default";
  DataConfig data;
  SceneGenConfig scene;
  FeatureConfig features;
  ProposalConfig proposals;
  TeacherOracleConfig oracle;
  PolishLearnConfig sample;
  PolishConfig polish;
  SsodConfig ssod;  // its polish/learn members are taken from the fields above
  MetricsConfig metrics;

  SsodConfig ssod_config() const {
    SsodConfig c = ssod;
    c.polish = polish;
    c.learn = sample;
    return c;
  }

  void validate() const {
    data.validate();
    scene.validate();
    features.validate();
    proposals.validate();
    oracle.validate();
    sample.validate();
    polish.validate();
    ssod_config().validate();
    metrics.validate();
  }
};

// ---------------------------------------------------------------------------
// JSON

inline void to_json(json& j, const OptimConfig& c) {
  j = json{{"lr", c.lr}, {"momentum", c.momentum}, {"weight_decay", c.weight_decay}};
}

inline void from_json_strict(const json& j, OptimConfig& c, const std::string& where) {
  StrictObject o(j, where);
  o.get("lr", c.lr);
  o.get("momentum", c.momentum);
  o.get("weight_decay", c.weight_decay);
}

inline void to_json(json& j, const PolishLearnConfig& c) {
  j = json{{"theta_cls_c", c.theta_cls_c}, {"theta_cls_m", c.theta_cls_m}, {"theta_reg", c.theta_reg},
           {"n_cls_c", c.n_cls_c},         {"n_cls_m", c.n_cls_m},         {"n_reg", c.n_reg},
           {"tau_pos", c.tau_pos},         {"n_prop_neg", c.n_prop_neg}};
}

inline void from_json_strict(const json& j, PolishLearnConfig& c, const std::string& where) {
  StrictObject o(j, where);
  o.get("theta_cls_c", c.theta_cls_c);
  o.get("theta_cls_m", c.theta_cls_m);
  o.get("theta_reg", c.theta_reg);
  o.get("n_cls_c", c.n_cls_c);
  o.get("n_cls_m", c.n_cls_m);
  o.get("n_reg", c.n_reg);
  o.get("tau_pos", c.tau_pos);
  o.get("n_prop_neg", c.n_prop_neg);
}

inline void to_json(json& j, const PolishConfig& c) {
  j = json{{"cls_resolution", c.cls_resolution},
           {"box_resolution", c.box_resolution},
           {"gamma", c.gamma},
           {"cls_hidden", c.cls_hidden},
           {"box_hidden", c.box_hidden},
           {"cls_opt", c.cls_opt},
           {"box_opt", c.box_opt},
           {"loss", to_string(c.loss)},
           {"batch_size", c.batch_size},
           {"enable_category", c.enable_category},
           {"enable_box", c.enable_box},
           {"cls_epochs", c.cls_epochs},
           {"box_epochs", c.box_epochs},
           {"cls_decay_epochs", c.cls_decay_epochs},
           {"box_decay_epochs", c.box_decay_epochs},
           {"decay_factor", c.decay_factor}};
}

inline void from_json_strict(const json& j, PolishConfig& c, const std::string& where) {
  StrictObject o(j, where);
  o.get("cls_resolution", c.cls_resolution);
  o.get("box_resolution", c.box_resolution);
  o.get("gamma", c.gamma);
  o.get("cls_hidden", c.cls_hidden);
  o.get("box_hidden", c.box_hidden);
  if (const json* s = o.sub("cls_opt")) from_json_strict(*s, c.cls_opt, where + ".cls_opt");
  if (const json* s = o.sub("box_opt")) from_json_strict(*s, c.box_opt, where + ".box_opt");
  std::string loss = to_string(c.loss);
  o.get("loss", loss);
  c.loss = box_loss_from_string(loss);
  o.get("batch_size", c.batch_size);
  o.get("enable_category", c.enable_category);
  o.get("enable_box", c.enable_box);
  o.get("cls_epochs", c.cls_epochs);
  o.get("box_epochs", c.box_epochs);
  o.get("cls_decay_epochs", c.cls_decay_epochs);
  o.get("box_decay_epochs", c.box_decay_epochs);
  o.get("decay_factor", c.decay_factor);
}

inline void to_json(json& j, const SsodConfig& c) {
  j = json{{"iterations", c.iterations},
           {"burn_in", c.burn_in},
           {"lambda_u", c.lambda_u},
           {"eta", c.selection.eta},
           {"tau_cls", c.selection.tau_cls},
           {"ema_momentum", c.ema_momentum},
           {"score_thresh", c.score_thresh},
           {"nms_thresh", c.nms_thresh},
           {"eval_score_thresh", c.eval_score_thresh},
           {"roi_resolution", c.roi_resolution},
           {"hidden", c.hidden},
           {"opt", c.opt},
           {"fg_iou", c.loss.fg_iou},
           {"bg_ratio", c.loss.bg_ratio},
           {"reg_beta", c.loss.reg_beta},
           {"eval_every", c.eval_every},
           {"evaluate", c.evaluate},
           {"use_category_polish", c.use.category},
           {"use_box_polish", c.use.box},
           {"disentangle", c.use.disentangle},
           {"train_polishers", c.train_polishers}};
}

inline void from_json_strict(const json& j, SsodConfig& c, const std::string& where) {
  StrictObject o(j, where);
  o.get("iterations", c.iterations);
  o.get("burn_in", c.burn_in);
  o.get("lambda_u", c.lambda_u);
  o.get("eta", c.selection.eta);
  o.get("tau_cls", c.selection.tau_cls);
  o.get("ema_momentum", c.ema_momentum);
  o.get("score_thresh", c.score_thresh);
  o.get("nms_thresh", c.nms_thresh);
  o.get("eval_score_thresh", c.eval_score_thresh);
  o.get("roi_resolution", c.roi_resolution);
  o.get("hidden", c.hidden);
  if (const json* s = o.sub("opt")) from_json_strict(*s, c.opt, where + ".opt");
  o.get("fg_iou", c.loss.fg_iou);
  o.get("bg_ratio", c.loss.bg_ratio);
  o.get("reg_beta", c.loss.reg_beta);
  o.get("eval_every", c.eval_every);
  o.get("evaluate", c.evaluate);
  o.get("use_category_polish", c.use.category);
  o.get("use_box_polish", c.use.box);
  o.get("disentangle", c.use.disentangle);
  o.get("train_polishers", c.train_polishers);
}

inline json run_config_to_json(const RunConfig& c) {
  return json{{"seed", c.seed},
              {"out_dir", c.out_dir},
              {"data",
               {{"n_annotated", c.data.n_annotated},
                {"n_unannotated", c.data.n_unannotated},
                {"n_test", c.data.n_test}}},
              {"scene", c.scene},
              {"features", c.features},
              {"proposals", c.proposals},
              {"oracle", c.oracle},
              {"sample", c.sample},
              {"polish", c.polish},
              {"ssod", c.ssod},
              {"metrics", {{"mc_thetas", c.metrics.mc_thetas}, {"mc_samples", c.metrics.mc_samples}}}};
}

/// Parses and validates; throws std::invalid_argument naming the offending key.
inline RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  {
    StrictObject o(j, "config");
    o.get("seed", c.seed);
    o.get("out_dir", c.out_dir);
    if (const json* d = o.sub("data")) {
      StrictObject od(*d, "config.data");
      od.get("n_annotated", c.data.n_annotated);
      od.get("n_unannotated", c.data.n_unannotated);
      od.get("n_test", c.data.n_test);
    }
    if (const json* s = o.sub("scene")) from_json_strict(*s, c.scene, "config.scene");
    if (const json* s = o.sub("features")) from_json_strict(*s, c.features, "config.features");
    if (const json* s = o.sub("proposals")) from_json_strict(*s, c.proposals, "config.proposals");
    if (const json* s = o.sub("oracle")) from_json_strict(*s, c.oracle, "config.oracle");
    if (const json* s = o.sub("sample")) from_json_strict(*s, c.sample, "config.sample");
    if (const json* s = o.sub("polish")) from_json_strict(*s, c.polish, "config.polish");
    if (const json* s = o.sub("ssod")) from_json_strict(*s, c.ssod, "config.ssod");
    if (const json* m = o.sub("metrics")) {
      StrictObject om(*m, "config.metrics");
      om.get("mc_thetas", c.metrics.mc_thetas);
      om.get("mc_samples", c.metrics.mc_samples);
    }
  }
  c.validate();
  return c;
}

/// Thrown for unreadable inputs and unwritable outputs.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out.flush()) throw IoError("write failed for " + path.string());
}

inline void write_json_file(const std::filesystem::path& path, const json& j) {
  write_text_file(path, j.dump(2) + "\n");
}

/// Seed precedence: command line, then config file, then the built-in default.
inline RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                                 std::optional<std::uint64_t> cli_seed) {
  RunConfig c = path ? run_config_from_json(read_json_file(*path)) : RunConfig{};
  if (!path) c.validate();
  if (cli_seed) c.seed = *cli_seed;
  return c;
}

}  // namespace dpp
