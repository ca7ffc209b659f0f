#pragma once

// Experiment drivers behind the command-line subcommands. Each writes its
// artifacts under an output directory and returns the in-memory results, so
// the same code path serves the CLI and the acceptance suite.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dpp/config.hpp"
#include "dpp/metrics.hpp"
#include "dpp/polish.hpp"
#include "dpp/sample.hpp"
#include "dpp/scene.hpp"
#include "dpp/ssod.hpp"

namespace dpp {

namespace fs = std::filesystem;

inline std::string fmt_num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

/// Minimal CSV builder; values are written with 10 significant digits.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

  CsvTable& row() {
    rows_.emplace_back();
    return *this;
  }
  CsvTable& add(const std::string& s) {
    rows_.back().push_back(s);
    return *this;
  }
  CsvTable& add(double v) { return add(fmt_num(v)); }
  CsvTable& add(long v) { return add(std::to_string(v)); }
  CsvTable& add(int v) { return add(std::to_string(v)); }

  std::string str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& cells) {
      for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
      out += "\n";
    };
    line(columns_);
    for (const auto& r : rows_) {
      if (r.size() != columns_.size()) throw std::logic_error("CsvTable: ragged row");
      line(r);
    }
    return out;
  }
  const std::vector<std::string>& columns() const { return columns_; }
  std::size_t size() const { return rows_.size(); }

 private:
  std::vector<std::string> columns_;
  std::vector<std::vector<std::string>> rows_;
};

// ---------------------------------------------------------------------------
// mc-stats

struct McRow {
  double theta = 0.0;
  long n = 0;
  MeanStd iou;
  DeviationMoments deviation;
};

inline std::vector<McRow> cmd_mc_stats(const std::vector<double>& thetas, long n, std::uint64_t seed,
                                       const fs::path& out) {
  if (n < 1) throw std::invalid_argument("mc-stats: N must be >= 1");
  if (thetas.empty()) throw std::invalid_argument("mc-stats: no theta given");
  for (double t : thetas) {
    if (!(t >= 0.0)) throw std::invalid_argument("mc-stats: theta must be >= 0, got " + fmt_num(t));
  }
  std::vector<McRow> rows;
  for (double t : thetas) {
    const auto s = detail::monte_carlo_perturb(kUnitBox, t, static_cast<std::size_t>(n), seed);
    McRow r{t, n, detail::finish(s.iou, s.iou_sq, s.n), {}};
    for (std::size_t k = 0; k < 4; ++k) r.deviation.coord[k] = detail::finish(s.dev[k], s.dev_sq[k], s.n);
    rows.push_back(r);
  }
  const char* names[4] = {"x1", "y1", "x2", "y2"};
  std::vector<std::string> cols{"theta", "n", "iou_mean", "iou_std"};
  for (const char* c : names) {
    cols.push_back(std::string(c) + "_mean");
    cols.push_back(std::string(c) + "_std");
  }
  CsvTable csv(cols);
  json arr = json::array();
  for (const auto& r : rows) {
    csv.row().add(r.theta).add(r.n).add(r.iou.mean).add(r.iou.std);
    json dev = json::object();
    for (std::size_t k = 0; k < 4; ++k) {
      csv.add(r.deviation.coord[k].mean).add(r.deviation.coord[k].std);
      dev[names[k]] = {{"mean", r.deviation.coord[k].mean}, {"std", r.deviation.coord[k].std}};
    }
    arr.push_back({{"theta", r.theta}, {"n", r.n}, {"iou", {{"mean", r.iou.mean}, {"std", r.iou.std}}},
                   {"deviation", dev}});
  }
  write_text_file(out / "mc_stats.csv", csv.str());
  write_json_file(out / "mc_stats.json", {{"seed", seed}, {"rows", arr}});
  return rows;
}

// ---------------------------------------------------------------------------
// make-data

inline DatasetSplit cmd_make_data(const RunConfig& cfg, const fs::path& out) {
  cfg.validate();
  auto split = make_split(cfg.data.n_annotated, cfg.data.n_unannotated, cfg.scene, cfg.oracle, cfg.seed,
                          cfg.data.n_test, cfg.features, cfg.proposals);
  write_json_file(out / "split.json", split_to_json(split));
  return split;
}

inline DatasetSplit load_split(const fs::path& path) { return split_from_json(read_json_file(path)); }

/// The generation parameters of a loaded split must match the run config:
/// a mismatch means the data was made with a different config.
inline void check_split_matches(const DatasetSplit& split, const RunConfig& cfg) {
  if (!same_config(split.gen, cfg.scene) || !(split.proposals == cfg.proposals) ||
      json(split.features) != json(cfg.features) || json(split.oracle) != json(cfg.oracle)) {
    throw std::invalid_argument("dataset was generated with a different scene/feature/proposal/oracle config");
  }
}

// ---------------------------------------------------------------------------
// train-polish

/// Pseudo-label quality before and after polishing, on the oracle pseudo
/// labels of the unannotated scenes.
struct PolishEvaluation {
  PseudoQualityReport before;
  PseudoQualityReport after;
  DeviationStats deviation_before;
  DeviationStats deviation_after;
  long candidates = 0;  // pseudo labels with confidence > eta
  double candidate_accuracy_before = 0.0;
  double candidate_accuracy_after = 0.0;
};

inline PolishEvaluation evaluate_polishing(const PolisherPair& p, const DatasetSplit& split, bool use_category,
                                           bool use_box, double eta) {
  std::vector<PseudoDetection> before;
  std::vector<PseudoDetection> after;
  std::vector<BoxPair> pairs_before;
  std::vector<BoxPair> pairs_after;
  SceneIndex gt;
  PolishEvaluation ev;
  long right_before = 0;
  long right_after = 0;
  for (const auto& u : split.unannotated) {
    const Scene& truth = u.reveal_for_evaluation();  // evaluation only
    gt.add(truth);
    const auto map = split.render(u);
    for (const auto& d : split.oracle_labels(u)) {
      PseudoDetection polished = d;
      if (use_box) polished.box = polish_box(p.box, map, d.box);
      if (use_category) polished.category = polish_category(p.category, map, d.box).foreground_label();
      before.push_back(d);
      after.push_back(polished);
      const auto m = match_max_iou(d.box, truth);
      if (m.object < 0) continue;
      const auto& obj = truth.objects[static_cast<std::size_t>(m.object)];
      pairs_before.push_back({d.box, obj.box});
      const auto ma = match_max_iou(polished.box, truth);
      pairs_after.push_back({polished.box, truth.objects[static_cast<std::size_t>(ma.object)].box});
      if (d.confidence > eta) {
        ++ev.candidates;
        right_before += d.category == obj.category;
        right_after += polished.category == obj.category;
      }
    }
  }
  ev.before = pseudo_quality(before, gt);
  ev.after = pseudo_quality(after, gt);
  if (!pairs_before.empty()) {
    ev.deviation_before = deviation_stats(pairs_before);
    ev.deviation_after = deviation_stats(pairs_after);
  }
  if (ev.candidates > 0) {
    ev.candidate_accuracy_before = static_cast<double>(right_before) / static_cast<double>(ev.candidates);
    ev.candidate_accuracy_after = static_cast<double>(right_after) / static_cast<double>(ev.candidates);
  }
  return ev;
}

inline json to_json(const PolishEvaluation& e) {
  auto stage = [&](const PseudoQualityReport& q, const DeviationStats& d, double acc) {
    return json{{"mean_iou", q.mean_iou},
                {"candidate_accuracy", acc},
                {"quality", to_json(q)},
                {"deviation", to_json(d)}};
  };
  return {{"candidates", e.candidates},
          {"before", stage(e.before, e.deviation_before, e.candidate_accuracy_before)},
          {"after", stage(e.after, e.deviation_after, e.candidate_accuracy_after)}};
}

struct TrainPolishResult {
  PolisherPair polishers;
  PolishEvaluation evaluation;
  std::vector<EpochLosses> epochs;
};

inline TrainPolishResult cmd_train_polish(const RunConfig& cfg, const DatasetSplit& split, const fs::path& out) {
  cfg.validate();
  check_split_matches(split, cfg);
  if (split.annotated.empty()) throw std::invalid_argument("train-polish: dataset has no annotated scenes");
  const Rng root(cfg.seed, stream_tag("train-polish"));
  Rng init = root.split("init");
  Rng samples = root.split("samples");
  TrainPolishResult res{make_polishers(cfg.polish, split.gen.num_classes, split.features.channels, init), {}, {}};

  std::string log;
  train_polishers_offline(res.polishers, cfg.polish, cfg.sample, split, samples, [&](const EpochLosses& e) {
    res.epochs.push_back(e);
    log += json{{"epoch", e.epoch},
                {"category_examples", e.category_examples},
                {"box_examples", e.box_examples},
                {"L_pc", e.losses.category},
                {"L_pr", e.losses.box}}
               .dump() +
           "\n";
    std::cout << "epoch " << e.epoch << ": L_pc " << fmt_num(e.losses.category) << "  L_pr "
              << fmt_num(e.losses.box) << std::endl;
  });
  res.evaluation = evaluate_polishing(res.polishers, split, cfg.polish.enable_category, cfg.polish.enable_box,
                                      cfg.ssod.selection.eta);

  const fs::path dir = out / "polish";
  write_json_file(dir / "category_net.json", net_to_json(res.polishers.category.net));
  write_json_file(dir / "box_net.json", net_to_json(res.polishers.box.net));
  write_json_file(dir / "polisher.json", polisher_sidecar(res.polishers.category, res.polishers.box));
  write_text_file(dir / "train_log.jsonl", log);
  json report = to_json(res.evaluation);
  report["seed"] = cfg.seed;
  report["loss"] = to_string(cfg.polish.loss);
  report["enable_category"] = cfg.polish.enable_category;
  report["enable_box"] = cfg.polish.enable_box;
  write_json_file(dir / "polish_report.json", report);
  return res;
}

inline PolisherPair load_polishers(const fs::path& dir) {
  return restore_polishers(read_json_file(dir / "polisher.json"), read_json_file(dir / "category_net.json"),
                           read_json_file(dir / "box_net.json"));
}

// ---------------------------------------------------------------------------
// run-ssod

struct AblationFlags {
  bool no_cat_polish = false;
  bool no_box_polish = false;
  bool no_disentangle = false;
  std::optional<BoxLossKind> loss;  // overrides the config when set
};

inline std::string variant_name(const AblationFlags& f, BoxLossKind loss) {
  std::string name;
  auto add = [&](const char* s) { name += (name.empty() ? "" : "+") + std::string(s); };
  if (f.no_cat_polish && f.no_box_polish) {
    add("baseline");
  } else {
    if (f.no_cat_polish) add("no-cat-polish");
    if (f.no_box_polish) add("no-box-polish");
  }
  if (f.no_disentangle) add("no-disentangle");
  if (name.empty()) name = "full";
  if (loss == BoxLossKind::l1) name += "+l1";
  return name;
}

inline SsodConfig apply_flags(SsodConfig c, const AblationFlags& f) {
  if (f.no_cat_polish) c.use.category = false;
  if (f.no_box_polish) c.use.box = false;
  if (f.no_disentangle) c.use.disentangle = false;
  if (f.loss) c.polish.loss = *f.loss;
  return c;
}

struct RunSsodResult {
  std::string name;
  fs::path dir;
  SsodResult result;
};

inline RunSsodResult cmd_run_ssod(const RunConfig& cfg, const DatasetSplit& split, const AblationFlags& flags,
                                  const fs::path& out) {
  cfg.validate();
  check_split_matches(split, cfg);
  const SsodConfig sc = apply_flags(cfg.ssod_config(), flags);
  RunSsodResult r;
  r.name = variant_name(flags, sc.polish.loss) + "_seed" + std::to_string(cfg.seed);
  r.dir = out / "runs" / r.name;
  std::string history;
  r.result = run_ssod(split, sc, cfg.seed, [&](const HistoryRecord& rec) {
    history += to_json(rec, sc.lambda_u).dump() + "\n";
    if (rec.eval) {
      std::cout << "iteration " << rec.iteration << ": AP50 " << fmt_num(rec.eval->ap50) << "  AP50:95 "
                << fmt_num(rec.eval->ap50_95) << std::endl;
    }
  });
  write_text_file(r.dir / "history.jsonl", history);
  json summary{{"name", r.name},
               {"seed", cfg.seed},
               {"iterations", sc.iterations},
               {"lambda_u", sc.lambda_u},
               {"use_category_polish", sc.use.category},
               {"use_box_polish", sc.use.box},
               {"disentangle", sc.use.disentangle},
               {"loss", to_string(sc.polish.loss)}};
  summary["final_ap"] = r.result.final_ap ? to_json(*r.result.final_ap) : json(nullptr);
  write_json_file(r.dir / "result.json", summary);
  return r;
}

// ---------------------------------------------------------------------------
// report

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Consolidates everything found under run_dir into CSV tables plus a
/// bundle.json index (schema: docs/report_schema.json).
inline json cmd_report(const fs::path& run_dir, const fs::path& out) {
  if (!fs::is_directory(run_dir)) throw std::invalid_argument("report: no such run directory " + run_dir.string());
  std::vector<std::pair<std::string, CsvTable>> tables;
  json bundle{{"format", "dpp-report"}, {"version", 1}};
  json sources = json::array();

  if (fs::exists(run_dir / "mc_stats.json")) {
    const json mc = read_json_file(run_dir / "mc_stats.json");
    sources.push_back("mc_stats.json");
    CsvTable t({"theta", "n", "iou_mean", "iou_std", "coord", "dev_mean", "dev_std"});
    for (const auto& r : mc.at("rows")) {
      for (const char* c : {"x1", "y1", "x2", "y2"}) {
        t.row()
            .add(r.at("theta").get<double>())
            .add(r.at("n").get<long>())
            .add(r.at("iou").at("mean").get<double>())
            .add(r.at("iou").at("std").get<double>())
            .add(std::string(c))
            .add(r.at("deviation").at(c).at("mean").get<double>())
            .add(r.at("deviation").at(c).at("std").get<double>());
      }
    }
    tables.emplace_back("mc_stats", t);
  }

  if (fs::exists(run_dir / "polish" / "polish_report.json")) {
    const json pr = read_json_file(run_dir / "polish" / "polish_report.json");
    sources.push_back("polish/polish_report.json");
    CsvTable bins({"stage", "iou_lo", "iou_hi", "count"});
    CsvTable thr({"stage", "iou_gt", "correct"});
    CsvTable dev({"stage", "group", "count", "iou_mean", "iou_std"});
    CsvTable coord({"stage", "coord", "mean", "std"});
    CsvTable summary({"stage", "mean_iou", "candidate_accuracy"});
    for (const char* stage : {"before", "after"}) {
      const json& s = pr.at(stage);
      summary.row().add(std::string(stage)).add(s.at("mean_iou").get<double>()).add(
          s.at("candidate_accuracy").get<double>());
      for (const auto& b : s.at("quality").at("iou_bins")) {
        bins.row().add(std::string(stage)).add(b.at("lo").get<double>()).add(b.at("hi").get<double>()).add(
            b.at("count").get<long>());
      }
      for (const auto& c : s.at("quality").at("correct_at_thresh")) {
        thr.row().add(std::string(stage)).add(c.at("iou_gt").get<double>()).add(c.at("correct").get<long>());
      }
      for (const char* g : {"iou_ge_0.5", "iou_lt_0.5"}) {
        const json& grp = s.at("deviation").at(g);
        if (grp.is_null()) continue;
        dev.row()
            .add(std::string(stage))
            .add(std::string(g))
            .add(grp.at("count").get<long>())
            .add(grp.at("mean").get<double>())
            .add(grp.at("std").get<double>());
      }
      for (const auto& [name, v] : s.at("deviation").at("deviation").items()) {
        coord.row().add(std::string(stage)).add(name).add(v.at("mean").get<double>()).add(v.at("std").get<double>());
      }
    }
    tables.emplace_back("polish_summary", summary);
    tables.emplace_back("pseudo_quality_bins", bins);
    tables.emplace_back("pseudo_quality_thresholds", thr);
    tables.emplace_back("deviation_groups", dev);
    tables.emplace_back("deviation_coords", coord);
  }

  std::set<fs::path> run_dirs;
  if (fs::is_directory(run_dir / "runs")) {
    for (const auto& e : fs::directory_iterator(run_dir / "runs")) {
      if (e.is_directory() && fs::exists(e.path() / "history.jsonl")) run_dirs.insert(e.path());
    }
  }
  if (!run_dirs.empty()) {
    CsvTable loss({"run", "iteration", "L", "L_s", "L_u_c", "L_u_r", "L_pc", "L_pr", "n_cls_pseudo",
                   "n_reg_pseudo"});
    CsvTable eval({"run", "iteration", "ap50", "ap50_95"});
    CsvTable final_ap({"run", "ap50", "ap50_95"});
    for (const auto& d : run_dirs) {
      const std::string name = d.filename().string();
      sources.push_back("runs/" + name + "/history.jsonl");
      std::istringstream lines(read_text_file(d / "history.jsonl"));
      std::string line;
      while (std::getline(lines, line)) {
        if (line.empty()) continue;
        const json r = json::parse(line);
        loss.row().add(name).add(r.at("iteration").get<long>());
        for (const char* k : {"L", "L_s", "L_u_c", "L_u_r", "L_pc", "L_pr"}) loss.add(r.at(k).get<double>());
        loss.add(r.at("n_cls_pseudo").get<long>()).add(r.at("n_reg_pseudo").get<long>());
        if (!r.at("eval").is_null()) {
          eval.row().add(name).add(r.at("iteration").get<long>()).add(r.at("eval").at("ap50").get<double>()).add(
              r.at("eval").at("ap50_95").get<double>());
        }
      }
      if (fs::exists(d / "result.json")) {
        sources.push_back("runs/" + name + "/result.json");
        const json res = read_json_file(d / "result.json");
        if (!res.at("final_ap").is_null()) {
          final_ap.row().add(name).add(res.at("final_ap").at("ap50").get<double>()).add(
              res.at("final_ap").at("ap50_95").get<double>());
        }
      }
    }
    tables.emplace_back("loss_curves", loss);
    if (eval.size() > 0) tables.emplace_back("eval_curves", eval);
    if (final_ap.size() > 0) tables.emplace_back("final_ap", final_ap);
  }

  if (tables.empty()) {
    throw std::invalid_argument("report: " + run_dir.string() +
                                " has no mc_stats.json, polish/polish_report.json or runs/*/history.jsonl");
  }
  json index = json::array();
  for (const auto& [name, t] : tables) {
    write_text_file(out / (name + ".csv"), t.str());
    index.push_back({{"name", name}, {"file", name + ".csv"}, {"columns", t.columns()}, {"rows", t.size()}});
  }
  bundle["sources"] = sources;
  bundle["tables"] = index;
  write_json_file(out / "bundle.json", bundle);
  return bundle;
}

}  // namespace dpp
