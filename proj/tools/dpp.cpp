// dpp: experiment runner for dual pseudo-label polishing.
//
// Exit codes: 0 success, 2 usage/config error, 3 I/O error, 4 divergence.

#include <chrono>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dpp/experiments.hpp"

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kIo = 3, kDivergence = 4 };

struct Common {
  std::optional<std::string> config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON run configuration")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "Seed (overrides the config file)");
  cmd->add_option("--out", c.out, "Output directory (overrides the config file)");
}

struct Loaded {
  dpp::RunConfig cfg;
  std::filesystem::path out;
};

Loaded load(const Common& c) {
  std::optional<std::filesystem::path> path;
  if (c.config) path = *c.config;
  Loaded l{dpp::load_run_config(path, c.seed), {}};
  l.out = c.out ? std::filesystem::path(*c.out) : std::filesystem::path(l.cfg.out_dir);
  return l;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dual pseudo-label polishing: synthetic experiments"};
  app.require_subcommand(1);

  Common mc_c, data_c, polish_c, ssod_c;
  std::vector<double> thetas;
  std::optional<long> mc_n;
  auto* mc = app.add_subcommand("mc-stats", "Monte Carlo IoU and deviation statistics of box perturbation");
  add_common(mc, mc_c);
  mc->add_option("--theta", thetas, "Perturbation scales (repeatable; default from config)");
  mc->add_option("-n,--samples", mc_n, "Draws per theta (default from config)");

  auto* data = app.add_subcommand("make-data", "Generate the synthetic dataset split");
  add_common(data, data_c);

  std::optional<std::string> polish_data;
  bool polish_no_cat = false, polish_no_box = false;
  std::optional<std::string> polish_loss;
  auto* polish = app.add_subcommand("train-polish", "Train both polishers and report pseudo-label quality");
  add_common(polish, polish_c);
  polish->add_option("--data", polish_data, "Dataset split (default <out>/split.json)");
  polish->add_flag("--no-cat-polish", polish_no_cat, "Disable the category polisher");
  polish->add_flag("--no-box-polish", polish_no_box, "Disable the box polisher");
  polish->add_option("--loss", polish_loss, "Box polisher loss")->check(CLI::IsMember({"giou", "l1"}));

  std::optional<std::string> ssod_data;
  dpp::AblationFlags flags;
  std::optional<std::string> ssod_loss;
  auto* ssod = app.add_subcommand("run-ssod", "Run the teacher-student loop (optionally ablated)");
  add_common(ssod, ssod_c);
  ssod->add_option("--data", ssod_data, "Dataset split (default <out>/split.json)");
  ssod->add_flag("--no-cat-polish", flags.no_cat_polish, "Use teacher categories instead of polished ones");
  ssod->add_flag("--no-box-polish", flags.no_box_polish, "Use teacher boxes instead of polished ones");
  ssod->add_flag("--no-disentangle", flags.no_disentangle, "Couple category and box selection");
  ssod->add_option("--loss", ssod_loss, "Box polisher loss")->check(CLI::IsMember({"giou", "l1"}));

  std::string run_dir;
  std::optional<std::string> report_out;
  auto* report = app.add_subcommand("report", "Consolidate a run directory into CSV tables and bundle.json");
  report->add_option("run_dir", run_dir, "Directory written by the other subcommands")->required();
  report->add_option("--out", report_out, "Bundle directory (default <run_dir>/report)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (*mc) {
      auto [cfg, out] = load(mc_c);
      const auto rows = dpp::cmd_mc_stats(thetas.empty() ? cfg.metrics.mc_thetas : thetas,
                                          mc_n.value_or(cfg.metrics.mc_samples), cfg.seed, out);
      for (const auto& r : rows) {
        std::cout << "theta " << dpp::fmt_num(r.theta) << ": iou mean " << dpp::fmt_num(r.iou.mean) << " std "
                  << dpp::fmt_num(r.iou.std) << "\n";
      }
      std::cout << "wrote " << (out / "mc_stats.csv").string() << " in " << dpp::fmt_num(seconds_since(t0))
                << " s\n";
    } else if (*data) {
      auto [cfg, out] = load(data_c);
      const auto split = dpp::cmd_make_data(cfg, out);
      std::cout << "annotated " << split.annotated.size() << ", unannotated " << split.unannotated.size()
                << ", test " << split.test.size() << " -> " << (out / "split.json").string() << "\n";
    } else if (*polish) {
      auto [cfg, out] = load(polish_c);
      if (polish_no_cat) cfg.polish.enable_category = false;
      if (polish_no_box) cfg.polish.enable_box = false;
      if (polish_loss) cfg.polish.loss = dpp::box_loss_from_string(*polish_loss);
      const auto split = dpp::load_split(polish_data ? std::filesystem::path(*polish_data) : out / "split.json");
      const auto res = dpp::cmd_train_polish(cfg, split, out);
      const auto& ev = res.evaluation;
      std::cout << "mean IoU " << dpp::fmt_num(ev.before.mean_iou) << " -> " << dpp::fmt_num(ev.after.mean_iou)
                << "; candidate accuracy " << dpp::fmt_num(ev.candidate_accuracy_before) << " -> "
                << dpp::fmt_num(ev.candidate_accuracy_after) << " (" << ev.candidates << " candidates) in "
                << dpp::fmt_num(seconds_since(t0)) << " s\n";
    } else if (*ssod) {
      auto [cfg, out] = load(ssod_c);
      if (ssod_loss) flags.loss = dpp::box_loss_from_string(*ssod_loss);
      const auto split = dpp::load_split(ssod_data ? std::filesystem::path(*ssod_data) : out / "split.json");
      const auto r = dpp::cmd_run_ssod(cfg, split, flags, out);
      std::cout << r.name;
      if (r.result.final_ap) {
        std::cout << ": final AP50 " << dpp::fmt_num(r.result.final_ap->ap50) << "  AP50:95 "
                  << dpp::fmt_num(r.result.final_ap->ap50_95);
      }
      std::cout << " -> " << r.dir.string() << " in " << dpp::fmt_num(seconds_since(t0)) << " s\n";
    } else if (*report) {
      const std::filesystem::path out = report_out ? std::filesystem::path(*report_out)
                                                   : std::filesystem::path(run_dir) / "report";
      const auto bundle = dpp::cmd_report(run_dir, out);
      std::cout << bundle.at("tables").size() << " tables -> " << out.string() << "\n";
    }
  } catch (const dpp::DivergenceError& e) {
    std::cerr << "error: divergence: " << e.what() << "\n";
    return kDivergence;
  } catch (const dpp::IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kOk;
}
