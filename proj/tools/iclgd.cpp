// iclgd: runs the construction, pretraining and ICL-vs-GD experiments and
// writes CSV/JSON results.
//
//   iclgd <subcommand> --config cfg.json --out dir [--checkpoint ck.json]
//         [--jobs N] [--emit-plot-data]
//
// Exit codes: 0 all checks pass, 1 a check failed or the run errored,
// 2 bad invocation or configuration.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include "CLI11.hpp"
#include "iclgd/harness.hpp"

namespace fs = std::filesystem;
using namespace iclgd;

namespace {

const std::map<std::string, std::string> kKinds{
    {"verify-construction", "construction"}, {"pretrain", "pretrain"},         {"order-sens", "order"},
    {"compare", "compare"},                  {"evolution", "evolution"},       {"demo-scaling", "demo_scaling"},
    {"sparsity", "sparsity"}};

struct Options {
  std::string config;
  std::string out;
  std::string checkpoint;
  std::size_t jobs = 0;
  bool plot = false;
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
}

int report(const ExperimentResult& res, const std::string& name, const Options& opt) {
  const fs::path out(opt.out);
  write_csv(res.rows, out / "metrics.csv");
  if (opt.plot) write_text(out / ("plot_" + name + ".csv"), plot_data_csv(res.rows));
  Json checks = Json::array();
  for (const auto& c : res.checks) {
    std::cout << (c.pass ? "PASS " : "FAIL ") << c.name << ": " << c.detail << "\n";
    checks.push_back(Json{{"name", c.name}, {"pass", c.pass}, {"detail", c.detail}});
  }
  write_json_file(checks, out / "checks.json");
  std::cout << res.rows.size() << " rows written to " << (out / "metrics.csv").string() << "\n";
  return res.all_pass() ? 0 : 1;
}

int run(const std::string& sub, const Options& opt) {
  ExperimentConfig cfg = load_config(opt.config);
  const std::string kind = kKinds.at(sub);
  if (!cfg.kind.empty() && cfg.kind != kind) {
    throw ConfigError("config kind '" + cfg.kind + "' does not match subcommand " + sub + " (expects '" + kind + "')");
  }
  cfg.kind = kind;
  if (!opt.checkpoint.empty()) cfg.checkpoint = opt.checkpoint;
  if (opt.jobs) cfg.jobs = opt.jobs;
  cfg.validate();

  // Fail on a missing checkpoint before creating any output.
  TransformerParams base;
  const bool needs_base = kind == "order" || kind == "compare" || kind == "demo_scaling";
  if (needs_base) base = load_pretrained(cfg);
  const bool sparsity_trained = kind == "sparsity" && !cfg.checkpoint.empty();
  if (sparsity_trained) base = load_pretrained(cfg);

  const fs::path out(opt.out);
  fs::create_directories(out);
  write_json_file(to_json(cfg), out / "config.json");

  if (kind == "construction") {
    const ExperimentResult res = run_construction_suite(cfg);
    write_json_file(res.report, out / "construction_report.json");
    return report(res, "construction", opt);
  }
  if (kind == "sparsity") {
    const ExperimentResult res = run_sparsity(cfg, sparsity_trained ? &base : nullptr);
    write_json_file(res.report, out / "sparsity_report.json");
    return report(res, "sparsity", opt);
  }
  if (kind == "pretrain" || kind == "evolution") {
    auto progress = [](const Checkpoint& c) {
      std::cerr << "step " << c.step << " held-out loss " << c.held_out_loss << std::endl;
    };
    ExperimentResult res;
    if (kind == "pretrain") {
      res = run_pretrain(cfg, progress);
    } else {
      const auto checkpoints = icl_pretrain(cfg.arch, cfg.family, cfg.pretrain, progress);
      res = run_evolution(cfg, &checkpoints);
      res.checkpoints = checkpoints;
    }
    save_checkpoint(res.checkpoints.back(), out / "checkpoint.json");
    std::cout << "checkpoint written to " << (out / "checkpoint.json").string() << "\n";
    return report(res, kind, opt);
  }
  if (kind == "order") return report(run_order_experiment(cfg, base), "order_sensitivity", opt);
  if (kind == "compare") return report(run_comparison_grid(cfg, base), "comparison", opt);
  return report(run_demo_scaling(cfg, base), "demo_scaling", opt);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"In-context learning vs gradient descent experiments"};
  app.require_subcommand(1);
  Options opt;
  for (const auto& [name, kind] : kKinds) {
    CLI::App* sub = app.add_subcommand(name, "run the " + kind + " experiment");
    sub->add_option("--config", opt.config, "experiment config JSON")->required();
    sub->add_option("--out", opt.out, "output directory")->required();
    sub->add_option("--checkpoint", opt.checkpoint, "pretrained checkpoint (overrides the config)");
    sub->add_option("--jobs", opt.jobs, "worker threads across seeds (overrides the config)")
        ->check(CLI::PositiveNumber);
    sub->add_flag("--emit-plot-data", opt.plot, "also write per-figure long-format CSV");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }
  const std::string sub = app.get_subcommands().front()->get_name();
  try {
    return run(sub, opt);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
