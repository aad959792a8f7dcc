#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "iclgd/report.hpp"
#include "iclgd/serialize.hpp"
#include "iclgd/training.hpp"

namespace iclgd {

// Malformed or inconsistent experiment configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Construction sweep and sparsity grid.
struct ConstructionSweep {
  std::vector<std::size_t> d_x{1, 2, 4, 8};
  std::vector<std::size_t> d_y{1, 2, 4};
  std::vector<std::size_t> n_demos{1, 4, 16, 32};
  std::vector<double> eta{0.01, 0.1, 1.0};
  std::vector<double> deltas{1e-4, 1e-3, 1e-2, 1e-1};
  // Square sizes d = d_x = d_y for the materialized sparsity check, plus
  // sizes that are only evaluated from the block structure.
  std::vector<std::size_t> materialized_dims{1, 2, 8, 64};
  std::vector<std::size_t> analytic_dims{4096};
};

struct ExperimentConfig {
  std::string kind;  // construction | pretrain | order | compare | evolution | demo_scaling | sparsity
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<std::size_t> n_demos{1, 2, 4, 8};
  std::vector<double> lrs{1e-4, 5e-4, 1e-5, 5e-5};
  std::size_t epochs = 200;
  std::size_t eval_every = 20;
  std::size_t n_orderings = 10;
  std::size_t k = 10;

  ArchSpec arch = ArchSpec::toy_discrete();
  TokenFamily family;
  TrainConfig pretrain = default_pretrain();
  std::string checkpoint;  // pretrained model for order/compare/demo_scaling

  // Order-sensitivity study.
  std::size_t order_demos = 8;
  std::vector<OptimizerKind> optimizers{OptimizerKind::gd, OptimizerKind::sgd, OptimizerKind::adam};

  // GD-hat layers (1-based).
  std::size_t mid_layer = 2;
  std::size_t deep_layer = 4;

  // Evolution study.
  std::size_t eval_prompts = 500;
  double onset_accuracy = 0.9;
  std::size_t stable_window = 5;
  double stable_tolerance = 0.05;

  // Demo-count scaling.
  std::vector<std::size_t> scaling_demos{0, 8, 512};
  double scaling_lr = 0.1;

  ConstructionSweep construction;

  std::size_t jobs = 1;  // worker threads across seeds

  static TrainConfig default_pretrain();
  void validate() const;
};

ExperimentConfig config_from_json(const Json& j);
Json to_json(const ExperimentConfig& c);
// Reads a config file; any problem is reported as ConfigError.
ExperimentConfig load_config(const std::filesystem::path& path);

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct ExperimentResult {
  std::vector<MetricReport> rows;  // sorted by the CSV key
  std::vector<Check> checks;
  Json report;  // structured detail for JSON output (construction, sparsity)
  std::vector<Checkpoint> checkpoints;  // pretraining runs only

  bool all_pass() const;
};

// Method tags for fine-tuned variants: "GD", "GD-hat-mid", "SGD-hat-deep", ...
std::string method_tag(OptimizerKind k, const UpdateScope& scope, const ExperimentConfig& cfg);

ExperimentResult run_construction_suite(const ExperimentConfig& cfg);
ExperimentResult run_sparsity(const ExperimentConfig& cfg, const TransformerParams* trained = nullptr);

// Pretrains the configured toy model. Rows: held-out loss and ICL accuracy per checkpoint.
// `on_checkpoint` is forwarded to icl_pretrain for progress reporting.
ExperimentResult run_pretrain(const ExperimentConfig& cfg,
                              const std::function<void(const Checkpoint&)>& on_checkpoint = {});

ExperimentResult run_order_experiment(const ExperimentConfig& cfg, const TransformerParams& base);
ExperimentResult run_comparison_grid(const ExperimentConfig& cfg, const TransformerParams& base);

// Uses `checkpoints` when given, otherwise pretrains first.
ExperimentResult run_evolution(const ExperimentConfig& cfg,
                               const std::vector<Checkpoint>* checkpoints = nullptr);

ExperimentResult run_demo_scaling(const ExperimentConfig& cfg, const TransformerParams& base);

// Loads cfg.checkpoint; throws ConfigError with an actionable message when
// the path is unset or unreadable.
TransformerParams load_pretrained(const ExperimentConfig& cfg);

}  // namespace iclgd
