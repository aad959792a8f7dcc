// End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//
//   acceptance [output_dir] [--jobs N] [--strict]
//
// Exit codes: 0 when the run completes (every criterion reported), 1 with
// --strict when any criterion fails, 2 when the run aborts. When output_dir
// is given, every experiment's CSV is written there.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "iclgd/construction.hpp"
#include "iclgd/harness.hpp"
#include "iclgd/metrics.hpp"

using namespace iclgd;

namespace {

// Thresholds.
constexpr std::size_t kMinConstructionInstances = 200;
constexpr double kEquivalenceTol = 1e-10;
constexpr double kLargeWkMin = 0.9999;
constexpr double kLargeWvTarget = 0.75;
constexpr double kLargeWvTol = 0.01;
constexpr std::size_t kLargeDim = 4096;
constexpr std::size_t kMaterializedDim = 64;  // 128 x 128 matrices
constexpr std::size_t kOrderPairs = 50;
constexpr double kOcsHand = 0.9702;
constexpr double kOcsHandTol = 1e-4;
constexpr double kUniformLossTol = 1e-9;
constexpr std::size_t kGradientProbes = 20;
constexpr std::size_t kGradientMaxParams = 1000;
constexpr double kGradientRelTol = 1e-6;
constexpr double kGradientFloor = 1e-3;
constexpr double kFdStep = 1e-5;
constexpr double kStableTolerance = 0.05;
constexpr std::size_t kStableWindow = 5;

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

std::vector<Outcome> g_outcomes(13);

bool has_check(const ExperimentResult& r, const std::string& name, std::string* detail = nullptr) {
  for (const auto& c : r.checks) {
    if (c.name == name) {
      if (detail) *detail = c.detail;
      return c.pass;
    }
  }
  return false;
}

void require_check(Outcome& o, const ExperimentResult& r, const std::string& name) {
  std::string detail;
  const bool ok = has_check(r, name, &detail);
  o.require(ok, name + ": " + detail);
  if (ok) o.detail << " " << name << " ok";
}

TransformerParams from_construction(const LsaParams& c) {
  TransformerParams p;
  p.arch = ArchSpec::toy_continuous(c.d_x, c.d_y, 1);
  LayerParams L;
  L.w_q = c.w_q;
  L.w_k = c.w_k;
  L.w_v = c.w_v;
  L.proj = c.p;
  p.layers.push_back(L);
  return p;
}

// ---- criteria computed directly ------------------------------------------

void criterion_1_to_3(const ExperimentConfig& base) {
  ExperimentConfig cfg = base;
  cfg.construction.materialized_dims = {1, 2, 8, kMaterializedDim};
  cfg.construction.analytic_dims = {kLargeDim};
  const ExperimentResult r = run_construction_suite(cfg);

  Outcome& c1 = g_outcomes[1];
  const auto& summary = r.report.at("summary");
  const std::size_t total = summary.at("instances");
  const std::size_t passed = summary.at("passed");
  const double worst = summary.at("max_abs_diff");
  c1.require(total >= kMinConstructionInstances, "fewer than 200 instances");
  c1.require(passed == total, "instance failures");
  c1.require(worst <= kEquivalenceTol, "max diff above 1e-10");
  std::size_t max_dx = 0, max_dy = 0, max_n = 0;
  for (const auto& inst : r.report.at("instances")) {
    max_dx = std::max<std::size_t>(max_dx, inst.at("d_x"));
    max_dy = std::max<std::size_t>(max_dy, inst.at("d_y"));
    max_n = std::max<std::size_t>(max_n, inst.at("n"));
  }
  c1.require(max_dx <= 8 && max_dy <= 4 && max_n <= 32, "instance sizes outside the stated ranges");
  c1.detail << " " << passed << "/" << total << " instances, max |diff| " << format_double(worst);

  Outcome& c2 = g_outcomes[2];
  require_check(c2, r, "sparsity_matches_analytic");
  require_check(c2, r, "sparsity_counts_match");
  const AnalyticSparsity big = analytic_sparsity(kLargeDim, kLargeDim);
  const AnalyticSparsity st = structural_sparsity(kLargeDim, kLargeDim, 1e-3);
  c2.require(big.sr_kq > kLargeWkMin, "w_k at 4096 not above 0.9999");
  c2.require(std::abs(big.sr_v - kLargeWvTarget) <= kLargeWvTol, "w_v at 4096 not within 0.01 of 0.75");
  c2.require(st.sr_kq == big.sr_kq && st.sr_v == big.sr_v, "block-structure count disagrees at 4096");
  // Materialized 128-dim check against the analytic value.
  SeededRng rng(2024);
  const Matrix w0 = sample_gaussian(rng, kMaterializedDim, kMaterializedDim, 0.0, 1.0);
  double min_mag = INFINITY;
  for (double v : w0.values()) min_mag = std::min(min_mag, std::abs(v));
  const LsaParams p = build_construction(w0, 0.1, 8);
  const double delta = min_mag / 2;
  const AnalyticSparsity a64 = analytic_sparsity(kMaterializedDim, kMaterializedDim);
  c2.require(sparsity_ratio(p.w_k, delta) == a64.sr_kq && sparsity_ratio(p.w_q, delta) == a64.sr_kq &&
                 sparsity_ratio(p.w_v, delta) == a64.sr_v,
             "materialized 128-dim ratios differ from the analytic values");
  c2.detail << " d=4096: w_k " << format_double(big.sr_kq) << ", w_v " << format_double(big.sr_v);

  Outcome& c3 = g_outcomes[3];
  require_check(c3, r, "n0_rejected");
  try {
    build_construction(Matrix{{0.5}}, 0.1, 0);
    c3.require(false, "N=0 accepted");
  } catch (const std::domain_error& e) {
    c3.require(std::string(e.what()).find("diverge") != std::string::npos, "error does not mention divergence");
  }
}

void criterion_4(const ExperimentConfig& cfg, const TransformerParams& base) {
  Outcome& o = g_outcomes[4];
  SeededRng rng = SeededRng(7).derive("gd_stability");
  const TokenTask task = sample_token_task(cfg.family.vocab, rng);
  const DemonstrationSet demos = sample_demonstrations(task, cfg.order_demos, rng);
  const auto orders = random_orderings(demos.size(), cfg.n_orderings, rng);
  for (double lr : cfg.lrs) {
    for (const UpdateScope& scope : {UpdateScope::full(), UpdateScope::value_matrix(cfg.deep_layer)}) {
      TrainConfig tc;
      tc.optimizer = OptimizerKind::gd;
      tc.learning_rate = lr;
      tc.epochs = cfg.epochs;
      tc.eval_every = cfg.eval_every;
      tc.scope = scope;
      const TransformerParams ref = gd_finetune(base, apply_ordering(demos, orders[0]), tc).final;
      std::vector<ConfidenceDistribution> outs;
      const TokenId q[1] = {demos.tokens()[0].x};
      for (const auto& ord : orders) {
        const TransformerParams p = gd_finetune(base, apply_ordering(demos, ord), tc).final;
        o.require(p == ref, "parameters differ across orderings");
        outs.push_back(forward_distribution(p, q));
      }
      o.require(order_sensitivity(outs) == 0.0, "Sen over GD models is not 0");
    }
  }
  o.detail << " " << cfg.lrs.size() * 2 << " (lr, scope) cells x " << orders.size()
           << " orderings bit-identical, Sen == 0";
}

void criterion_5() {
  Outcome& o = g_outcomes[5];
  SeededRng rng(55);
  double worst_thm = 0.0, worst_def = 0.0, worst_cor = 0.0;
  bool scope_exact = true;
  for (std::size_t pair = 0; pair < kOrderPairs; ++pair) {
    const std::size_t dx = 1 + rng.uniform_index(6), dy = 1 + rng.uniform_index(3), n = 3 + rng.uniform_index(14);
    const double eta = std::vector<double>{0.01, 0.1, 1.0}[rng.uniform_index(3)];
    const RegressionTask task = sample_regression_task(dx, dy, 1.0, 1.0, rng);
    const DemonstrationSet demos = sample_demonstrations(task, n, rng);
    const Matrix w0 = sample_gaussian(rng, dy, dx, 0.0, 1.0);
    const Matrix xq = sample_gaussian(rng, dx, 1, 0.0, 1.0);
    const auto orders = random_orderings(n, 3, rng);
    const Ordering& sa = orders[1];
    const Ordering& sb = orders[2];
    const TransformerParams icl = from_construction(build_construction(w0, eta, n));

    // ICL side: the constructed model reading each ordered prompt.
    const DemonstrationSet da = apply_ordering(demos, sa), db = apply_ordering(demos, sb);
    const Matrix icl_a = forward_regression(icl, embed_regression_tokens(da, xq));
    const Matrix icl_b = forward_regression(icl, embed_regression_tokens(db, xq));

    // Algorithm side: one GD step on the ordered demos, then the updated
    // linear model applied to the query without context.
    const Matrix dw_a = gd_step(LinearModel{w0, eta}, da);
    const Matrix dw_b = gd_step(LinearModel{w0, eta}, db);
    const Matrix alg_a = matmul(dw_a, xq), alg_b = matmul(dw_b, xq);
    worst_def = std::max({worst_def, max_abs_diff(icl_a, alg_a), max_abs_diff(icl_b, alg_b)});
    worst_thm = std::max(worst_thm, max_abs_diff(subtract(icl_a, icl_b), subtract(alg_a, alg_b)));

    // Sub-model form: the update is written into the w0 block of w_v only;
    // every other weight stays bit-identical.
    auto with_submodel = [&](const Matrix& dw) {
      TransformerParams p = icl;
      for (std::size_t r = 0; r < dy; ++r) {
        for (std::size_t c = 0; c < dx; ++c) p.layers[0].w_v(dx + r, c) += dw(r, c);
      }
      return p;
    };
    const TransformerParams ta = with_submodel(dw_a), tb = with_submodel(dw_b);
    auto submodel_of = [&](const TransformerParams& p) {
      Matrix w(dy, dx);
      for (std::size_t r = 0; r < dy; ++r) {
        for (std::size_t c = 0; c < dx; ++c) w(r, c) = p.layers[0].w_v(dx + r, c);
      }
      return w;
    };
    const Matrix sub_a = matmul(submodel_of(ta), xq), sub_b = matmul(submodel_of(tb), xq);
    worst_cor = std::max(worst_cor, max_abs_diff(subtract(icl_a, icl_b), subtract(sub_a, sub_b)));
    const auto outside = [](const ParamId& id) { return id.kind != ParamKind::w_v; };
    scope_exact = scope_exact && parameter_gap(icl, ta, outside) == 0.0 && parameter_gap(icl, tb, outside) == 0.0;
    for (const TransformerParams* t : {&ta, &tb}) {
      for (std::size_t r = 0; r < dx + dy; ++r) {
        for (std::size_t c = 0; c < dx + dy; ++c) {
          const bool in_block = r >= dx && c < dx;
          if (!in_block) scope_exact = scope_exact && t->layers[0].w_v(r, c) == icl.layers[0].w_v(r, c);
        }
      }
    }
  }
  o.require(worst_def <= kEquivalenceTol, "construction is not equivalent to the GD step");
  o.require(worst_thm <= kEquivalenceTol, "identity sides differ");
  o.require(worst_cor <= kEquivalenceTol, "sub-model identity sides differ");
  o.require(scope_exact, "out-of-scope parameters changed");
  o.detail << " " << kOrderPairs << " pairs: identity max |diff| " << format_double(worst_thm)
           << ", sub-model " << format_double(worst_cor) << ", out-of-scope gap 0";
}

void criterion_9() {
  Outcome& o = g_outcomes[9];
  const ConfidenceDistribution p1{{0.5, 0.3, 0.15, 0.0, 0.05}};
  const ConfidenceDistribution p2{{0.4, 0.4, 0.0, 0.15, 0.05}};
  const double v = ocs(p1, p2, 3);
  o.require(std::abs(v - kOcsHand) <= kOcsHandTol, "OCS hand case");
  o.require(ocs(ConfidenceDistribution{{0.5, 0.5, 0, 0}}, ConfidenceDistribution{{0, 0, 0.5, 0.5}}, 2) == 0.0,
            "OCS disjoint case");

  const std::vector<ConfidenceDistribution> two{ConfidenceDistribution{{1, 0}}, ConfidenceDistribution{{0, 1}}};
  o.require(order_sensitivity(two) == 1.0, "Sen hand case");
  const std::vector<ConfidenceDistribution> same(10, ConfidenceDistribution{{0.2, 0.5, 0.3}});
  o.require(order_sensitivity(same) == 0.0, "Sen of identical distributions");

  const ConfidenceDistribution t{{0.4, 0.3, 0.2, 0.1}}, u{{0.4, 0.1, 0.3, 0.2}};
  o.require(token_overlap(t, u, 2) == 0.5, "token overlap hand case");
  o.require(token_overlap(t, t, 3) == 1.0, "token overlap self");

  const std::vector<ConfidenceDistribution> preds{ConfidenceDistribution{{0.1, 0.7, 0.2}},
                                                  ConfidenceDistribution{{0.1, 0.45, 0.45}}};
  o.require(accuracy(preds, std::vector<TokenId>{1, 1}) == 1.0, "accuracy with smallest-id tie break");

  SeededRng rng(1);
  TransformerParams zero = init_transformer(ArchSpec::toy_discrete(), rng);
  zero.for_each([](const ParamId&, Matrix& m) { m.fill(0.0); });
  const double loss = label_loss(zero, std::vector<TokenId>{1, 9, 0, 1}, 9);
  o.require(std::abs(loss - std::log(32.0)) <= kUniformLossTol, "uniform-model loss");
  o.detail << " OCS " << format_double(v) << ", Sen 1, uniform loss - ln 32 = " << format_double(loss - std::log(32.0));
}

void criterion_10() {
  Outcome& o = g_outcomes[10];
  ArchSpec a;
  a.layers = 2;
  a.width = 4;
  a.heads = 2;
  a.vocab_size = 13;
  a.max_len = 8;
  a.ffn_hidden = 3;
  a.init_std = 0.5;
  SeededRng rng(10);
  const TransformerParams params = init_transformer(a, rng);
  o.require(params.parameter_count() <= kGradientMaxParams, "model too large");
  const std::vector<TokenId> seq{1, 9, 0, 2, 10, 0, 1};
  const std::vector<LabelTarget> targets{{0, 9}, {3, 10}, {6, 9}};
  TransformerParams grad = params.zeros_like();
  label_loss_and_grad(params, seq, targets, 1.0, grad);

  // Flatten (matrix, index) addresses so probes are drawn uniformly over all entries.
  std::vector<std::pair<ParamId, std::size_t>> entries;
  params.for_each([&](const ParamId& id, const Matrix& m) {
    for (std::size_t i = 0; i < m.values().size(); ++i) entries.emplace_back(id, i);
  });
  auto entry = [](TransformerParams& p, const ParamId& want, std::size_t i) -> double& {
    double* out = nullptr;
    p.for_each([&](const ParamId& id, Matrix& m) {
      if (id.kind == want.kind && id.layer == want.layer) out = &m.values()[i];
    });
    return *out;
  };
  double worst = 0.0;
  for (std::size_t probe = 0; probe < kGradientProbes; ++probe) {
    const auto& [id, i] = entries[rng.uniform_index(entries.size())];
    TransformerParams p = params;
    TransformerParams scratch = params.zeros_like();
    double& x = entry(p, id, i);
    const double keep = x;
    x = keep + kFdStep;
    const double up = label_loss_and_grad(p, seq, targets, 0.0, scratch);
    x = keep - kFdStep;
    const double down = label_loss_and_grad(p, seq, targets, 0.0, scratch);
    const double fd = (up - down) / (2 * kFdStep);
    const double an = entry(grad, id, i);
    const double rel = std::abs(an - fd) / std::max(std::abs(fd), kGradientFloor);
    worst = std::max(worst, rel);
  }
  o.require(worst <= kGradientRelTol, "finite-difference mismatch");
  o.detail << " " << params.parameter_count() << " params, " << kGradientProbes << " probes, worst rel err "
           << format_double(worst);
}

void criterion_12(const ExperimentConfig& cfg, const TransformerParams& base) {
  Outcome& o = g_outcomes[12];
  ExperimentConfig small = cfg;
  small.pretrain.epochs = 100;
  small.pretrain.eval_every = 50;
  small.eval_prompts = 50;
  const std::string pre_a = to_csv(run_pretrain(small).rows), pre_b = to_csv(run_pretrain(small).rows);
  o.require(pre_a == pre_b, "pretraining CSV differs between runs");

  ExperimentConfig grid = cfg;
  grid.lrs = {cfg.lrs.front()};
  grid.epochs = 40;
  grid.jobs = 1;
  const std::string a = to_csv(run_comparison_grid(grid, base).rows);
  const std::string b = to_csv(run_comparison_grid(grid, base).rows);
  grid.jobs = 3;
  const std::string c = to_csv(run_comparison_grid(grid, base).rows);
  o.require(a == b, "comparison CSV differs between runs");
  o.require(a == c, "parallel comparison CSV differs from serial");
  o.require(to_csv(run_construction_suite(cfg).rows) == to_csv(run_construction_suite(cfg).rows),
            "construction CSV differs between runs");
  o.detail << " pretraining, comparison (serial and 3 threads) and construction CSVs byte-identical";
}

void save(const std::filesystem::path& dir, const std::string& name, const ExperimentResult& r) {
  if (dir.empty()) return;
  std::filesystem::create_directories(dir);
  write_csv(r.rows, dir / (name + ".csv"));
}

}  // namespace

int main(int argc, char** argv) {
  std::filesystem::path out;
  bool strict = false;
  std::size_t jobs = std::max(1u, std::min(3u, std::thread::hardware_concurrency()));
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    if (arg == "--jobs" && i + 1 < argc) {
      jobs = std::strtoul(argv[++i], nullptr, 10);
    } else if (arg == "--strict") {
      strict = true;
    } else {
      out = arg;
    }
  }
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  ExperimentConfig cfg;  // defaults: 3 seeds, 8 demos, 10 orderings, 200 epochs, 4 lrs
  cfg.jobs = jobs;
  cfg.stable_window = kStableWindow;
  cfg.stable_tolerance = kStableTolerance;

  try {
    criterion_1_to_3(cfg);
    criterion_5();
    criterion_9();
    criterion_10();
    std::cerr << "[" << elapsed() << "s] pretraining the toy model\n";

    const ExperimentResult pre = run_pretrain(cfg);
    save(out, "pretrain", pre);
    const TransformerParams base = pre.checkpoints.back().params;
    if (!out.empty()) save_checkpoint(pre.checkpoints.back(), out / "checkpoint.json");

    std::cerr << "[" << elapsed() << "s] evolution\n";
    const ExperimentResult evo = run_evolution(cfg, &pre.checkpoints);
    save(out, "evolution", evo);
    Outcome& c11 = g_outcomes[11];
    require_check(c11, evo, "convergence_onset");
    require_check(c11, evo, "parameter_gap_increasing");
    require_check(c11, evo, "final_accuracy_stable");
    require_check(c11, evo, "first_checkpoint_is_init");

    std::cerr << "[" << elapsed() << "s] batch-GD order stability\n";
    criterion_4(cfg, base);

    std::cerr << "[" << elapsed() << "s] order sensitivity\n";
    const ExperimentResult order = run_order_experiment(cfg, base);
    save(out, "order_sensitivity", order);
    require_check(g_outcomes[4], order, "gd_sen_zero");
    Outcome& c6 = g_outcomes[6];
    require_check(c6, order, "icl_sen_exceeds_finetuned");
    require_check(c6, order, "sgd_sen_decreases_when_converging");

    std::cerr << "[" << elapsed() << "s] comparison grid\n";
    const ExperimentResult grid = run_comparison_grid(cfg, base);
    save(out, "comparison", grid);
    Outcome& c7 = g_outcomes[7];
    require_check(c7, grid, "icl_icl_exceeds_icl_gd_token_overlap");
    require_check(c7, grid, "icl_icl_exceeds_icl_gd_ocs");
    require_check(c7, grid, "overlap_ocs_in_unit_interval");

    std::cerr << "[" << elapsed() << "s] demo scaling\n";
    const ExperimentResult scaling = run_demo_scaling(cfg, base);
    save(out, "demo_scaling", scaling);
    Outcome& c8 = g_outcomes[8];
    require_check(c8, scaling, "accuracy_grows_with_demos");
    require_check(c8, scaling, "zero_demo_equals_base");

    std::cerr << "[" << elapsed() << "s] determinism\n";
    criterion_12(cfg, base);
  } catch (const std::exception& e) {
    std::cerr << "acceptance run aborted: " << e.what() << "\n";
    return 2;
  }

  bool all = true;
  for (std::size_t i = 1; i <= 12; ++i) {
    const Outcome& o = g_outcomes[i];
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i << ":" << o.detail.str() << "\n";
  }
  std::cout << (all ? "all criteria pass" : "some criteria FAIL") << "; total time " << elapsed() << " s\n";
  return strict && !all ? 1 : 0;
}
