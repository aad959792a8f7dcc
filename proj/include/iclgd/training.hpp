#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "iclgd/tasks.hpp"
#include "iclgd/transformer.hpp"

namespace iclgd {

enum class OptimizerKind { gd, sgd, adam };

std::string to_string(OptimizerKind k);
OptimizerKind optimizer_from_string(const std::string& s);

struct AdamSettings {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Which parameters an optimizer may change. Layers are numbered from 1.
struct UpdateScope {
  enum class Kind { full, value_matrix };
  Kind kind = Kind::full;
  std::size_t layer = 0;

  static UpdateScope full() { return {}; }
  static UpdateScope value_matrix(std::size_t layer) { return {Kind::value_matrix, layer}; }

  bool contains(const ParamId& id) const;
  void validate(const ArchSpec& arch) const;
  std::string tag() const;
  bool operator==(const UpdateScope&) const = default;
};

struct TrainConfig {
  OptimizerKind optimizer = OptimizerKind::gd;
  double learning_rate = 1e-4;
  std::size_t epochs = 200;
  std::size_t eval_every = 20;
  UpdateScope scope;
  AdamSettings adam;
  std::uint64_t seed = 0;
  // Pretraining only.
  std::size_t batch_size = 16;
  std::size_t held_out = 64;

  void validate() const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  TrainingDiverged(std::size_t step, const std::string& what)
      : std::runtime_error(what + " at step " + std::to_string(step)), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

struct Checkpoint {
  std::size_t step = 0;
  TransformerParams params;
  double held_out_loss = std::numeric_limits<double>::quiet_NaN();
};

// Applies gradients to the parameters inside a scope. Holds Adam moments.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, UpdateScope scope, AdamSettings adam = {});

  void step(TransformerParams& params, const TransformerParams& grad);
  std::size_t steps_taken() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_;
  UpdateScope scope_;
  AdamSettings adam_;
  std::size_t t_ = 0;
  TransformerParams m_;
  TransformerParams v_;
};

// ---- fine-tuning on demonstrations ----------------------------------------

// Each demo (x, y) becomes the prompt [x] with label y; the loss is the
// label cross-entropy. GD takes one full-batch step per epoch on the mean
// loss, with per-demo gradients summed in canonical (content) order. SGD and
// Adam take one step per demo in the presented order.
struct FinetuneResult {
  TransformerParams final;
  std::vector<Checkpoint> checkpoints;  // epoch 0, eval_every, ..., epochs
  std::vector<double> train_loss;       // mean demo loss at each checkpoint
};

FinetuneResult gd_finetune(const TransformerParams& params, const DemonstrationSet& demos,
                           const TrainConfig& config);

// Mean label loss of `params` over demos, summed in canonical order.
double demo_loss(const TransformerParams& params, const DemonstrationSet& demos);

// ---- pretraining on the in-context objective ------------------------------

struct RegressionFamily {
  std::size_t d_x = 2;
  std::size_t d_y = 1;
  double weight_std = 1.0;
  double input_std = 1.0;
  std::size_t n_demos = 16;
};

struct TokenFamily {
  TokenVocabulary vocab = TokenVocabulary::standard();
  std::size_t n_demos = 8;
};

using TaskFamily = std::variant<RegressionFamily, TokenFamily>;

// One training sequence drawn from a token family: prompt of n demos plus a
// query taken from the demonstrated features, with label targets at every
// x position and at the query.
struct TokenEpisode {
  TokenTask task;
  DemonstrationSet demos;
  TokenId query = 0;
  std::vector<TokenId> sequence;
  std::vector<LabelTarget> targets;
};
TokenEpisode sample_token_episode(const TokenFamily& family, SeededRng& rng);

// Trains on the in-context objective: each sequence's loss is taken at the
// label positions only. `config.epochs` counts optimizer steps and
// checkpoints are taken every `config.eval_every` steps (plus step 0).
// Held-out loss is measured on a fixed stream derived from config.seed.
// `on_checkpoint`, when set, is called for each checkpoint as it is taken.
std::vector<Checkpoint> icl_pretrain(const ArchSpec& arch, const TaskFamily& family, const TrainConfig& config,
                                     const std::function<void(const Checkpoint&)>& on_checkpoint = {});

// Fraction of fresh episodes with n_demos demonstrations whose query label is
// the argmax over the whole vocabulary.
double icl_accuracy(const TransformerParams& params, const TokenFamily& family, std::size_t n_prompts,
                    SeededRng& rng);

}  // namespace iclgd
