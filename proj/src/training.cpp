#include "iclgd/training.hpp"

#include <cmath>
#include <stdexcept>

namespace iclgd {

std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::gd: return "GD";
    case OptimizerKind::sgd: return "SGD";
    case OptimizerKind::adam: return "Adam";
  }
  return "?";
}

OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "GD" || s == "gd") return OptimizerKind::gd;
  if (s == "SGD" || s == "sgd") return OptimizerKind::sgd;
  if (s == "Adam" || s == "adam") return OptimizerKind::adam;
  throw std::invalid_argument("unknown optimizer '" + s + "'");
}

bool UpdateScope::contains(const ParamId& id) const {
  if (kind == Kind::full) return true;
  return id.kind == ParamKind::w_v && id.layer + 1 == layer;
}

void UpdateScope::validate(const ArchSpec& arch) const {
  if (kind == Kind::value_matrix && (layer == 0 || layer > arch.layers)) {
    throw std::invalid_argument("UpdateScope: layer " + std::to_string(layer) + " outside 1.." +
                                std::to_string(arch.layers));
  }
}

std::string UpdateScope::tag() const {
  return kind == Kind::full ? "full" : "w_v@" + std::to_string(layer);
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("TrainConfig: learning_rate must be finite and non-negative");
  }
  if (eval_every == 0) throw std::invalid_argument("TrainConfig: eval_every must be positive");
  if (epochs % eval_every != 0) throw std::invalid_argument("TrainConfig: eval_every must divide epochs");
  if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
}

// ---------------------------------------------------------------------------

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, UpdateScope scope, AdamSettings adam)
    : kind_(kind), lr_(learning_rate), scope_(scope), adam_(adam) {}

void Optimizer::step(TransformerParams& params, const TransformerParams& grad) {
  ++t_;
  std::vector<const Matrix*> grads;
  grad.for_each([&](const ParamId&, const Matrix& m) { grads.push_back(&m); });

  if (kind_ != OptimizerKind::adam) {
    std::size_t idx = 0;
    params.for_each([&](const ParamId& id, Matrix& p) {
      const Matrix& g = *grads[idx++];
      if (!scope_.contains(id)) return;
      auto pv = p.values();
      auto gv = g.values();
      for (std::size_t i = 0; i < pv.size(); ++i) pv[i] -= lr_ * gv[i];
    });
    return;
  }

  if (t_ == 1) {
    m_ = params.zeros_like();
    v_ = params.zeros_like();
  }
  std::vector<Matrix*> ms, vs;
  m_.for_each([&](const ParamId&, Matrix& m) { ms.push_back(&m); });
  v_.for_each([&](const ParamId&, Matrix& m) { vs.push_back(&m); });
  const double bc1 = 1.0 - std::pow(adam_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(adam_.beta2, static_cast<double>(t_));
  std::size_t idx = 0;
  params.for_each([&](const ParamId& id, Matrix& p) {
    const std::size_t k = idx++;
    if (!scope_.contains(id)) return;
    auto pv = p.values();
    auto gv = grads[k]->values();
    auto mv = ms[k]->values();
    auto vv = vs[k]->values();
    for (std::size_t i = 0; i < pv.size(); ++i) {
      mv[i] = adam_.beta1 * mv[i] + (1.0 - adam_.beta1) * gv[i];
      vv[i] = adam_.beta2 * vv[i] + (1.0 - adam_.beta2) * gv[i] * gv[i];
      const double mhat = bc1 > 0.0 ? mv[i] / bc1 : mv[i];
      const double vhat = bc2 > 0.0 ? vv[i] / bc2 : vv[i];
      pv[i] -= lr_ * mhat / (std::sqrt(vhat) + adam_.eps);
    }
  });
}

// ---------------------------------------------------------------------------

namespace {

double single_demo_grad(const TransformerParams& params, const TokenPair& p, double weight,
                        TransformerParams& grad) {
  const TokenId prompt[1] = {p.x};
  const LabelTarget target[1] = {{0, p.y}};
  return label_loss_and_grad(params, prompt, target, weight, grad);
}

}  // namespace

double demo_loss(const TransformerParams& params, const DemonstrationSet& demos) {
  const auto& pairs = demos.tokens();
  if (pairs.empty()) throw std::invalid_argument("demo_loss: empty demonstration set");
  double total = 0.0;
  for (std::size_t i : canonical_order(demos)) {
    const TokenId prompt[1] = {pairs[i].x};
    total += label_loss(params, prompt, pairs[i].y);
  }
  return total / static_cast<double>(pairs.size());
}

FinetuneResult gd_finetune(const TransformerParams& params, const DemonstrationSet& demos,
                           const TrainConfig& config) {
  config.validate();
  if (!params.is_discrete()) throw std::invalid_argument("gd_finetune: model must be the discrete variant");
  config.scope.validate(params.arch);
  const auto& pairs = demos.tokens();
  if (pairs.empty()) throw std::invalid_argument("gd_finetune: empty demonstration set");

  FinetuneResult res;
  res.final = params;
  Optimizer opt(config.optimizer, config.learning_rate, config.scope, config.adam);
  const std::vector<std::size_t> canon = canonical_order(demos);
  const double inv_n = 1.0 / static_cast<double>(pairs.size());

  auto record = [&](std::size_t epoch) {
    const double loss = demo_loss(res.final, demos);
    if (!std::isfinite(loss)) throw TrainingDiverged(epoch, "gd_finetune: non-finite loss");
    res.checkpoints.push_back({epoch, res.final, loss});
    res.train_loss.push_back(loss);
  };
  record(0);

  TransformerParams grad = params.zeros_like();
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    if (config.optimizer == OptimizerKind::gd) {
      grad.for_each([](const ParamId&, Matrix& m) { m.fill(0.0); });
      double loss = 0.0;
      for (std::size_t i : canon) loss += single_demo_grad(res.final, pairs[i], inv_n, grad);
      if (!std::isfinite(loss)) throw TrainingDiverged(epoch, "gd_finetune: non-finite loss");
      opt.step(res.final, grad);
    } else {
      for (const auto& p : pairs) {
        grad.for_each([](const ParamId&, Matrix& m) { m.fill(0.0); });
        const double loss = single_demo_grad(res.final, p, 1.0, grad);
        if (!std::isfinite(loss)) throw TrainingDiverged(epoch, "gd_finetune: non-finite loss");
        opt.step(res.final, grad);
      }
    }
    if (epoch % config.eval_every == 0) record(epoch);
  }
  return res;
}

// ---------------------------------------------------------------------------

TokenEpisode sample_token_episode(const TokenFamily& family, SeededRng& rng) {
  TokenEpisode ep;
  ep.task = sample_token_task(family.vocab, rng);
  ep.demos = sample_demonstrations(ep.task, family.n_demos, rng);
  const auto& pairs = ep.demos.tokens();
  if (pairs.empty()) {
    ep.query = family.vocab.features[rng.uniform_index(family.vocab.features.size())];
  } else {
    ep.query = pairs[rng.uniform_index(pairs.size())].x;
  }
  ep.sequence = build_prompt(ep.demos, ep.query, Ordering::identity(pairs.size()), family.vocab.delimiter);
  for (std::size_t i = 0; i < pairs.size(); ++i) ep.targets.push_back({3 * i, pairs[i].y});
  ep.targets.push_back({ep.sequence.size() - 1, ep.task.label_of(ep.query)});
  return ep;
}

namespace {

struct RegressionEpisode {
  Matrix tokens;
  Matrix target;
};

RegressionEpisode sample_regression_episode(const RegressionFamily& f, SeededRng& rng) {
  const RegressionTask task = sample_regression_task(f.d_x, f.d_y, f.weight_std, f.input_std, rng);
  const DemonstrationSet demos = sample_demonstrations(task, f.n_demos, rng);
  const Matrix query = sample_gaussian(rng, f.d_x, 1, 0.0, f.input_std);
  return {embed_regression_tokens(demos, query, f.d_y), task.apply(query)};
}

void check_family(const ArchSpec& arch, const TaskFamily& family) {
  if (const auto* rf = std::get_if<RegressionFamily>(&family)) {
    if (arch.variant != ModelVariant::continuous || arch.d_x != rf->d_x || arch.d_y != rf->d_y) {
      throw std::invalid_argument("icl_pretrain: regression family needs a continuous model of matching dims");
    }
    if (rf->n_demos == 0) throw std::invalid_argument("icl_pretrain: regression family needs n_demos >= 1");
  } else {
    const auto& tf = std::get<TokenFamily>(family);
    tf.vocab.validate();
    if (arch.variant != ModelVariant::discrete || arch.vocab_size != tf.vocab.size) {
      throw std::invalid_argument("icl_pretrain: token family needs a discrete model with matching vocabulary");
    }
    if (3 * tf.n_demos + 1 > arch.max_len) {
      throw std::invalid_argument("icl_pretrain: prompts of " + std::to_string(tf.n_demos) +
                                  " demos exceed max_len");
    }
  }
}

// Mean loss over a batch of episodes drawn from `rng`; adds weight/batch * grad.
double batch_loss(const TransformerParams& params, const TaskFamily& family, std::size_t batch,
                  SeededRng& rng, TransformerParams* grad) {
  const double w = 1.0 / static_cast<double>(batch);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    if (const auto* rf = std::get_if<RegressionFamily>(&family)) {
      const RegressionEpisode ep = sample_regression_episode(*rf, rng);
      if (grad) {
        total += w * regression_loss_and_grad(params, ep.tokens, ep.target, w, *grad);
      } else {
        const Matrix diff = subtract(forward_regression(params, ep.tokens), ep.target);
        double sq = 0.0;
        for (double v : diff.values()) sq += v * v;
        total += w * sq;
      }
    } else {
      const TokenEpisode ep = sample_token_episode(std::get<TokenFamily>(family), rng);
      if (grad) {
        total += w * label_loss_and_grad(params, ep.sequence, ep.targets, w, *grad);
      } else {
        const Matrix logits = forward_logits(params, ep.sequence);
        const double per = 1.0 / static_cast<double>(ep.targets.size());
        for (const auto& tg : ep.targets) {
          auto row = logits.row(tg.position);
          double mx = row[0];
          for (double v : row) mx = std::max(mx, v);
          double z = 0.0;
          for (double v : row) z += std::exp(v - mx);
          total += w * per * (std::log(z) - (row[tg.label] - mx));
        }
      }
    }
  }
  return total;
}

}  // namespace

std::vector<Checkpoint> icl_pretrain(const ArchSpec& arch, const TaskFamily& family, const TrainConfig& config,
                                     const std::function<void(const Checkpoint&)>& on_checkpoint) {
  config.validate();
  check_family(arch, family);
  SeededRng root(config.seed);
  SeededRng init_rng = root.derive("init");
  SeededRng train_rng = root.derive("train");
  TransformerParams params = init_transformer(arch, init_rng);

  auto held_out_loss = [&](const TransformerParams& p) {
    SeededRng held = root.derive("held_out");
    return batch_loss(p, family, config.held_out, held, nullptr);
  };

  std::vector<Checkpoint> checkpoints;
  auto record = [&](std::size_t step) {
    const double loss = held_out_loss(params);
    if (!std::isfinite(loss)) throw TrainingDiverged(step, "icl_pretrain: non-finite held-out loss");
    checkpoints.push_back({step, params, loss});
    if (on_checkpoint) on_checkpoint(checkpoints.back());
  };
  record(0);

  Optimizer opt(config.optimizer, config.learning_rate, config.scope, config.adam);
  TransformerParams grad = params.zeros_like();
  for (std::size_t step = 1; step <= config.epochs; ++step) {
    grad.for_each([](const ParamId&, Matrix& m) { m.fill(0.0); });
    const double loss = batch_loss(params, family, config.batch_size, train_rng, &grad);
    if (!std::isfinite(loss)) throw TrainingDiverged(step, "icl_pretrain: non-finite training loss");
    opt.step(params, grad);
    if (step % config.eval_every == 0) record(step);
  }
  return checkpoints;
}

double icl_accuracy(const TransformerParams& params, const TokenFamily& family, std::size_t n_prompts,
                    SeededRng& rng) {
  if (n_prompts == 0) throw std::invalid_argument("icl_accuracy: n_prompts must be positive");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n_prompts; ++i) {
    const TokenEpisode ep = sample_token_episode(family, rng);
    const ConfidenceDistribution d = forward_distribution(params, ep.sequence);
    correct += d.argmax() == ep.targets.back().label ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(n_prompts);
}

}  // namespace iclgd
