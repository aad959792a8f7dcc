#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "iclgd/distribution.hpp"
#include "iclgd/matrix.hpp"
#include "iclgd/rng.hpp"
#include "iclgd/tasks.hpp"

namespace iclgd {

enum class AttentionKind { linear, softmax };
enum class ModelVariant { continuous, discrete };

// Architecture of a toy model.
//
// Discrete variant: token + position embeddings, pre-norm residual blocks
// (RMS normalisation without gain), multi-head attention, optional ReLU
// feed-forward, final RMS norm and an unembedding with one row per token.
// Activations are row vectors, so a weight W maps h -> h W.
//
// Continuous variant: a stack of linear self-attention layers on token
// columns (x, y) of height d_x + d_y, no normalisation and no softmax. Each
// layer updates every column by proj * w_v * C * w_k^T * w_q * e_j where
// C = sum of e_i e_i^T over the demonstration columns.
struct ArchSpec {
  ModelVariant variant = ModelVariant::discrete;
  AttentionKind attention = AttentionKind::softmax;
  bool causal = true;
  std::size_t layers = 4;
  std::size_t width = 64;
  std::size_t heads = 2;
  std::size_t vocab_size = 32;
  std::size_t max_len = 32;
  std::size_t ffn_hidden = 0;  // 0 disables the feed-forward block
  std::size_t d_x = 0;
  std::size_t d_y = 0;
  double init_std = 0.02;

  static ArchSpec toy_discrete();
  static ArchSpec toy_continuous(std::size_t d_x, std::size_t d_y, std::size_t layers);

  void validate() const;
  bool operator==(const ArchSpec&) const = default;
};

struct LayerParams {
  Matrix w_q;
  Matrix w_k;
  Matrix w_v;
  Matrix proj;
  Matrix ffn_in;   // width x ffn_hidden, empty when absent
  Matrix ffn_out;  // ffn_hidden x width, empty when absent

  bool operator==(const LayerParams&) const = default;
};

enum class ParamKind { token_embedding, position_embedding, w_q, w_k, w_v, proj, ffn_in, ffn_out, unembedding };

struct ParamId {
  ParamKind kind;
  std::size_t layer = 0;  // 0-based; meaningless for embeddings

  bool is_attention_qkv() const {
    return kind == ParamKind::w_q || kind == ParamKind::w_k || kind == ParamKind::w_v;
  }
  std::string name() const;
};

struct TransformerParams {
  ArchSpec arch;
  std::vector<LayerParams> layers;
  Matrix token_embedding;     // vocab x width (discrete only)
  Matrix position_embedding;  // max_len x width (discrete only)
  Matrix unembedding;         // vocab x width (discrete only)

  bool is_discrete() const { return arch.variant == ModelVariant::discrete; }

  // Visits every present matrix in a fixed order.
  template <class F>
  void for_each(F&& f) {
    visit_impl(*this, f);
  }
  template <class F>
  void for_each(F&& f) const {
    visit_impl(*this, f);
  }

  TransformerParams zeros_like() const;
  std::size_t parameter_count() const;
  bool same_shape(const TransformerParams& other) const;
  bool operator==(const TransformerParams&) const = default;

 private:
  template <class Self, class F>
  static void visit_impl(Self& self, F& f) {
    auto visit = [&f](ParamKind k, std::size_t layer, auto& m) {
      if (!m.empty()) f(ParamId{k, layer}, m);
    };
    visit(ParamKind::token_embedding, 0, self.token_embedding);
    visit(ParamKind::position_embedding, 0, self.position_embedding);
    for (std::size_t l = 0; l < self.layers.size(); ++l) {
      auto& L = self.layers[l];
      visit(ParamKind::w_q, l, L.w_q);
      visit(ParamKind::w_k, l, L.w_k);
      visit(ParamKind::w_v, l, L.w_v);
      visit(ParamKind::proj, l, L.proj);
      visit(ParamKind::ffn_in, l, L.ffn_in);
      visit(ParamKind::ffn_out, l, L.ffn_out);
    }
    visit(ParamKind::unembedding, 0, self.unembedding);
  }
};

TransformerParams init_transformer(const ArchSpec& arch, SeededRng& rng);

// ---- discrete variant -----------------------------------------------------

// Logits for every position, sequence length x vocab.
Matrix forward_logits(const TransformerParams& params, std::span<const TokenId> seq);

// Next-token distribution at the final position.
ConfidenceDistribution forward_distribution(const TransformerParams& params, std::span<const TokenId> seq);

// -log p(label | prompt) at the final position of the prompt.
double label_loss(const TransformerParams& params, std::span<const TokenId> prompt, TokenId label);

// Cross-entropy supervision: the logits at `position` should predict `label`.
struct LabelTarget {
  std::size_t position = 0;
  TokenId label = 0;
};

// Mean cross-entropy over `targets`. Adds weight * d(mean)/d(theta) into
// `grad`, which must have the shape of `params`. Gradients flow only from
// the target positions.
double label_loss_and_grad(const TransformerParams& params, std::span<const TokenId> seq,
                           std::span<const LabelTarget> targets, double weight, TransformerParams& grad);

// ---- continuous variant ---------------------------------------------------

// Query prediction: the negated y-slot of the last column after the forward
// pass. The first n-1 columns are demonstrations and act as keys/values.
Matrix forward_regression(const TransformerParams& params, const Matrix& tokens);

// Squared error |prediction - target|^2; adds weight * gradient into `grad`.
double regression_loss_and_grad(const TransformerParams& params, const Matrix& tokens,
                                const Matrix& target, double weight, TransformerParams& grad);

}  // namespace iclgd
