#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "iclgd/matrix.hpp"
#include "iclgd/rng.hpp"

namespace iclgd {

using TokenId = std::uint32_t;

// y = w_star * x with x ~ N(0, input_std^2 I).
struct RegressionTask {
  Matrix w_star;  // d_y x d_x
  double input_std = 1.0;
  std::uint64_t id = 0;

  std::size_t d_x() const { return w_star.cols(); }
  std::size_t d_y() const { return w_star.rows(); }
  Matrix apply(const Matrix& x) const;
};

// Layout of the discrete vocabulary shared by every lookup-table task.
struct TokenVocabulary {
  std::size_t size = 32;
  TokenId delimiter = 0;
  std::vector<TokenId> features;
  std::vector<TokenId> labels;

  // 8 features {1..8}, 4 labels {9..12}, delimiter 0, the rest unused.
  static TokenVocabulary standard();
  void validate() const;
};

// Total map feature -> label. table[i] is the label of vocab.features[i].
struct TokenTask {
  TokenVocabulary vocab;
  std::vector<TokenId> table;
  std::uint64_t id = 0;

  TokenId label_of(TokenId feature) const;
  void validate() const;
};

struct RegressionPair {
  Matrix x;  // d_x x 1
  Matrix y;  // d_y x 1
  bool operator==(const RegressionPair&) const = default;
};

struct TokenPair {
  TokenId x = 0;
  TokenId y = 0;
  bool operator==(const TokenPair&) const = default;
  auto operator<=>(const TokenPair&) const = default;
};

struct DemonstrationSet {
  std::variant<std::vector<RegressionPair>, std::vector<TokenPair>> pairs;
  std::uint64_t task_id = 0;

  std::size_t size() const;
  bool empty() const { return size() == 0; }
  bool is_continuous() const { return pairs.index() == 0; }

  // Throw std::invalid_argument when the modality does not match.
  const std::vector<RegressionPair>& regression() const;
  const std::vector<TokenPair>& tokens() const;

  bool operator==(const DemonstrationSet&) const = default;
};

RegressionTask sample_regression_task(std::size_t d_x, std::size_t d_y, double weight_std,
                                      double input_std, SeededRng& rng);
TokenTask sample_token_task(const TokenVocabulary& vocab, SeededRng& rng);

DemonstrationSet sample_demonstrations(const RegressionTask& task, std::size_t n, SeededRng& rng);
// Features drawn uniformly with replacement.
DemonstrationSet sample_demonstrations(const TokenTask& task, std::size_t n, SeededRng& rng);

// Distinct features present in `demos`, ascending. These are the queries a
// lookup-table task can answer from context.
std::vector<TokenId> demonstrated_features(const DemonstrationSet& demos);

// Columns are tokens of height d_x + d_y: (x_j, y_j) for each demo, then
// (query_x, 0) last. d_y is taken from the demos; `d_y_if_empty` applies
// only to an empty set.
Matrix embed_regression_tokens(const DemonstrationSet& demos, const Matrix& query_x,
                               std::size_t d_y_if_empty = 1);

// x_{s(1)} y_{s(1)} d ... x_{s(N)} y_{s(N)} d query
std::vector<TokenId> build_prompt(const DemonstrationSet& demos, TokenId query,
                                  const Ordering& ordering, TokenId delimiter);

DemonstrationSet apply_ordering(const DemonstrationSet& demos, const Ordering& ordering);

// Index order that sorts pairs by content. Summing per-demo terms in this
// order makes the result independent of presentation order.
std::vector<std::size_t> canonical_order(const DemonstrationSet& demos);

}  // namespace iclgd
