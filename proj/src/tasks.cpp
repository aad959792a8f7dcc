#include "iclgd/tasks.hpp"

#include <algorithm>
#include <numeric>
#include <set>
#include <stdexcept>
#include <string>

namespace iclgd {

Matrix RegressionTask::apply(const Matrix& x) const { return matmul(w_star, x); }

TokenVocabulary TokenVocabulary::standard() {
  TokenVocabulary v;
  v.size = 32;
  v.delimiter = 0;
  for (TokenId t = 1; t <= 8; ++t) v.features.push_back(t);
  for (TokenId t = 9; t <= 12; ++t) v.labels.push_back(t);
  return v;
}

void TokenVocabulary::validate() const {
  if (features.empty() || labels.empty()) {
    throw std::invalid_argument("TokenVocabulary: feature and label alphabets must be non-empty");
  }
  std::set<TokenId> seen{delimiter};
  if (delimiter >= size) throw std::invalid_argument("TokenVocabulary: delimiter outside vocabulary");
  for (const auto* alphabet : {&features, &labels}) {
    for (TokenId t : *alphabet) {
      if (t >= size) {
        throw std::invalid_argument("TokenVocabulary: token " + std::to_string(t) +
                                    " outside vocabulary of size " + std::to_string(size));
      }
      if (!seen.insert(t).second) {
        throw std::invalid_argument("TokenVocabulary: token " + std::to_string(t) +
                                    " used twice across features/labels/delimiter");
      }
    }
  }
}

TokenId TokenTask::label_of(TokenId feature) const {
  auto it = std::find(vocab.features.begin(), vocab.features.end(), feature);
  if (it == vocab.features.end()) {
    throw std::invalid_argument("TokenTask: token " + std::to_string(feature) + " is not a feature");
  }
  return table[static_cast<std::size_t>(it - vocab.features.begin())];
}

void TokenTask::validate() const {
  vocab.validate();
  if (table.size() != vocab.features.size()) {
    throw std::invalid_argument("TokenTask: table must cover every feature");
  }
  for (TokenId y : table) {
    if (std::find(vocab.labels.begin(), vocab.labels.end(), y) == vocab.labels.end()) {
      throw std::invalid_argument("TokenTask: table value " + std::to_string(y) + " is not a label");
    }
  }
}

std::size_t DemonstrationSet::size() const {
  return std::visit([](const auto& v) { return v.size(); }, pairs);
}

const std::vector<RegressionPair>& DemonstrationSet::regression() const {
  if (!is_continuous()) throw std::invalid_argument("expected continuous demonstrations");
  return std::get<0>(pairs);
}

const std::vector<TokenPair>& DemonstrationSet::tokens() const {
  if (is_continuous()) throw std::invalid_argument("expected discrete demonstrations");
  return std::get<1>(pairs);
}

RegressionTask sample_regression_task(std::size_t d_x, std::size_t d_y, double weight_std,
                                      double input_std, SeededRng& rng) {
  if (d_x == 0 || d_y == 0) throw std::invalid_argument("sample_regression_task: dims must be >= 1");
  if (!(weight_std >= 0.0) || !(input_std > 0.0)) {
    throw std::invalid_argument("sample_regression_task: invalid standard deviation");
  }
  RegressionTask t;
  t.id = rng.next_u64();
  t.w_star = sample_gaussian(rng, d_y, d_x, 0.0, weight_std);
  t.input_std = input_std;
  return t;
}

TokenTask sample_token_task(const TokenVocabulary& vocab, SeededRng& rng) {
  vocab.validate();
  TokenTask t;
  t.vocab = vocab;
  t.id = rng.next_u64();
  t.table.reserve(vocab.features.size());
  for (std::size_t i = 0; i < vocab.features.size(); ++i) {
    t.table.push_back(vocab.labels[rng.uniform_index(vocab.labels.size())]);
  }
  return t;
}

DemonstrationSet sample_demonstrations(const RegressionTask& task, std::size_t n, SeededRng& rng) {
  std::vector<RegressionPair> pairs;
  pairs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Matrix x = sample_gaussian(rng, task.d_x(), 1, 0.0, task.input_std);
    Matrix y = task.apply(x);
    pairs.push_back({std::move(x), std::move(y)});
  }
  return DemonstrationSet{std::move(pairs), task.id};
}

DemonstrationSet sample_demonstrations(const TokenTask& task, std::size_t n, SeededRng& rng) {
  std::vector<TokenPair> pairs;
  pairs.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t f = rng.uniform_index(task.vocab.features.size());
    pairs.push_back({task.vocab.features[f], task.table[f]});
  }
  return DemonstrationSet{std::move(pairs), task.id};
}

std::vector<TokenId> demonstrated_features(const DemonstrationSet& demos) {
  std::set<TokenId> s;
  for (const auto& p : demos.tokens()) s.insert(p.x);
  return {s.begin(), s.end()};
}

Matrix embed_regression_tokens(const DemonstrationSet& demos, const Matrix& query_x,
                               std::size_t d_y_if_empty) {
  const auto& pairs = demos.regression();
  const std::size_t d_x = query_x.rows();
  if (query_x.cols() != 1 || d_x == 0) {
    throw std::invalid_argument("embed_regression_tokens: query must be a d_x x 1 column");
  }
  const std::size_t d_y = pairs.empty() ? d_y_if_empty : pairs.front().y.rows();
  Matrix tokens(d_x + d_y, pairs.size() + 1);
  for (std::size_t j = 0; j < pairs.size(); ++j) {
    if (pairs[j].x.rows() != d_x || pairs[j].y.rows() != d_y) {
      throw std::invalid_argument("embed_regression_tokens: demo " + std::to_string(j) +
                                  " has inconsistent dimensions");
    }
    tokens.set_block(0, j, pairs[j].x);
    tokens.set_block(d_x, j, pairs[j].y);
  }
  tokens.set_block(0, pairs.size(), query_x);
  return tokens;
}

std::vector<TokenId> build_prompt(const DemonstrationSet& demos, TokenId query,
                                  const Ordering& ordering, TokenId delimiter) {
  const auto& pairs = demos.tokens();
  if (ordering.size() != pairs.size() || !ordering.is_valid()) {
    throw std::invalid_argument("build_prompt: ordering of length " +
                                std::to_string(ordering.size()) + " does not permute " +
                                std::to_string(pairs.size()) + " demos");
  }
  std::vector<TokenId> seq;
  seq.reserve(3 * pairs.size() + 1);
  for (std::size_t i : ordering.perm) {
    seq.push_back(pairs[i].x);
    seq.push_back(pairs[i].y);
    seq.push_back(delimiter);
  }
  seq.push_back(query);
  return seq;
}

DemonstrationSet apply_ordering(const DemonstrationSet& demos, const Ordering& ordering) {
  if (ordering.size() != demos.size() || !ordering.is_valid()) {
    throw std::invalid_argument("apply_ordering: ordering does not permute the demo set");
  }
  return std::visit(
      [&](const auto& pairs) {
        std::decay_t<decltype(pairs)> out;
        out.reserve(pairs.size());
        for (std::size_t i : ordering.perm) out.push_back(pairs[i]);
        return DemonstrationSet{std::move(out), demos.task_id};
      },
      demos.pairs);
}

std::vector<std::size_t> canonical_order(const DemonstrationSet& demos) {
  std::vector<std::size_t> idx(demos.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (demos.is_continuous()) {
    const auto& p = demos.regression();
    auto key_less = [&](std::size_t a, std::size_t b) {
      auto xa = p[a].x.values(), xb = p[b].x.values();
      if (!std::equal(xa.begin(), xa.end(), xb.begin(), xb.end())) {
        return std::lexicographical_compare(xa.begin(), xa.end(), xb.begin(), xb.end());
      }
      auto ya = p[a].y.values(), yb = p[b].y.values();
      return std::lexicographical_compare(ya.begin(), ya.end(), yb.begin(), yb.end());
    };
    std::stable_sort(idx.begin(), idx.end(), key_less);
  } else {
    const auto& p = demos.tokens();
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return p[a] < p[b]; });
  }
  return idx;
}

}  // namespace iclgd
