#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "iclgd/distribution.hpp"
#include "iclgd/tasks.hpp"
#include "iclgd/transformer.hpp"

namespace iclgd {

// Fraction of positions whose whole-vocabulary argmax (ties to the smallest
// id) equals the target.
double accuracy(std::span<const ConfidenceDistribution> predictions, std::span<const TokenId> targets);

// The k most probable tokens; probability ties go to the smallest id.
std::vector<std::size_t> top_k(const ConfidenceDistribution& p, std::size_t k);

// |T1_k intersect T2_k| / k.
double token_overlap(const ConfidenceDistribution& p1, const ConfidenceDistribution& p2, std::size_t k);

// Overlap cosine similarity on the shared top-k tokens O:
//   sum_O p1 p2 / sqrt(sum_O p1^2 * sum_O p2^2 * max(k - |O|, 1)),
// and 0 when O is empty.
double ocs(const ConfidenceDistribution& p1, const ConfidenceDistribution& p2, std::size_t k);

struct SenOptions {
  enum class Spread { std_dev, variance };
  enum class Aggregate { sum, mean };
  Spread spread = Spread::std_dev;
  Aggregate aggregate = Aggregate::sum;
  bool population = true;  // divide by n rather than n - 1
};

// Order sensitivity: per-token spread of the probabilities across the
// distributions, aggregated over the vocabulary.
double order_sensitivity(std::span<const ConfidenceDistribution> dists, const SenOptions& opts = {});

// Mean |a_ij - b_ij| over the entries of the selected matrices. The default
// selection is w_k, w_q and w_v of every layer.
using ParamFilter = std::function<bool(const ParamId&)>;
double parameter_gap(const TransformerParams& a, const TransformerParams& b, const ParamFilter& filter = {});

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // population
};
MeanStd mean_std(std::span<const double> values);

}  // namespace iclgd
