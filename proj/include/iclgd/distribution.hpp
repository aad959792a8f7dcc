#pragma once

#include <cstddef>
#include <vector>

namespace iclgd {

// Next-token probabilities over the whole vocabulary.
struct ConfidenceDistribution {
  std::vector<double> probs;

  std::size_t size() const { return probs.size(); }
  double operator[](std::size_t t) const { return probs[t]; }

  // Non-negative entries summing to 1 within `tol`; throws otherwise.
  void validate(double tol = 1e-9) const;

  // Highest-probability token, ties to the smallest id.
  std::size_t argmax() const;
};

}  // namespace iclgd
