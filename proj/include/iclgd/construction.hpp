#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "iclgd/matrix.hpp"
#include "iclgd/tasks.hpp"

namespace iclgd {

// Weights of one linear self-attention layer acting on tokens (x, y) of
// height d_x + d_y. Every token is updated as e_j += p * V * K^T * q_j,
// with keys and values taken from the tokens selected by the attend mask.
struct LsaParams {
  std::size_t d_x = 0;
  std::size_t d_y = 0;
  Matrix w_k;
  Matrix w_q;
  Matrix w_v;
  Matrix p;
};

// Reference linear model y = w x trained by one gradient step of size eta.
struct LinearModel {
  Matrix w;  // d_y x d_x
  double eta = 0.0;
};

// Hand-constructed weights whose forward pass performs one gradient step on
// the linear model w0 with learning rate eta over n_demos in-context pairs:
//   w_k = w_q = [[I_x, 0], [0, 0]],  w_v = [[0, 0], [w0, -I_y]],  p = eta/n I.
// n_demos == 0 is rejected: the projection eta/n diverges.
LsaParams build_construction(const Matrix& w0, double eta, std::size_t n_demos);

// Delta W = -(eta/N) sum_i (W x_i - y_i) x_i^T, summed in canonical order.
Matrix gd_step(const LinearModel& model, const DemonstrationSet& demos);

// One linear self-attention pass (no softmax) over token columns. Tokens with
// attend_mask[j] == true act as keys/values; all tokens are updated.
// Context terms are accumulated in content order so the result does not
// depend on how the context tokens are permuted.
Matrix lsa_forward(const LsaParams& params, const Matrix& tokens, const std::vector<bool>& attend_mask);

struct EquivalenceReport {
  std::size_t d_x = 0;
  std::size_t d_y = 0;
  std::size_t n = 0;
  double eta = 0.0;
  double max_abs_diff = 0.0;
  bool pass = false;
};

inline constexpr double kEquivalenceTolerance = 1e-10;

// Runs the constructed layer on (demos, query) with the query masked out of
// the keys/values, and compares the query token's update with (0, -dW x_q).
EquivalenceReport verify_equivalence(const Matrix& w0, const DemonstrationSet& demos,
                                     const Matrix& query_x, double eta);

// Same comparison against explicit (possibly perturbed) layer weights.
EquivalenceReport verify_equivalence(const LsaParams& params, const Matrix& w0,
                                     const DemonstrationSet& demos, const Matrix& query_x, double eta);

// Fraction of entries with |entry| < delta.
double sparsity_ratio(const Matrix& m, double delta);

struct AnalyticSparsity {
  double sr_kq = 0.0;
  double sr_v = 0.0;
};

// Sparsity of the constructed matrices assuming a fully dense w0.
AnalyticSparsity analytic_sparsity(std::size_t d_x, std::size_t d_y);

// Sparsity of the constructed matrices at threshold delta, counted from the
// block structure without materializing them. w0 entries are assumed to
// have magnitude >= delta.
AnalyticSparsity structural_sparsity(std::size_t d_x, std::size_t d_y, double delta);

}  // namespace iclgd
