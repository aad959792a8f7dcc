#include "iclgd/construction.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace iclgd {

LsaParams build_construction(const Matrix& w0, double eta, std::size_t n_demos) {
  if (n_demos == 0) {
    throw std::domain_error(
        "build_construction: N = 0 demonstrations makes the projection P = (eta/N) I diverge");
  }
  if (!std::isfinite(eta)) throw std::invalid_argument("build_construction: eta must be finite");
  if (w0.empty()) throw std::invalid_argument("build_construction: w0 must be non-empty");
  require_finite(w0, "build_construction");

  const std::size_t d_x = w0.cols();
  const std::size_t d_y = w0.rows();
  const std::size_t d = d_x + d_y;

  LsaParams out;
  out.d_x = d_x;
  out.d_y = d_y;
  out.w_k = Matrix(d, d);
  out.w_k.set_block(0, 0, Matrix::identity(d_x));
  out.w_q = out.w_k;
  out.w_v = Matrix(d, d);
  out.w_v.set_block(d_x, 0, w0);
  out.w_v.set_block(d_x, d_x, scale(Matrix::identity(d_y), -1.0));
  out.p = scale(Matrix::identity(d), eta / static_cast<double>(n_demos));
  return out;
}

Matrix gd_step(const LinearModel& model, const DemonstrationSet& demos) {
  const auto& pairs = demos.regression();
  if (pairs.empty()) throw std::invalid_argument("gd_step: demonstration set is empty");
  const std::size_t d_x = model.w.cols();
  const std::size_t d_y = model.w.rows();

  Matrix grad(d_y, d_x);
  for (std::size_t i : canonical_order(demos)) {
    const auto& p = pairs[i];
    if (p.x.rows() != d_x || p.y.rows() != d_y) {
      throw std::invalid_argument("gd_step: demo dimensions do not match model " +
                                  model.w.shape_string());
    }
    const Matrix residual = subtract(matmul(model.w, p.x), p.y);
    for (std::size_t r = 0; r < d_y; ++r) {
      for (std::size_t c = 0; c < d_x; ++c) grad(r, c) += residual(r, 0) * p.x(c, 0);
    }
  }
  return scale(grad, -model.eta / static_cast<double>(pairs.size()));
}

Matrix lsa_forward(const LsaParams& params, const Matrix& tokens, const std::vector<bool>& attend_mask) {
  const std::size_t d = params.d_x + params.d_y;
  if (tokens.rows() != d) {
    throw std::invalid_argument("lsa_forward: token height " + std::to_string(tokens.rows()) +
                                " does not match d_x + d_y = " + std::to_string(d));
  }
  if (attend_mask.size() != tokens.cols()) {
    throw std::invalid_argument("lsa_forward: mask length does not match token count");
  }

  std::vector<std::size_t> context;
  for (std::size_t j = 0; j < tokens.cols(); ++j) {
    if (attend_mask[j]) context.push_back(j);
  }
  if (context.empty()) throw std::invalid_argument("lsa_forward: mask excludes every token");

  const Matrix keys = matmul(params.w_k, tokens);
  const Matrix values = matmul(params.w_v, tokens);
  const Matrix queries = matmul(params.w_q, tokens);

  // Content order of the context tokens.
  std::stable_sort(context.begin(), context.end(), [&](std::size_t a, std::size_t b) {
    for (std::size_t r = 0; r < d; ++r) {
      if (tokens(r, a) != tokens(r, b)) return tokens(r, a) < tokens(r, b);
    }
    return false;
  });

  Matrix out = tokens;
  Matrix attended(d, 1);
  for (std::size_t j = 0; j < tokens.cols(); ++j) {
    attended.fill(0.0);
    for (std::size_t i : context) {
      double score = 0.0;
      for (std::size_t r = 0; r < d; ++r) score += keys(r, i) * queries(r, j);
      for (std::size_t r = 0; r < d; ++r) attended(r, 0) += values(r, i) * score;
    }
    const Matrix update = matmul(params.p, attended);
    for (std::size_t r = 0; r < d; ++r) out(r, j) += update(r, 0);
  }
  require_finite(out, "lsa_forward");
  return out;
}

EquivalenceReport verify_equivalence(const LsaParams& params, const Matrix& w0,
                                     const DemonstrationSet& demos, const Matrix& query_x, double eta) {
  const auto& pairs = demos.regression();
  if (pairs.empty()) throw std::invalid_argument("verify_equivalence: demonstration set is empty");

  const Matrix tokens = embed_regression_tokens(demos, query_x);
  std::vector<bool> mask(tokens.cols(), true);
  mask.back() = false;
  const Matrix out = lsa_forward(params, tokens, mask);

  const std::size_t q = tokens.cols() - 1;
  const Matrix delta_w = gd_step(LinearModel{w0, eta}, demos);
  const Matrix expected_y = scale(matmul(delta_w, query_x), -1.0);

  EquivalenceReport rep;
  rep.d_x = params.d_x;
  rep.d_y = params.d_y;
  rep.n = pairs.size();
  rep.eta = eta;
  for (std::size_t r = 0; r < params.d_x; ++r) {
    rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(out(r, q) - tokens(r, q)));
  }
  for (std::size_t r = 0; r < params.d_y; ++r) {
    const double update = out(params.d_x + r, q) - tokens(params.d_x + r, q);
    rep.max_abs_diff = std::max(rep.max_abs_diff, std::abs(update - expected_y(r, 0)));
  }
  rep.pass = rep.max_abs_diff <= kEquivalenceTolerance;
  return rep;
}

EquivalenceReport verify_equivalence(const Matrix& w0, const DemonstrationSet& demos,
                                     const Matrix& query_x, double eta) {
  return verify_equivalence(build_construction(w0, eta, demos.size()), w0, demos, query_x, eta);
}

double sparsity_ratio(const Matrix& m, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("sparsity_ratio: delta must be positive");
  if (m.empty()) throw std::invalid_argument("sparsity_ratio: empty matrix");
  std::size_t below = 0;
  for (double v : m.values()) below += std::abs(v) < delta ? 1 : 0;
  return static_cast<double>(below) / static_cast<double>(m.size());
}

AnalyticSparsity analytic_sparsity(std::size_t d_x, std::size_t d_y) {
  if (d_x == 0 || d_y == 0) throw std::invalid_argument("analytic_sparsity: dims must be >= 1");
  const double total = static_cast<double>(d_x + d_y) * static_cast<double>(d_x + d_y);
  const double dx = static_cast<double>(d_x);
  const double dy = static_cast<double>(d_y);
  return {(total - dx) / total, (total - dx * dy - dy) / total};
}

AnalyticSparsity structural_sparsity(std::size_t d_x, std::size_t d_y, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("structural_sparsity: delta must be positive");
  if (d_x == 0 || d_y == 0) throw std::invalid_argument("structural_sparsity: dims must be >= 1");
  const double total = static_cast<double>(d_x + d_y) * static_cast<double>(d_x + d_y);
  const double dx = static_cast<double>(d_x);
  const double dy = static_cast<double>(d_y);
  // Unit entries (I_x in w_k, -I_y in w_v) fall below delta only when delta > 1.
  const double unit_below = delta > 1.0 ? 1.0 : 0.0;
  const double kq_zero = total - dx + unit_below * dx;
  const double v_zero = total - dx * dy - dy + unit_below * dy;
  return {kq_zero / total, v_zero / total};
}

}  // namespace iclgd
