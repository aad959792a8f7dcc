#include <cmath>
#include <stdexcept>

#include "doctest.h"
#include "iclgd/construction.hpp"

using namespace iclgd;

namespace {

struct Instance {
  Matrix w0;
  DemonstrationSet demos;
  Matrix query;
};

Instance random_instance(std::uint64_t seed, std::size_t d_x, std::size_t d_y, std::size_t n) {
  SeededRng rng(seed);
  const RegressionTask task = sample_regression_task(d_x, d_y, 1.0, 1.0, rng);
  Instance in;
  in.w0 = sample_gaussian(rng, d_y, d_x, 0.0, 1.0);
  in.demos = sample_demonstrations(task, n, rng);
  in.query = sample_gaussian(rng, d_x, 1, 0.0, 1.0);
  return in;
}

// Independent route for the query update: explicit sum over the demo tokens
// of P (W_V e_i)(W_K e_i)^T (W_Q e_q), with no canonical reordering.
Matrix naive_query_update(const LsaParams& p, const Matrix& tokens) {
  const std::size_t q = tokens.cols() - 1;
  const Matrix eq = tokens.col(q);
  Matrix acc(tokens.rows(), 1);
  for (std::size_t i = 0; i < q; ++i) {
    const Matrix ei = tokens.col(i);
    const double score = matmul(transpose(matmul(p.w_k, ei)), matmul(p.w_q, eq))(0, 0);
    acc = add(acc, scale(matmul(p.w_v, ei), score));
  }
  return matmul(p.p, acc);
}

}  // namespace

TEST_CASE("build_construction instantiated for d_x = d_y = 1") {
  const LsaParams p = build_construction(Matrix{{0.5}}, 0.2, 2);
  CHECK(p.w_k == Matrix{{1, 0}, {0, 0}});
  CHECK(p.w_q == Matrix{{1, 0}, {0, 0}});
  CHECK(p.w_v == Matrix{{0, 0}, {0.5, -1}});
  CHECK(p.p == Matrix{{0.1, 0}, {0, 0.1}});
}

TEST_CASE("build_construction edge cases") {
  CHECK(build_construction(Matrix{{1.0, 2.0}}, 0.0, 3).p == Matrix(3, 3));
  CHECK_THROWS_AS(build_construction(Matrix{{1.0}}, 0.1, 0), std::domain_error);
  try {
    build_construction(Matrix{{1.0}}, 0.1, 0);
  } catch (const std::domain_error& e) {
    CHECK(std::string(e.what()).find("diverge") != std::string::npos);
  }
}

TEST_CASE("gd_step") {
  SUBCASE("zero residual gives zero update") {
    const Matrix w{{1.5, -2.0}};
    std::vector<RegressionPair> pairs;
    for (double a : {0.3, -1.0, 2.0}) {
      const Matrix x{{a}, {1.0 - a}};
      pairs.push_back({x, matmul(w, x)});
    }
    CHECK(gd_step(LinearModel{w, 0.7}, DemonstrationSet{pairs, 0}) == Matrix(1, 2));
  }
  SUBCASE("hand gradient: -(1/1)(0*2 - 3)*2 = 6") {
    DemonstrationSet d{std::vector<RegressionPair>{{Matrix{{2}}, Matrix{{3}}}}, 0};
    CHECK(gd_step(LinearModel{Matrix{{0}}, 1.0}, d) == Matrix{{6}});
  }
  SUBCASE("permutation leaves the step bit-identical") {
    const Instance in = random_instance(5, 4, 2, 17);
    SeededRng rng(1);
    for (const auto& o : random_orderings(17, 10, rng)) {
      CHECK(gd_step(LinearModel{in.w0, 0.3}, apply_ordering(in.demos, o)) ==
            gd_step(LinearModel{in.w0, 0.3}, in.demos));
    }
  }
  SUBCASE("empty demos rejected") {
    CHECK_THROWS_AS(gd_step(LinearModel{Matrix{{0}}, 1.0}, DemonstrationSet{std::vector<RegressionPair>{}, 0}),
                    std::invalid_argument);
  }
}

TEST_CASE("lsa_forward") {
  const Instance in = random_instance(8, 3, 2, 6);
  const Matrix tokens = embed_regression_tokens(in.demos, in.query);
  std::vector<bool> mask(tokens.cols(), true);
  mask.back() = false;

  SUBCASE("zero projection is the identity map") {
    LsaParams p = build_construction(in.w0, 0.5, 6);
    p.p = Matrix(5, 5);
    CHECK(lsa_forward(p, tokens, mask) == tokens);
  }
  SUBCASE("query update equals (0, -dW x_q) and the naive sum") {
    const LsaParams p = build_construction(in.w0, 0.5, 6);
    const Matrix out = lsa_forward(p, tokens, mask);
    const Matrix dw = gd_step(LinearModel{in.w0, 0.5}, in.demos);
    const Matrix expected_y = scale(matmul(dw, in.query), -1.0);
    for (std::size_t r = 0; r < 3; ++r) CHECK(std::abs(out(r, 6) - tokens(r, 6)) <= 1e-10);
    for (std::size_t r = 0; r < 2; ++r) CHECK(std::abs(out(3 + r, 6) - expected_y(r, 0)) <= 1e-10);

    const Matrix naive = naive_query_update(p, tokens);
    for (std::size_t r = 0; r < 5; ++r) CHECK(std::abs(out(r, 6) - tokens(r, 6) - naive(r, 0)) <= 1e-12);
  }
  SUBCASE("permuting demo tokens leaves the query update bit-identical") {
    const LsaParams p = build_construction(in.w0, 0.5, 6);
    const Matrix base = lsa_forward(p, tokens, mask).col(6);
    SeededRng rng(2);
    for (const auto& o : random_orderings(6, 10, rng)) {
      const Matrix t2 = embed_regression_tokens(apply_ordering(in.demos, o), in.query);
      CHECK(lsa_forward(p, t2, mask).col(6) == base);
    }
  }
  SUBCASE("empty mask rejected") {
    const LsaParams p = build_construction(in.w0, 0.5, 6);
    CHECK_THROWS_AS(lsa_forward(p, tokens, std::vector<bool>(tokens.cols(), false)), std::invalid_argument);
  }
}

TEST_CASE("verify_equivalence over seeded instances") {
  std::size_t count = 0;
  for (std::size_t d_x : {1, 3, 8}) {
    for (std::size_t d_y : {1, 4}) {
      for (std::size_t n : {1, 5, 32}) {
        for (double eta : {0.01, 0.1, 1.0}) {
          const Instance in = random_instance(1000 + count, d_x, d_y, n);
          const EquivalenceReport r = verify_equivalence(in.w0, in.demos, in.query, eta);
          CHECK(r.pass);
          CHECK(r.max_abs_diff <= 1e-10);
          ++count;
        }
      }
    }
  }
}

TEST_CASE("verify_equivalence at eta = 0 is exact") {
  const Instance in = random_instance(3, 2, 1, 4);
  CHECK(verify_equivalence(in.w0, in.demos, in.query, 0.0).max_abs_diff == 0.0);
}

TEST_CASE("perturbing w_v breaks equivalence, linearly in the perturbation") {
  const Instance in = random_instance(13, 2, 1, 8);
  LsaParams p = build_construction(in.w0, 1.0, 8);
  const double base = verify_equivalence(p, in.w0, in.demos, in.query, 1.0).max_abs_diff;
  p.w_v(2, 0) += 1e-3;
  const EquivalenceReport r1 = verify_equivalence(p, in.w0, in.demos, in.query, 1.0);
  CHECK_FALSE(r1.pass);
  p.w_v(2, 0) += 1e-3;
  const EquivalenceReport r2 = verify_equivalence(p, in.w0, in.demos, in.query, 1.0);
  CHECK(base <= 1e-10);
  CHECK(r2.max_abs_diff / r1.max_abs_diff == doctest::Approx(2.0).epsilon(1e-6));
}

TEST_CASE("query update is linear in eta") {
  const Instance in = random_instance(21, 3, 2, 9);
  const Matrix tokens = embed_regression_tokens(in.demos, in.query);
  std::vector<bool> mask(tokens.cols(), true);
  mask.back() = false;
  const Matrix u1 = subtract(lsa_forward(build_construction(in.w0, 0.25, 9), tokens, mask), tokens);
  const Matrix u2 = subtract(lsa_forward(build_construction(in.w0, 0.5, 9), tokens, mask), tokens);
  CHECK(max_abs_diff(scale(u1, 2.0), u2) <= 1e-12);
}

TEST_CASE("sparsity_ratio") {
  CHECK(sparsity_ratio(Matrix(3, 3), 1e-6) == 1.0);
  CHECK(sparsity_ratio(Matrix{{0.5, 0.001}, {2.0, -0.02}}, 0.01) == 0.25);
  CHECK_THROWS_AS(sparsity_ratio(Matrix(2, 2), 0.0), std::invalid_argument);

  // Monotone in delta.
  SeededRng rng(4);
  const Matrix m = sample_gaussian(rng, 20, 20, 0.0, 0.1);
  double prev = 0.0;
  for (double delta : {1e-4, 1e-3, 1e-2, 1e-1, 1.0}) {
    const double sr = sparsity_ratio(m, delta);
    CHECK(sr >= prev);
    prev = sr;
  }
}

TEST_CASE("analytic sparsity") {
  const AnalyticSparsity one = analytic_sparsity(1, 1);
  CHECK(one.sr_kq == 0.75);
  CHECK(one.sr_v == 0.5);

  const AnalyticSparsity big = analytic_sparsity(4096, 4096);
  CHECK(big.sr_kq > 0.9999);
  CHECK(big.sr_kq == doctest::Approx(0.999939).epsilon(1e-6));
  const double d = 4096.0;
  // (2d)^2 total, d^2 + d nonzero: (3d^2 - d) / (4d^2).
  CHECK(big.sr_v == doctest::Approx((3 * d * d - d) / (4 * d * d)).epsilon(1e-14));
  CHECK(std::abs(big.sr_v - 0.75) < 0.01);

  // Materialized construction matches for delta below the smallest nonzero magnitude.
  for (auto [dx, dy] : {std::pair<std::size_t, std::size_t>{1, 1}, {3, 2}, {8, 8}, {5, 1}}) {
    SeededRng rng(dx * 10 + dy);
    Matrix w0 = sample_gaussian(rng, dy, dx, 0.0, 1.0);
    for (double& v : w0.values()) v = v >= 0 ? v + 0.5 : v - 0.5;
    const LsaParams p = build_construction(w0, 0.3, 4);
    const AnalyticSparsity a = analytic_sparsity(dx, dy);
    CHECK(sparsity_ratio(p.w_k, 1e-3) == a.sr_kq);
    CHECK(sparsity_ratio(p.w_q, 1e-3) == a.sr_kq);
    CHECK(sparsity_ratio(p.w_v, 1e-3) == a.sr_v);
    const AnalyticSparsity s = structural_sparsity(dx, dy, 1e-3);
    CHECK(s.sr_kq == a.sr_kq);
    CHECK(s.sr_v == a.sr_v);
  }
}
