#include "iclgd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace iclgd {

double accuracy(std::span<const ConfidenceDistribution> predictions, std::span<const TokenId> targets) {
  if (predictions.empty()) throw std::invalid_argument("accuracy: empty input");
  if (predictions.size() != targets.size()) throw std::invalid_argument("accuracy: length mismatch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    hits += predictions[i].argmax() == targets[i] ? 1 : 0;
  }
  return static_cast<double>(hits) / static_cast<double>(predictions.size());
}

std::vector<std::size_t> top_k(const ConfidenceDistribution& p, std::size_t k) {
  if (k == 0) throw std::invalid_argument("top_k: k must be >= 1");
  if (k > p.size()) {
    throw std::invalid_argument("top_k: k=" + std::to_string(k) + " exceeds vocabulary size " +
                                std::to_string(p.size()));
  }
  std::vector<std::size_t> idx(p.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return p[a] > p[b] || (p[a] == p[b] && a < b); });
  idx.resize(k);
  return idx;
}

namespace {

std::vector<std::size_t> shared_top_k(const ConfidenceDistribution& p1, const ConfidenceDistribution& p2,
                                      std::size_t k) {
  if (p1.size() != p2.size()) throw std::invalid_argument("overlap: vocabulary sizes differ");
  auto a = top_k(p1, k);
  auto b = top_k(p2, k);
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<std::size_t> out;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(out));
  return out;
}

}  // namespace

double token_overlap(const ConfidenceDistribution& p1, const ConfidenceDistribution& p2, std::size_t k) {
  return static_cast<double>(shared_top_k(p1, p2, k).size()) / static_cast<double>(k);
}

double ocs(const ConfidenceDistribution& p1, const ConfidenceDistribution& p2, std::size_t k) {
  const auto shared = shared_top_k(p1, p2, k);
  if (shared.empty()) return 0.0;
  double dot = 0.0, n1 = 0.0, n2 = 0.0;
  for (std::size_t t : shared) {
    dot += p1[t] * p2[t];
    n1 += p1[t] * p1[t];
    n2 += p2[t] * p2[t];
  }
  const double rest = static_cast<double>(std::max<std::size_t>(k - shared.size(), 1));
  if (n1 == 0.0 || n2 == 0.0) return 0.0;
  return dot / std::sqrt(n1 * n2 * rest);
}

double order_sensitivity(std::span<const ConfidenceDistribution> dists, const SenOptions& opts) {
  if (dists.size() < 2) throw std::invalid_argument("order_sensitivity: need at least 2 distributions");
  const std::size_t v = dists.front().size();
  for (const auto& d : dists) {
    if (d.size() != v) throw std::invalid_argument("order_sensitivity: vocabulary sizes differ");
  }
  const double n = static_cast<double>(dists.size());
  const double denom = opts.population ? n : n - 1.0;
  double total = 0.0;
  for (std::size_t t = 0; t < v; ++t) {
    // Identical values have zero spread exactly; the rounded mean need not
    // reproduce them bit for bit.
    const bool constant = std::all_of(dists.begin(), dists.end(),
                                      [&](const ConfidenceDistribution& d) { return d[t] == dists.front()[t]; });
    if (constant) continue;
    double mean = 0.0;
    for (const auto& d : dists) mean += d[t];
    mean /= n;
    double ss = 0.0;
    for (const auto& d : dists) ss += (d[t] - mean) * (d[t] - mean);
    const double var = ss / denom;
    total += opts.spread == SenOptions::Spread::variance ? var : std::sqrt(var);
  }
  return opts.aggregate == SenOptions::Aggregate::mean ? total / static_cast<double>(v) : total;
}

double parameter_gap(const TransformerParams& a, const TransformerParams& b, const ParamFilter& filter) {
  if (!a.same_shape(b)) throw std::invalid_argument("parameter_gap: architectures differ");
  std::vector<const Matrix*> bm;
  b.for_each([&](const ParamId&, const Matrix& m) { bm.push_back(&m); });
  double total = 0.0;
  std::size_t count = 0;
  std::size_t idx = 0;
  a.for_each([&](const ParamId& id, const Matrix& m) {
    const Matrix& other = *bm[idx++];
    const bool selected = filter ? filter(id) : id.is_attention_qkv();
    if (!selected) return;
    auto x = m.values();
    auto y = other.values();
    for (std::size_t i = 0; i < x.size(); ++i) total += std::abs(x[i] - y[i]);
    count += x.size();
  });
  if (count == 0) return 0.0;
  return total / static_cast<double>(count);
}

MeanStd mean_std(std::span<const double> values) {
  if (values.empty()) throw std::invalid_argument("mean_std: no values");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return {mean, std::sqrt(ss / static_cast<double>(values.size()))};
}

}  // namespace iclgd
