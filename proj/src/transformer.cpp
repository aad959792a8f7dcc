#include "iclgd/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace iclgd {

void ConfidenceDistribution::validate(double tol) const {
  if (probs.empty()) throw std::invalid_argument("ConfidenceDistribution: empty");
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) {
      throw std::invalid_argument("ConfidenceDistribution: negative or non-finite entry");
    }
    total += p;
  }
  if (std::abs(total - 1.0) > tol) {
    throw std::invalid_argument("ConfidenceDistribution: entries sum to " + std::to_string(total));
  }
}

std::size_t ConfidenceDistribution::argmax() const {
  if (probs.empty()) throw std::invalid_argument("ConfidenceDistribution::argmax: empty");
  std::size_t best = 0;
  for (std::size_t t = 1; t < probs.size(); ++t) {
    if (probs[t] > probs[best]) best = t;
  }
  return best;
}

// ---------------------------------------------------------------------------

ArchSpec ArchSpec::toy_discrete() { return ArchSpec{}; }

ArchSpec ArchSpec::toy_continuous(std::size_t d_x, std::size_t d_y, std::size_t layers) {
  ArchSpec a;
  a.variant = ModelVariant::continuous;
  a.attention = AttentionKind::linear;
  a.causal = false;
  a.layers = layers;
  a.width = d_x + d_y;
  a.heads = 1;
  a.vocab_size = 0;
  a.max_len = 0;
  a.ffn_hidden = 0;
  a.d_x = d_x;
  a.d_y = d_y;
  return a;
}

void ArchSpec::validate() const {
  if (layers == 0) throw std::invalid_argument("ArchSpec: at least one layer required");
  if (variant == ModelVariant::continuous) {
    if (d_x == 0 || d_y == 0 || width != d_x + d_y) {
      throw std::invalid_argument("ArchSpec: continuous variant needs width == d_x + d_y >= 2");
    }
    if (attention != AttentionKind::linear || heads != 1 || ffn_hidden != 0) {
      throw std::invalid_argument("ArchSpec: continuous variant is single-head linear attention only");
    }
    return;
  }
  if (width == 0 || heads == 0 || width % heads != 0) {
    throw std::invalid_argument("ArchSpec: width must be a positive multiple of heads");
  }
  if (vocab_size == 0 || max_len == 0) throw std::invalid_argument("ArchSpec: empty vocabulary/context");
}

std::string ParamId::name() const {
  const std::string prefix = "layer" + std::to_string(layer) + ".";
  switch (kind) {
    case ParamKind::token_embedding: return "token_embedding";
    case ParamKind::position_embedding: return "position_embedding";
    case ParamKind::unembedding: return "unembedding";
    case ParamKind::w_q: return prefix + "w_q";
    case ParamKind::w_k: return prefix + "w_k";
    case ParamKind::w_v: return prefix + "w_v";
    case ParamKind::proj: return prefix + "proj";
    case ParamKind::ffn_in: return prefix + "ffn_in";
    case ParamKind::ffn_out: return prefix + "ffn_out";
  }
  return "?";
}

TransformerParams TransformerParams::zeros_like() const {
  TransformerParams z = *this;
  z.for_each([](const ParamId&, Matrix& m) { m.fill(0.0); });
  return z;
}

std::size_t TransformerParams::parameter_count() const {
  std::size_t n = 0;
  for_each([&](const ParamId&, const Matrix& m) { n += m.size(); });
  return n;
}

bool TransformerParams::same_shape(const TransformerParams& other) const {
  if (!(arch == other.arch) || layers.size() != other.layers.size()) return false;
  std::vector<std::pair<std::size_t, std::size_t>> a, b;
  for_each([&](const ParamId&, const Matrix& m) { a.emplace_back(m.rows(), m.cols()); });
  other.for_each([&](const ParamId&, const Matrix& m) { b.emplace_back(m.rows(), m.cols()); });
  return a == b;
}

TransformerParams init_transformer(const ArchSpec& arch, SeededRng& rng) {
  arch.validate();
  TransformerParams p;
  p.arch = arch;
  const std::size_t d = arch.width;
  const double s = arch.init_std;
  if (arch.variant == ModelVariant::discrete) {
    p.token_embedding = sample_gaussian(rng, arch.vocab_size, d, 0.0, 1.0);
    p.position_embedding = sample_gaussian(rng, arch.max_len, d, 0.0, 1.0);
  }
  for (std::size_t l = 0; l < arch.layers; ++l) {
    LayerParams L;
    L.w_q = sample_gaussian(rng, d, d, 0.0, s);
    L.w_k = sample_gaussian(rng, d, d, 0.0, s);
    L.w_v = sample_gaussian(rng, d, d, 0.0, s);
    L.proj = sample_gaussian(rng, d, d, 0.0, s);
    if (arch.ffn_hidden > 0) {
      L.ffn_in = sample_gaussian(rng, d, arch.ffn_hidden, 0.0, s);
      L.ffn_out = sample_gaussian(rng, arch.ffn_hidden, d, 0.0, s);
    }
    p.layers.push_back(std::move(L));
  }
  if (arch.variant == ModelVariant::discrete) p.unembedding = sample_gaussian(rng, arch.vocab_size, d, 0.0, s);
  return p;
}

// ---------------------------------------------------------------------------
// Discrete variant kernels. Row-major buffers, row per position.

namespace {

constexpr double kNormEps = 1e-5;

// The dense kernels get an AVX2 clone where the compiler supports it. Each
// output still accumulates its terms in the same order, so the clones agree
// bit for bit with the baseline build.
#if defined(__GNUC__) && defined(__x86_64__) && !defined(__clang__)
#define ICLGD_KERNEL __attribute__((target_clones("avx2", "default")))
#else
#define ICLGD_KERNEL
#endif

// Y[T x O] = X[T x I] W[I x O]
ICLGD_KERNEL void mm_forward(const double* x, const Matrix& w, double* y, std::size_t t_len) {
  const std::size_t in = w.rows(), out = w.cols();
  const double* wd = w.values().data();
  std::fill(y, y + t_len * out, 0.0);
  for (std::size_t t = 0; t < t_len; ++t) {
    double* yr = y + t * out;
    const double* xr = x + t * in;
    for (std::size_t i = 0; i < in; ++i) {
      const double xv = xr[i];
      const double* wr = wd + i * out;
      for (std::size_t o = 0; o < out; ++o) yr[o] += xv * wr[o];
    }
  }
}

// dW[I x O] += X^T dY ; dX[T x I] (+)= dY W^T
ICLGD_KERNEL void mm_backward(const double* x, const Matrix& w, const double* dy, std::size_t t_len, Matrix& dw,
                              double* dx, bool accumulate_dx) {
  const std::size_t in = w.rows(), out = w.cols();
  double* dwd = dw.values().data();
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* xr = x + t * in;
    const double* dyr = dy + t * out;
    for (std::size_t i = 0; i < in; ++i) {
      const double xv = xr[i];
      if (xv == 0.0) continue;
      double* dwr = dwd + i * out;
      for (std::size_t o = 0; o < out; ++o) dwr[o] += xv * dyr[o];
    }
  }
  if (dx == nullptr) return;
  // Row-wise over W^T so the inner loop runs along contiguous memory.
  thread_local std::vector<double> wt, acc;
  wt.resize(in * out);
  acc.resize(in);
  const double* wd = w.values().data();
  for (std::size_t i = 0; i < in; ++i) {
    for (std::size_t o = 0; o < out; ++o) wt[o * in + i] = wd[i * out + o];
  }
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* dyr = dy + t * out;
    double* dxr = dx + t * in;
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t o = 0; o < out; ++o) {
      const double g = dyr[o];
      const double* wr = wt.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) acc[i] += g * wr[i];
    }
    for (std::size_t i = 0; i < in; ++i) dxr[i] = accumulate_dx ? dxr[i] + acc[i] : acc[i];
  }
}

void rms_forward(const double* x, double* y, double* r, std::size_t t_len, std::size_t d) {
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* xr = x + t * d;
    double ss = 0.0;
    for (std::size_t i = 0; i < d; ++i) ss += xr[i] * xr[i];
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + kNormEps);
    r[t] = inv;
    for (std::size_t i = 0; i < d; ++i) y[t * d + i] = xr[i] * inv;
  }
}

// dx += r dy - (r^3 / d) (x . dy) x
void rms_backward(const double* x, const double* r, const double* dy, double* dx, std::size_t t_len,
                  std::size_t d) {
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* xr = x + t * d;
    const double* dyr = dy + t * d;
    double dot = 0.0;
    for (std::size_t i = 0; i < d; ++i) dot += xr[i] * dyr[i];
    const double ri = r[t];
    const double c = ri * ri * ri * dot / static_cast<double>(d);
    for (std::size_t i = 0; i < d; ++i) dx[t * d + i] += ri * dyr[i] - c * xr[i];
  }
}

struct LayerCache {
  std::vector<double> x_in, a, r_a, q, k, v, att, o, x_mid, b, r_b, z, h;
};

struct DiscreteCache {
  std::size_t t_len = 0;
  std::vector<LayerCache> layers;
  std::vector<double> x_final, r_f, f, logits, probs;
};

void check_sequence(const TransformerParams& params, std::span<const TokenId> seq) {
  if (!params.is_discrete()) throw std::invalid_argument("discrete forward called on a continuous model");
  if (seq.empty()) throw std::invalid_argument("forward: empty token sequence");
  if (seq.size() > params.arch.max_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(seq.size()) +
                                " exceeds max_len " + std::to_string(params.arch.max_len));
  }
  for (TokenId t : seq) {
    if (t >= params.arch.vocab_size) {
      throw std::invalid_argument("forward: unknown token id " + std::to_string(t));
    }
  }
}

void discrete_forward(const TransformerParams& params, std::span<const TokenId> seq, DiscreteCache& c) {
  check_sequence(params, seq);
  const ArchSpec& A = params.arch;
  const std::size_t T = seq.size(), D = A.width, H = A.heads, dh = D / H, V = A.vocab_size;
  const std::size_t F = A.ffn_hidden;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  c.t_len = T;
  c.layers.resize(A.layers);

  std::vector<double> x(T * D);
  for (std::size_t t = 0; t < T; ++t) {
    auto te = params.token_embedding.row(seq[t]);
    auto pe = params.position_embedding.row(t);
    for (std::size_t i = 0; i < D; ++i) x[t * D + i] = te[i] + pe[i];
  }

  for (std::size_t l = 0; l < A.layers; ++l) {
    const LayerParams& L = params.layers[l];
    LayerCache& lc = c.layers[l];
    lc.x_in = x;
    lc.a.resize(T * D);
    lc.r_a.resize(T);
    rms_forward(x.data(), lc.a.data(), lc.r_a.data(), T, D);
    lc.q.resize(T * D);
    lc.k.resize(T * D);
    lc.v.resize(T * D);
    mm_forward(lc.a.data(), L.w_q, lc.q.data(), T);
    mm_forward(lc.a.data(), L.w_k, lc.k.data(), T);
    mm_forward(lc.a.data(), L.w_v, lc.v.data(), T);

    lc.att.assign(H * T * T, 0.0);
    lc.o.assign(T * D, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t t = 0; t < T; ++t) {
        double* row = lc.att.data() + (h * T + t) * T;
        const std::size_t last = A.causal ? t + 1 : T;
        const double* qr = lc.q.data() + t * D + off;
        for (std::size_t j = 0; j < last; ++j) {
          const double* kr = lc.k.data() + j * D + off;
          double s = 0.0;
          for (std::size_t i = 0; i < dh; ++i) s += qr[i] * kr[i];
          row[j] = s * att_scale;
        }
        if (A.attention == AttentionKind::softmax) {
          const double mx = *std::max_element(row, row + last);
          double total = 0.0;
          for (std::size_t j = 0; j < last; ++j) {
            row[j] = std::exp(row[j] - mx);
            total += row[j];
          }
          for (std::size_t j = 0; j < last; ++j) row[j] /= total;
        }
        double* orow = lc.o.data() + t * D + off;
        for (std::size_t j = 0; j < last; ++j) {
          const double w = row[j];
          const double* vr = lc.v.data() + j * D + off;
          for (std::size_t i = 0; i < dh; ++i) orow[i] += w * vr[i];
        }
      }
    }
    std::vector<double> delta(T * D);
    mm_forward(lc.o.data(), L.proj, delta.data(), T);
    for (std::size_t i = 0; i < T * D; ++i) x[i] += delta[i];

    if (F > 0) {
      lc.x_mid = x;
      lc.b.resize(T * D);
      lc.r_b.resize(T);
      rms_forward(x.data(), lc.b.data(), lc.r_b.data(), T, D);
      lc.z.resize(T * F);
      mm_forward(lc.b.data(), L.ffn_in, lc.z.data(), T);
      lc.h.resize(T * F);
      for (std::size_t i = 0; i < T * F; ++i) lc.h[i] = lc.z[i] > 0.0 ? lc.z[i] : 0.0;
      mm_forward(lc.h.data(), L.ffn_out, delta.data(), T);
      for (std::size_t i = 0; i < T * D; ++i) x[i] += delta[i];
    }
  }

  c.x_final = x;
  c.f.resize(T * D);
  c.r_f.resize(T);
  rms_forward(x.data(), c.f.data(), c.r_f.data(), T, D);
  c.logits.assign(T * V, 0.0);
  c.probs.resize(T * V);
  for (std::size_t t = 0; t < T; ++t) {
    const double* fr = c.f.data() + t * D;
    double* lr = c.logits.data() + t * V;
    for (std::size_t v = 0; v < V; ++v) {
      auto ur = params.unembedding.row(v);
      double s = 0.0;
      for (std::size_t i = 0; i < D; ++i) s += fr[i] * ur[i];
      lr[v] = s;
    }
    const double mx = *std::max_element(lr, lr + V);
    double total = 0.0;
    double* pr = c.probs.data() + t * V;
    for (std::size_t v = 0; v < V; ++v) {
      pr[v] = std::exp(lr[v] - mx);
      total += pr[v];
    }
    for (std::size_t v = 0; v < V; ++v) pr[v] /= total;
  }
}

void discrete_backward(const TransformerParams& params, std::span<const TokenId> seq,
                       const DiscreteCache& c, const std::vector<double>& dlogits, TransformerParams& g) {
  const ArchSpec& A = params.arch;
  const std::size_t T = c.t_len, D = A.width, H = A.heads, dh = D / H, V = A.vocab_size;
  const std::size_t F = A.ffn_hidden;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  // Unembedding: logits[t][v] = f[t] . U[v]
  std::vector<double> df(T * D, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    const double* dl = dlogits.data() + t * V;
    const double* fr = c.f.data() + t * D;
    double* dfr = df.data() + t * D;
    for (std::size_t v = 0; v < V; ++v) {
      const double gv = dl[v];
      if (gv == 0.0) continue;
      auto ur = params.unembedding.row(v);
      auto gur = g.unembedding.row(v);
      for (std::size_t i = 0; i < D; ++i) {
        gur[i] += gv * fr[i];
        dfr[i] += gv * ur[i];
      }
    }
  }
  std::vector<double> dx(T * D, 0.0);
  rms_backward(c.x_final.data(), c.r_f.data(), df.data(), dx.data(), T, D);

  std::vector<double> tmp(T * D), dq(T * D), dk(T * D), dv(T * D), dout(T * D), datt(T);
  std::vector<double> dz, dhid;
  for (std::size_t l = A.layers; l-- > 0;) {
    const LayerParams& L = params.layers[l];
    LayerParams& G = g.layers[l];
    const LayerCache& lc = c.layers[l];

    if (F > 0) {
      dhid.assign(T * F, 0.0);
      mm_backward(lc.h.data(), L.ffn_out, dx.data(), T, G.ffn_out, dhid.data(), false);
      dz.resize(T * F);
      for (std::size_t i = 0; i < T * F; ++i) dz[i] = lc.z[i] > 0.0 ? dhid[i] : 0.0;
      mm_backward(lc.b.data(), L.ffn_in, dz.data(), T, G.ffn_in, tmp.data(), false);
      rms_backward(lc.x_mid.data(), lc.r_b.data(), tmp.data(), dx.data(), T, D);
    }

    mm_backward(lc.o.data(), L.proj, dx.data(), T, G.proj, dout.data(), false);

    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t off = h * dh;
      for (std::size_t t = 0; t < T; ++t) {
        const double* row = lc.att.data() + (h * T + t) * T;
        const std::size_t last = A.causal ? t + 1 : T;
        const double* dor = dout.data() + t * D + off;
        for (std::size_t j = 0; j < last; ++j) {
          const double* vr = lc.v.data() + j * D + off;
          double s = 0.0;
          for (std::size_t i = 0; i < dh; ++i) s += dor[i] * vr[i];
          datt[j] = s;
          double* dvr = dv.data() + j * D + off;
          const double w = row[j];
          for (std::size_t i = 0; i < dh; ++i) dvr[i] += w * dor[i];
        }
        if (A.attention == AttentionKind::softmax) {
          double dot = 0.0;
          for (std::size_t j = 0; j < last; ++j) dot += row[j] * datt[j];
          for (std::size_t j = 0; j < last; ++j) datt[j] = row[j] * (datt[j] - dot);
        }
        const double* qr = lc.q.data() + t * D + off;
        double* dqr = dq.data() + t * D + off;
        for (std::size_t j = 0; j < last; ++j) {
          const double ds = datt[j] * att_scale;
          if (ds == 0.0) continue;
          const double* kr = lc.k.data() + j * D + off;
          double* dkr = dk.data() + j * D + off;
          for (std::size_t i = 0; i < dh; ++i) {
            dqr[i] += ds * kr[i];
            dkr[i] += ds * qr[i];
          }
        }
      }
    }

    mm_backward(lc.a.data(), L.w_q, dq.data(), T, G.w_q, tmp.data(), false);
    mm_backward(lc.a.data(), L.w_k, dk.data(), T, G.w_k, tmp.data(), true);
    mm_backward(lc.a.data(), L.w_v, dv.data(), T, G.w_v, tmp.data(), true);
    rms_backward(lc.x_in.data(), lc.r_a.data(), tmp.data(), dx.data(), T, D);
  }

  for (std::size_t t = 0; t < T; ++t) {
    auto te = g.token_embedding.row(seq[t]);
    auto pe = g.position_embedding.row(t);
    const double* dxr = dx.data() + t * D;
    for (std::size_t i = 0; i < D; ++i) {
      te[i] += dxr[i];
      pe[i] += dxr[i];
    }
  }
}

}  // namespace

Matrix forward_logits(const TransformerParams& params, std::span<const TokenId> seq) {
  DiscreteCache c;
  discrete_forward(params, seq, c);
  Matrix out(seq.size(), params.arch.vocab_size, c.logits);
  require_finite(out, "forward_logits");
  return out;
}

ConfidenceDistribution forward_distribution(const TransformerParams& params, std::span<const TokenId> seq) {
  DiscreteCache c;
  discrete_forward(params, seq, c);
  const std::size_t V = params.arch.vocab_size;
  ConfidenceDistribution d;
  d.probs.assign(c.probs.end() - static_cast<std::ptrdiff_t>(V), c.probs.end());
  return d;
}

double label_loss(const TransformerParams& params, std::span<const TokenId> prompt, TokenId label) {
  if (label >= params.arch.vocab_size) {
    throw std::invalid_argument("label_loss: label " + std::to_string(label) + " outside vocabulary");
  }
  DiscreteCache c;
  discrete_forward(params, prompt, c);
  const std::size_t V = params.arch.vocab_size;
  const double* lr = c.logits.data() + (prompt.size() - 1) * V;
  const double mx = *std::max_element(lr, lr + V);
  double total = 0.0;
  for (std::size_t v = 0; v < V; ++v) total += std::exp(lr[v] - mx);
  return std::log(total) - (lr[label] - mx);
}

double label_loss_and_grad(const TransformerParams& params, std::span<const TokenId> seq,
                           std::span<const LabelTarget> targets, double weight, TransformerParams& grad) {
  if (targets.empty()) throw std::invalid_argument("label_loss_and_grad: no targets");
  DiscreteCache c;
  discrete_forward(params, seq, c);
  const std::size_t V = params.arch.vocab_size;
  std::vector<double> dlogits(seq.size() * V, 0.0);
  const double per = 1.0 / static_cast<double>(targets.size());
  double loss = 0.0;
  for (const auto& tg : targets) {
    if (tg.position >= seq.size() || tg.label >= V) {
      throw std::invalid_argument("label_loss_and_grad: target out of range");
    }
    const double* lr = c.logits.data() + tg.position * V;
    const double mx = *std::max_element(lr, lr + V);
    double total = 0.0;
    for (std::size_t v = 0; v < V; ++v) total += std::exp(lr[v] - mx);
    loss += (std::log(total) - (lr[tg.label] - mx)) * per;
    const double* pr = c.probs.data() + tg.position * V;
    double* dl = dlogits.data() + tg.position * V;
    for (std::size_t v = 0; v < V; ++v) dl[v] += weight * per * pr[v];
    dl[tg.label] -= weight * per;
  }
  if (!std::isfinite(loss)) return loss;
  discrete_backward(params, seq, c, dlogits, grad);
  return loss;
}

// ---------------------------------------------------------------------------
// Continuous variant.

namespace {

struct LsaLayerCache {
  Matrix e_in, c, m;
};

void check_continuous(const TransformerParams& params, const Matrix& tokens) {
  if (params.is_discrete()) throw std::invalid_argument("forward_regression called on a discrete model");
  if (tokens.rows() != params.arch.width) {
    throw std::invalid_argument("forward_regression: token height " + std::to_string(tokens.rows()) +
                                " does not match model width " + std::to_string(params.arch.width));
  }
  if (tokens.cols() < 2) throw std::invalid_argument("forward_regression: need at least one demonstration");
}

Matrix context_gram(const Matrix& e) {
  const std::size_t d = e.rows(), n = e.cols() - 1;
  Matrix c(d, d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t r = 0; r < d; ++r) {
      const double er = e(r, i);
      for (std::size_t s = 0; s < d; ++s) c(r, s) += er * e(s, i);
    }
  }
  return c;
}

Matrix continuous_forward(const TransformerParams& params, const Matrix& tokens,
                          std::vector<LsaLayerCache>* cache) {
  check_continuous(params, tokens);
  Matrix e = tokens;
  for (const auto& L : params.layers) {
    Matrix c = context_gram(e);
    Matrix m = matmul(matmul(matmul(L.proj, L.w_v), c), matmul(transpose(L.w_k), L.w_q));
    Matrix next = add(e, matmul(m, e));
    if (cache) cache->push_back({std::move(e), std::move(c), std::move(m)});
    e = std::move(next);
  }
  return e;
}

Matrix readout(const TransformerParams& params, const Matrix& e) {
  const std::size_t dx = params.arch.d_x, dy = params.arch.d_y, q = e.cols() - 1;
  Matrix pred(dy, 1);
  for (std::size_t r = 0; r < dy; ++r) pred(r, 0) = -e(dx + r, q);
  return pred;
}

}  // namespace

Matrix forward_regression(const TransformerParams& params, const Matrix& tokens) {
  return readout(params, continuous_forward(params, tokens, nullptr));
}

double regression_loss_and_grad(const TransformerParams& params, const Matrix& tokens,
                                const Matrix& target, double weight, TransformerParams& grad) {
  std::vector<LsaLayerCache> cache;
  const Matrix e_out = continuous_forward(params, tokens, &cache);
  const Matrix pred = readout(params, e_out);
  if (target.rows() != pred.rows() || target.cols() != 1) {
    throw std::invalid_argument("regression_loss_and_grad: target shape mismatch");
  }
  const std::size_t dx = params.arch.d_x, q = tokens.cols() - 1, n_ctx = tokens.cols() - 1;
  double loss = 0.0;
  Matrix g(tokens.rows(), tokens.cols());
  for (std::size_t r = 0; r < pred.rows(); ++r) {
    const double diff = pred(r, 0) - target(r, 0);
    loss += diff * diff;
    g(dx + r, q) = -2.0 * weight * diff;
  }

  for (std::size_t l = params.layers.size(); l-- > 0;) {
    const LayerParams& L = params.layers[l];
    LayerParams& G = grad.layers[l];
    const LsaLayerCache& lc = cache[l];
    const Matrix x = matmul(L.proj, L.w_v);
    const Matrix y = matmul(transpose(L.w_k), L.w_q);
    const Matrix dm = matmul(g, transpose(lc.e_in));
    const Matrix dc = matmul(matmul(transpose(x), dm), transpose(y));
    const Matrix dx_ = matmul(dm, transpose(matmul(lc.c, y)));
    const Matrix dy_ = matmul(transpose(matmul(x, lc.c)), dm);
    G.proj = add(G.proj, matmul(dx_, transpose(L.w_v)));
    G.w_v = add(G.w_v, matmul(transpose(L.proj), dx_));
    G.w_k = add(G.w_k, matmul(L.w_q, transpose(dy_)));
    G.w_q = add(G.w_q, matmul(L.w_k, dy_));

    Matrix dprev = add(g, matmul(transpose(lc.m), g));
    const Matrix sym = add(dc, transpose(dc));
    for (std::size_t i = 0; i < n_ctx; ++i) {
      const Matrix contrib = matmul(sym, lc.e_in.col(i));
      for (std::size_t r = 0; r < contrib.rows(); ++r) dprev(r, i) += contrib(r, 0);
    }
    g = std::move(dprev);
  }
  return loss;
}

}  // namespace iclgd
