// Copyright 2026 The refseq Authors
// SPDX-License-Identifier: Apache-2.0

#include "refseq/tinymodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <type_traits>

#include "refseq/canonical_json.hpp"
#include "refseq/config_io.hpp"

namespace refseq {

using kernels::Exec;

void ModelConfig::validate() const {
  if (vocab < 2) throw ConfigError("vocab must be >= 2");
  if (channels < 2 || heads < 1 || head_dim < 2) {
    throw ConfigError("channels, heads and head_dim must be positive");
  }
  if (channels != heads * head_dim) {
    throw ConfigError("channels (" + std::to_string(channels) +
                      ") must equal heads * head_dim (" +
                      std::to_string(heads * head_dim) + ")");
  }
  if (layers < 1) throw ConfigError("layers must be >= 1");
  if (ffn_hidden < 1) throw ConfigError("ffn_hidden must be >= 1");
  rope.validate();
  if (rope.head_dim() != head_dim) {
    throw ConfigError("rope axes sum to " + std::to_string(rope.head_dim()) +
                      " but head_dim is " + std::to_string(head_dim));
  }
  index_embed.validate();
  if (index_embed.channels != channels) {
    throw ConfigError("index embedding channels must equal model channels");
  }
  if (separator_width < 1) throw ConfigError("separator_width must be >= 1");
  if (!(weight_std >= 0.0) || !(separator_std >= 0.0)) {
    throw ConfigError("init standard deviations must be >= 0");
  }
  if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be > 0");
}

template <typename T>
ParamsT<T> ParamsT<T>::zeros(const ModelConfig& cfg) {
  const auto C = static_cast<std::size_t>(cfg.channels);
  const auto F = static_cast<std::size_t>(cfg.ffn_hidden);
  const auto V = static_cast<std::size_t>(cfg.vocab);
  ParamsT p;
  p.input_w = BasicMatrix<T>(C, C);
  p.input_b = BasicMatrix<T>(1, C);
  p.layers.resize(static_cast<std::size_t>(cfg.layers));
  for (auto& L : p.layers) {
    L.ln1_g = BasicMatrix<T>(1, C);
    L.ln1_b = BasicMatrix<T>(1, C);
    L.wq = BasicMatrix<T>(C, C);
    L.wk = BasicMatrix<T>(C, C);
    L.wv = BasicMatrix<T>(C, C);
    L.wo = BasicMatrix<T>(C, C);
    L.ln2_g = BasicMatrix<T>(1, C);
    L.ln2_b = BasicMatrix<T>(1, C);
    L.w1 = BasicMatrix<T>(C, F);
    L.b1 = BasicMatrix<T>(1, F);
    L.w2 = BasicMatrix<T>(F, C);
    L.b2 = BasicMatrix<T>(1, C);
  }
  p.final_g = BasicMatrix<T>(1, C);
  p.final_b = BasicMatrix<T>(1, C);
  p.head_w = BasicMatrix<T>(C, V);
  p.head_b = BasicMatrix<T>(1, V);
  p.separator = BasicMatrix<T>(static_cast<std::size_t>(cfg.separator_width), C);
  return p;
}

template <typename T>
std::size_t ParamsT<T>::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const BasicMatrix<T>& m) { n += m.size(); });
  return n;
}

template struct ParamsT<float>;
template struct ParamsT<double>;
template struct ParamsT<long double>;

template <typename To, typename From>
ParamsT<To> params_cast(const ParamsT<From>& p) {
  ParamsT<To> out;
  out.input_w = matrix_cast<To>(p.input_w);
  out.input_b = matrix_cast<To>(p.input_b);
  for (const auto& L : p.layers) {
    LayerParams<To> o;
    o.ln1_g = matrix_cast<To>(L.ln1_g);
    o.ln1_b = matrix_cast<To>(L.ln1_b);
    o.wq = matrix_cast<To>(L.wq);
    o.wk = matrix_cast<To>(L.wk);
    o.wv = matrix_cast<To>(L.wv);
    o.wo = matrix_cast<To>(L.wo);
    o.ln2_g = matrix_cast<To>(L.ln2_g);
    o.ln2_b = matrix_cast<To>(L.ln2_b);
    o.w1 = matrix_cast<To>(L.w1);
    o.b1 = matrix_cast<To>(L.b1);
    o.w2 = matrix_cast<To>(L.w2);
    o.b2 = matrix_cast<To>(L.b2);
    out.layers.push_back(std::move(o));
  }
  out.final_g = matrix_cast<To>(p.final_g);
  out.final_b = matrix_cast<To>(p.final_b);
  out.head_w = matrix_cast<To>(p.head_w);
  out.head_b = matrix_cast<To>(p.head_b);
  out.separator = matrix_cast<To>(p.separator);
  return out;
}

template ParamsT<float> params_cast<float, double>(const ParamsT<double>&);
template ParamsT<double> params_cast<double, float>(const ParamsT<float>&);
template ParamsT<float> params_cast<float, float>(const ParamsT<float>&);
template ParamsT<long double> params_cast<long double, long double>(const ParamsT<long double>&);
template ParamsT<double> params_cast<double, double>(const ParamsT<double>&);
template ParamsT<long double> params_cast<long double, double>(const ParamsT<double>&);

Params init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Params p = Params::zeros(cfg);
  p.visit([&](const std::string& name, Matrix& m) {
    const bool gain = name.ends_with(".g");
    const bool bias = name.ends_with(".b") || name.ends_with(".b1") ||
                      name.ends_with(".b2");
    if (gain) {
      m.fill(1.0);
    } else if (bias) {
      m.fill(0.0);
    } else {
      const double std = name == "separator" ? cfg.separator_std : cfg.weight_std;
      for (double& v : m.flat()) v = rng.normal(0.0, std);
    }
  });
  return p;
}

SeparatorToken separator_of(const Params& params) {
  return SeparatorToken{params.separator, true};
}

// ---------------------------------------------------------------------------
// Input preparation

template <typename T>
ModelInput<T> prepare_input(const AssembledSequence& seq, const ModelConfig& cfg) {
  if (seq.channels() != static_cast<std::size_t>(cfg.channels)) {
    throw ValidationError("sequence has " + std::to_string(seq.channels()) +
                          " channels, model expects " +
                          std::to_string(cfg.channels));
  }
  if (seq.options.use_separator != cfg.flags.use_separator) {
    throw ValidationError("sequence separator flag does not match model config");
  }
  if (seq.options.use_index_embed != cfg.flags.use_index_embed) {
    throw ValidationError("sequence index-embedding flag does not match model config");
  }
  if (seq.options.use_separator &&
      seq.separator_width != static_cast<std::size_t>(cfg.separator_width)) {
    throw ValidationError("sequence separator width does not match model config");
  }
  if (seq.text_length == 0) {
    throw ValidationError("sequence needs at least one text token for the readout");
  }
  const std::size_t L = seq.length();
  const std::size_t half = static_cast<std::size_t>(cfg.head_dim / 2);

  ModelInput<T> in;
  in.tokens = matrix_cast<T>(seq.tokens);
  in.separator_slot.assign(L, -1);
  for (std::size_t r = 0; r < L; ++r) {
    if (seq.metas[r].kind == TokenKind::separator) {
      in.separator_slot[r] = seq.metas[r].slot;
    }
  }
  in.angles = BasicMatrix<T>(L, half);
  if (cfg.flags.use_rope) {
    const FrequencyTable table = build_freq_table(cfg.rope);
    const auto positions = assign_positions(seq);
    std::vector<double> ang(half);
    for (std::size_t r = 0; r < L; ++r) {
      if (!positions[r].rotate) continue;
      token_frequencies(positions[r].pos, table, ang);
      for (std::size_t i = 0; i < half; ++i) in.angles(r, i) = static_cast<T>(ang[i]);
    }
  }
  return in;
}

template ModelInput<float> prepare_input<float>(const AssembledSequence&, const ModelConfig&);
template ModelInput<double> prepare_input<double>(const AssembledSequence&, const ModelConfig&);
template ModelInput<long double> prepare_input<long double>(const AssembledSequence&,
                                                           const ModelConfig&);

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

// Activations of one block. Queries, attention outputs and everything after
// them exist only for rows q0..L-1 (q0 = L-1 in the last block, where only
// the readout row matters); keys and values cover every row.
template <typename T>
struct LayerCache {
  std::size_t q0 = 0;
  BasicMatrix<T> h_in;     // L rows entering the block
  BasicMatrix<T> a;        // LN1(h_in), L rows
  BasicMatrix<T> q;        // rotated queries, nq rows
  BasicMatrix<T> k, v;     // L rows, keys rotated
  BasicMatrix<T> probs;    // (heads * nq) x L
  BasicMatrix<T> o;        // attention output before Wo, nq rows
  BasicMatrix<T> h_mid;    // after the attention residual, nq rows
  BasicMatrix<T> b, u, g;  // LN2 output, pre-activation, gelu(u); nq rows
  std::vector<T> mean1, rstd1, mean2, rstd2;
};

template <typename T>
struct Cache {
  BasicMatrix<T> x;
  std::vector<LayerCache<T>> layers;
  BasicMatrix<T> h_out;  // rows leaving the last block
  std::vector<T> last;   // readout row
  T mean_f{}, rstd_f{};
  std::vector<T> z;
  std::vector<T> logits;
};

template <typename T>
BasicMatrix<T> tail_rows(const BasicMatrix<T>& m, std::size_t q0) {
  BasicMatrix<T> out(m.rows() - q0, m.cols());
  std::copy(m.data() + q0 * m.cols(), m.data() + m.size(), out.data());
  return out;
}

template <typename T>
void layer_norm(const BasicMatrix<T>& x, const BasicMatrix<T>& g,
                const BasicMatrix<T>& b, T eps, BasicMatrix<T>& y,
                std::vector<T>& mean, std::vector<T>& rstd) {
  const std::size_t n = x.rows();
  const std::size_t c = x.cols();
  y = BasicMatrix<T>(n, c);
  mean.resize(n);
  rstd.resize(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto xr = x.row(r);
    T mu{0};
    for (T v : xr) mu += v;
    mu /= static_cast<T>(c);
    T var{0};
    for (T v : xr) var += (v - mu) * (v - mu);
    var /= static_cast<T>(c);
    const T rs = T{1} / std::sqrt(var + eps);
    mean[r] = mu;
    rstd[r] = rs;
    auto yr = y.row(r);
    for (std::size_t i = 0; i < c; ++i) {
      yr[i] = (xr[i] - mu) * rs * g(0, i) + b(0, i);
    }
  }
}

// dx (+)= LN backward for rows of x; accumulates dg, db.
template <typename T>
void layer_norm_backward(const BasicMatrix<T>& x, const BasicMatrix<T>& g,
                         const std::vector<T>& mean, const std::vector<T>& rstd,
                         const BasicMatrix<T>& dy, BasicMatrix<T>& dx,
                         BasicMatrix<T>& dg, BasicMatrix<T>& db) {
  const std::size_t c = x.cols();
  std::vector<T> xhat(c), dxhat(c);
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    auto dyr = dy.row(r);
    T sum_d{0}, sum_dx{0};
    for (std::size_t i = 0; i < c; ++i) {
      xhat[i] = (xr[i] - mean[r]) * rstd[r];
      dg(0, i) += dyr[i] * xhat[i];
      db(0, i) += dyr[i];
      dxhat[i] = dyr[i] * g(0, i);
      sum_d += dxhat[i];
      sum_dx += dxhat[i] * xhat[i];
    }
    sum_d /= static_cast<T>(c);
    sum_dx /= static_cast<T>(c);
    auto dxr = dx.row(r);
    for (std::size_t i = 0; i < c; ++i) {
      dxr[i] += rstd[r] * (dxhat[i] - sum_d - xhat[i] * sum_dx);
    }
  }
}

template <typename T>
constexpr T kGeluC = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
template <typename T>
constexpr T kGeluA = static_cast<T>(0.044715);

template <typename T>
T gelu(T u) {
  const T t = std::tanh(kGeluC<T> * (u + kGeluA<T> * u * u * u));
  return T{0.5} * u * (T{1} + t);
}

template <typename T>
T gelu_grad(T u) {
  const T inner = kGeluC<T> * (u + kGeluA<T> * u * u * u);
  const T t = std::tanh(inner);
  const T dinner = kGeluC<T> * (T{1} + T{3} * kGeluA<T> * u * u);
  return T{0.5} * (T{1} + t) + T{0.5} * u * (T{1} - t * t) * dinner;
}

template <typename T>
void add_bias(BasicMatrix<T>& m, const BasicMatrix<T>& b) {
  for (std::size_t r = 0; r < m.rows(); ++r) {
    auto row = m.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += b(0, c);
  }
}

template <typename T>
void bias_grad(const BasicMatrix<T>& d, BasicMatrix<T>& db) {
  for (std::size_t r = 0; r < d.rows(); ++r) {
    auto row = d.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) db(0, c) += row[c];
  }
}

template <typename T>
void attention_forward(LayerCache<T>& lc, std::size_t heads, std::size_t hd,
                       Exec exec) {
  const std::size_t nq = lc.q.rows();
  const std::size_t L = lc.k.rows();
  const std::size_t C = lc.k.cols();
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  lc.probs = BasicMatrix<T>(heads * nq, L);
  lc.o = BasicMatrix<T>(nq, C);
  auto row_task = [&](std::size_t h, std::size_t i) {
    T* p = lc.probs.data() + (h * nq + i) * L;
    const T* qi = lc.q.data() + i * C + h * hd;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < L; ++j) {
      const T* kj = lc.k.data() + j * C + h * hd;
      T s{0};
      for (std::size_t d = 0; d < hd; ++d) s += qi[d] * kj[d];
      p[j] = s * scale;
      mx = std::max(mx, p[j]);
    }
    T sum{0};
    for (std::size_t j = 0; j < L; ++j) {
      p[j] = std::exp(p[j] - mx);
      sum += p[j];
    }
    const T inv = T{1} / sum;
    T* oi = lc.o.data() + i * C + h * hd;
    for (std::size_t j = 0; j < L; ++j) {
      p[j] *= inv;
      const T* vj = lc.v.data() + j * C + h * hd;
      for (std::size_t d = 0; d < hd; ++d) oi[d] += p[j] * vj[d];
    }
  };
  if (exec == Exec::serial || nq == 1) {
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < nq; ++i) row_task(h, i);
  } else {
    const std::ptrdiff_t total = static_cast<std::ptrdiff_t>(heads * nq);
#pragma omp parallel for schedule(static) num_threads(kernels::worker_count())
    for (std::ptrdiff_t t = 0; t < total; ++t) {
      row_task(static_cast<std::size_t>(t) / nq, static_cast<std::size_t>(t) % nq);
    }
  }
}

template <typename T>
BasicMatrix<T> embed_rows(const ParamsT<T>& P, const ModelInput<T>& in,
                          const ModelConfig& cfg, Exec exec, BasicMatrix<T>& x) {
  const std::size_t L = in.tokens.rows();
  const std::size_t C = static_cast<std::size_t>(cfg.channels);
  if (in.tokens.cols() != C) throw ValidationError("input channel mismatch");
  if (L == 0) throw ValidationError("empty sequence");
  x = in.tokens;
  for (std::size_t r = 0; r < L; ++r) {
    const std::int64_t slot = in.separator_slot[r];
    if (slot < 0) continue;
    if (static_cast<std::size_t>(slot) >= P.separator.rows()) {
      throw ValidationError("separator slot outside parameter width");
    }
    auto src = P.separator.row(static_cast<std::size_t>(slot));
    std::copy(src.begin(), src.end(), x.row(r).begin());
  }
  BasicMatrix<T> h(L, C);
  kernels::matmul(x, P.input_w, h, false, exec);
  add_bias(h, P.input_b);
  return h;
}

// One block. h enters with L rows and leaves with rows q0..L-1.
template <typename T>
void layer_step(const LayerParams<T>& W, BasicMatrix<T>& h, const ModelInput<T>& in,
                const ModelConfig& cfg, Exec exec, std::size_t q0,
                LayerCache<T>& lc) {
  const std::size_t L = h.rows();
  const std::size_t C = h.cols();
  const std::size_t heads = static_cast<std::size_t>(cfg.heads);
  const std::size_t hd = static_cast<std::size_t>(cfg.head_dim);
  const T eps = static_cast<T>(cfg.ln_eps);
  const std::size_t nq = L - q0;
  lc.q0 = q0;
  lc.h_in = h;
  layer_norm(h, W.ln1_g, W.ln1_b, eps, lc.a, lc.mean1, lc.rstd1);
  lc.q = BasicMatrix<T>(nq, C);
  lc.k = BasicMatrix<T>(L, C);
  lc.v = BasicMatrix<T>(L, C);
  if (q0 == 0) {
    kernels::matmul(lc.a, W.wq, lc.q, false, exec);
    kernels::rope_rows(lc.q, in.angles, heads, false, exec);
  } else {
    kernels::matmul(tail_rows(lc.a, q0), W.wq, lc.q, false, exec);
    kernels::rope_rows(lc.q, tail_rows(in.angles, q0), heads, false, exec);
  }
  kernels::matmul(lc.a, W.wk, lc.k, false, exec);
  kernels::matmul(lc.a, W.wv, lc.v, false, exec);
  kernels::rope_rows(lc.k, in.angles, heads, false, exec);
  attention_forward(lc, heads, hd, exec);

  BasicMatrix<T> out = q0 == 0 ? std::move(h) : tail_rows(h, q0);
  kernels::matmul(lc.o, W.wo, out, true, exec);
  lc.h_mid = out;
  layer_norm(out, W.ln2_g, W.ln2_b, eps, lc.b, lc.mean2, lc.rstd2);
  lc.u = BasicMatrix<T>(nq, W.w1.cols());
  kernels::matmul(lc.b, W.w1, lc.u, false, exec);
  add_bias(lc.u, W.b1);
  lc.g = lc.u;
  for (T& v : lc.g.flat()) v = gelu(v);
  kernels::matmul(lc.g, W.w2, out, true, exec);
  add_bias(out, W.b2);
  h = std::move(out);
}

// Rows that still need queries entering block l of n.
inline std::size_t query_offset(std::size_t l, std::size_t n, std::size_t rows) {
  return l + 1 == n ? rows - 1 : 0;
}

template <typename T>
std::vector<T> readout(const ParamsT<T>& P, const ModelConfig& cfg,
                       std::span<const T> last, Cache<T>* cache) {
  const std::size_t C = last.size();
  BasicMatrix<T> row(1, C);
  std::copy(last.begin(), last.end(), row.row(0).begin());
  BasicMatrix<T> z;
  std::vector<T> mf, rf;
  layer_norm(row, P.final_g, P.final_b, static_cast<T>(cfg.ln_eps), z, mf, rf);
  BasicMatrix<T> logits(1, P.head_w.cols());
  kernels::matmul(z, P.head_w, logits, false, Exec::serial);
  add_bias(logits, P.head_b);
  if (cache) {
    cache->last.assign(last.begin(), last.end());
    cache->mean_f = mf[0];
    cache->rstd_f = rf[0];
    cache->z.assign(z.row(0).begin(), z.row(0).end());
  }
  return {logits.row(0).begin(), logits.row(0).end()};
}

template <typename T>
void run_forward(const ParamsT<T>& P, const ModelInput<T>& in,
                 const ModelConfig& cfg, Exec exec, Cache<T>& cache) {
  BasicMatrix<T> h = embed_rows(P, in, cfg, exec, cache.x);
  const std::size_t n = P.layers.size();
  cache.layers.resize(n);
  for (std::size_t l = 0; l < n; ++l) {
    layer_step(P.layers[l], h, in, cfg, exec, query_offset(l, n, h.rows()),
               cache.layers[l]);
  }
  cache.h_out = h;
  cache.logits = readout<T>(P, cfg, h.row(h.rows() - 1), &cache);
}

// Logits without keeping a cache. Starts at block `first` from residual
// stream `h_first` (rows entering that block) when given.
template <typename T>
std::vector<T> fast_logits(const ParamsT<T>& P, const ModelInput<T>& in,
                           const ModelConfig& cfg, Exec exec, std::size_t first = 0,
                           const BasicMatrix<T>* h_first = nullptr) {
  BasicMatrix<T> h;
  if (h_first) {
    h = *h_first;
  } else {
    BasicMatrix<T> x;
    h = embed_rows(P, in, cfg, exec, x);
    first = 0;
  }
  const std::size_t n = P.layers.size();
  for (std::size_t l = first; l < n; ++l) {
    LayerCache<T> scratch;
    layer_step(P.layers[l], h, in, cfg, exec, query_offset(l, n, h.rows()), scratch);
  }
  return readout<T>(P, cfg, h.row(h.rows() - 1), nullptr);
}

template <typename T>
T cross_entropy(const std::vector<T>& logits, int target, std::vector<T>* dlogits) {
  const T mx = *std::max_element(logits.begin(), logits.end());
  T sum{0};
  for (T v : logits) sum += std::exp(v - mx);
  const T lse = mx + std::log(sum);
  if (dlogits) {
    dlogits->resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
      (*dlogits)[i] = std::exp(logits[i] - lse);
    }
    (*dlogits)[static_cast<std::size_t>(target)] -= T{1};
  }
  return lse - logits[static_cast<std::size_t>(target)];
}

template <typename T>
void check_target(int target, const ModelConfig& cfg) {
  if (target < 0 || target >= cfg.vocab) {
    throw DomainError("target " + std::to_string(target) + " outside vocab of " +
                      std::to_string(cfg.vocab));
  }
}

template <typename T>
void attention_backward(const LayerCache<T>& lc, const BasicMatrix<T>& d_o,
                        std::size_t heads, std::size_t hd, BasicMatrix<T>& dq,
                        BasicMatrix<T>& dk, BasicMatrix<T>& dv) {
  const std::size_t nq = lc.q.rows();
  const std::size_t L = lc.k.rows();
  const std::size_t C = lc.k.cols();
  const T scale = T{1} / std::sqrt(static_cast<T>(hd));
  std::vector<T> dp(L);
  for (std::size_t h = 0; h < heads; ++h) {
    for (std::size_t i = 0; i < nq; ++i) {
      const T* p = lc.probs.data() + (h * nq + i) * L;
      const T* doi = d_o.data() + i * C + h * hd;
      T dot{0};
      for (std::size_t j = 0; j < L; ++j) {
        const T* vj = lc.v.data() + j * C + h * hd;
        T* dvj = dv.data() + j * C + h * hd;
        T s{0};
        for (std::size_t d = 0; d < hd; ++d) {
          s += doi[d] * vj[d];
          dvj[d] += p[j] * doi[d];
        }
        dp[j] = s;
        dot += p[j] * s;
      }
      const T* qi = lc.q.data() + i * C + h * hd;
      T* dqi = dq.data() + i * C + h * hd;
      for (std::size_t j = 0; j < L; ++j) {
        const T ds = p[j] * (dp[j] - dot) * scale;
        const T* kj = lc.k.data() + j * C + h * hd;
        T* dkj = dk.data() + j * C + h * hd;
        for (std::size_t d = 0; d < hd; ++d) {
          dqi[d] += ds * kj[d];
          dkj[d] += ds * qi[d];
        }
      }
    }
  }
}

// Backward through one block: dh holds rows q0..L-1 of the block output and
// is replaced by the gradient for all L input rows.
template <typename T>
void layer_backward(const LayerParams<T>& W, const LayerCache<T>& lc,
                    const ModelInput<T>& in, const ModelConfig& cfg, Exec exec,
                    BasicMatrix<T>& dh, LayerParams<T>& G) {
  const std::size_t q0 = lc.q0;
  const std::size_t L = lc.h_in.rows();
  const std::size_t C = lc.h_in.cols();
  const std::size_t nq = L - q0;
  const std::size_t heads = static_cast<std::size_t>(cfg.heads);
  const std::size_t hd = static_cast<std::size_t>(cfg.head_dim);

  // Feed-forward residual branch.
  kernels::matmul_at_b(lc.g, dh, G.w2, true, exec);
  bias_grad(dh, G.b2);
  BasicMatrix<T> du(nq, W.w1.cols());
  kernels::matmul_a_bt(dh, W.w2, du, false, exec);
  for (std::size_t i = 0; i < du.size(); ++i) {
    du.flat()[i] *= gelu_grad(lc.u.flat()[i]);
  }
  kernels::matmul_at_b(lc.b, du, G.w1, true, exec);
  bias_grad(du, G.b1);
  BasicMatrix<T> db(nq, C);
  kernels::matmul_a_bt(du, W.w1, db, false, exec);
  BasicMatrix<T> dmid = dh;
  layer_norm_backward(lc.h_mid, W.ln2_g, lc.mean2, lc.rstd2, db, dmid, G.ln2_g,
                      G.ln2_b);

  // Attention residual branch.
  kernels::matmul_at_b(lc.o, dmid, G.wo, true, exec);
  BasicMatrix<T> d_o(nq, C);
  kernels::matmul_a_bt(dmid, W.wo, d_o, false, exec);
  BasicMatrix<T> dq(nq, C), dk(L, C), dv(L, C);
  attention_backward(lc, d_o, heads, hd, dq, dk, dv);
  kernels::rope_rows(dk, in.angles, heads, true, exec);
  kernels::matmul_at_b(lc.a, dk, G.wk, true, exec);
  kernels::matmul_at_b(lc.a, dv, G.wv, true, exec);
  BasicMatrix<T> da(L, C);
  kernels::matmul_a_bt(dk, W.wk, da, false, exec);
  kernels::matmul_a_bt(dv, W.wv, da, true, exec);
  BasicMatrix<T> daq(nq, C);
  if (q0 == 0) {
    kernels::rope_rows(dq, in.angles, heads, true, exec);
    kernels::matmul_at_b(lc.a, dq, G.wq, true, exec);
  } else {
    kernels::rope_rows(dq, tail_rows(in.angles, q0), heads, true, exec);
    kernels::matmul_at_b(tail_rows(lc.a, q0), dq, G.wq, true, exec);
  }
  kernels::matmul_a_bt(dq, W.wq, daq, false, exec);
  for (std::size_t i = 0; i < nq * C; ++i) da.flat()[q0 * C + i] += daq.flat()[i];

  BasicMatrix<T> din(L, C);
  std::copy(dmid.data(), dmid.data() + dmid.size(), din.data() + q0 * C);
  layer_norm_backward(lc.h_in, W.ln1_g, lc.mean1, lc.rstd1, da, din, G.ln1_g,
                      G.ln1_b);
  dh = std::move(din);
}

template <typename T>
void run_backward(const ParamsT<T>& P, const ModelInput<T>& in,
                  const ModelConfig& cfg, const Cache<T>& cache,
                  const std::vector<T>& dlogits, ParamsT<T>& G, Exec exec) {
  const std::size_t C = static_cast<std::size_t>(cfg.channels);

  // Head and final norm.
  BasicMatrix<T> z(1, C), dl(1, dlogits.size());
  std::copy(cache.z.begin(), cache.z.end(), z.row(0).begin());
  std::copy(dlogits.begin(), dlogits.end(), dl.row(0).begin());
  kernels::matmul_at_b(z, dl, G.head_w, true, Exec::serial);
  bias_grad(dl, G.head_b);
  BasicMatrix<T> dz(1, C);
  kernels::matmul_a_bt(dl, P.head_w, dz, false, Exec::serial);

  BasicMatrix<T> last(1, C), dlast(1, C);
  std::copy(cache.last.begin(), cache.last.end(), last.row(0).begin());
  layer_norm_backward(last, P.final_g, std::vector<T>{cache.mean_f},
                      std::vector<T>{cache.rstd_f}, dz, dlast, G.final_g,
                      G.final_b);

  // The last block emits only the readout row.
  BasicMatrix<T> dh = std::move(dlast);
  for (std::size_t li = P.layers.size(); li-- > 0;) {
    layer_backward(P.layers[li], cache.layers[li], in, cfg, exec, dh, G.layers[li]);
  }

  // Input projection and the shared separator.
  kernels::matmul_at_b(cache.x, dh, G.input_w, true, exec);
  bias_grad(dh, G.input_b);
  for (std::size_t r = 0; r < dh.rows(); ++r) {
    const std::int64_t slot = in.separator_slot[r];
    if (slot < 0) continue;
    auto dst = G.separator.row(static_cast<std::size_t>(slot));
    auto dr = dh.row(r);
    for (std::size_t c = 0; c < C; ++c) {
      T s{0};
      for (std::size_t j = 0; j < C; ++j) s += dr[j] * P.input_w(c, j);
      dst[c] += s;
    }
  }
}

}  // namespace

template <typename T>
std::vector<T> forward(const ParamsT<T>& params, const ModelInput<T>& input,
                       const ModelConfig& cfg, Exec exec) {
  return fast_logits(params, input, cfg, exec);
}

template std::vector<float> forward<float>(const ParamsT<float>&, const ModelInput<float>&,
                                           const ModelConfig&, Exec);
template std::vector<double> forward<double>(const ParamsT<double>&, const ModelInput<double>&,
                                             const ModelConfig&, Exec);

std::vector<double> forward(const Params& params, const AssembledSequence& seq,
                            const ModelConfig& cfg, Exec exec) {
  return forward(params, prepare_input<double>(seq, cfg), cfg, exec);
}

Matrix attention_sublayer(const LayerParams<double>& W, const Matrix& h,
                          const ModelInput<double>& in, const ModelConfig& cfg) {
  const std::size_t L = h.rows();
  const std::size_t C = h.cols();
  const auto heads = static_cast<std::size_t>(cfg.heads);
  LayerCache<double> lc;
  layer_norm(h, W.ln1_g, W.ln1_b, cfg.ln_eps, lc.a, lc.mean1, lc.rstd1);
  lc.q = Matrix(L, C);
  lc.k = Matrix(L, C);
  lc.v = Matrix(L, C);
  kernels::matmul(lc.a, W.wq, lc.q, false, Exec::serial);
  kernels::matmul(lc.a, W.wk, lc.k, false, Exec::serial);
  kernels::matmul(lc.a, W.wv, lc.v, false, Exec::serial);
  kernels::rope_rows(lc.q, in.angles, heads, false, Exec::serial);
  kernels::rope_rows(lc.k, in.angles, heads, false, Exec::serial);
  attention_forward(lc, heads, static_cast<std::size_t>(cfg.head_dim), Exec::serial);
  Matrix out(L, C);
  kernels::matmul(lc.o, W.wo, out, false, Exec::serial);
  return out;
}

template <typename T>
T loss_only(const ParamsT<T>& params, const ModelInput<T>& input, int target,
            const ModelConfig& cfg) {
  check_target<T>(target, cfg);
  return cross_entropy<T>(fast_logits(params, input, cfg, Exec::serial), target,
                          nullptr);
}

template float loss_only<float>(const ParamsT<float>&, const ModelInput<float>&, int,
                                const ModelConfig&);
template double loss_only<double>(const ParamsT<double>&, const ModelInput<double>&, int,
                                  const ModelConfig&);
template long double loss_only<long double>(const ParamsT<long double>&,
                                            const ModelInput<long double>&, int,
                                            const ModelConfig&);

template <typename T>
LossAndGrad<T> loss_and_backward(const ParamsT<T>& params,
                                 const ModelInput<T>& input, int target,
                                 const ModelConfig& cfg, Exec exec) {
  check_target<T>(target, cfg);
  Cache<T> cache;
  run_forward(params, input, cfg, exec, cache);
  LossAndGrad<T> out;
  std::vector<T> dlogits;
  out.loss = cross_entropy(cache.logits, target, &dlogits);
  if (!std::isfinite(static_cast<double>(out.loss))) {
    T mx = 0;
    for (T v : cache.logits) mx = std::max(mx, std::abs(v));
    throw TrainingError("non-finite loss (target " + std::to_string(target) +
                        ", max |logit| " + std::to_string(static_cast<double>(mx)) +
                        ", sequence length " +
                        std::to_string(input.tokens.rows()) + ")");
  }
  out.grads = ParamsT<T>::zeros(cfg);
  run_backward(params, input, cfg, cache, dlogits, out.grads, exec);
  out.logits = std::move(cache.logits);
  return out;
}

template LossAndGrad<float> loss_and_backward<float>(const ParamsT<float>&,
                                                     const ModelInput<float>&, int,
                                                     const ModelConfig&, Exec);
template LossAndGrad<double> loss_and_backward<double>(const ParamsT<double>&,
                                                       const ModelInput<double>&, int,
                                                       const ModelConfig&, Exec);

LossAndGrad<double> loss_and_backward(const Params& params,
                                      const AssembledSequence& seq, int target,
                                      const ModelConfig& cfg, Exec exec) {
  return loss_and_backward(params, prepare_input<double>(seq, cfg), target, cfg, exec);
}

// ---------------------------------------------------------------------------
// Gradient check

namespace {

// Central-difference evaluator in scalar type N around a fixed point. A
// perturbation in layer l leaves everything before l unchanged, so probes
// resume from the cached activations of the unperturbed point.
template <typename N>
class Prober {
 public:
  template <typename T>
  Prober(const ParamsT<T>& point, const AssembledSequence& seq, int target,
         const ModelConfig& cfg)
      : params_(params_cast<N>(params_cast<double>(point))),
        input_(prepare_input<N>(seq, cfg)),
        target_(target),
        cfg_(cfg) {
    params_.visit([&](const std::string&, BasicMatrix<N>& m) { blocks_.push_back(&m); });
    run_forward(params_, input_, cfg_, Exec::serial, base_);
  }

  // (loss(up) - loss(down)) / (up - down) for one entry, in N.
  template <typename T>
  double quotient(std::size_t block, const std::string& name, std::size_t i, T up,
                  T down) {
    N& slot = blocks_[block]->flat()[i];
    const N orig = slot;
    slot = static_cast<N>(up);
    const N lp = loss(name);
    slot = static_cast<N>(down);
    const N lm = loss(name);
    slot = orig;
    return static_cast<double>((lp - lm) / (static_cast<N>(up) - static_cast<N>(down)));
  }

 private:
  N loss(const std::string& name) {
    std::vector<N> logits;
    if (name.starts_with("layer")) {
      const std::size_t l = std::stoul(name.substr(5));
      logits = fast_logits(params_, input_, cfg_, Exec::serial, l, &base_.layers[l].h_in);
    } else if (name.starts_with("final") || name.starts_with("head")) {
      logits = readout<N>(params_, cfg_, base_.h_out.row(base_.h_out.rows() - 1), nullptr);
    } else {
      logits = fast_logits(params_, input_, cfg_, Exec::serial);
    }
    return cross_entropy<N>(logits, target_, nullptr);
  }

  ParamsT<N> params_;
  ModelInput<N> input_;
  int target_;
  ModelConfig cfg_;
  Cache<N> base_;
  std::vector<BasicMatrix<N>*> blocks_;
};

// Analytic gradients in T, difference quotients in T. In 64-bit mode an
// entry that disagrees by more than options.refine_above is re-evaluated with
// the loss in extended precision R, which separates cancellation noise on
// tiny gradients from genuine disagreement.
template <typename T, typename R>
GradCheckReport grad_check_impl(const Params& params, const AssembledSequence& seq,
                                int target, const ModelConfig& cfg,
                                const GradCheckOptions& options) {
  const ParamsT<T> pt = params_cast<T>(params);
  LossAndGrad<T> analytic =
      loss_and_backward(pt, prepare_input<T>(seq, cfg), target, cfg);
  if (!options.corrupt_block.empty()) {
    bool found = false;
    analytic.grads.visit([&](const std::string& name, BasicMatrix<T>& m) {
      if (name != options.corrupt_block) return;
      found = true;
      for (T& v : m.flat()) v *= T{1.5};
    });
    if (!found) throw DomainError("unknown parameter block " + options.corrupt_block);
  }
  std::vector<const BasicMatrix<T>*> grad_blocks;
  analytic.grads.visit(
      [&](const std::string&, const BasicMatrix<T>& m) { grad_blocks.push_back(&m); });

  Prober<T> fast(pt, seq, target, cfg);
  std::optional<Prober<R>> precise;
  const T eps = static_cast<T>(options.eps);

  auto rel_error = [&](double a, double numeric) {
    const double denom = std::max({std::abs(a), std::abs(numeric), options.abs_floor});
    return std::abs(a - numeric) / denom;
  };

  GradCheckReport report;
  report.eps = options.eps;
  std::size_t block_id = 0;
  pt.visit([&](const std::string& name, const BasicMatrix<T>& m) {
    const BasicMatrix<T>& g = *grad_blocks[block_id];
    BlockError be;
    be.block = name;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const T up = m.flat()[i] + eps;
      const T down = m.flat()[i] - eps;
      const double a = static_cast<double>(g.flat()[i]);
      double numeric = fast.quotient(block_id, name, i, up, down);
      double rel = rel_error(a, numeric);
      if constexpr (!std::is_same_v<T, R>) {
        if (rel > options.refine_above) {
          if (!precise) precise.emplace(pt, seq, target, cfg);
          numeric = precise->quotient(block_id, name, i, up, down);
          rel = rel_error(a, numeric);
        }
      }
      if (i == 0 || rel > be.max_rel_error) {
        be.max_rel_error = rel;
        be.worst_index = i;
        be.analytic = a;
        be.numeric = numeric;
      }
    }
    if (be.max_rel_error >= report.max_rel_error) {
      report.max_rel_error = be.max_rel_error;
      report.worst_block = name;
    }
    report.blocks.push_back(std::move(be));
    ++block_id;
  });
  return report;
}

}  // namespace

GradCheckReport grad_check(const Params& params, const AssembledSequence& seq,
                           int target, const ModelConfig& cfg,
                           const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) {
    throw DomainError("grad_check: eps must be > 0");
  }
  if (options.fp32) {
    return grad_check_impl<float, double>(params, seq, target, cfg, options);
  }
  return grad_check_impl<double, long double>(params, seq, target, cfg, options);
}

// ---------------------------------------------------------------------------
// Optimizer

OptState OptState::zeros_like(const ModelConfig& cfg) {
  return OptState{0, Params::zeros(cfg), Params::zeros(cfg)};
}

namespace {

template <typename F>
void zip_blocks(Params& a, const Params& b, F&& f) {
  std::vector<const Matrix*> bs;
  b.visit([&](const std::string&, const Matrix& m) { bs.push_back(&m); });
  std::size_t i = 0;
  a.visit([&](const std::string& name, Matrix& m) {
    const Matrix& other = *bs[i++];
    if (other.rows() != m.rows() || other.cols() != m.cols()) {
      throw ValidationError("parameter block shape mismatch in " + name);
    }
    f(name, m, other);
  });
}

}  // namespace

void opt_step(Params& params, const Gradients& grads, OptState& state,
              const OptHyper& hyper) {
  const std::int64_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(t));

  // Moments and candidate parameters are computed first so a non-finite
  // update leaves params and state untouched.
  Params m = state.m;
  Params v = state.v;
  Params next = params;
  zip_blocks(m, grads, [&](const std::string&, Matrix& mb, const Matrix& g) {
    for (std::size_t i = 0; i < mb.size(); ++i) {
      mb.flat()[i] = hyper.beta1 * mb.flat()[i] + (1.0 - hyper.beta1) * g.flat()[i];
    }
  });
  zip_blocks(v, grads, [&](const std::string&, Matrix& vb, const Matrix& g) {
    for (std::size_t i = 0; i < vb.size(); ++i) {
      const double gi = g.flat()[i];
      vb.flat()[i] = hyper.beta2 * vb.flat()[i] + (1.0 - hyper.beta2) * gi * gi;
    }
  });
  std::vector<const Matrix*> vs;
  v.visit([&](const std::string&, const Matrix& b) { vs.push_back(&b); });
  std::size_t bi = 0;
  zip_blocks(next, m, [&](const std::string& name, Matrix& p, const Matrix& mb) {
    const Matrix& vb = *vs[bi++];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double mhat = mb.flat()[i] / bc1;
      const double vhat = vb.flat()[i] / bc2;
      const double upd = hyper.lr * mhat / (std::sqrt(vhat) + hyper.eps);
      const double np = p.flat()[i] - upd;
      if (!std::isfinite(np)) {
        throw TrainingError("non-finite update in block " + name + " at step " +
                            std::to_string(t));
      }
      p.flat()[i] = np;
    }
  });
  params = std::move(next);
  state.m = std::move(m);
  state.v = std::move(v);
  state.step = t;
}

void accumulate(Gradients& dst, const Gradients& src, double scale) {
  zip_blocks(dst, src, [&](const std::string&, Matrix& d, const Matrix& s) {
    for (std::size_t i = 0; i < d.size(); ++i) d.flat()[i] += scale * s.flat()[i];
  });
}

double global_norm(const Params& p) {
  double s = 0.0;
  p.visit([&](const std::string&, const Matrix& m) {
    for (double v : m.flat()) s += v * v;
  });
  return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr const char* kCheckpointFormat = "refseq-checkpoint";
constexpr int kCheckpointVersion = 1;

Json params_to_json(const Params& p) {
  Json j = Json::object();
  p.visit([&](const std::string& name, const Matrix& m) {
    j[name] = Json{{"rows", m.rows()},
                   {"cols", m.cols()},
                   {"data", std::vector<double>(m.flat().begin(), m.flat().end())}};
  });
  return j;
}

Params params_from_json(const Json& j, const ModelConfig& cfg) {
  Params p = Params::zeros(cfg);
  p.visit([&](const std::string& name, Matrix& m) {
    if (!j.contains(name)) throw ConfigError("checkpoint is missing block " + name);
    const Json& b = j.at(name);
    if (b.at("rows").get<std::size_t>() != m.rows() ||
        b.at("cols").get<std::size_t>() != m.cols()) {
      throw ConfigError("checkpoint block " + name + " has the wrong shape");
    }
    const auto data = b.at("data").get<std::vector<double>>();
    if (data.size() != m.size()) {
      throw ConfigError("checkpoint block " + name + " has the wrong size");
    }
    std::copy(data.begin(), data.end(), m.flat().begin());
  });
  return p;
}

}  // namespace

std::string checkpoint_to_string(const Checkpoint& ck) {
  Json j;
  j["format"] = kCheckpointFormat;
  j["version"] = kCheckpointVersion;
  j["config"] = to_json(ck.config);
  j["params"] = params_to_json(ck.params);
  j["opt_state"] = Json{{"step", ck.opt.step},
                        {"m", params_to_json(ck.opt.m)},
                        {"v", params_to_json(ck.opt.v)}};
  return dump_canonical(j);
}

Checkpoint checkpoint_from_string(const std::string& text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
  try {
    if (j.at("format").get<std::string>() != kCheckpointFormat) {
      throw ConfigError("not a refseq checkpoint");
    }
    if (j.at("version").get<int>() != kCheckpointVersion) {
      throw ConfigError("unsupported checkpoint version");
    }
    Checkpoint ck;
    ck.config = model_config_from_json(j.at("config"));
    ck.params = params_from_json(j.at("params"), ck.config);
    const Json& os = j.at("opt_state");
    ck.opt.step = os.at("step").get<std::int64_t>();
    ck.opt.m = params_from_json(os.at("m"), ck.config);
    ck.opt.v = params_from_json(os.at("v"), ck.config);
    return ck;
  } catch (const Json::exception& e) {
    throw ConfigError(std::string("malformed checkpoint: ") + e.what());
  }
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  write_text_file(path, checkpoint_to_string(ck));
}

Checkpoint load_checkpoint(const std::string& path) {
  return checkpoint_from_string(read_text_file(path));
}

}  // namespace refseq
