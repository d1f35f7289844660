#include "aftune/layers.hpp"

#include <atomic>
#include <cmath>
#include <limits>

#include "aftune/rng.hpp"

namespace aftune {

namespace {

std::atomic<bool> g_force_deterministic{false};
// Advances on every non-deterministic forward call, so repeated executions in
// one process see different perturbations.
std::atomic<std::uint64_t> g_execution_counter{0};

constexpr double kLayerNormEps = 1e-5;

template <typename Real>
const BasicTensor<Real>& param(const Layer<Real>& layer, std::size_t k) {
  return layer.params.at(k).value;
}

Shape with_last_dim(const Shape& s, std::size_t last) {
  Shape out = s.empty() ? Shape{1} : s;
  out.back() = last;
  return out;
}

template <typename Real>
void check_width(const LayerSpec& spec, std::size_t index, const BasicTensor<Real>& x) {
  const std::size_t want = spec.input_width();
  if (x.empty()) throw ShapeError(index, "empty input");
  if (want != 0 && x.last_dim() != want) {
    throw ShapeError(index, to_string(spec.kind) + " expects last dimension " +
                                std::to_string(want) + ", got shape " + shape_string(x.shape));
  }
}

template <typename Real>
void jitter_if_nondeterministic(const LayerSpec& spec, BasicTensor<Real>& y) {
  if (spec.deterministic || force_deterministic()) return;
  const std::uint64_t call = g_execution_counter.fetch_add(1, std::memory_order_relaxed);
  CounterRng rng(call, RngPurpose::nondeterminism);
  const Real scale = Real{4} * std::numeric_limits<Real>::epsilon();
  for (Real& v : y.data) {
    const Real sign = (rng.next_u64() & 1U) ? Real{1} : Real{-1};
    v += v * scale * sign;
  }
}

// ---- linear -----------------------------------------------------------------

template <typename Real>
BasicTensor<Real> linear_forward(const Layer<Real>& layer, const BasicTensor<Real>& x) {
  const auto& w = param(layer, 0);
  const auto& b = param(layer, 1);
  const std::size_t in = layer.spec.in;
  const std::size_t out = layer.spec.out;
  const std::size_t rows = x.size() / in;
  BasicTensor<Real> y(with_last_dim(x.shape, out));
  for (std::size_t n = 0; n < rows; ++n) {
    for (std::size_t o = 0; o < out; ++o) {
      Real acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += x[n * in + i] * w[o * in + i];
      y[n * out + o] = acc;
    }
  }
  return y;
}

template <typename Real>
LayerGrads<Real> linear_backward(const Layer<Real>& layer, const LayerCache<Real>& cache,
                                 const BasicTensor<Real>& dy) {
  const auto& w = param(layer, 0);
  const auto& x = cache.input;
  const std::size_t in = layer.spec.in;
  const std::size_t out = layer.spec.out;
  const std::size_t rows = x.size() / in;
  LayerGrads<Real> g;
  g.input_grad = BasicTensor<Real>(x.shape);
  BasicTensor<Real> dw(w.shape);
  BasicTensor<Real> db({out});
  for (std::size_t n = 0; n < rows; ++n) {
    for (std::size_t i = 0; i < in; ++i) {
      Real acc = 0;
      for (std::size_t o = 0; o < out; ++o) acc += dy[n * out + o] * w[o * in + i];
      g.input_grad[n * in + i] = acc;
    }
  }
  for (std::size_t o = 0; o < out; ++o) {
    for (std::size_t i = 0; i < in; ++i) {
      Real acc = 0;
      for (std::size_t n = 0; n < rows; ++n) acc += dy[n * out + o] * x[n * in + i];
      dw[o * in + i] = acc;
    }
    Real acc = 0;
    for (std::size_t n = 0; n < rows; ++n) acc += dy[n * out + o];
    db[o] = acc;
  }
  g.param_grads = {std::move(dw), std::move(db)};
  return g;
}

// ---- relu -------------------------------------------------------------------

template <typename Real>
BasicTensor<Real> relu_forward(const BasicTensor<Real>& x) {
  BasicTensor<Real> y(x.shape);
  for (std::size_t k = 0; k < x.size(); ++k) y[k] = x[k] > Real{0} ? x[k] : Real{0};
  return y;
}

template <typename Real>
LayerGrads<Real> relu_backward(const LayerCache<Real>& cache, const BasicTensor<Real>& dy) {
  LayerGrads<Real> g;
  g.input_grad = BasicTensor<Real>(cache.input.shape);
  for (std::size_t k = 0; k < dy.size(); ++k) {
    g.input_grad[k] = cache.input[k] > Real{0} ? dy[k] : Real{0};
  }
  return g;
}

// ---- layer norm -------------------------------------------------------------

template <typename Real>
BasicTensor<Real> layer_norm_forward(const Layer<Real>& layer, const BasicTensor<Real>& x,
                                     LayerCache<Real>* cache) {
  const auto& gamma = param(layer, 0);
  const auto& beta = param(layer, 1);
  const std::size_t f = layer.spec.features;
  const std::size_t rows = x.size() / f;
  const Real eps = static_cast<Real>(kLayerNormEps);
  BasicTensor<Real> y(x.shape);
  BasicTensor<Real> xhat(x.shape);
  BasicTensor<Real> inv_std({rows});
  for (std::size_t n = 0; n < rows; ++n) {
    const Real* row = &x.data[n * f];
    Real sum = 0;
    for (std::size_t k = 0; k < f; ++k) sum += row[k];
    const Real mean = sum / static_cast<Real>(f);
    Real var = 0;
    for (std::size_t k = 0; k < f; ++k) var += (row[k] - mean) * (row[k] - mean);
    var /= static_cast<Real>(f);
    const Real inv = Real{1} / std::sqrt(var + eps);
    inv_std[n] = inv;
    for (std::size_t k = 0; k < f; ++k) {
      const Real h = (row[k] - mean) * inv;
      xhat[n * f + k] = h;
      y[n * f + k] = h * gamma[k] + beta[k];
    }
  }
  if (cache) cache->saved = {std::move(xhat), std::move(inv_std)};
  return y;
}

template <typename Real>
LayerGrads<Real> layer_norm_backward(const Layer<Real>& layer, const LayerCache<Real>& cache,
                                     const BasicTensor<Real>& dy) {
  const auto& gamma = param(layer, 0);
  const auto& xhat = cache.saved.at(0);
  const auto& inv_std = cache.saved.at(1);
  const std::size_t f = layer.spec.features;
  const std::size_t rows = dy.size() / f;
  LayerGrads<Real> g;
  g.input_grad = BasicTensor<Real>(cache.input.shape);
  BasicTensor<Real> dgamma({f});
  BasicTensor<Real> dbeta({f});
  std::vector<Real> dxhat(f);
  for (std::size_t n = 0; n < rows; ++n) {
    Real s1 = 0;
    Real s2 = 0;
    for (std::size_t k = 0; k < f; ++k) {
      dxhat[k] = dy[n * f + k] * gamma[k];
      s1 += dxhat[k];
      s2 += dxhat[k] * xhat[n * f + k];
    }
    const Real scale = inv_std[n] / static_cast<Real>(f);
    for (std::size_t k = 0; k < f; ++k) {
      g.input_grad[n * f + k] =
          scale * (static_cast<Real>(f) * dxhat[k] - s1 - xhat[n * f + k] * s2);
    }
  }
  for (std::size_t k = 0; k < f; ++k) {
    Real ag = 0;
    Real ab = 0;
    for (std::size_t n = 0; n < rows; ++n) {
      ag += dy[n * f + k] * xhat[n * f + k];
      ab += dy[n * f + k];
    }
    dgamma[k] = ag;
    dbeta[k] = ab;
  }
  g.param_grads = {std::move(dgamma), std::move(dbeta)};
  return g;
}

// ---- single-head attention --------------------------------------------------
//
// Each row of the input holds `seq` tokens of width `dim`. Per row:
//   Q = X Wqᵀ, K = X Wkᵀ, V = X Wvᵀ, A = softmax(Q Kᵀ / √dim), Y = (A V) Woᵀ.

template <typename Real>
void project(const Real* x, const BasicTensor<Real>& w, std::size_t s_len, std::size_t d,
             Real* out) {
  for (std::size_t s = 0; s < s_len; ++s) {
    for (std::size_t e = 0; e < d; ++e) {
      Real acc = 0;
      for (std::size_t k = 0; k < d; ++k) acc += x[s * d + k] * w[e * d + k];
      out[s * d + e] = acc;
    }
  }
}

template <typename Real>
BasicTensor<Real> attention_forward(const Layer<Real>& layer, const BasicTensor<Real>& x,
                                    LayerCache<Real>* cache) {
  const std::size_t S = layer.spec.seq;
  const std::size_t D = layer.spec.dim;
  const std::size_t rows = x.size() / (S * D);
  const Real scale = Real{1} / std::sqrt(static_cast<Real>(D));
  BasicTensor<Real> q({rows, S, D}), k({rows, S, D}), v({rows, S, D}), o({rows, S, D});
  BasicTensor<Real> a({rows, S, S});
  BasicTensor<Real> y(x.shape);
  for (std::size_t n = 0; n < rows; ++n) {
    const Real* xr = &x.data[n * S * D];
    Real* qr = &q.data[n * S * D];
    Real* kr = &k.data[n * S * D];
    Real* vr = &v.data[n * S * D];
    Real* orow = &o.data[n * S * D];
    Real* ar = &a.data[n * S * S];
    project(xr, param(layer, 0), S, D, qr);
    project(xr, param(layer, 1), S, D, kr);
    project(xr, param(layer, 2), S, D, vr);
    for (std::size_t s = 0; s < S; ++s) {
      Real mx = -std::numeric_limits<Real>::infinity();
      for (std::size_t u = 0; u < S; ++u) {
        Real acc = 0;
        for (std::size_t e = 0; e < D; ++e) acc += qr[s * D + e] * kr[u * D + e];
        ar[s * S + u] = acc * scale;
        if (ar[s * S + u] > mx) mx = ar[s * S + u];
      }
      Real z = 0;
      for (std::size_t u = 0; u < S; ++u) {
        ar[s * S + u] = std::exp(ar[s * S + u] - mx);
        z += ar[s * S + u];
      }
      for (std::size_t u = 0; u < S; ++u) ar[s * S + u] /= z;
      for (std::size_t e = 0; e < D; ++e) {
        Real acc = 0;
        for (std::size_t u = 0; u < S; ++u) acc += ar[s * S + u] * vr[u * D + e];
        orow[s * D + e] = acc;
      }
    }
    project(orow, param(layer, 3), S, D, &y.data[n * S * D]);
  }
  if (cache) cache->saved = {std::move(q), std::move(k), std::move(v), std::move(a), std::move(o)};
  return y;
}

template <typename Real>
LayerGrads<Real> attention_backward(const Layer<Real>& layer, const LayerCache<Real>& cache,
                                    const BasicTensor<Real>& dy) {
  const std::size_t S = layer.spec.seq;
  const std::size_t D = layer.spec.dim;
  const auto& x = cache.input;
  const std::size_t rows = x.size() / (S * D);
  const Real scale = Real{1} / std::sqrt(static_cast<Real>(D));
  const auto& wq = param(layer, 0);
  const auto& wk = param(layer, 1);
  const auto& wv = param(layer, 2);
  const auto& wo = param(layer, 3);
  const auto& q = cache.saved.at(0);
  const auto& k = cache.saved.at(1);
  const auto& v = cache.saved.at(2);
  const auto& a = cache.saved.at(3);
  const auto& o = cache.saved.at(4);

  LayerGrads<Real> g;
  g.input_grad = BasicTensor<Real>(x.shape);
  BasicTensor<Real> dwq({D, D}), dwk({D, D}), dwv({D, D}), dwo({D, D});
  std::vector<Real> d_o(S * D), d_a(S * S), d_s(S * S), d_q(S * D), d_k(S * D), d_v(S * D);

  for (std::size_t n = 0; n < rows; ++n) {
    const Real* xr = &x.data[n * S * D];
    const Real* dyr = &dy.data[n * S * D];
    const Real* qr = &q.data[n * S * D];
    const Real* kr = &k.data[n * S * D];
    const Real* vr = &v.data[n * S * D];
    const Real* ar = &a.data[n * S * S];
    const Real* orow = &o.data[n * S * D];

    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t e = 0; e < D; ++e) {
        Real acc = 0;
        for (std::size_t c = 0; c < D; ++c) acc += dyr[s * D + c] * wo[c * D + e];
        d_o[s * D + e] = acc;
      }
    }
    for (std::size_t c = 0; c < D; ++c) {
      for (std::size_t e = 0; e < D; ++e) {
        Real acc = 0;
        for (std::size_t s = 0; s < S; ++s) acc += dyr[s * D + c] * orow[s * D + e];
        dwo[c * D + e] += acc;
      }
    }
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t u = 0; u < S; ++u) {
        Real acc = 0;
        for (std::size_t e = 0; e < D; ++e) acc += d_o[s * D + e] * vr[u * D + e];
        d_a[s * S + u] = acc;
      }
    }
    for (std::size_t u = 0; u < S; ++u) {
      for (std::size_t e = 0; e < D; ++e) {
        Real acc = 0;
        for (std::size_t s = 0; s < S; ++s) acc += ar[s * S + u] * d_o[s * D + e];
        d_v[u * D + e] = acc;
      }
    }
    for (std::size_t s = 0; s < S; ++s) {
      Real dot = 0;
      for (std::size_t w = 0; w < S; ++w) dot += ar[s * S + w] * d_a[s * S + w];
      for (std::size_t u = 0; u < S; ++u) {
        d_s[s * S + u] = ar[s * S + u] * (d_a[s * S + u] - dot) * scale;
      }
    }
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t e = 0; e < D; ++e) {
        Real acc = 0;
        for (std::size_t u = 0; u < S; ++u) acc += d_s[s * S + u] * kr[u * D + e];
        d_q[s * D + e] = acc;
      }
    }
    for (std::size_t u = 0; u < S; ++u) {
      for (std::size_t e = 0; e < D; ++e) {
        Real acc = 0;
        for (std::size_t s = 0; s < S; ++s) acc += d_s[s * S + u] * qr[s * D + e];
        d_k[u * D + e] = acc;
      }
    }
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t c = 0; c < D; ++c) {
        Real aq = 0;
        Real ak = 0;
        Real av = 0;
        for (std::size_t e = 0; e < D; ++e) {
          aq += d_q[s * D + e] * wq[e * D + c];
          ak += d_k[s * D + e] * wk[e * D + c];
          av += d_v[s * D + e] * wv[e * D + c];
        }
        g.input_grad[n * S * D + s * D + c] = aq + ak + av;
      }
    }
    for (std::size_t e = 0; e < D; ++e) {
      for (std::size_t c = 0; c < D; ++c) {
        Real aq = 0;
        Real ak = 0;
        Real av = 0;
        for (std::size_t s = 0; s < S; ++s) {
          aq += d_q[s * D + e] * xr[s * D + c];
          ak += d_k[s * D + e] * xr[s * D + c];
          av += d_v[s * D + e] * xr[s * D + c];
        }
        dwq[e * D + c] += aq;
        dwk[e * D + c] += ak;
        dwv[e * D + c] += av;
      }
    }
  }
  g.param_grads = {std::move(dwq), std::move(dwk), std::move(dwv), std::move(dwo)};
  return g;
}

// ---- softmax cross-entropy head ---------------------------------------------

template <typename Real>
std::size_t label_at(const BasicTensor<Real>& labels, std::size_t n, std::size_t classes,
                     std::size_t index) {
  const Real v = labels[n];
  if (!(v >= Real{0}) || v != std::floor(v) || static_cast<std::size_t>(v) >= classes) {
    throw ShapeError(index, "label " + std::to_string(static_cast<double>(v)) +
                                " outside [0, " + std::to_string(classes) + ")");
  }
  return static_cast<std::size_t>(v);
}

template <typename Real>
BasicTensor<Real> softmax_rows(const BasicTensor<Real>& z, std::size_t classes) {
  BasicTensor<Real> p(z.shape);
  const std::size_t rows = z.size() / classes;
  for (std::size_t n = 0; n < rows; ++n) {
    Real mx = z[n * classes];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, z[n * classes + c]);
    Real sum = 0;
    for (std::size_t c = 0; c < classes; ++c) {
      p[n * classes + c] = std::exp(z[n * classes + c] - mx);
      sum += p[n * classes + c];
    }
    for (std::size_t c = 0; c < classes; ++c) p[n * classes + c] /= sum;
  }
  return p;
}

template <typename Real>
BasicTensor<Real> xent_forward(const Layer<Real>& layer, std::size_t index,
                               const BasicTensor<Real>& z, const BasicTensor<Real>* labels,
                               LayerCache<Real>* cache) {
  const std::size_t classes = layer.spec.classes;
  const std::size_t rows = z.size() / classes;
  BasicTensor<Real> p = softmax_rows(z, classes);
  if (!labels) {
    if (cache) cache->saved = {p};
    return p;
  }
  if (labels->size() != rows) {
    throw ShapeError(index, "expected " + std::to_string(rows) + " labels, got " +
                                std::to_string(labels->size()));
  }
  Real total = 0;
  for (std::size_t n = 0; n < rows; ++n) {
    const std::size_t y = label_at(*labels, n, classes, index);
    Real mx = z[n * classes];
    for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, z[n * classes + c]);
    Real sum = 0;
    for (std::size_t c = 0; c < classes; ++c) sum += std::exp(z[n * classes + c] - mx);
    total += (mx + std::log(sum)) - z[n * classes + y];
  }
  if (cache) {
    cache->saved = {std::move(p)};
    cache->labels = *labels;
  }
  return BasicTensor<Real>({1}, {total / static_cast<Real>(rows)});
}

template <typename Real>
LayerGrads<Real> xent_backward(const Layer<Real>& layer, std::size_t index,
                               const LayerCache<Real>& cache, const BasicTensor<Real>& dy) {
  const std::size_t classes = layer.spec.classes;
  const auto& p = cache.saved.at(0);
  const std::size_t rows = p.size() / classes;
  LayerGrads<Real> g;
  g.input_grad = BasicTensor<Real>(cache.input.shape);
  if (!cache.labels.empty()) {
    if (dy.size() != 1) throw ShapeError(index, "loss gradient must have one element");
    const Real coeff = dy[0] / static_cast<Real>(rows);
    for (std::size_t n = 0; n < rows; ++n) {
      const std::size_t y = label_at(cache.labels, n, classes, index);
      for (std::size_t c = 0; c < classes; ++c) {
        const Real target = c == y ? Real{1} : Real{0};
        g.input_grad[n * classes + c] = coeff * (p[n * classes + c] - target);
      }
    }
    return g;
  }
  for (std::size_t n = 0; n < rows; ++n) {
    Real dot = 0;
    for (std::size_t c = 0; c < classes; ++c) dot += p[n * classes + c] * dy[n * classes + c];
    for (std::size_t c = 0; c < classes; ++c) {
      g.input_grad[n * classes + c] = p[n * classes + c] * (dy[n * classes + c] - dot);
    }
  }
  return g;
}

}  // namespace

void set_force_deterministic(bool on) { g_force_deterministic.store(on); }
bool force_deterministic() { return g_force_deterministic.load(); }

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::linear: return "linear";
    case LayerKind::relu: return "relu";
    case LayerKind::layer_norm: return "layer-norm";
    case LayerKind::attention: return "attention";
    case LayerKind::softmax_xent: return "softmax-xent";
  }
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (auto k : {LayerKind::linear, LayerKind::relu, LayerKind::layer_norm, LayerKind::attention,
                 LayerKind::softmax_xent}) {
    if (to_string(k) == s) return k;
  }
  throw ConfigError("unknown layer kind '" + s + "'");
}

LayerSpec LayerSpec::linear(std::size_t in, std::size_t out) {
  LayerSpec s;
  s.kind = LayerKind::linear;
  s.in = in;
  s.out = out;
  return s;
}

LayerSpec LayerSpec::relu(std::size_t features) {
  LayerSpec s;
  s.kind = LayerKind::relu;
  s.features = features;
  return s;
}

LayerSpec LayerSpec::layer_norm(std::size_t features) {
  LayerSpec s;
  s.kind = LayerKind::layer_norm;
  s.features = features;
  return s;
}

LayerSpec LayerSpec::attention(std::size_t seq, std::size_t dim) {
  LayerSpec s;
  s.kind = LayerKind::attention;
  s.seq = seq;
  s.dim = dim;
  return s;
}

LayerSpec LayerSpec::softmax_xent(std::size_t classes) {
  LayerSpec s;
  s.kind = LayerKind::softmax_xent;
  s.classes = classes;
  return s;
}

std::size_t LayerSpec::input_width() const {
  switch (kind) {
    case LayerKind::linear: return in;
    case LayerKind::relu: return features;
    case LayerKind::layer_norm: return features;
    case LayerKind::attention: return seq * dim;
    case LayerKind::softmax_xent: return classes;
  }
  return 0;
}

std::vector<ParamSpec> LayerSpec::param_specs() const {
  switch (kind) {
    case LayerKind::linear: return {{"weight", {out, in}}, {"bias", {out}}};
    case LayerKind::layer_norm: return {{"gamma", {features}}, {"beta", {features}}};
    case LayerKind::attention:
      return {{"wq", {dim, dim}}, {"wk", {dim, dim}}, {"wv", {dim, dim}}, {"wo", {dim, dim}}};
    case LayerKind::relu:
    case LayerKind::softmax_xent: return {};
  }
  return {};
}

template <typename Real>
std::size_t Layer<Real>::param_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.value.size();
  return n;
}

template <typename Real>
Layer<Real> init_layer(const LayerSpec& spec, std::uint64_t seed, std::size_t layer_index) {
  Layer<Real> layer;
  layer.spec = spec;
  const auto specs = spec.param_specs();
  for (std::size_t k = 0; k < specs.size(); ++k) {
    BasicTensor<Real> t(specs[k].shape);
    CounterRng rng(seed, RngPurpose::init, layer_index, k);
    if (spec.kind == LayerKind::layer_norm) {
      const Real fill = specs[k].name == "gamma" ? Real{1} : Real{0};
      for (Real& v : t.data) v = fill;
    } else {
      const std::size_t fan_in = spec.kind == LayerKind::linear ? spec.in : spec.dim;
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (Real& v : t.data) v = static_cast<Real>(rng.uniform(-bound, bound));
    }
    layer.params.push_back({specs[k].name, std::move(t)});
  }
  return layer;
}

template <typename Real>
BasicTensor<Real> layer_forward(const Layer<Real>& layer, std::size_t index,
                                const BasicTensor<Real>& x, const BasicTensor<Real>* labels,
                                LayerCache<Real>* cache) {
  check_width(layer.spec, index, x);
  if (layer.params.size() != layer.spec.param_specs().size()) {
    throw ShapeError(index, "parameter list does not match layer kind");
  }
  if (cache) {
    *cache = LayerCache<Real>{};
    cache->input = x;
  }
  BasicTensor<Real> y;
  switch (layer.spec.kind) {
    case LayerKind::linear: y = linear_forward(layer, x); break;
    case LayerKind::relu: y = relu_forward(x); break;
    case LayerKind::layer_norm: y = layer_norm_forward(layer, x, cache); break;
    case LayerKind::attention: y = attention_forward(layer, x, cache); break;
    case LayerKind::softmax_xent: y = xent_forward(layer, index, x, labels, cache); break;
  }
  jitter_if_nondeterministic(layer.spec, y);
  if (cache) cache->valid = true;
  return y;
}

template <typename Real>
LayerGrads<Real> layer_backward(const Layer<Real>& layer, std::size_t index,
                                const LayerCache<Real>& cache, const BasicTensor<Real>& dy) {
  if (!cache.valid) throw ShapeError(index, "backward called without a forward cache");
  const bool loss_head = layer.spec.kind == LayerKind::softmax_xent && !cache.labels.empty();
  if (!loss_head && dy.shape != cache.input.shape && layer.spec.kind != LayerKind::linear) {
    throw ShapeError(index, "upstream gradient shape " + shape_string(dy.shape) +
                                " does not match " + shape_string(cache.input.shape));
  }
  if (layer.spec.kind == LayerKind::linear &&
      dy.size() != cache.input.rows() * layer.spec.out) {
    throw ShapeError(index, "upstream gradient shape " + shape_string(dy.shape) +
                                " does not match layer output");
  }
  switch (layer.spec.kind) {
    case LayerKind::linear: return linear_backward(layer, cache, dy);
    case LayerKind::relu: return relu_backward(cache, dy);
    case LayerKind::layer_norm: return layer_norm_backward(layer, cache, dy);
    case LayerKind::attention: return attention_backward(layer, cache, dy);
    case LayerKind::softmax_xent: return xent_backward(layer, index, cache, dy);
  }
  throw ShapeError(index, "unknown layer kind");
}

template <typename Real>
BasicTensor<Real> flatten_params(const Layer<Real>& layer) {
  std::vector<BasicTensor<Real>> parts;
  for (const auto& p : layer.params) parts.push_back(p.value);
  return flatten_concat<Real>(parts);
}

template <typename Real>
void unflatten_params(Layer<Real>& layer, const BasicTensor<Real>& flat) {
  if (flat.size() != layer.param_count()) {
    throw ConfigError("flat parameter vector has " + std::to_string(flat.size()) +
                      " elements, layer needs " + std::to_string(layer.param_count()));
  }
  std::size_t off = 0;
  for (auto& p : layer.params) {
    std::copy_n(flat.data.begin() + static_cast<std::ptrdiff_t>(off), p.value.size(),
                p.value.data.begin());
    off += p.value.size();
  }
}

#define AFTUNE_INSTANTIATE(Real)                                                              \
  template struct Layer<Real>;                                                                \
  template Layer<Real> init_layer<Real>(const LayerSpec&, std::uint64_t, std::size_t);        \
  template BasicTensor<Real> layer_forward<Real>(const Layer<Real>&, std::size_t,             \
                                                 const BasicTensor<Real>&,                    \
                                                 const BasicTensor<Real>*, LayerCache<Real>*); \
  template LayerGrads<Real> layer_backward<Real>(const Layer<Real>&, std::size_t,             \
                                                 const LayerCache<Real>&,                     \
                                                 const BasicTensor<Real>&);                   \
  template BasicTensor<Real> flatten_params<Real>(const Layer<Real>&);                        \
  template void unflatten_params<Real>(Layer<Real>&, const BasicTensor<Real>&);

AFTUNE_INSTANTIATE(float)
AFTUNE_INSTANTIATE(double)

#undef AFTUNE_INSTANTIATE

}  // namespace aftune
