#pragma once

// Parameterized building blocks shared by the trainable encoder and the frozen
// stubs. Every block is a set of indices into a ParamStore, so copying a store
// copies the network and the handles stay valid.

#include <cmath>
#include <string>
#include <vector>

#include "cmgr/core/autodiff.hpp"

namespace cmgr {

template <typename T>
Mat<T> xavier_uniform(Index in, Index out, Rng& rng, double gain = 1.0) {
  const double a = gain * std::sqrt(6.0 / static_cast<double>(in + out));
  Mat<T> w(in, out);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<T>(rng.uniform(-a, a));
  return w;
}

struct Linear {
  std::size_t weight = 0;
  std::size_t bias = 0;
  bool has_bias = false;
  Index in = 0;
  Index out = 0;

  template <typename T>
  static Linear create(ParamStore<T>& store, const std::string& name, Index in, Index out, Rng& rng,
                       bool with_bias = true, double gain = 1.0) {
    Linear l;
    l.in = in;
    l.out = out;
    l.weight = store.add(name + ".weight", xavier_uniform<T>(in, out, rng, gain));
    l.has_bias = with_bias;
    if (with_bias) l.bias = store.add(name + ".bias", Mat<T>::Zero(1, out));
    return l;
  }

  template <typename T>
  Var<T> operator()(ParamBinding<T>& pb, Var<T> x) const {
    Var<T> y = ad::matmul(x, pb(weight));
    return has_bias ? ad::add_row(y, pb(bias)) : y;
  }

  // Plain evaluation without a tape.
  template <typename T>
  Mat<T> apply(const ParamStore<T>& store, const Mat<T>& x) const {
    Mat<T> y = x * store.value(weight);
    if (has_bias) y.rowwise() += store.value(bias).row(0);
    return y;
  }
};

struct LayerNorm {
  std::size_t gain = 0;
  std::size_t bias = 0;

  template <typename T>
  static LayerNorm create(ParamStore<T>& store, const std::string& name, Index dim) {
    LayerNorm ln;
    ln.gain = store.add(name + ".gain", Mat<T>::Ones(1, dim));
    ln.bias = store.add(name + ".bias", Mat<T>::Zero(1, dim));
    return ln;
  }

  template <typename T>
  Var<T> operator()(ParamBinding<T>& pb, Var<T> x) const {
    return ad::layer_norm(x, pb(gain), pb(bias));
  }
};

template <typename T>
struct AttentionOutput {
  Var<T> output;
  std::vector<Var<T>> probs;  // one row-stochastic matrix per head
};

// softmax(Q K^T / sqrt(d_k)) V, split into `heads` column groups.
template <typename T>
AttentionOutput<T> multi_head_attention(Var<T> q, Var<T> k, Var<T> v, Index heads) {
  if (heads <= 0 || q.cols() % heads != 0 || v.cols() % heads != 0) {
    throw InvalidArgument("attention: width not divisible by head count");
  }
  if (q.cols() != k.cols()) throw InvalidArgument("attention: query/key width mismatch");
  if (k.rows() != v.rows()) throw InvalidArgument("attention: key/value token count mismatch");
  const Index dk = q.cols() / heads;
  const Index dv = v.cols() / heads;
  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  AttentionOutput<T> res;
  std::vector<Var<T>> outs;
  for (Index h = 0; h < heads; ++h) {
    Var<T> qh = heads == 1 ? q : ad::slice_cols(q, h * dk, dk);
    Var<T> kh = heads == 1 ? k : ad::slice_cols(k, h * dk, dk);
    Var<T> vh = heads == 1 ? v : ad::slice_cols(v, h * dv, dv);
    Var<T> r = ad::softmax_rows(ad::matmul_nt(qh, kh, scale));
    res.probs.push_back(r);
    outs.push_back(ad::matmul(r, vh));
  }
  res.output = heads == 1 ? outs.front() : ad::concat_cols(outs);
  return res;
}

// Where keys and values come from: a normalization followed by two projections.
struct KeyValueProjection {
  LayerNorm norm;
  Linear key;
  Linear value;
};

// Pre-norm transformer block: x + O(Attn(...)), then x + FFN(LN(x)).
struct TransformerBlock {
  LayerNorm ln1;
  LayerNorm ln2;
  Linear query;
  Linear key;
  Linear value;
  Linear out;
  Linear ff1;
  Linear ff2;
  Index heads = 1;

  template <typename T>
  static TransformerBlock create(ParamStore<T>& store, const std::string& name, Index dim, Index heads,
                                 Index ffn_dim, Rng& rng, double residual_gain) {
    TransformerBlock b;
    b.heads = heads;
    b.ln1 = LayerNorm::create(store, name + ".ln1", dim);
    b.query = Linear::create(store, name + ".query", dim, dim, rng, false);
    b.key = Linear::create(store, name + ".key", dim, dim, rng, false);
    b.value = Linear::create(store, name + ".value", dim, dim, rng, false);
    b.out = Linear::create(store, name + ".out", dim, dim, rng, true, residual_gain);
    b.ln2 = LayerNorm::create(store, name + ".ln2", dim);
    b.ff1 = Linear::create(store, name + ".ff1", dim, ffn_dim, rng, true);
    b.ff2 = Linear::create(store, name + ".ff2", ffn_dim, dim, rng, true, residual_gain);
    return b;
  }

  KeyValueProjection self_projection() const { return {ln1, key, value}; }

  template <typename T>
  Var<T> forward(ParamBinding<T>& pb, Var<T> x, std::vector<Var<T>>* probs = nullptr) const {
    return forward_with(pb, x, x, self_projection(), probs);
  }

  // Queries from x, keys/values from `source` through `kv`.
  template <typename T>
  Var<T> forward_with(ParamBinding<T>& pb, Var<T> x, Var<T> source, const KeyValueProjection& kv,
                      std::vector<Var<T>>* probs = nullptr) const {
    Var<T> hq = ln1(pb, x);
    Var<T> hs = (source.id == x.id && kv.norm.gain == ln1.gain) ? hq : kv.norm(pb, source);
    auto attn = multi_head_attention(query(pb, hq), kv.key(pb, hs), kv.value(pb, hs), heads);
    if (probs) *probs = attn.probs;
    Var<T> x1 = ad::add(x, out(pb, attn.output));
    Var<T> h2 = ff2(pb, ad::relu(ff1(pb, ln2(pb, x1))));
    return ad::add(x1, h2);
  }
};

}  // namespace cmgr
