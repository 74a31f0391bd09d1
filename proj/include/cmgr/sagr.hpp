#pragma once

// Geometric rectification: depth-to-point cross-attention at selected encoder
// layers, self-masking attention with its consistency loss, and cross-view
// aggregation.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "cmgr/core/layers.hpp"

namespace cmgr {

enum class MaskDirection {
  suppress_top,  // zero the highest (1 - M_R) fraction of each row
  keep_top,      // zero the highest M_R fraction of each row
};

inline std::string to_string(MaskDirection d) { return d == MaskDirection::suppress_top ? "suppress_top" : "keep_top"; }

inline MaskDirection parse_mask_direction(const std::string& s) {
  if (s == "suppress_top") return MaskDirection::suppress_top;
  if (s == "keep_top") return MaskDirection::keep_top;
  throw InvalidArgument("unknown mask direction '" + s + "'");
}

struct RectifyConfig {
  std::vector<Index> layers{0, 4, 8};  // L_r
  double mask_ratio = 0.9;             // M_R
  Index sa_layers = 2;                 // N_sa
  double w = 1.0;
  double lambda_init = 1.0;
  MaskDirection direction = MaskDirection::suppress_top;
  bool masked_branch = true;

  bool rectified(Index layer) const { return std::find(layers.begin(), layers.end(), layer) != layers.end(); }

  void validate(Index encoder_layers) const {
    for (Index l : layers) {
      if (l < 0 || l >= encoder_layers) throw InvalidArgument("sagr: rectified layer index out of range");
    }
    if (!(mask_ratio > 0.0 && mask_ratio <= 1.0)) throw InvalidArgument("sagr: M_R must be in (0, 1]");
    if (sa_layers < 1) throw InvalidArgument("sagr: N_sa must be >= 1");
    if (!std::isfinite(w) || !std::isfinite(lambda_init)) throw InvalidArgument("sagr: w and lambda must be finite");
  }
};

// --- attention ------------------------------------------------------------

template <typename T>
struct AttentionRecord {
  Mat<T> R;
  Mat<T> RM;
  Mat<T> FU;
  Mat<T> FMU;
};

template <typename T>
struct AttentionResult {
  Mat<T> output;
  Mat<T> R;
};

template <typename T>
AttentionResult<T> attention(const Mat<T>& q, const Mat<T>& k, const Mat<T>& v) {
  if (q.cols() != k.cols()) throw InvalidArgument("attention: query/key width mismatch");
  if (k.rows() != v.rows()) throw InvalidArgument("attention: key/value token count mismatch");
  if (k.rows() == 0) throw InvalidArgument("attention: no keys");
  Tape<T> tape;
  auto res = multi_head_attention(tape.constant(q), tape.constant(k), tape.constant(v), 1);
  return {res.output.value(), res.probs.front().value()};
}

// Number of entries zeroed in a row of length k.
inline Index masked_count(Index k, double mask_ratio, MaskDirection dir = MaskDirection::suppress_top) {
  if (!(mask_ratio > 0.0 && mask_ratio <= 1.0)) throw InvalidArgument("mask ratio must be in (0, 1]");
  const double frac = dir == MaskDirection::suppress_top ? 1.0 - mask_ratio : mask_ratio;
  const auto z = static_cast<Index>(std::ceil(frac * static_cast<double>(k) - 1e-9));
  return std::clamp<Index>(z, 1, k);
}

// Keep-mask (1 kept, 0 zeroed). Per row the threshold is the value at rank
// masked_count in descending order; entries >= threshold are zeroed, so ties
// at the threshold are all zeroed.
template <typename T>
Mat<T> attention_mask(const Mat<T>& R, double mask_ratio, MaskDirection dir = MaskDirection::suppress_top) {
  const Index k = R.cols();
  const Index z = masked_count(k, mask_ratio, dir);
  Mat<T> keep(R.rows(), k);
  std::vector<T> row(static_cast<std::size_t>(k));
  for (Index r = 0; r < R.rows(); ++r) {
    for (Index c = 0; c < k; ++c) row[static_cast<std::size_t>(c)] = R(r, c);
    std::nth_element(row.begin(), row.begin() + (z - 1), row.end(), std::greater<T>());
    const T threshold = row[static_cast<std::size_t>(z - 1)];
    for (Index c = 0; c < k; ++c) keep(r, c) = R(r, c) >= threshold ? T(0) : T(1);
  }
  return keep;
}

template <typename T>
struct MaskedAttention {
  Mat<T> RM;
  Mat<T> FMU;
};

// R^M = R with the selected entries zeroed (no renormalization), F^MU = R^M V.
template <typename T>
MaskedAttention<T> masked_attention(const Mat<T>& R, const Mat<T>& V, double mask_ratio,
                                    MaskDirection dir = MaskDirection::suppress_top) {
  if (R.cols() != V.rows()) throw InvalidArgument("masked_attention: R columns must match V rows");
  MaskedAttention<T> m;
  m.RM = R.cwiseProduct(attention_mask(R, mask_ratio, dir));
  m.FMU = m.RM * V;
  return m;
}

// --- masked consistency loss ----------------------------------------------

// (1/B^2) sum_ij (cos(U_i, U_j) - cos(MU_i, MU_j))^2 over row vectors.
template <typename T>
Var<T> mc_loss(Var<T> U, Var<T> MU) {
  if (U.rows() != MU.rows() || U.cols() != MU.cols()) throw InvalidArgument("mc_loss: batch shape mismatch");
  if (U.rows() < 1) throw InvalidArgument("mc_loss: empty batch");
  Var<T> un = ad::row_normalize(U);
  Var<T> mn = ad::row_normalize(MU);
  Var<T> diff = ad::sub(ad::matmul_nt(un, un), ad::matmul_nt(mn, mn));
  return ad::mean_all(ad::square(diff));
}

template <typename T>
T mc_loss(const Mat<T>& U, const Mat<T>& MU) {
  Tape<T> tape;
  return mc_loss(tape.constant(U), tape.constant(MU)).scalar();
}

// --- rectified encoder layers ---------------------------------------------

// One key/value projection per rectified layer, in the order of cfg.layers.
struct CrossProjections {
  std::vector<Index> layers;
  std::vector<KeyValueProjection> kv;

  template <typename T>
  static CrossProjections create(ParamStore<T>& store, const RectifyConfig& cfg, Index dim, Rng& rng,
                                 const std::string& prefix = "sagr.cross") {
    CrossProjections c;
    for (Index l : cfg.layers) {
      const std::string n = prefix + std::to_string(l);
      c.layers.push_back(l);
      c.kv.push_back({LayerNorm::create(store, n + ".norm", dim), Linear::create(store, n + ".key", dim, dim, rng, false),
                      Linear::create(store, n + ".value", dim, dim, rng, false)});
    }
    return c;
  }

  const KeyValueProjection* find(Index layer) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i] == layer) return &kv[i];
    }
    return nullptr;
  }
};

// F^{P_{i+1}} from F^{P_i}: cross-attention over `depth` when layer i is
// rectified, otherwise the block's own self-attention. `depth` may be null
// for unrectified layers.
template <typename T>
Var<T> fuse_layer(ParamBinding<T>& pb, const TransformerBlock& block, Var<T> x, const Var<T>* depth, Index layer,
                  const RectifyConfig& cfg, const CrossProjections& cross, std::vector<Var<T>>* probs = nullptr) {
  if (!cfg.rectified(layer)) return block.forward(pb, x, probs);
  if (depth == nullptr) throw StateError("fuse_layer: rectified layer " + std::to_string(layer) + " has no depth features");
  if (depth->cols() != x.cols()) throw InvalidArgument("fuse_layer: depth feature width mismatch");
  const KeyValueProjection* kv = cross.find(layer);
  if (kv == nullptr) throw StateError("fuse_layer: no cross projection for layer " + std::to_string(layer));
  return block.forward_with(pb, x, *depth, *kv, probs);
}

// Single-head self-attention layer carrying the masked branch.
struct SelfMaskingLayer {
  LayerNorm norm;
  Linear query;
  Linear key;
  Linear value;

  template <typename T>
  static SelfMaskingLayer create(ParamStore<T>& store, const std::string& name, Index dim, Rng& rng) {
    return {LayerNorm::create(store, name + ".norm", dim), Linear::create(store, name + ".query", dim, dim, rng, false),
            Linear::create(store, name + ".key", dim, dim, rng, false),
            Linear::create(store, name + ".value", dim, dim, rng, false, 0.5)};
  }

  template <typename T>
  struct Output {
    Var<T> next;  // x + F^U
    Var<T> FU;
    std::optional<Var<T>> FMU;
    Var<T> R;
  };

  template <typename T>
  Output<T> operator()(ParamBinding<T>& pb, Var<T> x, const RectifyConfig& cfg) const {
    Var<T> h = norm(pb, x);
    Var<T> v = value(pb, h);
    auto attn = multi_head_attention(query(pb, h), key(pb, h), v, 1);
    Output<T> o{ad::add(x, attn.output), attn.output, std::nullopt, attn.probs.front()};
    if (cfg.masked_branch) {
      Var<T> rm = ad::mul_const(o.R, attention_mask(o.R.value(), cfg.mask_ratio, cfg.direction));
      o.FMU = ad::matmul(rm, v);
    }
    return o;
  }
};

// F_hat = f((f'([F^P, F^U]) + w F^D) * lambda).
struct CrossViewAggregator {
  Linear f_prime;
  Linear f;
  std::size_t lambda = 0;
  double w = 1.0;

  template <typename T>
  static CrossViewAggregator create(ParamStore<T>& store, const RectifyConfig& cfg, Index dim, Rng& rng,
                                    const std::string& prefix = "sagr.aggregate") {
    CrossViewAggregator a;
    a.f_prime = Linear::create(store, prefix + ".f_prime", 2 * dim, dim, rng);
    a.f = Linear::create(store, prefix + ".f", dim, dim, rng);
    a.lambda = store.add(prefix + ".lambda", Mat<T>::Constant(1, dim, static_cast<T>(cfg.lambda_init)));
    a.w = cfg.w;
    return a;
  }

  template <typename T>
  Var<T> operator()(ParamBinding<T>& pb, Var<T> fp, Var<T> fu, Var<T> fd) const {
    const Index d = f.out;
    if (fp.cols() != d || fu.cols() != d || fd.cols() != d || fp.rows() != 1 || fu.rows() != 1 || fd.rows() != 1) {
      throw InvalidArgument("cross_view_aggregate: expected three 1 x d_f vectors");
    }
    Var<T> mixed = ad::add(f_prime(pb, ad::concat_cols<T>({fp, fu})), ad::scale(fd, static_cast<T>(w)));
    return f(pb, ad::mul_row(mixed, pb(lambda)));
  }
};

}  // namespace cmgr
