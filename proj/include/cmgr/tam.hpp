#pragma once

// Texture amplification: a background color predicted from point features,
// the color alignment loss and the fused classification logits.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "cmgr/encoders.hpp"

namespace cmgr {

struct TamConfig {
  double hidden_ratio = 0.5;  // d_h / d_f
  double temperature = 1.0;

  Index hidden(Index dim) const {
    const auto h = static_cast<Index>(std::lround(hidden_ratio * static_cast<double>(dim)));
    if (h < 1) throw InvalidArgument("tam: hidden width must be >= 1");
    return h;
  }

  void validate() const {
    if (!(hidden_ratio > 0.0)) throw InvalidArgument("tam: hidden_ratio must be > 0");
    if (!(temperature > 0.0)) throw InvalidArgument("tam: temperature must be > 0");
  }
};

// c = (tanh(W2 relu(W1 F^P + b1) + b2) + 1) / 2
struct ColorGenerator {
  Linear l1;
  Linear l2;

  template <typename T>
  static ColorGenerator create(ParamStore<T>& store, Index dim, Index hidden, Rng& rng,
                               const std::string& prefix = "tam.color") {
    return {Linear::create(store, prefix + ".l1", dim, hidden, rng), Linear::create(store, prefix + ".l2", hidden, 3, rng)};
  }

  template <typename T>
  Var<T> operator()(ParamBinding<T>& pb, Var<T> fp) const {
    Var<T> z = l2(pb, ad::relu(l1(pb, fp)));
    return ad::affine(ad::tanh(z), T(0.5), T(0.5));
  }
};

template <typename T>
std::array<T, 3> synth_color(const ColorGenerator& gen, const ParamStore<T>& store, const RowVec<T>& fp) {
  if (!fp.allFinite()) throw InvalidArgument("synth_color: non-finite point feature");
  if (fp.cols() != gen.l1.in) throw InvalidArgument("synth_color: feature width mismatch");
  Mat<T> h = gen.l1.apply(store, Mat<T>(fp)).cwiseMax(T(0));
  Mat<T> z = gen.l2.apply(store, h);
  std::array<T, 3> c{};
  for (int i = 0; i < 3; ++i) c[static_cast<std::size_t>(i)] = (std::tanh(z(0, i)) + T(1)) / T(2);
  return c;
}

// (1/V) sum_i (1 - cos(F_i^E, F^T)) / 2, one view feature per row.
template <typename T>
Var<T> alignment_loss(Var<T> view_features, const RowVec<T>& prototype) {
  if (view_features.rows() < 1) throw InvalidArgument("alignment_loss: need at least one view");
  if (view_features.cols() != prototype.cols()) throw InvalidArgument("alignment_loss: width mismatch");
  const auto& f = view_features.value();
  for (Index r = 0; r < f.rows(); ++r) {
    if (!(f.row(r).norm() > T(0))) throw DegenerateInput("alignment_loss: zero-norm view feature");
  }
  if (!(prototype.norm() > T(0))) throw DegenerateInput("alignment_loss: zero-norm prototype");
  Tape<T>& t = *view_features.tape;
  Mat<T> p = (prototype / prototype.norm()).transpose();
  Var<T> cosines = ad::matmul(ad::row_normalize(view_features), t.constant(std::move(p)));
  return ad::affine(ad::mean_all(cosines), T(-0.5), T(0.5));
}

template <typename T>
T alignment_loss(const Mat<T>& view_features, const RowVec<T>& prototype) {
  Tape<T> tape;
  return alignment_loss(tape.constant(view_features), prototype).scalar();
}

struct LogitsBundle {
  RowVec<double> geometric;
  RowVec<double> visual;
  RowVec<double> total;
  std::vector<std::string> class_order;

  Index argmax() const {
    Index best = 0;
    total.maxCoeff(&best);
    return best;
  }
  const std::string& predicted() const { return class_order.at(static_cast<std::size_t>(argmax())); }
};

// Geometric term F^T . F_hat plus the zero-shot term over the enhanced images.
// With use_visual = false the visual term is all zeros.
template <typename T>
LogitsBundle fused_logits(const RowVec<T>& f_hat, const PrototypeMatrix& prototypes,
                          const std::vector<EnhancedImage>& images, const ForeignEncoder<T>& enc, double temperature,
                          bool use_visual = true) {
  if (f_hat.cols() != prototypes.rows.cols()) throw InvalidArgument("fused_logits: feature/prototype width mismatch");
  if (static_cast<Index>(prototypes.classes.size()) != prototypes.rows.rows()) {
    throw InvalidArgument("fused_logits: class count mismatch");
  }
  LogitsBundle b;
  b.class_order = prototypes.classes;
  b.geometric = f_hat.template cast<double>() * prototypes.rows.transpose();
  if (use_visual) {
    b.visual = zero_shot_logits(images, enc, prototypes, static_cast<T>(temperature)).template cast<double>();
    if (b.visual.cols() != b.geometric.cols()) throw InvalidArgument("fused_logits: class count mismatch");
  } else {
    b.visual = RowVec<double>::Zero(b.geometric.cols());
  }
  b.total = b.geometric + b.visual;
  return b;
}

}  // namespace cmgr
