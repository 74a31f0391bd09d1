#pragma once

// The full network: point encoder with rectified layers, masked self-attention
// layers, cross-view aggregation and the color generator, plus the per-sample
// inputs that do not depend on trainable parameters.

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cmgr/encoders.hpp"
#include "cmgr/projection.hpp"
#include "cmgr/sagr.hpp"
#include "cmgr/tam.hpp"

namespace cmgr {

struct RenderConfig {
  Index image_size = 64;
  std::size_t views = 4;
  Index splat = 3;

  void validate() const {
    if (image_size < 8 || views < 1 || splat < 1) throw InvalidArgument("render config: invalid sizes");
  }
};

struct LossConfig {
  double alpha_mc = 0.1;
  double beta_c = 0.1;
  bool lc_incremental = true;
};

struct ModelConfig {
  EncoderConfig encoder;
  RectifyConfig sagr;
  TamConfig tam;
  RenderConfig render;
  DepthStubConfig depth;
  VisionStubConfig vision;

  void validate() const {
    encoder.validate();
    sagr.validate(encoder.layers);
    tam.validate();
    render.validate();
    if (depth.layers != encoder.layers || depth.dim != encoder.dim) {
      throw InvalidArgument("depth stub must match the point encoder's depth and width");
    }
    if (vision.dim != encoder.dim) throw InvalidArgument("vision stub width must match the point encoder");
  }
};

// Frozen components shared by every network of a run.
template <typename T>
struct FrozenModels {
  DepthEncoderStub<T> depth;
  StubVisionEncoder<T> vision;

  explicit FrozenModels(const ModelConfig& cfg) : depth(cfg.depth), vision(cfg.vision) {}
};

// Everything about a sample that the trainable parameters never change.
template <typename T>
struct SampleInputs {
  std::string id;
  std::string label;
  PointGroups groups;
  Index height = 0;
  Index width = 0;
  std::vector<Mat<T>> gray;  // per view, (H*W) x 1
  std::vector<MaskMat> background;
  std::vector<Mat<T>> depth_layers;  // F^{D_i} for i in L_r, in config order
  RowVec<T> depth_final;
};

template <typename T>
SampleInputs<T> prepare_sample(const PointCloud& pc, const ModelConfig& cfg, const FrozenModels<T>& frozen) {
  SampleInputs<T> s;
  s.id = pc.id;
  s.label = pc.label;
  s.groups = group_points(pc, cfg.encoder.tokens);
  const auto maps = render_views(pc, camera_views(cfg.render.views), cfg.render.image_size, cfg.render.image_size,
                                 cfg.render.splat);
  s.height = cfg.render.image_size;
  s.width = cfg.render.image_size;
  for (const auto& m : maps) {
    s.gray.push_back(Eigen::Map<const Mat<double>>(m.pixels.data(), m.pixels.size(), 1).template cast<T>());
    s.background.push_back(detect_background(m).background);
  }
  auto feats = frozen.depth.encode(maps);
  for (Index l : cfg.sagr.layers) s.depth_layers.push_back(feats.intermediates.at(static_cast<std::size_t>(l)));
  s.depth_final = feats.final;
  return s;
}

template <typename T>
struct SampleForward {
  PointForward<T> point;
  Var<T> fp;
  Var<T> fu;
  Var<T> f_hat;
  Var<T> color;
  std::optional<Var<T>> view_features;  // V x d
  std::vector<Var<T>> pooled_u;         // per masked layer, 1 x d
  std::vector<Var<T>> pooled_mu;
  std::vector<Var<T>> cross_probs;      // attention over depth tokens, every head of every rectified layer
};

template <typename T>
struct CmgrNet {
  ModelConfig config;
  ParamStore<T> store;
  PointEncoder encoder;
  CrossProjections cross;
  std::vector<SelfMaskingLayer> masking;
  CrossViewAggregator aggregate;
  ColorGenerator color;

  static CmgrNet create(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    CmgrNet n;
    n.config = cfg;
    Rng rng(seed);
    const Index d = cfg.encoder.dim;
    n.encoder = PointEncoder::create(n.store, cfg.encoder, rng);
    n.cross = CrossProjections::create(n.store, cfg.sagr, d, rng);
    for (Index i = 0; i < cfg.sagr.sa_layers; ++i) {
      n.masking.push_back(SelfMaskingLayer::create(n.store, "sagr.mask" + std::to_string(i), d, rng));
    }
    n.aggregate = CrossViewAggregator::create(n.store, cfg.sagr, d, rng);
    n.color = ColorGenerator::create(n.store, d, cfg.tam.hidden(d), rng);
    return n;
  }

  // Point encoder pass with each layer routed through fuse_layer.
  PointForward<T> encode(ParamBinding<T>& pb, const SampleInputs<T>& in, std::vector<Var<T>>* cross_probs = nullptr) const {
    std::vector<Var<T>> depth;
    for (const auto& m : in.depth_layers) depth.push_back(pb.tape().constant(m));
    BlockOverride<T> hook = [&](std::size_t layer, Var<T> x) -> std::optional<Var<T>> {
      const auto li = static_cast<Index>(layer);
      const Var<T>* dp = nullptr;
      for (std::size_t k = 0; k < config.sagr.layers.size(); ++k) {
        if (config.sagr.layers[k] == li && k < depth.size()) dp = &depth[k];
      }
      std::vector<Var<T>> probs;
      Var<T> y = fuse_layer(pb, encoder.blocks[layer], x, dp, li, config.sagr, cross, cross_probs ? &probs : nullptr);
      if (cross_probs && config.sagr.rectified(li)) cross_probs->insert(cross_probs->end(), probs.begin(), probs.end());
      return y;
    };
    return encoder.encode(pb, in.groups, hook);
  }

  SampleForward<T> forward(ParamBinding<T>& pb, const SampleInputs<T>& in, const ForeignEncoder<T>* vision,
                           bool record_cross = false) const {
    Tape<T>& tape = pb.tape();
    SampleForward<T> f;
    f.point = encode(pb, in, record_cross ? &f.cross_probs : nullptr);
    f.fp = f.point.final;
    Var<T> x = f.point.last;
    for (const auto& layer : masking) {
      auto o = layer(pb, x, config.sagr);
      if (o.FMU) {
        f.pooled_u.push_back(ad::mean_rows(o.FU));
        f.pooled_mu.push_back(ad::mean_rows(*o.FMU));
      }
      x = o.next;
    }
    f.fu = ad::mean_rows(x);
    f.f_hat = aggregate(pb, f.fp, f.fu, tape.constant(Mat<T>(in.depth_final)));
    f.color = color(pb, f.fp);
    if (vision) {
      std::vector<Var<T>> feats;
      for (std::size_t v = 0; v < in.gray.size(); ++v) {
        Var<T> img = compose_enhanced(f.color, in.gray[v], in.background[v]);
        feats.push_back(vision->image_features(img, in.height, in.width));
      }
      f.view_features = ad::concat_rows(feats);
    }
    return f;
  }

  // Class scores 1 x C: F_hat . P^T plus, with view features, their mean
  // prototype score over views divided by the temperature.
  Var<T> logits(const SampleForward<T>& f, Var<T> prototypes) const {
    Var<T> geo = ad::matmul_nt(f.f_hat, prototypes);
    if (!f.view_features) return geo;
    Var<T> vis = ad::mean_rows(ad::matmul_nt(*f.view_features, prototypes));
    return ad::add(geo, ad::scale(vis, static_cast<T>(1.0 / config.tam.temperature)));
  }
};

template <typename T>
struct BatchLoss {
  Var<T> total;
  Var<T> ce;
  std::optional<Var<T>> mc;
  std::optional<Var<T>> lc;
};

// L = CE + alpha * L_mc + beta * L_c over one batch. `classes` fixes the
// logit order; every label must be among them.
template <typename T>
BatchLoss<T> batch_loss(ParamBinding<T>& pb, const CmgrNet<T>& net, const std::vector<const SampleInputs<T>*>& batch,
                        const PrototypeMatrix& classes, const ForeignEncoder<T>& vision, const LossConfig& loss,
                        bool use_lc) {
  if (batch.empty()) throw InvalidArgument("batch_loss: empty batch");
  Tape<T>& tape = pb.tape();
  const Mat<T> protos = classes.rows.template cast<T>();
  Var<T> pv = tape.constant(protos);
  const Index B = static_cast<Index>(batch.size());
  const Index C = protos.rows();
  std::vector<Var<T>> rows;
  std::vector<std::vector<Var<T>>> us(net.masking.size()), mus(net.masking.size());
  std::vector<Var<T>> lcs;
  Mat<T> onehot = Mat<T>::Zero(B, C);
  for (Index b = 0; b < B; ++b) {
    const auto& in = *batch[static_cast<std::size_t>(b)];
    const Index y = classes.index_of(in.label);
    onehot(b, y) = T(1);
    auto f = net.forward(pb, in, &vision);
    rows.push_back(net.logits(f, pv));
    for (std::size_t l = 0; l < f.pooled_u.size(); ++l) {
      us[l].push_back(f.pooled_u[l]);
      mus[l].push_back(f.pooled_mu[l]);
    }
    if (use_lc && loss.beta_c != 0.0) lcs.push_back(alignment_loss(*f.view_features, RowVec<T>(protos.row(y))));
  }
  BatchLoss<T> out;
  Var<T> lsm = ad::log_softmax_rows(ad::concat_rows(rows));
  out.ce = ad::scale(ad::sum_all(ad::mul_const(lsm, onehot)), T(-1) / static_cast<T>(B));
  out.total = out.ce;
  if (net.config.sagr.masked_branch && loss.alpha_mc != 0.0 && !us.empty() && !us.front().empty()) {
    std::vector<Var<T>> per_layer;
    for (std::size_t l = 0; l < us.size(); ++l) per_layer.push_back(mc_loss(ad::concat_rows(us[l]), ad::concat_rows(mus[l])));
    out.mc = ad::scale(ad::sum_all(ad::concat_cols(per_layer)), T(1) / static_cast<T>(per_layer.size()));
    out.total = ad::add(out.total, ad::scale(*out.mc, static_cast<T>(loss.alpha_mc)));
  }
  if (!lcs.empty()) {
    out.lc = ad::mean_all(ad::concat_cols(lcs));
    out.total = ad::add(out.total, ad::scale(*out.lc, static_cast<T>(loss.beta_c)));
  }
  return out;
}

template <typename T>
struct Inference {
  RowVec<T> fp;
  LogitsBundle logits;
};

// Forward pass without gradients; logits over `classes` in their order.
template <typename T>
Inference<T> infer(const CmgrNet<T>& net, const SampleInputs<T>& in, const ForeignEncoder<T>& vision,
                   const PrototypeMatrix& classes) {
  Tape<T> tape;
  ParamBinding<T> pb(tape, net.store);
  auto f = net.forward(pb, in, &vision);
  Var<T> pv = tape.constant(Mat<T>(classes.rows.template cast<T>()));
  Inference<T> r;
  r.fp = f.fp.value();
  r.logits.class_order = classes.classes;
  r.logits.geometric = ad::matmul_nt(f.f_hat, pv).value().template cast<double>();
  r.logits.visual = (ad::mean_rows(ad::matmul_nt(*f.view_features, pv)).value().template cast<double>()) /
                    net.config.tam.temperature;
  r.logits.total = r.logits.geometric + r.logits.visual;
  return r;
}

template <typename T>
RowVec<T> point_feature(const CmgrNet<T>& net, const SampleInputs<T>& in) {
  Tape<T> tape;
  ParamBinding<T> pb(tape, net.store);
  return net.encode(pb, in).final.value();
}

}  // namespace cmgr
