#pragma once

// Base/novel discriminator: a small binary classifier over point features that
// routes samples either to the frozen base network or to the evolving one.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "cmgr/core/layers.hpp"
#include "cmgr/core/optim.hpp"
#include "cmgr/pointset.hpp"

namespace cmgr {

struct BndConfig {
  double threshold = 0.1;
  // 10 epochs at 1e-3 leave the discriminator far from saturated at this scale.
  std::size_t epochs = 50;
  double lr = 1e-2;
  std::size_t batch = 16;
  double weight_decay = 1e-4;
  std::size_t replicas = 24;  // augmented copies per negative sample
  bool standardize = true;

  void validate() const {
    if (!(threshold > 0.0 && threshold < 1.0)) throw InvalidArgument("bnd: threshold must be in (0, 1)");
    if (epochs < 1 || batch < 1) throw InvalidArgument("bnd: epochs and batch must be >= 1");
    if (!(lr > 0.0)) throw InvalidArgument("bnd: lr must be > 0");
    if (replicas < 1) throw InvalidArgument("bnd: replicas must be >= 1");
  }
};

enum class Route { base, novel };

inline std::string to_string(Route r) { return r == Route::base ? "base" : "novel"; }

// Base iff score > h; a score equal to h is novel.
inline Route route(double score, double h) { return score > h ? Route::base : Route::novel; }

// Two-layer perceptron d -> d/2 -> 1 with a sigmoid, in its own parameter
// store. Inputs are first shifted and scaled by frozen per-dimension
// statistics (identity until fit_input_scaling is called).
template <typename T>
struct Discriminator {
  ParamStore<T> store;
  std::size_t input_mean = 0;
  std::size_t input_scale = 0;
  Linear l1;
  Linear l2;

  static Discriminator create(Index dim, Rng& rng) {
    Discriminator d;
    d.input_mean = d.store.add("bnd.input_mean", Mat<T>::Zero(1, dim), true);
    d.input_scale = d.store.add("bnd.input_scale", Mat<T>::Ones(1, dim), true);
    d.l1 = Linear::create(d.store, "bnd.l1", dim, std::max<Index>(1, dim / 2), rng);
    d.l2 = Linear::create(d.store, "bnd.l2", std::max<Index>(1, dim / 2), 1, rng);
    return d;
  }

  // Per-dimension mean and 1 / standard deviation of the training features.
  void fit_input_scaling(const Mat<T>& features) {
    const RowVec<T> mu = features.colwise().mean();
    const RowVec<T> sd = (features.rowwise() - mu).array().square().colwise().mean().sqrt().matrix();
    store.value(input_mean) = mu;
    store.value(input_scale) = sd.unaryExpr([](T v) { return v > T(1e-6) ? T(1) / v : T(1); });
  }

  Mat<T> scale_inputs(const Mat<T>& features) const {
    return ((features.rowwise() - store.value(input_mean).row(0)).array().rowwise() *
            store.value(input_scale).row(0).array())
        .matrix();
  }

  // features: B x d -> B x 1 scores in (0, 1).
  Var<T> operator()(ParamBinding<T>& pb, Var<T> features) const {
    Var<T> x = ad::mul_row(ad::add_row(features, ad::scale(pb(input_mean), T(-1))), pb(input_scale));
    return ad::sigmoid(l2(pb, ad::relu(l1(pb, x))));
  }

  std::vector<double> score(const Mat<T>& features) const {
    Mat<T> z = l2.apply(store, Mat<T>(l1.apply(store, scale_inputs(features)).cwiseMax(T(0))));
    std::vector<double> s(static_cast<std::size_t>(z.rows()));
    for (Index i = 0; i < z.rows(); ++i) s[static_cast<std::size_t>(i)] = 1.0 / (1.0 + std::exp(-static_cast<double>(z(i, 0))));
    return s;
  }

  double score(const RowVec<T>& f) const { return score(Mat<T>(f)).front(); }
};

// 1 for base classes, 0 for novel ones.
inline std::vector<int> relabel_binary(const std::vector<std::string>& labels, const std::set<std::string>& base,
                                       const std::set<std::string>& novel) {
  std::vector<int> y;
  y.reserve(labels.size());
  for (const auto& l : labels) {
    if (base.count(l)) {
      y.push_back(1);
    } else if (novel.count(l)) {
      y.push_back(0);
    } else {
      throw InvalidArgument("relabel_binary: unknown label '" + l + "'");
    }
  }
  return y;
}

// Mean binary cross-entropy. Scores are B x 1.
template <typename T>
Var<T> bnd_loss(Var<T> scores, const std::vector<int>& y) {
  if (scores.cols() != 1 || scores.rows() != static_cast<Index>(y.size())) {
    throw InvalidArgument("bnd_loss: score/label count mismatch");
  }
  if (y.empty()) throw InvalidArgument("bnd_loss: empty batch");
  const auto& s = scores.value();
  Mat<T> pos(s.rows(), 1), neg(s.rows(), 1);
  for (Index i = 0; i < s.rows(); ++i) {
    if (!(s(i, 0) > T(0) && s(i, 0) < T(1))) throw InvalidArgument("bnd_loss: score outside (0, 1)");
    const int yi = y[static_cast<std::size_t>(i)];
    if (yi != 0 && yi != 1) throw InvalidArgument("bnd_loss: labels must be 0 or 1");
    pos(i, 0) = static_cast<T>(yi);
    neg(i, 0) = static_cast<T>(1 - yi);
  }
  Var<T> one_minus = ad::affine(scores, T(-1), T(1));
  Var<T> ll = ad::add(ad::mul_const(ad::log(scores), pos), ad::mul_const(ad::log(one_minus), neg));
  return ad::scale(ad::mean_all(ll), T(-1));
}

template <typename T>
T bnd_loss(const std::vector<T>& scores, const std::vector<int>& y) {
  Tape<T> tape;
  Mat<T> s(static_cast<Index>(scores.size()), 1);
  for (std::size_t i = 0; i < scores.size(); ++i) s(static_cast<Index>(i), 0) = scores[i];
  return bnd_loss(tape.constant(std::move(s)), y).scalar();
}

struct BndTrainingLog {
  std::vector<double> epoch_loss;
};

// Minibatch Adam on (features, binary labels). The discriminator's parameters
// are the only ones touched.
template <typename T>
BndTrainingLog train_bnd(Discriminator<T>& disc, const Mat<T>& features, const std::vector<int>& y,
                         const BndConfig& cfg, Rng& rng) {
  cfg.validate();
  if (features.rows() != static_cast<Index>(y.size()) || y.empty()) {
    throw InvalidArgument("train_bnd: feature/label count mismatch");
  }
  if (cfg.standardize) disc.fit_input_scaling(features);
  Adam<T> opt(cfg.weight_decay);
  BndTrainingLog log;
  std::vector<Index> order(y.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<Index>(i);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t end = std::min(order.size(), start + cfg.batch);
      Mat<T> xb(static_cast<Index>(end - start), features.cols());
      std::vector<int> yb;
      for (std::size_t i = start; i < end; ++i) {
        xb.row(static_cast<Index>(i - start)) = features.row(order[i]);
        yb.push_back(y[static_cast<std::size_t>(order[i])]);
      }
      disc.store.zero_grad();
      Tape<T> tape;
      ParamBinding<T> pb(tape, disc.store);
      // Clamp keeps the loss finite once the sigmoid saturates in float.
      Var<T> s = disc(pb, tape.constant(std::move(xb)));
      const T lo = std::numeric_limits<T>::epsilon();
      Mat<T> clamped = s.value().cwiseMax(lo).cwiseMin(T(1) - lo);
      Var<T> sc = ad::add(s, tape.constant(Mat<T>(clamped - s.value())));
      Var<T> loss = bnd_loss(sc, yb);
      tape.backward(loss);
      opt.step(disc.store, cfg.lr);
      total += static_cast<double>(loss.scalar()) * static_cast<double>(end - start);
    }
    log.epoch_loss.push_back(total / static_cast<double>(order.size()));
  }
  return log;
}

// Equal-width histogram of scores over [0, 1]; the last bin includes 1.
inline std::vector<std::size_t> score_histogram(const std::vector<double>& scores, std::size_t bins = 10) {
  if (bins < 1) throw InvalidArgument("score_histogram: bins must be >= 1");
  std::vector<std::size_t> h(bins, 0);
  for (double s : scores) {
    auto b = static_cast<std::size_t>(std::floor(s * static_cast<double>(bins)));
    h[std::min(b, bins - 1)] += 1;
  }
  return h;
}

inline void write_histogram_csv(const std::vector<std::size_t>& hist, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open histogram file for writing", path.string());
  out << "bin,count\n";
  for (std::size_t i = 0; i < hist.size(); ++i) out << i << ',' << hist[i] << '\n';
  if (!out) throw IoError("failed writing histogram file", path.string());
}

// Per class, picks the sample whose feature is nearest the class mean, then
// continues greedily so the running mean of the picks tracks the class mean.
// Candidates within a class are scanned in the given order; ties keep the first.
template <typename T>
ExemplarStore select_exemplars(const std::map<std::string, std::vector<std::pair<std::string, RowVec<T>>>>& features,
                               std::size_t k) {
  if (k < 1) throw InvalidArgument("select_exemplars: k must be >= 1");
  ExemplarStore store;
  store.per_class = k;
  for (const auto& [cls, items] : features) {
    if (items.empty()) throw InvalidArgument("select_exemplars: class '" + cls + "' is empty");
    if (items.size() < k) throw InvalidArgument("select_exemplars: class '" + cls + "' has fewer than k samples");
    RowVec<double> mean = RowVec<double>::Zero(items.front().second.cols());
    for (const auto& [id, f] : items) mean += f.template cast<double>();
    mean /= static_cast<double>(items.size());
    std::vector<bool> used(items.size(), false);
    RowVec<double> acc = RowVec<double>::Zero(mean.cols());
    auto& picks = store.exemplars[cls];
    for (std::size_t m = 0; m < k; ++m) {
      std::size_t best = items.size();
      double best_d = 0.0;
      for (std::size_t i = 0; i < items.size(); ++i) {
        if (used[i]) continue;
        const RowVec<double> cand = (acc + items[i].second.template cast<double>()) / static_cast<double>(m + 1);
        const double d = (cand - mean).squaredNorm();
        if (best == items.size() || d < best_d) {
          best = i;
          best_d = d;
        }
      }
      used[best] = true;
      acc += items[best].second.template cast<double>();
      picks.push_back(items[best].first);
    }
  }
  return store;
}

}  // namespace cmgr
