#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "cmgr/core/autodiff.hpp"

namespace cmgr {

// lr_end + (lr_start - lr_end) * (1 + cos(pi * step / total)) / 2
inline double cosine_lr(std::size_t step, std::size_t total, double lr_start, double lr_end) {
  if (total < 1) throw InvalidArgument("cosine_lr: total must be >= 1");
  if (step > total) throw InvalidArgument("cosine_lr: step beyond total");
  const double x = static_cast<double>(step) / static_cast<double>(total);
  return lr_end + (lr_start - lr_end) * (1.0 + std::cos(std::numbers::pi * x)) / 2.0;
}

// Adam with L2 weight decay folded into the gradient. Frozen entries are skipped.
template <typename T>
class Adam {
 public:
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;

  explicit Adam(double wd = 0.0) : weight_decay(wd) {}

  void step(ParamStore<T>& store, double lr) {
    if (m_.size() != store.size()) {
      m_.clear();
      v_.clear();
      for (std::size_t i = 0; i < store.size(); ++i) {
        m_.push_back(Mat<T>::Zero(store.value(i).rows(), store.value(i).cols()));
        v_.push_back(m_.back());
      }
    }
    ++t_;
    const T b1 = static_cast<T>(beta1), b2 = static_cast<T>(beta2);
    const T c1 = static_cast<T>(1.0 - std::pow(beta1, static_cast<double>(t_)));
    const T c2 = static_cast<T>(1.0 - std::pow(beta2, static_cast<double>(t_)));
    const T a = static_cast<T>(lr), e = static_cast<T>(eps), wd = static_cast<T>(weight_decay);
    for (std::size_t i = 0; i < store.size(); ++i) {
      if (store.frozen(i)) continue;
      Mat<T>& p = store.value(i);
      const Mat<T>& raw = store.grad(i);
      if (raw.size() != p.size()) continue;  // never touched by a tape
      Mat<T> g = raw + wd * p;
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
      p.array() -= a * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + e);
    }
  }

  long steps() const { return t_; }

 private:
  std::vector<Mat<T>> m_;
  std::vector<Mat<T>> v_;
  long t_ = 0;
};

}  // namespace cmgr
