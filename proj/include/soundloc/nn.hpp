// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <vector>

#include "soundloc/autograd.hpp"
#include "soundloc/common.hpp"

namespace soundloc::nn {

template <class T>
Tensor<T> kaiming_normal(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const T std = std::sqrt(T{2} / static_cast<T>(fan_in));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t[i] = static_cast<T>(rng.normal()) * std;
  }
  return t;
}

template <class T>
struct Conv2d {
  ag::Var<T> w, b;
  int stride = 1;
  int pad = 0;

  Conv2d() = default;
  Conv2d(int cin, int cout, int kernel, int stride_, int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    w = ag::leaf(kaiming_normal<T>({cout, cin, kernel, kernel},
                                   cin * kernel * kernel, rng),
                 true);
    b = ag::leaf(Tensor<T>({cout}), true);
  }

  ag::Var<T> operator()(const ag::Var<T>& x) const {
    return ag::conv2d(x, w, b, stride, pad);
  }

  void collect(std::vector<ag::Var<T>>& out) const {
    out.push_back(w);
    out.push_back(b);
  }
};

template <class T>
struct Linear {
  ag::Var<T> w, b;

  Linear() = default;
  Linear(int cin, int cout, Rng& rng) {
    w = ag::leaf(kaiming_normal<T>({cout, cin}, cin, rng), true);
    b = ag::leaf(Tensor<T>({cout}), true);
  }

  ag::Var<T> operator()(const ag::Var<T>& x) const {
    return ag::linear(x, w, b);
  }

  void collect(std::vector<ag::Var<T>>& out) const {
    out.push_back(w);
    out.push_back(b);
  }
};

template <class T>
class Adam {
 public:
  explicit Adam(std::vector<ag::Var<T>> params, T lr, T beta1 = T{0.9},
                T beta2 = T{0.999}, T eps = T{1e-8})
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (auto& p : params) {
      slots_.push_back({p, Tensor<T>(p->value.shape()),
                        Tensor<T>(p->value.shape())});
    }
  }

  void zero_grad() {
    for (auto& s : slots_) {
      s.param->ensure_grad();
      s.param->grad.fill(T{0});
    }
  }

  void step() {
    ++t_;
    const T bc1 = T{1} - std::pow(beta1_, static_cast<T>(t_));
    const T bc2 = T{1} - std::pow(beta2_, static_cast<T>(t_));
    for (auto& s : slots_) {
      s.param->ensure_grad();
      Tensor<T>& p = s.param->value;
      const Tensor<T>& g = s.param->grad;
      for (std::int64_t i = 0; i < p.numel(); ++i) {
        s.m[i] = beta1_ * s.m[i] + (T{1} - beta1_) * g[i];
        s.v[i] = beta2_ * s.v[i] + (T{1} - beta2_) * g[i] * g[i];
        const T mhat = s.m[i] / bc1;
        const T vhat = s.v[i] / bc2;
        p[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  T learning_rate() const { return lr_; }

 private:
  struct Slot {
    ag::Var<T> param;
    Tensor<T> m, v;
  };
  std::vector<Slot> slots_;
  T lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

}  // namespace soundloc::nn
