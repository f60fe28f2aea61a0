// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "soundloc/autograd.hpp"
#include "soundloc/nn.hpp"

using soundloc::Rng;
using soundloc::RTensor;
using soundloc::Tensor;
namespace ag = soundloc::ag;
using ag::RVar;

namespace {

RTensor random_tensor(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  RTensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    t[i] = rng.normal() * scale;
  }
  return t;
}

// Central-difference gradient check. `build` must construct the loss graph
// from the given leaves on every call, so value edits are picked up.
void check_gradients(
    const std::function<RVar(const std::vector<RVar>&)>& build,
    std::vector<RVar> leaves, double h = 1e-5, double tol = 1e-6) {
  RVar loss = build(leaves);
  ag::backward(loss);
  std::vector<RTensor> analytic;
  for (auto& l : leaves) {
    l->ensure_grad();
    analytic.push_back(l->grad);
  }
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    RTensor& v = leaves[li]->value;
    for (std::int64_t i = 0; i < v.numel(); ++i) {
      const double orig = v[i];
      v[i] = orig + h;
      const double up = build(leaves)->value[0];
      v[i] = orig - h;
      const double down = build(leaves)->value[0];
      v[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[li][i];
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1.0});
      INFO("leaf ", li, " element ", i, " analytic ", a, " numeric ", numeric);
      CHECK(std::fabs(a - numeric) / denom < tol);
    }
    // fresh grads for the next leaf comparison are unnecessary; analytic
    // gradients were captured once up front
  }
}

}  // namespace

TEST_CASE("conv2d forward matches direct summation") {
  Rng rng(7);
  RTensor x = random_tensor({2, 3, 5, 6}, rng);
  RTensor w = random_tensor({4, 3, 3, 3}, rng);
  RTensor b = random_tensor({4}, rng);
  const int stride = 2, pad = 1;
  auto out = ag::conv2d(ag::constant(x), ag::constant(w), ag::constant(b),
                        stride, pad);
  const int Ho = ag::conv_out_dim(5, 3, stride, pad);
  const int Wo = ag::conv_out_dim(6, 3, stride, pad);
  REQUIRE(out->value.shape() == std::vector<int>({2, 4, Ho, Wo}));
  for (int bb = 0; bb < 2; ++bb) {
    for (int oc = 0; oc < 4; ++oc) {
      for (int oh = 0; oh < Ho; ++oh) {
        for (int ow = 0; ow < Wo; ++ow) {
          double acc = b(oc);
          for (int ic = 0; ic < 3; ++ic) {
            for (int r = 0; r < 3; ++r) {
              for (int c = 0; c < 3; ++c) {
                const int ih = oh * stride + r - pad;
                const int iw = ow * stride + c - pad;
                if (ih < 0 || ih >= 5 || iw < 0 || iw >= 6) continue;
                acc += x(bb, ic, ih, iw) * w(oc, ic, r, c);
              }
            }
          }
          CHECK(out->value(bb, oc, oh, ow) == doctest::Approx(acc).epsilon(1e-12));
        }
      }
    }
  }
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(11);
  auto x = ag::leaf(random_tensor({2, 2, 4, 4}, rng), true);
  auto w = ag::leaf(random_tensor({3, 2, 3, 3}, rng), true);
  auto b = ag::leaf(random_tensor({3}, rng), true);
  auto build = [](const std::vector<RVar>& ls) {
    auto y = ag::conv2d(ls[0], ls[1], ls[2], 2, 1);
    // sum of squares keeps the reduction smooth
    RTensor s({1});
    double acc = 0.0;
    for (std::int64_t i = 0; i < y->value.numel(); ++i) {
      acc += y->value[i] * y->value[i];
    }
    s[0] = acc;
    auto out = std::make_shared<ag::Node<double>>();
    out->value = s;
    out->inputs = {y};
    out->requires_grad = y->requires_grad;
    ag::Node<double>* op = out.get();
    ag::Node<double>* yp = y.get();
    out->backprop = [op, yp]() {
      yp->ensure_grad();
      for (std::int64_t i = 0; i < yp->value.numel(); ++i) {
        yp->grad[i] += 2.0 * yp->value[i] * op->grad[0];
      }
    };
    return out;
  };
  check_gradients(build, {x, w, b});
}

TEST_CASE("linear gradients match finite differences") {
  Rng rng(13);
  auto x = ag::leaf(random_tensor({3, 4}, rng), true);
  auto w = ag::leaf(random_tensor({2, 4}, rng), true);
  auto b = ag::leaf(random_tensor({2}, rng), true);
  std::vector<int> labels = {0, 1, 1};
  auto build = [labels](const std::vector<RVar>& ls) {
    return ag::ce_mean(ag::linear(ls[0], ls[1], ls[2]), labels);
  };
  check_gradients(build, {x, w, b});
}

TEST_CASE("sigmoid/relu/gap/gmp chain gradients") {
  Rng rng(17);
  auto x = ag::leaf(random_tensor({2, 1, 3, 3}, rng), true);
  std::vector<double> y = {1.0, 0.0};
  auto build = [y](const std::vector<RVar>& ls) {
    return ag::bce_mean(ag::gmp_map(ag::sigmoid(ls[0])), y);
  };
  check_gradients(build, {x});

  auto x2 = ag::leaf(random_tensor({2, 3, 4, 4}, rng), true);
  std::vector<int> labels = {2, 0};
  auto build2 = [labels](const std::vector<RVar>& ls) {
    return ag::ce_mean(ag::gap2d(ag::relu(ls[0])), labels);
  };
  check_gradients(build2, {x2});
}

TEST_CASE("cosine_map gradients match finite differences") {
  Rng rng(19);
  auto g = ag::leaf(random_tensor({3, 4}, rng), true);
  auto f = ag::leaf(random_tensor({3, 4, 2, 2}, rng), true);
  std::vector<double> y = {1.0, 0.0, 1.0};
  auto build = [y](const std::vector<RVar>& ls) {
    auto map = ag::cosine_map(ls[0], ls[1]);
    return ag::bce_mean(ag::gmp_map(ag::sigmoid(map)), y);
  };
  check_gradients(build, {g, f});
}

TEST_CASE("cosine_map returns 0 for near-zero vectors") {
  RTensor g({1, 3});
  g(0, 0) = 0.0;
  g(0, 1) = 0.0;
  g(0, 2) = 0.0;
  RTensor f({1, 3, 1, 2});
  f(0, 0, 0, 0) = 1.0;
  f(0, 1, 0, 0) = 2.0;
  f(0, 2, 0, 0) = 3.0;
  auto out = ag::cosine_map(ag::constant(g), ag::constant(f));
  CHECK(out->value(0, 0, 0, 0) == 0.0);
  CHECK(out->value(0, 0, 0, 1) == 0.0);

  // zero feature column, nonzero embedding
  RTensor g2({1, 2});
  g2(0, 0) = 1.0;
  RTensor f2({1, 2, 1, 1});
  auto out2 = ag::cosine_map(ag::constant(g2), ag::constant(f2));
  CHECK(out2->value(0, 0, 0, 0) == 0.0);
}

TEST_CASE("category_maps and hadamard_map gradients") {
  Rng rng(23);
  auto f = ag::leaf(random_tensor({2, 3, 2, 2}, rng), true);
  auto keys = ag::leaf(random_tensor({4, 3}, rng), true);
  auto l = ag::leaf(random_tensor({2, 1, 2, 2}, rng), true);
  auto qlogits = ag::leaf(random_tensor({2, 4}, rng), true);
  auto build = [](const std::vector<RVar>& ls) {
    auto m = ag::category_maps(ls[0], ls[1]);
    auto s = ag::hadamard_map(m, ls[2]);
    auto pv = ag::softmax_rows(ag::gap2d(s));
    auto pa = ag::softmax_rows(ls[3]);
    return ag::kl_mean(pv, pa);
  };
  check_gradients(build, {f, keys, l, qlogits}, 1e-5, 2e-6);
}

TEST_CASE("l2norm_columns normalizes and backpropagates correctly") {
  Rng rng(43);
  auto x = ag::leaf(random_tensor({2, 3, 2, 2}, rng), true);
  auto out = ag::l2norm_columns(x);
  for (int b = 0; b < 2; ++b) {
    for (int i = 0; i < 4; ++i) {
      double norm = 0.0;
      for (int c = 0; c < 3; ++c) {
        const double v = out->value.data()[(b * 3 + c) * 4 + i];
        norm += v * v;
      }
      CHECK(norm == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
  std::vector<int> labels = {1, 0};
  auto build = [labels](const std::vector<RVar>& ls) {
    return ag::ce_mean(ag::gap2d(ag::l2norm_columns(ls[0])), labels);
  };
  check_gradients(build, {x});

  // near-zero columns pass through
  RTensor z({1, 2, 1, 1});
  auto zn = ag::l2norm_columns(ag::constant(z));
  CHECK(zn->value[0] == 0.0);
  CHECK(zn->value[1] == 0.0);
}

TEST_CASE("gather accumulates gradient for repeated rows") {
  Rng rng(29);
  auto x = ag::leaf(random_tensor({3, 2}, rng), true);
  std::vector<int> idx = {0, 0, 2};
  std::vector<int> labels = {0, 1, 0};
  auto build = [idx, labels](const std::vector<RVar>& ls) {
    return ag::ce_mean(ag::gather(ls[0], idx), labels);
  };
  check_gradients(build, {x});
}

TEST_CASE("kl_mean value and identities") {
  RTensor p({1, 2});
  p(0, 0) = 1.0;
  p(0, 1) = 0.0;
  RTensor q({1, 2});
  q(0, 0) = 0.5;
  q(0, 1) = 0.5;
  auto kl = ag::kl_mean(ag::constant(p), ag::constant(q));
  CHECK(kl->value[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  auto same = ag::kl_mean(ag::constant(q), ag::constant(q));
  CHECK(same->value[0] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("kl_mean nonnegative on random distribution pairs") {
  Rng rng(31);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + rng.uniform_int(6);
    RTensor a({1, k}), b({1, k});
    double za = 0.0, zb = 0.0;
    for (int i = 0; i < k; ++i) {
      a(0, i) = rng.uniform() + 1e-9;
      b(0, i) = rng.uniform() + 1e-9;
      za += a(0, i);
      zb += b(0, i);
    }
    for (int i = 0; i < k; ++i) {
      a(0, i) /= za;
      b(0, i) /= zb;
    }
    auto kl = ag::kl_mean(ag::constant(a), ag::constant(b));
    CHECK(kl->value[0] >= -1e-12);
  }
}

TEST_CASE("bce_mean closed forms") {
  RTensor p({2});
  p(0) = 0.5;
  p(1) = 0.5;
  auto loss = ag::bce_mean(ag::constant(p), {1.0, 0.0});
  CHECK(loss->value[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("ce_mean uniform logits give ln K") {
  RTensor z({2, 4});
  auto loss = ag::ce_mean(ag::constant(z), {1, 3});
  CHECK(loss->value[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("softmax_rows shift invariance") {
  Rng rng(37);
  RTensor z = random_tensor({2, 5}, rng);
  RTensor zs = z;
  for (std::int64_t i = 0; i < zs.numel(); ++i) zs[i] += 3.25;
  auto a = ag::softmax_rows(ag::constant(z));
  auto b = ag::softmax_rows(ag::constant(zs));
  for (std::int64_t i = 0; i < a->value.numel(); ++i) {
    CHECK(a->value[i] == doctest::Approx(b->value[i]).epsilon(1e-12));
  }
}

TEST_CASE("adam minimizes a quadratic") {
  Rng rng(41);
  auto x = ag::leaf(random_tensor({4}, rng), true);
  RTensor target = random_tensor({4}, rng);
  soundloc::nn::Adam<double> opt({x}, 0.05);
  for (int step = 0; step < 2000; ++step) {
    opt.zero_grad();
    // loss = sum (x - t)^2, gradient written directly
    for (int i = 0; i < 4; ++i) {
      x->grad(i) = 2.0 * (x->value(i) - target(i));
    }
    opt.step();
  }
  for (int i = 0; i < 4; ++i) {
    CHECK(x->value(i) == doctest::Approx(target(i)).epsilon(1e-3));
  }
}

TEST_CASE("backward requires scalar root") {
  auto x = ag::leaf(RTensor({2}), true);
  CHECK_THROWS_AS(ag::backward(ag::relu(x)), soundloc::InvalidInput);
}
