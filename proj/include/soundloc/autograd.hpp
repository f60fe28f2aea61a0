// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "soundloc/tensor.hpp"

namespace soundloc::ag {

/// One vertex of a dynamically built computation graph. Graphs are created
/// per forward pass; parameter leaves persist across passes and accumulate
/// gradients until the optimizer clears them.
template <class T>
class Node {
 public:
  Tensor<T> value;
  Tensor<T> grad;  // allocated lazily, same shape as value
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node<T>>> inputs;
  std::function<void()> backprop;

  void ensure_grad() {
    if (grad.numel() == 0) grad = Tensor<T>(value.shape());
  }
};

template <class T>
using Var = std::shared_ptr<Node<T>>;

template <class T>
Var<T> leaf(Tensor<T> value, bool requires_grad = false) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->requires_grad = requires_grad;
  return n;
}

template <class T>
Var<T> constant(Tensor<T> value) {
  return leaf(std::move(value), false);
}

namespace detail {

template <class T>
Var<T> make_op(Tensor<T> value, std::vector<Var<T>> inputs) {
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->inputs = std::move(inputs);
  for (const auto& in : n->inputs) {
    if (in->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  return n;
}

}  // namespace detail

/// Reverse-mode sweep from a scalar root.
template <class T>
void backward(const Var<T>& root) {
  if (root->value.numel() != 1) {
    throw InvalidInput("backward: root must be a scalar");
  }
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  struct Frame {
    Node<T>* node;
    std::size_t next;
  };
  std::vector<Frame> stack;
  stack.push_back({root.get(), 0});
  seen.insert(root.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next < f.node->inputs.size()) {
      Node<T>* child = f.node->inputs[f.next++].get();
      if (child->requires_grad && seen.insert(child).second) {
        stack.push_back({child, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
  root->ensure_grad();
  root->grad[0] = T{1};
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop && (*it)->requires_grad) (*it)->backprop();
  }
}

// ---------------------------------------------------------------------------
// Elementwise and arithmetic ops
// ---------------------------------------------------------------------------

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (!a->value.same_shape(b->value)) throw InvalidInput("add: shape mismatch");
  Tensor<T> out = a->value;
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] += b->value[i];
  auto node = detail::make_op(std::move(out), {a, b});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* ap = a.get();
    Node<T>* bp = b.get();
    node->backprop = [o, ap, bp]() {
      const std::int64_t n = o->value.numel();
      if (ap->requires_grad) {
        ap->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) ap->grad[i] += o->grad[i];
      }
      if (bp->requires_grad) {
        bp->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) bp->grad[i] += o->grad[i];
      }
    };
  }
  return node;
}

/// a + alpha * b
template <class T>
Var<T> add_scaled(const Var<T>& a, const Var<T>& b, T alpha) {
  if (!a->value.same_shape(b->value)) {
    throw InvalidInput("add_scaled: shape mismatch");
  }
  Tensor<T> out = a->value;
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] += alpha * b->value[i];
  auto node = detail::make_op(std::move(out), {a, b});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* ap = a.get();
    Node<T>* bp = b.get();
    node->backprop = [o, ap, bp, alpha]() {
      const std::int64_t n = o->value.numel();
      if (ap->requires_grad) {
        ap->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) ap->grad[i] += o->grad[i];
      }
      if (bp->requires_grad) {
        bp->ensure_grad();
        for (std::int64_t i = 0; i < n; ++i) bp->grad[i] += alpha * o->grad[i];
      }
    };
  }
  return node;
}

template <class T>
Var<T> scale(const Var<T>& x, T c) {
  Tensor<T> out = x->value;
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) out[i] *= c;
  auto node = detail::make_op(std::move(out), {x});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* xp = x.get();
    node->backprop = [o, xp, c]() {
      xp->ensure_grad();
      const std::int64_t n = o->value.numel();
      for (std::int64_t i = 0; i < n; ++i) xp->grad[i] += c * o->grad[i];
    };
  }
  return node;
}

template <class T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x->value;
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    if (out[i] < T{0}) out[i] = T{0};
  }
  auto node = detail::make_op(std::move(out), {x});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* xp = x.get();
    node->backprop = [o, xp]() {
      xp->ensure_grad();
      const std::int64_t n = o->value.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        if (xp->value[i] > T{0}) xp->grad[i] += o->grad[i];
      }
    };
  }
  return node;
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  Tensor<T> out = x->value;
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) {
    const T v = out[i];
    out[i] = v >= T{0} ? T{1} / (T{1} + std::exp(-v))
                       : std::exp(v) / (T{1} + std::exp(v));
  }
  auto node = detail::make_op(std::move(out), {x});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* xp = x.get();
    node->backprop = [o, xp]() {
      xp->ensure_grad();
      const std::int64_t n = o->value.numel();
      for (std::int64_t i = 0; i < n; ++i) {
        const T s = o->value[i];
        xp->grad[i] += s * (T{1} - s) * o->grad[i];
      }
    };
  }
  return node;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

inline int conv_out_dim(int in, int kernel, int stride, int pad) {
  return (in + 2 * pad - kernel) / stride + 1;
}

/// x: [B,Cin,H,W], w: [Cout,Cin,kh,kw], b: [Cout] -> [B,Cout,Ho,Wo].
template <class T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, int stride,
              int pad) {
  const Tensor<T>& xv = x->value;
  const Tensor<T>& wv = w->value;
  if (xv.ndim() != 4 || wv.ndim() != 4 || b->value.ndim() != 1) {
    throw InvalidInput("conv2d: bad ranks");
  }
  const int B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const int Cout = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  if (wv.dim(1) != Cin || b->value.dim(0) != Cout) {
    throw InvalidInput("conv2d: channel mismatch");
  }
  const int Ho = conv_out_dim(H, kh, stride, pad);
  const int Wo = conv_out_dim(W, kw, stride, pad);
  if (Ho <= 0 || Wo <= 0) throw InvalidInput("conv2d: output would be empty");

  Tensor<T> out({B, Cout, Ho, Wo});
  for (int bb = 0; bb < B; ++bb) {
    for (int oc = 0; oc < Cout; ++oc) {
      const T bias = b->value(oc);
      T* oplane = &out(bb, oc, 0, 0);
      for (int i = 0; i < Ho * Wo; ++i) oplane[i] = bias;
      for (int ic = 0; ic < Cin; ++ic) {
        for (int r = 0; r < kh; ++r) {
          for (int c = 0; c < kw; ++c) {
            const T wval = wv(oc, ic, r, c);
            for (int oh = 0; oh < Ho; ++oh) {
              const int ih = oh * stride + r - pad;
              if (ih < 0 || ih >= H) continue;
              const T* xrow = &xv(bb, ic, ih, 0);
              T* orow = oplane + static_cast<std::size_t>(oh) * Wo;
              for (int ow = 0; ow < Wo; ++ow) {
                const int iw = ow * stride + c - pad;
                if (iw < 0 || iw >= W) continue;
                orow[ow] += wval * xrow[iw];
              }
            }
          }
        }
      }
    }
  }

  auto node = detail::make_op(std::move(out), {x, w, b});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* xp = x.get();
    Node<T>* wp = w.get();
    Node<T>* bp = b.get();
    node->backprop = [o, xp, wp, bp, stride, pad, B, Cin, H, W, Cout, kh, kw,
                      Ho, Wo]() {
      const Tensor<T>& g = o->grad;
      if (bp->requires_grad) {
        bp->ensure_grad();
        for (int bb = 0; bb < B; ++bb) {
          for (int oc = 0; oc < Cout; ++oc) {
            const T* gplane = &g(bb, oc, 0, 0);
            T acc = T{0};
            for (int i = 0; i < Ho * Wo; ++i) acc += gplane[i];
            bp->grad(oc) += acc;
          }
        }
      }
      if (wp->requires_grad) {
        wp->ensure_grad();
        for (int bb = 0; bb < B; ++bb) {
          for (int oc = 0; oc < Cout; ++oc) {
            for (int ic = 0; ic < Cin; ++ic) {
              for (int r = 0; r < kh; ++r) {
                for (int c = 0; c < kw; ++c) {
                  T acc = T{0};
                  for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride + r - pad;
                    if (ih < 0 || ih >= H) continue;
                    const T* xrow = &xp->value(bb, ic, ih, 0);
                    const T* grow = &g(bb, oc, oh, 0);
                    for (int ow = 0; ow < Wo; ++ow) {
                      const int iw = ow * stride + c - pad;
                      if (iw < 0 || iw >= W) continue;
                      acc += grow[ow] * xrow[iw];
                    }
                  }
                  wp->grad(oc, ic, r, c) += acc;
                }
              }
            }
          }
        }
      }
      if (xp->requires_grad) {
        xp->ensure_grad();
        for (int bb = 0; bb < B; ++bb) {
          for (int oc = 0; oc < Cout; ++oc) {
            for (int ic = 0; ic < Cin; ++ic) {
              for (int r = 0; r < kh; ++r) {
                for (int c = 0; c < kw; ++c) {
                  const T wval = wp->value(oc, ic, r, c);
                  for (int oh = 0; oh < Ho; ++oh) {
                    const int ih = oh * stride + r - pad;
                    if (ih < 0 || ih >= H) continue;
                    T* xrow = &xp->grad(bb, ic, ih, 0);
                    const T* grow = &g(bb, oc, oh, 0);
                    for (int ow = 0; ow < Wo; ++ow) {
                      const int iw = ow * stride + c - pad;
                      if (iw < 0 || iw >= W) continue;
                      xrow[iw] += wval * grow[ow];
                    }
                  }
                }
              }
            }
          }
        }
      }
    };
  }
  return node;
}

/// x: [B,Cin], w: [Cout,Cin], b: [Cout] -> [B,Cout].
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  const Tensor<T>& xv = x->value;
  const Tensor<T>& wv = w->value;
  if (xv.ndim() != 2 || wv.ndim() != 2) throw InvalidInput("linear: bad ranks");
  const int B = xv.dim(0), Cin = xv.dim(1), Cout = wv.dim(0);
  if (wv.dim(1) != Cin || b->value.dim(0) != Cout) {
    throw InvalidInput("linear: shape mismatch");
  }
  Tensor<T> out({B, Cout});
  for (int bb = 0; bb < B; ++bb) {
    for (int oc = 0; oc < Cout; ++oc) {
      T acc = b->value(oc);
      const T* xrow = &xv(bb, 0);
      const T* wrow = &wv(oc, 0);
      for (int i = 0; i < Cin; ++i) acc += xrow[i] * wrow[i];
      out(bb, oc) = acc;
    }
  }
  auto node = detail::make_op(std::move(out), {x, w, b});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* xp = x.get();
    Node<T>* wp = w.get();
    Node<T>* bp = b.get();
    node->backprop = [o, xp, wp, bp, B, Cin, Cout]() {
      const Tensor<T>& g = o->grad;
      if (bp->requires_grad) {
        bp->ensure_grad();
        for (int bb = 0; bb < B; ++bb) {
          for (int oc = 0; oc < Cout; ++oc) bp->grad(oc) += g(bb, oc);
        }
      }
      if (wp->requires_grad) {
        wp->ensure_grad();
        for (int bb = 0; bb < B; ++bb) {
          for (int oc = 0; oc < Cout; ++oc) {
            const T gv = g(bb, oc);
            const T* xrow = &xp->value(bb, 0);
            T* wrow = &wp->grad(oc, 0);
            for (int i = 0; i < Cin; ++i) wrow[i] += gv * xrow[i];
          }
        }
      }
      if (xp->requires_grad) {
        xp->ensure_grad();
        for (int bb = 0; bb < B; ++bb) {
          for (int oc = 0; oc < Cout; ++oc) {
            const T gv = g(bb, oc);
            const T* wrow = &wp->value(oc, 0);
            T* xrow = &xp->grad(bb, 0);
            for (int i = 0; i < Cin; ++i) xrow[i] += gv * wrow[i];
          }
        }
      }
    };
  }
  return node;
}

// ---------------------------------------------------------------------------
// Pooling and gathering
// ---------------------------------------------------------------------------

/// Spatial mean: [B,C,H,W] -> [B,C].
template <class T>
Var<T> gap2d(const Var<T>& x) {
  const Tensor<T>& xv = x->value;
  if (xv.ndim() != 4) throw InvalidInput("gap2d: expected rank-4 input");
  const int B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const T inv = T{1} / static_cast<T>(H * W);
  Tensor<T> out({B, C});
  for (int bb = 0; bb < B; ++bb) {
    for (int c = 0; c < C; ++c) {
      const T* plane = &xv(bb, c, 0, 0);
      T acc = T{0};
      for (int i = 0; i < H * W; ++i) acc += plane[i];
      out(bb, c) = acc * inv;
    }
  }
  auto node = detail::make_op(std::move(out), {x});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* xp = x.get();
    node->backprop = [o, xp, B, C, H, W, inv]() {
      xp->ensure_grad();
      for (int bb = 0; bb < B; ++bb) {
        for (int c = 0; c < C; ++c) {
          const T gv = o->grad(bb, c) * inv;
          T* plane = &xp->grad(bb, c, 0, 0);
          for (int i = 0; i < H * W; ++i) plane[i] += gv;
        }
      }
    };
  }
  return node;
}

/// Global max pooling of single-channel maps: [B,1,H,W] -> [B].
/// Ties resolve to the first maximum in scan order.
template <class T>
Var<T> gmp_map(const Var<T>& x) {
  const Tensor<T>& xv = x->value;
  if (xv.ndim() != 4 || xv.dim(1) != 1) {
    throw InvalidInput("gmp_map: expected [B,1,H,W]");
  }
  const int B = xv.dim(0), HW = xv.dim(2) * xv.dim(3);
  Tensor<T> out({B});
  std::vector<int> argmax(static_cast<std::size_t>(B), 0);
  for (int bb = 0; bb < B; ++bb) {
    const T* plane = &xv(bb, 0, 0, 0);
    int best = 0;
    for (int i = 1; i < HW; ++i) {
      if (plane[i] > plane[best]) best = i;
    }
    argmax[static_cast<std::size_t>(bb)] = best;
    out(bb) = plane[best];
  }
  auto node = detail::make_op(std::move(out), {x});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* xp = x.get();
    node->backprop = [o, xp, B, HW, argmax = std::move(argmax)]() {
      xp->ensure_grad();
      for (int bb = 0; bb < B; ++bb) {
        T* plane = &xp->grad(bb, 0, 0, 0);
        plane[argmax[static_cast<std::size_t>(bb)]] += o->grad(bb);
      }
    };
  }
  return node;
}

/// Row gather along the leading dimension; indices may repeat.
template <class T>
Var<T> gather(const Var<T>& x, std::vector<int> indices) {
  const Tensor<T>& xv = x->value;
  if (xv.ndim() < 1) throw InvalidInput("gather: scalar input");
  const int B = xv.dim(0);
  std::int64_t row = 1;
  for (int i = 1; i < xv.ndim(); ++i) row *= xv.dim(i);
  std::vector<int> oshape = xv.shape();
  oshape[0] = static_cast<int>(indices.size());
  Tensor<T> out(oshape);
  for (std::size_t p = 0; p < indices.size(); ++p) {
    const int src = indices[p];
    if (src < 0 || src >= B) throw InvalidInput("gather: index out of range");
    const T* from = xv.data() + static_cast<std::int64_t>(src) * row;
    T* to = out.data() + static_cast<std::int64_t>(p) * row;
    std::copy(from, from + row, to);
  }
  auto node = detail::make_op(std::move(out), {x});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* xp = x.get();
    node->backprop = [o, xp, row, indices = std::move(indices)]() {
      xp->ensure_grad();
      for (std::size_t p = 0; p < indices.size(); ++p) {
        const T* from = o->grad.data() + static_cast<std::int64_t>(p) * row;
        T* to = xp->grad.data() +
                static_cast<std::int64_t>(indices[p]) * row;
        for (std::int64_t i = 0; i < row; ++i) to[i] += from[i];
      }
    };
  }
  return node;
}

// ---------------------------------------------------------------------------
// Audiovisual ops
// ---------------------------------------------------------------------------

/// Per-cell cosine similarity between a pooled embedding and the columns of
/// a paired feature map: g [P,C], f [P,C,H,W] -> [P,1,H,W]. Similarity is 0
/// wherever either vector has norm below `eps`.
template <class T>
Var<T> cosine_map(const Var<T>& g, const Var<T>& f, T eps = T{1e-12}) {
  const Tensor<T>& gv = g->value;
  const Tensor<T>& fv = f->value;
  if (gv.ndim() != 2 || fv.ndim() != 4 || gv.dim(0) != fv.dim(0) ||
      gv.dim(1) != fv.dim(1)) {
    throw InvalidInput("cosine_map: shape mismatch");
  }
  const int P = gv.dim(0), C = gv.dim(1), H = fv.dim(2), W = fv.dim(3);
  const int HW = H * W;
  Tensor<T> out({P, 1, H, W});
  Tensor<T> gnorm({P});
  Tensor<T> fnorm({P, H, W});
  for (int p = 0; p < P; ++p) {
    T ng = T{0};
    for (int c = 0; c < C; ++c) ng += gv(p, c) * gv(p, c);
    gnorm(p) = std::sqrt(ng);
    for (int i = 0; i < HW; ++i) {
      T nf = T{0};
      for (int c = 0; c < C; ++c) {
        const T v = fv.data()[((static_cast<std::int64_t>(p) * C + c) * HW) + i];
        nf += v * v;
      }
      fnorm.data()[static_cast<std::int64_t>(p) * HW + i] = std::sqrt(nf);
    }
    for (int i = 0; i < HW; ++i) {
      const T nf = fnorm.data()[static_cast<std::int64_t>(p) * HW + i];
      T val = T{0};
      if (gnorm(p) >= eps && nf >= eps) {
        T dot = T{0};
        for (int c = 0; c < C; ++c) {
          dot += gv(p, c) *
                 fv.data()[((static_cast<std::int64_t>(p) * C + c) * HW) + i];
        }
        val = dot / (gnorm(p) * nf);
      }
      out.data()[static_cast<std::int64_t>(p) * HW + i] = val;
    }
  }
  auto node = detail::make_op(std::move(out), {g, f});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* gp = g.get();
    Node<T>* fp = f.get();
    node->backprop = [o, gp, fp, P, C, HW, eps, gnorm = std::move(gnorm),
                      fnorm = std::move(fnorm)]() {
      if (gp->requires_grad) gp->ensure_grad();
      if (fp->requires_grad) fp->ensure_grad();
      for (int p = 0; p < P; ++p) {
        const T ng = gnorm(p);
        if (ng < eps) continue;
        for (int i = 0; i < HW; ++i) {
          const T nf = fnorm.data()[static_cast<std::int64_t>(p) * HW + i];
          if (nf < eps) continue;
          const T go = o->grad.data()[static_cast<std::int64_t>(p) * HW + i];
          if (go == T{0}) continue;
          const T cosv = o->value.data()[static_cast<std::int64_t>(p) * HW + i];
          const T inv = T{1} / (ng * nf);
          for (int c = 0; c < C; ++c) {
            const std::int64_t fi =
                (static_cast<std::int64_t>(p) * C + c) * HW + i;
            const T gvc = gp->value(p, c);
            const T fvc = fp->value.data()[fi];
            if (gp->requires_grad) {
              gp->grad(p, c) += go * (fvc * inv - cosv * gvc / (ng * ng));
            }
            if (fp->requires_grad) {
              fp->grad.data()[fi] += go * (gvc * inv - cosv * fvc / (nf * nf));
            }
          }
        }
      }
    };
  }
  return node;
}

/// L2-normalizes each spatial feature column of [B,C,H,W] maps. Columns
/// with norm below `eps` pass through unchanged.
template <class T>
Var<T> l2norm_columns(const Var<T>& x, T eps = T{1e-12}) {
  const Tensor<T>& xv = x->value;
  if (xv.ndim() != 4) throw InvalidInput("l2norm_columns: expected [B,C,H,W]");
  const int B = xv.dim(0), C = xv.dim(1), HW = xv.dim(2) * xv.dim(3);
  Tensor<T> out(xv.shape());
  Tensor<T> norms({B, HW});
  for (int b = 0; b < B; ++b) {
    for (int i = 0; i < HW; ++i) {
      T acc = T{0};
      for (int c = 0; c < C; ++c) {
        const T v = xv.data()[(static_cast<std::int64_t>(b) * C + c) * HW + i];
        acc += v * v;
      }
      const T n = std::sqrt(acc);
      norms(b, i) = n;
      const T inv = n >= eps ? T{1} / n : T{1};
      for (int c = 0; c < C; ++c) {
        const std::int64_t idx = (static_cast<std::int64_t>(b) * C + c) * HW + i;
        out.data()[idx] = xv.data()[idx] * inv;
      }
    }
  }
  auto node = detail::make_op(std::move(out), {x});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* xp = x.get();
    node->backprop = [o, xp, B, C, HW, eps, norms = std::move(norms)]() {
      xp->ensure_grad();
      for (int b = 0; b < B; ++b) {
        for (int i = 0; i < HW; ++i) {
          const T n = norms(b, i);
          if (n < eps) {
            for (int c = 0; c < C; ++c) {
              const std::int64_t idx =
                  (static_cast<std::int64_t>(b) * C + c) * HW + i;
              xp->grad.data()[idx] += o->grad.data()[idx];
            }
            continue;
          }
          T dot = T{0};
          for (int c = 0; c < C; ++c) {
            const std::int64_t idx =
                (static_cast<std::int64_t>(b) * C + c) * HW + i;
            dot += o->grad.data()[idx] * o->value.data()[idx];
          }
          const T inv = T{1} / n;
          for (int c = 0; c < C; ++c) {
            const std::int64_t idx =
                (static_cast<std::int64_t>(b) * C + c) * HW + i;
            xp->grad.data()[idx] +=
                (o->grad.data()[idx] - o->value.data()[idx] * dot) * inv;
          }
        }
      }
    };
  }
  return node;
}

/// Per-category inner-product maps: keys [K,C], f [B,C,H,W] -> [B,K,H,W].
template <class T>
Var<T> category_maps(const Var<T>& f, const Var<T>& keys) {
  const Tensor<T>& fv = f->value;
  const Tensor<T>& kv = keys->value;
  if (fv.ndim() != 4 || kv.ndim() != 2 || kv.dim(1) != fv.dim(1)) {
    throw InvalidInput("category_maps: shape mismatch");
  }
  const int B = fv.dim(0), C = fv.dim(1), H = fv.dim(2), W = fv.dim(3);
  const int K = kv.dim(0), HW = H * W;
  Tensor<T> out({B, K, H, W});
  for (int b = 0; b < B; ++b) {
    for (int k = 0; k < K; ++k) {
      T* oplane = &out(b, k, 0, 0);
      for (int i = 0; i < HW; ++i) oplane[i] = T{0};
      for (int c = 0; c < C; ++c) {
        const T kvv = kv(k, c);
        const T* fplane = &fv(b, c, 0, 0);
        for (int i = 0; i < HW; ++i) oplane[i] += kvv * fplane[i];
      }
    }
  }
  auto node = detail::make_op(std::move(out), {f, keys});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* fp = f.get();
    Node<T>* kp = keys.get();
    node->backprop = [o, fp, kp, B, C, K, HW]() {
      if (fp->requires_grad) {
        fp->ensure_grad();
        for (int b = 0; b < B; ++b) {
          for (int k = 0; k < K; ++k) {
            const T* gplane = &o->grad(b, k, 0, 0);
            for (int c = 0; c < C; ++c) {
              const T kvv = kp->value(k, c);
              T* fplane = &fp->grad(b, c, 0, 0);
              for (int i = 0; i < HW; ++i) fplane[i] += kvv * gplane[i];
            }
          }
        }
      }
      if (kp->requires_grad) {
        kp->ensure_grad();
        for (int b = 0; b < B; ++b) {
          for (int k = 0; k < K; ++k) {
            const T* gplane = &o->grad(b, k, 0, 0);
            for (int c = 0; c < C; ++c) {
              const T* fplane = &fp->value(b, c, 0, 0);
              T acc = T{0};
              for (int i = 0; i < HW; ++i) acc += gplane[i] * fplane[i];
              kp->grad(k, c) += acc;
            }
          }
        }
      }
    };
  }
  return node;
}

/// Broadcast Hadamard product: m [B,K,H,W] * l [B,1,H,W] -> [B,K,H,W].
template <class T>
Var<T> hadamard_map(const Var<T>& m, const Var<T>& l) {
  const Tensor<T>& mv = m->value;
  const Tensor<T>& lv = l->value;
  if (mv.ndim() != 4 || lv.ndim() != 4 || lv.dim(1) != 1 ||
      mv.dim(0) != lv.dim(0) || mv.dim(2) != lv.dim(2) ||
      mv.dim(3) != lv.dim(3)) {
    throw InvalidInput("hadamard_map: shape mismatch");
  }
  const int B = mv.dim(0), K = mv.dim(1), HW = mv.dim(2) * mv.dim(3);
  Tensor<T> out(mv.shape());
  for (int b = 0; b < B; ++b) {
    const T* lplane = &lv(b, 0, 0, 0);
    for (int k = 0; k < K; ++k) {
      const T* mplane = &mv(b, k, 0, 0);
      T* oplane = &out(b, k, 0, 0);
      for (int i = 0; i < HW; ++i) oplane[i] = mplane[i] * lplane[i];
    }
  }
  auto node = detail::make_op(std::move(out), {m, l});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* mp = m.get();
    Node<T>* lp = l.get();
    node->backprop = [o, mp, lp, B, K, HW]() {
      if (mp->requires_grad) {
        mp->ensure_grad();
        for (int b = 0; b < B; ++b) {
          const T* lplane = &lp->value(b, 0, 0, 0);
          for (int k = 0; k < K; ++k) {
            const T* gplane = &o->grad(b, k, 0, 0);
            T* dm = &mp->grad(b, k, 0, 0);
            for (int i = 0; i < HW; ++i) dm[i] += gplane[i] * lplane[i];
          }
        }
      }
      if (lp->requires_grad) {
        lp->ensure_grad();
        for (int b = 0; b < B; ++b) {
          T* dl = &lp->grad(b, 0, 0, 0);
          for (int k = 0; k < K; ++k) {
            const T* gplane = &o->grad(b, k, 0, 0);
            const T* mplane = &mp->value(b, k, 0, 0);
            for (int i = 0; i < HW; ++i) dl[i] += gplane[i] * mplane[i];
          }
        }
      }
    };
  }
  return node;
}

// ---------------------------------------------------------------------------
// Distributions and losses
// ---------------------------------------------------------------------------

/// Row-wise softmax: [B,K] -> [B,K].
template <class T>
Var<T> softmax_rows(const Var<T>& x) {
  const Tensor<T>& xv = x->value;
  if (xv.ndim() != 2) throw InvalidInput("softmax_rows: expected [B,K]");
  const int B = xv.dim(0), K = xv.dim(1);
  Tensor<T> out({B, K});
  for (int b = 0; b < B; ++b) {
    const T* row = &xv(b, 0);
    T m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    T z = T{0};
    T* orow = &out(b, 0);
    for (int k = 0; k < K; ++k) {
      orow[k] = std::exp(row[k] - m);
      z += orow[k];
    }
    for (int k = 0; k < K; ++k) orow[k] /= z;
  }
  auto node = detail::make_op(std::move(out), {x});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* xp = x.get();
    node->backprop = [o, xp, B, K]() {
      xp->ensure_grad();
      for (int b = 0; b < B; ++b) {
        const T* p = &o->value(b, 0);
        const T* g = &o->grad(b, 0);
        T dot = T{0};
        for (int k = 0; k < K; ++k) dot += g[k] * p[k];
        T* dx = &xp->grad(b, 0);
        for (int k = 0; k < K; ++k) dx[k] += p[k] * (g[k] - dot);
      }
    };
  }
  return node;
}

/// Mean over rows of KL(p_b || q_b) with q floored at `floor` and the
/// convention 0 * ln(0/q) = 0.
template <class T>
Var<T> kl_mean(const Var<T>& p, const Var<T>& q, T floor = T{1e-8}) {
  const Tensor<T>& pv = p->value;
  const Tensor<T>& qv = q->value;
  if (!pv.same_shape(qv) || pv.ndim() != 2) {
    throw InvalidInput("kl_mean: expected matching [B,K] inputs");
  }
  const int B = pv.dim(0), K = pv.dim(1);
  T total = T{0};
  for (int b = 0; b < B; ++b) {
    for (int k = 0; k < K; ++k) {
      const T pi = pv(b, k);
      if (pi <= T{0}) continue;
      const T qi = std::max(qv(b, k), floor);
      total += pi * std::log(pi / qi);
    }
  }
  Tensor<T> out({1});
  out[0] = total / static_cast<T>(B);
  auto node = detail::make_op(std::move(out), {p, q});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* pp = p.get();
    Node<T>* qp = q.get();
    node->backprop = [o, pp, qp, B, K, floor]() {
      const T g = o->grad[0] / static_cast<T>(B);
      if (pp->requires_grad) pp->ensure_grad();
      if (qp->requires_grad) qp->ensure_grad();
      for (int b = 0; b < B; ++b) {
        for (int k = 0; k < K; ++k) {
          const T pi = pp->value(b, k);
          if (pi <= T{0}) continue;
          const T qraw = qp->value(b, k);
          const T qi = std::max(qraw, floor);
          if (pp->requires_grad) {
            pp->grad(b, k) += g * (std::log(pi / qi) + T{1});
          }
          if (qp->requires_grad && qraw > floor) {
            qp->grad(b, k) += -g * pi / qi;
          }
        }
      }
    };
  }
  return node;
}

/// Mean binary cross entropy of probabilities p against fixed labels y.
template <class T>
Var<T> bce_mean(const Var<T>& p, const std::vector<T>& y) {
  const Tensor<T>& pv = p->value;
  if (pv.ndim() != 1 || pv.dim(0) != static_cast<int>(y.size())) {
    throw InvalidInput("bce_mean: probabilities/labels length mismatch");
  }
  const int P = pv.dim(0);
  constexpr T kEps = T{1e-12};
  T total = T{0};
  for (int i = 0; i < P; ++i) {
    const T pi = std::clamp(pv(i), kEps, T{1} - kEps);
    total += -(y[static_cast<std::size_t>(i)] * std::log(pi) +
               (T{1} - y[static_cast<std::size_t>(i)]) * std::log(T{1} - pi));
  }
  Tensor<T> out({1});
  out[0] = total / static_cast<T>(P);
  auto node = detail::make_op(std::move(out), {p});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* pp = p.get();
    node->backprop = [o, pp, P, y]() {
      pp->ensure_grad();
      constexpr T kEps = T{1e-12};
      const T g = o->grad[0] / static_cast<T>(P);
      for (int i = 0; i < P; ++i) {
        const T pi = std::clamp(pp->value(i), kEps, T{1} - kEps);
        pp->grad(i) += g * (pi - y[static_cast<std::size_t>(i)]) /
                       (pi * (T{1} - pi));
      }
    };
  }
  return node;
}

/// Mean cross entropy from logits [B,K] against integer labels in [0,K).
template <class T>
Var<T> ce_mean(const Var<T>& logits, const std::vector<int>& labels) {
  const Tensor<T>& zv = logits->value;
  if (zv.ndim() != 2 || zv.dim(0) != static_cast<int>(labels.size())) {
    throw InvalidInput("ce_mean: logits/labels mismatch");
  }
  const int B = zv.dim(0), K = zv.dim(1);
  for (const int l : labels) {
    if (l < 0 || l >= K) throw InvalidInput("ce_mean: label out of range");
  }
  T total = T{0};
  for (int b = 0; b < B; ++b) {
    const T* row = &zv(b, 0);
    T m = row[0];
    for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
    T z = T{0};
    for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
    total += (m + std::log(z)) - row[labels[static_cast<std::size_t>(b)]];
  }
  Tensor<T> out({1});
  out[0] = total / static_cast<T>(B);
  auto node = detail::make_op(std::move(out), {logits});
  if (node->requires_grad) {
    Node<T>* o = node.get();
    Node<T>* zp = logits.get();
    node->backprop = [o, zp, B, K, labels]() {
      zp->ensure_grad();
      const T g = o->grad[0] / static_cast<T>(B);
      for (int b = 0; b < B; ++b) {
        const T* row = &zp->value(b, 0);
        T m = row[0];
        for (int k = 1; k < K; ++k) m = std::max(m, row[k]);
        T z = T{0};
        for (int k = 0; k < K; ++k) z += std::exp(row[k] - m);
        T* drow = &zp->grad(b, 0);
        for (int k = 0; k < K; ++k) {
          T p = std::exp(row[k] - m) / z;
          if (k == labels[static_cast<std::size_t>(b)]) p -= T{1};
          drow[k] += g * p;
        }
      }
    };
  }
  return node;
}

using RVar = Var<double>;

}  // namespace soundloc::ag
