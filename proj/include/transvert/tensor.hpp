#pragma once

// Dense 5-D tensors on a reverse-mode differentiation tape.
//
// Every tensor has layout (N, C, D, H, W) with W fastest; lower-rank data
// uses leading singleton axes. The tape records nodes in creation order
// (which is a topological order); backward() walks the subgraph that can
// influence the root in exact reverse order, accumulating gradients
// additively. Scalar type T is float for training and double for
// finite-difference gradient checks.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "transvert/common.hpp"

namespace transvert::ad {

using Shape5 = std::array<int, 5>;

inline std::int64_t numel(const Shape5& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline bool same_shape(const Shape5& a, const Shape5& b) { return a == b; }

template <typename T>
class Tape;

/// Lightweight handle to a tape node.
template <typename T>
struct Tensor {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Shape5& shape() const;
  std::int64_t numel() const { return ad::numel(shape()); }
  std::vector<T>& value();
  const std::vector<T>& value() const;
  std::vector<T>& grad();
  bool requires_grad() const;
};

template <typename T>
class Tape {
 public:
  struct Node {
    Shape5 shape{1, 1, 1, 1, 1};
    std::vector<T> value;
    std::vector<T> grad;  // allocated iff requires_grad
    bool requires_grad = false;
    std::vector<int> inputs;
    std::function<void(Tape&)> backward;  // null for leaves/constants
  };

  std::vector<Node> nodes;

  Node& node(int id) { return nodes.at(std::size_t(id)); }
  const Node& node(int id) const { return nodes.at(std::size_t(id)); }

  Tensor<T> make(const Shape5& shape, std::vector<T> value, bool requires_grad,
                 std::vector<int> inputs = {},
                 std::function<void(Tape&)> backward = nullptr) {
    if (std::int64_t(value.size()) != ad::numel(shape))
      throw DataError("tensor value size does not match shape");
    Node n;
    n.shape = shape;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    n.inputs = std::move(inputs);
    n.backward = std::move(backward);
    if (requires_grad) n.grad.assign(n.value.size(), T(0));
    nodes.push_back(std::move(n));
    return Tensor<T>{this, int(nodes.size()) - 1};
  }

  Tensor<T> constant(const Shape5& shape, std::vector<T> value) {
    return make(shape, std::move(value), false);
  }

  Tensor<T> constant_fill(const Shape5& shape, T v) {
    return make(shape, std::vector<T>(std::size_t(ad::numel(shape)), v), false);
  }

  /// Differentiable input (parameter) node; gradients accumulate in grad.
  Tensor<T> leaf(const Shape5& shape, std::vector<T> value) {
    return make(shape, std::move(value), true);
  }

  void zero_grad() {
    for (Node& n : nodes)
      if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), T(0));
  }

  /// Reverse pass from a scalar root. Only nodes that can influence the
  /// root (reached through `inputs` edges of grad-requiring nodes) run
  /// their backward closure, in exact reverse creation order.
  void backward(const Tensor<T>& root) {
    if (root.tape != this) throw DataError("backward: tensor not on this tape");
    Node& r = node(root.id);
    if (ad::numel(r.shape) != 1) throw DataError("backward: root must be scalar");
    if (!r.requires_grad) return;
    std::vector<char> needed(nodes.size(), 0);
    needed[std::size_t(root.id)] = 1;
    for (int i = root.id; i >= 0; --i) {
      if (!needed[std::size_t(i)]) continue;
      for (int in : nodes[std::size_t(i)].inputs)
        if (nodes[std::size_t(in)].requires_grad) needed[std::size_t(in)] = 1;
    }
    r.grad[0] += T(1);
    for (int i = root.id; i >= 0; --i) {
      Node& n = nodes[std::size_t(i)];
      if (needed[std::size_t(i)] && n.backward) n.backward(*this);
    }
  }
};

template <typename T>
const Shape5& Tensor<T>::shape() const {
  return tape->node(id).shape;
}
template <typename T>
std::vector<T>& Tensor<T>::value() {
  return tape->node(id).value;
}
template <typename T>
const std::vector<T>& Tensor<T>::value() const {
  return tape->node(id).value;
}
template <typename T>
std::vector<T>& Tensor<T>::grad() {
  return tape->node(id).grad;
}
template <typename T>
bool Tensor<T>::requires_grad() const {
  return tape->node(id).requires_grad;
}

namespace detail {

template <typename T>
Tape<T>& tape_of(const Tensor<T>& a) {
  if (!a.valid()) throw DataError("operation on an invalid tensor");
  return *a.tape;
}

template <typename T>
void check_same_tape(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.tape != b.tape) throw DataError("operands live on different tapes");
}

/// Create a node whose backward closure receives (tape, own node id).
template <typename T, typename F>
Tensor<T> make_op(Tape<T>& t, const Shape5& shape, std::vector<T> value,
                  bool requires_grad, std::vector<int> inputs, F&& backward) {
  Tensor<T> out = t.make(shape, std::move(value), requires_grad, std::move(inputs));
  if (requires_grad) {
    const int oid = out.id;
    t.node(oid).backward = [oid, fn = std::forward<F>(backward)](Tape<T>& tp) {
      fn(tp, oid);
    };
  }
  return out;
}

/// Flat strides (in elements) of a 5-D shape, with 0 for broadcast axes
/// relative to a reference shape.
inline std::array<std::int64_t, 5> broadcast_strides(const Shape5& s,
                                                     const Shape5& out) {
  std::array<std::int64_t, 5> st{};
  std::int64_t acc = 1;
  for (int ax = 4; ax >= 0; --ax) {
    st[std::size_t(ax)] = (s[std::size_t(ax)] == 1 && out[std::size_t(ax)] != 1)
                              ? 0
                              : acc;
    acc *= s[std::size_t(ax)];
  }
  return st;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic (matching shapes)
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(Tensor<T> a, Tensor<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& t = detail::tape_of(a);
  if (!same_shape(a.shape(), b.shape())) throw DataError("add: shape mismatch");
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const int ia = a.id, ib = b.id;
  return detail::make_op(t, a.shape(), std::move(out),
                         a.requires_grad() || b.requires_grad(), {ia, ib},
                         [ia, ib](Tape<T>& tp, int oid) {
                           const auto& g = tp.node(oid).grad;
                           if (tp.node(ia).requires_grad) {
                             auto& ga = tp.node(ia).grad;
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (tp.node(ib).requires_grad) {
                             auto& gb = tp.node(ib).grad;
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                           }
                         });
}

template <typename T>
Tensor<T> sub(Tensor<T> a, Tensor<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& t = detail::tape_of(a);
  if (!same_shape(a.shape(), b.shape())) throw DataError("sub: shape mismatch");
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const int ia = a.id, ib = b.id;
  return detail::make_op(t, a.shape(), std::move(out),
                         a.requires_grad() || b.requires_grad(), {ia, ib},
                         [ia, ib](Tape<T>& tp, int oid) {
                           const auto& g = tp.node(oid).grad;
                           if (tp.node(ia).requires_grad) {
                             auto& ga = tp.node(ia).grad;
                             for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                           }
                           if (tp.node(ib).requires_grad) {
                             auto& gb = tp.node(ib).grad;
                             for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                           }
                         });
}

template <typename T>
Tensor<T> mul(Tensor<T> a, Tensor<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& t = detail::tape_of(a);
  if (!same_shape(a.shape(), b.shape())) throw DataError("mul: shape mismatch");
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const int ia = a.id, ib = b.id;
  return detail::make_op(
      t, a.shape(), std::move(out), a.requires_grad() || b.requires_grad(),
      {ia, ib}, [ia, ib](Tape<T>& tp, int oid) {
        const auto& g = tp.node(oid).grad;
        if (tp.node(ia).requires_grad) {
          auto& ga = tp.node(ia).grad;
          const auto& bv2 = tp.node(ib).value;
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv2[i];
        }
        if (tp.node(ib).requires_grad) {
          auto& gb = tp.node(ib).grad;
          const auto& av2 = tp.node(ia).value;
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av2[i];
        }
      });
}

/// a * s for a compile-time-known scalar s (not a tape node).
template <typename T>
Tensor<T> scale(Tensor<T> a, T s) {
  Tape<T>& t = detail::tape_of(a);
  const auto& av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  const int ia = a.id;
  return detail::make_op(t, a.shape(), std::move(out), a.requires_grad(), {ia},
                         [ia, s](Tape<T>& tp, int oid) {
                           const auto& g = tp.node(oid).grad;
                           auto& ga = tp.node(ia).grad;
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                         });
}

/// Elementwise product with NumPy-style broadcasting: every axis must match
/// or be 1 in either operand. Used to apply a 1-channel attention map and to
/// rescale a weight tensor by a scalar.
template <typename T>
Tensor<T> mul_broadcast(Tensor<T> a, Tensor<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& t = detail::tape_of(a);
  const Shape5 &sa = a.shape(), &sb = b.shape();
  Shape5 so{};
  for (std::size_t ax = 0; ax < 5; ++ax) {
    const int da = sa[ax], db = sb[ax];
    if (da != db && da != 1 && db != 1)
      throw DataError("mul_broadcast: incompatible shapes");
    so[ax] = std::max(da, db);
  }
  const auto stao = detail::broadcast_strides(sa, so);
  const auto stbo = detail::broadcast_strides(sb, so);
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> out(std::size_t(numel(so)));
  std::size_t o = 0;
  for (int n = 0; n < so[0]; ++n)
    for (int c = 0; c < so[1]; ++c)
      for (int d = 0; d < so[2]; ++d)
        for (int h = 0; h < so[3]; ++h)
          for (int w = 0; w < so[4]; ++w, ++o) {
            const std::int64_t ja = n * stao[0] + c * stao[1] + d * stao[2] +
                                    h * stao[3] + w * stao[4];
            const std::int64_t jb = n * stbo[0] + c * stbo[1] + d * stbo[2] +
                                    h * stbo[3] + w * stbo[4];
            out[o] = av[std::size_t(ja)] * bv[std::size_t(jb)];
          }
  const int ia = a.id, ib = b.id;
  return detail::make_op(
      t, so, std::move(out), a.requires_grad() || b.requires_grad(), {ia, ib},
      [ia, ib, so, stao, stbo](Tape<T>& tp, int oid) {
        const auto& g = tp.node(oid).grad;
        const bool na = tp.node(ia).requires_grad;
        const bool nb = tp.node(ib).requires_grad;
        const auto& av2 = tp.node(ia).value;
        const auto& bv2 = tp.node(ib).value;
        auto* ga = na ? &tp.node(ia).grad : nullptr;
        auto* gb = nb ? &tp.node(ib).grad : nullptr;
        std::size_t o = 0;
        for (int n = 0; n < so[0]; ++n)
          for (int c = 0; c < so[1]; ++c)
            for (int d = 0; d < so[2]; ++d)
              for (int h = 0; h < so[3]; ++h)
                for (int w = 0; w < so[4]; ++w, ++o) {
                  const std::size_t ja =
                      std::size_t(n * stao[0] + c * stao[1] + d * stao[2] +
                                  h * stao[3] + w * stao[4]);
                  const std::size_t jb =
                      std::size_t(n * stbo[0] + c * stbo[1] + d * stbo[2] +
                                  h * stbo[3] + w * stbo[4]);
                  if (na) (*ga)[ja] += g[o] * bv2[jb];
                  if (nb) (*gb)[jb] += g[o] * av2[ja];
                }
      });
}

// ---------------------------------------------------------------------------
// Nonlinearities
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(Tensor<T> a) {
  Tape<T>& t = detail::tape_of(a);
  const auto& av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] > T(0) ? av[i] : T(0);
  const int ia = a.id;
  return detail::make_op(t, a.shape(), std::move(out), a.requires_grad(), {ia},
                         [ia](Tape<T>& tp, int oid) {
                           const auto& g = tp.node(oid).grad;
                           const auto& x = tp.node(ia).value;
                           auto& ga = tp.node(ia).grad;
                           for (std::size_t i = 0; i < g.size(); ++i)
                             if (x[i] > T(0)) ga[i] += g[i];
                         });
}

template <typename T>
Tensor<T> sigmoid(Tensor<T> a) {
  Tape<T>& t = detail::tape_of(a);
  const auto& av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(1) / (T(1) + std::exp(-av[i]));
  const int ia = a.id;
  return detail::make_op(t, a.shape(), std::move(out), a.requires_grad(), {ia},
                         [ia](Tape<T>& tp, int oid) {
                           const auto& g = tp.node(oid).grad;
                           const auto& y = tp.node(oid).value;
                           auto& ga = tp.node(ia).grad;
                           for (std::size_t i = 0; i < g.size(); ++i)
                             ga[i] += g[i] * y[i] * (T(1) - y[i]);
                         });
}

/// Elementwise 1/x. Inputs must be nonzero.
template <typename T>
Tensor<T> reciprocal(Tensor<T> a) {
  Tape<T>& t = detail::tape_of(a);
  const auto& av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (av[i] == T(0)) throw NumericError("reciprocal of zero");
    out[i] = T(1) / av[i];
  }
  const int ia = a.id;
  return detail::make_op(t, a.shape(), std::move(out), a.requires_grad(), {ia},
                         [ia](Tape<T>& tp, int oid) {
                           const auto& g = tp.node(oid).grad;
                           const auto& y = tp.node(oid).value;
                           auto& ga = tp.node(ia).grad;
                           for (std::size_t i = 0; i < g.size(); ++i)
                             ga[i] -= g[i] * y[i] * y[i];
                         });
}

// ---------------------------------------------------------------------------
// Structure: concat / reshape
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat(Tensor<T> a, Tensor<T> b, int axis) {
  detail::check_same_tape(a, b);
  Tape<T>& t = detail::tape_of(a);
  if (axis < 0 || axis > 4) throw DataError("concat: axis out of range");
  const Shape5 &sa = a.shape(), &sb = b.shape();
  for (int ax = 0; ax < 5; ++ax)
    if (ax != axis && sa[std::size_t(ax)] != sb[std::size_t(ax)])
      throw DataError("concat: shape mismatch off the concat axis");
  Shape5 so = sa;
  so[std::size_t(axis)] = sa[std::size_t(axis)] + sb[std::size_t(axis)];
  // outer = product of dims before axis, inner = product after.
  std::int64_t outer = 1, inner = 1;
  for (int ax = 0; ax < axis; ++ax) outer *= sa[std::size_t(ax)];
  for (int ax = axis + 1; ax < 5; ++ax) inner *= sa[std::size_t(ax)];
  const std::int64_t la = sa[std::size_t(axis)] * inner;
  const std::int64_t lb = sb[std::size_t(axis)] * inner;
  const auto& av = a.value();
  const auto& bv = b.value();
  std::vector<T> out(std::size_t(numel(so)));
  for (std::int64_t u = 0; u < outer; ++u) {
    std::copy_n(av.begin() + u * la, la, out.begin() + u * (la + lb));
    std::copy_n(bv.begin() + u * lb, lb, out.begin() + u * (la + lb) + la);
  }
  const int ia = a.id, ib = b.id;
  return detail::make_op(
      t, so, std::move(out), a.requires_grad() || b.requires_grad(), {ia, ib},
      [ia, ib, outer, la, lb](Tape<T>& tp, int oid) {
        const auto& g = tp.node(oid).grad;
        for (std::int64_t u = 0; u < outer; ++u) {
          if (tp.node(ia).requires_grad) {
            auto& ga = tp.node(ia).grad;
            for (std::int64_t i = 0; i < la; ++i)
              ga[std::size_t(u * la + i)] += g[std::size_t(u * (la + lb) + i)];
          }
          if (tp.node(ib).requires_grad) {
            auto& gb = tp.node(ib).grad;
            for (std::int64_t i = 0; i < lb; ++i)
              gb[std::size_t(u * lb + i)] += g[std::size_t(u * (la + lb) + la + i)];
          }
        }
      });
}

template <typename T>
Tensor<T> reshape(Tensor<T> a, const Shape5& s) {
  Tape<T>& t = detail::tape_of(a);
  if (numel(s) != a.numel()) throw DataError("reshape: element count mismatch");
  std::vector<T> out = a.value();
  const int ia = a.id;
  return detail::make_op(t, s, std::move(out), a.requires_grad(), {ia},
                         [ia](Tape<T>& tp, int oid) {
                           const auto& g = tp.node(oid).grad;
                           auto& ga = tp.node(ia).grad;
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         });
}

// ---------------------------------------------------------------------------
// Reductions / losses
// ---------------------------------------------------------------------------

/// Mean absolute difference, as a scalar node. d(mean|a-b|)/da = sign/n with
/// sign(0) treated as 0.
template <typename T>
Tensor<T> l1_loss(Tensor<T> a, Tensor<T> b) {
  detail::check_same_tape(a, b);
  Tape<T>& t = detail::tape_of(a);
  if (!same_shape(a.shape(), b.shape())) throw DataError("l1_loss: shape mismatch");
  const auto& av = a.value();
  const auto& bv = b.value();
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += std::abs(double(av[i]) - double(bv[i]));
  const T n = T(av.size());
  const int ia = a.id, ib = b.id;
  return detail::make_op(
      t, Shape5{1, 1, 1, 1, 1}, {T(acc / double(av.size()))},
      a.requires_grad() || b.requires_grad(), {ia, ib},
      [ia, ib, n](Tape<T>& tp, int oid) {
        const T g = tp.node(oid).grad[0] / n;
        const auto& av2 = tp.node(ia).value;
        const auto& bv2 = tp.node(ib).value;
        const bool na = tp.node(ia).requires_grad;
        const bool nb = tp.node(ib).requires_grad;
        for (std::size_t i = 0; i < av2.size(); ++i) {
          const T d = av2[i] - bv2[i];
          const T s = d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0));
          if (na) tp.node(ia).grad[i] += g * s;
          if (nb) tp.node(ib).grad[i] -= g * s;
        }
      });
}

/// mean((a - c)^2) against a constant scalar target c, as a scalar node.
template <typename T>
Tensor<T> squared_error(Tensor<T> a, T c) {
  Tape<T>& t = detail::tape_of(a);
  const auto& av = a.value();
  if (av.empty()) throw DataError("squared_error: empty tensor");
  double acc = 0.0;
  for (T v : av) acc += (double(v) - double(c)) * (double(v) - double(c));
  const T n = T(av.size());
  const int ia = a.id;
  return detail::make_op(t, Shape5{1, 1, 1, 1, 1}, {T(acc / double(av.size()))},
                         a.requires_grad(), {ia}, [ia, c, n](Tape<T>& tp, int oid) {
                           const T g = tp.node(oid).grad[0] * T(2) / n;
                           const auto& av2 = tp.node(ia).value;
                           auto& ga = tp.node(ia).grad;
                           for (std::size_t i = 0; i < av2.size(); ++i)
                             ga[i] += g * (av2[i] - c);
                         });
}

/// sum_i coeffs[i] * a[i], as a scalar node (coeffs are plain numbers, not
/// tape nodes). Used for the power-iteration singular-value estimate.
template <typename T>
Tensor<T> weighted_sum(Tensor<T> a, std::shared_ptr<const std::vector<T>> coeffs) {
  Tape<T>& t = detail::tape_of(a);
  const auto& av = a.value();
  if (!coeffs || coeffs->size() != av.size())
    throw DataError("weighted_sum: coefficient size mismatch");
  double acc = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += double(av[i]) * double((*coeffs)[i]);
  const int ia = a.id;
  return detail::make_op(t, Shape5{1, 1, 1, 1, 1}, {T(acc)}, a.requires_grad(), {ia},
                         [ia, coeffs](Tape<T>& tp, int oid) {
                           const T g = tp.node(oid).grad[0];
                           auto& ga = tp.node(ia).grad;
                           for (std::size_t i = 0; i < ga.size(); ++i)
                             ga[i] += g * (*coeffs)[i];
                         });
}

}  // namespace transvert::ad
