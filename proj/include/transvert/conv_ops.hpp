#pragma once

// 3-D convolution, transposed convolution, replication padding, and batch
// normalization as tape ops.
//
// Layout: activations (N, C, D, H, W) with W fastest; conv weights
// (OC, IC, kD, kH, kW); transposed-conv weights (IC, OC, kD, kH, kW); bias
// (1, C, 1, 1, 1). All kernels assign each output (or gradient) slab to
// exactly one worker with a fixed inner loop order, so results are bitwise
// identical for any thread count.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#ifdef TRANSVERT_HAS_OPENMP
#include <omp.h>
#endif

#include "transvert/tensor.hpp"

namespace transvert::ad {

using Dims3 = std::array<int, 3>;

namespace detail {

inline int ceil_div(int a, int b) {  // b > 0
  return a >= 0 ? (a + b - 1) / b : -((-a) / b);
}
inline int floor_div(int a, int b) {  // b > 0
  return a >= 0 ? a / b : -((-a + b - 1) / b);
}

/// Range of output indices o with 0 <= o*s - p + k <= n-1, clipped to
/// [0, limit). Returns {lo, hi_exclusive}.
inline std::array<int, 2> conv_span(int n, int k, int s, int p, int limit) {
  int lo = std::max(0, ceil_div(p - k, s));
  int hi = std::min(limit - 1, floor_div(n - 1 + p - k, s));
  return {lo, hi + 1};
}

struct ConvDims {
  int N, IC, OC;
  Dims3 in, k, out, s, p;
};

inline constexpr int kDotLanes = 16;

/// y[0..n) += a * x[0..n). Contiguous, alias-free, auto-vectorizable.
template <typename T>
inline void axpy_n(const T a, const T* __restrict x, T* __restrict y,
                   const std::int64_t n) {
  for (std::int64_t i = 0; i < n; ++i) y[i] += a * x[i];
}

/// dot(x, y) with a fixed lane-wise accumulation order so the result does not
/// depend on thread count, while still vectorizing without relaxed FP rules.
template <typename T>
inline T dot_n(const T* __restrict x, const T* __restrict y, const std::int64_t n) {
  T acc[kDotLanes] = {};
  std::int64_t i = 0;
  for (; i + kDotLanes <= n; i += kDotLanes)
    for (int l = 0; l < kDotLanes; ++l) acc[l] += x[i + l] * y[i + l];
  for (int l = 0; i < n; ++i, ++l) acc[l] += x[i] * y[i];
  T s = T(0);
  for (int l = 0; l < kDotLanes; ++l) s += acc[l];
  return s;
}

/// Packs one depth slice of a channel plane into tap-major rows:
///   R[(kd*k1+kh)*k2+kw][oh*dst2+ow] = src[od*s0+kd-p0][oh*s1+kh-p1][ow*s2+kw-p2]
/// with zeros wherever the source index leaves src_dims. Rows are fully
/// overwritten, so the scratch needs no prior clearing. One pack serves every
/// output channel of the slice, which keeps its cost a small fraction of the
/// multiply-accumulate work.
template <typename T>
void pack_shifted_rows(const T* src, const Dims3& src_dims, const Dims3& k,
                       const Dims3& s, const Dims3& p, const Dims3& dst, const int od,
                       T* R) {
  const std::int64_t plane = std::int64_t(dst[1]) * dst[2];
  for (int kd = 0; kd < k[0]; ++kd) {
    T* slab = R + std::int64_t(kd) * k[1] * k[2] * plane;
    const int id = od * s[0] + kd - p[0];
    if (id < 0 || id >= src_dims[0]) {
      std::fill(slab, slab + std::int64_t(k[1]) * k[2] * plane, T(0));
      continue;
    }
    for (int kh = 0; kh < k[1]; ++kh) {
      const auto [h0, h1] = conv_span(src_dims[1], kh, s[1], p[1], dst[1]);
      for (int kw = 0; kw < k[2]; ++kw) {
        const auto [w0, w1] = conv_span(src_dims[2], kw, s[2], p[2], dst[2]);
        T* row = slab + (std::int64_t(kh) * k[2] + kw) * plane;
        if (h0 >= h1 || w0 >= w1) {
          std::fill(row, row + plane, T(0));
          continue;
        }
        if (h0 > 0) std::fill(row, row + std::int64_t(h0) * dst[2], T(0));
        if (h1 < dst[1]) std::fill(row + std::int64_t(h1) * dst[2], row + plane, T(0));
        for (int oh = h0; oh < h1; ++oh) {
          const int ih = oh * s[1] + kh - p[1];
          const T* xr = src + (std::int64_t(id) * src_dims[1] + ih) * src_dims[2];
          T* rr = row + std::int64_t(oh) * dst[2];
          if (w0 > 0) std::fill(rr, rr + w0, T(0));
          if (w1 < dst[2]) std::fill(rr + w1, rr + dst[2], T(0));
          if (s[2] == 1) {
            std::copy(xr + (w0 + kw - p[2]), xr + (w1 + kw - p[2]), rr + w0);
          } else {
            for (int ow = w0; ow < w1; ++ow) rr[ow] = xr[ow * s[2] + kw - p[2]];
          }
        }
      }
    }
  }
}

/// One destination depth slice of the stride-s gather
///   dst[od][oh][ow] (+)= sum_k src[(od+p0-kd)/s0][(oh+p1-kh)/s1][(ow+p2-kw)/s2]
/// (exact divisions only), decomposed so no zero filler is ever multiplied:
/// taps whose depth division cannot hit slice od are dropped, and each
/// surviving tap works on the compact sub-plane of its (oh mod s1, ow mod s2)
/// residue class. The residue sub-planes tile the accumulator, which holds
/// exactly dst[1]*dst[2] elements and is interleaved into the destination row
/// once per channel. Used by transposed-convolution forward passes and by
/// convolution input gradients.
struct GatherSlice {
  struct Tap {
    int k;               // flat kernel index (kd*k1 + kh)*k2 + kw
    int kh, kw, id;      // in-plane taps and resolved source depth index
    int rh, rw, Hr, Wr;  // residue class and its sub-plane extent
    std::int64_t row;    // packed-row offset
    std::int64_t acc;    // accumulator sub-plane offset
  };

  Dims3 k_, s_, p_, src_, dst_;
  std::int64_t plane;  // dst[1] * dst[2] == accumulator size
  std::vector<Tap> taps;
  std::int64_t pack_size = 0;
  std::vector<std::int64_t> acc_off_;

  GatherSlice(const Dims3& k, const Dims3& s, const Dims3& p, const Dims3& src,
              const Dims3& dst)
      : k_(k), s_(s), p_(p), src_(src), dst_(dst),
        plane(std::int64_t(dst[1]) * dst[2]) {}

  static int mod(int a, int m) {
    const int r = a % m;
    return r < 0 ? r + m : r;
  }
  static int sub_len(int n, int s, int r) { return r < n ? (n - r + s - 1) / s : 0; }

  void build(int od) {
    taps.clear();
    pack_size = 0;
    const int s1 = s_[1], s2 = s_[2];
    acc_off_.assign(std::size_t(s1) * s2, 0);
    std::int64_t off = 0;
    for (int rh = 0; rh < s1; ++rh)
      for (int rw = 0; rw < s2; ++rw) {
        acc_off_[std::size_t(rh) * s2 + rw] = off;
        off += std::int64_t(sub_len(dst_[1], s1, rh)) * sub_len(dst_[2], s2, rw);
      }
    for (int kd = 0; kd < k_[0]; ++kd) {
      const int dnum = od + p_[0] - kd;
      if (dnum < 0 || dnum % s_[0] != 0 || dnum / s_[0] >= src_[0]) continue;
      for (int kh = 0; kh < k_[1]; ++kh) {
        const int rh = mod(kh - p_[1], s1);
        const int Hr = sub_len(dst_[1], s1, rh);
        for (int kw = 0; kw < k_[2]; ++kw) {
          const int rw = mod(kw - p_[2], s2);
          const int Wr = sub_len(dst_[2], s2, rw);
          Tap t;
          t.k = (kd * k_[1] + kh) * k_[2] + kw;
          t.kh = kh;
          t.kw = kw;
          t.id = dnum / s_[0];
          t.rh = rh;
          t.rw = rw;
          t.Hr = Hr;
          t.Wr = Wr;
          t.row = pack_size;
          t.acc = acc_off_[std::size_t(rh) * s2 + rw];
          pack_size += std::int64_t(Hr) * Wr;
          taps.push_back(t);
        }
      }
    }
  }

  /// Fill the packed rows for one source channel plane. Row entries outside
  /// the source extent are zeroed; interior spans are contiguous copies.
  template <typename T>
  void pack(const T* src, T* R) const {
    for (const Tap& t : taps) {
      const T* sp = src + std::int64_t(t.id) * src_[1] * src_[2];
      for (int a = 0; a < t.Hr; ++a) {
        T* rr = R + t.row + std::int64_t(a) * t.Wr;
        const int ih = (t.rh + a * s_[1] + p_[1] - t.kh) / s_[1];  // exact
        if (ih < 0 || ih >= src_[1]) {
          std::fill(rr, rr + t.Wr, T(0));
          continue;
        }
        const int iw0 = (t.rw + p_[2] - t.kw) / s_[2];  // exact
        const int lo = std::max(0, -iw0);
        const int hi = std::min(t.Wr, src_[2] - iw0);
        if (lo > 0) std::fill(rr, rr + std::min(lo, t.Wr), T(0));
        if (hi < t.Wr) std::fill(rr + std::max(hi, 0), rr + t.Wr, T(0));
        if (lo < hi) {
          const T* srow = sp + std::int64_t(ih) * src_[2];
          std::copy(srow + iw0 + lo, srow + iw0 + hi, rr + lo);
        }
      }
    }
  }

  /// Interleave the accumulator's residue sub-planes into a destination row
  /// of dst[1]*dst[2] elements (assignment or accumulation).
  template <typename T>
  void scatter(T* dst_row, const T* acc, const bool add) const {
    const int s1 = s_[1], s2 = s_[2];
    for (int rh = 0; rh < s1; ++rh) {
      const int Hr = sub_len(dst_[1], s1, rh);
      for (int rw = 0; rw < s2; ++rw) {
        const int Wr = sub_len(dst_[2], s2, rw);
        const T* ap = acc + acc_off_[std::size_t(rh) * s2 + rw];
        for (int a = 0; a < Hr; ++a) {
          T* dp = dst_row + (std::int64_t(rh) + std::int64_t(a) * s1) * dst_[2] + rw;
          const T* sp = ap + std::int64_t(a) * Wr;
          if (s2 == 1) {
            if (add) {
              for (int j = 0; j < Wr; ++j) dp[j] += sp[j];
            } else {
              std::copy(sp, sp + Wr, dp);
            }
          } else {
            if (add) {
              for (int j = 0; j < Wr; ++j) dp[std::int64_t(j) * s2] += sp[j];
            } else {
              for (int j = 0; j < Wr; ++j) dp[std::int64_t(j) * s2] = sp[j];
            }
          }
        }
      }
    }
  }
};

template <typename T>
ConvDims conv_dims(const Shape5& xs, const Shape5& ws, const Shape5& bs,
                   const Dims3& stride, const Dims3& pad) {
  ConvDims d;
  d.N = xs[0];
  d.IC = xs[1];
  d.OC = ws[0];
  if (ws[1] != d.IC) throw DataError("conv3d: weight/input channel mismatch");
  if (bs != Shape5{1, d.OC, 1, 1, 1}) throw DataError("conv3d: bias must be (1,OC,1,1,1)");
  d.in = {xs[2], xs[3], xs[4]};
  d.k = {ws[2], ws[3], ws[4]};
  d.s = stride;
  d.p = pad;
  for (int ax = 0; ax < 3; ++ax) {
    if (d.s[ax] <= 0 || d.p[ax] < 0) throw DataError("conv3d: bad stride/pad");
    d.out[ax] = (d.in[ax] + 2 * d.p[ax] - d.k[ax]) / d.s[ax] + 1;
    if (d.in[ax] + 2 * d.p[ax] - d.k[ax] < 0 || d.out[ax] <= 0)
      throw DataError("conv3d: non-positive output dimension");
  }
  return d;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv3d
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv3d(Tensor<T> x, Tensor<T> w, Tensor<T> b, const Dims3& stride,
                 const Dims3& pad) {
  detail::check_same_tape(x, w);
  detail::check_same_tape(x, b);
  Tape<T>& t = detail::tape_of(x);
  const auto d = detail::conv_dims<T>(x.shape(), w.shape(), b.shape(), stride, pad);
  const Shape5 so{d.N, d.OC, d.out[0], d.out[1], d.out[2]};
  std::vector<T> out(std::size_t(numel(so)));

  const T* xv = x.value().data();
  const T* wv = w.value().data();
  const T* bv = b.value().data();
  const std::int64_t x_c = std::int64_t(d.in[0]) * d.in[1] * d.in[2];
  const std::int64_t k_c = std::int64_t(d.k[0]) * d.k[1] * d.k[2];

  // One depth slice at a time: pack the input rows once per input channel,
  // then each output channel reduces them with contiguous axpy updates. The
  // per-element accumulation order is (ic, kd, kh, kw) and each output row has
  // a single writer, so results are bitwise identical for any thread count.
  const std::int64_t plane = std::int64_t(d.out[1]) * d.out[2];
  std::vector<T> pack(std::size_t(k_c * plane));
  for (int n = 0; n < d.N; ++n)
    for (int od = 0; od < d.out[0]; ++od)
      for (int ic = 0; ic < d.IC; ++ic) {
        detail::pack_shifted_rows(xv + (std::int64_t(n) * d.IC + ic) * x_c, d.in, d.k,
                                  d.s, d.p, d.out, od, pack.data());
#ifdef TRANSVERT_HAS_OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1)
#endif
        for (int oc = 0; oc < d.OC; ++oc) {
          T* orow =
              out.data() + ((std::int64_t(n) * d.OC + oc) * d.out[0] + od) * plane;
          if (ic == 0) std::fill(orow, orow + plane, bv[oc]);
          const T* wp = wv + (std::int64_t(oc) * d.IC + ic) * k_c;
          for (std::int64_t kk = 0; kk < k_c; ++kk)
            if (wp[kk] != T(0))
              detail::axpy_n(wp[kk], pack.data() + kk * plane, orow, plane);
        }
      }

  const int ix = x.id, iw = w.id, ib_ = b.id;
  const bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
  return detail::make_op(
      t, so, std::move(out), rg, {ix, iw, ib_}, [ix, iw, ib_, d](Tape<T>& tp, int oid) {
        const auto& g = tp.node(oid).grad;
        const T* gv = g.data();
        const T* xv2 = tp.node(ix).value.data();
        const T* wv2 = tp.node(iw).value.data();
        const std::int64_t x_c = std::int64_t(d.in[0]) * d.in[1] * d.in[2];
        const std::int64_t o_c = std::int64_t(d.out[0]) * d.out[1] * d.out[2];
        const std::int64_t k_c = std::int64_t(d.k[0]) * d.k[1] * d.k[2];

        if (tp.node(ib_).requires_grad) {
          T* gb = tp.node(ib_).grad.data();
          for (int oc = 0; oc < d.OC; ++oc) {
            double acc = 0.0;
            for (int n = 0; n < d.N; ++n) {
              const T* gp = gv + (std::int64_t(n) * d.OC + oc) * o_c;
              for (std::int64_t i = 0; i < o_c; ++i) acc += double(gp[i]);
            }
            gb[oc] += T(acc);
          }
        }

        if (tp.node(iw).requires_grad) {
          T* gw = tp.node(iw).grad.data();
          const std::int64_t plane = std::int64_t(d.out[1]) * d.out[2];
          std::vector<T> pack(std::size_t(k_c * plane));
          for (int n = 0; n < d.N; ++n)
            for (int od = 0; od < d.out[0]; ++od)
              for (int ic = 0; ic < d.IC; ++ic) {
                detail::pack_shifted_rows(xv2 + (std::int64_t(n) * d.IC + ic) * x_c,
                                          d.in, d.k, d.s, d.p, d.out, od, pack.data());
#ifdef TRANSVERT_HAS_OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1)
#endif
                for (int oc = 0; oc < d.OC; ++oc) {
                  const T* grow =
                      gv + ((std::int64_t(n) * d.OC + oc) * d.out[0] + od) * plane;
                  T* gwp = gw + (std::int64_t(oc) * d.IC + ic) * k_c;
                  for (std::int64_t kk = 0; kk < k_c; ++kk)
                    gwp[kk] += detail::dot_n(grow, pack.data() + kk * plane, plane);
                }
              }
        }

        if (tp.node(ix).requires_grad) {
          // dx[i] = sum_k w[k] * dOut[(i + p - k) / s]: gather rows of the
          // output gradient once per output channel, accumulate on compact
          // residue sub-planes per input channel, then interleave into the
          // input gradient once per slice.
          T* gx = tp.node(ix).grad.data();
          const std::int64_t iplane = std::int64_t(d.in[1]) * d.in[2];
          detail::GatherSlice plan(d.k, d.s, d.p, d.out, d.in);
          std::vector<T> pack(std::size_t(k_c * iplane));
          std::vector<T> acc(std::size_t(d.IC) * iplane);
          for (int n = 0; n < d.N; ++n)
            for (int id = 0; id < d.in[0]; ++id) {
              plan.build(id);
              for (int oc = 0; oc < d.OC; ++oc) {
                plan.pack(gv + (std::int64_t(n) * d.OC + oc) * o_c, pack.data());
#ifdef TRANSVERT_HAS_OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1)
#endif
                for (int ic = 0; ic < d.IC; ++ic) {
                  T* ap = acc.data() + std::int64_t(ic) * iplane;
                  if (oc == 0) std::fill(ap, ap + iplane, T(0));
                  const T* wp = wv2 + (std::int64_t(oc) * d.IC + ic) * k_c;
                  for (const auto& t2 : plan.taps)
                    if (wp[t2.k] != T(0))
                      detail::axpy_n(wp[t2.k], pack.data() + t2.row, ap + t2.acc,
                                     std::int64_t(t2.Hr) * t2.Wr);
                }
              }
#ifdef TRANSVERT_HAS_OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1)
#endif
              for (int ic = 0; ic < d.IC; ++ic)
                plan.scatter(gx + ((std::int64_t(n) * d.IC + ic) * d.in[0] + id) * iplane,
                             acc.data() + std::int64_t(ic) * iplane, /*add=*/true);
            }
        }
      });
}

// ---------------------------------------------------------------------------
// conv_transpose3d
// ---------------------------------------------------------------------------

namespace detail {

struct ConvTDims {
  int N, IC, OC;
  Dims3 in, k, out, s, p, op;
};

template <typename T>
ConvTDims convt_dims(const Shape5& xs, const Shape5& ws, const Shape5& bs,
                     const Dims3& stride, const Dims3& pad, const Dims3& opad) {
  ConvTDims d;
  d.N = xs[0];
  d.IC = xs[1];
  d.OC = ws[1];
  if (ws[0] != d.IC) throw DataError("conv_transpose3d: weight/input channel mismatch");
  if (bs != Shape5{1, d.OC, 1, 1, 1})
    throw DataError("conv_transpose3d: bias must be (1,OC,1,1,1)");
  d.in = {xs[2], xs[3], xs[4]};
  d.k = {ws[2], ws[3], ws[4]};
  d.s = stride;
  d.p = pad;
  d.op = opad;
  for (int ax = 0; ax < 3; ++ax) {
    if (d.s[ax] <= 0 || d.p[ax] < 0) throw DataError("conv_transpose3d: bad stride/pad");
    if (d.op[ax] < 0 || d.op[ax] >= d.s[ax])
      throw DataError("conv_transpose3d: output padding must be < stride");
    d.out[ax] = (d.in[ax] - 1) * d.s[ax] - 2 * d.p[ax] + d.k[ax] + d.op[ax];
    if (d.out[ax] <= 0) throw DataError("conv_transpose3d: non-positive output dimension");
  }
  return d;
}

/// Range of input indices i with 0 <= i*s - p + k <= limit-1, clipped to
/// [0, n). Returns {lo, hi_exclusive}.
inline std::array<int, 2> convt_span(int n, int k, int s, int p, int limit) {
  int lo = std::max(0, ceil_div(p - k, s));
  int hi = std::min(n - 1, floor_div(limit - 1 + p - k, s));
  return {lo, hi + 1};
}

}  // namespace detail

template <typename T>
Tensor<T> conv_transpose3d(Tensor<T> x, Tensor<T> w, Tensor<T> b, const Dims3& stride,
                           const Dims3& pad, const Dims3& output_pad) {
  detail::check_same_tape(x, w);
  detail::check_same_tape(x, b);
  Tape<T>& t = detail::tape_of(x);
  const auto d =
      detail::convt_dims<T>(x.shape(), w.shape(), b.shape(), stride, pad, output_pad);
  const Shape5 so{d.N, d.OC, d.out[0], d.out[1], d.out[2]};
  std::vector<T> out(std::size_t(numel(so)));

  const T* xv = x.value().data();
  const T* wv = w.value().data();
  const T* bv = b.value().data();
  const std::int64_t x_c = std::int64_t(d.in[0]) * d.in[1] * d.in[2];
  const std::int64_t k_c = std::int64_t(d.k[0]) * d.k[1] * d.k[2];

  // out[o] = b + sum_ic sum_k x[(o + p - k) / s] * w[ic][oc][k] (exact
  // divisions only): gather the input rows once per input channel and depth
  // slice onto compact residue sub-planes, reduce per output channel with
  // contiguous axpy updates, and interleave each finished slice once.
  const std::int64_t plane = std::int64_t(d.out[1]) * d.out[2];
  detail::GatherSlice plan(d.k, d.s, d.p, d.in, d.out);
  std::vector<T> pack(std::size_t(k_c * plane));
  std::vector<T> acc(std::size_t(d.OC) * plane);
  for (int n = 0; n < d.N; ++n)
    for (int od = 0; od < d.out[0]; ++od) {
      plan.build(od);
      for (int ic = 0; ic < d.IC; ++ic) {
        plan.pack(xv + (std::int64_t(n) * d.IC + ic) * x_c, pack.data());
#ifdef TRANSVERT_HAS_OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1)
#endif
        for (int oc = 0; oc < d.OC; ++oc) {
          T* ap = acc.data() + std::int64_t(oc) * plane;
          if (ic == 0) std::fill(ap, ap + plane, bv[oc]);
          const T* wp = wv + (std::int64_t(ic) * d.OC + oc) * k_c;
          for (const auto& t2 : plan.taps)
            if (wp[t2.k] != T(0))
              detail::axpy_n(wp[t2.k], pack.data() + t2.row, ap + t2.acc,
                             std::int64_t(t2.Hr) * t2.Wr);
        }
      }
#ifdef TRANSVERT_HAS_OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1)
#endif
      for (int oc = 0; oc < d.OC; ++oc)
        plan.scatter(out.data() +
                         ((std::int64_t(n) * d.OC + oc) * d.out[0] + od) * plane,
                     acc.data() + std::int64_t(oc) * plane, /*add=*/false);
    }

  const int ix = x.id, iw = w.id, ib_ = b.id;
  const bool rg = x.requires_grad() || w.requires_grad() || b.requires_grad();
  return detail::make_op(
      t, so, std::move(out), rg, {ix, iw, ib_}, [ix, iw, ib_, d](Tape<T>& tp, int oid) {
        const auto& g = tp.node(oid).grad;
        const T* gv = g.data();
        const T* xv2 = tp.node(ix).value.data();
        const T* wv2 = tp.node(iw).value.data();
        const std::int64_t o_c = std::int64_t(d.out[0]) * d.out[1] * d.out[2];
        const std::int64_t k_c = std::int64_t(d.k[0]) * d.k[1] * d.k[2];

        if (tp.node(ib_).requires_grad) {
          T* gb = tp.node(ib_).grad.data();
          for (int oc = 0; oc < d.OC; ++oc) {
            double acc = 0.0;
            for (int n = 0; n < d.N; ++n) {
              const T* gp = gv + (std::int64_t(n) * d.OC + oc) * o_c;
              for (std::int64_t i = 0; i < o_c; ++i) acc += double(gp[i]);
            }
            gb[oc] += T(acc);
          }
        }

        const bool nw = tp.node(iw).requires_grad;
        const bool nx = tp.node(ix).requires_grad;
        if (nw || nx) {
          // dx[i] = sum_k dOut[i*s + k - p] * w[k] and
          // dW[ic][oc][k] = sum_i x[i] * dOut[i*s + k - p]: one pack of the
          // output-gradient rows per (sample, input depth, output channel)
          // serves both reductions for every input channel.
          T* gw = nw ? tp.node(iw).grad.data() : nullptr;
          T* gx = nx ? tp.node(ix).grad.data() : nullptr;
          const std::int64_t iplane = std::int64_t(d.in[1]) * d.in[2];
          std::vector<T> pack(std::size_t(k_c * iplane));
          for (int n = 0; n < d.N; ++n)
            for (int id = 0; id < d.in[0]; ++id)
              for (int oc = 0; oc < d.OC; ++oc) {
                detail::pack_shifted_rows(gv + (std::int64_t(n) * d.OC + oc) * o_c,
                                          d.out, d.k, d.s, d.p, d.in, id, pack.data());
#ifdef TRANSVERT_HAS_OPENMP
#pragma omp parallel for schedule(static) num_threads(thread_count()) \
    if (thread_count() > 1)
#endif
                for (int ic = 0; ic < d.IC; ++ic) {
                  const std::int64_t row_off =
                      ((std::int64_t(n) * d.IC + ic) * d.in[0] + id) * iplane;
                  const T* wp = wv2 + (std::int64_t(ic) * d.OC + oc) * k_c;
                  if (nx) {
                    T* gxr = gx + row_off;
                    for (std::int64_t kk = 0; kk < k_c; ++kk)
                      if (wp[kk] != T(0))
                        detail::axpy_n(wp[kk], pack.data() + kk * iplane, gxr, iplane);
                  }
                  if (nw) {
                    const T* xr = xv2 + row_off;
                    T* gwp = gw + (std::int64_t(ic) * d.OC + oc) * k_c;
                    for (std::int64_t kk = 0; kk < k_c; ++kk)
                      gwp[kk] += detail::dot_n(xr, pack.data() + kk * iplane, iplane);
                  }
                }
              }
        }
      });
}

// ---------------------------------------------------------------------------
// replication_pad3d
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> replication_pad3d(Tensor<T> x, const Dims3& pad) {
  Tape<T>& t = detail::tape_of(x);
  for (int p : pad)
    if (p < 0) throw DataError("replication_pad3d: negative padding");
  const Shape5& xs = x.shape();
  const Shape5 so{xs[0], xs[1], xs[2] + 2 * pad[0], xs[3] + 2 * pad[1],
                  xs[4] + 2 * pad[2]};
  const Dims3 in{xs[2], xs[3], xs[4]};
  std::vector<T> out(std::size_t(numel(so)));
  const T* xv = x.value().data();
  const std::int64_t x_c = std::int64_t(in[0]) * in[1] * in[2];
  const std::int64_t o_c = std::int64_t(so[2]) * so[3] * so[4];
  const std::int64_t slabs = std::int64_t(xs[0]) * xs[1];
  for (std::int64_t slab = 0; slab < slabs; ++slab) {
    const T* xp = xv + slab * x_c;
    T* op = out.data() + slab * o_c;
    for (int od = 0; od < so[2]; ++od) {
      const int id = std::clamp(od - pad[0], 0, in[0] - 1);
      for (int oh = 0; oh < so[3]; ++oh) {
        const int ih = std::clamp(oh - pad[1], 0, in[1] - 1);
        const T* xr = xp + (std::int64_t(id) * in[1] + ih) * in[2];
        T* orow = op + (std::int64_t(od) * so[3] + oh) * so[4];
        for (int ow = 0; ow < so[4]; ++ow)
          orow[ow] = xr[std::clamp(ow - pad[2], 0, in[2] - 1)];
      }
    }
  }
  const int ix = x.id;
  return detail::make_op(
      t, so, std::move(out), x.requires_grad(), {ix},
      [ix, pad, in, so](Tape<T>& tp, int oid) {
        const auto& g = tp.node(oid).grad;
        T* gx = tp.node(ix).grad.data();
        const std::int64_t x_c = std::int64_t(in[0]) * in[1] * in[2];
        const std::int64_t o_c = std::int64_t(so[2]) * so[3] * so[4];
        const std::int64_t slabs = std::int64_t(so[0]) * so[1];
        for (std::int64_t slab = 0; slab < slabs; ++slab) {
          const T* gp = g.data() + slab * o_c;
          T* gxp = gx + slab * x_c;
          for (int od = 0; od < so[2]; ++od) {
            const int id = std::clamp(od - pad[0], 0, in[0] - 1);
            for (int oh = 0; oh < so[3]; ++oh) {
              const int ih = std::clamp(oh - pad[1], 0, in[1] - 1);
              T* gxr = gxp + (std::int64_t(id) * in[1] + ih) * in[2];
              const T* gr = gp + (std::int64_t(od) * so[3] + oh) * so[4];
              for (int ow = 0; ow < so[4]; ++ow)
                gxr[std::clamp(ow - pad[2], 0, in[2] - 1)] += gr[ow];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// batch_norm3d
// ---------------------------------------------------------------------------

/// Per-channel batch normalization. Training mode normalizes with biased
/// batch statistics and updates the running stats in place (unbiased
/// variance, momentum-weighted); eval mode normalizes with the running
/// stats. gamma/beta have shape (1,C,1,1,1); running stats are plain
/// per-channel vectors owned by the caller.
template <typename T>
Tensor<T> batch_norm3d(Tensor<T> x, Tensor<T> gamma, Tensor<T> beta,
                       std::vector<T>* running_mean, std::vector<T>* running_var,
                       bool training, T momentum = T(0.1), T eps = T(1e-5)) {
  detail::check_same_tape(x, gamma);
  detail::check_same_tape(x, beta);
  Tape<T>& t = detail::tape_of(x);
  const Shape5& xs = x.shape();
  const int C = xs[1];
  if (gamma.shape() != Shape5{1, C, 1, 1, 1} || beta.shape() != Shape5{1, C, 1, 1, 1})
    throw DataError("batch_norm3d: gamma/beta must be (1,C,1,1,1)");
  if (!running_mean || !running_var || int(running_mean->size()) != C ||
      int(running_var->size()) != C)
    throw DataError("batch_norm3d: running stats must have C entries");
  const std::int64_t spatial = std::int64_t(xs[2]) * xs[3] * xs[4];
  const std::int64_t m = std::int64_t(xs[0]) * spatial;  // elements per channel
  if (training && m < 2)
    throw DataError("batch_norm3d: training mode needs >1 element per channel");

  auto mean = std::make_shared<std::vector<T>>(std::size_t(C));
  auto invstd = std::make_shared<std::vector<T>>(std::size_t(C));
  const T* xv = x.value().data();
  if (training) {
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int n = 0; n < xs[0]; ++n) {
        const T* xp = xv + (std::int64_t(n) * C + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) acc += double(xp[i]);
      }
      const double mu = acc / double(m);
      double ss = 0.0;
      for (int n = 0; n < xs[0]; ++n) {
        const T* xp = xv + (std::int64_t(n) * C + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const double dd = double(xp[i]) - mu;
          ss += dd * dd;
        }
      }
      const double var = ss / double(m);
      (*mean)[std::size_t(c)] = T(mu);
      (*invstd)[std::size_t(c)] = T(1.0 / std::sqrt(var + double(eps)));
      (*running_mean)[std::size_t(c)] =
          (T(1) - momentum) * (*running_mean)[std::size_t(c)] + momentum * T(mu);
      (*running_var)[std::size_t(c)] =
          (T(1) - momentum) * (*running_var)[std::size_t(c)] +
          momentum * T(var * double(m) / double(m - 1));
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[std::size_t(c)] = (*running_mean)[std::size_t(c)];
      (*invstd)[std::size_t(c)] =
          T(1.0 / std::sqrt(double((*running_var)[std::size_t(c)]) + double(eps)));
    }
  }

  std::vector<T> out(x.value().size());
  const T* gv = gamma.value().data();
  const T* bv = beta.value().data();
  for (int n = 0; n < xs[0]; ++n)
    for (int c = 0; c < C; ++c) {
      const std::int64_t base = (std::int64_t(n) * C + c) * spatial;
      const T mu = (*mean)[std::size_t(c)], is = (*invstd)[std::size_t(c)];
      const T ga = gv[c], be = bv[c];
      for (std::int64_t i = 0; i < spatial; ++i)
        out[std::size_t(base + i)] = ga * (xv[base + i] - mu) * is + be;
    }

  const int ixn = x.id, ign = gamma.id, ibn = beta.id;
  const bool rg = x.requires_grad() || gamma.requires_grad() || beta.requires_grad();
  const Shape5 xs_copy = xs;
  return detail::make_op(
      t, xs, std::move(out), rg, {ixn, ign, ibn},
      [ixn, ign, ibn, mean, invstd, xs_copy, training](Tape<T>& tp, int oid) {
        const auto& g = tp.node(oid).grad;
        const T* xv2 = tp.node(ixn).value.data();
        const T* gv2 = tp.node(ign).value.data();
        const int C = xs_copy[1];
        const std::int64_t spatial = std::int64_t(xs_copy[2]) * xs_copy[3] * xs_copy[4];
        const std::int64_t m = std::int64_t(xs_copy[0]) * spatial;
        const bool nx = tp.node(ixn).requires_grad;
        const bool ng = tp.node(ign).requires_grad;
        const bool nb = tp.node(ibn).requires_grad;
        for (int c = 0; c < C; ++c) {
          const T mu = (*mean)[std::size_t(c)], is = (*invstd)[std::size_t(c)];
          double sum_g = 0.0, sum_gx = 0.0;
          for (int n = 0; n < xs_copy[0]; ++n) {
            const std::int64_t base = (std::int64_t(n) * C + c) * spatial;
            for (std::int64_t i = 0; i < spatial; ++i) {
              const double gg = double(g[std::size_t(base + i)]);
              sum_g += gg;
              sum_gx += gg * double((xv2[base + i] - mu) * is);
            }
          }
          if (nb) tp.node(ibn).grad[std::size_t(c)] += T(sum_g);
          if (ng) tp.node(ign).grad[std::size_t(c)] += T(sum_gx);
          if (nx) {
            T* gx = tp.node(ixn).grad.data();
            const T ga_is = gv2[c] * is;
            if (training) {
              const T mg = T(sum_g / double(m));
              const T mgx = T(sum_gx / double(m));
              for (int n = 0; n < xs_copy[0]; ++n) {
                const std::int64_t base = (std::int64_t(n) * C + c) * spatial;
                for (std::int64_t i = 0; i < spatial; ++i) {
                  const T xh = (xv2[base + i] - mu) * is;
                  gx[base + i] += ga_is * (g[std::size_t(base + i)] - mg - xh * mgx);
                }
              }
            } else {
              for (int n = 0; n < xs_copy[0]; ++n) {
                const std::int64_t base = (std::int64_t(n) * C + c) * spatial;
                for (std::int64_t i = 0; i < spatial; ++i)
                  gx[base + i] += ga_is * g[std::size_t(base + i)];
              }
            }
          }
        }
      });
}

}  // namespace transvert::ad
