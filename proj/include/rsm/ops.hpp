#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "rsm/tensor.hpp"

// Primitive forward ops with recorded reverse-mode closures.
//
// Broadcasting is deliberately narrow: a binary op accepts equal shapes, a
// right operand whose shape is a trailing suffix of the left one (repeated
// over the leading axes), or a right scalar. Everything else is an explicit
// reshape/broadcast at the call site.
//
// All reductions accumulate left-to-right in increasing index order, so a
// forward pass is bitwise deterministic for fixed input.

namespace rsm {

namespace detail {

inline std::vector<int> parents_of(std::initializer_list<int> ids) {
    std::vector<int> out;
    for (int id : ids)
        if (id >= 0) out.push_back(id);
    return out;
}

// Right operand must be scalar or a trailing suffix of the left shape.
inline void check_suffix_broadcast(const char* op, const Shape& a, const Shape& b) {
    if (numel_of(b) == 1) return;
    if (b.size() > a.size())
        fail(std::string(op) + ": cannot broadcast " + shape_str(b) + " against " + shape_str(a));
    const std::size_t off = a.size() - b.size();
    for (std::size_t i = 0; i < b.size(); ++i) {
        if (a[off + i] != b[i])
            fail(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
}

template <std::floating_point T>
int node_of(const Tensor<T>& t) {
    return t.on_tape() ? t.node : -1;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary
// ---------------------------------------------------------------------------

template <std::floating_point T, class Fwd, class BwdA, class BwdB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, BwdA bwd_a,
                    BwdB bwd_b) {
    detail::check_suffix_broadcast(name, a.shape, b.shape);
    const i64 an = a.numel();
    const i64 bn = b.numel();
    std::vector<T> out(static_cast<std::size_t>(an));
    const T* pa = a.ptr();
    const T* pb = b.ptr();
    for (i64 i = 0; i < an; ++i) out[static_cast<std::size_t>(i)] = fwd(pa[i], pb[i % bn]);

    Tensor<T> res = Tensor<T>::from(a.shape, std::move(out));
    Tape<T>* tp = detail::tape_of<T>({&a, &b});
    if (tp) {
        const int ia = detail::node_of(a);
        const int ib = detail::node_of(b);
        auto ad = a.data;
        auto bd = b.data;
        res.tape = tp;
        res.node = tp->record(
            res.shape, detail::parents_of({ia, ib}),
            [ia, ib, an, bn, ad, bd, bwd_a, bwd_b](const std::vector<T>& g, GradBuffers<T>& gr) {
                if (ia >= 0) {
                    T* ga = gr.acc(ia);
                    for (i64 i = 0; i < an; ++i)
                        ga[i] += bwd_a(g[static_cast<std::size_t>(i)], (*ad)[static_cast<std::size_t>(i)],
                                       (*bd)[static_cast<std::size_t>(i % bn)]);
                }
                if (ib >= 0) {
                    T* gb = gr.acc(ib);
                    for (i64 i = 0; i < an; ++i)
                        gb[i % bn] += bwd_b(g[static_cast<std::size_t>(i)],
                                            (*ad)[static_cast<std::size_t>(i)],
                                            (*bd)[static_cast<std::size_t>(i % bn)]);
                }
            });
    }
    return res;
}

template <std::floating_point T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        "add", a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; },
        [](T g, T, T) { return g; });
}

template <std::floating_point T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; },
        [](T g, T, T) { return -g; });
}

template <std::floating_point T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
        [](T g, T x, T) { return g * x; });
}

// ---------------------------------------------------------------------------
// elementwise unary
// ---------------------------------------------------------------------------

template <std::floating_point T, class Fwd, class Bwd>
Tensor<T> unary_op(const Tensor<T>& a, Fwd fwd, Bwd bwd_from_input) {
    const i64 n = a.numel();
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* pa = a.ptr();
    for (i64 i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = fwd(pa[i]);

    Tensor<T> res = Tensor<T>::from(a.shape, std::move(out));
    if (a.on_tape()) {
        const int ia = a.node;
        auto ad = a.data;
        res.tape = a.tape;
        res.node = a.tape->record(res.shape, {ia},
                                  [ia, n, ad, bwd_from_input](const std::vector<T>& g,
                                                              GradBuffers<T>& gr) {
                                      T* ga = gr.acc(ia);
                                      for (i64 i = 0; i < n; ++i)
                                          ga[i] += g[static_cast<std::size_t>(i)] *
                                                   bwd_from_input((*ad)[static_cast<std::size_t>(i)]);
                                  });
    }
    return res;
}

template <std::floating_point T>
Tensor<T> neg(const Tensor<T>& a) {
    return unary_op(
        a, [](T x) { return -x; }, [](T) { return T(-1); });
}

template <std::floating_point T>
Tensor<T> exp(const Tensor<T>& a) {
    return unary_op(
        a, [](T x) { return std::exp(x); }, [](T x) { return std::exp(x); });
}

template <std::floating_point T>
T sigmoid_of(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

// softplus(x) = log(1 + e^x), computed overflow-free.
template <std::floating_point T>
Tensor<T> softplus(const Tensor<T>& a) {
    return unary_op(
        a, [](T x) { return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x))); },
        [](T x) { return sigmoid_of(x); });
}

template <std::floating_point T>
Tensor<T> silu(const Tensor<T>& a) {
    return unary_op(
        a, [](T x) { return x * sigmoid_of(x); },
        [](T x) {
            const T s = sigmoid_of(x);
            return s * (T(1) + x * (T(1) - s));
        });
}

template <std::floating_point T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    return unary_op(
        a, [s](T x) { return s * x; }, [s](T) { return s; });
}

// ---------------------------------------------------------------------------
// axis reductions and normalizations
// ---------------------------------------------------------------------------

namespace detail {

struct AxisSplit {
    i64 outer, n, inner;
};

inline AxisSplit axis_split(const char* op, const Shape& shape, i64 axis) {
    if (axis < 0 || axis >= static_cast<i64>(shape.size()))
        fail(std::string(op) + ": axis " + std::to_string(axis) + " out of range for " +
             shape_str(shape));
    AxisSplit s{1, shape[static_cast<std::size_t>(axis)], 1};
    for (i64 i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
    for (i64 i = axis + 1; i < static_cast<i64>(shape.size()); ++i)
        s.inner *= shape[static_cast<std::size_t>(i)];
    return s;
}

}  // namespace detail

// Softmax along `axis`, stabilized by max subtraction.
template <std::floating_point T>
Tensor<T> softmax(const Tensor<T>& a, i64 axis) {
    const auto sp = detail::axis_split("softmax", a.shape, axis);
    std::vector<T> out(static_cast<std::size_t>(a.numel()));
    const T* px = a.ptr();
    for (i64 o = 0; o < sp.outer; ++o) {
        for (i64 r = 0; r < sp.inner; ++r) {
            const i64 base = o * sp.n * sp.inner + r;
            T m = px[base];
            for (i64 j = 1; j < sp.n; ++j) m = std::max(m, px[base + j * sp.inner]);
            T denom = T(0);
            for (i64 j = 0; j < sp.n; ++j) {
                const T e = std::exp(px[base + j * sp.inner] - m);
                out[static_cast<std::size_t>(base + j * sp.inner)] = e;
                denom += e;
            }
            for (i64 j = 0; j < sp.n; ++j) out[static_cast<std::size_t>(base + j * sp.inner)] /= denom;
        }
    }

    Tensor<T> res = Tensor<T>::from(a.shape, std::move(out));
    if (a.on_tape()) {
        const int ia = a.node;
        auto yd = res.data;
        res.tape = a.tape;
        res.node = a.tape->record(res.shape, {ia},
                                  [ia, sp, yd](const std::vector<T>& g, GradBuffers<T>& gr) {
                                      T* ga = gr.acc(ia);
                                      const T* y = yd->data();
                                      for (i64 o = 0; o < sp.outer; ++o) {
                                          for (i64 r = 0; r < sp.inner; ++r) {
                                              const i64 base = o * sp.n * sp.inner + r;
                                              T dot = T(0);
                                              for (i64 j = 0; j < sp.n; ++j) {
                                                  const i64 k = base + j * sp.inner;
                                                  dot += g[static_cast<std::size_t>(k)] * y[k];
                                              }
                                              for (i64 j = 0; j < sp.n; ++j) {
                                                  const i64 k = base + j * sp.inner;
                                                  ga[k] += y[k] * (g[static_cast<std::size_t>(k)] - dot);
                                              }
                                          }
                                      }
                                  });
    }
    return res;
}

// Layer normalization over the last axis, no affine part:
//   y = (x - mean) / sqrt(var + eps), biased variance.
template <std::floating_point T>
Tensor<T> layer_norm(const Tensor<T>& a, T eps = T(1e-5)) {
    if (a.rank() < 1) fail("layer_norm: need rank >= 1, got " + shape_str(a.shape));
    const i64 n = a.shape.back();
    const i64 rows = a.numel() / n;
    std::vector<T> out(static_cast<std::size_t>(a.numel()));
    std::vector<T> inv_sigma(static_cast<std::size_t>(rows));
    const T* px = a.ptr();
    for (i64 r = 0; r < rows; ++r) {
        const T* x = px + r * n;
        T mean = T(0);
        for (i64 j = 0; j < n; ++j) mean += x[j];
        mean /= static_cast<T>(n);
        T var = T(0);
        for (i64 j = 0; j < n; ++j) var += (x[j] - mean) * (x[j] - mean);
        var /= static_cast<T>(n);
        const T is = T(1) / std::sqrt(var + eps);
        inv_sigma[static_cast<std::size_t>(r)] = is;
        for (i64 j = 0; j < n; ++j) out[static_cast<std::size_t>(r * n + j)] = (x[j] - mean) * is;
    }

    Tensor<T> res = Tensor<T>::from(a.shape, std::move(out));
    if (a.on_tape()) {
        const int ia = a.node;
        auto yd = res.data;
        auto isd = std::make_shared<std::vector<T>>(std::move(inv_sigma));
        res.tape = a.tape;
        res.node = a.tape->record(
            res.shape, {ia}, [ia, rows, n, yd, isd](const std::vector<T>& g, GradBuffers<T>& gr) {
                T* ga = gr.acc(ia);
                const T* y = yd->data();
                for (i64 r = 0; r < rows; ++r) {
                    const i64 base = r * n;
                    T gmean = T(0), gymean = T(0);
                    for (i64 j = 0; j < n; ++j) {
                        gmean += g[static_cast<std::size_t>(base + j)];
                        gymean += g[static_cast<std::size_t>(base + j)] * y[base + j];
                    }
                    gmean /= static_cast<T>(n);
                    gymean /= static_cast<T>(n);
                    const T is = (*isd)[static_cast<std::size_t>(r)];
                    for (i64 j = 0; j < n; ++j)
                        ga[base + j] +=
                            is * (g[static_cast<std::size_t>(base + j)] - gmean - y[base + j] * gymean);
                }
            });
    }
    return res;
}

// Mean over one axis; the axis is removed from the shape.
template <std::floating_point T>
Tensor<T> mean(const Tensor<T>& a, i64 axis) {
    const auto sp = detail::axis_split("mean", a.shape, axis);
    Shape out_shape;
    for (i64 i = 0; i < static_cast<i64>(a.shape.size()); ++i)
        if (i != axis) out_shape.push_back(a.shape[static_cast<std::size_t>(i)]);
    std::vector<T> out(static_cast<std::size_t>(sp.outer * sp.inner), T(0));
    const T* px = a.ptr();
    for (i64 o = 0; o < sp.outer; ++o)
        for (i64 j = 0; j < sp.n; ++j)
            for (i64 r = 0; r < sp.inner; ++r)
                out[static_cast<std::size_t>(o * sp.inner + r)] += px[(o * sp.n + j) * sp.inner + r];
    const T inv = T(1) / static_cast<T>(sp.n);
    for (auto& v : out) v *= inv;

    Tensor<T> res = Tensor<T>::from(std::move(out_shape), std::move(out));
    if (a.on_tape()) {
        const int ia = a.node;
        res.tape = a.tape;
        res.node = a.tape->record(res.shape, {ia},
                                  [ia, sp, inv](const std::vector<T>& g, GradBuffers<T>& gr) {
                                      T* ga = gr.acc(ia);
                                      for (i64 o = 0; o < sp.outer; ++o)
                                          for (i64 j = 0; j < sp.n; ++j)
                                              for (i64 r = 0; r < sp.inner; ++r)
                                                  ga[(o * sp.n + j) * sp.inner + r] +=
                                                      inv * g[static_cast<std::size_t>(o * sp.inner + r)];
                                  });
    }
    return res;
}

// Sum of all elements -> rank-0 scalar.
template <std::floating_point T>
Tensor<T> sum_all(const Tensor<T>& a) {
    const i64 n = a.numel();
    T acc = T(0);
    const T* px = a.ptr();
    for (i64 i = 0; i < n; ++i) acc += px[i];
    Tensor<T> res = Tensor<T>::scalar(acc);
    if (a.on_tape()) {
        const int ia = a.node;
        res.tape = a.tape;
        res.node = a.tape->record(res.shape, {ia},
                                  [ia, n](const std::vector<T>& g, GradBuffers<T>& gr) {
                                      T* ga = gr.acc(ia);
                                      for (i64 i = 0; i < n; ++i) ga[i] += g[0];
                                  });
    }
    return res;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

template <std::floating_point T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0])
        fail("matmul: incompatible shapes " + shape_str(a.shape) + " x " + shape_str(b.shape));
    const i64 m = a.shape[0], k = a.shape[1], n = b.shape[1];
    std::vector<T> out(static_cast<std::size_t>(m * n), T(0));
    {
        const T* pa = a.ptr();
        const T* pb = b.ptr();
        T* po = out.data();
        for (i64 i = 0; i < m; ++i) {
            for (i64 kk = 0; kk < k; ++kk) {
                const T aik = pa[i * k + kk];
                const T* brow = pb + kk * n;
                T* orow = po + i * n;
                for (i64 j = 0; j < n; ++j) orow[j] += aik * brow[j];
            }
        }
    }

    Tensor<T> res = Tensor<T>::from({m, n}, std::move(out));
    Tape<T>* tp = detail::tape_of<T>({&a, &b});
    if (tp) {
        const int ia = detail::node_of(a);
        const int ib = detail::node_of(b);
        auto ad = a.data;
        auto bd = b.data;
        res.tape = tp;
        res.node = tp->record(
            res.shape, detail::parents_of({ia, ib}),
            [ia, ib, m, k, n, ad, bd](const std::vector<T>& g, GradBuffers<T>& gr) {
                if (ia >= 0) {  // dA = G B^T
                    T* ga = gr.acc(ia);
                    const T* pb = bd->data();
                    for (i64 i = 0; i < m; ++i)
                        for (i64 kk = 0; kk < k; ++kk) {
                            T acc = T(0);
                            const T* grow = g.data() + i * n;
                            const T* brow = pb + kk * n;
                            for (i64 j = 0; j < n; ++j) acc += grow[j] * brow[j];
                            ga[i * k + kk] += acc;
                        }
                }
                if (ib >= 0) {  // dB = A^T G
                    T* gb = gr.acc(ib);
                    const T* pa = ad->data();
                    for (i64 i = 0; i < m; ++i)
                        for (i64 kk = 0; kk < k; ++kk) {
                            const T aik = pa[i * k + kk];
                            const T* grow = g.data() + i * n;
                            T* gbrow = gb + kk * n;
                            for (i64 j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                        }
                }
            });
    }
    return res;
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

// Valid-mode strided 2-D convolution (no padding, no dilation).
// x: [H, W, Cin], w: [kh, kw, Cin, Cout], bias: [Cout] (may be undefined).
template <std::floating_point T>
Tensor<T> conv2d_valid(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, i64 stride) {
    if (x.rank() != 3 || w.rank() != 4)
        fail("conv2d_valid: expected image [H,W,C] and kernel [kh,kw,Cin,Cout], got " +
             shape_str(x.shape) + " and " + shape_str(w.shape));
    const i64 H = x.shape[0], W = x.shape[1], Ci = x.shape[2];
    const i64 kh = w.shape[0], kw = w.shape[1], Co = w.shape[3];
    if (w.shape[2] != Ci)
        fail("conv2d_valid: channel mismatch " + shape_str(x.shape) + " vs " + shape_str(w.shape));
    if (stride < 1 || kh > H || kw > W)
        fail("conv2d_valid: invalid geometry for image " + shape_str(x.shape) + ", kernel " +
             shape_str(w.shape) + ", stride " + std::to_string(stride));
    if (bias.defined() && bias.numel() != Co)
        fail("conv2d_valid: bias shape " + shape_str(bias.shape));
    const i64 Gh = (H - kh) / stride + 1;
    const i64 Gw = (W - kw) / stride + 1;

    std::vector<T> out(static_cast<std::size_t>(Gh * Gw * Co), T(0));
    {
        const T* px = x.ptr();
        const T* pw = w.ptr();
        T* po = out.data();
        for (i64 gy = 0; gy < Gh; ++gy)
            for (i64 gx = 0; gx < Gw; ++gx) {
                T* orow = po + (gy * Gw + gx) * Co;
                if (bias.defined()) {
                    const T* pb = bias.ptr();
                    for (i64 co = 0; co < Co; ++co) orow[co] = pb[co];
                }
                for (i64 ky = 0; ky < kh; ++ky)
                    for (i64 kx = 0; kx < kw; ++kx)
                        for (i64 ci = 0; ci < Ci; ++ci) {
                            const T xv = px[((gy * stride + ky) * W + gx * stride + kx) * Ci + ci];
                            const T* wrow = pw + ((ky * kw + kx) * Ci + ci) * Co;
                            for (i64 co = 0; co < Co; ++co) orow[co] += xv * wrow[co];
                        }
            }
    }

    Tensor<T> res = Tensor<T>::from({Gh, Gw, Co}, std::move(out));
    Tape<T>* tp = bias.defined() ? detail::tape_of<T>({&x, &w, &bias}) : detail::tape_of<T>({&x, &w});
    if (tp) {
        const int ix = detail::node_of(x);
        const int iw = detail::node_of(w);
        const int ib = bias.defined() ? detail::node_of(bias) : -1;
        auto xd = x.data;
        auto wd = w.data;
        res.tape = tp;
        res.node = tp->record(
            res.shape, detail::parents_of({ix, iw, ib}),
            [=](const std::vector<T>& g, GradBuffers<T>& gr) {
                const T* px = xd->data();
                const T* pw = wd->data();
                T* gx = ix >= 0 ? gr.acc(ix) : nullptr;
                T* gw = iw >= 0 ? gr.acc(iw) : nullptr;
                T* gb = ib >= 0 ? gr.acc(ib) : nullptr;
                for (i64 gy = 0; gy < Gh; ++gy)
                    for (i64 gx2 = 0; gx2 < Gw; ++gx2) {
                        const T* grow = g.data() + (gy * Gw + gx2) * Co;
                        if (gb)
                            for (i64 co = 0; co < Co; ++co) gb[co] += grow[co];
                        for (i64 ky = 0; ky < kh; ++ky)
                            for (i64 kx = 0; kx < kw; ++kx)
                                for (i64 ci = 0; ci < Ci; ++ci) {
                                    const i64 xi = ((gy * stride + ky) * W + gx2 * stride + kx) * Ci + ci;
                                    const T* wrow = pw + ((ky * kw + kx) * Ci + ci) * Co;
                                    if (gx) {
                                        T acc = T(0);
                                        for (i64 co = 0; co < Co; ++co) acc += grow[co] * wrow[co];
                                        gx[xi] += acc;
                                    }
                                    if (gw) {
                                        T* gwrow = gw + ((ky * kw + kx) * Ci + ci) * Co;
                                        const T xv = px[xi];
                                        for (i64 co = 0; co < Co; ++co) gwrow[co] += xv * grow[co];
                                    }
                                }
                    }
            });
    }
    return res;
}

// Depthwise causal 1-D convolution with left zero padding of (width-1).
// x: [L, C], w: [C, width], bias: [C]. Taps are ordered oldest to newest.
template <std::floating_point T>
Tensor<T> conv1d_depthwise_causal(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    if (x.rank() != 2 || w.rank() != 2 || x.shape[1] != w.shape[0])
        fail("conv1d_depthwise_causal: expected [L,C] and [C,width], got " + shape_str(x.shape) +
             " and " + shape_str(w.shape));
    const i64 L = x.shape[0], C = x.shape[1], width = w.shape[1];
    if (width < 1) fail("conv1d_depthwise_causal: width must be >= 1");
    if (bias.defined() && bias.numel() != C)
        fail("conv1d_depthwise_causal: bias shape " + shape_str(bias.shape));

    std::vector<T> out(static_cast<std::size_t>(L * C), T(0));
    {
        const T* px = x.ptr();
        const T* pw = w.ptr();
        T* po = out.data();
        for (i64 t = 0; t < L; ++t)
            for (i64 c = 0; c < C; ++c) {
                T acc = bias.defined() ? bias.ptr()[c] : T(0);
                for (i64 j = 0; j < width; ++j) {
                    const i64 src = t - (width - 1) + j;
                    if (src >= 0) acc += pw[c * width + j] * px[src * C + c];
                }
                po[t * C + c] = acc;
            }
    }

    Tensor<T> res = Tensor<T>::from({L, C}, std::move(out));
    Tape<T>* tp = bias.defined() ? detail::tape_of<T>({&x, &w, &bias}) : detail::tape_of<T>({&x, &w});
    if (tp) {
        const int ix = detail::node_of(x);
        const int iw = detail::node_of(w);
        const int ib = bias.defined() ? detail::node_of(bias) : -1;
        auto xd = x.data;
        auto wd = w.data;
        res.tape = tp;
        res.node = tp->record(
            res.shape, detail::parents_of({ix, iw, ib}),
            [=](const std::vector<T>& g, GradBuffers<T>& gr) {
                const T* px = xd->data();
                const T* pw = wd->data();
                T* gx = ix >= 0 ? gr.acc(ix) : nullptr;
                T* gw = iw >= 0 ? gr.acc(iw) : nullptr;
                T* gb = ib >= 0 ? gr.acc(ib) : nullptr;
                for (i64 t = 0; t < L; ++t)
                    for (i64 c = 0; c < C; ++c) {
                        const T go = g[static_cast<std::size_t>(t * C + c)];
                        if (gb) gb[c] += go;
                        for (i64 j = 0; j < width; ++j) {
                            const i64 src = t - (width - 1) + j;
                            if (src < 0) continue;
                            if (gx) gx[src * C + c] += pw[c * width + j] * go;
                            if (gw) gw[c * width + j] += px[src * C + c] * go;
                        }
                    }
            });
    }
    return res;
}

// ---------------------------------------------------------------------------
// layout ops
// ---------------------------------------------------------------------------

template <std::floating_point T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, i64 axis) {
    if (parts.empty()) fail("concat: no inputs");
    const Shape& ref = parts[0].shape;
    if (axis < 0 || axis >= static_cast<i64>(ref.size()))
        fail("concat: axis " + std::to_string(axis) + " out of range for " + shape_str(ref));
    i64 total_axis = 0;
    for (const auto& p : parts) {
        if (p.rank() != static_cast<i64>(ref.size()))
            fail("concat: rank mismatch " + shape_str(p.shape) + " vs " + shape_str(ref));
        for (i64 i = 0; i < static_cast<i64>(ref.size()); ++i)
            if (i != axis && p.shape[static_cast<std::size_t>(i)] != ref[static_cast<std::size_t>(i)])
                fail("concat: shape mismatch " + shape_str(p.shape) + " vs " + shape_str(ref));
        total_axis += p.shape[static_cast<std::size_t>(axis)];
    }
    Shape out_shape = ref;
    out_shape[static_cast<std::size_t>(axis)] = total_axis;

    const auto sp_out = detail::axis_split("concat", out_shape, axis);
    std::vector<T> out(static_cast<std::size_t>(numel_of(out_shape)));
    std::vector<i64> offsets;  // start of each part along the axis
    {
        i64 off = 0;
        for (const auto& p : parts) {
            offsets.push_back(off);
            const i64 pn = p.shape[static_cast<std::size_t>(axis)];
            const T* src = p.ptr();
            for (i64 o = 0; o < sp_out.outer; ++o)
                for (i64 j = 0; j < pn; ++j)
                    for (i64 r = 0; r < sp_out.inner; ++r)
                        out[static_cast<std::size_t>((o * total_axis + off + j) * sp_out.inner + r)] =
                            src[(o * pn + j) * sp_out.inner + r];
            off += pn;
        }
    }

    Tensor<T> res = Tensor<T>::from(out_shape, std::move(out));
    Tape<T>* tp = nullptr;
    for (const auto& p : parts) {
        Tape<T>* t2 = detail::tape_of<T>({&p});
        if (t2) {
            if (tp && tp != t2) fail("concat: inputs belong to different tapes");
            tp = t2;
        }
    }
    if (tp) {
        std::vector<int> ids;
        std::vector<i64> lens;
        for (const auto& p : parts) {
            ids.push_back(detail::node_of(p));
            lens.push_back(p.shape[static_cast<std::size_t>(axis)]);
        }
        std::vector<int> parents;
        for (int id : ids)
            if (id >= 0) parents.push_back(id);
        res.tape = tp;
        res.node = tp->record(
            res.shape, parents,
            [ids, lens, offsets, sp_out, total_axis](const std::vector<T>& g, GradBuffers<T>& gr) {
                for (std::size_t pi = 0; pi < ids.size(); ++pi) {
                    if (ids[pi] < 0) continue;
                    T* gp = gr.acc(ids[pi]);
                    const i64 pn = lens[pi];
                    const i64 off = offsets[pi];
                    for (i64 o = 0; o < sp_out.outer; ++o)
                        for (i64 j = 0; j < pn; ++j)
                            for (i64 r = 0; r < sp_out.inner; ++r)
                                gp[(o * pn + j) * sp_out.inner + r] +=
                                    g[static_cast<std::size_t>((o * total_axis + off + j) * sp_out.inner + r)];
                }
            });
    }
    return res;
}

template <std::floating_point T>
Tensor<T> slice(const Tensor<T>& a, i64 axis, i64 start, i64 len) {
    const auto sp = detail::axis_split("slice", a.shape, axis);
    if (start < 0 || len < 1 || start + len > sp.n)
        fail("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
             ") out of bounds for axis extent " + std::to_string(sp.n));
    Shape out_shape = a.shape;
    out_shape[static_cast<std::size_t>(axis)] = len;
    std::vector<T> out(static_cast<std::size_t>(numel_of(out_shape)));
    const T* px = a.ptr();
    for (i64 o = 0; o < sp.outer; ++o)
        for (i64 j = 0; j < len; ++j)
            for (i64 r = 0; r < sp.inner; ++r)
                out[static_cast<std::size_t>((o * len + j) * sp.inner + r)] =
                    px[(o * sp.n + start + j) * sp.inner + r];

    Tensor<T> res = Tensor<T>::from(std::move(out_shape), std::move(out));
    if (a.on_tape()) {
        const int ia = a.node;
        res.tape = a.tape;
        res.node = a.tape->record(res.shape, {ia},
                                  [ia, sp, start, len](const std::vector<T>& g, GradBuffers<T>& gr) {
                                      T* ga = gr.acc(ia);
                                      for (i64 o = 0; o < sp.outer; ++o)
                                          for (i64 j = 0; j < len; ++j)
                                              for (i64 r = 0; r < sp.inner; ++r)
                                                  ga[(o * sp.n + start + j) * sp.inner + r] +=
                                                      g[static_cast<std::size_t>((o * len + j) * sp.inner + r)];
                                  });
    }
    return res;
}

template <std::floating_point T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
    if (numel_of(new_shape) != a.numel())
        fail("reshape: cannot view " + shape_str(a.shape) + " as " + shape_str(new_shape));
    Tensor<T> res;
    res.shape = std::move(new_shape);
    res.data = a.data;  // storage is immutable, aliasing is safe
    if (a.on_tape()) {
        const int ia = a.node;
        const i64 n = a.numel();
        res.tape = a.tape;
        res.node = a.tape->record(res.shape, {ia},
                                  [ia, n](const std::vector<T>& g, GradBuffers<T>& gr) {
                                      T* ga = gr.acc(ia);
                                      for (i64 i = 0; i < n; ++i) ga[i] += g[static_cast<std::size_t>(i)];
                                  });
    }
    return res;
}

// General axis permutation: out axis i is input axis perm[i].
template <std::floating_point T>
Tensor<T> transpose(const Tensor<T>& a, const std::vector<i64>& perm) {
    const i64 rank = a.rank();
    if (static_cast<i64>(perm.size()) != rank)
        fail("transpose: permutation size " + std::to_string(perm.size()) + " vs rank " +
             std::to_string(rank));
    std::vector<char> seen(static_cast<std::size_t>(rank), 0);
    for (i64 p : perm) {
        if (p < 0 || p >= rank || seen[static_cast<std::size_t>(p)])
            fail("transpose: invalid axis permutation");
        seen[static_cast<std::size_t>(p)] = 1;
    }
    Shape out_shape(static_cast<std::size_t>(rank));
    for (i64 i = 0; i < rank; ++i)
        out_shape[static_cast<std::size_t>(i)] = a.shape[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

    std::vector<i64> in_strides(static_cast<std::size_t>(rank), 1);
    for (i64 i = rank - 2; i >= 0; --i)
        in_strides[static_cast<std::size_t>(i)] =
            in_strides[static_cast<std::size_t>(i + 1)] * a.shape[static_cast<std::size_t>(i + 1)];
    // stride of the output's i-th axis in the *input* buffer
    std::vector<i64> gather_strides(static_cast<std::size_t>(rank));
    for (i64 i = 0; i < rank; ++i)
        gather_strides[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];

    const i64 n = a.numel();
    std::vector<i64> src_index(static_cast<std::size_t>(n));
    {
        std::vector<i64> idx(static_cast<std::size_t>(rank), 0);
        for (i64 flat = 0; flat < n; ++flat) {
            i64 src = 0;
            for (i64 i = 0; i < rank; ++i)
                src += idx[static_cast<std::size_t>(i)] * gather_strides[static_cast<std::size_t>(i)];
            src_index[static_cast<std::size_t>(flat)] = src;
            for (i64 i = rank - 1; i >= 0; --i) {
                if (++idx[static_cast<std::size_t>(i)] < out_shape[static_cast<std::size_t>(i)]) break;
                idx[static_cast<std::size_t>(i)] = 0;
            }
        }
    }
    std::vector<T> out(static_cast<std::size_t>(n));
    const T* px = a.ptr();
    for (i64 i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = px[src_index[static_cast<std::size_t>(i)]];

    Tensor<T> res = Tensor<T>::from(std::move(out_shape), std::move(out));
    if (a.on_tape()) {
        const int ia = a.node;
        auto map = std::make_shared<std::vector<i64>>(std::move(src_index));
        res.tape = a.tape;
        res.node = a.tape->record(res.shape, {ia},
                                  [ia, n, map](const std::vector<T>& g, GradBuffers<T>& gr) {
                                      T* ga = gr.acc(ia);
                                      for (i64 i = 0; i < n; ++i)
                                          ga[(*map)[static_cast<std::size_t>(i)]] += g[static_cast<std::size_t>(i)];
                                  });
    }
    return res;
}

// Broadcast over leading axes: a.shape must be a trailing suffix of target.
template <std::floating_point T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& target) {
    detail::check_suffix_broadcast("broadcast_to", target, a.shape);
    const i64 an = a.numel();
    const i64 tn = numel_of(target);
    std::vector<T> out(static_cast<std::size_t>(tn));
    const T* px = a.ptr();
    for (i64 i = 0; i < tn; ++i) out[static_cast<std::size_t>(i)] = px[i % an];

    Tensor<T> res = Tensor<T>::from(target, std::move(out));
    if (a.on_tape()) {
        const int ia = a.node;
        res.tape = a.tape;
        res.node = a.tape->record(res.shape, {ia},
                                  [ia, an, tn](const std::vector<T>& g, GradBuffers<T>& gr) {
                                      T* ga = gr.acc(ia);
                                      for (i64 i = 0; i < tn; ++i) ga[i % an] += g[static_cast<std::size_t>(i)];
                                  });
    }
    return res;
}

// Gather rows of axis 0 by an index permutation: out[i] = a[order[i]].
// The backward pass is the matching scatter.
template <std::floating_point T>
Tensor<T> permute_rows(const Tensor<T>& a, const std::vector<i64>& order) {
    if (a.rank() < 1) fail("permute_rows: need rank >= 1");
    const i64 rows = a.shape[0];
    if (static_cast<i64>(order.size()) != rows)
        fail("permute_rows: order length " + std::to_string(order.size()) + " vs " +
             std::to_string(rows) + " rows");
    const i64 stride = a.numel() / std::max<i64>(rows, 1);
    std::vector<T> out(static_cast<std::size_t>(a.numel()));
    const T* px = a.ptr();
    for (i64 i = 0; i < rows; ++i) {
        const i64 src = order[static_cast<std::size_t>(i)];
        if (src < 0 || src >= rows) fail("permute_rows: index " + std::to_string(src) + " out of range");
        std::copy(px + src * stride, px + (src + 1) * stride, out.begin() + i * stride);
    }

    Tensor<T> res = Tensor<T>::from(a.shape, std::move(out));
    if (a.on_tape()) {
        const int ia = a.node;
        auto ord = std::make_shared<std::vector<i64>>(order);
        res.tape = a.tape;
        res.node = a.tape->record(res.shape, {ia},
                                  [ia, rows, stride, ord](const std::vector<T>& g, GradBuffers<T>& gr) {
                                      T* ga = gr.acc(ia);
                                      for (i64 i = 0; i < rows; ++i) {
                                          const i64 dst = (*ord)[static_cast<std::size_t>(i)];
                                          for (i64 r = 0; r < stride; ++r)
                                              ga[dst * stride + r] += g[static_cast<std::size_t>(i * stride + r)];
                                      }
                                  });
    }
    return res;
}

// ---------------------------------------------------------------------------
// loss
// ---------------------------------------------------------------------------

// Mean cross-entropy over a batch of logits [B, C], stabilized by max
// subtraction. Gradient is (softmax - onehot) / B.
template <std::floating_point T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<i64>& labels) {
    if (logits.rank() != 2)
        fail("cross_entropy: logits must be [B,C], got " + shape_str(logits.shape));
    const i64 B = logits.shape[0], C = logits.shape[1];
    if (static_cast<i64>(labels.size()) != B)
        fail("cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
             std::to_string(B));
    std::vector<T> probs(static_cast<std::size_t>(B * C));
    const T* pl = logits.ptr();
    T loss = T(0);
    for (i64 b = 0; b < B; ++b) {
        const i64 y = labels[static_cast<std::size_t>(b)];
        if (y < 0 || y >= C)
            fail("cross_entropy: label " + std::to_string(y) + " out of range [0," +
                 std::to_string(C) + ")");
        const T* row = pl + b * C;
        T m = row[0];
        for (i64 c = 1; c < C; ++c) m = std::max(m, row[c]);
        T denom = T(0);
        for (i64 c = 0; c < C; ++c) {
            const T e = std::exp(row[c] - m);
            probs[static_cast<std::size_t>(b * C + c)] = e;
            denom += e;
        }
        for (i64 c = 0; c < C; ++c) probs[static_cast<std::size_t>(b * C + c)] /= denom;
        loss += std::log(denom) - (row[y] - m);
    }
    loss /= static_cast<T>(B);

    Tensor<T> res = Tensor<T>::scalar(loss);
    if (logits.on_tape()) {
        const int il = logits.node;
        auto pd = std::make_shared<std::vector<T>>(std::move(probs));
        auto lab = std::make_shared<std::vector<i64>>(labels);
        res.tape = logits.tape;
        res.node = logits.tape->record(
            res.shape, {il}, [il, B, C, pd, lab](const std::vector<T>& g, GradBuffers<T>& gr) {
                T* gl = gr.acc(il);
                const T scale = g[0] / static_cast<T>(B);
                for (i64 b = 0; b < B; ++b)
                    for (i64 c = 0; c < C; ++c) {
                        T v = (*pd)[static_cast<std::size_t>(b * C + c)];
                        if (c == (*lab)[static_cast<std::size_t>(b)]) v -= T(1);
                        gl[b * C + c] += scale * v;
                    }
            });
    }
    return res;
}

// ---------------------------------------------------------------------------
// misc
// ---------------------------------------------------------------------------

// Throws if any element is NaN or infinite; `where` identifies the layer.
template <std::floating_point T>
void check_finite(const Tensor<T>& t, const std::string& where) {
    const T* p = t.ptr();
    const i64 n = t.numel();
    for (i64 i = 0; i < n; ++i) {
        if (!std::isfinite(p[i]))
            fail(where + ": non-finite value at flat index " + std::to_string(i));
    }
}

// Attribute bag for the generic primitive dispatcher.
struct OpAttrs {
    std::optional<i64> axis;
    std::optional<i64> stride;
    std::optional<i64> start;
    std::optional<i64> length;
    std::optional<double> eps;
    Shape shape;            // reshape / broadcast target
    std::vector<i64> perm;  // transpose axes or row order
    std::vector<i64> labels;
};

// Uniform entry point: runs one primitive by name. Unknown names are
// rejected; shape rules are enforced by the underlying op.
template <std::floating_point T>
Tensor<T> primitive_forward(const std::string& op_id, const std::vector<Tensor<T>>& in,
                            const OpAttrs& attrs = {}) {
    auto arity = [&](std::size_t want) {
        if (in.size() != want)
            fail("primitive_forward: op '" + op_id + "' expects " + std::to_string(want) +
                 " inputs, got " + std::to_string(in.size()));
    };
    auto need_axis = [&]() -> i64 {
        if (!attrs.axis) fail("primitive_forward: op '" + op_id + "' requires attrs.axis");
        return *attrs.axis;
    };
    if (op_id == "add") { arity(2); return add(in[0], in[1]); }
    if (op_id == "sub") { arity(2); return sub(in[0], in[1]); }
    if (op_id == "mul") { arity(2); return mul(in[0], in[1]); }
    if (op_id == "neg") { arity(1); return neg(in[0]); }
    if (op_id == "exp") { arity(1); return exp(in[0]); }
    if (op_id == "softplus") { arity(1); return softplus(in[0]); }
    if (op_id == "silu") { arity(1); return silu(in[0]); }
    if (op_id == "softmax") { arity(1); return softmax(in[0], need_axis()); }
    if (op_id == "layer_norm") {
        arity(1);
        return layer_norm(in[0], static_cast<T>(attrs.eps.value_or(1e-5)));
    }
    if (op_id == "mean") { arity(1); return mean(in[0], need_axis()); }
    if (op_id == "sum") { arity(1); return sum_all(in[0]); }
    if (op_id == "matmul") { arity(2); return matmul(in[0], in[1]); }
    if (op_id == "conv2d") {
        if (in.size() == 2)
            return conv2d_valid(in[0], in[1], Tensor<T>{}, attrs.stride.value_or(1));
        arity(3);
        return conv2d_valid(in[0], in[1], in[2], attrs.stride.value_or(1));
    }
    if (op_id == "conv1d_causal") {
        if (in.size() == 2) return conv1d_depthwise_causal(in[0], in[1], Tensor<T>{});
        arity(3);
        return conv1d_depthwise_causal(in[0], in[1], in[2]);
    }
    if (op_id == "concat") { return concat(in, need_axis()); }
    if (op_id == "slice") {
        arity(1);
        if (!attrs.start || !attrs.length)
            fail("primitive_forward: op 'slice' requires attrs.start and attrs.length");
        return slice(in[0], need_axis(), *attrs.start, *attrs.length);
    }
    if (op_id == "reshape") { arity(1); return reshape(in[0], attrs.shape); }
    if (op_id == "transpose") { arity(1); return transpose(in[0], attrs.perm); }
    if (op_id == "broadcast") { arity(1); return broadcast_to(in[0], attrs.shape); }
    if (op_id == "gather_rows") { arity(1); return permute_rows(in[0], attrs.perm); }
    if (op_id == "cross_entropy") { arity(1); return cross_entropy(in[0], attrs.labels); }
    fail("primitive_forward: unknown op '" + op_id + "'");
}

}  // namespace rsm
