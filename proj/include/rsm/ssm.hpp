#pragma once

#include <cmath>
#include <vector>

#include "rsm/ops.hpp"

namespace rsm {

// ---------------------------------------------------------------------------
// LTI reference layer (f64). This is the oracle side of the scan/conv duality
// checks; the model itself only ever uses the diagonal representation.
// ---------------------------------------------------------------------------

// Continuous system h' = A h + B x, y = C h with step size delta.
// `a` holds n entries when diagonal, n*n row-major entries otherwise.
struct LtiSystem {
    i64 n = 0;
    bool diagonal = true;
    std::vector<double> a;
    std::vector<double> b;
    std::vector<double> c;
    double delta = 0.0;
};

struct DiscretizedSystem {
    i64 n = 0;
    bool diagonal = true;
    std::vector<double> a_bar;  // n (diagonal) or n*n
    std::vector<double> b_bar;  // n
};

namespace detail {

inline std::vector<double> mat_mul_square(const std::vector<double>& lhs,
                                          const std::vector<double>& rhs, i64 n) {
    std::vector<double> out(static_cast<std::size_t>(n * n), 0.0);
    for (i64 i = 0; i < n; ++i)
        for (i64 k = 0; k < n; ++k) {
            const double v = lhs[static_cast<std::size_t>(i * n + k)];
            for (i64 j = 0; j < n; ++j)
                out[static_cast<std::size_t>(i * n + j)] += v * rhs[static_cast<std::size_t>(k * n + j)];
        }
    return out;
}

// Dense matrix exponential by scaling-and-squaring with a Taylor series.
// Only used on tiny matrices (n <= 9 in the oracle suite).
inline std::vector<double> mat_exp(std::vector<double> m, i64 n) {
    double norm = 0.0;
    for (i64 i = 0; i < n; ++i) {
        double row = 0.0;
        for (i64 j = 0; j < n; ++j) row += std::abs(m[static_cast<std::size_t>(i * n + j)]);
        norm = std::max(norm, row);
    }
    int squarings = 0;
    while (norm > 0.5) {
        norm /= 2.0;
        ++squarings;
    }
    const double scale = std::ldexp(1.0, -squarings);
    for (auto& v : m) v *= scale;

    std::vector<double> result(static_cast<std::size_t>(n * n), 0.0);
    std::vector<double> term(result);
    for (i64 i = 0; i < n; ++i) {
        result[static_cast<std::size_t>(i * n + i)] = 1.0;
        term[static_cast<std::size_t>(i * n + i)] = 1.0;
    }
    for (int k = 1; k <= 40; ++k) {
        term = mat_mul_square(term, m, n);
        const double inv = 1.0 / static_cast<double>(k);
        double maxterm = 0.0;
        for (std::size_t i = 0; i < term.size(); ++i) {
            term[i] *= inv;
            result[i] += term[i];
            maxterm = std::max(maxterm, std::abs(term[i]));
        }
        if (maxterm < 1e-20) break;
    }
    for (int s = 0; s < squarings; ++s) result = mat_mul_square(result, result, n);
    return result;
}

}  // namespace detail

// Zero-order-hold discretization:
//   A_bar = exp(delta A),  B_bar = (delta A)^{-1} (exp(delta A) - I) delta B.
// The diagonal case is evaluated per element in closed form via expm1; the
// full case goes through the exponential of the augmented matrix
// [[dA, dB],[0,0]], whose top-right column is exactly B_bar.
inline DiscretizedSystem zoh_discretize(const LtiSystem& sys) {
    if (sys.delta <= 0.0) fail("zoh_discretize: delta must be positive");
    if (sys.n < 1) fail("zoh_discretize: empty system");
    if (static_cast<i64>(sys.b.size()) != sys.n || static_cast<i64>(sys.c.size()) != sys.n)
        fail("zoh_discretize: b/c must have n entries");
    DiscretizedSystem disc;
    disc.n = sys.n;
    disc.diagonal = sys.diagonal;
    if (sys.diagonal) {
        if (static_cast<i64>(sys.a.size()) != sys.n)
            fail("zoh_discretize: diagonal a must have n entries");
        disc.a_bar.resize(static_cast<std::size_t>(sys.n));
        disc.b_bar.resize(static_cast<std::size_t>(sys.n));
        for (i64 i = 0; i < sys.n; ++i) {
            const double a = sys.a[static_cast<std::size_t>(i)];
            if (a == 0.0) fail("zoh_discretize: zero diagonal entry makes delta*A singular");
            const double e1 = std::expm1(sys.delta * a);
            disc.a_bar[static_cast<std::size_t>(i)] = 1.0 + e1;
            disc.b_bar[static_cast<std::size_t>(i)] = e1 / a * sys.b[static_cast<std::size_t>(i)];
        }
    } else {
        if (static_cast<i64>(sys.a.size()) != sys.n * sys.n)
            fail("zoh_discretize: full a must have n*n entries");
        const i64 m = sys.n + 1;
        std::vector<double> aug(static_cast<std::size_t>(m * m), 0.0);
        for (i64 i = 0; i < sys.n; ++i) {
            for (i64 j = 0; j < sys.n; ++j)
                aug[static_cast<std::size_t>(i * m + j)] = sys.delta * sys.a[static_cast<std::size_t>(i * sys.n + j)];
            aug[static_cast<std::size_t>(i * m + sys.n)] = sys.delta * sys.b[static_cast<std::size_t>(i)];
        }
        const auto e = detail::mat_exp(aug, m);
        disc.a_bar.resize(static_cast<std::size_t>(sys.n * sys.n));
        disc.b_bar.resize(static_cast<std::size_t>(sys.n));
        for (i64 i = 0; i < sys.n; ++i) {
            for (i64 j = 0; j < sys.n; ++j)
                disc.a_bar[static_cast<std::size_t>(i * sys.n + j)] = e[static_cast<std::size_t>(i * m + j)];
            disc.b_bar[static_cast<std::size_t>(i)] = e[static_cast<std::size_t>(i * m + sys.n)];
        }
    }
    return disc;
}

// Discrete recurrence h_k = A_bar h_{k-1} + B_bar x_k, y_k = c . h_k, h_0 = 0.
inline std::vector<double> recurrent_scan(const DiscretizedSystem& disc,
                                          const std::vector<double>& c,
                                          const std::vector<double>& x) {
    if (x.empty()) fail("recurrent_scan: empty input sequence");
    if (static_cast<i64>(c.size()) != disc.n) fail("recurrent_scan: c must have n entries");
    const i64 n = disc.n;
    std::vector<double> h(static_cast<std::size_t>(n), 0.0);
    std::vector<double> h_next(static_cast<std::size_t>(n), 0.0);
    std::vector<double> y(x.size(), 0.0);
    for (std::size_t k = 0; k < x.size(); ++k) {
        if (disc.diagonal) {
            for (i64 i = 0; i < n; ++i)
                h[static_cast<std::size_t>(i)] = disc.a_bar[static_cast<std::size_t>(i)] * h[static_cast<std::size_t>(i)] +
                                                 disc.b_bar[static_cast<std::size_t>(i)] * x[k];
        } else {
            for (i64 i = 0; i < n; ++i) {
                double acc = disc.b_bar[static_cast<std::size_t>(i)] * x[k];
                for (i64 j = 0; j < n; ++j)
                    acc += disc.a_bar[static_cast<std::size_t>(i * n + j)] * h[static_cast<std::size_t>(j)];
                h_next[static_cast<std::size_t>(i)] = acc;
            }
            std::swap(h, h_next);
        }
        double out = 0.0;
        for (i64 i = 0; i < n; ++i) out += c[static_cast<std::size_t>(i)] * h[static_cast<std::size_t>(i)];
        y[k] = out;
    }
    return y;
}

// Structured kernel K_bar = (cB, cAB, cA^2B, ...), built by propagating the
// state forward once; no matrix powers are formed.
inline std::vector<double> conv_kernel(const DiscretizedSystem& disc, const std::vector<double>& c,
                                       i64 len) {
    if (len < 1) fail("conv_kernel: kernel length must be >= 1");
    if (static_cast<i64>(c.size()) != disc.n) fail("conv_kernel: c must have n entries");
    const i64 n = disc.n;
    std::vector<double> state = disc.b_bar;
    std::vector<double> state_next(static_cast<std::size_t>(n), 0.0);
    std::vector<double> kernel(static_cast<std::size_t>(len), 0.0);
    for (i64 k = 0; k < len; ++k) {
        double out = 0.0;
        for (i64 i = 0; i < n; ++i) out += c[static_cast<std::size_t>(i)] * state[static_cast<std::size_t>(i)];
        kernel[static_cast<std::size_t>(k)] = out;
        if (k + 1 == len) break;
        if (disc.diagonal) {
            for (i64 i = 0; i < n; ++i) state[static_cast<std::size_t>(i)] *= disc.a_bar[static_cast<std::size_t>(i)];
        } else {
            for (i64 i = 0; i < n; ++i) {
                double acc = 0.0;
                for (i64 j = 0; j < n; ++j)
                    acc += disc.a_bar[static_cast<std::size_t>(i * n + j)] * state[static_cast<std::size_t>(j)];
                state_next[static_cast<std::size_t>(i)] = acc;
            }
            std::swap(state, state_next);
        }
    }
    return kernel;
}

// Causal convolution y_k = sum_{j<=k} K_j x_{k-j}; kernel length must match
// the sequence length.
inline std::vector<double> conv_apply(const std::vector<double>& x,
                                      const std::vector<double>& kernel) {
    if (x.size() != kernel.size())
        fail("conv_apply: kernel length " + std::to_string(kernel.size()) +
             " does not match sequence length " + std::to_string(x.size()));
    const i64 L = static_cast<i64>(x.size());
    std::vector<double> y(x.size(), 0.0);
    for (i64 k = 0; k < L; ++k) {
        double acc = 0.0;
        for (i64 j = 0; j <= k; ++j) acc += kernel[static_cast<std::size_t>(j)] * x[static_cast<std::size_t>(k - j)];
        y[static_cast<std::size_t>(k)] = acc;
    }
    return y;
}

// ---------------------------------------------------------------------------
// Selective (time-varying) scan. One fused autodiff primitive: the recurrence
// is sequential in k, channels are independent, and the backward pass is the
// reverse-time adjoint recurrence over saved states.
// ---------------------------------------------------------------------------

template <std::floating_point T>
struct SelectiveScanInput {
    Tensor<T> u;       // [L, C] input sequence
    Tensor<T> delta;   // [L, C] per-step time scales, strictly positive
    Tensor<T> a;       // [C, N] diagonal state matrix rows, strictly negative
    Tensor<T> b_seq;   // [L, N] per-step input projection
    Tensor<T> c_seq;   // [L, N] per-step output projection
    Tensor<T> d_skip;  // [C] per-channel skip coefficient
    // Exact ZOH (expm1(delta a)/a * B) by default; the common delta*B
    // simplification when set.
    bool simplified_b = false;
};

template <std::floating_point T>
Tensor<T> selective_scan(const SelectiveScanInput<T>& in) {
    const Tensor<T>&u = in.u, &dt = in.delta, &a = in.a, &bs = in.b_seq, &cs = in.c_seq,
          &dk = in.d_skip;
    if (u.rank() != 2) fail("selective_scan: u must be [L,C], got " + shape_str(u.shape));
    const i64 L = u.shape[0], C = u.shape[1];
    if (L < 1) fail("selective_scan: empty sequence");
    if (dt.shape != u.shape)
        fail("selective_scan: delta shape " + shape_str(dt.shape) + " vs u " + shape_str(u.shape));
    if (a.rank() != 2 || a.shape[0] != C)
        fail("selective_scan: a must be [C,N], got " + shape_str(a.shape));
    const i64 N = a.shape[1];
    if (bs.rank() != 2 || bs.shape[0] != L || bs.shape[1] != N)
        fail("selective_scan: b_seq must be [L,N], got " + shape_str(bs.shape));
    if (cs.shape != bs.shape)
        fail("selective_scan: c_seq must be [L,N], got " + shape_str(cs.shape));
    if (dk.numel() != C) fail("selective_scan: d_skip must have C entries");
    for (i64 i = 0; i < dt.numel(); ++i)
        if (!(dt.at(i) > T(0))) fail("selective_scan: non-positive delta at flat index " + std::to_string(i));

    Tape<T>* tp = detail::tape_of<T>({&u, &dt, &a, &bs, &cs, &dk});
    const bool simplified = in.simplified_b;

    // Saved activations for the adjoint pass: e1 = expm1(delta*a) and the
    // post-step states h.
    std::shared_ptr<std::vector<T>> e1_saved, h_saved;
    if (tp) {
        e1_saved = std::make_shared<std::vector<T>>(static_cast<std::size_t>(L * C * N));
        h_saved = std::make_shared<std::vector<T>>(static_cast<std::size_t>(L * C * N));
    }

    std::vector<T> y(static_cast<std::size_t>(L * C), T(0));
    std::vector<T> h(static_cast<std::size_t>(C * N), T(0));
    {
        const T* pu = u.ptr();
        const T* pdt = dt.ptr();
        const T* pa = a.ptr();
        const T* pb = bs.ptr();
        const T* pc = cs.ptr();
        const T* pd = dk.ptr();
        for (i64 k = 0; k < L; ++k) {
            for (i64 c = 0; c < C; ++c) {
                const T dt_kc = pdt[k * C + c];
                const T u_kc = pu[k * C + c];
                T* hc = h.data() + c * N;
                const T* ac = pa + c * N;
                T out = T(0);
                for (i64 i = 0; i < N; ++i) {
                    const T e1 = std::expm1(dt_kc * ac[i]);
                    const T alpha = T(1) + e1;
                    const T bcoef = simplified ? dt_kc : e1 / ac[i];
                    hc[i] = alpha * hc[i] + bcoef * pb[k * N + i] * u_kc;
                    out += pc[k * N + i] * hc[i];
                    if (tp) {
                        (*e1_saved)[static_cast<std::size_t>((k * C + c) * N + i)] = e1;
                        (*h_saved)[static_cast<std::size_t>((k * C + c) * N + i)] = hc[i];
                    }
                }
                y[static_cast<std::size_t>(k * C + c)] = out + pd[c] * u_kc;
            }
        }
    }

    Tensor<T> res = Tensor<T>::from({L, C}, std::move(y));
    if (tp) {
        const int iu = detail::node_of(u);
        const int idt = detail::node_of(dt);
        const int ia = detail::node_of(a);
        const int ib = detail::node_of(bs);
        const int ic = detail::node_of(cs);
        const int id = detail::node_of(dk);
        auto ud = u.data;
        auto dtd = dt.data;
        auto ad = a.data;
        auto bd = bs.data;
        auto cd = cs.data;
        auto dd = dk.data;
        res.tape = tp;
        res.node = tp->record(
            res.shape, detail::parents_of({iu, idt, ia, ib, ic, id}),
            [=](const std::vector<T>& g, GradBuffers<T>& gr) {
                T* gu = iu >= 0 ? gr.acc(iu) : nullptr;
                T* gdt = idt >= 0 ? gr.acc(idt) : nullptr;
                T* ga = ia >= 0 ? gr.acc(ia) : nullptr;
                T* gb = ib >= 0 ? gr.acc(ib) : nullptr;
                T* gc = ic >= 0 ? gr.acc(ic) : nullptr;
                T* gd = id >= 0 ? gr.acc(id) : nullptr;
                const T* pu = ud->data();
                const T* pdt = dtd->data();
                const T* pa = ad->data();
                const T* pb = bd->data();
                const T* pc = cd->data();
                const T* pd = dd->data();
                const T* e1s = e1_saved->data();
                const T* hs = h_saved->data();
                // hhat = dL/dh_k, maintained per channel across the reverse sweep
                std::vector<T> hhat(static_cast<std::size_t>(C * N), T(0));
                for (i64 k = L - 1; k >= 0; --k) {
                    for (i64 c = 0; c < C; ++c) {
                        const T gy = g[static_cast<std::size_t>(k * C + c)];
                        const T dt_kc = pdt[k * C + c];
                        const T u_kc = pu[k * C + c];
                        T* hq = hhat.data() + c * N;
                        const T* ac = pa + c * N;
                        if (gd) gd[c] += gy * u_kc;
                        T du_acc = pd[c] * gy;
                        T ddt_acc = T(0);
                        for (i64 i = 0; i < N; ++i) {
                            const std::size_t kci = static_cast<std::size_t>((k * C + c) * N + i);
                            const T e1 = e1s[kci];
                            const T alpha = T(1) + e1;
                            const T h_kci = hs[kci];
                            // adjoint of h at step k (suffix from k+1 already in hq)
                            const T hh = pc[k * N + i] * gy + hq[i];
                            const T h_prev = k > 0 ? hs[kci - static_cast<std::size_t>(C * N)] : T(0);
                            const T b_ki = pb[k * N + i];
                            const T bcoef = simplified ? dt_kc : e1 / ac[i];
                            const T dalpha = hh * h_prev;
                            const T dbeta = hh * u_kc;
                            if (gc) gc[k * N + i] += gy * h_kci;
                            if (gb) gb[k * N + i] += dbeta * bcoef;
                            du_acc += bcoef * b_ki * hh;
                            if (gdt || ga) {
                                const T dbeta_ddt = (simplified ? T(1) : alpha) * b_ki;
                                ddt_acc += dalpha * ac[i] * alpha + dbeta * dbeta_ddt;
                                if (ga) {
                                    const T dbcoef_da =
                                        simplified ? T(0)
                                                   : (dt_kc * alpha * ac[i] - e1) / (ac[i] * ac[i]);
                                    ga[c * N + i] += dalpha * dt_kc * alpha + dbeta * dbcoef_da * b_ki;
                                }
                            }
                            // push the adjoint one step back in time
                            hq[i] = alpha * hh;
                        }
                        if (gu) gu[k * C + c] += du_acc;
                        if (gdt) gdt[k * C + c] += ddt_acc;
                    }
                }
            });
    }
    return res;
}

}  // namespace rsm
