#pragma once

#include <string>

#include "rsm/rng.hpp"
#include "rsm/ssm.hpp"

namespace rsm {

// Size parameters of one gated selective-SSM mixer.
struct MixerConfig {
    i64 hidden_size = 0;        // d
    i64 intermediate_size = 0;  // IS (expansion 2*d in the standard presets)
    i64 time_step_rank = 0;     // TSR
    i64 ssm_state_size = 0;     // N
    i64 conv_width = 4;

    void validate() const {
        if (hidden_size < 1 || intermediate_size < 1 || time_step_rank < 1 || ssm_state_size < 1)
            fail("MixerConfig: all sizes must be positive");
        if (conv_width < 1) fail("MixerConfig: conv_width must be >= 1");
    }
};

// All learnable weights of one mixer. Projections carry no bias except the
// depthwise conv and dt_proj; A is stored as a_log with A = -exp(a_log).
template <std::floating_point T>
struct MixerParams {
    Tensor<T> in_proj_w;   // [d, 2*IS] -> branch x and gate z
    Tensor<T> conv_w;      // [IS, conv_width]
    Tensor<T> conv_b;      // [IS]
    Tensor<T> x_proj_w;    // [IS, TSR + 2*N] -> dt logits, B_seq, C_seq
    Tensor<T> dt_proj_w;   // [TSR, IS]
    Tensor<T> dt_proj_b;   // [IS]
    Tensor<T> a_log;       // [IS, N]
    Tensor<T> d_skip;      // [IS]
    Tensor<T> out_proj_w;  // [IS, d]
};

namespace detail {

template <std::floating_point T>
Tensor<T> uniform_fan_in(Rng& rng, Shape shape, i64 fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::vector<T> v(static_cast<std::size_t>(numel_of(shape)));
    for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from(std::move(shape), std::move(v));
}

}  // namespace detail

// Initialization: uniform +-1/sqrt(fan_in) projections, A = -(1..N) per row,
// dt bias placed so softplus(dt) is log-uniform in [1e-3, 1e-1], D = 1.
template <std::floating_point T>
MixerParams<T> init_mixer_params(const MixerConfig& cfg, Rng& rng) {
    cfg.validate();
    const i64 d = cfg.hidden_size, is = cfg.intermediate_size, tsr = cfg.time_step_rank,
              n = cfg.ssm_state_size, w = cfg.conv_width;
    MixerParams<T> p;
    p.in_proj_w = detail::uniform_fan_in<T>(rng, {d, 2 * is}, d);
    p.conv_w = detail::uniform_fan_in<T>(rng, {is, w}, w);
    p.conv_b = detail::uniform_fan_in<T>(rng, {is}, w);
    p.x_proj_w = detail::uniform_fan_in<T>(rng, {is, tsr + 2 * n}, is);
    p.dt_proj_w = detail::uniform_fan_in<T>(rng, {tsr, is}, tsr);
    {
        std::vector<T> b(static_cast<std::size_t>(is));
        for (auto& v : b) {
            const double dt = rng.log_uniform(1e-3, 1e-1);
            v = static_cast<T>(std::log(std::expm1(dt)));  // softplus inverse
        }
        p.dt_proj_b = Tensor<T>::from({is}, std::move(b));
    }
    {
        std::vector<T> a(static_cast<std::size_t>(is * n));
        for (i64 c = 0; c < is; ++c)
            for (i64 i = 0; i < n; ++i)
                a[static_cast<std::size_t>(c * n + i)] =
                    static_cast<T>(std::log(static_cast<double>(i + 1)));
        p.a_log = Tensor<T>::from({is, n}, std::move(a));
    }
    p.d_skip = Tensor<T>::ones({is});
    p.out_proj_w = detail::uniform_fan_in<T>(rng, {is, d}, is);
    return p;
}

// Exact learnable-scalar count of one mixer.
inline i64 count_mixer_params(const MixerConfig& cfg) {
    cfg.validate();
    const i64 d = cfg.hidden_size, is = cfg.intermediate_size, tsr = cfg.time_step_rank,
              n = cfg.ssm_state_size, w = cfg.conv_width;
    return d * 2 * is            // in_proj
           + is * w + is         // depthwise conv + bias
           + is * (tsr + 2 * n)  // x_proj
           + tsr * is + is       // dt_proj + bias
           + is * n              // a_log
           + is                  // d_skip
           + is * d;             // out_proj
}

template <std::floating_point T, class F>
void visit_mixer(MixerParams<T>& p, const std::string& prefix, F&& f) {
    f(prefix + "in_proj.w", p.in_proj_w);
    f(prefix + "conv.w", p.conv_w);
    f(prefix + "conv.b", p.conv_b);
    f(prefix + "x_proj.w", p.x_proj_w);
    f(prefix + "dt_proj.w", p.dt_proj_w);
    f(prefix + "dt_proj.b", p.dt_proj_b);
    f(prefix + "a_log", p.a_log);
    f(prefix + "d_skip", p.d_skip);
    f(prefix + "out_proj.w", p.out_proj_w);
}

// The standard gated dual-branch mixer: input projection splits into the SSM
// branch and a gate; the SSM branch runs silu(causal depthwise conv), the
// input-dependent (delta, B, C) projections and the selective scan; the gate
// multiplies in as silu(z) before the output projection.
template <std::floating_point T>
Tensor<T> mixer_forward(const Tensor<T>& seq, const MixerParams<T>& p, const MixerConfig& cfg,
                        bool simplified_b = false) {
    cfg.validate();
    if (seq.rank() != 2 || seq.shape[1] != cfg.hidden_size)
        fail("mixer_forward: expected [L," + std::to_string(cfg.hidden_size) + "], got " +
             shape_str(seq.shape));
    if (seq.shape[0] < 1) fail("mixer_forward: empty sequence");
    check_finite(seq, "mixer.input");
    const i64 is = cfg.intermediate_size, tsr = cfg.time_step_rank, n = cfg.ssm_state_size;

    auto xz = matmul(seq, p.in_proj_w);
    check_finite(xz, "mixer.in_proj");
    auto x = slice(xz, 1, 0, is);
    auto z = slice(xz, 1, is, is);

    x = silu(conv1d_depthwise_causal(x, p.conv_w, p.conv_b));
    check_finite(x, "mixer.conv1d");

    auto proj = matmul(x, p.x_proj_w);
    check_finite(proj, "mixer.x_proj");
    auto dt_logits = slice(proj, 1, 0, tsr);
    auto b_seq = slice(proj, 1, tsr, n);
    auto c_seq = slice(proj, 1, tsr + n, n);

    auto delta = softplus(add(matmul(dt_logits, p.dt_proj_w), p.dt_proj_b));
    check_finite(delta, "mixer.dt_proj");

    SelectiveScanInput<T> scan;
    scan.u = x;
    scan.delta = delta;
    scan.a = neg(exp(p.a_log));
    scan.b_seq = b_seq;
    scan.c_seq = c_seq;
    scan.d_skip = p.d_skip;
    scan.simplified_b = simplified_b;
    auto y = selective_scan(scan);
    check_finite(y, "mixer.selective_scan");

    auto out = matmul(mul(y, silu(z)), p.out_proj_w);
    check_finite(out, "mixer.out_proj");
    return out;
}

}  // namespace rsm
