#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "rsm/block.hpp"

namespace rsm {

enum class Preset { Base, Large, Huge, Custom };
enum class PeKind { None, Fourier, Learnable };
enum class HeadKind { MeanPool, ClsHead, ClsTail, ClsHeadTail, ClsMiddle };

// Full classifier configuration. The presets bind (N, HS, IS, TSR, SSMSS) to
// the standard Base/Large/Huge rows; everything else is free.
struct ModelConfig {
    Preset preset = Preset::Custom;
    i64 num_blocks = 0;
    i64 hidden_size = 0;
    i64 intermediate_size = 0;
    i64 time_step_rank = 0;
    i64 ssm_state_size = 16;
    i64 conv_width = 4;

    i64 image_h = 224, image_w = 224;
    i64 patch_kernel = 16, patch_stride = 8;
    i64 num_classes = 0;

    PeKind pe_kind = PeKind::Learnable;
    HeadKind head_kind = HeadKind::MeanPool;
    std::vector<PathKind> paths{PathKind::Forward, PathKind::Reverse, PathKind::Shuffle};
    bool gate_fusion = true;
    bool pre_norm = true;
    bool simplified_b = false;

    static constexpr i64 kImageChannels = 3;

    i64 grid_h() const { return (image_h - patch_kernel) / patch_stride + 1; }
    i64 grid_w() const { return (image_w - patch_kernel) / patch_stride + 1; }
    i64 seq_len() const { return grid_h() * grid_w(); }

    bool uses_cls_token() const { return head_kind != HeadKind::MeanPool; }

    // Sequence length after class-token insertion.
    i64 trunk_len() const {
        switch (head_kind) {
            case HeadKind::MeanPool: return seq_len();
            case HeadKind::ClsHeadTail: return seq_len() + 2;
            default: return seq_len() + 1;
        }
    }

    MixerConfig mixer_config() const {
        return MixerConfig{hidden_size, intermediate_size, time_step_rank, ssm_state_size,
                           conv_width};
    }

    BlockSettings block_settings() const {
        return BlockSettings{mixer_config(), paths, gate_fusion, pre_norm, simplified_b};
    }

    void validate() const {
        if (num_blocks < 0) fail("ModelConfig: num_blocks must be >= 0");
        if (hidden_size < 1) fail("ModelConfig: hidden_size must be positive");
        mixer_config().validate();
        if (num_classes < 1) fail("ModelConfig: num_classes must be positive");
        if (image_h < 1 || image_w < 1) fail("ModelConfig: empty image");
        if (patch_kernel > image_h || patch_kernel > image_w)
            fail("ModelConfig: patch kernel " + std::to_string(patch_kernel) +
                 " exceeds image extent " + std::to_string(image_h) + "x" + std::to_string(image_w));
        if (patch_stride < 1 || patch_stride > patch_kernel)
            fail("ModelConfig: stride must satisfy 1 <= s <= k");
        if (pe_kind == PeKind::Fourier && hidden_size % 4 != 0)
            fail("ModelConfig: Fourier encoding needs hidden_size divisible by 4");
        if (num_blocks > 0) block_settings().validate();
    }

    static ModelConfig for_preset(Preset p, i64 classes) {
        ModelConfig cfg;
        cfg.preset = p;
        cfg.num_classes = classes;
        switch (p) {
            case Preset::Base:
                cfg.num_blocks = 24; cfg.hidden_size = 192; cfg.intermediate_size = 384;
                cfg.time_step_rank = 12; cfg.ssm_state_size = 16;
                break;
            case Preset::Large:
                cfg.num_blocks = 36; cfg.hidden_size = 256; cfg.intermediate_size = 512;
                cfg.time_step_rank = 16; cfg.ssm_state_size = 16;
                break;
            case Preset::Huge:
                cfg.num_blocks = 48; cfg.hidden_size = 320; cfg.intermediate_size = 640;
                cfg.time_step_rank = 20; cfg.ssm_state_size = 16;
                break;
            case Preset::Custom: fail("ModelConfig::for_preset: custom has no preset sizes");
        }
        return cfg;
    }
};

template <std::floating_point T>
struct ModelParams {
    Tensor<T> patch_w;    // [k, k, 3, d]
    Tensor<T> patch_b;    // [d]
    Tensor<T> pos_table;  // [L, d], learnable encoding only
    Tensor<T> cls_token;  // [d], class-token heads only
    std::vector<BlockParams<T>> blocks;
    Tensor<T> ln_gamma;  // [d]
    Tensor<T> ln_beta;   // [d]
    Tensor<T> head_w;    // [d, num_classes]
    Tensor<T> head_b;    // [num_classes]
};

template <std::floating_point T, class F>
void visit_params(ModelParams<T>& p, F&& f) {
    f("patch.w", p.patch_w);
    f("patch.b", p.patch_b);
    if (p.pos_table.defined()) f("pos_embed", p.pos_table);
    if (p.cls_token.defined()) f("cls_token", p.cls_token);
    for (std::size_t i = 0; i < p.blocks.size(); ++i)
        visit_block(p.blocks[i], "blocks." + std::to_string(i) + ".", f);
    f("head_norm.gamma", p.ln_gamma);
    f("head_norm.beta", p.ln_beta);
    f("head.w", p.head_w);
    f("head.b", p.head_b);
}

template <std::floating_point T>
ModelParams<T> init_model_params(const ModelConfig& cfg, u64 seed) {
    cfg.validate();
    Rng rng(mix64(seed, 0x70617261756d73ULL));
    const i64 d = cfg.hidden_size, k = cfg.patch_kernel;
    ModelParams<T> p;
    p.patch_w = detail::uniform_fan_in<T>(rng, {k, k, ModelConfig::kImageChannels, d},
                                          k * k * ModelConfig::kImageChannels);
    p.patch_b = detail::uniform_fan_in<T>(rng, {d}, k * k * ModelConfig::kImageChannels);
    if (cfg.pe_kind == PeKind::Learnable) {
        std::vector<T> pe(static_cast<std::size_t>(cfg.seq_len() * d));
        for (auto& v : pe) v = static_cast<T>(rng.normal(0.0, 0.02));
        p.pos_table = Tensor<T>::from({cfg.seq_len(), d}, std::move(pe));
    }
    if (cfg.uses_cls_token()) {
        std::vector<T> tok(static_cast<std::size_t>(d));
        for (auto& v : tok) v = static_cast<T>(rng.normal(0.0, 0.02));
        p.cls_token = Tensor<T>::from({d}, std::move(tok));
    }
    const BlockSettings st = cfg.block_settings();
    for (i64 i = 0; i < cfg.num_blocks; ++i) p.blocks.push_back(init_block_params<T>(st, rng));
    p.ln_gamma = Tensor<T>::ones({d});
    p.ln_beta = Tensor<T>::zeros({d});
    p.head_w = detail::uniform_fan_in<T>(rng, {d, cfg.num_classes}, d);
    p.head_b = detail::uniform_fan_in<T>(rng, {cfg.num_classes}, d);
    return p;
}

// Analytic learnable-scalar count for a configuration.
inline i64 count_parameters(const ModelConfig& cfg) {
    cfg.validate();
    const i64 d = cfg.hidden_size, k = cfg.patch_kernel;
    i64 n = k * k * ModelConfig::kImageChannels * d + d;  // patch conv
    if (cfg.pe_kind == PeKind::Learnable) n += cfg.seq_len() * d;
    if (cfg.uses_cls_token()) n += d;
    n += cfg.num_blocks * count_block_params(cfg.block_settings());
    n += 2 * d;                                    // head layer norm
    n += d * cfg.num_classes + cfg.num_classes;    // head projection
    return n;
}

// Enumeration oracle: total scalars actually held by a parameter set.
template <std::floating_point T>
i64 count_parameters(ModelParams<T>& params) {
    i64 n = 0;
    visit_params(params, [&](const std::string&, Tensor<T>& t) { n += t.numel(); });
    return n;
}

// Strided patch embedding: valid-mode conv then row-major flatten of the
// spatial grid (rows left to right, top to bottom).
template <std::floating_point T>
Tensor<T> patch_embed(const Tensor<T>& image, const ModelParams<T>& params,
                      const ModelConfig& cfg) {
    if (image.rank() != 3 || image.shape[2] != ModelConfig::kImageChannels ||
        image.shape[0] != cfg.image_h || image.shape[1] != cfg.image_w)
        fail("patch_embed: expected image [" + std::to_string(cfg.image_h) + "," +
             std::to_string(cfg.image_w) + ",3], got " + shape_str(image.shape));
    check_finite(image, "patch_embed.input");
    auto grid = conv2d_valid(image, params.patch_w, params.patch_b, cfg.patch_stride);
    return reshape(grid, {cfg.seq_len(), cfg.hidden_size});
}

// Fixed sin/cos features of the 2-D grid coordinates: d/4 frequency pairs per
// axis on a geometric ladder from 1 to L, row axis first, sin/cos interleaved.
template <std::floating_point T>
Tensor<T> fourier_position_table(const ModelConfig& cfg) {
    const i64 d = cfg.hidden_size, gh = cfg.grid_h(), gw = cfg.grid_w(), L = cfg.seq_len();
    if (d % 4 != 0) fail("fourier_position_table: hidden_size must be divisible by 4");
    const i64 pairs = d / 4;  // per axis
    std::vector<double> freq(static_cast<std::size_t>(pairs));
    for (i64 j = 0; j < pairs; ++j)
        freq[static_cast<std::size_t>(j)] =
            pairs > 1 ? std::pow(static_cast<double>(L),
                                 static_cast<double>(j) / static_cast<double>(pairs - 1))
                      : 1.0;
    const double two_pi = 6.283185307179586476925286766559;
    std::vector<T> table(static_cast<std::size_t>(L * d));
    for (i64 r = 0; r < gh; ++r)
        for (i64 c = 0; c < gw; ++c) {
            T* row = table.data() + (r * gw + c) * d;
            const double rv = static_cast<double>(r) / static_cast<double>(gh);
            const double cv = static_cast<double>(c) / static_cast<double>(gw);
            for (i64 j = 0; j < pairs; ++j) {
                const double fr = freq[static_cast<std::size_t>(j)];
                row[2 * j] = static_cast<T>(std::sin(two_pi * fr * rv));
                row[2 * j + 1] = static_cast<T>(std::cos(two_pi * fr * rv));
                row[2 * pairs + 2 * j] = static_cast<T>(std::sin(two_pi * fr * cv));
                row[2 * pairs + 2 * j + 1] = static_cast<T>(std::cos(two_pi * fr * cv));
            }
        }
    return Tensor<T>::from({L, d}, std::move(table));
}

template <std::floating_point T>
Tensor<T> add_position_encoding(const Tensor<T>& seq, const ModelParams<T>& params,
                                const ModelConfig& cfg) {
    switch (cfg.pe_kind) {
        case PeKind::None: return seq;
        case PeKind::Fourier: return add(seq, fourier_position_table<T>(cfg));
        case PeKind::Learnable: {
            if (!params.pos_table.defined() || params.pos_table.shape != seq.shape)
                fail("add_position_encoding: positional table " +
                     (params.pos_table.defined() ? shape_str(params.pos_table.shape)
                                                 : std::string("(undefined)")) +
                     " does not match sequence " + shape_str(seq.shape) +
                     "; the table is bound to one patch geometry");
            // TODO: bicubic interpolation of the table would allow changing the
            // image extent at eval time instead of rejecting it.
            return add(seq, params.pos_table);
        }
    }
    fail("add_position_encoding: unknown encoding kind");
}

namespace detail {

// Class-token insertion indices (token gets no positional encoding; it is
// spliced in after the encoding step). Head = 0, Tail = L, Middle = floor(L/2),
// HeadTail = both ends.
inline std::vector<i64> cls_positions(HeadKind kind, i64 len) {
    switch (kind) {
        case HeadKind::MeanPool: return {};
        case HeadKind::ClsHead: return {0};
        case HeadKind::ClsTail: return {len};
        case HeadKind::ClsMiddle: return {len / 2};
        case HeadKind::ClsHeadTail: return {0, len + 1};
    }
    fail("cls_positions: unknown head kind");
}

}  // namespace detail

template <std::floating_point T>
Tensor<T> insert_cls_token(const Tensor<T>& seq, const Tensor<T>& cls_token, HeadKind kind) {
    const i64 len = seq.shape[0];
    auto row = reshape(cls_token, {1, cls_token.numel()});
    switch (kind) {
        case HeadKind::MeanPool: return seq;
        case HeadKind::ClsHead: return concat<T>({row, seq}, 0);
        case HeadKind::ClsTail: return concat<T>({seq, row}, 0);
        case HeadKind::ClsHeadTail: return concat<T>({row, seq, row}, 0);
        case HeadKind::ClsMiddle: {
            const i64 m = len / 2;
            if (m == 0) return concat<T>({row, seq}, 0);
            return concat<T>({slice(seq, 0, 0, m), row, slice(seq, 0, m, len - m)}, 0);
        }
    }
    fail("insert_cls_token: unknown head kind");
}

// Forward pass for one (already normalized) image. The tape, if any, rides in
// on the bound parameter tensors. `seed` fixes the shuffle permutations: in
// training each forward pass gets its own stream; in eval the permutation is
// a pure function of (seed, block index, trunk length).
template <std::floating_point T>
Tensor<T> model_forward_sample(const Tensor<T>& image, const ModelParams<T>& params,
                               const ModelConfig& cfg, u64 seed, bool train_mode) {
    cfg.validate();
    auto seq = patch_embed(image, params, cfg);
    seq = add_position_encoding(seq, params, cfg);
    if (cfg.uses_cls_token()) seq = insert_cls_token(seq, params.cls_token, cfg.head_kind);

    const i64 len = seq.shape[0];
    const BlockSettings st = cfg.block_settings();
    for (i64 i = 0; i < cfg.num_blocks; ++i) {
        const u64 perm_seed = train_mode ? mix64(seed, static_cast<u64>(i), 0x747261696eULL)
                                         : mix64(seed, static_cast<u64>(i), static_cast<u64>(len));
        Permutation shuffle = Permutation::shuffled(len, perm_seed);
        seq = add(block_forward(seq, params.blocks[static_cast<std::size_t>(i)], st, shuffle), seq);
        check_finite(seq, "model.blocks[" + std::to_string(i) + "]");
    }

    Tensor<T> feat;
    if (cfg.head_kind == HeadKind::MeanPool) {
        feat = mean(seq, 0);
    } else {
        const auto pos = detail::cls_positions(cfg.head_kind, cfg.seq_len());
        feat = reshape(slice(seq, 0, pos[0], 1), {cfg.hidden_size});
        if (pos.size() == 2) {
            auto second = reshape(slice(seq, 0, pos[1], 1), {cfg.hidden_size});
            feat = scale(add(feat, second), T(0.5));
        }
    }
    feat = add(mul(layer_norm(feat), params.ln_gamma), params.ln_beta);
    auto logits = add(matmul(reshape(feat, {1, cfg.hidden_size}), params.head_w), params.head_b);
    return reshape(logits, {cfg.num_classes});
}

// Batch evaluation: stacks per-sample logits into [B, num_classes]. Pure
// forward, nothing is recorded.
template <std::floating_point T>
Tensor<T> model_forward(const std::vector<Tensor<T>>& images, const ModelParams<T>& params,
                        const ModelConfig& cfg, u64 seed, bool train_mode) {
    if (images.empty()) fail("model_forward: empty batch");
    std::vector<Tensor<T>> rows;
    rows.reserve(images.size());
    for (std::size_t b = 0; b < images.size(); ++b) {
        const u64 sample_seed = train_mode ? mix64(seed, static_cast<u64>(b)) : seed;
        auto logits = model_forward_sample(images[b], params, cfg, sample_seed, train_mode);
        rows.push_back(reshape(logits, {1, cfg.num_classes}));
    }
    return concat(rows, 0);
}

// Copy of `params` with every tensor registered as a leaf on `tape`; storage
// is shared with the original.
template <std::floating_point T>
ModelParams<T> bind_params(const ModelParams<T>& params, Tape<T>& tape) {
    ModelParams<T> bound = params;
    visit_params(bound, [&](const std::string&, Tensor<T>& t) { t = tape.leaf(t); });
    return bound;
}

}  // namespace rsm
