#pragma once

#include "rsm/mixer.hpp"

namespace rsm {

// The three scanning paths, in gate order.
enum class PathKind { Forward = 0, Reverse = 1, Shuffle = 2 };

// A bijection on token positions together with its inverse.
struct Permutation {
    std::vector<i64> order;    // output row i reads input row order[i]
    std::vector<i64> inverse;  // inverse[order[i]] == i

    i64 size() const { return static_cast<i64>(order.size()); }

    static Permutation identity(i64 len) {
        Permutation p;
        p.order.resize(static_cast<std::size_t>(len));
        for (i64 i = 0; i < len; ++i) p.order[static_cast<std::size_t>(i)] = i;
        p.inverse = p.order;
        return p;
    }

    static Permutation reversed(i64 len) {
        Permutation p;
        p.order.resize(static_cast<std::size_t>(len));
        for (i64 i = 0; i < len; ++i) p.order[static_cast<std::size_t>(i)] = len - 1 - i;
        p.inverse = p.order;  // an involution
        return p;
    }

    static Permutation shuffled(i64 len, u64 seed) {
        Rng rng(seed);
        return from_order(rng.permutation(len));
    }

    static Permutation from_order(std::vector<i64> order) {
        Permutation p;
        p.inverse.assign(order.size(), -1);
        for (std::size_t i = 0; i < order.size(); ++i) {
            const i64 src = order[i];
            if (src < 0 || src >= static_cast<i64>(order.size()) ||
                p.inverse[static_cast<std::size_t>(src)] != -1)
                fail("Permutation: order is not a bijection");
            p.inverse[static_cast<std::size_t>(src)] = static_cast<i64>(i);
        }
        p.order = std::move(order);
        return p;
    }

    static Permutation for_path(PathKind kind, i64 len, u64 shuffle_seed) {
        switch (kind) {
            case PathKind::Forward: return identity(len);
            case PathKind::Reverse: return reversed(len);
            case PathKind::Shuffle: return shuffled(len, shuffle_seed);
        }
        fail("Permutation: unknown path kind");
    }
};

template <std::floating_point T>
Tensor<T> apply_path(const Tensor<T>& seq, const Permutation& perm) {
    if (perm.size() != seq.shape[0])
        fail("apply_path: permutation length " + std::to_string(perm.size()) +
             " vs sequence length " + std::to_string(seq.shape[0]));
    return permute_rows(seq, perm.order);
}

template <std::floating_point T>
Tensor<T> revert_path(const Tensor<T>& seq, const Permutation& perm) {
    if (perm.size() != seq.shape[0])
        fail("revert_path: permutation length " + std::to_string(perm.size()) +
             " vs sequence length " + std::to_string(seq.shape[0]));
    return permute_rows(seq, perm.inverse);
}

// One multi-path block: a single mixer parameter set shared by all paths,
// plus the gate projection (num_paths*d -> num_paths). The gate tensors are
// left undefined when the block fuses by plain averaging.
template <std::floating_point T>
struct BlockParams {
    MixerParams<T> mixer;
    Tensor<T> gate_w;  // [P*d, P]
    Tensor<T> gate_b;  // [P]
};

struct BlockSettings {
    MixerConfig mixer;
    std::vector<PathKind> paths{PathKind::Forward, PathKind::Reverse, PathKind::Shuffle};
    bool gate_fusion = true;  // softmax gate; false = unweighted mean
    bool pre_norm = true;     // layer norm on the block input, inside the residual
    bool simplified_b = false;

    void validate() const {
        mixer.validate();
        if (paths.empty()) fail("BlockSettings: need at least one path");
        if (paths.size() > 3) fail("BlockSettings: at most three paths");
    }
    i64 num_paths() const { return static_cast<i64>(paths.size()); }
    bool has_gate() const { return gate_fusion && paths.size() > 1; }
};

template <std::floating_point T>
BlockParams<T> init_block_params(const BlockSettings& st, Rng& rng) {
    st.validate();
    BlockParams<T> p;
    p.mixer = init_mixer_params<T>(st.mixer, rng);
    if (st.has_gate()) {
        const i64 np = st.num_paths();
        const i64 gd = np * st.mixer.hidden_size;
        p.gate_w = detail::uniform_fan_in<T>(rng, {gd, np}, gd);
        p.gate_b = Tensor<T>::zeros({np});
    }
    return p;
}

inline i64 count_block_params(const BlockSettings& st) {
    st.validate();
    i64 n = count_mixer_params(st.mixer);
    if (st.has_gate()) {
        const i64 np = st.num_paths();
        n += np * st.mixer.hidden_size * np + np;
    }
    return n;
}

template <std::floating_point T, class F>
void visit_block(BlockParams<T>& p, const std::string& prefix, F&& f) {
    visit_mixer(p.mixer, prefix + "mixer.", f);
    if (p.gate_w.defined()) {
        f(prefix + "gate.w", p.gate_w);
        f(prefix + "gate.b", p.gate_b);
    }
}

// Softmax gate over the per-path pooled features: concat the reverted path
// outputs along the feature axis, mean-pool over the sequence, project to one
// logit per path. Returns the [P] simplex weights.
template <std::floating_point T>
Tensor<T> gate_weights(const std::vector<Tensor<T>>& reverted, const Tensor<T>& gate_w,
                       const Tensor<T>& gate_b) {
    if (reverted.empty()) fail("gate_weights: no inputs");
    for (const auto& t : reverted)
        if (t.shape != reverted[0].shape)
            fail("gate_weights: shape mismatch " + shape_str(t.shape) + " vs " +
                 shape_str(reverted[0].shape));
    const i64 np = static_cast<i64>(reverted.size());
    auto pooled = mean(concat(reverted, 1), 0);  // [P*d]
    auto logits = add(matmul(reshape(pooled, {1, pooled.numel()}), gate_w), gate_b);
    return softmax(reshape(logits, {np}), 0);
}

// Full block: duplicate the (optionally pre-normalized) input through each
// path permutation, run the shared mixer, revert token order, and fuse the
// information flows. The residual connection belongs to the caller.
template <std::floating_point T>
Tensor<T> block_forward(const Tensor<T>& seq, const BlockParams<T>& params,
                        const BlockSettings& st, const Permutation& shuffle_perm) {
    st.validate();
    const i64 len = seq.shape[0];
    Tensor<T> x = st.pre_norm ? layer_norm(seq) : seq;

    std::vector<Tensor<T>> outputs;
    outputs.reserve(st.paths.size());
    for (PathKind kind : st.paths) {
        Permutation perm = kind == PathKind::Shuffle
                               ? shuffle_perm
                               : Permutation::for_path(kind, len, 0);
        auto path_out = mixer_forward(apply_path(x, perm), params.mixer, st.mixer, st.simplified_b);
        outputs.push_back(revert_path(path_out, perm));
    }

    if (outputs.size() == 1) return outputs[0];
    if (!st.gate_fusion) {
        Tensor<T> acc = outputs[0];
        for (std::size_t k = 1; k < outputs.size(); ++k) acc = add(acc, outputs[k]);
        return scale(acc, T(1) / static_cast<T>(outputs.size()));
    }
    auto g = gate_weights(outputs, params.gate_w, params.gate_b);
    Tensor<T> acc;
    for (std::size_t k = 0; k < outputs.size(); ++k) {
        auto weighted = mul(outputs[k], slice(g, 0, static_cast<i64>(k), 1));
        acc = k == 0 ? weighted : add(acc, weighted);
    }
    return acc;
}

}  // namespace rsm
