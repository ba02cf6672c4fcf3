#pragma once

#include <concepts>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "rsm/common.hpp"

namespace rsm {

template <std::floating_point T>
class Tape;

// Dense row-major tensor. Storage is shared and immutable after creation;
// copies alias the same buffer. A tensor participates in autodiff when it is
// bound to a tape (tape != nullptr, node >= 0); otherwise it is a constant.
template <std::floating_point T>
struct Tensor {
    Shape shape;
    std::shared_ptr<const std::vector<T>> data;
    Tape<T>* tape = nullptr;
    int node = -1;

    Tensor() = default;

    static Tensor from(Shape shape, std::vector<T> values) {
        const i64 n = numel_of(shape);
        if (static_cast<i64>(values.size()) != n)
            fail("Tensor::from: " + std::to_string(values.size()) + " values for shape " +
                 shape_str(shape));
        Tensor t;
        t.shape = std::move(shape);
        t.data = std::make_shared<const std::vector<T>>(std::move(values));
        return t;
    }

    static Tensor full(Shape shape, T value) {
        std::vector<T> v(static_cast<std::size_t>(numel_of(shape)), value);
        return from(std::move(shape), std::move(v));
    }

    static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }
    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }
    static Tensor scalar(T value) { return from(Shape{}, std::vector<T>{value}); }

    i64 numel() const { return data ? static_cast<i64>(data->size()) : 0; }
    i64 rank() const { return static_cast<i64>(shape.size()); }
    i64 dim(std::size_t axis) const { return shape[axis]; }
    bool defined() const { return static_cast<bool>(data); }
    bool on_tape() const { return tape != nullptr && node >= 0; }

    const T* ptr() const { return data->data(); }
    T at(i64 flat) const { return (*data)[static_cast<std::size_t>(flat)]; }

    // Cast to another element type (constant result; never recorded).
    template <std::floating_point U>
    Tensor<U> cast() const {
        std::vector<U> v(data->size());
        for (std::size_t i = 0; i < data->size(); ++i) v[i] = static_cast<U>((*data)[i]);
        return Tensor<U>::from(shape, std::move(v));
    }
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

// Gradients produced by one backward sweep, indexed by tape node.
template <std::floating_point T>
class Gradients {
public:
    Gradients(std::vector<std::vector<T>> bufs, std::vector<Shape> shapes)
        : bufs_(std::move(bufs)), shapes_(std::move(shapes)) {}

    // Gradient of the loss wrt a tape-bound tensor. Unreached nodes get zeros
    // of the leaf shape.
    Tensor<T> grad(const Tensor<T>& t) const {
        if (!t.on_tape()) fail("Gradients::grad: tensor is not bound to a tape");
        const auto id = static_cast<std::size_t>(t.node);
        if (id >= shapes_.size()) fail("Gradients::grad: node id out of range");
        if (bufs_[id].empty() && numel_of(shapes_[id]) > 0)
            return Tensor<T>::zeros(shapes_[id]);
        return Tensor<T>::from(shapes_[id], bufs_[id]);
    }

    bool reached(const Tensor<T>& t) const {
        return t.on_tape() && !bufs_[static_cast<std::size_t>(t.node)].empty();
    }

private:
    std::vector<std::vector<T>> bufs_;
    std::vector<Shape> shapes_;
};

// Scratch gradient buffers used while a backward sweep runs. Buffers are
// allocated lazily so untouched nodes cost nothing.
template <std::floating_point T>
class GradBuffers {
public:
    explicit GradBuffers(const std::vector<Shape>* shapes) : shapes_(shapes) {
        bufs_.resize(shapes->size());
    }

    // Accumulation target for node `id`; zero-filled on first use.
    T* acc(int id) {
        auto& b = bufs_[static_cast<std::size_t>(id)];
        if (b.empty()) {
            b.assign(static_cast<std::size_t>(numel_of((*shapes_)[static_cast<std::size_t>(id)])),
                     T(0));
        }
        return b.data();
    }

    bool touched(int id) const { return !bufs_[static_cast<std::size_t>(id)].empty(); }
    const std::vector<T>& buf(int id) const { return bufs_[static_cast<std::size_t>(id)]; }
    std::vector<std::vector<T>> take() { return std::move(bufs_); }

private:
    const std::vector<Shape>* shapes_;
    std::vector<std::vector<T>> bufs_;
};

// Reverse-mode tape: an ordered record of executed primitives. Record order
// is topological by construction (an op's inputs exist before the op runs),
// so one reverse sweep visits every node after all of its consumers.
// A tape is confined to a single thread.
template <std::floating_point T>
class Tape {
public:
    using BackwardFn = std::function<void(const std::vector<T>& gout, GradBuffers<T>& grads)>;

    // Register a leaf (trainable input). Returns a copy of `t` bound to this
    // tape; the storage is shared.
    Tensor<T> leaf(const Tensor<T>& t) {
        if (!t.defined()) fail("Tape::leaf: undefined tensor");
        Tensor<T> bound = t;
        bound.tape = this;
        bound.node = record(t.shape, {}, nullptr);
        return bound;
    }

    // Record one executed primitive; returns the new node id.
    int record(const Shape& out_shape, std::vector<int> parents, BackwardFn backward) {
        Node n;
        n.parents = std::move(parents);
        n.backward = std::move(backward);
        shapes_.push_back(out_shape);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    std::size_t size() const { return nodes_.size(); }

    // One reverse sweep from a scalar loss. Every node reachable from the
    // loss has its backward invoked exactly once; leaves keep their
    // accumulated gradients (zeros if unreachable).
    Gradients<T> backward(const Tensor<T>& loss) {
        if (!loss.on_tape() || loss.tape != this)
            fail("Tape::backward: loss is not a product of this tape");
        if (loss.numel() != 1)
            fail("Tape::backward: loss must be scalar, got shape " + shape_str(loss.shape));

        std::vector<char> reachable(nodes_.size(), 0);
        mark_reachable(loss.node, reachable);

        GradBuffers<T> grads(&shapes_);
        grads.acc(loss.node)[0] = T(1);
        for (int id = loss.node; id >= 0; --id) {
            if (!reachable[static_cast<std::size_t>(id)]) continue;
            auto& node = nodes_[static_cast<std::size_t>(id)];
            if (!node.backward) continue;  // leaf
            if (!grads.touched(id)) continue;
            node.backward(grads.buf(id), grads);
        }
        return Gradients<T>(grads.take(), shapes_);
    }

private:
    struct Node {
        std::vector<int> parents;
        BackwardFn backward;
    };

    void mark_reachable(int root, std::vector<char>& reachable) const {
        std::vector<int> stack{root};
        while (!stack.empty()) {
            const int id = stack.back();
            stack.pop_back();
            auto& seen = reachable[static_cast<std::size_t>(id)];
            if (seen) continue;
            seen = 1;
            for (int p : nodes_[static_cast<std::size_t>(id)].parents) stack.push_back(p);
        }
    }

    std::vector<Node> nodes_;
    std::vector<Shape> shapes_;
};

namespace detail {

// Resolve the common tape of an op's inputs. Constants (no tape) mix freely;
// two different tapes do not.
template <std::floating_point T>
Tape<T>* tape_of(std::initializer_list<const Tensor<T>*> inputs) {
    Tape<T>* tp = nullptr;
    for (const Tensor<T>* t : inputs) {
        if (!t->tape) continue;
        if (tp && tp != t->tape) fail("op inputs belong to different tapes");
        tp = t->tape;
    }
    return tp;
}

}  // namespace detail

}  // namespace rsm
