#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>

#include "rsm/gradcheck.hpp"
#include "rsm/ops.hpp"
#include "rsm/rng.hpp"

using namespace rsm;

namespace {

Tensord random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(static_cast<std::size_t>(numel_of(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensord::from(std::move(shape), std::move(v));
}

std::vector<double> sorted_values(const Tensord& t) {
    std::vector<double> v(*t.data);
    std::sort(v.begin(), v.end());
    return v;
}

}  // namespace

TEST_CASE("softmax of a uniform vector is uniform") {
    auto y = softmax(Tensord::from({3}, {0.0, 0.0, 0.0}), 0);
    for (i64 i = 0; i < 3; ++i) CHECK(y.at(i) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("silu at zero is zero") {
    auto y = silu(Tensord::from({1}, {0.0}));
    CHECK(y.at(0) == 0.0);
}

TEST_CASE("matmul of ones matrices gives inner-dimension counts") {
    auto y = matmul(Tensord::ones({2, 3}), Tensord::ones({3, 2}));
    REQUIRE(y.shape == Shape{2, 2});
    for (i64 i = 0; i < 4; ++i) CHECK(y.at(i) == 3.0);
}

TEST_CASE("matmul rejects mismatched shapes, naming both") {
    try {
        matmul(Tensord::ones({2, 3}), Tensord::ones({4, 2}));
        FAIL("expected rejection");
    } catch (const std::runtime_error& e) {
        const std::string msg = e.what();
        CHECK(msg.find("[2,3]") != std::string::npos);
        CHECK(msg.find("[4,2]") != std::string::npos);
    }
}

TEST_CASE("backward of sum is ones") {
    Tape<double> tape;
    auto x = tape.leaf(Tensord::from({2, 3}, {1, 2, 3, 4, 5, 6}));
    auto grads = tape.backward(sum_all(x));
    auto g = grads.grad(x);
    for (i64 i = 0; i < 6; ++i) CHECK(g.at(i) == 1.0);
}

TEST_CASE("backward of sum of squares is 2x") {
    Tape<double> tape;
    auto x = tape.leaf(Tensord::from({3}, {1, 2, 3}));
    auto grads = tape.backward(sum_all(mul(x, x)));
    auto g = grads.grad(x);
    CHECK(g.at(0) == doctest::Approx(2.0));
    CHECK(g.at(1) == doctest::Approx(4.0));
    CHECK(g.at(2) == doctest::Approx(6.0));
}

TEST_CASE("cross-entropy gradient is softmax minus onehot") {
    Tape<double> tape;
    auto logits = tape.leaf(Tensord::zeros({1, 2}));
    auto grads = tape.backward(cross_entropy(logits, {0}));
    auto g = grads.grad(logits);
    CHECK(g.at(0) == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(g.at(1) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("backward requires a scalar loss") {
    Tape<double> tape;
    auto x = tape.leaf(Tensord::ones({3}));
    auto y = mul(x, x);
    CHECK_THROWS_AS(tape.backward(y), std::runtime_error);
}

TEST_CASE("leaves not reachable from the loss get zero gradients") {
    Tape<double> tape;
    auto x = tape.leaf(Tensord::ones({2}));
    auto unused = tape.leaf(Tensord::ones({4}));
    auto grads = tape.backward(sum_all(x));
    auto g = grads.grad(unused);
    REQUIRE(g.shape == Shape{4});
    for (i64 i = 0; i < 4; ++i) CHECK(g.at(i) == 0.0);
    CHECK_FALSE(grads.reached(unused));
}

TEST_CASE("a tensor used twice accumulates both contributions") {
    Tape<double> tape;
    auto x = tape.leaf(Tensord::from({2}, {3.0, 4.0}));
    auto grads = tape.backward(sum_all(add(x, x)));
    auto g = grads.grad(x);
    CHECK(g.at(0) == 2.0);
    CHECK(g.at(1) == 2.0);
}

TEST_CASE("finite differences: sum has unit gradient") {
    auto g = finite_difference_grad([](const Tensord& x) { return sum_all(x).at(0); },
                                    Tensord::from({2}, {1.0, 2.0}));
    CHECK(g.at(0) == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(g.at(1) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("finite differences: quadratic is exact up to rounding") {
    auto g = finite_difference_grad([](const Tensord& x) { return x.at(0) * x.at(0); },
                                    Tensord::from({1}, {3.0}), 1e-6);
    CHECK(std::abs(g.at(0) - 6.0) < 1e-8);
}

TEST_CASE("finite differences reject a non-finite function") {
    CHECK_THROWS_AS(finite_difference_grad(
                        [](const Tensord&) { return std::numeric_limits<double>::quiet_NaN(); },
                        Tensord::ones({2})),
                    std::runtime_error);
    CHECK_THROWS_AS(finite_difference_grad([](const Tensord& x) { return x.at(0); },
                                           Tensord::ones({1}), 0.0),
                    std::runtime_error);
}

TEST_CASE("backward of silu-sum matches finite differences") {
    Rng rng(7);
    auto x = random_tensor(rng, {5}, -2.0, 2.0);
    const double err =
        check_gradient([](Tape<double>&, const Tensord& bx) { return sum_all(silu(bx)); }, x);
    CHECK(err <= 1e-4);
}

// Every primitive against the central-difference oracle, via a weighted sum
// so each output element gets a distinct upstream gradient.
TEST_CASE("gradient check: all primitives") {
    auto check_unary = [](const char* name, auto op, Shape shape, double lo, double hi) {
        Rng local(mix64(1234, std::hash<std::string>{}(name)));
        auto x = random_tensor(local, shape, lo, hi);
        Tensord w = random_tensor(local, op(x).shape, -1.0, 1.0);
        const double err = check_gradient(
            [&](Tape<double>&, const Tensord& bx) { return sum_all(mul(op(bx), w)); }, x);
        INFO(name);
        CHECK(err <= 1e-4);
    };

    check_unary("neg", [](const Tensord& x) { return neg(x); }, {3, 4}, -2, 2);
    check_unary("exp", [](const Tensord& x) { return exp(x); }, {3, 4}, -1, 1);
    check_unary("softplus", [](const Tensord& x) { return softplus(x); }, {3, 4}, -3, 3);
    check_unary("silu", [](const Tensord& x) { return silu(x); }, {3, 4}, -3, 3);
    check_unary("scale", [](const Tensord& x) { return scale(x, 1.7); }, {3, 4}, -2, 2);
    check_unary("softmax0", [](const Tensord& x) { return softmax(x, 0); }, {3, 4}, -2, 2);
    check_unary("softmax1", [](const Tensord& x) { return softmax(x, 1); }, {3, 4}, -2, 2);
    check_unary("layer_norm", [](const Tensord& x) { return layer_norm(x); }, {3, 5}, -2, 2);
    check_unary("mean0", [](const Tensord& x) { return mean(x, 0); }, {4, 3}, -2, 2);
    check_unary("mean1", [](const Tensord& x) { return mean(x, 1); }, {4, 3}, -2, 2);
    check_unary("reshape", [](const Tensord& x) { return reshape(x, {2, 6}); }, {3, 4}, -2, 2);
    check_unary("transpose", [](const Tensord& x) { return transpose(x, {1, 0}); }, {3, 4}, -2, 2);
    check_unary("transpose3",
                [](const Tensord& x) { return transpose(reshape(x, {2, 2, 3}), {2, 0, 1}); },
                {4, 3}, -2, 2);
    check_unary("broadcast",
                [](const Tensord& x) { return broadcast_to(x, {5, 3, 4}); }, {3, 4}, -2, 2);
    check_unary("permute_rows",
                [](const Tensord& x) { return permute_rows(x, {2, 0, 3, 1}); }, {4, 3}, -2, 2);
    check_unary("slice", [](const Tensord& x) { return slice(x, 1, 1, 2); }, {3, 5}, -2, 2);
    check_unary("slice0", [](const Tensord& x) { return slice(x, 0, 0, 2); }, {3, 5}, -2, 2);

    // binary ops: check gradients through each operand
    {
        Rng local(99);
        auto a = random_tensor(local, {4, 3});
        auto b = random_tensor(local, {4, 3});
        auto bias = random_tensor(local, {3});
        auto sc = random_tensor(local, {1});
        auto w = random_tensor(local, {4, 3});
        auto wsum = [&](const Tensord& y) { return sum_all(mul(y, w)); };

        for (const char* which : {"add", "sub", "mul"}) {
            auto apply = [&](const Tensord& x, const Tensord& y) {
                if (which[0] == 'a') return add(x, y);
                if (which[0] == 's') return sub(x, y);
                return mul(x, y);
            };
            INFO(which);
            CHECK(check_gradient([&](Tape<double>&, const Tensord& bx) { return wsum(apply(bx, b)); },
                                 a) <= 1e-4);
            CHECK(check_gradient([&](Tape<double>&, const Tensord& by) { return wsum(apply(a, by)); },
                                 b) <= 1e-4);
            // trailing-suffix broadcast on the right operand
            CHECK(check_gradient(
                      [&](Tape<double>&, const Tensord& bb) { return wsum(apply(a, bb)); }, bias) <=
                  1e-4);
            // scalar right operand
            CHECK(check_gradient(
                      [&](Tape<double>&, const Tensord& bs) { return wsum(apply(a, bs)); }, sc) <=
                  1e-4);
        }
    }

    // matmul, both operands
    {
        Rng local(123);
        auto a = random_tensor(local, {3, 4});
        auto b = random_tensor(local, {4, 2});
        auto w = random_tensor(local, {3, 2});
        CHECK(check_gradient([&](Tape<double>&, const Tensord& bx) {
                  return sum_all(mul(matmul(bx, b), w));
              }, a) <= 1e-4);
        CHECK(check_gradient([&](Tape<double>&, const Tensord& bx) {
                  return sum_all(mul(matmul(a, bx), w));
              }, b) <= 1e-4);
    }

    // conv2d, strided, all three operands
    {
        Rng local(124);
        auto x = random_tensor(local, {5, 6, 2});
        auto w = random_tensor(local, {3, 2, 2, 3});
        auto b = random_tensor(local, {3});
        auto wt = random_tensor(local, {2, 3, 3});  // output grid 2x3 at stride 2? see below
        // With H=5,W=6,kh=3,kw=2,s=2: Gh=(5-3)/2+1=2, Gw=(6-2)/2+1=3.
        auto wsum = [&](const Tensord& y) { return sum_all(mul(y, wt)); };
        CHECK(check_gradient([&](Tape<double>&, const Tensord& bx) {
                  return wsum(conv2d_valid(bx, w, b, 2));
              }, x) <= 1e-4);
        CHECK(check_gradient([&](Tape<double>&, const Tensord& bw) {
                  return wsum(conv2d_valid(x, bw, b, 2));
              }, w) <= 1e-4);
        CHECK(check_gradient([&](Tape<double>&, const Tensord& bb) {
                  return wsum(conv2d_valid(x, w, bb, 2));
              }, b) <= 1e-4);
    }

    // depthwise causal conv, all three operands
    {
        Rng local(125);
        auto x = random_tensor(local, {6, 3});
        auto w = random_tensor(local, {3, 4});
        auto b = random_tensor(local, {3});
        auto wt = random_tensor(local, {6, 3});
        auto wsum = [&](const Tensord& y) { return sum_all(mul(y, wt)); };
        CHECK(check_gradient([&](Tape<double>&, const Tensord& bx) {
                  return wsum(conv1d_depthwise_causal(bx, w, b));
              }, x) <= 1e-4);
        CHECK(check_gradient([&](Tape<double>&, const Tensord& bw) {
                  return wsum(conv1d_depthwise_causal(x, bw, b));
              }, w) <= 1e-4);
        CHECK(check_gradient([&](Tape<double>&, const Tensord& bb) {
                  return wsum(conv1d_depthwise_causal(x, w, bb));
              }, b) <= 1e-4);
    }

    // concat along both kinds of axes
    {
        Rng local(126);
        auto a = random_tensor(local, {2, 3});
        auto b = random_tensor(local, {4, 3});
        auto w = random_tensor(local, {6, 3});
        CHECK(check_gradient([&](Tape<double>&, const Tensord& bx) {
                  return sum_all(mul(concat<double>({bx, b}, 0), w));
              }, a) <= 1e-4);
        CHECK(check_gradient([&](Tape<double>&, const Tensord& bx) {
                  return sum_all(mul(concat<double>({a, bx}, 0), w));
              }, b) <= 1e-4);
        auto c = random_tensor(local, {2, 5});
        auto w2 = random_tensor(local, {2, 8});
        CHECK(check_gradient([&](Tape<double>&, const Tensord& bx) {
                  return sum_all(mul(concat<double>({bx, c}, 1), w2));
              }, a) <= 1e-4);
    }

    // cross entropy
    {
        Rng local(127);
        auto logits = random_tensor(local, {4, 5}, -2, 2);
        CHECK(check_gradient([&](Tape<double>&, const Tensord& bx) {
                  return cross_entropy(bx, {1, 0, 4, 2});
              }, logits) <= 1e-4);
    }
}

TEST_CASE("forward evaluation is bitwise deterministic") {
    Rng rng(5);
    auto a = random_tensor(rng, {7, 9});
    auto b = random_tensor(rng, {9, 4});
    auto run = [&]() {
        auto y = matmul(softmax(a, 1), b);
        return *layer_norm(y).data;
    };
    auto y1 = run();
    auto y2 = run();
    CHECK(std::equal(y1.begin(), y1.end(), y2.begin(),
                     [](double p, double q) { return std::memcmp(&p, &q, sizeof p) == 0; }));
}

TEST_CASE("reshape/transpose/gather preserve the multiset of values") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        const i64 r = 2 + static_cast<i64>(rng.below(5));
        const i64 c = 1 + static_cast<i64>(rng.below(6));
        auto x = random_tensor(rng, {r, c});
        const auto ref = sorted_values(x);
        CHECK(sorted_values(reshape(x, {c, r})) == ref);
        CHECK(sorted_values(transpose(x, {1, 0})) == ref);
        CHECK(sorted_values(permute_rows(x, Rng(mix64(11, trial)).permutation(r))) == ref);
    }
}

TEST_CASE("broadcast rules are narrow") {
    auto a = Tensord::ones({4, 3});
    CHECK_THROWS_AS(add(a, Tensord::ones({4})), std::runtime_error);     // not a suffix
    CHECK_THROWS_AS(add(a, Tensord::ones({2, 3})), std::runtime_error);  // mismatched leading
    CHECK_NOTHROW(add(a, Tensord::ones({3})));
    CHECK_NOTHROW(add(a, Tensord::scalar(2.0)));
    // left-hand side must be the larger operand
    CHECK_THROWS_AS(add(Tensord::ones({3}), a), std::runtime_error);
}

TEST_CASE("cross entropy rejects out-of-range labels") {
    CHECK_THROWS_AS(cross_entropy(Tensord::zeros({2, 3}), {0, 3}), std::runtime_error);
    CHECK_THROWS_AS(cross_entropy(Tensord::zeros({2, 3}), {0}), std::runtime_error);
}

TEST_CASE("primitive_forward dispatches by op id and rejects unknown ids") {
    auto a = Tensord::from({2, 2}, {1, 2, 3, 4});
    auto y = primitive_forward<double>("add", {a, a});
    CHECK(y.at(3) == 8.0);
    OpAttrs attrs;
    attrs.axis = 1;
    auto s = primitive_forward<double>("softmax", {a}, attrs);
    CHECK(s.at(0) + s.at(1) == doctest::Approx(1.0));
    OpAttrs ce;
    ce.labels = {1, 0};
    CHECK(primitive_forward<double>("cross_entropy", {a}, ce).numel() == 1);
    CHECK_THROWS_AS(primitive_forward<double>("not_an_op", {a}), std::runtime_error);
    CHECK_THROWS_AS(primitive_forward<double>("matmul", {a}), std::runtime_error);  // arity
    CHECK_THROWS_AS(primitive_forward<double>("mean", {a}), std::runtime_error);    // missing axis
}

TEST_CASE("check_finite names the offending layer") {
    auto bad = Tensord::from({2}, {1.0, std::numeric_limits<double>::infinity()});
    try {
        check_finite(bad, "mixer.in_proj");
        FAIL("expected rejection");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("mixer.in_proj") != std::string::npos);
    }
}

TEST_CASE("mixing two tapes is rejected") {
    Tape<double> t1, t2;
    auto x = t1.leaf(Tensord::ones({2}));
    auto y = t2.leaf(Tensord::ones({2}));
    CHECK_THROWS_AS(add(x, y), std::runtime_error);
}
