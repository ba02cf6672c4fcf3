#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <set>

#include "rsm/block.hpp"
#include "rsm/gradcheck.hpp"

using namespace rsm;

namespace {

const MixerConfig kTinyMixer{8, 16, 4, 4, 4};

Tensord random_seq(Rng& rng, i64 len, i64 dim) {
    std::vector<double> v(static_cast<std::size_t>(len * dim));
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensord::from({len, dim}, std::move(v));
}

template <class T>
void set_by_name(MixerParams<T>& p, const std::string& name, const Tensor<T>& value) {
    bool found = false;
    visit_mixer(p, "", [&](const std::string& n, Tensor<T>& t) {
        if (n == name) {
            t = value;
            found = true;
        }
    });
    if (!found) fail("set_by_name: no mixer parameter called " + name);
}

}  // namespace

TEST_CASE("mixer: zero out_proj annihilates any input") {
    Rng rng(1);
    auto p = init_mixer_params<double>(kTinyMixer, rng);
    p.out_proj_w = Tensord::zeros({kTinyMixer.intermediate_size, kTinyMixer.hidden_size});
    auto y = mixer_forward(random_seq(rng, 7, 8), p, kTinyMixer);
    REQUIRE(y.shape == Shape{7, 8});
    for (i64 i = 0; i < y.numel(); ++i) CHECK(y.at(i) == 0.0);
}

TEST_CASE("mixer: L=1 matches the single-step closed form") {
    Rng rng(2);
    auto p = init_mixer_params<double>(kTinyMixer, rng);
    auto x = random_seq(rng, 1, 8);
    auto y = mixer_forward(x, p, kTinyMixer);
    REQUIRE(y.shape == Shape{1, 8});

    // independent scalar reimplementation of one token
    const i64 d = 8, is = 16, tsr = 4, n = 4, w = 4;
    auto sigmoid = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
    std::vector<double> xz(static_cast<std::size_t>(2 * is), 0.0);
    for (i64 j = 0; j < 2 * is; ++j)
        for (i64 i = 0; i < d; ++i) xz[static_cast<std::size_t>(j)] += x.at(i) * p.in_proj_w.at(i * 2 * is + j);
    std::vector<double> xc(static_cast<std::size_t>(is));
    for (i64 c = 0; c < is; ++c) {
        // causal conv with left padding sees only the newest tap at L=1
        const double conv = p.conv_b.at(c) + p.conv_w.at(c * w + (w - 1)) * xz[static_cast<std::size_t>(c)];
        xc[static_cast<std::size_t>(c)] = conv * sigmoid(conv);
    }
    std::vector<double> proj(static_cast<std::size_t>(tsr + 2 * n), 0.0);
    for (i64 j = 0; j < tsr + 2 * n; ++j)
        for (i64 c = 0; c < is; ++c)
            proj[static_cast<std::size_t>(j)] += xc[static_cast<std::size_t>(c)] * p.x_proj_w.at(c * (tsr + 2 * n) + j);
    std::vector<double> expect(static_cast<std::size_t>(d), 0.0);
    std::vector<double> ys(static_cast<std::size_t>(is));
    for (i64 c = 0; c < is; ++c) {
        double dt = p.dt_proj_b.at(c);
        for (i64 r = 0; r < tsr; ++r) dt += proj[static_cast<std::size_t>(r)] * p.dt_proj_w.at(r * is + c);
        dt = std::max(dt, 0.0) + std::log1p(std::exp(-std::abs(dt)));
        double acc = p.d_skip.at(c) * xc[static_cast<std::size_t>(c)];
        for (i64 i = 0; i < n; ++i) {
            const double a = -std::exp(p.a_log.at(c * n + i));
            const double bbar = std::expm1(dt * a) / a * proj[static_cast<std::size_t>(tsr + i)];
            acc += proj[static_cast<std::size_t>(tsr + n + i)] * bbar * xc[static_cast<std::size_t>(c)];
        }
        const double z = xz[static_cast<std::size_t>(is + c)];
        ys[static_cast<std::size_t>(c)] = acc * (z * sigmoid(z));
    }
    for (i64 j = 0; j < d; ++j)
        for (i64 c = 0; c < is; ++c)
            expect[static_cast<std::size_t>(j)] += ys[static_cast<std::size_t>(c)] * p.out_proj_w.at(c * d + j);
    for (i64 j = 0; j < d; ++j) CHECK(y.at(j) == doctest::Approx(expect[static_cast<std::size_t>(j)]).epsilon(1e-12));
}

TEST_CASE("mixer preserves shape for any sequence length") {
    Rng rng(3);
    auto p = init_mixer_params<double>(kTinyMixer, rng);
    for (i64 len : {1, 2, 5, 17}) {
        auto y = mixer_forward(random_seq(rng, len, 8), p, kTinyMixer);
        CHECK(y.shape == Shape{len, 8});
    }
}

TEST_CASE("mixer is causal") {
    Rng rng(4);
    auto p = init_mixer_params<double>(kTinyMixer, rng);
    auto x = random_seq(rng, 12, 8);
    auto y1 = mixer_forward(x, p, kTinyMixer);
    std::vector<double> bumped(*x.data);
    const i64 t = 8;
    for (i64 j = 0; j < 8; ++j) bumped[static_cast<std::size_t>(t * 8 + j)] += 0.5;
    auto y2 = mixer_forward(Tensord::from({12, 8}, bumped), p, kTinyMixer);
    for (i64 k = 0; k < t; ++k)
        for (i64 j = 0; j < 8; ++j) {
            const double a = y1.at(k * 8 + j), b = y2.at(k * 8 + j);
            CHECK(std::memcmp(&a, &b, sizeof(double)) == 0);
        }
}

TEST_CASE("mixer forward is bitwise deterministic") {
    Rng rng(5);
    auto p = init_mixer_params<double>(kTinyMixer, rng);
    auto x = random_seq(rng, 6, 8);
    auto y1 = mixer_forward(x, p, kTinyMixer);
    auto y2 = mixer_forward(x, p, kTinyMixer);
    CHECK(std::memcmp(y1.ptr(), y2.ptr(), sizeof(double) * static_cast<std::size_t>(y1.numel())) == 0);
}

TEST_CASE("mixer rejects non-finite input with layer identification") {
    Rng rng(6);
    auto p = init_mixer_params<double>(kTinyMixer, rng);
    std::vector<double> v(static_cast<std::size_t>(2 * 8), 0.0);
    v[3] = std::numeric_limits<double>::quiet_NaN();
    try {
        mixer_forward(Tensord::from({2, 8}, v), p, kTinyMixer);
        FAIL("expected rejection");
    } catch (const std::runtime_error& e) {
        CHECK(std::string(e.what()).find("mixer.") != std::string::npos);
    }
}

TEST_CASE("mixer gradients match finite differences for every parameter") {
    Rng rng(7);
    auto p = init_mixer_params<double>(kTinyMixer, rng);
    auto x = random_seq(rng, 6, 8);
    std::vector<double> wv(static_cast<std::size_t>(6 * 8));
    for (auto& v : wv) v = rng.uniform(-1.0, 1.0);
    auto w = Tensord::from({6, 8}, wv);

    std::vector<std::string> names;
    visit_mixer(p, "", [&](const std::string& n, Tensord&) { names.push_back(n); });
    for (const auto& name : names) {
        Tensord current;
        visit_mixer(p, "", [&](const std::string& n, Tensord& t) {
            if (n == name) current = t;
        });
        const double err = check_gradient(
            [&](Tape<double>&, const Tensord& bound) {
                MixerParams<double> q = p;
                set_by_name(q, name, bound);
                return sum_all(mul(mixer_forward(x, q, kTinyMixer), w));
            },
            current);
        INFO("parameter ", name);
        CHECK(err <= 1e-4);
    }
    // and through the input sequence
    CHECK(check_gradient(
              [&](Tape<double>&, const Tensord& bx) {
                  return sum_all(mul(mixer_forward(bx, p, kTinyMixer), w));
              },
              x) <= 1e-4);
}

TEST_CASE("mixer parameter count: enumeration oracle and linearity in d") {
    const MixerConfig toy{4, 8, 2, 2, 4};
    Rng rng(8);
    auto p = init_mixer_params<double>(toy, rng);
    i64 enumerated = 0;
    visit_mixer(p, "", [&](const std::string&, Tensord& t) { enumerated += t.numel(); });
    CHECK(enumerated == count_mixer_params(toy));

    MixerConfig doubled = toy;
    doubled.hidden_size *= 2;
    // only in_proj (d x 2IS) and out_proj (IS x d) touch d
    const i64 delta = toy.hidden_size * 2 * toy.intermediate_size +
                      toy.intermediate_size * toy.hidden_size;
    CHECK(count_mixer_params(doubled) - count_mixer_params(toy) == delta);
}

// ---------------------------------------------------------------------------
// permutations and the multi-path block
// ---------------------------------------------------------------------------

TEST_CASE("path permutations: identity, reverse, and round trips") {
    auto x = Tensord::from({3, 2}, {1, 2, 3, 4, 5, 6});
    CHECK(*apply_path(x, Permutation::identity(3)).data == *x.data);
    auto rev = apply_path(x, Permutation::reversed(3));
    CHECK(*rev.data == std::vector<double>{5, 6, 3, 4, 1, 2});

    Rng rng(9);
    for (int trial = 0; trial < 30; ++trial) {
        const i64 len = 1 + static_cast<i64>(rng.below(256));
        auto seq = Tensord::from({len, 1}, [&] {
            std::vector<double> v(static_cast<std::size_t>(len));
            for (auto& e : v) e = rng.uniform(-1, 1);
            return v;
        }());
        for (PathKind kind : {PathKind::Forward, PathKind::Reverse, PathKind::Shuffle}) {
            auto perm = Permutation::for_path(kind, len, mix64(42, trial));
            auto roundtrip = revert_path(apply_path(seq, perm), perm);
            CHECK(std::memcmp(roundtrip.ptr(), seq.ptr(),
                              sizeof(double) * static_cast<std::size_t>(len)) == 0);
        }
    }
}

TEST_CASE("shuffle permutation is a deterministic function of its seed") {
    auto p1 = Permutation::shuffled(64, mix64(7, 3, 64));
    auto p2 = Permutation::shuffled(64, mix64(7, 3, 64));
    CHECK(p1.order == p2.order);
    auto p3 = Permutation::shuffled(64, mix64(8, 3, 64));
    CHECK(p1.order != p3.order);
}

TEST_CASE("apply_path rejects length mismatch") {
    auto x = Tensord::ones({4, 2});
    CHECK_THROWS_AS(apply_path(x, Permutation::identity(3)), std::runtime_error);
    CHECK_THROWS_AS(revert_path(x, Permutation::reversed(5)), std::runtime_error);
}

namespace {

BlockSettings tiny_block_settings() {
    BlockSettings st;
    st.mixer = kTinyMixer;
    return st;
}

}  // namespace

TEST_CASE("gate: zero projection gives the uniform simplex") {
    Rng rng(10);
    auto a = random_seq(rng, 5, 8);
    auto b = random_seq(rng, 5, 8);
    auto c = random_seq(rng, 5, 8);
    auto g = gate_weights<double>({a, b, c}, Tensord::zeros({24, 3}), Tensord::zeros({3}));
    for (i64 k = 0; k < 3; ++k) CHECK(g.at(k) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("gate: bias (10,0,0) gives the numerically evaluated softmax") {
    Rng rng(11);
    auto a = random_seq(rng, 4, 8);
    auto g = gate_weights<double>({a, a, a}, Tensord::zeros({24, 3}),
                                  Tensord::from({3}, {10.0, 0.0, 0.0}));
    const double e10 = std::exp(10.0);
    const double denom = e10 + 2.0;
    CHECK(g.at(0) == doctest::Approx(e10 / denom).epsilon(1e-12));
    CHECK(g.at(1) == doctest::Approx(1.0 / denom).epsilon(1e-12));
    CHECK(g.at(2) == doctest::Approx(1.0 / denom).epsilon(1e-12));
    CHECK(g.at(0) == doctest::Approx(0.99990).epsilon(1e-4));
}

TEST_CASE("gate weights form a simplex and ignore row order") {
    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const i64 len = 1 + static_cast<i64>(rng.below(32));
        auto a = random_seq(rng, len, 8);
        auto b = random_seq(rng, len, 8);
        auto c = random_seq(rng, len, 8);
        auto gw = random_seq(rng, 24, 3);
        auto gb = Tensord::from({3}, {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
        auto g = gate_weights<double>({a, b, c}, gw, gb);
        double sum = 0.0;
        for (i64 k = 0; k < 3; ++k) {
            CHECK(g.at(k) > 0.0);
            CHECK(g.at(k) < 1.0 + 1e-12);
            sum += g.at(k);
        }
        CHECK(std::abs(sum - 1.0) <= 1e-12);

        // permuting rows inside each input leaves the gate unchanged
        auto perm = Permutation::shuffled(len, mix64(99, trial));
        auto g2 = gate_weights<double>({apply_path(a, perm), apply_path(b, perm), apply_path(c, perm)},
                                       gw, gb);
        for (i64 k = 0; k < 3; ++k) CHECK(g2.at(k) == doctest::Approx(g.at(k)).epsilon(1e-12));
    }
}

TEST_CASE("gate rejects mismatched shapes") {
    Rng rng(13);
    auto a = random_seq(rng, 5, 8);
    auto b = random_seq(rng, 4, 8);
    CHECK_THROWS_AS(gate_weights<double>({a, b, a}, Tensord::zeros({24, 3}), Tensord::zeros({3})),
                    std::runtime_error);
}

TEST_CASE("block: gate forced to (1,0,0) reduces to the plain mixer") {
    Rng rng(14);
    auto st = tiny_block_settings();
    st.pre_norm = false;
    auto p = init_block_params<double>(st, rng);
    p.gate_w = Tensord::zeros({24, 3});
    p.gate_b = Tensord::from({3}, {1000.0, 0.0, 0.0});
    auto x = random_seq(rng, 6, 8);
    auto shuffle = Permutation::shuffled(6, 123);
    auto y = block_forward(x, p, st, shuffle);
    auto plain = mixer_forward(x, p.mixer, st.mixer);
    for (i64 i = 0; i < y.numel(); ++i) CHECK(y.at(i) == plain.at(i));

    // with pre-normalization the same holds against mixer(layer_norm(x))
    st.pre_norm = true;
    auto y2 = block_forward(x, p, st, shuffle);
    auto plain2 = mixer_forward(layer_norm(x), p.mixer, st.mixer);
    for (i64 i = 0; i < y2.numel(); ++i) CHECK(y2.at(i) == plain2.at(i));
}

TEST_CASE("block: zero gate projection averages the three reverted paths") {
    Rng rng(15);
    auto st = tiny_block_settings();
    st.pre_norm = false;
    auto p = init_block_params<double>(st, rng);
    p.gate_w = Tensord::zeros({24, 3});
    p.gate_b = Tensord::zeros({3});
    auto x = random_seq(rng, 5, 8);
    auto shuffle = Permutation::shuffled(5, 77);
    auto y = block_forward(x, p, st, shuffle);

    auto fwd = mixer_forward(x, p.mixer, st.mixer);
    auto rev = revert_path(
        mixer_forward(apply_path(x, Permutation::reversed(5)), p.mixer, st.mixer),
        Permutation::reversed(5));
    auto shf = revert_path(mixer_forward(apply_path(x, shuffle), p.mixer, st.mixer), shuffle);
    for (i64 i = 0; i < y.numel(); ++i) {
        const double expect = (fwd.at(i) + rev.at(i) + shf.at(i)) / 3.0;
        CHECK(y.at(i) == doctest::Approx(expect).epsilon(1e-12));
    }
}

TEST_CASE("block: L=1 collapses all paths onto the plain mixer") {
    Rng rng(16);
    auto st = tiny_block_settings();
    st.pre_norm = false;
    auto p = init_block_params<double>(st, rng);
    auto x = random_seq(rng, 1, 8);
    auto y = block_forward(x, p, st, Permutation::identity(1));
    auto plain = mixer_forward(x, p.mixer, st.mixer);
    for (i64 i = 0; i < y.numel(); ++i) CHECK(y.at(i) == doctest::Approx(plain.at(i)).epsilon(1e-12));
}

TEST_CASE("block: the three paths share one mixer parameter registry") {
    Rng rng(17);
    auto st = tiny_block_settings();
    auto p = init_block_params<double>(st, rng);

    // the registry exposes exactly one mixer (9 tensors) plus the gate pair
    std::vector<std::string> names;
    visit_block(p, "b.", [&](const std::string& n, Tensord&) { names.push_back(n); });
    CHECK(names.size() == 11);
    CHECK(std::set<std::string>(names.begin(), names.end()).size() == names.size());

    // one update through the registry is visible to every path: zeroing the
    // single out_proj kills all three information flows at once
    visit_block(p, "", [&](const std::string& n, Tensord& t) {
        if (n == "mixer.out_proj.w") t = Tensord::zeros(t.shape);
    });
    auto y = block_forward(random_seq(rng, 4, 8), p, st, Permutation::shuffled(4, 5));
    for (i64 i = 0; i < y.numel(); ++i) CHECK(y.at(i) == 0.0);
}

TEST_CASE("block gradients (including the gate) match finite differences") {
    Rng rng(18);
    auto st = tiny_block_settings();
    auto p = init_block_params<double>(st, rng);
    auto x = random_seq(rng, 5, 8);
    auto shuffle = Permutation::shuffled(5, 31);
    std::vector<double> wv(static_cast<std::size_t>(5 * 8));
    for (auto& v : wv) v = rng.uniform(-1.0, 1.0);
    auto w = Tensord::from({5, 8}, wv);

    auto loss_with = [&](BlockParams<double> q) {
        return sum_all(mul(block_forward(x, q, st, shuffle), w));
    };

    std::vector<std::string> names;
    visit_block(p, "", [&](const std::string& n, Tensord&) { names.push_back(n); });
    for (const auto& name : names) {
        Tensord current;
        visit_block(p, "", [&](const std::string& n, Tensord& t) {
            if (n == name) current = t;
        });
        const double err = check_gradient(
            [&](Tape<double>&, const Tensord& bound) {
                BlockParams<double> q = p;
                visit_block(q, "", [&](const std::string& n, Tensord& t) {
                    if (n == name) t = bound;
                });
                return loss_with(q);
            },
            current);
        INFO("parameter ", name);
        CHECK(err <= 1e-4);
    }
    CHECK(check_gradient(
              [&](Tape<double>&, const Tensord& bx) {
                  return sum_all(mul(block_forward(bx, p, st, shuffle), w));
              },
              x) <= 1e-4);
}
