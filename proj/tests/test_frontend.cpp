#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "pyramid/frontend.hpp"

using namespace pyramid;

TEST_CASE("positional encoding rows and closed-form entries") {
    auto pe = positional_encoding(4, 6);
    for (int i = 0; i < 3; ++i) {
        CHECK(pe->at(0, 2 * i) == doctest::Approx(0.0));
        CHECK(pe->at(0, 2 * i + 1) == doctest::Approx(1.0));
    }
    CHECK(pe->at(1, 0) == doctest::Approx(std::sin(1.0)));

    for (double v : pe->data) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }

    CHECK_THROWS_AS(positional_encoding(4, 5), std::runtime_error);
}

TEST_CASE("positional encoding offset law: P[pos+k] is a rotation of P[pos]") {
    const int d_model = 16, T = 200;
    auto pe = positional_encoding(T, d_model);
    RandomSource rng(41);
    for (int trial = 0; trial < 50; ++trial) {
        const int pos = static_cast<int>(rng.next_u64() % 100);
        const int k = 1 + static_cast<int>(rng.next_u64() % 90);
        for (int i = 0; i < d_model / 2; ++i) {
            const double w = 1.0 / std::pow(10000.0, 2.0 * i / d_model);
            const double c = std::cos(k * w), s = std::sin(k * w);
            const double sin_p = pe->at(pos, 2 * i), cos_p = pe->at(pos, 2 * i + 1);
            const double sin_pk = c * sin_p + s * cos_p;
            const double cos_pk = -s * sin_p + c * cos_p;
            CHECK(std::abs(sin_pk - pe->at(pos + k, 2 * i)) < 1e-9);
            CHECK(std::abs(cos_pk - pe->at(pos + k, 2 * i + 1)) < 1e-9);
        }
    }
}

TEST_CASE("subsampled length law") {
    CHECK(subsampled_len(100) == 25);
    CHECK(subsampled_len(4) == 1);
    CHECK_THROWS_AS(subsampled_len(3), std::runtime_error);
    for (int t = 4; t < 200; ++t) {
        const int expect = static_cast<int>(std::ceil(std::ceil(t / 2.0) / 2.0));
        CHECK(subsampled_len(t) == expect);
    }
}

TEST_CASE("conv_subsample shape law") {
    RandomSource rng(42);
    auto p = make_conv_subsampler(8, 12, rng);
    auto out = conv_subsample(uniform_init({100, 8}, rng, -1, 1), p);
    CHECK(out->shape == std::vector<int>{25, 12});

    CHECK_THROWS_AS(conv_subsample(zeros({3, 8}), p), std::runtime_error);
    CHECK_THROWS_AS(conv_subsample(zeros({10, 9}), p), std::runtime_error);
}

TEST_CASE("embed with zero conv weights equals the positional encoding") {
    RandomSource rng(43);
    auto p = make_conv_subsampler(8, 12, rng);
    for (auto& w : {p.w1, p.w2}) std::fill(w->data.begin(), w->data.end(), 0.0);

    RandomSource drop_rng(1);
    auto out = embed(zeros({40, 8}), p, 0.1, Mode::infer, drop_rng);
    auto pe = positional_encoding(10, 12);
    CHECK(out->data == pe->data);
}

TEST_CASE("embed in infer mode is deterministic") {
    RandomSource rng(44);
    auto p = make_conv_subsampler(8, 12, rng);
    auto x = uniform_init({60, 8}, rng, -1, 1);
    RandomSource r1(5), r2(99);
    auto a = embed(x, p, 0.1, Mode::infer, r1);
    auto b = embed(x, p, 0.1, Mode::infer, r2);
    CHECK(a->data == b->data);
}

TEST_CASE("embed gradients flow through the subsampler") {
    RandomSource rng(45);
    auto p = make_conv_subsampler(5, 6, rng);
    auto x = uniform_init({16, 5}, rng, -1, 1);
    RandomSource drop_rng(0);
    const double err = grad_check([&] {
        auto e = embed(x, p, 0.0, Mode::infer, drop_rng);
        return sum(mul(e, e));
    }, {p.w1, p.b1, p.w2, p.b2, x});
    CHECK(err < 1e-4);
}
