#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "pyramid/blocks.hpp"

using namespace pyramid;

namespace {

std::vector<TensorPtr> trainable(const NamedParams& named) {
    std::vector<TensorPtr> out;
    for (const auto& [name, t] : named) out.push_back(t);
    return out;
}

void zero_all(const NamedParams& named) {
    for (const auto& [name, t] : named) std::fill(t->data.begin(), t->data.end(), 0.0);
}

}  // namespace

TEST_CASE("conv_block: zero parameters give residual passthrough") {
    RandomSource rng(1);
    auto p = make_conv_block(6, 2, rng);
    NamedParams named;
    p.collect("cb", named);
    zero_all(named);

    auto x = uniform_init({5, 6}, rng, -1, 1);
    RandomSource drop(2);
    auto y = conv_block_forward(x, p, 0.1, Mode::train, drop);
    CHECK(y->data == x->data);
}

TEST_CASE("conv_block: shape preserved for expansion factors 1, 2, 4") {
    RandomSource rng(2);
    for (int e : {1, 2, 4}) {
        auto p = make_conv_block(6, e, rng);
        auto x = uniform_init({9, 6}, rng, -1, 1);
        RandomSource drop(3);
        auto y = conv_block_forward(x, p, 0.1, Mode::train, drop);
        CHECK(y->shape == x->shape);
    }
    CHECK_THROWS_AS(make_conv_block(5, 1, rng), std::runtime_error);  // e*d odd
}

TEST_CASE("conv_block: gradient check") {
    RandomSource rng(3);
    auto p = make_conv_block(4, 2, rng);
    auto x = uniform_init({6, 4}, rng, -1, 1);
    NamedParams named;
    p.collect("cb", named);
    auto params = trainable(named);
    params.push_back(x);
    RandomSource drop(0);
    const double err = grad_check([&] {
        auto y = conv_block_forward(x, p, 0.0, Mode::infer, drop);
        return sum(swish(y));
    }, params);
    CHECK(err < 1e-4);
}

TEST_CASE("mhsa: single position attends to itself with weight 1") {
    RandomSource rng(4);
    auto p = make_mhsa(8, 4, rng);
    auto x = uniform_init({1, 8}, rng, -1, 1);
    RandomSource drop(0);
    std::vector<TensorPtr> attn;
    mhsa_forward(x, p, 0, 0.1, Mode::infer, drop, &attn);
    CHECK(attn.size() == 4);
    for (const auto& a : attn) {
        CHECK(a->shape == std::vector<int>{1, 1});
        CHECK(a->data[0] == doctest::Approx(1.0));
    }
}

TEST_CASE("mhsa: attention rows sum to 1") {
    RandomSource rng(5);
    auto p = make_mhsa(8, 2, rng);
    auto x = uniform_init({7, 8}, rng, -2, 2);
    RandomSource drop(0);
    std::vector<TensorPtr> attn;
    mhsa_forward(x, p, 0, 0.1, Mode::infer, drop, &attn);
    for (const auto& a : attn) {
        for (int r = 0; r < a->rows(); ++r) {
            double s = 0;
            for (int c = 0; c < a->cols(); ++c) s += a->at(r, c);
            CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("mhsa: masked keys get negligible weight") {
    RandomSource rng(6);
    auto p = make_mhsa(8, 2, rng);
    auto x = uniform_init({6, 8}, rng, -1, 1);
    RandomSource drop(0);
    std::vector<TensorPtr> attn;
    mhsa_forward(x, p, 4, 0.1, Mode::infer, drop, &attn);
    for (const auto& a : attn) {
        for (int r = 0; r < a->rows(); ++r) {
            for (int c = 4; c < a->cols(); ++c) CHECK(a->at(r, c) < 1e-12);
        }
    }
}

TEST_CASE("mhsa: zero output projection gives residual identity") {
    RandomSource rng(7);
    auto p = make_mhsa(8, 2, rng);
    std::fill(p.wo->data.begin(), p.wo->data.end(), 0.0);
    auto x = uniform_init({5, 8}, rng, -1, 1);
    RandomSource drop(0);
    auto y = mhsa_forward(x, p, 0, 0.1, Mode::infer, drop);
    CHECK(y->data == x->data);
}

TEST_CASE("mhsa: mask longer than T is rejected") {
    RandomSource rng(8);
    auto p = make_mhsa(8, 2, rng);
    auto x = uniform_init({3, 8}, rng, -1, 1);
    RandomSource drop(0);
    CHECK_THROWS_AS(mhsa_forward(x, p, 5, 0.1, Mode::infer, drop), std::runtime_error);
}

TEST_CASE("mhsa: gradient check") {
    RandomSource rng(9);
    auto p = make_mhsa(6, 2, rng);
    auto x = uniform_init({5, 6}, rng, -1, 1);
    NamedParams named;
    p.collect("mhsa", named);
    auto params = trainable(named);
    params.push_back(x);
    RandomSource drop(0);
    const double err = grad_check([&] {
        auto y = mhsa_forward(x, p, 0, 0.0, Mode::infer, drop);
        return sum(swish(y));
    }, params);
    CHECK(err < 1e-4);
}

TEST_CASE("dcnn_attention: dilation 1 conv stage equals a standard convolution") {
    RandomSource rng(10);
    auto p = make_dcnn_attention(4, 4, 1, 2, rng);
    auto x = uniform_init({8, 4}, rng, -1, 1);
    RandomSource drop(0);
    auto o = dcnn_attention_forward(x, p, 0, 0.1, Mode::infer, drop);
    auto manual = bias_add(conv1d(x, p.conv_w, 1, ConvMode::full), p.conv_b);
    CHECK(o.pre_attention->data == manual->data);
}

TEST_CASE("dcnn_attention: widening output changes the residual width") {
    RandomSource rng(11);
    auto p = make_dcnn_attention(4, 8, 2, 2, rng);
    auto x = uniform_init({6, 4}, rng, -1, 1);
    RandomSource drop(0);
    auto o = dcnn_attention_forward(x, p, 0, 0.1, Mode::infer, drop);
    CHECK(o.out->shape == std::vector<int>{6, 8});
}

TEST_CASE("dcnn_attention: gradient check") {
    RandomSource rng(12);
    auto p = make_dcnn_attention(4, 4, 2, 2, rng);
    auto x = uniform_init({7, 4}, rng, -1, 1);
    NamedParams named;
    p.collect("da", named);
    auto params = trainable(named);
    params.push_back(x);
    RandomSource drop(0);
    const double err = grad_check([&] {
        auto o = dcnn_attention_forward(x, p, 0, 0.0, Mode::infer, drop);
        return sum(swish(o.out));
    }, params);
    CHECK(err < 1e-4);
}

TEST_CASE("dual_fusion: width law and order sensitivity") {
    RandomSource rng(13);
    auto p = make_dual_fusion(6, rng);
    auto a = uniform_init({5, 6}, rng, -1, 1);
    auto b = uniform_init({5, 6}, rng, -1, 1);
    RandomSource d1(0), d2(0);
    auto ab = dual_fusion_forward(a, b, p, 0.0, Mode::infer, d1);
    auto ba = dual_fusion_forward(b, a, p, 0.0, Mode::infer, d2);
    CHECK(ab->shape == std::vector<int>{5, 6});
    bool differs = false;
    for (std::size_t i = 0; i < ab->data.size(); ++i) differs = differs || std::abs(ab->data[i] - ba->data[i]) > 1e-9;
    CHECK(differs);

    CHECK_THROWS_AS(dual_fusion_forward(a, uniform_init({4, 6}, rng, -1, 1), p, 0.0, Mode::infer, d1),
                    std::runtime_error);
}

TEST_CASE("dual_fusion: gradient check") {
    RandomSource rng(14);
    auto p = make_dual_fusion(4, rng);
    auto a = uniform_init({6, 4}, rng, -1, 1);
    auto b = uniform_init({6, 4}, rng, -1, 1);
    NamedParams named;
    p.collect("df", named);
    auto params = trainable(named);
    params.push_back(a);
    params.push_back(b);
    RandomSource drop(0);
    const double err = grad_check([&] {
        auto y = dual_fusion_forward(a, b, p, 0.0, Mode::infer, drop);
        return sum(swish(y));
    }, params);
    CHECK(err < 1e-4);
}

TEST_CASE("senet: zero parameters halve the input") {
    RandomSource rng(15);
    auto p = make_senet(8, 4, rng);
    NamedParams named;
    p.collect("se", named);
    zero_all(named);
    auto x = uniform_init({5, 8}, rng, -1, 1);
    auto y = senet_forward(x, p);
    for (std::size_t i = 0; i < x->data.size(); ++i) CHECK(y->data[i] == doctest::Approx(x->data[i] / 2));
}

TEST_CASE("senet: gates lie strictly in (0,1)") {
    RandomSource rng(16);
    auto p = make_senet(8, 2, rng);
    auto x = uniform_init({9, 8}, rng, -100, 100);
    TensorPtr gates;
    senet_forward(x, p, 0, &gates);
    for (double g : gates->data) {
        CHECK(g > 0.0);
        CHECK(g < 1.0);
    }
    CHECK_THROWS_AS(make_senet(10, 4, rng), std::runtime_error);  // R must divide C
}

TEST_CASE("senet: squeeze of a time-constant input is that constant row") {
    RandomSource rng(17);
    std::vector<double> row(8);
    for (auto& v : row) v = rng.uniform(-1, 1);
    std::vector<double> data;
    for (int t = 0; t < 6; ++t) data.insert(data.end(), row.begin(), row.end());
    auto x = make_tensor({6, 8}, data);
    auto squeeze = mean_over_time(x);
    for (int c = 0; c < 8; ++c) CHECK(squeeze->data[static_cast<std::size_t>(c)] == doctest::Approx(row[static_cast<std::size_t>(c)]));
}

TEST_CASE("senet: gradient check") {
    RandomSource rng(18);
    auto p = make_senet(6, 3, rng);
    auto x = uniform_init({5, 6}, rng, -1, 1);
    NamedParams named;
    p.collect("se", named);
    auto params = trainable(named);
    params.push_back(x);
    const double err = grad_check([&] { return sum(swish(senet_forward(x, p))); }, params);
    CHECK(err < 1e-4);
}

TEST_CASE("ffm: zero second linear reduces to layer norm of input") {
    RandomSource rng(19);
    auto p = make_ffm(6, rng);
    std::fill(p.w2->data.begin(), p.w2->data.end(), 0.0);
    auto x = uniform_init({4, 6}, rng, -1, 1);
    RandomSource drop(0);
    auto y = ffm_forward(x, p, 0.0, Mode::infer, drop);
    auto ln = layer_norm(x, p.ln_gamma, p.ln_beta);
    CHECK(y->data == ln->data);
}

TEST_CASE("ffm: hidden width is exactly 4d") {
    RandomSource rng(20);
    auto p = make_ffm(6, rng);
    CHECK(p.w1->shape == std::vector<int>{6, 24});
    CHECK(p.w2->shape == std::vector<int>{24, 6});
}

TEST_CASE("ffm: gradient check") {
    RandomSource rng(21);
    auto p = make_ffm(4, rng);
    auto x = uniform_init({5, 4}, rng, -1, 1);
    NamedParams named;
    p.collect("ffm", named);
    auto params = trainable(named);
    params.push_back(x);
    RandomSource drop(0);
    const double err = grad_check([&] { return sum(swish(ffm_forward(x, p, 0.0, Mode::infer, drop))); }, params);
    CHECK(err < 1e-4);
}

TEST_CASE("blocks preserve sequence length") {
    RandomSource rng(22);
    const int T = 11;
    auto x = uniform_init({T, 8}, rng, -1, 1);
    RandomSource drop(0);

    auto cb = make_conv_block(8, 2, rng);
    CHECK(conv_block_forward(x, cb, 0.1, Mode::train, drop)->rows() == T);

    auto mh = make_mhsa(8, 2, rng);
    CHECK(mhsa_forward(x, mh, 0, 0.1, Mode::train, drop)->rows() == T);

    auto da = make_dcnn_attention(8, 8, 3, 2, rng);
    CHECK(dcnn_attention_forward(x, da, 0, 0.1, Mode::train, drop).out->rows() == T);

    auto se = make_senet(8, 2, rng);
    CHECK(senet_forward(x, se)->rows() == T);

    auto ff = make_ffm(8, rng);
    CHECK(ffm_forward(x, ff, 0.1, Mode::train, drop)->rows() == T);
}
