#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <map>

#include "pyramid/ctc.hpp"

using namespace pyramid;

namespace {

TensorPtr uniform_rows(int t, int v) {
    return full({t, v}, std::log(1.0 / v));
}

TensorPtr random_rows(int t, int v, RandomSource& rng) {
    auto lp = zeros({t, v});
    for (int i = 0; i < t; ++i) {
        double sum = 0;
        std::vector<double> w(static_cast<std::size_t>(v));
        for (auto& x : w) {
            x = std::exp(rng.uniform(-2, 2));
            sum += x;
        }
        for (int j = 0; j < v; ++j) lp->at(i, j) = std::log(w[static_cast<std::size_t>(j)] / sum);
    }
    return lp;
}

}  // namespace

TEST_CASE("single frame, single token: half the mass") {
    auto loss = ctc_loss(uniform_rows(1, 2), {1});
    CHECK(loss->data[0] == doctest::Approx(-std::log(0.5)));
}

TEST_CASE("two frames, single token: three of four paths") {
    auto loss = ctc_loss(uniform_rows(2, 2), {1});
    CHECK(loss->data[0] == doctest::Approx(-std::log(0.75)));
}

TEST_CASE("empty label: unique all-blank path") {
    RandomSource rng(1);
    auto lp = random_rows(5, 3, rng);
    double expect = 0;
    for (int t = 0; t < 5; ++t) expect -= lp->at(t, 0);
    CHECK(ctc_loss(lp, {})->data[0] == doctest::Approx(expect));
    CHECK(ctc_loss_bruteforce(lp, {}) == doctest::Approx(expect));
}

TEST_CASE("infeasible length is an error naming T and L") {
    CHECK_THROWS_WITH_AS(ctc_loss(uniform_rows(1, 2), {1, 1}), doctest::Contains("too short"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(ctc_loss(uniform_rows(2, 2), {1, 1}), doctest::Contains("T=2, L=2"),
                         std::runtime_error);
    CHECK(std::isinf(ctc_loss_bruteforce(uniform_rows(2, 2), {1, 1})));
    // three frames fit "aa" (a, blank, a)
    CHECK(std::isfinite(ctc_loss(uniform_rows(3, 2), {1, 1})->data[0]));
}

TEST_CASE("label ids and normalization are validated") {
    CHECK_THROWS_WITH_AS(ctc_loss(uniform_rows(3, 2), {2}), doctest::Contains("label id"),
                         std::runtime_error);
    CHECK_THROWS_WITH_AS(ctc_loss(uniform_rows(3, 2), {0}), doctest::Contains("label id"),
                         std::runtime_error);
    auto bad = full({2, 2}, -0.1);
    CHECK_THROWS_WITH_AS(ctc_loss(bad, {1}), doctest::Contains("log-normalized"), std::runtime_error);
}

TEST_CASE("loss is zero only when the label paths hold all the mass") {
    auto lp = zeros({3, 3});
    for (int t = 0; t < 3; ++t) {
        for (int v = 0; v < 3; ++v) lp->at(t, v) = (v == 1) ? 0.0 : -1e30;
    }
    CHECK(ctc_loss(lp, {1})->data[0] == doctest::Approx(0.0));
    RandomSource rng(2);
    for (int i = 0; i < 20; ++i) {
        auto r = random_rows(4, 3, rng);
        CHECK(ctc_loss(r, {1, 2})->data[0] > 0.0);
    }
}

TEST_CASE("dynamic program matches brute-force enumeration on the small grid") {
    RandomSource rng(3);
    int instances = 0;
    while (instances < 100) {
        const int t = 1 + static_cast<int>(rng.next_u64() % 6);
        const int v = 2 + static_cast<int>(rng.next_u64() % 3);
        const int l = static_cast<int>(rng.next_u64() % 4);
        LabelSeq labels;
        for (int i = 0; i < l; ++i) labels.push_back(1 + static_cast<int>(rng.next_u64() % (v - 1)));
        auto lp = random_rows(t, v, rng);
        const double brute = ctc_loss_bruteforce(lp, labels);
        if (std::isinf(brute)) {
            CHECK_THROWS_AS(ctc_loss(lp, labels), std::runtime_error);
        } else {
            CHECK(std::abs(ctc_loss(lp, labels)->data[0] - brute) < 1e-8);
        }
        ++instances;
    }
}

TEST_CASE("brute force refuses an oversized search space") {
    CHECK_THROWS_WITH_AS(ctc_loss_bruteforce(uniform_rows(20, 10), {1}), doctest::Contains("guard"),
                         std::runtime_error);
}

TEST_CASE("gradient matches finite differences through log-softmax") {
    RandomSource rng(4);
    auto logits = uniform_init({5, 4}, rng, -1, 1);
    const double err = grad_check([&] { return ctc_loss(log_softmax(logits), {2, 1}); }, {logits});
    CHECK(err < 1e-4);

    auto logits2 = uniform_init({6, 3}, rng, -2, 2);
    const double err2 = grad_check([&] { return ctc_loss(log_softmax(logits2), {1, 1, 2}); }, {logits2});
    CHECK(err2 < 1e-4);
}

TEST_CASE("greedy decode collapses repeats and drops blanks") {
    // frames argmax: a a - b
    auto lp = full({4, 3}, std::log(0.1));
    auto set_peak = [&](int t, int v) {
        for (int j = 0; j < 3; ++j) lp->at(t, j) = (j == v) ? std::log(0.8) : std::log(0.1);
    };
    set_peak(0, 1);
    set_peak(1, 1);
    set_peak(2, 0);
    set_peak(3, 2);
    CHECK(greedy_decode(lp) == LabelSeq{1, 2});

    auto blanks = zeros({3, 3});
    for (int t = 0; t < 3; ++t) {
        blanks->at(t, 0) = std::log(0.8);
        blanks->at(t, 1) = blanks->at(t, 2) = std::log(0.1);
    }
    CHECK(greedy_decode(blanks).empty());

    set_peak(0, 1);
    set_peak(1, 0);
    set_peak(2, 1);
    auto sep = make_tensor({3, 3}, std::vector<double>(lp->data.begin(), lp->data.begin() + 9));
    CHECK(greedy_decode(sep) == LabelSeq{1, 1});

    // exact tie: lowest index wins, so the blank absorbs everything
    CHECK(greedy_decode(uniform_rows(4, 3)).empty());
}

TEST_CASE("character error rate") {
    CHECK(cer({1, 2, 3}, {1, 2, 3}) == 0.0);
    CHECK(cer({1, 2}, {1, 3}) == doctest::Approx(0.5));
    CHECK(cer({}, {1, 2, 3, 4}) == doctest::Approx(1.0));
    CHECK(cer({1, 2, 3}, {2, 3}) == doctest::Approx(0.5));  // one insertion / 2
    CHECK_THROWS_AS(cer({1}, {}), std::runtime_error);

    RandomSource rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        LabelSeq hyp, ref;
        for (int i = 0; i < 6; ++i) hyp.push_back(1 + static_cast<int>(rng.next_u64() % 4));
        for (int i = 0; i < 5; ++i) ref.push_back(1 + static_cast<int>(rng.next_u64() % 4));
        CHECK((cer(hyp, ref) == 0.0) == (hyp == ref));
        // bijective relabeling leaves the rate unchanged
        std::map<int, int> relabel{{1, 3}, {2, 4}, {3, 1}, {4, 2}};
        LabelSeq hyp2, ref2;
        for (int x : hyp) hyp2.push_back(relabel[x]);
        for (int x : ref) ref2.push_back(relabel[x]);
        CHECK(cer(hyp, ref) == doctest::Approx(cer(hyp2, ref2)));
    }
}

TEST_CASE("vocabulary file and tokenization round trip") {
    const std::string path = "test_vocab.txt";
    std::vector<std::string> vocab{"a", "b", "ch"};
    write_vocab(path, vocab);
    CHECK(read_vocab(path) == vocab);
    std::remove(path.c_str());

    CHECK(tokenize("achb", vocab) == LabelSeq{1, 3, 2});
    CHECK(detokenize({1, 3, 2}, vocab) == "achb");
    CHECK_THROWS_WITH_AS(tokenize("axb", vocab), doctest::Contains("byte 1"), std::runtime_error);
    CHECK_THROWS_AS(detokenize({4}, vocab), std::runtime_error);
}
