#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "pyramid/audio.hpp"
#include "pyramid/frontend.hpp"
#include "pyramid/train.hpp"

using namespace pyramid;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_branches = 2;
    cfg.dilation_schedule = {{1, 2}};
    cfg.heads = 2;
    cfg.conv_blocks = 1;
    cfg.vocab_size = 4;
    cfg.se_reduction = 2;
    cfg.dropout = 0.1;
    return cfg;
}

std::vector<std::uint8_t> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

bool params_equal(PyramidModel& a, PyramidModel& b) {
    auto pa = a.parameters(), pb = b.parameters();
    if (pa.size() != pb.size()) return false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        if (pa[i].first != pb[i].first || pa[i].second->data != pb[i].second->data) return false;
    }
    auto ba = a.bn_states(), bb = b.bn_states();
    for (std::size_t i = 0; i < ba.size(); ++i) {
        if (ba[i].second->running_mean != bb[i].second->running_mean ||
            ba[i].second->running_var != bb[i].second->running_var ||
            ba[i].second->updates != bb[i].second->updates) {
            return false;
        }
    }
    return true;
}

}  // namespace

TEST_CASE("adam: zero gradients never move parameters") {
    auto p = make_tensor({3}, {1.0, -2.0, 0.5}, true);
    const auto before = p->data;
    AdamState st;
    st.init({p});
    for (int i = 0; i < 10; ++i) {
        p->zero_grad();
        adam_step({p}, st, 0.1);
    }
    CHECK(p->data == before);
    CHECK(st.step == 10);
}

TEST_CASE("adam: first step moves by about -lr * sign(g)") {
    auto p = make_tensor({4}, {1.0, 1.0, 1.0, 1.0}, true);
    p->ensure_grad();
    for (auto& g : p->grad) g = 0.5;
    p->grad[1] = -0.5;
    AdamState st;
    st.init({p});
    adam_step({p}, st, 0.01);
    CHECK(p->data[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-4));
    CHECK(p->data[1] == doctest::Approx(1.0 + 0.01).epsilon(1e-4));
}

TEST_CASE("adam: non-finite gradient skips the update") {
    auto p = make_tensor({2}, {1.0, 2.0}, true);
    p->ensure_grad();
    p->grad[0] = std::numeric_limits<double>::infinity();
    AdamState st;
    st.init({p});
    adam_step({p}, st, 0.1);
    CHECK(p->data == std::vector<double>{1.0, 2.0});
    CHECK(st.step == 0);
    CHECK(st.skipped == 1);
}

TEST_CASE("adam: identical updates from identical state") {
    auto run = [] {
        auto p = make_tensor({3}, {0.3, -0.7, 1.1}, true);
        AdamState st;
        st.init({p});
        RandomSource rng(5);
        for (int i = 0; i < 20; ++i) {
            p->ensure_grad();
            for (auto& g : p->grad) g = rng.uniform(-1, 1);
            adam_step({p}, st, 0.05);
            p->zero_grad();
        }
        return p->data;
    };
    CHECK(run() == run());
}

TEST_CASE("learning-rate schedule shape") {
    Schedule s;
    s.d_model = 256;
    s.warmup_steps = 4000;
    const double peak = lr_at(4000, s);
    CHECK(lr_at(3999, s) < peak);
    CHECK(lr_at(4001, s) < peak);
    for (long long t = 2; t <= 4000; t += 37) CHECK(lr_at(t, s) > lr_at(t - 1, s));
    for (long long t = 4001; t <= 20000; t += 97) CHECK(lr_at(t, s) < lr_at(t - 1, s));

    CHECK(std::abs(lr_at(8000, s) / peak - std::pow(2.0, -0.5)) < 1e-12);
    CHECK_THROWS_AS(lr_at(0, s), std::runtime_error);

    // warmup defaults to a tenth of the total steps
    Schedule d;
    d.total_steps = 10000;
    Schedule e;
    e.warmup_steps = 1000;
    CHECK(lr_at(123, d) == lr_at(123, e));
}

TEST_CASE("paper-mode schedule reproduces the printed formula verbatim") {
    Schedule s;
    s.d_model = 256;
    s.warmup_steps = 100;
    s.formula = LrFormula::paper;
    for (long long t : {1LL, 7LL, 100LL, 5000LL}) {
        const double expect = std::sqrt(256.0) *
                              std::min(std::sqrt(static_cast<double>(t)), std::pow(100.0, -1.5));
        CHECK(lr_at(t, s) == expect);
    }
    // the printed form never decays
    CHECK(lr_at(100000, s) >= lr_at(10, s));
}

TEST_CASE("synthetic corpus is deterministic per seed") {
    TempDir a("tmp_synth_a"), b("tmp_synth_b"), c("tmp_synth_c");
    synth_corpus(a.path.string(), 11, 4, 5, 3);
    synth_corpus(b.path.string(), 11, 4, 5, 3);
    synth_corpus(c.path.string(), 12, 4, 5, 3);
    CHECK(slurp((a.path / "manifest.csv").string()) == slurp((b.path / "manifest.csv").string()));
    bool any_differs = false;
    for (int u = 0; u < 4; ++u) {
        char name[32];
        std::snprintf(name, sizeof(name), "utt_%04d.wav", u);
        CHECK(slurp((a.path / name).string()) == slurp((b.path / name).string()));
        any_differs = any_differs || slurp((a.path / name).string()) != slurp((c.path / name).string());
    }
    CHECK(any_differs);
}

TEST_CASE("utterance duration follows the label length") {
    TempDir dir("tmp_synth_len");
    synth_corpus(dir.path.string(), 3, 6, 4, 3);
    std::vector<std::string> vocab;
    auto samples = load_corpus(dir.path.string(), &vocab);
    CHECK(vocab.size() == 3);
    CHECK(samples.size() == 6);
    for (const auto& s : samples) {
        const int n_samples = static_cast<int>(s.labels.size()) * 3200;  // 0.2 s per token at 16 kHz
        CHECK(s.feats->rows() == filterbank_frame_count(n_samples, 16000));
        CHECK(s.feats->cols() == 80);
        for (int l : s.labels) {
            CHECK(l >= 1);
            CHECK(l <= 3);
        }
    }
    CHECK_THROWS_AS(synth_corpus(dir.path.string(), 1, 1, 2, 1), std::runtime_error);
}

TEST_CASE("token frequencies are injective") {
    std::set<double> seen;
    for (int id = 1; id <= 60; ++id) seen.insert(token_frequency(id));
    CHECK(seen.size() == 60);
}

TEST_CASE("training runs, logs metrics, and is deterministic") {
    TempDir dir("tmp_train_det");
    synth_corpus(dir.path.string(), 21, 6, 4, 2);
    auto corpus = load_corpus(dir.path.string());

    auto run = [&](const std::string& csv) {
        RandomSource build_rng(9), trainer(17);
        auto m = build(tiny_config(), build_rng);
        AdamState adam;
        TrainOptions opt;
        opt.epochs = 2;
        opt.batch_size = 3;
        opt.sched.d_model = 8;
        opt.sched.warmup_steps = 10;
        opt.heldout_frac = 0.0;
        opt.metrics_csv = csv;
        auto res = train(m, corpus, adam, trainer, opt);
        return std::make_pair(res, std::move(m));
    };
    fs::remove("tmp_metrics.csv");
    auto [r1, m1] = run("tmp_metrics.csv");
    auto [r2, m2] = run("");
    REQUIRE(!r1.history.empty());
    CHECK(r1.history.size() == r2.history.size());
    for (std::size_t i = 0; i < r1.history.size(); ++i) {
        CHECK(r1.history[i].loss == r2.history[i].loss);
        CHECK(r1.history[i].lr == r2.history[i].lr);
        CHECK(std::isfinite(r1.history[i].loss));
        CHECK(r1.history[i].loss > 0.0);
    }
    CHECK(params_equal(m1, m2));

    std::ifstream csv("tmp_metrics.csv");
    std::string line;
    std::getline(csv, line);
    CHECK(line == "step,lr,loss,cer");
    std::size_t rows = 0;
    while (std::getline(csv, line)) ++rows;
    CHECK(rows == r1.history.size());
    fs::remove("tmp_metrics.csv");
}

TEST_CASE("initial loss is on the uniform-probability scale") {
    TempDir dir("tmp_train_loss");
    synth_corpus(dir.path.string(), 22, 3, 4, 2);
    auto corpus = load_corpus(dir.path.string());
    RandomSource build_rng(9), trainer(17);
    auto m = build(tiny_config(), build_rng);
    AdamState adam;
    TrainOptions opt;
    opt.epochs = 1;
    opt.batch_size = 3;
    opt.sched.d_model = 8;
    opt.sched.warmup_steps = 10;
    opt.heldout_frac = 0.0;
    auto res = train(m, corpus, adam, trainer, opt);
    int max_frames = 0;
    for (const auto& s : corpus) max_frames = std::max(max_frames, subsampled_len(s.feats->rows()));
    // a uniform model pays at most about T' * log V per utterance
    CHECK(res.history.front().loss < 3.0 * max_frames * std::log(4.0));
    CHECK(res.history.front().loss > 0.2 * std::log(4.0));
}

TEST_CASE("infeasible utterances are skipped and counted") {
    TempDir dir("tmp_train_skip");
    synth_corpus(dir.path.string(), 23, 2, 4, 1);
    auto corpus = load_corpus(dir.path.string());
    // forge an impossible label: longer than the subsampled frame count
    Sample bad;
    bad.feats = corpus[0].feats;
    bad.labels.assign(100, 1);
    corpus.push_back(bad);
    RandomSource build_rng(9), trainer(17);
    auto m = build(tiny_config(), build_rng);
    AdamState adam;
    TrainOptions opt;
    opt.epochs = 1;
    opt.batch_size = 4;
    opt.sched.d_model = 8;
    opt.sched.warmup_steps = 10;
    opt.heldout_frac = 0.0;
    auto res = train(m, corpus, adam, trainer, opt);
    CHECK(res.skipped_utterances == 1);
    CHECK(!res.history.empty());
}

TEST_CASE("checkpoint round trip is bitwise and resume matches uninterrupted training") {
    TempDir dir("tmp_train_ckpt");
    synth_corpus(dir.path.string(), 31, 5, 4, 2);
    auto corpus = load_corpus(dir.path.string());

    TrainOptions opt;
    opt.epochs = 1;
    opt.batch_size = 2;
    opt.sched.d_model = 8;
    opt.sched.warmup_steps = 10;
    opt.heldout_frac = 0.0;

    // uninterrupted: two epochs
    RandomSource b1(42), t1(7);
    auto full = build(tiny_config(), b1);
    AdamState adam1;
    opt.epochs = 2;
    train(full, corpus, adam1, t1, opt);

    // interrupted: one epoch, checkpoint, reload, second epoch
    RandomSource b2(42), t2(7);
    auto half = build(tiny_config(), b2);
    AdamState adam2;
    opt.epochs = 1;
    train(half, corpus, adam2, t2, opt);
    const std::string ckpt = (dir.path / "ck.pyrc").string();
    save_checkpoint(ckpt, half, adam2, t2.state, adam2.step);

    auto loaded = load_checkpoint(ckpt);
    CHECK(loaded.step == adam2.step);
    CHECK(params_equal(half, loaded.model));
    RandomSource t3(loaded.trainer_rng);
    train(loaded.model, corpus, loaded.adam, t3, opt);
    CHECK(params_equal(full, loaded.model));
    CHECK(loaded.adam.step == adam1.step);

    // save -> load -> save is byte-identical
    auto re = load_checkpoint(ckpt);
    const std::string ckpt2 = (dir.path / "ck2.pyrc").string();
    save_checkpoint(ckpt2, re.model, re.adam, re.trainer_rng, re.step);
    CHECK(slurp(ckpt) == slurp(ckpt2));
}

TEST_CASE("checkpoint rejects corruption, truncation and alien versions") {
    TempDir dir("tmp_train_badckpt");
    RandomSource rng(1);
    auto m = build(tiny_config(), rng);
    AdamState adam;
    const std::string path = (dir.path / "ck.pyrc").string();
    save_checkpoint(path, m, adam, 99, 0);

    auto bytes = slurp(path);
    auto write_bytes = [&](const std::vector<std::uint8_t>& b, const std::string& p) {
        std::ofstream out(p, std::ios::binary);
        out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
    };

    auto corrupt = bytes;
    corrupt[bytes.size() / 2] ^= 0xFF;
    write_bytes(corrupt, path + ".bad");
    CHECK_THROWS_WITH_AS(load_checkpoint(path + ".bad"), doctest::Contains("checksum"), std::runtime_error);

    auto truncated = bytes;
    truncated.resize(truncated.size() - 10);
    write_bytes(truncated, path + ".trunc");
    CHECK_THROWS_WITH_AS(load_checkpoint(path + ".trunc"), doctest::Contains("checksum"), std::runtime_error);

    auto version = bytes;
    version[4] = 9;  // bump version, then re-seal the checksum
    const auto crc = crc32(version.data(), version.size() - 4);
    for (int i = 0; i < 4; ++i) version[version.size() - 4 + static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(crc >> (8 * i));
    write_bytes(version, path + ".v9");
    CHECK_THROWS_WITH_AS(load_checkpoint(path + ".v9"), doctest::Contains("version 9"), std::runtime_error);
}
