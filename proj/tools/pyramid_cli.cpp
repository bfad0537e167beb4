#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "pyramid/audio.hpp"
#include "pyramid/blocks.hpp"
#include "pyramid/ctc.hpp"
#include "pyramid/frontend.hpp"
#include "pyramid/model.hpp"
#include "pyramid/train.hpp"

namespace {

using namespace pyramid;

ModelConfig config_from_flags(const std::string& preset, const std::string& config_path) {
    if (!preset.empty() && !config_path.empty()) {
        throw std::runtime_error("give either --preset or --config, not both");
    }
    if (!config_path.empty()) return read_model_config(config_path);
    return preset_config(preset.empty() ? "S" : preset);
}

std::string join_rates(const std::vector<int>& rates) {
    std::string s;
    for (std::size_t i = 0; i < rates.size(); ++i) {
        if (i) s += "-";
        s += std::to_string(rates[i]);
    }
    return s;
}

int cmd_synth(const std::string& out, std::uint64_t seed, int n_utts, int vocab_size, int max_label_len) {
    synth_corpus(out, seed, n_utts, vocab_size, max_label_len);
    std::cout << "wrote " << n_utts << " utterances to " << out << "\n";
    return 0;
}

int cmd_train(const std::string& corpus_dir, const std::string& preset, const std::string& config_path,
              std::uint64_t seed, int epochs, int batch_size, const std::string& lr_formula,
              const std::string& checkpoint, const std::string& out_csv) {
    std::vector<std::string> vocab;
    auto corpus = load_corpus(corpus_dir, &vocab);

    PyramidModel model;
    AdamState adam;
    RandomSource trainer(seed);
    long long start_step = 0;
    if (!checkpoint.empty() && std::filesystem::exists(checkpoint)) {
        auto ck = load_checkpoint(checkpoint);
        model = std::move(ck.model);
        adam = std::move(ck.adam);
        trainer.state = ck.trainer_rng;
        start_step = ck.step;
        std::cout << "resumed from " << checkpoint << " at step " << start_step << "\n";
    } else {
        auto cfg = config_from_flags(preset, config_path);
        cfg.vocab_size = static_cast<int>(vocab.size()) + 1;  // blank + corpus tokens
        RandomSource build_rng(seed);
        model = build(cfg, build_rng);
    }

    TrainOptions opt;
    opt.epochs = epochs;
    opt.batch_size = batch_size;
    opt.metrics_csv = out_csv;
    opt.sched.d_model = model.cfg.d_model;
    const long long batches =
        (static_cast<long long>(corpus.size()) + batch_size - 1) / batch_size;
    opt.sched.total_steps = start_step + static_cast<long long>(epochs) * batches;
    opt.sched.formula = (lr_formula == "paper") ? LrFormula::paper : LrFormula::standard;

    auto res = train(model, corpus, adam, trainer, opt);
    for (const auto& r : res.history) {
        if (r.cer >= 0) std::printf("step %lld  lr %.6g  loss %.4f  held-out CER %.2f\n", r.step, r.lr, r.loss, r.cer);
    }
    if (!res.history.empty()) {
        std::printf("trained %zu steps, final loss %.4f", res.history.size(), res.history.back().loss);
        if (res.skipped_utterances > 0) std::printf(", skipped %lld utterances", res.skipped_utterances);
        std::printf("\n");
    }
    if (!checkpoint.empty()) {
        save_checkpoint(checkpoint, model, adam, trainer.state, adam.step);
        std::cout << "checkpoint written to " << checkpoint << "\n";
    }
    return 0;
}

int cmd_eval(const std::string& corpus_dir, const std::string& checkpoint) {
    auto ck = load_checkpoint(checkpoint);
    auto corpus = load_corpus(corpus_dir);
    std::printf("CER %.2f\n", corpus_cer(ck.model, corpus));
    return 0;
}

int cmd_decode(const std::string& checkpoint, const std::string& vocab_path, const std::vector<std::string>& wavs) {
    auto ck = load_checkpoint(checkpoint);
    auto vocab = read_vocab(vocab_path);
    RandomSource dummy(0);
    for (const auto& path : wavs) {
        auto feats = log_mel_filterbank(read_wav_file(path)).to_tensor();
        auto hyp = greedy_decode(model_forward(ck.model, feats, Mode::infer, dummy));
        std::cout << path << "\t" << detokenize(hyp, vocab) << "\n";
    }
    return 0;
}

int cmd_analyze(const std::string& preset, const std::string& config_path, std::uint64_t seed) {
    auto cfg = config_from_flags(preset, config_path);
    resolve_config(cfg);
    RandomSource rng(seed);
    auto model = build(cfg, rng);

    std::cout << "d_model " << cfg.d_model << ", heads " << cfg.heads << ", layers " << cfg.n_layers
              << ", branches " << cfg.n_branches << ", conv blocks " << cfg.conv_blocks << " (expansions "
              << join_rates(cfg.expansion_factors) << ")\n";
    std::cout << model.module_count() << " DCNN-Attention modules, " << model.fusion_count()
              << " fusion nodes\n";
    for (int i = 0; i < cfg.n_layers; ++i) {
        const auto& rates = cfg.dilation_schedule[static_cast<std::size_t>(i)];
        std::string rfs;
        for (std::size_t j = 0; j < rates.size(); ++j) {
            if (j) rfs += "-";
            rfs += std::to_string(receptive_field(cfg, i, static_cast<int>(j)));
        }
        std::cout << "layer " << (i + 1) << ": " << rates.size() << " branches, dilation rates "
                  << join_rates(rates) << ", receptive fields " << rfs << "\n";
    }
    auto pc = count_params(model);
    std::cout << "parameters:\n";
    for (const auto& [name, count] : pc.components) std::printf("  %-12s %10lld\n", name.c_str(), count);
    std::printf("  %-12s %10lld (%.1f M)\n", "total", pc.total, static_cast<double>(pc.total) / 1e6);
    return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
    RandomSource rng(seed);
    double worst = 0.0;
    auto report = [&](const std::string& name, double err) {
        std::printf("%-16s max relative error %.3g\n", name.c_str(), err);
        worst = std::max(worst, err);
    };
    RandomSource drop(0);

    {
        auto p = make_conv_block(6, 2, rng);
        auto x = uniform_init({7, 6}, rng, -1, 1);
        NamedParams named;
        p.collect("cb", named);
        std::vector<TensorPtr> params{x};
        for (auto& [n, t] : named) params.push_back(t);
        report("conv_block", grad_check([&] {
            return sum(swish(conv_block_forward(x, p, 0.0, Mode::infer, drop)));
        }, params));
    }
    {
        auto p = make_mhsa(6, 2, rng);
        auto x = uniform_init({6, 6}, rng, -1, 1);
        NamedParams named;
        p.collect("mhsa", named);
        std::vector<TensorPtr> params{x};
        for (auto& [n, t] : named) params.push_back(t);
        report("mhsa", grad_check([&] {
            return sum(swish(mhsa_forward(x, p, 0, 0.0, Mode::infer, drop)));
        }, params));
    }
    {
        auto p = make_dcnn_attention(4, 6, 2, 2, rng);
        auto x = uniform_init({8, 4}, rng, -1, 1);
        NamedParams named;
        p.collect("da", named);
        std::vector<TensorPtr> params{x};
        for (auto& [n, t] : named) params.push_back(t);
        report("dcnn_attention", grad_check([&] {
            return sum(swish(dcnn_attention_forward(x, p, 0, 0.0, Mode::infer, drop).out));
        }, params));
    }
    {
        auto p = make_dual_fusion(5, rng);
        auto a = uniform_init({6, 5}, rng, -1, 1);
        auto b = uniform_init({6, 5}, rng, -1, 1);
        NamedParams named;
        p.collect("df", named);
        std::vector<TensorPtr> params{a, b};
        for (auto& [n, t] : named) params.push_back(t);
        report("dual_fusion", grad_check([&] {
            return sum(swish(dual_fusion_forward(a, b, p, 0.0, Mode::infer, drop)));
        }, params));
    }
    {
        auto p = make_senet(6, 3, rng);
        auto x = uniform_init({6, 6}, rng, -1, 1);
        NamedParams named;
        p.collect("se", named);
        std::vector<TensorPtr> params{x};
        for (auto& [n, t] : named) params.push_back(t);
        report("senet", grad_check([&] { return sum(swish(senet_forward(x, p))); }, params));
    }
    {
        auto p = make_ffm(6, rng);
        auto x = uniform_init({6, 6}, rng, -1, 1);
        NamedParams named;
        p.collect("ffm", named);
        std::vector<TensorPtr> params{x};
        for (auto& [n, t] : named) params.push_back(t);
        report("ffm", grad_check([&] {
            return sum(swish(ffm_forward(x, p, 0.0, Mode::infer, drop)));
        }, params));
    }
    {
        ModelConfig cfg;
        cfg.d_model = 8;
        cfg.n_layers = 2;
        cfg.n_branches = 2;
        cfg.dilation_schedule = {{1, 2}};
        cfg.heads = 2;
        cfg.conv_blocks = 2;
        cfg.vocab_size = 5;
        cfg.se_reduction = 2;
        cfg.dropout = 0.0;
        cfg.n_mels = 4;
        auto m = build(cfg, rng);
        auto feats = uniform_init({12, 4}, rng, -1, 1);
        feats->requires_grad = false;
        std::vector<TensorPtr> params;
        for (auto& [n, t] : m.parameters()) params.push_back(t);
        report("model", grad_check([&] {
            auto out = model_forward(m, feats, Mode::infer, drop);
            return sum(mul(out, out));
        }, params, 1e-5, 0, 40));
    }

    if (worst >= 1e-4) {
        std::printf("FAIL: worst error %.3g exceeds 1e-4\n", worst);
        return 3;
    }
    std::printf("OK: all checks below 1e-4\n");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"pyramid multi-branch speech recognizer"};
    app.require_subcommand(1);

    std::string preset, config_path, checkpoint, corpus_dir, out_path, vocab_path;
    std::string lr_formula = "standard";
    std::uint64_t seed = 1;
    int epochs = 1, batch_size = 32, n_utts = 100, vocab_size = 11, max_label_len = 6;
    std::vector<std::string> wavs;

    auto* synth = app.add_subcommand("synth", "generate a synthetic corpus");
    synth->add_option("--out", out_path, "output directory")->required();
    synth->add_option("--seed", seed, "random seed");
    synth->add_option("--n-utts", n_utts, "number of utterances");
    synth->add_option("--vocab-size", vocab_size, "vocabulary size including the blank");
    synth->add_option("--max-label-len", max_label_len, "maximum tokens per utterance");

    auto* train_cmd = app.add_subcommand("train", "train on a corpus directory");
    train_cmd->add_option("--corpus", corpus_dir, "corpus directory (manifest.csv + vocab.txt)")->required();
    train_cmd->add_option("--preset", preset, "model preset S|M|L")->check(CLI::IsMember({"S", "M", "L"}));
    train_cmd->add_option("--config", config_path, "model config file");
    train_cmd->add_option("--seed", seed, "random seed");
    train_cmd->add_option("--epochs", epochs, "training epochs");
    train_cmd->add_option("--batch-size", batch_size, "utterances per optimizer step");
    train_cmd->add_option("--lr-formula", lr_formula, "learning-rate formula")
        ->check(CLI::IsMember({"standard", "paper"}));
    train_cmd->add_option("--checkpoint", checkpoint, "checkpoint path (resumed when it exists)");
    train_cmd->add_option("--out", out_path, "metrics CSV path");

    auto* eval_cmd = app.add_subcommand("eval", "report corpus CER for a checkpoint");
    eval_cmd->add_option("--corpus", corpus_dir, "corpus directory")->required();
    eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint path")->required();

    auto* decode = app.add_subcommand("decode", "print token sequences for WAV files");
    decode->add_option("--checkpoint", checkpoint, "checkpoint path")->required();
    decode->add_option("--vocab", vocab_path, "vocabulary file")->required();
    decode->add_option("wavs", wavs, "WAV files")->required();

    auto* analyze = app.add_subcommand("analyze", "print the pyramid structure table");
    analyze->add_option("--preset", preset, "model preset S|M|L")->check(CLI::IsMember({"S", "M", "L"}));
    analyze->add_option("--config", config_path, "model config file");
    analyze->add_option("--seed", seed, "random seed");

    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference checks for every block");
    gradcheck->add_option("--seed", seed, "random seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) return cmd_synth(out_path, seed, n_utts, vocab_size, max_label_len);
        if (train_cmd->parsed()) {
            return cmd_train(corpus_dir, preset, config_path, seed, epochs, batch_size, lr_formula,
                             checkpoint, out_path);
        }
        if (eval_cmd->parsed()) return cmd_eval(corpus_dir, checkpoint);
        if (decode->parsed()) return cmd_decode(checkpoint, vocab_path, wavs);
        if (analyze->parsed()) return cmd_analyze(preset, config_path, seed);
        if (gradcheck->parsed()) return cmd_gradcheck(seed);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
