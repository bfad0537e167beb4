#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pyramid/ctc.hpp"
#include "pyramid/model.hpp"

namespace pyramid {

struct AdamState {
    double beta1 = 0.9, beta2 = 0.98, eps = 1e-6;
    long long step = 0;     // completed updates
    long long skipped = 0;  // non-finite gradient batches
    std::vector<std::vector<double>> m, v;  // parallel to the parameter list

    void init(const std::vector<TensorPtr>& params);
};

// One optimizer update over all params from their accumulated grads:
// global-norm clip, bias-corrected Adam, then parameters and moments are
// rounded through float so 32-bit checkpoints round-trip bitwise. A
// non-finite gradient skips the update and bumps the skip counter.
void adam_step(const std::vector<TensorPtr>& params, AdamState& state, double lr, double clip_norm = 5.0);

enum class LrFormula { standard, paper };

struct Schedule {
    int d_model = 256;
    long long total_steps = 0;
    long long warmup_steps = 0;  // 0 -> 0.1 * total_steps
    double scale = 1.0;          // peak multiplier, standard mode only
    LrFormula formula = LrFormula::standard;
};

// standard: scale * d^-1/2 * min(step^-1/2, step * warmup^-3/2)
// paper:    sqrt(d) * min(sqrt(step), warmup^-3/2), kept for comparison runs
double lr_at(long long step, const Schedule& s);

// ---- synthetic corpus ----

// Fundamental of a token's phone; injective over token ids.
double token_frequency(int token_id);

// Each token is a fixed 0.2 s sine mixture with a token-specific fundamental;
// utterances concatenate token phones plus seeded noise at 20 dB SNR.
// Writes dir/utt_NNNN.wav, dir/manifest.csv (wav_path,transcript) and
// dir/vocab.txt; deterministic per seed.
void synth_corpus(const std::string& dir, std::uint64_t seed, int n_utts, int vocab_size, int max_label_len);

struct Sample {
    TensorPtr feats;  // [frames x n_mels]
    LabelSeq labels;
};

// Reads dir/manifest.csv + dir/vocab.txt and extracts filterbank features.
std::vector<Sample> load_corpus(const std::string& dir, std::vector<std::string>* vocab_out = nullptr);

// Aggregate corpus CER: total edit distance over total reference length.
double corpus_cer(PyramidModel& m, const std::vector<Sample>& samples);

// ---- training loop ----

struct TrainOptions {
    int epochs = 1;
    int batch_size = 32;
    Schedule sched;
    double clip_norm = 5.0;
    double heldout_frac = 0.01;   // tail of the corpus held out for epoch CER
    long long max_steps = 0;      // 0 = no cap
    std::string metrics_csv;      // optional `step,lr,loss,cer` log (appended)
};

struct StepRecord {
    long long step = 0;
    double lr = 0;
    double loss = 0;
    double cer = -1;  // epoch-end held-out CER, -1 when not evaluated
};

struct TrainResult {
    std::vector<StepRecord> history;
    long long skipped_utterances = 0;  // too short for their labels
};

// Batches are processed as independent full-length sequences sharing
// parameters; the batch loss is the mean per-utterance CTC loss.
TrainResult train(PyramidModel& m, const std::vector<Sample>& corpus, AdamState& adam,
                  RandomSource& trainer_rng, const TrainOptions& opt);

// ---- checkpoints ----

struct Checkpoint {
    ModelConfig cfg;
    PyramidModel model;
    AdamState adam;
    std::uint64_t trainer_rng = 0;
    long long step = 0;
};

void save_checkpoint(const std::string& path, PyramidModel& m, const AdamState& adam,
                     std::uint64_t trainer_rng, long long step);
Checkpoint load_checkpoint(const std::string& path);

std::uint32_t crc32(const std::uint8_t* data, std::size_t len);

}  // namespace pyramid
