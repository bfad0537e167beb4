#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pyramid/tensor.hpp"

namespace pyramid {

struct Waveform {
    std::vector<double> samples;  // in [-1, 1]
    int sample_rate = 16000;
};

// T x n_mels log-mel energies, 25 ms window / 10 ms hop.
struct FeatureMatrix {
    int frames = 0;
    int n_mels = 0;
    std::vector<double> data;  // row-major

    double at(int t, int m) const { return data[static_cast<std::size_t>(t) * n_mels + m]; }
    TensorPtr to_tensor() const { return make_tensor({frames, n_mels}, data); }
};

// RIFF/WAVE, PCM format 1, 16-bit little-endian, mono. Parse errors carry
// the byte offset of the offending field.
Waveform read_wav(const std::vector<std::uint8_t>& bytes);
Waveform read_wav_file(const std::string& path);
std::vector<std::uint8_t> write_wav(const Waveform& w);
void write_wav_file(const std::string& path, const Waveform& w);

struct FilterbankOptions {
    int n_mels = 80;
    int win_ms = 25;
    int hop_ms = 10;
    int n_fft = 512;
    bool normalize = true;  // per-utterance, per-feature mean/variance
};

FeatureMatrix log_mel_filterbank(const Waveform& w, const FilterbankOptions& opts = {});

int filterbank_frame_count(int n_samples, int sample_rate, const FilterbankOptions& opts = {});

// HTK mel scale
double hz_to_mel(double hz);
double mel_to_hz(double mel);

// In-place radix-2 FFT over interleaved complex data; n must be a power of two.
void fft_radix2(std::vector<double>& re, std::vector<double>& im);

// Feature cache file: magic "PYRF", u32 version=1, u32 T, u32 n_mels,
// then T*n_mels little-endian 32-bit floats, row-major.
void write_feature_cache(const std::string& path, const FeatureMatrix& f);
FeatureMatrix read_feature_cache(const std::string& path);

}  // namespace pyramid
