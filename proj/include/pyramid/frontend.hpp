#pragma once

#include "pyramid/audio.hpp"
#include "pyramid/tensor.hpp"

namespace pyramid {

// Sinusoidal positional encoding; values in [-1, 1], d_model must be even.
TensorPtr positional_encoding(int length, int d_model);

// Two stacked kernel-3 stride-2 convolutions with relu, 4x time reduction.
struct ConvSubsamplerParams {
    TensorPtr w1, b1;  // n_mels -> d_model
    TensorPtr w2, b2;  // d_model -> d_model
    int n_mels = 0;
    int d_model = 0;
};

ConvSubsamplerParams make_conv_subsampler(int n_mels, int d_model, RandomSource& rng);

int subsampled_len(int t);  // ceil(ceil(t/2)/2), requires t >= 4

TensorPtr conv_subsample(const TensorPtr& features, const ConvSubsamplerParams& p);

// CS(x) + P(x), then dropout in train mode.
TensorPtr embed(const TensorPtr& features, const ConvSubsamplerParams& p, double p_drop, Mode mode,
                RandomSource& rng);

}  // namespace pyramid
