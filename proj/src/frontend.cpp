#include "pyramid/frontend.hpp"

#include <cmath>
#include <stdexcept>

namespace pyramid {

TensorPtr positional_encoding(int length, int d_model) {
    if (d_model % 2 != 0) {
        throw std::runtime_error("positional_encoding: d_model must be even, got " + std::to_string(d_model));
    }
    if (length < 1) throw std::runtime_error("positional_encoding: length must be positive");
    std::vector<double> d(static_cast<std::size_t>(length) * d_model);
    for (int pos = 0; pos < length; ++pos) {
        for (int i = 0; i < d_model / 2; ++i) {
            const double div = std::pow(10000.0, 2.0 * i / d_model);
            d[static_cast<std::size_t>(pos) * d_model + 2 * i] = std::sin(pos / div);
            d[static_cast<std::size_t>(pos) * d_model + 2 * i + 1] = std::cos(pos / div);
        }
    }
    return make_tensor({length, d_model}, std::move(d));
}

ConvSubsamplerParams make_conv_subsampler(int n_mels, int d_model, RandomSource& rng) {
    ConvSubsamplerParams p;
    p.n_mels = n_mels;
    p.d_model = d_model;
    const double lim1 = std::sqrt(6.0 / (3.0 * n_mels + d_model));
    const double lim2 = std::sqrt(6.0 / (3.0 * d_model + d_model));
    p.w1 = uniform_init({3, n_mels, d_model}, rng, -lim1, lim1);
    p.b1 = zeros({d_model}, true);
    p.w2 = uniform_init({3, d_model, d_model}, rng, -lim2, lim2);
    p.b2 = zeros({d_model}, true);
    return p;
}

int subsampled_len(int t) {
    if (t < 4) throw std::runtime_error("subsampled_len: need at least 4 frames, got " + std::to_string(t));
    return ((t + 1) / 2 + 1) / 2;
}

TensorPtr conv_subsample(const TensorPtr& features, const ConvSubsamplerParams& p) {
    if (features->ndim() != 2 || features->cols() != p.n_mels) {
        throw std::runtime_error("conv_subsample: input " + shape_str(features->shape) + " does not match n_mels " +
                                 std::to_string(p.n_mels));
    }
    if (features->rows() < 4) {
        throw std::runtime_error("conv_subsample: need at least 4 frames, got " + std::to_string(features->rows()));
    }
    auto h = relu(bias_add(conv1d(features, p.w1, 1, ConvMode::full, 2), p.b1));
    return relu(bias_add(conv1d(h, p.w2, 1, ConvMode::full, 2), p.b2));
}

TensorPtr embed(const TensorPtr& features, const ConvSubsamplerParams& p, double p_drop, Mode mode,
                RandomSource& rng) {
    auto cs = conv_subsample(features, p);
    auto pe = positional_encoding(cs->rows(), p.d_model);
    return dropout(add(cs, pe), p_drop, mode, rng);
}

}  // namespace pyramid
