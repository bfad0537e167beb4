#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pyramid/blocks.hpp"
#include "pyramid/frontend.hpp"
#include "pyramid/tensor.hpp"

namespace pyramid {

// n_layers layers halve the branch count until one remains, so
// n_branches must equal 2^(n_layers-1).
struct ModelConfig {
    int d_model = 256;
    int n_layers = 3;
    int n_branches = 4;
    // dilation_schedule[i] lists the rates of layer i's branches. Layer 0 is
    // required; deeper layers default to the first half of the previous
    // layer's sorted rates.
    std::vector<std::vector<int>> dilation_schedule;
    int heads = 4;
    int conv_blocks = 8;
    std::vector<int> expansion_factors;  // per conv block; empty -> all 2
    int vocab_size = 1305;
    int se_reduction = 8;
    double dropout = 0.1;
    int last_layer_width = 0;  // 0 -> 2*d_model
    int n_mels = 80;
};

// Fills defaults (deep dilation layers, expansion factors, last_layer_width)
// and validates every structural invariant; throws on violation.
void resolve_config(ModelConfig& cfg);

ModelConfig preset_config(const std::string& name);  // "S", "M" or "L"

// Flat `key = value` text; lists comma-separated, dilation_schedule layers
// separated by ';'. Unknown keys are an error.
ModelConfig parse_model_config(const std::string& text);
ModelConfig read_model_config(const std::string& path);
std::string config_to_text(const ModelConfig& cfg);

struct PyramidModel {
    ModelConfig cfg;
    ConvSubsamplerParams frontend;
    std::vector<ConvBlockParams> conv_blocks;
    std::vector<std::vector<DcnnAttentionParams>> layers;  // layers[i]: m/2^i branches
    std::vector<std::vector<DualFusionParams>> fusions;    // fusions[i] feeds layers[i+1]
    SENetParams senet;
    FfmParams ffm;
    TensorPtr final_bn_gamma, final_bn_beta;
    BatchNormState final_bn_state;
    TensorPtr cls_w, cls_b;

    int module_count() const;  // DCNN-Attention modules, 2^n - 1
    int fusion_count() const;  // 2^(n-1) - 1

    NamedParams parameters();
    NamedBnStates bn_states();
};

PyramidModel build(const ModelConfig& cfg, RandomSource& rng);

// features [T x n_mels] -> per-frame log-probabilities [T' x vocab_size].
TensorPtr model_forward(PyramidModel& m, const TensorPtr& features, Mode mode, RandomSource& drop_rng);

struct ParamCount {
    std::vector<std::pair<std::string, long long>> components;
    long long total = 0;
};
ParamCount count_params(PyramidModel& m);

// Analytic convolutional receptive field of a module's pre-attention output,
// in subsampled frames: 1 + 14 per conv block + 2*rate per dilated conv on
// the widest path from the input. Attention is excluded (global by design).
int receptive_field(const ModelConfig& cfg, int layer, int branch);

// Perturbation probe: runs the conv path (attention bypassed, infer mode) on
// a seeded random sequence of t_len frames, perturbs row probe_pos, and
// returns the span of changed pre-attention rows for the given module.
int measure_receptive_field(PyramidModel& m, int layer, int branch, int probe_pos, int t_len);
// Same probe for every first-layer branch in one pair of passes.
std::vector<int> measure_first_layer_receptive_fields(PyramidModel& m, int probe_pos, int t_len);

}  // namespace pyramid
