#pragma once

#include <string>
#include <utility>
#include <vector>

#include "pyramid/tensor.hpp"

namespace pyramid {

using NamedParams = std::vector<std::pair<std::string, TensorPtr>>;
struct BatchNormState;
using NamedBnStates = std::vector<std::pair<std::string, BatchNormState*>>;

// Layernorm -> pointwise conv (xE) -> GLU -> depthwise conv -> BatchNorm ->
// swish -> dropout -> residual. When the expansion factor is not 2 the
// post-GLU width differs from d_model and a pointwise projection restores it.
struct ConvBlockParams {
    TensorPtr ln_gamma, ln_beta;
    TensorPtr pw_w, pw_b;      // [1 x d x e*d]
    TensorPtr dw_w;            // [k_dw x e*d/2]
    TensorPtr bn_gamma, bn_beta;
    BatchNormState bn_state;
    TensorPtr proj_w, proj_b;  // only when e != 2: [1 x e*d/2 x d]
    int d_model = 0;
    int expansion = 2;
    int k_dw = 15;

    void collect(const std::string& prefix, NamedParams& out);
    void collect_bn(const std::string& prefix, NamedBnStates& out);
};

ConvBlockParams make_conv_block(int d_model, int expansion, RandomSource& rng, int k_dw = 15);
TensorPtr conv_block_forward(const TensorPtr& x, ConvBlockParams& p, double p_drop, Mode mode, RandomSource& rng);

// Pre-norm residual multi-head self-attention with 1/sqrt(d_k) scaling.
struct MhsaParams {
    TensorPtr ln_gamma, ln_beta;
    TensorPtr wq, wk, wv;  // [width x width], head h owns columns [h*dh, (h+1)*dh)
    TensorPtr wo;          // [width x width]
    int width = 0;
    int heads = 0;

    void collect(const std::string& prefix, NamedParams& out);
};

MhsaParams make_mhsa(int width, int heads, RandomSource& rng);
// valid_len masks key positions >= valid_len (0 = no mask); attn_out, when
// given, receives the per-head attention weight matrices.
TensorPtr mhsa_forward(const TensorPtr& x, const MhsaParams& p, int valid_len, double p_drop, Mode mode,
                       RandomSource& rng, std::vector<TensorPtr>* attn_out = nullptr);

// Dilated conv (kernel 3, rate l) feeding MHSA.
struct DcnnAttentionParams {
    TensorPtr conv_w, conv_b;  // [3 x d_in x d_out]
    MhsaParams mhsa;
    int d_in = 0;
    int d_out = 0;
    int dilation = 1;

    void collect(const std::string& prefix, NamedParams& out);
};

DcnnAttentionParams make_dcnn_attention(int d_in, int d_out, int dilation, int heads, RandomSource& rng);
struct DcnnAttentionOut {
    TensorPtr pre_attention;  // after the dilated conv
    TensorPtr out;
};
DcnnAttentionOut dcnn_attention_forward(const TensorPtr& x, const DcnnAttentionParams& p, int valid_len,
                                        double p_drop, Mode mode, RandomSource& rng, bool bypass_attention = false);

// Concat -> LayerNorm -> Linear(2d->d) -> BatchNorm -> Dropout.
struct DualFusionParams {
    TensorPtr ln_gamma, ln_beta;  // over 2d
    TensorPtr lin_w, lin_b;       // [2d x d]
    TensorPtr bn_gamma, bn_beta;
    BatchNormState bn_state;
    int width = 0;

    void collect(const std::string& prefix, NamedParams& out);
    void collect_bn(const std::string& prefix, NamedBnStates& out);
};

DualFusionParams make_dual_fusion(int width, RandomSource& rng);
TensorPtr dual_fusion_forward(const TensorPtr& a, const TensorPtr& b, DualFusionParams& p, double p_drop,
                              Mode mode, RandomSource& rng);

// Squeeze (time mean) and excitation gates in (0,1), broadcast over time.
struct SENetParams {
    TensorPtr w1, b1;  // [C x C/R]
    TensorPtr w2, b2;  // [C/R x C]
    int channels = 0;
    int reduction = 8;

    void collect(const std::string& prefix, NamedParams& out);
};

SENetParams make_senet(int channels, int reduction, RandomSource& rng);
TensorPtr senet_forward(const TensorPtr& x, const SENetParams& p, int valid_len = 0,
                        TensorPtr* gates_out = nullptr);

// LayerNorm(x + Linear2(Dropout(Relu(Linear1(x))))), hidden width 4d.
struct FfmParams {
    TensorPtr ln_gamma, ln_beta;
    TensorPtr w1, b1;  // [d x 4d]
    TensorPtr w2, b2;  // [4d x d]
    int width = 0;

    void collect(const std::string& prefix, NamedParams& out);
};

FfmParams make_ffm(int width, RandomSource& rng);
TensorPtr ffm_forward(const TensorPtr& x, const FfmParams& p, double p_drop, Mode mode, RandomSource& rng);

// Glorot-style limit for a [fan_in x fan_out] map.
double init_limit(int fan_in, int fan_out);

}  // namespace pyramid
