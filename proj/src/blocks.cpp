#include "pyramid/blocks.hpp"

#include <cmath>
#include <stdexcept>

namespace pyramid {

double init_limit(int fan_in, int fan_out) { return std::sqrt(6.0 / (fan_in + fan_out)); }

// ---- ConvBlock ----

ConvBlockParams make_conv_block(int d_model, int expansion, RandomSource& rng, int k_dw) {
    if ((expansion * d_model) % 2 != 0) {
        throw std::runtime_error("conv_block: expansion*d_model must be even, got " +
                                 std::to_string(expansion * d_model));
    }
    ConvBlockParams p;
    p.d_model = d_model;
    p.expansion = expansion;
    p.k_dw = k_dw;
    const int wide = expansion * d_model;
    const int inner = wide / 2;  // post-GLU width
    p.ln_gamma = full({d_model}, 1.0, true);
    p.ln_beta = zeros({d_model}, true);
    const double lim_pw = init_limit(d_model, wide);
    p.pw_w = uniform_init({1, d_model, wide}, rng, -lim_pw, lim_pw);
    p.pw_b = zeros({wide}, true);
    const double lim_dw = init_limit(k_dw, k_dw);
    p.dw_w = uniform_init({k_dw, inner}, rng, -lim_dw, lim_dw);
    p.bn_gamma = full({inner}, 1.0, true);
    p.bn_beta = zeros({inner}, true);
    if (inner != d_model) {
        const double lim_pr = init_limit(inner, d_model);
        p.proj_w = uniform_init({1, inner, d_model}, rng, -lim_pr, lim_pr);
        p.proj_b = zeros({d_model}, true);
    }
    return p;
}

TensorPtr conv_block_forward(const TensorPtr& x, ConvBlockParams& p, double p_drop, Mode mode, RandomSource& rng) {
    if (x->ndim() != 2 || x->cols() != p.d_model) {
        throw std::runtime_error("conv_block: input " + shape_str(x->shape) + " does not match d_model " +
                                 std::to_string(p.d_model));
    }
    auto h = layer_norm(x, p.ln_gamma, p.ln_beta);
    h = bias_add(conv1d(h, p.pw_w, 1, ConvMode::pointwise), p.pw_b);
    h = glu(h);
    h = conv1d(h, p.dw_w, 1, ConvMode::depthwise);
    h = batch_norm(h, p.bn_gamma, p.bn_beta, p.bn_state, mode);
    h = swish(h);
    if (p.proj_w) h = bias_add(conv1d(h, p.proj_w, 1, ConvMode::pointwise), p.proj_b);
    h = dropout(h, p_drop, mode, rng);
    return add(h, x);
}

void ConvBlockParams::collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".ln.gamma", ln_gamma);
    out.emplace_back(prefix + ".ln.beta", ln_beta);
    out.emplace_back(prefix + ".pw.w", pw_w);
    out.emplace_back(prefix + ".pw.b", pw_b);
    out.emplace_back(prefix + ".dw.w", dw_w);
    out.emplace_back(prefix + ".bn.gamma", bn_gamma);
    out.emplace_back(prefix + ".bn.beta", bn_beta);
    if (proj_w) {
        out.emplace_back(prefix + ".proj.w", proj_w);
        out.emplace_back(prefix + ".proj.b", proj_b);
    }
}

void ConvBlockParams::collect_bn(const std::string& prefix, NamedBnStates& out) {
    out.emplace_back(prefix + ".bn", &bn_state);
}

// ---- MHSA ----

MhsaParams make_mhsa(int width, int heads, RandomSource& rng) {
    if (heads < 1 || width % heads != 0) {
        throw std::runtime_error("mhsa: heads " + std::to_string(heads) + " must divide width " +
                                 std::to_string(width));
    }
    MhsaParams p;
    p.width = width;
    p.heads = heads;
    p.ln_gamma = full({width}, 1.0, true);
    p.ln_beta = zeros({width}, true);
    const double lim = init_limit(width, width);
    p.wq = uniform_init({width, width}, rng, -lim, lim);
    p.wk = uniform_init({width, width}, rng, -lim, lim);
    p.wv = uniform_init({width, width}, rng, -lim, lim);
    p.wo = uniform_init({width, width}, rng, -lim, lim);
    return p;
}

TensorPtr mhsa_forward(const TensorPtr& x, const MhsaParams& p, int valid_len, double p_drop, Mode mode,
                       RandomSource& rng, std::vector<TensorPtr>* attn_out) {
    if (x->ndim() != 2 || x->cols() != p.width) {
        throw std::runtime_error("mhsa: input " + shape_str(x->shape) + " does not match width " +
                                 std::to_string(p.width));
    }
    if (valid_len > x->rows()) {
        throw std::runtime_error("mhsa: valid_len " + std::to_string(valid_len) + " exceeds T=" +
                                 std::to_string(x->rows()));
    }
    const int dh = p.width / p.heads;
    auto h = layer_norm(x, p.ln_gamma, p.ln_beta);
    auto q = matmul(h, p.wq);
    auto k = matmul(h, p.wk);
    auto v = matmul(h, p.wv);
    std::vector<TensorPtr> head_outs;
    head_outs.reserve(static_cast<std::size_t>(p.heads));
    for (int i = 0; i < p.heads; ++i) {
        auto qi = slice_cols(q, i * dh, dh);
        auto ki = slice_cols(k, i * dh, dh);
        auto vi = slice_cols(v, i * dh, dh);
        auto scores = scale(matmul_nt(qi, ki), 1.0 / std::sqrt(static_cast<double>(dh)));
        scores = mask_keys(scores, valid_len);
        auto attn = softmax(scores, 1);
        if (attn_out) attn_out->push_back(attn);
        head_outs.push_back(matmul(attn, vi));
    }
    auto con = matmul(p.heads > 1 ? concat(head_outs, 1) : head_outs[0], p.wo);
    return add(dropout(con, p_drop, mode, rng), x);
}

void MhsaParams::collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".ln.gamma", ln_gamma);
    out.emplace_back(prefix + ".ln.beta", ln_beta);
    out.emplace_back(prefix + ".wq", wq);
    out.emplace_back(prefix + ".wk", wk);
    out.emplace_back(prefix + ".wv", wv);
    out.emplace_back(prefix + ".wo", wo);
}

// ---- DCNN-Attention ----

DcnnAttentionParams make_dcnn_attention(int d_in, int d_out, int dilation, int heads, RandomSource& rng) {
    if (dilation < 1) throw std::runtime_error("dcnn_attention: dilation must be positive");
    DcnnAttentionParams p;
    p.d_in = d_in;
    p.d_out = d_out;
    p.dilation = dilation;
    const double lim = init_limit(3 * d_in, 3 * d_out);
    p.conv_w = uniform_init({3, d_in, d_out}, rng, -lim, lim);
    p.conv_b = zeros({d_out}, true);
    p.mhsa = make_mhsa(d_out, heads, rng);
    return p;
}

DcnnAttentionOut dcnn_attention_forward(const TensorPtr& x, const DcnnAttentionParams& p, int valid_len,
                                        double p_drop, Mode mode, RandomSource& rng, bool bypass_attention) {
    if (x->ndim() != 2 || x->cols() != p.d_in) {
        throw std::runtime_error("dcnn_attention: input " + shape_str(x->shape) + " does not match d_in " +
                                 std::to_string(p.d_in));
    }
    DcnnAttentionOut o;
    o.pre_attention = bias_add(conv1d(x, p.conv_w, p.dilation, ConvMode::full), p.conv_b);
    o.out = bypass_attention ? o.pre_attention
                             : mhsa_forward(o.pre_attention, p.mhsa, valid_len, p_drop, mode, rng);
    return o;
}

void DcnnAttentionParams::collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".conv.w", conv_w);
    out.emplace_back(prefix + ".conv.b", conv_b);
    mhsa.collect(prefix + ".mhsa", out);
}

// ---- DualFusionNet ----

DualFusionParams make_dual_fusion(int width, RandomSource& rng) {
    DualFusionParams p;
    p.width = width;
    p.ln_gamma = full({2 * width}, 1.0, true);
    p.ln_beta = zeros({2 * width}, true);
    const double lim = init_limit(2 * width, width);
    p.lin_w = uniform_init({2 * width, width}, rng, -lim, lim);
    p.lin_b = zeros({width}, true);
    p.bn_gamma = full({width}, 1.0, true);
    p.bn_beta = zeros({width}, true);
    return p;
}

TensorPtr dual_fusion_forward(const TensorPtr& a, const TensorPtr& b, DualFusionParams& p, double p_drop,
                              Mode mode, RandomSource& rng) {
    if (a->shape != b->shape) {
        throw std::runtime_error("dual_fusion: branch shapes differ, " + shape_str(a->shape) + " vs " +
                                 shape_str(b->shape));
    }
    if (a->cols() != p.width) {
        throw std::runtime_error("dual_fusion: input width " + std::to_string(a->cols()) + " does not match " +
                                 std::to_string(p.width));
    }
    auto h = concat({a, b}, 1);
    h = layer_norm(h, p.ln_gamma, p.ln_beta);
    h = linear(h, p.lin_w, p.lin_b);
    h = batch_norm(h, p.bn_gamma, p.bn_beta, p.bn_state, mode);
    return dropout(h, p_drop, mode, rng);
}

void DualFusionParams::collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".ln.gamma", ln_gamma);
    out.emplace_back(prefix + ".ln.beta", ln_beta);
    out.emplace_back(prefix + ".lin.w", lin_w);
    out.emplace_back(prefix + ".lin.b", lin_b);
    out.emplace_back(prefix + ".bn.gamma", bn_gamma);
    out.emplace_back(prefix + ".bn.beta", bn_beta);
}

void DualFusionParams::collect_bn(const std::string& prefix, NamedBnStates& out) {
    out.emplace_back(prefix + ".bn", &bn_state);
}

// ---- SENet ----

SENetParams make_senet(int channels, int reduction, RandomSource& rng) {
    if (reduction < 1 || channels % reduction != 0) {
        throw std::runtime_error("senet: reduction " + std::to_string(reduction) + " must divide channels " +
                                 std::to_string(channels));
    }
    SENetParams p;
    p.channels = channels;
    p.reduction = reduction;
    const int bottleneck = channels / reduction;
    const double lim1 = init_limit(channels, bottleneck);
    const double lim2 = init_limit(bottleneck, channels);
    p.w1 = uniform_init({channels, bottleneck}, rng, -lim1, lim1);
    p.b1 = zeros({bottleneck}, true);
    p.w2 = uniform_init({bottleneck, channels}, rng, -lim2, lim2);
    p.b2 = zeros({channels}, true);
    return p;
}

TensorPtr senet_forward(const TensorPtr& x, const SENetParams& p, int valid_len, TensorPtr* gates_out) {
    if (x->ndim() != 2 || x->cols() != p.channels) {
        throw std::runtime_error("senet: input " + shape_str(x->shape) + " does not match channels " +
                                 std::to_string(p.channels));
    }
    auto squeeze = mean_over_time(x, valid_len);
    auto gates = sigmoid(linear(swish(linear(squeeze, p.w1, p.b1)), p.w2, p.b2));
    if (gates_out) *gates_out = gates;
    return scale_channels(x, gates);
}

void SENetParams::collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2);
    out.emplace_back(prefix + ".b2", b2);
}

// ---- Feed Forward module ----

FfmParams make_ffm(int width, RandomSource& rng) {
    FfmParams p;
    p.width = width;
    p.ln_gamma = full({width}, 1.0, true);
    p.ln_beta = zeros({width}, true);
    const double lim1 = init_limit(width, 4 * width);
    const double lim2 = init_limit(4 * width, width);
    p.w1 = uniform_init({width, 4 * width}, rng, -lim1, lim1);
    p.b1 = zeros({4 * width}, true);
    p.w2 = uniform_init({4 * width, width}, rng, -lim2, lim2);
    p.b2 = zeros({width}, true);
    return p;
}

TensorPtr ffm_forward(const TensorPtr& x, const FfmParams& p, double p_drop, Mode mode, RandomSource& rng) {
    if (x->ndim() != 2 || x->cols() != p.width) {
        throw std::runtime_error("ffm: input " + shape_str(x->shape) + " does not match width " +
                                 std::to_string(p.width));
    }
    auto h = dropout(relu(linear(x, p.w1, p.b1)), p_drop, mode, rng);
    h = linear(h, p.w2, p.b2);
    return layer_norm(add(x, h), p.ln_gamma, p.ln_beta);
}

void FfmParams::collect(const std::string& prefix, NamedParams& out) {
    out.emplace_back(prefix + ".ln.gamma", ln_gamma);
    out.emplace_back(prefix + ".ln.beta", ln_beta);
    out.emplace_back(prefix + ".w1", w1);
    out.emplace_back(prefix + ".b1", b1);
    out.emplace_back(prefix + ".w2", w2);
    out.emplace_back(prefix + ".b2", b2);
}

}  // namespace pyramid
