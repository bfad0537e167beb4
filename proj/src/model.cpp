#include "pyramid/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace pyramid {

// ---- config ----

void resolve_config(ModelConfig& cfg) {
    if (cfg.d_model <= 0 || cfg.d_model % 2 != 0) {
        throw std::runtime_error("config: d_model must be a positive even number, got " +
                                 std::to_string(cfg.d_model));
    }
    if (cfg.n_layers < 1) throw std::runtime_error("config: n_layers must be >= 1");
    const int expect_m = 1 << (cfg.n_layers - 1);
    if (cfg.n_branches != expect_m) {
        throw std::runtime_error("config: pyramid law violated: n_branches must equal 2^(n_layers-1) = " +
                                 std::to_string(expect_m) + ", got " + std::to_string(cfg.n_branches));
    }
    if (cfg.last_layer_width == 0) cfg.last_layer_width = 2 * cfg.d_model;
    if (cfg.heads < 1 || cfg.d_model % cfg.heads != 0 || cfg.last_layer_width % cfg.heads != 0) {
        throw std::runtime_error("config: heads must divide d_model and last_layer_width");
    }
    if (cfg.conv_blocks < 0) throw std::runtime_error("config: conv_blocks must be >= 0");
    if (cfg.expansion_factors.empty()) {
        cfg.expansion_factors.assign(static_cast<std::size_t>(cfg.conv_blocks), 2);
    }
    if (static_cast<int>(cfg.expansion_factors.size()) != cfg.conv_blocks) {
        throw std::runtime_error("config: expansion_factors must list one factor per conv block");
    }
    for (int e : cfg.expansion_factors) {
        if (e < 1) throw std::runtime_error("config: expansion factors must be >= 1");
    }
    if (cfg.dilation_schedule.empty()) {
        throw std::runtime_error("config: dilation_schedule must give the first layer's rates");
    }
    for (int i = static_cast<int>(cfg.dilation_schedule.size()); i < cfg.n_layers; ++i) {
        auto prev = cfg.dilation_schedule.back();
        std::sort(prev.begin(), prev.end());
        prev.resize(prev.size() / 2);
        cfg.dilation_schedule.push_back(prev);
    }
    if (static_cast<int>(cfg.dilation_schedule.size()) != cfg.n_layers) {
        throw std::runtime_error("config: dilation_schedule has more layers than n_layers");
    }
    for (int i = 0; i < cfg.n_layers; ++i) {
        const int want = cfg.n_branches >> i;
        const auto& rates = cfg.dilation_schedule[static_cast<std::size_t>(i)];
        if (static_cast<int>(rates.size()) != want) {
            throw std::runtime_error("config: layer " + std::to_string(i) + " needs " + std::to_string(want) +
                                     " dilation rates, got " + std::to_string(rates.size()));
        }
        for (int r : rates) {
            if (r < 1) throw std::runtime_error("config: dilation rates must be >= 1");
        }
    }
    if (cfg.vocab_size < 2) throw std::runtime_error("config: vocab_size must be >= 2 (blank + symbols)");
    if (cfg.se_reduction < 1 || cfg.last_layer_width % cfg.se_reduction != 0) {
        throw std::runtime_error("config: se_reduction must divide last_layer_width");
    }
    if (cfg.dropout < 0.0 || cfg.dropout >= 1.0) throw std::runtime_error("config: dropout must be in [0,1)");
    if (cfg.n_mels < 1) throw std::runtime_error("config: n_mels must be >= 1");
}

ModelConfig preset_config(const std::string& name) {
    ModelConfig cfg;
    if (name == "S") {
        cfg.n_layers = 3;
        cfg.n_branches = 4;
        cfg.dilation_schedule = {{1, 2, 4, 8}};
        cfg.heads = 4;
    } else if (name == "M") {
        cfg.n_layers = 4;
        cfg.n_branches = 8;
        cfg.dilation_schedule = {{1, 2, 4, 6, 8, 10, 12, 14}};
        cfg.heads = 4;
    } else if (name == "L") {
        cfg.n_layers = 5;
        cfg.n_branches = 16;
        cfg.dilation_schedule = {{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16}};
        cfg.heads = 8;
        cfg.expansion_factors = {1, 2, 2, 4, 4, 2, 2, 1};
    } else {
        throw std::runtime_error("unknown preset '" + name + "' (expected S, M or L)");
    }
    return cfg;
}

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r\n");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r\n");
    return s.substr(a, b - a + 1);
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const int n = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw std::runtime_error("config: bad integer for " + key + ": '" + v + "'");
    }
}

double parse_real(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw std::runtime_error("config: bad number for " + key + ": '" + v + "'");
    }
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(parse_int(key, trim(item)));
    return out;
}

}  // namespace

ModelConfig parse_model_config(const std::string& text) {
    ModelConfig cfg;
    cfg.dilation_schedule.clear();
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::runtime_error("config line " + std::to_string(line_no) + ": expected key = value");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string val = trim(line.substr(eq + 1));
        if (key == "d_model") cfg.d_model = parse_int(key, val);
        else if (key == "n_layers") cfg.n_layers = parse_int(key, val);
        else if (key == "n_branches") cfg.n_branches = parse_int(key, val);
        else if (key == "heads") cfg.heads = parse_int(key, val);
        else if (key == "conv_blocks") cfg.conv_blocks = parse_int(key, val);
        else if (key == "vocab_size") cfg.vocab_size = parse_int(key, val);
        else if (key == "se_reduction") cfg.se_reduction = parse_int(key, val);
        else if (key == "last_layer_width") cfg.last_layer_width = parse_int(key, val);
        else if (key == "n_mels") cfg.n_mels = parse_int(key, val);
        else if (key == "dropout") cfg.dropout = parse_real(key, val);
        else if (key == "expansion_factors") cfg.expansion_factors = parse_int_list(key, val);
        else if (key == "dilation_schedule") {
            std::stringstream layers_ss(val);
            std::string layer;
            while (std::getline(layers_ss, layer, ';')) {
                cfg.dilation_schedule.push_back(parse_int_list(key, trim(layer)));
            }
        } else {
            throw std::runtime_error("config line " + std::to_string(line_no) + ": unknown key '" + key + "'");
        }
    }
    return cfg;
}

ModelConfig read_model_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_model_config(buf.str());
}

std::string config_to_text(const ModelConfig& cfg) {
    std::ostringstream out;
    out << "d_model = " << cfg.d_model << "\n";
    out << "n_layers = " << cfg.n_layers << "\n";
    out << "n_branches = " << cfg.n_branches << "\n";
    out << "dilation_schedule = ";
    for (std::size_t i = 0; i < cfg.dilation_schedule.size(); ++i) {
        if (i) out << "; ";
        const auto& rates = cfg.dilation_schedule[i];
        for (std::size_t j = 0; j < rates.size(); ++j) {
            if (j) out << ",";
            out << rates[j];
        }
    }
    out << "\n";
    out << "heads = " << cfg.heads << "\n";
    out << "conv_blocks = " << cfg.conv_blocks << "\n";
    out << "expansion_factors = ";
    for (std::size_t i = 0; i < cfg.expansion_factors.size(); ++i) {
        if (i) out << ",";
        out << cfg.expansion_factors[i];
    }
    out << "\n";
    out << "vocab_size = " << cfg.vocab_size << "\n";
    out << "se_reduction = " << cfg.se_reduction << "\n";
    out << "dropout = " << cfg.dropout << "\n";
    out << "last_layer_width = " << cfg.last_layer_width << "\n";
    out << "n_mels = " << cfg.n_mels << "\n";
    return out.str();
}

// ---- build ----

int PyramidModel::module_count() const {
    int n = 0;
    for (const auto& layer : layers) n += static_cast<int>(layer.size());
    return n;
}

int PyramidModel::fusion_count() const {
    int n = 0;
    for (const auto& f : fusions) n += static_cast<int>(f.size());
    return n;
}

PyramidModel build(const ModelConfig& cfg_in, RandomSource& rng) {
    ModelConfig cfg = cfg_in;
    resolve_config(cfg);

    PyramidModel m;
    m.cfg = cfg;
    m.frontend = make_conv_subsampler(cfg.n_mels, cfg.d_model, rng);
    m.conv_blocks.reserve(static_cast<std::size_t>(cfg.conv_blocks));
    for (int i = 0; i < cfg.conv_blocks; ++i) {
        m.conv_blocks.push_back(make_conv_block(cfg.d_model, cfg.expansion_factors[static_cast<std::size_t>(i)], rng));
    }

    m.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    m.fusions.resize(static_cast<std::size_t>(cfg.n_layers > 0 ? cfg.n_layers - 1 : 0));
    for (int i = 0; i < cfg.n_layers; ++i) {
        const int branches = cfg.n_branches >> i;
        const bool last = (i == cfg.n_layers - 1);
        const int d_out = last ? cfg.last_layer_width : cfg.d_model;
        if (i > 0) {
            for (int j = 0; j < branches; ++j) {
                m.fusions[static_cast<std::size_t>(i - 1)].push_back(make_dual_fusion(cfg.d_model, rng));
            }
        }
        for (int j = 0; j < branches; ++j) {
            const int rate = cfg.dilation_schedule[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            m.layers[static_cast<std::size_t>(i)].push_back(
                make_dcnn_attention(cfg.d_model, d_out, rate, cfg.heads, rng));
        }
    }

    m.senet = make_senet(cfg.last_layer_width, cfg.se_reduction, rng);
    m.ffm = make_ffm(cfg.last_layer_width, rng);
    m.final_bn_gamma = full({cfg.last_layer_width}, 1.0, true);
    m.final_bn_beta = zeros({cfg.last_layer_width}, true);
    const double lim = init_limit(cfg.last_layer_width, cfg.vocab_size);
    m.cls_w = uniform_init({cfg.last_layer_width, cfg.vocab_size}, rng, -lim, lim);
    m.cls_b = zeros({cfg.vocab_size}, true);
    return m;
}

NamedParams PyramidModel::parameters() {
    NamedParams out;
    out.emplace_back("frontend.w1", frontend.w1);
    out.emplace_back("frontend.b1", frontend.b1);
    out.emplace_back("frontend.w2", frontend.w2);
    out.emplace_back("frontend.b2", frontend.b2);
    for (std::size_t i = 0; i < conv_blocks.size(); ++i) {
        conv_blocks[i].collect("cb" + std::to_string(i), out);
    }
    for (std::size_t i = 0; i < layers.size(); ++i) {
        if (i > 0) {
            for (std::size_t j = 0; j < fusions[i - 1].size(); ++j) {
                fusions[i - 1][j].collect("fuse" + std::to_string(i - 1) + "." + std::to_string(j), out);
            }
        }
        for (std::size_t j = 0; j < layers[i].size(); ++j) {
            layers[i][j].collect("layer" + std::to_string(i) + ".branch" + std::to_string(j), out);
        }
    }
    senet.collect("senet", out);
    ffm.collect("ffm", out);
    out.emplace_back("final_bn.gamma", final_bn_gamma);
    out.emplace_back("final_bn.beta", final_bn_beta);
    out.emplace_back("classifier.w", cls_w);
    out.emplace_back("classifier.b", cls_b);
    return out;
}

NamedBnStates PyramidModel::bn_states() {
    NamedBnStates out;
    for (std::size_t i = 0; i < conv_blocks.size(); ++i) {
        conv_blocks[i].collect_bn("cb" + std::to_string(i), out);
    }
    for (std::size_t i = 0; i < fusions.size(); ++i) {
        for (std::size_t j = 0; j < fusions[i].size(); ++j) {
            fusions[i][j].collect_bn("fuse" + std::to_string(i) + "." + std::to_string(j), out);
        }
    }
    out.emplace_back("final_bn", &final_bn_state);
    return out;
}

// ---- forward ----

namespace {

// Shared trunk + pyramid walk. When capture is non-null every module's
// pre-attention output is recorded and attention is bypassed.
TensorPtr pyramid_pass(PyramidModel& m, const TensorPtr& embedded, Mode mode, RandomSource& rng,
                       std::vector<std::vector<TensorPtr>>* capture) {
    const double p = m.cfg.dropout;
    const bool bypass = capture != nullptr;
    auto h = embedded;
    for (auto& cb : m.conv_blocks) h = conv_block_forward(h, cb, p, mode, rng);

    if (capture) capture->assign(m.layers.size(), {});
    std::vector<TensorPtr> cur;
    for (std::size_t i = 0; i < m.layers.size(); ++i) {
        std::vector<TensorPtr> next;
        for (std::size_t j = 0; j < m.layers[i].size(); ++j) {
            TensorPtr in = (i == 0) ? h
                                    : dual_fusion_forward(cur[2 * j], cur[2 * j + 1],
                                                          m.fusions[i - 1][j], p, mode, rng);
            auto o = dcnn_attention_forward(in, m.layers[i][j], 0, p, mode, rng, bypass);
            if (capture) (*capture)[i].push_back(o.pre_attention);
            next.push_back(o.out);
        }
        cur = std::move(next);
    }
    return cur[0];
}

}  // namespace

TensorPtr model_forward(PyramidModel& m, const TensorPtr& features, Mode mode, RandomSource& drop_rng) {
    if (features->ndim() != 2 || features->cols() != m.cfg.n_mels) {
        throw std::runtime_error("model: features " + shape_str(features->shape) + " do not match n_mels " +
                                 std::to_string(m.cfg.n_mels));
    }
    const double p = m.cfg.dropout;
    auto h = embed(features, m.frontend, p, mode, drop_rng);
    h = pyramid_pass(m, h, mode, drop_rng, nullptr);
    h = senet_forward(h, m.senet);
    h = ffm_forward(h, m.ffm, p, mode, drop_rng);
    h = relu(h);
    h = batch_norm(h, m.final_bn_gamma, m.final_bn_beta, m.final_bn_state, mode);
    h = dropout(h, p, mode, drop_rng);
    return log_softmax(linear(h, m.cls_w, m.cls_b));
}

// ---- structural analysis ----

ParamCount count_params(PyramidModel& m) {
    ParamCount out;
    auto bucket = [&](const std::string& name) -> long long& {
        for (auto& [n, c] : out.components) {
            if (n == name) return c;
        }
        out.components.emplace_back(name, 0);
        return out.components.back().second;
    };
    for (const auto& [name, t] : m.parameters()) {
        std::string group;
        if (name.rfind("frontend", 0) == 0) group = "frontend";
        else if (name.rfind("cb", 0) == 0) group = "conv_blocks";
        else if (name.rfind("layer", 0) == 0) group = name.substr(0, name.find('.'));
        else if (name.rfind("fuse", 0) == 0) group = "fusion";
        else if (name.rfind("senet", 0) == 0) group = "senet";
        else if (name.rfind("ffm", 0) == 0) group = "ffm";
        else group = "classifier";  // final_bn + output projection
        bucket(group) += t->numel();
        out.total += t->numel();
    }
    return out;
}

int receptive_field(const ModelConfig& cfg_in, int layer, int branch) {
    ModelConfig cfg = cfg_in;
    resolve_config(cfg);
    if (layer < 0 || layer >= cfg.n_layers) {
        throw std::runtime_error("receptive_field: layer " + std::to_string(layer) + " out of range");
    }
    if (branch < 0 || branch >= (cfg.n_branches >> layer)) {
        throw std::runtime_error("receptive_field: branch " + std::to_string(branch) + " out of range");
    }
    // (k-1) = 14 per depthwise conv in the trunk, then 2*rate per dilated conv
    // along the widest contributing path.
    std::function<int(int, int)> rf = [&](int i, int j) -> int {
        const int rate = cfg.dilation_schedule[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
        if (i == 0) return 1 + 14 * cfg.conv_blocks + 2 * rate;
        return std::max(rf(i - 1, 2 * j), rf(i - 1, 2 * j + 1)) + 2 * rate;
    };
    return rf(layer, branch);
}

namespace {

std::vector<std::vector<TensorPtr>> probe_pass(PyramidModel& m, const TensorPtr& x) {
    RandomSource rng(0);  // infer mode: dropout never draws
    std::vector<std::vector<TensorPtr>> capture;
    pyramid_pass(m, x, Mode::infer, rng, &capture);
    return capture;
}

int changed_span(const TensorPtr& base, const TensorPtr& probed) {
    int lo = -1, hi = -1;
    for (int t = 0; t < base->rows(); ++t) {
        // outside the receptive field both passes run identical arithmetic,
        // so any bit difference marks a reached position
        bool changed = false;
        for (int c = 0; c < base->cols() && !changed; ++c) {
            changed = base->at(t, c) != probed->at(t, c);
        }
        if (changed) {
            if (lo < 0) lo = t;
            hi = t;
        }
    }
    return lo < 0 ? 0 : hi - lo + 1;
}

std::pair<std::vector<std::vector<TensorPtr>>, std::vector<std::vector<TensorPtr>>> run_probe(
    PyramidModel& m, int probe_pos, int t_len) {
    if (t_len < 1) throw std::runtime_error("measure_receptive_field: t_len must be >= 1");
    if (probe_pos < 0 || probe_pos >= t_len) {
        throw std::runtime_error("measure_receptive_field: probe position " + std::to_string(probe_pos) +
                                 " out of range [0," + std::to_string(t_len) + ")");
    }
    RandomSource data_rng(12345);
    auto base = uniform_init({t_len, m.cfg.d_model}, data_rng, -1.0, 1.0);
    base->requires_grad = false;
    auto probed = make_tensor(base->shape, base->data);
    // a uniform shift across channels would be invisible to layer norm, so
    // perturb a single channel
    probed->at(probe_pos, 0) += 0.5;
    return {probe_pass(m, base), probe_pass(m, probed)};
}

}  // namespace

int measure_receptive_field(PyramidModel& m, int layer, int branch, int probe_pos, int t_len) {
    if (layer < 0 || layer >= static_cast<int>(m.layers.size()) || branch < 0 ||
        branch >= static_cast<int>(m.layers[static_cast<std::size_t>(layer)].size())) {
        throw std::runtime_error("measure_receptive_field: module index out of range");
    }
    auto [a, b] = run_probe(m, probe_pos, t_len);
    return changed_span(a[static_cast<std::size_t>(layer)][static_cast<std::size_t>(branch)],
                        b[static_cast<std::size_t>(layer)][static_cast<std::size_t>(branch)]);
}

std::vector<int> measure_first_layer_receptive_fields(PyramidModel& m, int probe_pos, int t_len) {
    auto [a, b] = run_probe(m, probe_pos, t_len);
    std::vector<int> spans;
    for (std::size_t j = 0; j < a[0].size(); ++j) spans.push_back(changed_span(a[0][j], b[0][j]));
    return spans;
}

}  // namespace pyramid
