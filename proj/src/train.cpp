#include "pyramid/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>

#include "pyramid/audio.hpp"
#include "pyramid/frontend.hpp"
#include "pyramid/log.hpp"

namespace pyramid {

// ---- Adam ----

void AdamState::init(const std::vector<TensorPtr>& params) {
    m.clear();
    v.clear();
    for (const auto& p : params) {
        m.emplace_back(p->data.size(), 0.0);
        v.emplace_back(p->data.size(), 0.0);
    }
}

namespace {

double f32(double x) { return static_cast<double>(static_cast<float>(x)); }

}  // namespace

void adam_step(const std::vector<TensorPtr>& params, AdamState& state, double lr, double clip_norm) {
    if (lr <= 0.0) throw std::runtime_error("adam_step: lr must be positive");
    if (state.m.size() != params.size()) {
        throw std::runtime_error("adam_step: state tracks " + std::to_string(state.m.size()) +
                                 " tensors, got " + std::to_string(params.size()));
    }
    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (params[i]->data.size() != state.m[i].size()) {
            throw std::runtime_error("adam_step: moment shape mismatch at tensor " + std::to_string(i));
        }
        for (double g : params[i]->grad) sq += g * g;
    }
    if (!std::isfinite(sq)) {
        ++state.skipped;
        log_msg(LogLevel::info, "adam_step: non-finite gradient, update skipped");
        return;
    }
    const double norm = std::sqrt(sq);
    const double scale = (clip_norm > 0.0 && norm > clip_norm) ? clip_norm / norm : 1.0;

    ++state.step;
    const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i]->data;
        auto& mi = state.m[i];
        auto& vi = state.v[i];
        const bool has_grad = !params[i]->grad.empty();
        for (std::size_t j = 0; j < p.size(); ++j) {
            const double g = has_grad ? params[i]->grad[j] * scale : 0.0;
            mi[j] = f32(state.beta1 * mi[j] + (1.0 - state.beta1) * g);
            vi[j] = f32(state.beta2 * vi[j] + (1.0 - state.beta2) * g * g);
            const double mhat = mi[j] / bc1;
            const double vhat = vi[j] / bc2;
            p[j] = f32(p[j] - lr * mhat / (std::sqrt(vhat) + state.eps));
        }
    }
}

// ---- schedule ----

double lr_at(long long step, const Schedule& s) {
    if (step < 1) throw std::runtime_error("lr_at: step must be >= 1");
    long long warmup = s.warmup_steps;
    if (warmup == 0) warmup = std::max<long long>(1, std::llround(0.1 * static_cast<double>(s.total_steps)));
    if (warmup < 1) throw std::runtime_error("lr_at: warmup must be >= 1");
    const double d = static_cast<double>(s.d_model);
    const double t = static_cast<double>(step);
    const double w = static_cast<double>(warmup);
    if (s.formula == LrFormula::paper) {
        return std::sqrt(d) * std::min(std::sqrt(t), std::pow(w, -1.5));
    }
    return s.scale * std::pow(d, -0.5) * std::min(std::pow(t, -0.5), t * std::pow(w, -1.5));
}

// ---- synthetic corpus ----

double token_frequency(int token_id) { return 200.0 + 35.0 * token_id; }

namespace {

std::string token_name(int index) {  // a..z, then aa, ab, ...
    std::string s;
    int n = index;
    do {
        s.insert(s.begin(), static_cast<char>('a' + n % 26));
        n = n / 26 - 1;
    } while (n >= 0);
    return s;
}

constexpr double kPhoneSeconds = 0.2;
constexpr int kSampleRate = 16000;

}  // namespace

void synth_corpus(const std::string& dir, std::uint64_t seed, int n_utts, int vocab_size, int max_label_len) {
    if (vocab_size < 3) throw std::runtime_error("synth_corpus: vocab_size must be >= 3");
    if (n_utts < 1 || max_label_len < 1) throw std::runtime_error("synth_corpus: need n_utts, max_label_len >= 1");
    std::filesystem::create_directories(dir);

    std::vector<std::string> vocab;
    for (int i = 0; i + 1 < vocab_size; ++i) vocab.push_back(token_name(i));
    write_vocab(dir + "/vocab.txt", vocab);

    RandomSource rng(seed);
    const int phone_samples = static_cast<int>(kPhoneSeconds * kSampleRate);
    std::ofstream manifest(dir + "/manifest.csv");
    if (!manifest) throw std::runtime_error("synth_corpus: cannot write manifest in " + dir);
    for (int u = 0; u < n_utts; ++u) {
        const int len = 1 + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(max_label_len));
        LabelSeq labels;
        for (int i = 0; i < len; ++i) {
            labels.push_back(1 + static_cast<int>(rng.next_u64() % static_cast<std::uint64_t>(vocab_size - 1)));
        }
        Waveform w;
        w.sample_rate = kSampleRate;
        w.samples.reserve(static_cast<std::size_t>(len) * phone_samples);
        for (int tok : labels) {
            const double f0 = token_frequency(tok);
            for (int i = 0; i < phone_samples; ++i) {
                const double t = static_cast<double>(i) / kSampleRate;
                w.samples.push_back(0.5 * std::sin(2.0 * M_PI * f0 * t) +
                                    0.25 * std::sin(2.0 * M_PI * 2.0 * f0 * t) +
                                    0.125 * std::sin(2.0 * M_PI * 3.0 * f0 * t));
            }
        }
        double power = 0.0;
        for (double s : w.samples) power += s * s;
        power /= static_cast<double>(w.samples.size());
        const double noise_std = std::sqrt(power / 100.0);  // 20 dB SNR
        for (double& s : w.samples) s = std::clamp(s + noise_std * rng.gaussian(), -1.0, 1.0);

        char name[32];
        std::snprintf(name, sizeof(name), "utt_%04d.wav", u);
        write_wav_file(dir + "/" + name, w);
        manifest << name << "," << detokenize(labels, vocab) << "\n";
    }
}

std::vector<Sample> load_corpus(const std::string& dir, std::vector<std::string>* vocab_out) {
    auto vocab = read_vocab(dir + "/vocab.txt");
    std::ifstream manifest(dir + "/manifest.csv");
    if (!manifest) throw std::runtime_error("cannot open manifest: " + dir + "/manifest.csv");
    std::vector<Sample> samples;
    std::string line;
    int line_no = 0;
    while (std::getline(manifest, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) {
            throw std::runtime_error("manifest line " + std::to_string(line_no) + ": expected wav_path,transcript");
        }
        std::string wav_path = line.substr(0, comma);
        if (!std::filesystem::path(wav_path).is_absolute()) wav_path = dir + "/" + wav_path;
        Sample s;
        s.labels = tokenize(line.substr(comma + 1), vocab);
        s.feats = log_mel_filterbank(read_wav_file(wav_path)).to_tensor();
        samples.push_back(std::move(s));
    }
    if (vocab_out) *vocab_out = std::move(vocab);
    return samples;
}

double corpus_cer(PyramidModel& m, const std::vector<Sample>& samples) {
    long long edits = 0, total = 0;
    RandomSource dummy(0);
    for (const auto& s : samples) {
        if (s.labels.empty()) continue;
        auto lp = model_forward(m, s.feats, Mode::infer, dummy);
        const auto hyp = greedy_decode(lp);
        edits += std::llround(cer(hyp, s.labels) * static_cast<double>(s.labels.size()));
        total += static_cast<long long>(s.labels.size());
    }
    if (total == 0) throw std::runtime_error("corpus_cer: no non-empty references");
    return static_cast<double>(edits) / static_cast<double>(total);
}

// ---- training loop ----

namespace {

int ctc_min_frames(const LabelSeq& labels) {
    int need = static_cast<int>(labels.size());
    for (std::size_t i = 1; i < labels.size(); ++i) {
        if (labels[i] == labels[i - 1]) ++need;
    }
    return std::max(need, 1);
}

void round_bn_states(PyramidModel& m) {
    for (auto& [name, st] : m.bn_states()) {
        for (double& x : st->running_mean) x = f32(x);
        for (double& x : st->running_var) x = f32(x);
    }
}

}  // namespace

TrainResult train(PyramidModel& m, const std::vector<Sample>& corpus, AdamState& adam,
                  RandomSource& trainer_rng, const TrainOptions& opt) {
    if (corpus.empty()) throw std::runtime_error("train: corpus is empty");
    if (opt.batch_size < 1) throw std::runtime_error("train: batch_size must be >= 1");

    std::vector<TensorPtr> params;
    for (auto& [name, t] : m.parameters()) params.push_back(t);
    if (adam.m.empty()) adam.init(params);

    const auto n = corpus.size();
    const auto n_held = static_cast<std::size_t>(std::floor(opt.heldout_frac * static_cast<double>(n)));
    const auto n_train = n - n_held;
    if (n_train == 0) throw std::runtime_error("train: held-out split leaves no training data");

    std::ofstream csv;
    if (!opt.metrics_csv.empty()) {
        const bool fresh = !std::filesystem::exists(opt.metrics_csv);
        csv.open(opt.metrics_csv, std::ios::app);
        if (!csv) throw std::runtime_error("train: cannot write metrics to " + opt.metrics_csv);
        if (fresh) csv << "step,lr,loss,cer\n";
    }
    auto emit = [&](const StepRecord& r) {
        if (!csv.is_open()) return;
        csv << r.step << "," << r.lr << "," << r.loss << ",";
        if (r.cer >= 0) csv << r.cer;
        csv << "\n";
    };

    TrainResult result;
    bool done = false;
    for (int epoch = 0; epoch < opt.epochs && !done; ++epoch) {
        std::vector<std::size_t> order(n_train);
        for (std::size_t i = 0; i < n_train; ++i) order[i] = i;
        for (std::size_t i = n_train; i > 1; --i) {  // Fisher-Yates from the trainer stream
            std::swap(order[i - 1], order[trainer_rng.next_u64() % i]);
        }
        for (std::size_t start = 0; start < n_train && !done; start += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t end = std::min(n_train, start + static_cast<std::size_t>(opt.batch_size));
            std::vector<const Sample*> batch;
            for (std::size_t i = start; i < end; ++i) {
                const Sample& s = corpus[order[i]];
                if (subsampled_len(s.feats->rows()) < ctc_min_frames(s.labels)) {
                    ++result.skipped_utterances;
                    continue;
                }
                batch.push_back(&s);
            }
            if (batch.empty()) continue;

            for (auto& p : params) p->zero_grad();
            double loss_sum = 0.0;
            for (const Sample* s : batch) {
                auto lp = model_forward(m, s->feats, Mode::train, trainer_rng);
                auto loss = ctc_loss(lp, s->labels);
                loss_sum += loss->data[0];
                backward(scale(loss, 1.0 / static_cast<double>(batch.size())));
            }

            StepRecord rec;
            rec.lr = lr_at(adam.step + 1, opt.sched);
            adam_step(params, adam, rec.lr, opt.clip_norm);
            round_bn_states(m);
            rec.step = adam.step;
            rec.loss = loss_sum / static_cast<double>(batch.size());
            result.history.push_back(rec);
            if (opt.max_steps > 0 && adam.step >= opt.max_steps) done = true;
        }
        if (n_held > 0 && !result.history.empty()) {
            std::vector<Sample> held(corpus.begin() + static_cast<std::ptrdiff_t>(n_train), corpus.end());
            result.history.back().cer = corpus_cer(m, held);
        }
    }
    for (const auto& r : result.history) emit(r);
    return result;
}

// ---- checkpoints ----

std::uint32_t crc32(const std::uint8_t* data, std::size_t len) {
    static const auto table = [] {
        std::vector<std::uint32_t> t(256);
        for (std::uint32_t i = 0; i < 256; ++i) {
            std::uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    std::uint32_t c = 0xFFFFFFFFu;
    for (std::size_t i = 0; i < len; ++i) c = table[(c ^ data[i]) & 0xFFu] ^ (c >> 8);
    return c ^ 0xFFFFFFFFu;
}

namespace {

constexpr std::uint32_t kCkptVersion = 1;
const char kTrailerMark[] = "# trainer state";

void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_str(std::vector<std::uint8_t>& buf, const std::string& s) {
    put_u32(buf, static_cast<std::uint32_t>(s.size()));
    buf.insert(buf.end(), s.begin(), s.end());
}

void put_f32(std::vector<std::uint8_t>& buf, float f) {
    std::uint32_t v;
    std::memcpy(&v, &f, 4);
    put_u32(buf, v);
}

struct Reader {
    const std::vector<std::uint8_t>& buf;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf[pos + static_cast<std::size_t>(i)]) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return buf[pos++];
    }
    std::string str() {
        const auto len = u32();
        need(len);
        std::string s(buf.begin() + static_cast<std::ptrdiff_t>(pos),
                      buf.begin() + static_cast<std::ptrdiff_t>(pos + len));
        pos += len;
        return s;
    }
    double f32v() {
        const auto v = u32();
        float f;
        std::memcpy(&f, &v, 4);
        return static_cast<double>(f);
    }
};

void put_tensor(std::vector<std::uint8_t>& buf, const std::string& name, const std::vector<int>& shape,
                const std::vector<double>& data) {
    put_str(buf, name);
    buf.push_back(static_cast<std::uint8_t>(shape.size()));
    for (int d : shape) put_u32(buf, static_cast<std::uint32_t>(d));
    for (double x : data) put_f32(buf, static_cast<float>(x));
}

}  // namespace

void save_checkpoint(const std::string& path, PyramidModel& m, const AdamState& adam,
                     std::uint64_t trainer_rng, long long step) {
    auto named = m.parameters();
    if (!adam.m.empty() && adam.m.size() != named.size()) {
        throw std::runtime_error("save_checkpoint: optimizer state does not match the parameter list");
    }

    std::ostringstream cfg_text;
    cfg_text << config_to_text(m.cfg);
    cfg_text << kTrailerMark << "\n";
    cfg_text << "trainer_step = " << step << "\n";
    cfg_text << "trainer_rng = " << trainer_rng << "\n";
    cfg_text << "adam_step = " << adam.step << "\n";
    cfg_text << "adam_skipped = " << adam.skipped << "\n";
    cfg_text << "bn_updates = ";
    auto bn = m.bn_states();
    for (std::size_t i = 0; i < bn.size(); ++i) {
        if (i) cfg_text << ",";
        cfg_text << bn[i].second->updates;
    }
    cfg_text << "\n";

    std::vector<std::uint8_t> buf;
    buf.insert(buf.end(), {'P', 'Y', 'R', 'C'});
    put_u32(buf, kCkptVersion);
    put_str(buf, cfg_text.str());

    std::uint32_t count = static_cast<std::uint32_t>(named.size() + 2 * bn.size());
    if (!adam.m.empty()) count += static_cast<std::uint32_t>(2 * named.size());
    put_u32(buf, count);
    for (auto& [name, t] : named) put_tensor(buf, name, t->shape, t->data);
    if (!adam.m.empty()) {
        for (std::size_t i = 0; i < named.size(); ++i) {
            put_tensor(buf, named[i].first + ".adam_m", named[i].second->shape, adam.m[i]);
            put_tensor(buf, named[i].first + ".adam_v", named[i].second->shape, adam.v[i]);
        }
    }
    for (auto& [name, st] : bn) {
        const int c = static_cast<int>(st->running_mean.size());
        put_tensor(buf, name + ".running_mean", {c}, st->running_mean);
        put_tensor(buf, name + ".running_var", {c}, st->running_var);
    }
    put_u32(buf, crc32(buf.data(), buf.size()));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_checkpoint: cannot write " + path);
    out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
    std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 12) throw std::runtime_error("checkpoint: truncated file");
    const std::uint32_t stored = static_cast<std::uint32_t>(buf[buf.size() - 4]) |
                                 static_cast<std::uint32_t>(buf[buf.size() - 3]) << 8 |
                                 static_cast<std::uint32_t>(buf[buf.size() - 2]) << 16 |
                                 static_cast<std::uint32_t>(buf[buf.size() - 1]) << 24;
    if (crc32(buf.data(), buf.size() - 4) != stored) {
        throw std::runtime_error("checkpoint: checksum mismatch (corrupt or truncated file)");
    }

    Reader r{buf};
    r.need(4);
    if (std::memcmp(buf.data(), "PYRC", 4) != 0) throw std::runtime_error("checkpoint: bad magic, not a PYRC file");
    r.pos = 4;
    const auto version = r.u32();
    if (version != kCkptVersion) {
        throw std::runtime_error("checkpoint: version " + std::to_string(version) + " unsupported, expected " +
                                 std::to_string(kCkptVersion));
    }
    const std::string text = r.str();

    const auto mark = text.find(kTrailerMark);
    if (mark == std::string::npos) throw std::runtime_error("checkpoint: missing trainer state section");
    Checkpoint ck;
    ck.cfg = parse_model_config(text.substr(0, mark));
    std::vector<long long> bn_updates;
    {
        std::stringstream trailer(text.substr(mark + sizeof(kTrailerMark)));
        std::string line;
        while (std::getline(trailer, line)) {
            const auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            const std::string key = line.substr(0, line.find(' '));
            const std::string val = line.substr(eq + 2);
            if (key == "trainer_step") ck.step = std::stoll(val);
            else if (key == "trainer_rng") ck.trainer_rng = std::stoull(val);
            else if (key == "adam_step") ck.adam.step = std::stoll(val);
            else if (key == "adam_skipped") ck.adam.skipped = std::stoll(val);
            else if (key == "bn_updates") {
                std::stringstream vs(val);
                std::string item;
                while (std::getline(vs, item, ',')) bn_updates.push_back(std::stoll(item));
            }
        }
    }

    RandomSource init_rng(0);
    ck.model = build(ck.cfg, init_rng);
    auto named = ck.model.parameters();
    auto bn = ck.model.bn_states();
    if (bn_updates.size() != bn.size()) throw std::runtime_error("checkpoint: batch-norm state count mismatch");
    for (std::size_t i = 0; i < bn.size(); ++i) bn[i].second->updates = bn_updates[i];

    ck.adam.init({});
    ck.adam.m.assign(named.size(), {});
    ck.adam.v.assign(named.size(), {});

    const auto count = r.u32();
    std::size_t filled = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.str();
        const int rank = r.u8();
        std::vector<int> shape;
        std::size_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            shape.push_back(static_cast<int>(r.u32()));
            numel *= static_cast<std::size_t>(shape.back());
        }
        std::vector<double> data(numel);
        for (auto& x : data) x = r.f32v();

        auto target = [&]() -> std::vector<double>* {
            for (std::size_t j = 0; j < named.size(); ++j) {
                if (name == named[j].first) {
                    if (named[j].second->shape != shape) {
                        throw std::runtime_error("checkpoint: shape mismatch for " + name);
                    }
                    return &named[j].second->data;
                }
                if (name == named[j].first + ".adam_m") return &ck.adam.m[j];
                if (name == named[j].first + ".adam_v") return &ck.adam.v[j];
            }
            for (auto& [bname, st] : bn) {
                if (name == bname + ".running_mean") return &st->running_mean;
                if (name == bname + ".running_var") return &st->running_var;
            }
            return nullptr;
        }();
        if (!target) throw std::runtime_error("checkpoint: unknown tensor '" + name + "'");
        *target = std::move(data);
        ++filled;
    }
    if (filled != count) throw std::runtime_error("checkpoint: tensor count mismatch");
    bool have_adam = true;
    for (const auto& mi : ck.adam.m) have_adam = have_adam && !mi.empty();
    if (!have_adam) {
        bool any = false;
        for (const auto& mi : ck.adam.m) any = any || !mi.empty();
        if (any) throw std::runtime_error("checkpoint: incomplete optimizer state");
        ck.adam.m.clear();
        ck.adam.v.clear();
    }
    return ck;
}

}  // namespace pyramid
