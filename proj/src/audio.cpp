#include "pyramid/audio.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace pyramid {

namespace {

std::uint32_t rd_u32(const std::vector<std::uint8_t>& b, std::size_t off) {
    return static_cast<std::uint32_t>(b[off]) | (static_cast<std::uint32_t>(b[off + 1]) << 8) |
           (static_cast<std::uint32_t>(b[off + 2]) << 16) | (static_cast<std::uint32_t>(b[off + 3]) << 24);
}

std::uint16_t rd_u16(const std::vector<std::uint8_t>& b, std::size_t off) {
    return static_cast<std::uint16_t>(b[off] | (b[off + 1] << 8));
}

[[noreturn]] void parse_fail(const std::string& what, std::size_t off) {
    throw std::runtime_error("wav parse error at byte " + std::to_string(off) + ": " + what);
}

void need(const std::vector<std::uint8_t>& b, std::size_t off, std::size_t len, const char* what) {
    if (off + len > b.size()) parse_fail(std::string("truncated ") + what, off);
}

void wr_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
    b.push_back(static_cast<std::uint8_t>(v & 0xff));
    b.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    b.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    b.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

void wr_u16(std::vector<std::uint8_t>& b, std::uint16_t v) {
    b.push_back(static_cast<std::uint8_t>(v & 0xff));
    b.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
}

}  // namespace

Waveform read_wav(const std::vector<std::uint8_t>& bytes) {
    need(bytes, 0, 12, "RIFF header");
    if (std::memcmp(bytes.data(), "RIFF", 4) != 0) parse_fail("bad RIFF magic", 0);
    if (std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) parse_fail("bad WAVE magic", 8);

    bool have_fmt = false;
    int sample_rate = 0;
    Waveform w;
    bool have_data = false;

    std::size_t off = 12;
    while (off + 8 <= bytes.size()) {
        char id[5] = {0};
        std::memcpy(id, bytes.data() + off, 4);
        const std::uint32_t chunk_len = rd_u32(bytes, off + 4);
        const std::size_t body = off + 8;
        if (std::memcmp(id, "fmt ", 4) == 0) {
            need(bytes, body, 16, "fmt chunk");
            const std::uint16_t format = rd_u16(bytes, body);
            if (format != 1) parse_fail("format code " + std::to_string(format) + " is not PCM", body);
            const std::uint16_t channels = rd_u16(bytes, body + 2);
            if (channels != 1) parse_fail(std::to_string(channels) + " channels, expected mono", body + 2);
            sample_rate = static_cast<int>(rd_u32(bytes, body + 4));
            const std::uint16_t bits = rd_u16(bytes, body + 14);
            if (bits != 16) parse_fail(std::to_string(bits) + "-bit samples, expected 16", body + 14);
            have_fmt = true;
        } else if (std::memcmp(id, "data", 4) == 0) {
            if (!have_fmt) parse_fail("data chunk before fmt chunk", off);
            need(bytes, body, chunk_len, "data chunk");
            const std::size_t n = chunk_len / 2;
            w.samples.resize(n);
            for (std::size_t i = 0; i < n; ++i) {
                const std::int16_t s = static_cast<std::int16_t>(rd_u16(bytes, body + 2 * i));
                w.samples[i] = static_cast<double>(s) / 32768.0;
            }
            have_data = true;
        }
        off = body + chunk_len + (chunk_len & 1);  // chunks are word-aligned
    }
    if (!have_fmt) parse_fail("missing fmt chunk", bytes.size());
    if (!have_data) parse_fail("missing data chunk", bytes.size());
    w.sample_rate = sample_rate;
    return w;
}

Waveform read_wav_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open wav file: " + path);
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return read_wav(bytes);
}

std::vector<std::uint8_t> write_wav(const Waveform& w) {
    std::vector<std::uint8_t> b;
    const std::uint32_t data_len = static_cast<std::uint32_t>(w.samples.size() * 2);
    b.insert(b.end(), {'R', 'I', 'F', 'F'});
    wr_u32(b, 36 + data_len);
    b.insert(b.end(), {'W', 'A', 'V', 'E'});
    b.insert(b.end(), {'f', 'm', 't', ' '});
    wr_u32(b, 16);
    wr_u16(b, 1);   // PCM
    wr_u16(b, 1);   // mono
    wr_u32(b, static_cast<std::uint32_t>(w.sample_rate));
    wr_u32(b, static_cast<std::uint32_t>(w.sample_rate * 2));
    wr_u16(b, 2);   // block align
    wr_u16(b, 16);  // bits per sample
    b.insert(b.end(), {'d', 'a', 't', 'a'});
    wr_u32(b, data_len);
    for (double s : w.samples) {
        double v = s * 32768.0;
        if (v > 32767.0) v = 32767.0;
        if (v < -32768.0) v = -32768.0;
        wr_u16(b, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::lrint(v))));
    }
    return b;
}

void write_wav_file(const std::string& path, const Waveform& w) {
    auto bytes = write_wav(w);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write wav file: " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

void fft_radix2(std::vector<double>& re, std::vector<double>& im) {
    const std::size_t n = re.size();
    if (n == 0 || (n & (n - 1)) != 0 || im.size() != n) {
        throw std::runtime_error("fft_radix2: length must be a power of two");
    }
    // bit reversal
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) {
            std::swap(re[i], re[j]);
            std::swap(im[i], im[j]);
        }
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        const double ang = -2.0 * M_PI / static_cast<double>(len);
        const double wr = std::cos(ang), wi = std::sin(ang);
        for (std::size_t i = 0; i < n; i += len) {
            double cr = 1.0, ci = 0.0;
            for (std::size_t k = 0; k < len / 2; ++k) {
                const std::size_t a = i + k, b = i + k + len / 2;
                const double tr = re[b] * cr - im[b] * ci;
                const double ti = re[b] * ci + im[b] * cr;
                re[b] = re[a] - tr;
                im[b] = im[a] - ti;
                re[a] += tr;
                im[a] += ti;
                const double ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
        }
    }
}

int filterbank_frame_count(int n_samples, int sample_rate, const FilterbankOptions& opts) {
    const int win = sample_rate / 1000 * opts.win_ms;
    const int hop = sample_rate / 1000 * opts.hop_ms;
    if (n_samples < win) return 0;
    return (n_samples - win) / hop + 1;
}

FeatureMatrix log_mel_filterbank(const Waveform& w, const FilterbankOptions& opts) {
    if (w.sample_rate != 16000) {
        throw std::runtime_error("log_mel_filterbank: expected 16 kHz input, got " +
                                 std::to_string(w.sample_rate) + " Hz (resampling unsupported)");
    }
    const int sr = w.sample_rate;
    const int win = sr / 1000 * opts.win_ms;
    const int hop = sr / 1000 * opts.hop_ms;
    const int n_frames = filterbank_frame_count(static_cast<int>(w.samples.size()), sr, opts);
    if (n_frames <= 0) {
        throw std::runtime_error("log_mel_filterbank: audio shorter than one window (" +
                                 std::to_string(w.samples.size()) + " < " + std::to_string(win) + " samples)");
    }
    if (opts.n_fft < win) throw std::runtime_error("log_mel_filterbank: n_fft smaller than window");

    // Hann window
    std::vector<double> hann(static_cast<std::size_t>(win));
    for (int i = 0; i < win; ++i) hann[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / (win - 1));

    // triangular mel filters over 0..sr/2, HTK scale
    const int n_bins = opts.n_fft / 2 + 1;
    const double mel_lo = hz_to_mel(0.0), mel_hi = hz_to_mel(sr / 2.0);
    std::vector<double> mel_pts(static_cast<std::size_t>(opts.n_mels + 2));
    for (int m = 0; m < opts.n_mels + 2; ++m) {
        mel_pts[static_cast<std::size_t>(m)] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * m / (opts.n_mels + 1));
    }
    std::vector<std::vector<double>> filters(static_cast<std::size_t>(opts.n_mels),
                                             std::vector<double>(static_cast<std::size_t>(n_bins), 0.0));
    for (int m = 0; m < opts.n_mels; ++m) {
        const double f_l = mel_pts[static_cast<std::size_t>(m)];
        const double f_c = mel_pts[static_cast<std::size_t>(m + 1)];
        const double f_r = mel_pts[static_cast<std::size_t>(m + 2)];
        for (int k = 0; k < n_bins; ++k) {
            const double f = static_cast<double>(k) * sr / opts.n_fft;
            double wgt = 0.0;
            if (f > f_l && f < f_c) wgt = (f - f_l) / (f_c - f_l);
            else if (f >= f_c && f < f_r) wgt = (f_r - f) / (f_r - f_c);
            filters[static_cast<std::size_t>(m)][static_cast<std::size_t>(k)] = wgt;
        }
    }

    FeatureMatrix out;
    out.frames = n_frames;
    out.n_mels = opts.n_mels;
    out.data.resize(static_cast<std::size_t>(n_frames) * opts.n_mels);

    std::vector<double> re(static_cast<std::size_t>(opts.n_fft)), im(static_cast<std::size_t>(opts.n_fft));
    for (int t = 0; t < n_frames; ++t) {
        std::fill(re.begin(), re.end(), 0.0);
        std::fill(im.begin(), im.end(), 0.0);
        const std::size_t base = static_cast<std::size_t>(t) * hop;
        for (int i = 0; i < win; ++i) re[static_cast<std::size_t>(i)] = w.samples[base + static_cast<std::size_t>(i)] * hann[static_cast<std::size_t>(i)];
        fft_radix2(re, im);
        for (int m = 0; m < opts.n_mels; ++m) {
            double e = 0.0;
            const auto& filt = filters[static_cast<std::size_t>(m)];
            for (int k = 0; k < n_bins; ++k) {
                if (filt[static_cast<std::size_t>(k)] == 0.0) continue;
                const double p = re[static_cast<std::size_t>(k)] * re[static_cast<std::size_t>(k)] +
                                 im[static_cast<std::size_t>(k)] * im[static_cast<std::size_t>(k)];
                e += filt[static_cast<std::size_t>(k)] * p;
            }
            out.data[static_cast<std::size_t>(t) * opts.n_mels + m] = std::log(e + 1e-10);
        }
    }

    if (opts.normalize) {
        for (int m = 0; m < opts.n_mels; ++m) {
            double mean = 0.0;
            for (int t = 0; t < n_frames; ++t) mean += out.at(t, m);
            mean /= n_frames;
            double var = 0.0;
            for (int t = 0; t < n_frames; ++t) {
                const double c = out.at(t, m) - mean;
                var += c * c;
            }
            var /= n_frames;
            const double std_dev = std::sqrt(var);
            for (int t = 0; t < n_frames; ++t) {
                auto& v = out.data[static_cast<std::size_t>(t) * opts.n_mels + m];
                v = (std_dev < 1e-8) ? 0.0 : (v - mean) / std_dev;  // constant feature maps to 0
            }
        }
    }
    return out;
}

namespace {
constexpr std::uint32_t kCacheVersion = 1;
}

void write_feature_cache(const std::string& path, const FeatureMatrix& f) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write feature cache: " + path);
    std::vector<std::uint8_t> b;
    b.insert(b.end(), {'P', 'Y', 'R', 'F'});
    wr_u32(b, kCacheVersion);
    wr_u32(b, static_cast<std::uint32_t>(f.frames));
    wr_u32(b, static_cast<std::uint32_t>(f.n_mels));
    for (double v : f.data) {
        float fv = static_cast<float>(v);
        std::uint32_t u;
        std::memcpy(&u, &fv, 4);
        wr_u32(b, u);
    }
    out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

FeatureMatrix read_feature_cache(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open feature cache: " + path);
    std::vector<std::uint8_t> b((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (b.size() < 16 || std::memcmp(b.data(), "PYRF", 4) != 0) {
        throw std::runtime_error("feature cache: bad magic in " + path);
    }
    const std::uint32_t version = rd_u32(b, 4);
    if (version != kCacheVersion) {
        throw std::runtime_error("feature cache: version " + std::to_string(version) + ", expected " +
                                 std::to_string(kCacheVersion));
    }
    FeatureMatrix f;
    f.frames = static_cast<int>(rd_u32(b, 8));
    f.n_mels = static_cast<int>(rd_u32(b, 12));
    const std::size_t n = static_cast<std::size_t>(f.frames) * static_cast<std::size_t>(f.n_mels);
    if (b.size() != 16 + 4 * n) throw std::runtime_error("feature cache: truncated payload in " + path);
    f.data.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const std::uint32_t u = rd_u32(b, 16 + 4 * i);
        float fv;
        std::memcpy(&fv, &u, 4);
        f.data[i] = static_cast<double>(fv);
    }
    return f;
}

}  // namespace pyramid
