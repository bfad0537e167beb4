#include "pyramid/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace pyramid {

namespace {

constexpr double kNegInf = -1e30;

double lse2(double a, double b) {
    if (a <= kNegInf) return b;
    if (b <= kNegInf) return a;
    const double m = std::max(a, b);
    return m + std::log(std::exp(a - m) + std::exp(b - m));
}

void check_log_probs(const TensorPtr& log_probs) {
    if (!log_probs || log_probs->ndim() != 2) throw std::runtime_error("ctc: log_probs must be [T x V]");
    if (log_probs->rows() < 1 || log_probs->cols() < 2) {
        throw std::runtime_error("ctc: need T >= 1 and V >= 2 (blank plus one token)");
    }
    for (int t = 0; t < log_probs->rows(); ++t) {
        double acc = kNegInf;
        for (int v = 0; v < log_probs->cols(); ++v) acc = lse2(acc, log_probs->at(t, v));
        if (std::abs(acc) > 1e-6) {
            throw std::runtime_error("ctc: row " + std::to_string(t) + " is not log-normalized");
        }
    }
}

void check_labels(const LabelSeq& labels, int vocab) {
    for (int l : labels) {
        if (l < 1 || l >= vocab) {
            throw std::runtime_error("ctc: label id " + std::to_string(l) + " outside [1," +
                                     std::to_string(vocab - 1) + "]");
        }
    }
}

// minimum frames needed: one per token plus one separator per adjacent repeat
int min_frames(const LabelSeq& labels) {
    int need = static_cast<int>(labels.size());
    for (std::size_t i = 1; i < labels.size(); ++i) {
        if (labels[i] == labels[i - 1]) ++need;
    }
    return need;
}

LabelSeq collapse(const std::vector<int>& path) {
    LabelSeq out;
    int prev = -1;
    for (int tk : path) {
        if (tk != prev && tk != 0) out.push_back(tk);
        prev = tk;
    }
    return out;
}

}  // namespace

TensorPtr ctc_loss(const TensorPtr& log_probs, const LabelSeq& labels) {
    check_log_probs(log_probs);
    check_labels(labels, log_probs->cols());
    const int t_len = log_probs->rows();
    const int l_len = static_cast<int>(labels.size());
    if (t_len < min_frames(labels)) {
        throw std::runtime_error("ctc: sequence too short for label: T=" + std::to_string(t_len) +
                                 ", L=" + std::to_string(l_len));
    }

    // blank-interleaved extension: -, l1, -, l2, ..., -
    const int s_len = 2 * l_len + 1;
    std::vector<int> ext(static_cast<std::size_t>(s_len), 0);
    for (int i = 0; i < l_len; ++i) ext[static_cast<std::size_t>(2 * i + 1)] = labels[static_cast<std::size_t>(i)];

    auto lp = [&](int t, int s) { return log_probs->at(t, ext[static_cast<std::size_t>(s)]); };
    auto can_skip = [&](int s) {  // transition s -> s+2
        return s + 2 < s_len && ext[static_cast<std::size_t>(s + 2)] != 0 &&
               ext[static_cast<std::size_t>(s + 2)] != ext[static_cast<std::size_t>(s)];
    };

    std::vector<std::vector<double>> alpha(static_cast<std::size_t>(t_len),
                                           std::vector<double>(static_cast<std::size_t>(s_len), kNegInf));
    alpha[0][0] = lp(0, 0);
    if (s_len > 1) alpha[0][1] = lp(0, 1);
    for (int t = 1; t < t_len; ++t) {
        for (int s = 0; s < s_len; ++s) {
            double acc = alpha[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(s)];
            if (s >= 1) acc = lse2(acc, alpha[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(s - 1)]);
            if (s >= 2 && can_skip(s - 2)) {
                acc = lse2(acc, alpha[static_cast<std::size_t>(t - 1)][static_cast<std::size_t>(s - 2)]);
            }
            if (acc > kNegInf) {
                alpha[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)] = acc + lp(t, s);
            }
        }
    }
    double loglik = alpha[static_cast<std::size_t>(t_len - 1)][static_cast<std::size_t>(s_len - 1)];
    if (s_len > 1) {
        loglik = lse2(loglik, alpha[static_cast<std::size_t>(t_len - 1)][static_cast<std::size_t>(s_len - 2)]);
    }

    // beta[t][s] includes the emission at t, like alpha
    std::vector<std::vector<double>> beta(static_cast<std::size_t>(t_len),
                                          std::vector<double>(static_cast<std::size_t>(s_len), kNegInf));
    beta[static_cast<std::size_t>(t_len - 1)][static_cast<std::size_t>(s_len - 1)] = lp(t_len - 1, s_len - 1);
    if (s_len > 1) {
        beta[static_cast<std::size_t>(t_len - 1)][static_cast<std::size_t>(s_len - 2)] = lp(t_len - 1, s_len - 2);
    }
    for (int t = t_len - 2; t >= 0; --t) {
        for (int s = 0; s < s_len; ++s) {
            double acc = beta[static_cast<std::size_t>(t + 1)][static_cast<std::size_t>(s)];
            if (s + 1 < s_len) acc = lse2(acc, beta[static_cast<std::size_t>(t + 1)][static_cast<std::size_t>(s + 1)]);
            if (can_skip(s)) acc = lse2(acc, beta[static_cast<std::size_t>(t + 1)][static_cast<std::size_t>(s + 2)]);
            if (acc > kNegInf) {
                beta[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)] = acc + lp(t, s);
            }
        }
    }

    auto node = make_tensor({1}, {-loglik}, true);
    node->parents = {log_probs};
    node->name = "ctc_loss";
    const int vocab = log_probs->cols();
    node->backward_fn = [log_probs, alpha, beta, ext, loglik, t_len, s_len, vocab](Tensor& self) {
        if (!log_probs->requires_grad) return;
        log_probs->ensure_grad();
        const double g = self.grad[0];
        for (int t = 0; t < t_len; ++t) {
            for (int v = 0; v < vocab; ++v) {
                double acc = kNegInf;
                for (int s = 0; s < s_len; ++s) {
                    if (ext[static_cast<std::size_t>(s)] != v) continue;
                    const double a = alpha[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)];
                    const double b = beta[static_cast<std::size_t>(t)][static_cast<std::size_t>(s)];
                    if (a <= kNegInf || b <= kNegInf) continue;
                    // alpha and beta both include the emission at t
                    acc = lse2(acc, a + b - log_probs->at(t, v));
                }
                if (acc > kNegInf) {
                    log_probs->grad[static_cast<std::size_t>(t) * vocab + v] -= g * std::exp(acc - loglik);
                }
            }
        }
    };
    return node;
}

double ctc_loss_bruteforce(const TensorPtr& log_probs, const LabelSeq& labels) {
    check_log_probs(log_probs);
    check_labels(labels, log_probs->cols());
    const int t_len = log_probs->rows();
    const int vocab = log_probs->cols();
    if (std::pow(static_cast<double>(vocab), static_cast<double>(t_len)) > 1e7) {
        throw std::runtime_error("ctc_loss_bruteforce: V^T exceeds the 1e7 guard");
    }
    std::vector<int> path(static_cast<std::size_t>(t_len), 0);
    double total = 0.0;
    while (true) {
        if (collapse(path) == labels) {
            double lp = 0.0;
            for (int t = 0; t < t_len; ++t) lp += log_probs->at(t, path[static_cast<std::size_t>(t)]);
            total += std::exp(lp);
        }
        int i = t_len - 1;
        while (i >= 0 && path[static_cast<std::size_t>(i)] == vocab - 1) path[static_cast<std::size_t>(i--)] = 0;
        if (i < 0) break;
        ++path[static_cast<std::size_t>(i)];
    }
    if (total <= 0.0) return std::numeric_limits<double>::infinity();
    return -std::log(total);
}

LabelSeq greedy_decode(const TensorPtr& log_probs) {
    if (!log_probs || log_probs->ndim() != 2) throw std::runtime_error("greedy_decode: log_probs must be [T x V]");
    std::vector<int> path;
    path.reserve(static_cast<std::size_t>(log_probs->rows()));
    for (int t = 0; t < log_probs->rows(); ++t) {
        int best = 0;
        for (int v = 1; v < log_probs->cols(); ++v) {
            if (log_probs->at(t, v) > log_probs->at(t, best)) best = v;
        }
        path.push_back(best);
    }
    return collapse(path);
}

double cer(const LabelSeq& hyp, const LabelSeq& ref) {
    if (ref.empty()) throw std::runtime_error("cer: reference sequence is empty");
    const std::size_t n = hyp.size(), m = ref.size();
    std::vector<std::size_t> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = j;
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = i;
        for (std::size_t j = 1; j <= m; ++j) {
            const std::size_t sub = prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return static_cast<double>(prev[m]) / static_cast<double>(m);
}

std::vector<std::string> read_vocab(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open vocab file: " + path);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        tokens.push_back(line);
    }
    return tokens;
}

void write_vocab(const std::string& path, const std::vector<std::string>& tokens) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocab file: " + path);
    for (const auto& t : tokens) out << t << "\n";
}

LabelSeq tokenize(const std::string& text, const std::vector<std::string>& vocab) {
    LabelSeq out;
    std::size_t i = 0;
    while (i < text.size()) {
        int best = -1;
        std::size_t best_len = 0;
        for (std::size_t v = 0; v < vocab.size(); ++v) {
            const auto& tok = vocab[v];
            if (tok.empty() || tok.size() < best_len) continue;
            if (text.compare(i, tok.size(), tok) == 0 && tok.size() > best_len) {
                best = static_cast<int>(v) + 1;
                best_len = tok.size();
            }
        }
        if (best < 0) {
            throw std::runtime_error("tokenize: no vocabulary token matches text at byte " + std::to_string(i));
        }
        out.push_back(best);
        i += best_len;
    }
    return out;
}

std::string detokenize(const LabelSeq& labels, const std::vector<std::string>& vocab) {
    std::string out;
    for (int l : labels) {
        if (l < 1 || l > static_cast<int>(vocab.size())) {
            throw std::runtime_error("detokenize: id " + std::to_string(l) + " outside the vocabulary");
        }
        out += vocab[static_cast<std::size_t>(l - 1)];
    }
    return out;
}

}  // namespace pyramid
