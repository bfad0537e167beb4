#pragma once

#include <string>
#include <vector>

#include "pyramid/tensor.hpp"

namespace pyramid {

// Token ids in [1, vocab_size-1]; id 0 is the blank.
using LabelSeq = std::vector<int>;

// Negative log-likelihood of the label under the CTC alignment model,
// differentiable w.r.t. log_probs [T x V] (rows must be log-normalized).
// Throws when T is too short to emit the label.
TensorPtr ctc_loss(const TensorPtr& log_probs, const LabelSeq& labels);

// Oracle: enumerates every length-T path and sums those collapsing to the
// label. Returns +inf when no path exists. Refuses V^T > 1e7.
double ctc_loss_bruteforce(const TensorPtr& log_probs, const LabelSeq& labels);

// Per-frame argmax (ties -> lowest id), collapse repeats, drop blanks.
LabelSeq greedy_decode(const TensorPtr& log_probs);

// Levenshtein(hyp, ref) / |ref| with unit costs; ref must be non-empty.
double cer(const LabelSeq& hyp, const LabelSeq& ref);

// Vocabulary file: UTF-8, one token per line, token id = line number + 1
// (id 0 is the implicit blank and has no line).
std::vector<std::string> read_vocab(const std::string& path);
void write_vocab(const std::string& path, const std::vector<std::string>& tokens);

// Greedy longest-match tokenization; throws on text no token covers.
LabelSeq tokenize(const std::string& text, const std::vector<std::string>& vocab);
std::string detokenize(const LabelSeq& labels, const std::vector<std::string>& vocab);

}  // namespace pyramid
