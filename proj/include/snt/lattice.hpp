#pragma once

#include <functional>
#include <vector>

#include "snt/tensor.hpp"

namespace snt {

// Vocabulary index of the blank symbol, fixed across the whole project.
constexpr int kBlankId = 0;

// Joiner log-probabilities over the transducer output lattice. Every (t,u)
// slice is a normalized log-distribution over the vocabulary.
struct LatticeOutput {
  Tensor log_probs;  // shape {T, U+1, V}

  int frames() const { return log_probs.dim(0); }
  int targets() const { return log_probs.dim(1) - 1; }
  int vocab() const { return log_probs.dim(2); }
  double at(int t, int u, int v) const {
    return log_probs.data()[(static_cast<size_t>(t) * log_probs.dim(1) + u) *
                                log_probs.dim(2) +
                            v];
  }
};

// -log P(target | lattice), marginalized over all monotonic blank/emit
// alignments by a forward recursion. Differentiable through the tape.
Tensor transducer_loss(Tape* tp, const Tensor& lattice_logprobs,
                       const std::vector<int>& target);

// Elementwise exponentiation of the lattice; each node sums to one.
Tensor lattice_posteriors(const Tensor& lattice_logprobs);

struct Hypothesis {
  std::vector<int> tokens;  // non-blank ids
  double score = 0.0;       // accumulated log-probability
};

// Minimal stepping interface for frame-synchronous decoding. The predictor
// state is an opaque double vector derived deterministically from the token
// prefix; `joint` returns a normalized log-distribution over the vocabulary.
struct TransducerStepper {
  int frames = 0;
  int vocab = 0;
  std::function<std::vector<double>()> init_state;
  std::function<std::vector<double>(const std::vector<double>&, int)> step;
  std::function<std::vector<double>(int, const std::vector<double>&)> joint;
};

Hypothesis greedy_decode(const TransducerStepper& model,
                         int max_symbols_per_frame);

// Beam search with blank-terminated hypotheses; hypotheses with identical
// token sequences merge by logaddexp. beam=1 reproduces greedy_decode.
Hypothesis beam_decode(const TransducerStepper& model, int beam = 5,
                       int max_symbols_per_frame = 8);

// Corpus-level word error rate: total edit distance over total reference
// length.
double word_error_rate(const std::vector<std::vector<int>>& refs,
                       const std::vector<std::vector<int>>& hyps);

// Unit-cost Levenshtein distance between token sequences.
int edit_distance(const std::vector<int>& a, const std::vector<int>& b);

}  // namespace snt
