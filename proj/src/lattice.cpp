#include "snt/lattice.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace snt {

namespace {

double logaddexp_d(double a, double b) {
  const double mx = std::max(a, b);
  if (std::isinf(mx) && mx < 0) return mx;
  return mx + std::log1p(std::exp(std::min(a, b) - mx));
}

}  // namespace

Tensor transducer_loss(Tape* tp, const Tensor& lat,
                       const std::vector<int>& target) {
  if (lat.ndim() != 3) {
    throw ContractError("transducer_loss: lattice must be {T,U+1,V}, got " +
                        lat.shape_str());
  }
  const int t_n = lat.dim(0);
  const int u_rows = lat.dim(1);
  const int v_n = lat.dim(2);
  const int u_n = static_cast<int>(target.size());
  if (t_n < 1) throw ContractError("transducer_loss: T must be >= 1");
  if (u_rows != u_n + 1) {
    throw ContractError("transducer_loss: lattice rows " +
                        std::to_string(u_rows) + " do not fit target length " +
                        std::to_string(u_n));
  }
  for (int y : target) {
    if (y <= kBlankId || y >= v_n) {
      throw ContractError("transducer_loss: token id " + std::to_string(y) +
                          " outside non-blank vocabulary [1," +
                          std::to_string(v_n - 1) + "]");
    }
  }

  auto pick = [&](int t, int u, int v) {
    return gather(tp, lat,
                  {(static_cast<int64_t>(t) * u_rows + u) * v_n + v});
  };
  auto blank_at = [&](int t, int u) { return pick(t, u, kBlankId); };
  auto emit_at = [&](int t, int u) { return pick(t, u, target[u]); };

  // alpha[u] holds the forward log-probability of consuming u target tokens
  // by frame t, rolled over t.
  std::vector<Tensor> alpha(u_n + 1);
  for (int t = 0; t < t_n; ++t) {
    std::vector<Tensor> next(u_n + 1);
    for (int u = 0; u <= u_n; ++u) {
      if (t == 0 && u == 0) {
        next[u] = Tensor::scalar(0.0);
        continue;
      }
      Tensor from_blank, from_emit;
      if (t > 0) from_blank = add(tp, alpha[u], blank_at(t - 1, u));
      if (u > 0) from_emit = add(tp, next[u - 1], emit_at(t, u - 1));
      if (from_blank.defined() && from_emit.defined()) {
        next[u] = logaddexp(tp, from_blank, from_emit);
      } else if (from_blank.defined()) {
        next[u] = from_blank;
      } else {
        next[u] = from_emit;
      }
    }
    alpha = std::move(next);
  }
  Tensor total = add(tp, alpha[u_n], blank_at(t_n - 1, u_n));
  return affine(tp, total, -1.0, 0.0);
}

Tensor lattice_posteriors(const Tensor& lat) {
  if (lat.ndim() != 3) {
    throw ContractError("lattice_posteriors: expected {T,U+1,V}, got " +
                        lat.shape_str());
  }
  return exp_op(nullptr, lat);
}

Hypothesis greedy_decode(const TransducerStepper& model,
                         int max_symbols_per_frame) {
  if (max_symbols_per_frame < 1) {
    throw ContractError("greedy_decode: max_symbols_per_frame must be >= 1");
  }
  Hypothesis hyp;
  std::vector<double> state = model.init_state();
  for (int t = 0; t < model.frames; ++t) {
    int emitted = 0;
    while (true) {
      const std::vector<double> lp = model.joint(t, state);
      int arg = 0;
      for (int v = 1; v < model.vocab; ++v) {
        if (lp[v] > lp[arg]) arg = v;
      }
      if (arg == kBlankId || emitted == max_symbols_per_frame) {
        hyp.score += lp[kBlankId];
        break;
      }
      hyp.tokens.push_back(arg);
      hyp.score += lp[arg];
      state = model.step(state, arg);
      ++emitted;
    }
  }
  return hyp;
}

namespace {

struct BeamHyp {
  std::vector<int> tokens;
  double score = 0.0;
  std::vector<double> state;
};

// Merge by token sequence; equal sequences imply equal predictor states.
void merge_hyp(std::map<std::vector<int>, BeamHyp>& set, BeamHyp&& h) {
  auto it = set.find(h.tokens);
  if (it == set.end()) {
    set.emplace(h.tokens, std::move(h));
  } else {
    it->second.score = logaddexp_d(it->second.score, h.score);
  }
}

std::vector<BeamHyp> top_k(std::map<std::vector<int>, BeamHyp>& set, int k) {
  std::vector<BeamHyp> all;
  all.reserve(set.size());
  for (auto& [_, h] : set) all.push_back(std::move(h));
  std::sort(all.begin(), all.end(), [](const BeamHyp& a, const BeamHyp& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
  });
  if (static_cast<int>(all.size()) > k) all.resize(static_cast<size_t>(k));
  return all;
}

}  // namespace

Hypothesis beam_decode(const TransducerStepper& model, int beam,
                       int max_symbols_per_frame) {
  if (beam < 1) throw ContractError("beam_decode: beam must be >= 1");
  std::vector<BeamHyp> front;
  front.push_back(BeamHyp{{}, 0.0, model.init_state()});

  for (int t = 0; t < model.frames; ++t) {
    std::map<std::vector<int>, BeamHyp> finished;  // advanced to frame t+1
    std::vector<BeamHyp> active = std::move(front);

    // Each level emits at most one symbol. Blank transitions (retiring the
    // hypothesis into `finished`) and token continuations compete for the
    // same beam slots; with beam 1 this reduces to the greedy blank-vs-emit
    // decision, with blank winning ties like the greedy argmax does.
    for (int level = 0; level <= max_symbols_per_frame && !active.empty();
         ++level) {
      struct Cand {
        std::vector<int> tokens;
        double score;
        size_t parent;  // index into `active`
        int token;      // kBlankId = retire
      };
      std::map<std::vector<int>, size_t> by_seq;  // continuation merging
      std::vector<Cand> cands;
      for (size_t pi = 0; pi < active.size(); ++pi) {
        const BeamHyp& h = active[pi];
        const std::vector<double> lp = model.joint(t, h.state);
        cands.push_back(Cand{h.tokens, h.score + lp[kBlankId], pi, kBlankId});
        if (level == max_symbols_per_frame) continue;
        for (int v = 1; v < model.vocab; ++v) {
          std::vector<int> seq = h.tokens;
          seq.push_back(v);
          const double sc = h.score + lp[v];
          auto it = by_seq.find(seq);
          if (it == by_seq.end()) {
            by_seq.emplace(seq, cands.size());
            cands.push_back(Cand{std::move(seq), sc, pi, v});
          } else {
            cands[it->second].score =
                logaddexp_d(cands[it->second].score, sc);
          }
        }
      }
      std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.token != b.token) return a.token < b.token;  // blank wins ties
        return a.tokens < b.tokens;
      });
      if (static_cast<int>(cands.size()) > beam) {
        cands.resize(static_cast<size_t>(beam));
      }
      std::vector<BeamHyp> next_active;
      for (Cand& c : cands) {
        if (c.token == kBlankId) {
          merge_hyp(finished,
                    BeamHyp{std::move(c.tokens), c.score,
                            active[c.parent].state});
        } else {
          next_active.push_back(
              BeamHyp{std::move(c.tokens), c.score,
                      model.step(active[c.parent].state, c.token)});
        }
      }
      active = std::move(next_active);
    }
    front = top_k(finished, beam);
  }

  Hypothesis best;
  best.score = -std::numeric_limits<double>::infinity();
  for (const BeamHyp& h : front) {
    if (h.score > best.score) {
      best.score = h.score;
      best.tokens = h.tokens;
    }
  }
  return best;
}

int edit_distance(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
  for (size_t i = 1; i <= n; ++i) {
    cur[0] = static_cast<int>(i);
    for (size_t j = 1; j <= m; ++j) {
      const int sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double word_error_rate(const std::vector<std::vector<int>>& refs,
                       const std::vector<std::vector<int>>& hyps) {
  if (refs.size() != hyps.size()) {
    throw ContractError("word_error_rate: " + std::to_string(refs.size()) +
                        " references vs " + std::to_string(hyps.size()) +
                        " hypotheses");
  }
  long long edits = 0, tokens = 0;
  for (size_t i = 0; i < refs.size(); ++i) {
    edits += edit_distance(refs[i], hyps[i]);
    tokens += static_cast<long long>(refs[i].size());
  }
  if (tokens == 0) {
    throw ContractError("word_error_rate: zero reference tokens");
  }
  return static_cast<double>(edits) / static_cast<double>(tokens);
}

}  // namespace snt
