#include "draft/ctc.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <memory>
#include <set>
#include <stdexcept>

namespace draft {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

double lse(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

// Frames needed to emit the target: one per token plus a blank between repeats.
std::size_t min_frames(const std::vector<std::size_t>& target) {
  std::size_t n = target.size();
  for (std::size_t i = 1; i < target.size(); ++i)
    if (target[i] == target[i - 1]) ++n;
  return n;
}

}  // namespace

Vocab numeric_vocab(std::size_t n_tokens) {
  Vocab v{{"<blank>"}};
  for (std::size_t i = 1; i <= n_tokens; ++i) v.tokens.push_back(std::to_string(i));
  return v;
}

void validate_vocab(const Vocab& v) {
  if (v.tokens.empty()) throw std::invalid_argument("vocabulary is empty");
  std::set<std::string> seen(v.tokens.begin(), v.tokens.end());
  if (seen.size() != v.tokens.size()) throw std::invalid_argument("vocabulary tokens must be unique");
}

Tensor ctc_loss(const Tensor& log_probs, const std::vector<std::size_t>& target, std::size_t input_len) {
  if (log_probs.rank() != 2) throw std::invalid_argument("ctc_loss expects T x V log-probabilities");
  const std::size_t V = log_probs.dim(1);
  if (input_len > log_probs.dim(0)) throw std::invalid_argument("input_len exceeds the number of frames");
  for (auto tok : target) {
    if (tok == Vocab::blank) throw std::invalid_argument("target contains the blank id");
    if (tok >= V) throw std::out_of_range("target token out of vocabulary");
  }
  if (min_frames(target) > input_len) {
    std::cerr << "warning: ctc target of length " << target.size() << " is infeasible in " << input_len
              << " frames\n";
    return Tensor::scalar(std::numeric_limits<double>::infinity(), log_probs.dtype());
  }
  const std::size_t T = input_len;
  if (T == 0) return Tensor::scalar(0.0, log_probs.dtype());

  // Blank-interleaved labels.
  const std::size_t S = 2 * target.size() + 1;
  std::vector<std::size_t> lab(S, Vocab::blank);
  for (std::size_t i = 0; i < target.size(); ++i) lab[2 * i + 1] = target[i];
  auto skip = [&](std::size_t s) { return s >= 2 && lab[s] != Vocab::blank && lab[s] != lab[s - 2]; };

  const auto lp = log_probs.data();
  auto emit = [&](std::size_t t, std::size_t s) { return lp[t * V + lab[s]]; };
  std::vector<double> alpha(T * S, kNegInf), beta(T * S, kNegInf);
  alpha[0] = emit(0, 0);
  if (S > 1) alpha[1] = emit(0, 1);
  for (std::size_t t = 1; t < T; ++t)
    for (std::size_t s = 0; s < S; ++s) {
      double a = alpha[(t - 1) * S + s];
      if (s >= 1) a = lse(a, alpha[(t - 1) * S + s - 1]);
      if (skip(s)) a = lse(a, alpha[(t - 1) * S + s - 2]);
      if (a != kNegInf) alpha[t * S + s] = a + emit(t, s);
    }
  beta[(T - 1) * S + S - 1] = emit(T - 1, S - 1);
  if (S > 1) beta[(T - 1) * S + S - 2] = emit(T - 1, S - 2);
  for (std::size_t t = T - 1; t-- > 0;)
    for (std::size_t s = 0; s < S; ++s) {
      double b = beta[(t + 1) * S + s];
      if (s + 1 < S) b = lse(b, beta[(t + 1) * S + s + 1]);
      if (s + 2 < S && skip(s + 2)) b = lse(b, beta[(t + 1) * S + s + 2]);
      if (b != kNegInf) beta[t * S + s] = b + emit(t, s);
    }
  double log_z = alpha[(T - 1) * S + S - 1];
  if (S > 1) log_z = lse(log_z, alpha[(T - 1) * S + S - 2]);

  Tensor out = Tensor::scalar(-log_z, log_probs.dtype());
  if (needs_grad(log_probs)) {
    // d(-log Z)/d lp[t][k] = -sum_{s: lab[s] = k} exp(alpha + beta - lp[t][k] - log Z).
    auto grad = std::make_shared<std::vector<double>>(log_probs.numel(), 0.0);
    std::vector<double> acc(V);
    for (std::size_t t = 0; t < T; ++t) {
      std::fill(acc.begin(), acc.end(), kNegInf);
      for (std::size_t s = 0; s < S; ++s) acc[lab[s]] = lse(acc[lab[s]], alpha[t * S + s] + beta[t * S + s]);
      for (std::size_t k = 0; k < V; ++k)
        if (acc[k] != kNegInf) (*grad)[t * V + k] = -std::exp(acc[k] - lp[t * V + k] - log_z);
    }
    Tape::active()->record("ctc_loss", {log_probs}, out, [log_probs, grad](std::span<const double> g) {
      std::vector<double> scaled(*grad);
      for (double& x : scaled) x *= g[0];
      accumulate_grad(log_probs, scaled);
    });
  }
  return out;
}

CtcBatchLoss ctc_batch_loss(const Tensor& log_probs, const std::vector<std::vector<std::size_t>>& targets,
                            const std::vector<std::size_t>& input_lens) {
  if (log_probs.rank() != 3) throw std::invalid_argument("ctc_batch_loss expects B x T x V log-probabilities");
  const std::size_t B = log_probs.dim(0), T = log_probs.dim(1), V = log_probs.dim(2);
  if (targets.size() != B || input_lens.size() != B) throw std::invalid_argument("one target and length per utterance");
  CtcBatchLoss out;
  Tensor norm, raw;
  std::size_t feasible = 0;
  for (std::size_t b = 0; b < B; ++b) {
    const Tensor l = ctc_loss(reshape(slice(log_probs, 0, b, b + 1), {T, V}), targets[b], input_lens[b]);
    if (!std::isfinite(l.item())) {
      ++out.infeasible;
      continue;
    }
    const Tensor n = scale(l, 1.0 / static_cast<double>(std::max<std::size_t>(1, targets[b].size())));
    raw = raw.defined() ? add(raw, l) : l;
    norm = norm.defined() ? add(norm, n) : n;
    ++feasible;
  }
  if (feasible == 0) {
    out.normalized = Tensor::scalar(0.0, log_probs.dtype());
    out.sum = Tensor::scalar(0.0, log_probs.dtype());
    return out;
  }
  out.normalized = scale(norm, 1.0 / static_cast<double>(feasible));
  out.sum = raw;
  return out;
}

Hypothesis ctc_greedy_decode(const Tensor& log_probs, std::size_t input_len) {
  if (log_probs.rank() != 2) throw std::invalid_argument("ctc_greedy_decode expects T x V log-probabilities");
  const std::size_t V = log_probs.dim(1);
  if (input_len > log_probs.dim(0)) throw std::invalid_argument("input_len exceeds the number of frames");
  const auto lp = log_probs.data();
  Hypothesis h;
  std::size_t prev = Vocab::blank;
  for (std::size_t t = 0; t < input_len; ++t) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < V; ++k)
      if (lp[t * V + k] > lp[t * V + best]) best = k;
    h.score += lp[t * V + best];
    if (best != Vocab::blank && best != prev) h.tokens.push_back(best);
    prev = best;
  }
  return h;
}

std::vector<Hypothesis> ctc_greedy_decode_batch(const Tensor& log_probs, const std::vector<std::size_t>& input_lens) {
  if (log_probs.rank() != 3 || input_lens.size() != log_probs.dim(0))
    throw std::invalid_argument("ctc_greedy_decode_batch expects B x T x V and B lengths");
  const std::size_t T = log_probs.dim(1), V = log_probs.dim(2);
  std::vector<Hypothesis> out;
  for (std::size_t b = 0; b < input_lens.size(); ++b) {
    const auto d = log_probs.data().subspan(b * T * V, T * V);
    out.push_back(ctc_greedy_decode(Tensor::from({T, V}, {d.begin(), d.end()}, DType::f64), input_lens[b]));
  }
  return out;
}

std::size_t edit_distance(const std::vector<std::size_t>& ref, const std::vector<std::size_t>& hyp) {
  std::vector<std::size_t> row(hyp.size() + 1);
  for (std::size_t j = 0; j <= hyp.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (ref[i - 1] == hyp[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[hyp.size()];
}

double error_rate(const std::vector<std::vector<std::size_t>>& refs,
                  const std::vector<std::vector<std::size_t>>& hyps) {
  if (refs.size() != hyps.size()) throw std::invalid_argument("reference and hypothesis counts differ");
  std::size_t edits = 0, mass = 0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    edits += edit_distance(refs[i], hyps[i]);
    mass += refs[i].size();
  }
  if (mass == 0) throw std::invalid_argument("zero reference mass");
  return static_cast<double>(edits) / static_cast<double>(mass);
}

}  // namespace draft
