#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "draft/tensor.hpp"

namespace draft {

/// Token list with the blank at id 0.
struct Vocab {
  std::vector<std::string> tokens;

  std::size_t size() const { return tokens.size(); }
  static constexpr std::size_t blank = 0;
};

/// "<blank>" followed by "1".."n"; the synthetic corpora use these ids.
Vocab numeric_vocab(std::size_t n_tokens);
/// Throws std::invalid_argument on duplicates or an empty list.
void validate_vocab(const Vocab& v);

struct Hypothesis {
  std::vector<std::size_t> tokens;
  double score = 0.0;  // sum of the argmax log-probabilities
};

/// Negative log-likelihood of `target` under the first input_len rows of
/// T x V log-probabilities. An infeasible target gives +inf with a warning
/// and contributes no gradient.
Tensor ctc_loss(const Tensor& log_probs, const std::vector<std::size_t>& target, std::size_t input_len);

struct CtcBatchLoss {
  Tensor normalized;  // mean over feasible utterances of loss / max(1, |target|)
  Tensor sum;         // sum of raw losses over feasible utterances
  std::size_t infeasible = 0;
};

/// B x T x V log-probabilities.
CtcBatchLoss ctc_batch_loss(const Tensor& log_probs, const std::vector<std::vector<std::size_t>>& targets,
                            const std::vector<std::size_t>& input_lens);

/// Per-frame argmax (ties to the lowest id), repeats collapsed, blanks removed.
Hypothesis ctc_greedy_decode(const Tensor& log_probs, std::size_t input_len);
std::vector<Hypothesis> ctc_greedy_decode_batch(const Tensor& log_probs, const std::vector<std::size_t>& input_lens);

std::size_t edit_distance(const std::vector<std::size_t>& ref, const std::vector<std::size_t>& hyp);
/// Total edits over total reference tokens.
double error_rate(const std::vector<std::vector<std::size_t>>& refs, const std::vector<std::vector<std::size_t>>& hyps);

}  // namespace draft
