#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <utility>
#include <vector>

#include "draft/model.hpp"
#include "draft/tensor.hpp"

namespace draft {

/// Lags {s, ..., s + k - 1}; p is the norm order (1 or 2).
struct ShiftSpec {
  std::size_t s = 1;
  std::size_t k = 1;
  int p = 1;
};

enum class Reduction { sum, mean };

/// Concatenated groups of `factor` raw frames: B x ceil(T / factor) x (factor D).
/// Only complete groups count as valid; frames beyond a sequence's length are
/// zeroed first so padding never leaks into a group.
struct Stacked {
  Tensor z;
  std::vector<std::size_t> lengths;
};

Stacked stack_frames(const Tensor& x, const std::vector<std::size_t>& lengths, std::size_t factor);

/// O_n on one T' x F sequence: (z[0 .. T'-n), z[n .. T')). Empty when n >= T'.
std::pair<Tensor, Tensor> shift_targets(const Tensor& z, std::size_t n);

/// Sum over valid t of |Y[t] - Z[t + n]|_p (p = 2 is squared). Y is
/// B x T_y x F with T_y >= valid - n; Z is B x T' x F with per-sequence valid
/// lengths. `mean` divides by the number of valid pairs.
Tensor apc_loss(const Tensor& Y, const Tensor& Z, std::size_t n, int p, const std::vector<std::size_t>& valid,
                Reduction r = Reduction::sum);

/// Shared hidden states, one generator per lag.
Tensor eapc_loss(const Backbone& model, const Tensor& x, const std::vector<std::size_t>& lengths, const ShiftSpec& spec,
                 Reduction r = Reduction::sum, const ForwardOptions& opt = {});
/// Forward-direction E-APC plus reverse-direction E-APC on time-reversed input.
Tensor ebiapc_loss(const BiApcPair& pair, const Tensor& x, const std::vector<std::size_t>& lengths,
                   const ShiftSpec& spec, Reduction r = Reduction::sum, const ForwardOptions& opt = {});

struct MaskConfig {
  double mask_prob = 0.065;
  std::size_t span = 10;
  bool force_one = true;
};

/// One row per sequence, B x T. Spans start independently with mask_prob and
/// are clipped at the valid length; padding is never masked. With force_one,
/// a sequence of at least `span` frames always gets one span.
BoolMask sample_masks(const std::vector<std::size_t>& lengths, std::size_t T, const MaskConfig& cfg,
                      std::mt19937_64& rng);
BoolMask sample_masks(const std::vector<std::size_t>& lengths, std::size_t T, const MaskConfig& cfg,
                      std::uint64_t seed);

/// Replaces masked positions of B x T x d latents with the mask embedding.
Tensor apply_mask(const Tensor& z, const BoolMask& mask, const Tensor& embedding);

/// Mean over U rows of -log softmax over [sim(y, pos), sim(y, neg_1..K)] / tau
/// with cosine similarity. y, pos are U x C; neg is U x K x C.
Tensor contrastive_loss(const Tensor& y, const Tensor& pos, const Tensor& neg, double tau);

struct Quantized {
  Tensor q;      // N x C, exact codebook rows in the forward pass
  Tensor soft;   // N x V Gumbel-softmax weights (gradient path)
  Tensor probs;  // N x V softmax(logits) without noise, for diversity
  std::vector<std::size_t> codes;
};

/// Hard Gumbel-softmax sample, straight-through to the soft weights.
Quantized gumbel_quantize(const Tensor& logits, const Tensor& codebook, double tau, std::mt19937_64& rng);
Quantized gumbel_quantize(const Tensor& logits, const Tensor& codebook, double tau, std::uint64_t seed);

/// (V - exp(H(mean_n probs))) / V with natural entropy.
Tensor diversity_loss(const Tensor& probs);

/// Linear anneal from hi to lo over total steps.
double anneal(double hi, double lo, std::size_t step, std::size_t total);

struct KMeansModel {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<double> centroids;  // k x dim
  std::vector<double> distortion;  // per Lloyd iteration, after the update step
};

/// k-means++ seeding and Lloyd iterations on N x dim row-major points. An
/// empty cluster is re-seeded with the point farthest from its centroid.
KMeansModel kmeans_fit(const std::vector<double>& points, std::size_t dim, std::size_t k, std::size_t max_iters,
                       std::uint64_t seed);
/// Nearest centroid per row; ties go to the lowest index.
std::vector<std::size_t> kmeans_assign(const KMeansModel& m, const std::vector<double>& points);
double kmeans_distortion(const KMeansModel& m, const std::vector<double>& points);

/// alpha * mean_masked CE + (1 - alpha) * mean_unmasked CE over valid frames.
/// logits B x T x K, labels B*T (ignored beyond each length), mask B x T.
Tensor hubert_loss(const Tensor& logits, const std::vector<std::size_t>& labels, const BoolMask& mask,
                   const std::vector<std::size_t>& lengths, double alpha);

struct ContrastiveConfig {
  MaskConfig mask{0.2, 2, true};
  std::size_t negatives = 10;
  double similarity_tau = 0.1;
  double gumbel_tau = 2.0;      // current value; training anneals it
  double gumbel_tau_min = 0.5;  // annealing end point
  double diversity_weight = 0.1;
};

struct ContrastiveTerms {
  Tensor total;
  Tensor contrastive;
  Tensor diversity;
  std::size_t masked = 0;
};

/// Masked latent prediction against Gumbel-quantized targets. Negatives come
/// from other masked positions of the same sequence, or other valid positions
/// when fewer than two are masked.
ContrastiveTerms contrastive_objective(const Backbone& model, const Tensor& x, const std::vector<std::size_t>& lengths,
                                       InputKind kind, const ContrastiveConfig& cfg, std::mt19937_64& rng,
                                       const ForwardOptions& opt = {});

struct HubertConfig {
  MaskConfig mask{0.2, 2, true};
  double alpha = 1.0;
};

/// Frame labels from k-means over stacked raw frames, one per subsampled step
/// (ceil(len / factor) of them; the last group is zero-filled).
std::vector<std::size_t> hubert_labels(const KMeansModel& km, const Tensor& features, std::size_t len,
                                       std::size_t factor);

Tensor hubert_objective(const Backbone& model, const Tensor& x, const std::vector<std::size_t>& lengths,
                        const std::vector<std::size_t>& labels, InputKind kind, const HubertConfig& cfg,
                        std::mt19937_64& rng, const ForwardOptions& opt = {});

}  // namespace draft
