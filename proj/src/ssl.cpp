#include "draft/ssl.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace draft {

namespace {

Tensor ones_within(const std::vector<std::size_t>& lengths, std::size_t T, DType dtype) {
  std::vector<double> v(lengths.size() * T, 0.0);
  for (std::size_t b = 0; b < lengths.size(); ++b)
    for (std::size_t t = 0; t < std::min(lengths[b], T); ++t) v[b * T + t] = 1.0;
  return Tensor::from({lengths.size(), T, 1}, std::move(v), dtype);
}

Tensor accumulate(const Tensor& acc, const Tensor& term) { return acc.defined() ? add(acc, term) : term; }

Tensor zero_loss(DType dtype) { return Tensor::scalar(0.0, dtype); }

}  // namespace

Stacked stack_frames(const Tensor& x, const std::vector<std::size_t>& lengths, std::size_t factor) {
  if (x.rank() != 3) throw std::invalid_argument("stack_frames expects B x T x D");
  if (factor == 0) throw std::invalid_argument("stack factor must be positive");
  if (lengths.size() != x.dim(0)) throw std::invalid_argument("one length per sequence is required");
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  const std::size_t Tp = (T + factor - 1) / factor;
  Tensor m = mul(x, ones_within(lengths, T, x.dtype()));
  if (Tp * factor > T) m = concat({m, Tensor::zeros({B, Tp * factor - T, D}, x.dtype())}, 1);
  Stacked s{reshape(m, {B, Tp, factor * D}), {}};
  for (auto l : lengths) s.lengths.push_back(l / factor);
  return s;
}

std::pair<Tensor, Tensor> shift_targets(const Tensor& z, std::size_t n) {
  if (z.rank() != 2) throw std::invalid_argument("shift_targets expects T x F");
  if (n == 0) throw std::invalid_argument("shift must be at least 1");
  const std::size_t T = z.dim(0), F = z.dim(1);
  if (n >= T) return {Tensor::zeros({0, F}, z.dtype()), Tensor::zeros({0, F}, z.dtype())};
  return {slice(z, 0, 0, T - n), slice(z, 0, n, T)};
}

Tensor apc_loss(const Tensor& Y, const Tensor& Z, std::size_t n, int p, const std::vector<std::size_t>& valid,
                Reduction r) {
  if (p != 1 && p != 2) throw std::invalid_argument("apc norm order must be 1 or 2");
  if (n == 0) throw std::invalid_argument("shift must be at least 1");
  if (Y.rank() != 3 || Z.rank() != 3 || Y.dim(0) != Z.dim(0) || Y.dim(2) != Z.dim(2))
    throw std::invalid_argument("apc_loss shape mismatch: " + shape_str(Y.shape()) + " vs " + shape_str(Z.shape()));
  if (valid.size() != Z.dim(0)) throw std::invalid_argument("apc_loss: one length per sequence is required");
  const std::size_t B = Z.dim(0), Ty = Y.dim(1), Tz = Z.dim(1), F = Z.dim(2);
  std::vector<std::size_t> yi, zi;
  for (std::size_t b = 0; b < B; ++b) {
    if (valid[b] > Tz) throw std::invalid_argument("apc_loss: valid length exceeds targets");
    for (std::size_t t = 0; t + n < valid[b]; ++t) {
      if (t >= Ty) throw std::invalid_argument("apc_loss shape mismatch: predictions too short");
      yi.push_back(b * Ty + t);
      zi.push_back(b * Tz + t + n);
    }
  }
  if (yi.empty()) return zero_loss(Y.dtype() == DType::f64 || Z.dtype() == DType::f64 ? DType::f64 : DType::f32);
  const Tensor d = sub(gather_rows(reshape(Y, {B * Ty, F}), yi), gather_rows(reshape(Z, {B * Tz, F}), zi));
  Tensor s = sum(p == 1 ? abs(d) : mul(d, d));
  if (r == Reduction::mean) s = scale(s, 1.0 / static_cast<double>(yi.size()));
  return s;
}

Tensor eapc_loss(const Backbone& model, const Tensor& x, const std::vector<std::size_t>& lengths, const ShiftSpec& spec,
                 Reduction r, const ForwardOptions& opt) {
  if (spec.s == 0 || spec.k == 0) throw std::invalid_argument("shift spec needs s >= 1 and k >= 1");
  if (model.generators.size() != spec.k)
    throw std::invalid_argument("generator count " + std::to_string(model.generators.size()) + " != k = " +
                                std::to_string(spec.k));
  const Encoded h = forward(model, x, lengths, InputKind::features, opt);
  const Stacked z = stack_frames(x, lengths, model.cfg.subsample_factor);
  Tensor acc;
  for (std::size_t i = 0; i < spec.k; ++i)
    acc = accumulate(acc, apc_loss(generator_forward(model, i, h.hidden), z.z, spec.s + i, spec.p, z.lengths, r));
  return acc;
}

Tensor ebiapc_loss(const BiApcPair& pair, const Tensor& x, const std::vector<std::size_t>& lengths,
                   const ShiftSpec& spec, Reduction r, const ForwardOptions& opt) {
  return add(eapc_loss(pair.fwd, x, lengths, spec, r, opt),
             eapc_loss(pair.rev, reverse_within_lengths(x, lengths), lengths, spec, r, opt));
}

BoolMask sample_masks(const std::vector<std::size_t>& lengths, std::size_t T, const MaskConfig& cfg,
                      std::mt19937_64& rng) {
  if (cfg.mask_prob < 0.0 || cfg.mask_prob > 1.0) throw std::invalid_argument("mask_prob must be in [0, 1]");
  std::vector<std::uint8_t> v(lengths.size() * T, 0);
  std::bernoulli_distribution start(cfg.mask_prob);
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    const std::size_t len = std::min(lengths[b], T);
    auto row = v.begin() + static_cast<long>(b * T);
    bool any = false;
    for (std::size_t t = 0; t < len; ++t) {
      if (!start(rng)) continue;
      for (std::size_t u = t; u < std::min(t + cfg.span, len); ++u) row[static_cast<long>(u)] = 1;
      any = any || cfg.span > 0;
    }
    if (!any && cfg.force_one && cfg.span > 0 && len >= cfg.span) {
      const std::size_t t = std::uniform_int_distribution<std::size_t>(0, len - cfg.span)(rng);
      for (std::size_t u = t; u < t + cfg.span; ++u) row[static_cast<long>(u)] = 1;
    }
  }
  return BoolMask({lengths.size(), T}, std::move(v));
}

BoolMask sample_masks(const std::vector<std::size_t>& lengths, std::size_t T, const MaskConfig& cfg,
                      std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_masks(lengths, T, cfg, rng);
}

Tensor apply_mask(const Tensor& z, const BoolMask& mask, const Tensor& embedding) {
  if (z.rank() != 3 || mask.shape != Shape{z.dim(0), z.dim(1)} || embedding.shape() != Shape{z.dim(2)})
    throw std::invalid_argument("apply_mask shape mismatch");
  std::vector<double> m(mask.values.begin(), mask.values.end()), keep(m.size());
  for (std::size_t i = 0; i < m.size(); ++i) keep[i] = 1.0 - m[i];
  const Shape s{z.dim(0), z.dim(1), 1};
  return add(mul(z, Tensor::from(s, keep, z.dtype())), mul(Tensor::from(s, m, z.dtype()), embedding));
}

Tensor contrastive_loss(const Tensor& y, const Tensor& pos, const Tensor& neg, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("temperature must be positive");
  if (y.rank() != 2 || pos.shape() != y.shape() || neg.rank() != 3 || neg.dim(0) != y.dim(0) || neg.dim(2) != y.dim(1))
    throw std::invalid_argument("contrastive_loss shape mismatch");
  const std::size_t U = y.dim(0), K = neg.dim(1), C = y.dim(1);
  if (U == 0) return zero_loss(y.dtype());
  if (K == 0) throw std::invalid_argument("contrastive_loss needs at least one negative");
  std::vector<std::size_t> rep(U * K);
  for (std::size_t u = 0; u < U; ++u)
    for (std::size_t k = 0; k < K; ++k) rep[u * K + k] = u;
  const Tensor sp = reshape(cosine_similarity(y, pos), {U, 1});
  const Tensor sn = reshape(cosine_similarity(gather_rows(y, rep), reshape(neg, {U * K, C})), {U, K});
  const Tensor logits = scale(concat({sp, sn}, 1), 1.0 / tau);
  return mean(cross_entropy(logits, std::vector<std::size_t>(U, 0)));
}

Quantized gumbel_quantize(const Tensor& logits, const Tensor& codebook, double tau, std::mt19937_64& rng) {
  if (!(tau > 0.0)) throw std::invalid_argument("gumbel temperature must be positive");
  if (codebook.rank() != 2 || codebook.dim(0) == 0) throw std::invalid_argument("codebook must be non-empty V x C");
  if (logits.rank() != 2 || logits.dim(1) != codebook.dim(0)) throw std::invalid_argument("logits must be N x V");
  const std::size_t N = logits.dim(0), V = logits.dim(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> g(N * V);
  for (auto& x : g) x = -std::log(-std::log(std::max(u(rng), std::numeric_limits<double>::min())));
  const Tensor noisy = add(logits, Tensor::from({N, V}, g, logits.dtype()));
  Quantized out;
  out.soft = softmax(scale(noisy, 1.0 / tau), 1);
  std::vector<double> hard(N * V, 0.0);
  const auto nd = noisy.data();
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t best = 0;
    for (std::size_t v = 1; v < V; ++v)
      if (nd[n * V + v] > nd[n * V + best]) best = v;
    hard[n * V + best] = 1.0;
    out.codes.push_back(best);
  }
  out.q = matmul(straight_through(Tensor::from({N, V}, hard, logits.dtype()), out.soft), codebook);
  out.probs = softmax(logits, 1);
  return out;
}

Quantized gumbel_quantize(const Tensor& logits, const Tensor& codebook, double tau, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return gumbel_quantize(logits, codebook, tau, rng);
}

Tensor diversity_loss(const Tensor& probs) {
  if (probs.rank() != 2 || probs.dim(0) == 0) throw std::invalid_argument("diversity_loss expects non-empty N x V");
  const double V = static_cast<double>(probs.dim(1));
  const Tensor pbar = mean(probs, 0);
  const Tensor entropy = neg(sum(mul(pbar, log(add_scalar(pbar, 1e-30)))));
  return add_scalar(scale(exp(entropy), -1.0 / V), 1.0);
}

double anneal(double hi, double lo, std::size_t step, std::size_t total) {
  if (total == 0) return lo;
  const double f = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return hi + (lo - hi) * f;
}

namespace {

double sqdist(const double* a, const double* b, std::size_t d) {
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s;
}

std::size_t nearest(const KMeansModel& m, const double* p, double* dist = nullptr) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < m.k; ++c) {
    const double d = sqdist(p, &m.centroids[c * m.dim], m.dim);
    if (d < bd) {
      bd = d;
      best = c;
    }
  }
  if (dist) *dist = bd;
  return best;
}

}  // namespace

KMeansModel kmeans_fit(const std::vector<double>& points, std::size_t dim, std::size_t k, std::size_t max_iters,
                       std::uint64_t seed) {
  if (dim == 0 || k == 0) throw std::invalid_argument("kmeans needs dim >= 1 and K >= 1");
  if (points.size() % dim != 0) throw std::invalid_argument("points are not a multiple of dim");
  const std::size_t N = points.size() / dim;
  if (N < k) throw std::invalid_argument("kmeans needs N >= K");
  std::mt19937_64 rng(seed);
  KMeansModel m{k, dim, {}, {}};
  m.centroids.reserve(k * dim);

  // k-means++ seeding.
  std::vector<std::uint8_t> chosen(N, 0);
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, N - 1)(rng);
  chosen[first] = 1;
  m.centroids.insert(m.centroids.end(), points.begin() + first * dim, points.begin() + (first + 1) * dim);
  std::vector<double> d2(N);
  for (std::size_t i = 0; i < N; ++i) d2[i] = sqdist(&points[i * dim], &points[first * dim], dim);
  for (std::size_t c = 1; c < k; ++c) {
    double total = 0.0;
    for (std::size_t i = 0; i < N; ++i) total += chosen[i] ? 0.0 : d2[i];
    std::size_t pick = N;
    if (total > 0.0) {
      double r = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (std::size_t i = 0; i < N; ++i) {
        if (chosen[i]) continue;
        pick = i;
        r -= d2[i];
        if (r < 0.0) break;
      }
    } else {
      std::vector<std::size_t> rest;
      for (std::size_t i = 0; i < N; ++i)
        if (!chosen[i]) rest.push_back(i);
      pick = rest[std::uniform_int_distribution<std::size_t>(0, rest.size() - 1)(rng)];
    }
    chosen[pick] = 1;
    m.centroids.insert(m.centroids.end(), points.begin() + pick * dim, points.begin() + (pick + 1) * dim);
    for (std::size_t i = 0; i < N; ++i) d2[i] = std::min(d2[i], sqdist(&points[i * dim], &points[pick * dim], dim));
  }

  std::vector<std::size_t> assign(N, k), prev;
  std::vector<double> dist(N);
  for (std::size_t it = 0; it < max_iters; ++it) {
    prev = assign;
    for (std::size_t i = 0; i < N; ++i) assign[i] = nearest(m, &points[i * dim], &dist[i]);
    std::vector<std::size_t> count(k, 0);
    for (auto a : assign) ++count[a];
    for (std::size_t c = 0; c < k; ++c) {
      if (count[c] > 0) continue;
      // Re-seed from the point farthest from its centroid, among clusters
      // that can spare one.
      std::size_t far = N;
      for (std::size_t i = 0; i < N; ++i)
        if (count[assign[i]] > 1 && (far == N || dist[i] > dist[far])) far = i;
      if (far == N) continue;
      --count[assign[far]];
      assign[far] = c;
      count[c] = 1;
      dist[far] = 0.0;
    }
    std::vector<double> sums(k * dim, 0.0);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t j = 0; j < dim; ++j) sums[assign[i] * dim + j] += points[i * dim + j];
    for (std::size_t c = 0; c < k; ++c)
      if (count[c] > 0)
        for (std::size_t j = 0; j < dim; ++j) m.centroids[c * dim + j] = sums[c * dim + j] / static_cast<double>(count[c]);
    m.distortion.push_back(kmeans_distortion(m, points));
    if (assign == prev) break;
  }
  return m;
}

std::vector<std::size_t> kmeans_assign(const KMeansModel& m, const std::vector<double>& points) {
  if (m.dim == 0 || points.size() % m.dim != 0) throw std::invalid_argument("points do not match centroid dim");
  std::vector<std::size_t> out(points.size() / m.dim);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = nearest(m, &points[i * m.dim]);
  return out;
}

double kmeans_distortion(const KMeansModel& m, const std::vector<double>& points) {
  double s = 0.0, d = 0.0;
  for (std::size_t i = 0; i < points.size() / m.dim; ++i) {
    nearest(m, &points[i * m.dim], &d);
    s += d;
  }
  return s;
}

Tensor hubert_loss(const Tensor& logits, const std::vector<std::size_t>& labels, const BoolMask& mask,
                   const std::vector<std::size_t>& lengths, double alpha) {
  if (alpha < 0.0 || alpha > 1.0) throw std::invalid_argument("alpha must be in [0, 1]");
  if (logits.rank() != 3) throw std::invalid_argument("hubert_loss expects B x T x K logits");
  const std::size_t B = logits.dim(0), T = logits.dim(1), K = logits.dim(2);
  if (labels.size() != B * T || mask.shape != Shape{B, T} || lengths.size() != B)
    throw std::invalid_argument("hubert_loss shape mismatch");
  std::vector<std::size_t> mi, ml, ui, ul;
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < std::min(lengths[b], T); ++t) {
      const std::size_t i = b * T + t;
      (mask.at(i) ? mi : ui).push_back(i);
      (mask.at(i) ? ml : ul).push_back(labels[i]);
    }
  const Tensor flat = reshape(logits, {B * T, K});
  Tensor acc;
  auto term = [&](const std::vector<std::size_t>& idx, const std::vector<std::size_t>& lab, double w) {
    if (w == 0.0 || idx.empty()) return;
    acc = accumulate(acc, scale(mean(cross_entropy(gather_rows(flat, idx), lab)), w));
  };
  term(mi, ml, alpha);
  term(ui, ul, 1.0 - alpha);
  return acc.defined() ? acc : zero_loss(logits.dtype());
}

ContrastiveTerms contrastive_objective(const Backbone& model, const Tensor& x, const std::vector<std::size_t>& lengths,
                                       InputKind kind, const ContrastiveConfig& cfg, std::mt19937_64& rng,
                                       const ForwardOptions& opt) {
  if (!model.has("mask_emb") || !model.has("quant.codebook"))
    throw std::invalid_argument("contrastive objective needs a mask embedding and a quantizer");
  const Encoded latent = encode_frontend(model, x, lengths, kind, opt);
  const std::size_t B = latent.hidden.dim(0), T = latent.hidden.dim(1), d = latent.hidden.dim(2);
  const BoolMask mask = sample_masks(latent.lengths, T, cfg.mask, rng);
  const Encoded h = encode_context(model, {apply_mask(latent.hidden, mask, model.param("mask_emb")), latent.lengths}, opt);
  const Tensor y = generator_forward(model, 0, h.hidden);
  const std::size_t C = y.dim(2);
  if (C != model.param("quant.codebook").dim(1)) throw std::invalid_argument("generator width must equal code_dim");

  // Quantize every valid latent frame; row[b * T + t] indexes into them.
  std::vector<std::size_t> valid, row(B * T, 0);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < latent.lengths[b]; ++t) {
      row[b * T + t] = valid.size();
      valid.push_back(b * T + t);
    }
  const Linear proj{model.param("quant.proj.weight"), model.param("quant.proj.bias")};
  const Tensor logits = proj(gather_rows(reshape(latent.hidden, {B * T, d}), valid));
  const Quantized qz = gumbel_quantize(logits, model.param("quant.codebook"), cfg.gumbel_tau, rng);

  std::vector<std::size_t> yi, pi, ni;
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<std::size_t> masked, all;
    for (std::size_t t = 0; t < latent.lengths[b]; ++t) {
      all.push_back(t);
      if (mask.at(b * T + t)) masked.push_back(t);
    }
    const auto& pool = masked.size() >= 2 ? masked : all;
    for (std::size_t u : masked) {
      std::vector<std::size_t> cand;
      for (std::size_t t : pool)
        if (t != u) cand.push_back(t);
      if (cand.empty()) continue;
      std::uniform_int_distribution<std::size_t> pick(0, cand.size() - 1);
      yi.push_back(b * T + u);
      pi.push_back(row[b * T + u]);
      for (std::size_t k = 0; k < cfg.negatives; ++k) ni.push_back(row[b * T + cand[pick(rng)]]);
    }
  }
  ContrastiveTerms out;
  out.masked = yi.size();
  out.diversity = diversity_loss(qz.probs);
  if (yi.empty()) {
    out.contrastive = zero_loss(y.dtype());
  } else {
    const std::size_t U = yi.size();
    out.contrastive = contrastive_loss(gather_rows(reshape(y, {B * T, C}), yi), gather_rows(qz.q, pi),
                                       reshape(gather_rows(qz.q, ni), {U, cfg.negatives, C}), cfg.similarity_tau);
  }
  out.total = add(out.contrastive, scale(out.diversity, cfg.diversity_weight));
  return out;
}

std::vector<std::size_t> hubert_labels(const KMeansModel& km, const Tensor& features, std::size_t len,
                                       std::size_t factor) {
  if (features.rank() != 2 || len > features.dim(0)) throw std::invalid_argument("hubert_labels expects T x D features");
  const std::size_t D = features.dim(1);
  if (km.dim != factor * D) throw std::invalid_argument("k-means dimension does not match stacked frames");
  const std::size_t Tp = (len + factor - 1) / factor;
  std::vector<double> stacked(Tp * factor * D, 0.0);
  const auto f = features.data();
  for (std::size_t t = 0; t < len; ++t)
    for (std::size_t j = 0; j < D; ++j) stacked[t * D + j] = f[t * D + j];
  return kmeans_assign(km, stacked);
}

Tensor hubert_objective(const Backbone& model, const Tensor& x, const std::vector<std::size_t>& lengths,
                        const std::vector<std::size_t>& labels, InputKind kind, const HubertConfig& cfg,
                        std::mt19937_64& rng, const ForwardOptions& opt) {
  if (!model.has("mask_emb")) throw std::invalid_argument("hubert objective needs a mask embedding");
  const Encoded latent = encode_frontend(model, x, lengths, kind, opt);
  const std::size_t T = latent.hidden.dim(1);
  const BoolMask mask = sample_masks(latent.lengths, T, cfg.mask, rng);
  const Encoded h = encode_context(model, {apply_mask(latent.hidden, mask, model.param("mask_emb")), latent.lengths}, opt);
  return hubert_loss(generator_forward(model, 0, h.hidden), labels, mask, latent.lengths, cfg.alpha);
}

}  // namespace draft
