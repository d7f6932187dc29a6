// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>

#include "draft/ctc.hpp"
#include "draft/featurizer.hpp"
#include "draft/gradcheck_suite.hpp"
#include "draft/kernels.hpp"
#include "draft/pipeline.hpp"
#include "draft/ssl.hpp"
#include "draft/train.hpp"

using namespace draft;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Collects failure messages for one criterion.
struct Report {
  std::vector<std::string> failures;
  std::vector<std::string> notes;
  void expect(bool ok, const std::string& what) {
    if (!ok) failures.push_back(what);
  }
  void note(const std::string& s) { notes.push_back(s); }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(4) << v;
  return os.str();
}

fs::path scratch_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("draft_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

bool bits_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(double)) == 0;
}

Tensor random_batch(std::size_t B, std::size_t T, std::size_t D, std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  std::vector<double> v(B * T * D);
  for (auto& x : v) x = n(rng);
  return Tensor::from({B, T, D}, std::move(v), DType::f64);
}

Tensor pad_time(const Tensor& x, std::size_t extra) {
  return concat({x, Tensor::zeros({x.dim(0), extra, x.dim(2)}, x.dtype())}, 1);
}

ModelConfig small_cfg() {
  ModelConfig c;
  c.feature_dim = 3;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_blocks = 2;
  c.ffn_dim = 12;
  c.dtype = DType::f64;
  return c;
}

// ---- 1 ---------------------------------------------------------------------

void gradient_oracle(Report& r) {
  const auto t0 = Clock::now();
  double worst = 0.0;
  std::string worst_name;
  std::size_t checks = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto results = primitive_gradchecks(seed);
    const auto losses = loss_gradchecks(seed);
    results.insert(results.end(), losses.begin(), losses.end());
    for (const auto& g : results) {
      ++checks;
      if (g.max_rel_error > worst) {
        worst = g.max_rel_error;
        worst_name = g.name;
      }
      r.expect(g.max_rel_error < 1e-6, g.name + " seed " + std::to_string(seed) + " error " + fmt(g.max_rel_error));
    }
  }
  const double elapsed = seconds_since(t0);
  r.expect(elapsed < 120.0, "runtime " + fmt(elapsed) + " s");
  r.note(std::to_string(checks) + " checks, worst " + fmt(worst) + " (" + worst_name + "), " + fmt(elapsed) + " s");
}

// ---- 2 ---------------------------------------------------------------------

Tensor random_log_probs(std::size_t T, std::size_t V, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 2.0);
  std::vector<double> v(T * V);
  for (std::size_t t = 0; t < T; ++t) {
    double z = 0.0;
    for (std::size_t k = 0; k < V; ++k) z += std::exp(v[t * V + k] = n(rng));
    for (std::size_t k = 0; k < V; ++k) v[t * V + k] -= std::log(z);
  }
  return Tensor::from({T, V}, std::move(v), DType::f64);
}

// Probability of every collapsed label sequence, summed over all V^T paths.
std::map<std::vector<std::size_t>, double> path_mass(const Tensor& lp, std::size_t T, std::size_t V) {
  std::map<std::vector<std::size_t>, double> mass;
  std::size_t total = 1;
  for (std::size_t t = 0; t < T; ++t) total *= V;
  for (std::size_t code = 0; code < total; ++code) {
    std::size_t c = code, prev = 0;
    double logp = 0.0;
    std::vector<std::size_t> label;
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t k = c % V;
      c /= V;
      logp += lp[t * V + k];
      if (k != 0 && k != prev) label.push_back(k);
      prev = k;
    }
    mass[label] += std::exp(logp);
  }
  return mass;
}

// Every label sequence over tokens 1..V-1 with length <= max_len.
std::vector<std::vector<std::size_t>> all_targets(std::size_t V, std::size_t max_len) {
  std::vector<std::vector<std::size_t>> out{{}};
  for (std::size_t i = 0; i < out.size(); ++i)
    if (out[i].size() < max_len)
      for (std::size_t k = 1; k < V; ++k) {
        auto e = out[i];
        e.push_back(k);
        out.push_back(e);
      }
  return out;
}

void ctc_oracle(Report& r) {
  // Long targets are infeasible on purpose; keep their warnings out of the report.
  std::ostringstream sink;
  const std::unique_ptr<std::streambuf, void (*)(std::streambuf*)> restore(std::cerr.rdbuf(sink.rdbuf()),
                                                                           [](std::streambuf* b) { std::cerr.rdbuf(b); });
  std::mt19937_64 rng(2024);
  double worst = 0.0, worst_total = 0.0;
  for (int rep = 0; rep < 5; ++rep)
    for (std::size_t T = 1; T <= 4; ++T)
      for (std::size_t V = 2; V <= 3; ++V) {
        const Tensor lp = random_log_probs(T, V, rng);
        const auto mass = path_mass(lp, T, V);
        for (const auto& target : all_targets(V, 2)) {
          const auto it = mass.find(target);
          const double loss = ctc_loss(lp, target, T).item();
          if (it == mass.end()) {
            r.expect(std::isinf(loss), "infeasible target has finite loss");
            continue;
          }
          const double expected = -std::log(it->second);
          const double err = std::abs(loss - expected);
          worst = std::max(worst, err);
          r.expect(err <= 1e-9 * std::max(1.0, std::abs(expected)),
                   "T=" + std::to_string(T) + " V=" + std::to_string(V) + " error " + fmt(err));
        }
        if (T <= 3) {
          double total = 0.0;
          for (const auto& target : all_targets(V, T)) total += std::exp(-ctc_loss(lp, target, T).item());
          worst_total = std::max(worst_total, std::abs(total - 1.0));
          r.expect(std::abs(total - 1.0) <= 1e-9, "total probability " + fmt(total));
        }
      }
  r.note("worst loss error " + fmt(worst) + ", worst |sum - 1| " + fmt(worst_total));
}

// ---- 3 ---------------------------------------------------------------------

void causality(Report& r) {
  ModelConfig c = small_cfg();
  c.mask_mode = MaskMode::causal;
  const std::size_t f = c.subsample_factor, D = c.feature_dim, d = c.d_model;
  std::mt19937_64 rng(33);
  std::normal_distribution<double> n;
  double worst = 0.0;
  std::size_t sensitive = 0, perturbed = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Backbone b = build_backbone(c, 100 + static_cast<std::uint64_t>(trial));
    const std::size_t T = 8 + rng() % 25;
    const Tensor x = random_batch(1, T, D, rng);
    const std::size_t Tp = output_lengths(c, {T})[0];
    const std::size_t t = rng() % Tp;

    // Raw level: every frame after the last one feeding step t.
    std::vector<double> v(x.data().begin(), x.data().end());
    for (std::size_t i = (t + 1) * f * D; i < v.size(); ++i) v[i] += 3.0 * n(rng);
    const Tensor a = forward(b, x, {T}, InputKind::features).hidden;
    const Tensor p = forward(b, Tensor::from(x.shape(), v, DType::f64), {T}, InputKind::features).hidden;

    // Latent level: subsampled steps after t, fed to the encoder directly.
    const Encoded lat = encode_frontend(b, x, {T}, InputKind::features);
    std::vector<double> lv(lat.hidden.data().begin(), lat.hidden.data().end());
    for (std::size_t i = (t + 1) * d; i < lv.size(); ++i) lv[i] += 3.0 * n(rng);
    const Tensor la = encode_context(b, lat).hidden;
    const Tensor lp = encode_context(b, Encoded{Tensor::from(lat.hidden.shape(), lv, DType::f64), lat.lengths}).hidden;

    for (std::size_t i = 0; i < (t + 1) * d; ++i) worst = std::max({worst, std::abs(a[i] - p[i]), std::abs(la[i] - lp[i])});
    bool later = false;
    for (std::size_t i = (t + 1) * d; i < a.numel(); ++i) later = later || a[i] != p[i];
    sensitive += later;
    perturbed += t + 1 < Tp;
  }
  r.expect(worst < 1e-6, "max change " + fmt(worst));
  r.expect(sensitive == perturbed, "later steps unchanged in " + std::to_string(perturbed - sensitive) + " trials");
  r.note("100 trials, max change at or before t " + fmt(worst) + "; later steps moved in " + std::to_string(sensitive) +
         " of " + std::to_string(perturbed));
}

// ---- 4 ---------------------------------------------------------------------

void padding_invariance(Report& r) {
  std::mt19937_64 rng(44);
  const std::vector<std::size_t> len{16, 11};
  const Tensor x = random_batch(2, 16, 3, rng), xp = pad_time(x, 10);
  double worst = 0.0;
  auto compare = [&](const std::string& name, double a, double b) {
    const double rel = std::abs(a - b) / std::max(std::abs(a), 1e-12);
    worst = std::max(worst, rel);
    r.expect(std::isfinite(a) && rel < 1e-6, name + " relative change " + fmt(rel));
  };
  for (MaskMode mode : {MaskMode::causal, MaskMode::full}) {
    ModelConfig c = small_cfg();
    c.mask_mode = mode;
    const std::string tag = std::string(" ") + mask_mode_name(mode);
    {
      const Backbone m = build_backbone(c, 1);
      const Encoded h = forward(m, x, len, InputKind::features), hp = forward(m, xp, len, InputKind::features);
      const Stacked z = stack_frames(x, len, c.subsample_factor), zp = stack_frames(xp, len, c.subsample_factor);
      compare("apc" + tag, apc_loss(generator_forward(m, 0, h.hidden), z.z, 1, 1, z.lengths).item(),
              apc_loss(generator_forward(m, 0, hp.hidden), zp.z, 1, 1, zp.lengths).item());
    }
    {
      ModelConfig e = c;
      e.gen_count = 2;
      const Backbone m = build_backbone(e, 2);
      compare("eapc" + tag, eapc_loss(m, x, len, {1, 2, 1}).item(), eapc_loss(m, xp, len, {1, 2, 1}).item());
      const BiApcPair pair = build_biapc_pair(e, SharingScheme::share_generator, 3);
      compare("ebiapc" + tag, ebiapc_loss(pair, x, len, {1, 2, 1}).item(), ebiapc_loss(pair, xp, len, {1, 2, 1}).item());
    }
    {
      const std::size_t V = 5;
      Backbone m = build_backbone(c, 4);
      replace_generators(m, 1, V, 5);
      const std::vector<std::vector<std::size_t>> targets{{1, 2}, {3}};
      auto loss = [&](const Tensor& in) {
        const Encoded h = forward(m, in, len, InputKind::features);
        return ctc_batch_loss(log_softmax(generator_forward(m, 0, h.hidden), 2), targets, h.lengths).normalized.item();
      };
      compare("ctc" + tag, loss(x), loss(xp));
    }
  }
  ModelConfig c = small_cfg();
  c.mask_mode = MaskMode::full;
  c.mask_embedding = true;
  {
    ModelConfig q = c;
    q.quant_codes = 4;
    q.code_dim = 3;
    q.gen_dim = 3;
    const Backbone m = build_backbone(q, 6);
    ContrastiveConfig cc;
    cc.negatives = 3;
    auto run = [&](const Tensor& in) {
      std::mt19937_64 g(7);
      return contrastive_objective(m, in, len, InputKind::features, cc, g).total.item();
    };
    compare("contrastive", run(x), run(xp));
  }
  {
    ModelConfig h = c;
    h.gen_dim = 5;
    const Backbone m = build_backbone(h, 8);
    const std::size_t Tp = output_lengths(h, {16})[0], Tpp = output_lengths(h, {26})[0];
    std::vector<std::size_t> labels(2 * Tp), padded(2 * Tpp, 0);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = rng() % 5;
    for (std::size_t b = 0; b < 2; ++b)
      for (std::size_t t = 0; t < Tp; ++t) padded[b * Tpp + t] = labels[b * Tp + t];
    auto run = [&](const Tensor& in, const std::vector<std::size_t>& lab) {
      std::mt19937_64 g(9);
      return hubert_objective(m, in, len, lab, InputKind::features, HubertConfig{}, g).item();
    };
    compare("hubert", run(x, labels), run(xp, padded));
  }
  r.note("10 extra frames, worst relative change " + fmt(worst));
}

// ---- 5 ---------------------------------------------------------------------

void eapc_reduction(Report& r) {
  std::mt19937_64 rng(55);
  ModelConfig c = small_cfg();
  c.gen_count = 2;
  const Backbone m = build_backbone(c, 10);
  const Tensor x = random_batch(2, 20, 3, rng);
  const std::vector<std::size_t> len{20, 15};
  const Encoded h = forward(m, x, len, InputKind::features);
  const Stacked z = stack_frames(x, len, c.subsample_factor);
  c.gen_count = 1;
  const Backbone one = build_backbone(c, 11);
  const Encoded h1 = forward(one, x, len, InputKind::features);
  for (std::size_t s : {1u, 2u, 3u}) {
    const double direct = apc_loss(generator_forward(one, 0, h1.hidden), z.z, s, 1, z.lengths).item();
    const double e = eapc_loss(one, x, len, {s, 1, 1}).item();
    r.expect(e == direct, "k=1 s=" + std::to_string(s) + ": " + fmt(e) + " vs " + fmt(direct));
  }
  const double lag2 = apc_loss(generator_forward(m, 0, h.hidden), z.z, 2, 1, z.lengths).item();
  const double lag3 = apc_loss(generator_forward(m, 1, h.hidden), z.z, 3, 1, z.lengths).item();
  const double s2k2 = eapc_loss(m, x, len, {2, 2, 1}).item();
  const double diff = std::abs(s2k2 - (lag2 + lag3));
  r.expect(diff <= 4 * std::numeric_limits<double>::epsilon() * std::abs(s2k2), "s2k2 differs by " + fmt(diff));
  r.note("s2k2 vs lag sum differs by " + fmt(diff));
}

// ---- 6 ---------------------------------------------------------------------

void biapc_sharing(Report& r) {
  const ModelConfig c = small_cfg();
  const BiApcPair shared = build_biapc_pair(c, SharingScheme::share_all, 1);
  const Backbone avg = average_directions(shared);
  for (std::size_t i = 0; i < avg.registry.size(); ++i)
    r.expect(bits_equal(avg.registry[i].value, shared.fwd.registry[i].value), "share_all changed " + avg.registry[i].name);
  const BiApcPair apart = build_biapc_pair(c, SharingScheme::none, 2);
  const Backbone mean = average_directions(apart);
  std::size_t differing = 0;
  for (std::size_t i = 0; i < mean.registry.size(); ++i) {
    const Tensor &a = apart.fwd.registry[i].value, &b = apart.rev.registry[i].value, &m = mean.registry[i].value;
    for (std::size_t j = 0; j < a.numel(); ++j) {
      differing += a[j] != b[j];
      r.expect(m[j] == (a[j] + b[j]) / 2.0, "none mean wrong in " + mean.registry[i].name);
    }
  }
  r.expect(differing > 0, "directions identical under none");
  r.note(std::to_string(avg.registry.size()) + " tensors per direction");
}

// ---- 7 and 11 share a tiny configuration ----------------------------------

KeyValueConfig tiny_kv() {
  return KeyValueConfig::parse(
      "source_utts = 24\ntarget_utts = 16\ntest_utts = 8\n"
      "d_model = 16\nn_heads = 2\nffn_dim = 24\nd_ada = 4\nquant_codes = 8\ncode_dim = 4\nkmeans_k = 4\n"
      "batch_size = 8\n");
}

StageConfig steps(const KeyValueConfig& kv, Stage s, std::size_t n) {
  StageConfig c = stage_config_from(kv, s);
  c.max_steps = n;
  c.epochs = 0;
  return c;
}

PipelineData tiny_data(const KeyValueConfig& kv, const std::string& name) {
  const fs::path dir = scratch_dir(name);
  gen_corpus(synth_config_from(kv), dir.string());
  return load_pipeline_data(dir.string());
}

void freeze_contract(Report& r) {
  const KeyValueConfig kv = tiny_kv();
  const PipelineData data = tiny_data(kv, "freeze");
  const StageResult pre = run_stage(steps(kv, Stage::pretrain, 2), std::nullopt, data.source);
  for (std::size_t n : {1u, 5u, 50u}) {
    const StageResult ada = run_stage(steps(kv, Stage::draft_adapt, n), pre.checkpoint, data.target);
    const Backbone& a = ada.checkpoint.model;
    const Backbone& p = pre.checkpoint.model;
    for (const auto& e : p.registry) r.expect(bits_equal(a.param(e.name), e.value), e.name + " moved after " + std::to_string(n));
    Backbone fresh = clone_backbone(p);
    insert_adapters(fresh, stage_config_from(kv, Stage::draft_adapt).d_ada, kv.get_u64("seed", 0) ^ 0xada);
    std::size_t moved = 0;
    for (const auto& e : a.registry)
      if (e.group == ParamGroup::adapter) moved += !bits_equal(e.value, fresh.param(e.name));
    r.expect(moved > 0, "no adapter tensor moved after " + std::to_string(n));
    r.expect(a.registry.size() == fresh.registry.size(), "unexpected tensor set");
  }
  r.note("steps {1, 5, 50}: every backbone and generator tensor bit-identical");
}

// ---- 8 ---------------------------------------------------------------------

void adapter_accounting(Report& r) {
  for (std::size_t D : {16u, 32u})
    for (std::size_t d : {8u, 64u, 256u}) {
      ModelConfig c = small_cfg();
      c.d_model = D;
      c.ffn_dim = 2 * D;
      Backbone b = build_backbone(c, 3);
      insert_adapters(b, d, 4);
      const std::size_t closed = 2 * D * d + d + 3 * D;
      const std::size_t per = b.parameter_count(ParamGroup::adapter) / (c.n_blocks + 1);
      r.expect(b.parameter_count(ParamGroup::adapter) == (c.n_blocks + 1) * closed,
               "D=" + std::to_string(D) + " d_ada=" + std::to_string(d) + " counted " + std::to_string(per));
      r.expect(adapter_parameter_count(D, d) == closed, "adapter_parameter_count disagrees");

      Backbone base = build_backbone(c, 3), with = clone_backbone(base);
      insert_adapters(with, d, 5);
      for (auto& p : with.registry)
        if (p.name.find(".up.") != std::string::npos) p.value.set_data(std::vector<double>(p.value.numel(), 0.0));
      std::mt19937_64 rng(D + d);
      const Tensor x = random_batch(2, 12, 3, rng);
      r.expect(bits_equal(forward(base, x, {12, 9}, InputKind::features).hidden,
                          forward(with, x, {12, 9}, InputKind::features).hidden),
               "zero up-projection is not a passthrough at d_ada=" + std::to_string(d));
    }
  r.note("2*D*d + d + 3*D per adapter for d_ada in {8, 64, 256}");
}

// ---- 9 ---------------------------------------------------------------------

void scheduler(Report& r) {
  for (std::size_t warmup : {1u, 25u, 4000u})
    for (std::size_t d : {16u, 512u}) {
      const NoamSchedule n{2.0, warmup, d};
      for (std::size_t step : {std::size_t{1}, warmup, 10 * warmup}) {
        const double st = static_cast<double>(step), w = static_cast<double>(warmup);
        const double expected = 2.0 / std::sqrt(static_cast<double>(d)) * std::min(std::pow(st, -0.5), st * std::pow(w, -1.5));
        r.expect(std::abs(noam_lr(n, step) - expected) <= 1e-12, "noam step " + std::to_string(step));
      }
    }
  const StageConfig ft = stage_config_from(KeyValueConfig{}, Stage::finetune);
  r.expect(ft.schedule.kind == ScheduleKind::tri_stage, "finetune does not use tri-stage");
  r.expect(ft.schedule.tri.final_ratio == 0.05, "default lambda " + fmt(ft.schedule.tri.final_ratio));
  for (std::size_t total : {50u, 317u, 2000u}) {
    double peak = 0.0;
    for (std::size_t step = 0; step <= total; ++step) peak = std::max(peak, ft.schedule.lr(step, total));
    const double last = ft.schedule.lr(total, total);
    r.expect(std::abs(last - 0.05 * peak) <= 1e-12 * peak, "tri-stage end " + fmt(last / peak) + " x peak");
  }
  const TriStageSchedule t{3e-5, 10, 40, 0.05};
  r.expect(std::abs(tri_stage_lr(t, 100, 100) - 1.5e-6) <= 1e-18, "tri_stage_lr end");
  r.note("noam at {1, warmup, 10 warmup} within 1e-12; tri-stage ends at 0.05 x peak");
}

// ---- 10 --------------------------------------------------------------------

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : (v[n / 2 - 1] + v[n / 2]) / 2.0;
}

void end_to_end(Report& r) {
  kernels::ExecModeScope mode(kernels::ExecMode::fast);
  std::vector<double> draft_ter, plain_ter, scratch_ter;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    KeyValueConfig kv;
    kv.set("seed", std::to_string(seed));
    kv.set("corpus_seed", std::to_string(seed));
    const fs::path dir = scratch_dir("e2e" + std::to_string(seed));
    gen_corpus(synth_config_from(kv), dir.string());
    const PipelineData data = load_pipeline_data(dir.string());

    auto t0 = Clock::now();
    const StageResult pre = run_stage(stage_config_from(kv, Stage::pretrain), std::nullopt, data.source);
    const double pretrain_s = seconds_since(t0);
    auto timed = [&](PipelineKind kind, bool shared) {
      const auto t1 = Clock::now();
      const double ter = shared ? run_pipeline(kind, kv, data, pre.checkpoint).ter : run_pipeline(kind, kv, data).ter;
      const double s = seconds_since(t1) + (shared ? pretrain_s : 0.0);
      r.expect(s < 180.0, std::string(pipeline_name(kind)) + " seed " + std::to_string(seed) + " took " + fmt(s) + " s");
      return std::pair{ter, s};
    };
    const auto [d, ds] = timed(PipelineKind::draft, true);
    const auto [p, ps] = timed(PipelineKind::no_adapt, true);
    const auto [s, ss] = timed(PipelineKind::scratch, false);
    draft_ter.push_back(d);
    plain_ter.push_back(p);
    scratch_ter.push_back(s);
    r.note("seed " + std::to_string(seed) + ": draft " + fmt(d) + " (" + fmt(ds) + " s), no_adapt " + fmt(p) + " (" +
           fmt(ps) + " s), scratch " + fmt(s) + " (" + fmt(ss) + " s)");
  }
  const double md = median(draft_ter), mp = median(plain_ter), ms = median(scratch_ter);
  r.note("median TER: draft " + fmt(md) + ", no_adapt " + fmt(mp) + ", scratch " + fmt(ms));
  r.expect(md <= mp, "draft median above no_adapt");
  r.expect(md <= ms, "draft median above scratch");
  r.expect(mp <= ms, "no_adapt median above scratch");
}

// ---- 11 --------------------------------------------------------------------

void determinism(Report& r) {
  kernels::ExecModeScope mode(kernels::ExecMode::verification);
  const KeyValueConfig kv = tiny_kv();
  const fs::path dir = scratch_dir("det_files");
  for (const char* objective : {"apc", "eapc", "ebiapc", "contrastive", "hubert"}) {
    KeyValueConfig k = kv;
    k.set("objective", objective);
    std::string ck[2], log[2];
    for (int run = 0; run < 2; ++run) {
      const PipelineData data = tiny_data(k, std::string("det_") + objective + std::to_string(run));
      std::ostringstream os;
      MetricsLog ml(&os);
      const StageResult pre = run_stage(steps(k, Stage::pretrain, 3), std::nullopt, data.source, &ml);
      const StageResult ada = run_stage(steps(k, Stage::draft_adapt, 2), pre.checkpoint, data.target, &ml);
      const StageResult ft = run_stage(steps(k, Stage::finetune, 2), ada.checkpoint, data.target, &ml);
      const fs::path p = dir / (std::string(objective) + std::to_string(run));
      save_checkpoint(ft.checkpoint, p.string());
      ck[run] = slurp(p);
      log[run] = os.str();
    }
    r.expect(!ck[0].empty() && ck[0] == ck[1], std::string(objective) + " checkpoints differ");
    r.expect(!log[0].empty() && log[0] == log[1], std::string(objective) + " metrics differ");
  }
  r.note("pretrain, adapt and finetune twice per objective from a regenerated corpus");
}

// ---- 12 --------------------------------------------------------------------

Waveform tone(double hz, double seconds) {
  Waveform w;
  w.sample_rate = 16000;
  w.samples.resize(static_cast<std::size_t>(seconds * 16000));
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / 16000.0);
  return w;
}

void featurizer(Report& r) {
  FeaturizerConfig cfg;
  cfg.n_mels = 40;
  const FeatureMatrix one = log_mel(tone(440.0, 1.0), cfg);
  r.expect(one.frames == 98, "1 s gives " + std::to_string(one.frames) + " frames");
  std::size_t bins = 0;
  for (std::size_t n_mels : {8u, 23u, 40u}) {
    cfg.n_mels = n_mels;
    for (std::size_t j = 0; j < n_mels; ++j, ++bins) {
      const FeatureMatrix f = log_mel(tone(mel_center_hz(j, n_mels, 0.0, 8000.0), 0.25), cfg);
      std::vector<double> energy(n_mels, 0.0);
      for (std::size_t t = 0; t < f.frames; ++t)
        for (std::size_t d = 0; d < n_mels; ++d) energy[d] += std::exp(static_cast<double>(f.at(t, d)));
      const auto best = static_cast<std::size_t>(std::max_element(energy.begin(), energy.end()) - energy.begin());
      r.expect(best == j, "n_mels " + std::to_string(n_mels) + " bin " + std::to_string(j) + " peaks at " + std::to_string(best));
    }
  }
  FeatureMatrix f = one;
  f.values[0] = -0.0f;
  f.values[1] = std::numeric_limits<float>::denorm_min();
  const fs::path p = scratch_dir("feat") / "x.feat";
  write_features(f, p.string());
  const FeatureMatrix g = read_features(p.string());
  r.expect(g.frames == f.frames && g.dim == f.dim && g.shift_ms == f.shift_ms && g.window_ms == f.window_ms,
           "roundtrip header differs");
  r.expect(g.values.size() == f.values.size() &&
               std::memcmp(g.values.data(), f.values.data(), f.values.size() * sizeof(float)) == 0,
           "roundtrip values differ");
  r.note("98 frames; " + std::to_string(bins) + " bin-center tones; bit-exact roundtrip");
}

}  // namespace

int main() {
  kernels::set_exec_mode(kernels::ExecMode::verification);
  const std::vector<std::pair<std::string, std::function<void(Report&)>>> criteria{
      {"gradient oracle", gradient_oracle},
      {"ctc oracle", ctc_oracle},
      {"causality", causality},
      {"padding invariance", padding_invariance},
      {"e-apc reduction", eapc_reduction},
      {"bi-apc sharing", biapc_sharing},
      {"draft freeze contract", freeze_contract},
      {"adapter accounting", adapter_accounting},
      {"scheduler", scheduler},
      {"end-to-end ordering", end_to_end},
      {"determinism", determinism},
      {"featurizer", featurizer},
  };
  std::size_t failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Report r;
    const auto t0 = Clock::now();
    try {
      criteria[i].second(r);
    } catch (const std::exception& e) {
      r.failures.push_back(std::string("exception: ") + e.what());
    }
    const bool ok = r.failures.empty();
    failed += !ok;
    std::cout << (ok ? "PASS" : "FAIL") << "  " << std::setw(2) << i + 1 << "  " << criteria[i].first << "  ("
              << fmt(seconds_since(t0)) << " s)\n";
    for (const auto& n : r.notes) std::cout << "        " << n << "\n";
    const std::size_t shown = std::min<std::size_t>(r.failures.size(), 10);
    for (std::size_t k = 0; k < shown; ++k) std::cout << "        ! " << r.failures[k] << "\n";
    if (r.failures.size() > shown) std::cout << "        ! ... " << r.failures.size() - shown << " more\n";
    std::cout.flush();
  }
  std::cout << criteria.size() - failed << "/" << criteria.size() << " criteria passed\n";
  return failed ? 1 : 0;
}
