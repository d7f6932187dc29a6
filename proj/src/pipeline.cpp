#include "draft/pipeline.hpp"

#include <filesystem>
#include <stdexcept>

namespace draft {

namespace {

std::string stage_prefix(Stage s) {
  switch (s) {
    case Stage::pretrain: return "pretrain";
    case Stage::saft:
    case Stage::draft_adapt: return "adapt";
    case Stage::finetune: return "finetune";
  }
  return "";
}

}  // namespace

const std::vector<std::string>& known_config_keys() {
  static const std::vector<std::string> keys{
      // corpus
      "v_tok", "proto_len", "duration_jitter", "feature_dim", "noise", "min_tokens", "max_tokens", "source_utts",
      "target_utts", "test_utts", "corpus_seed", "emit", "sample_rate", "max_condition", "shift_scale",
      // featurizer
      "n_mels", "window_ms", "shift_ms",
      // model
      "frontend", "d_model", "n_heads", "n_blocks", "ffn_dim", "subsample_factor", "mask_mode", "dropout", "dtype",
      "quant_codes", "code_dim", "input",
      // objectives
      "objective", "shift_s", "shift_k", "norm_p", "sharing", "mask_prob", "mask_span", "negatives",
      "similarity_tau", "gumbel_tau_max", "gumbel_tau_min", "diversity_weight", "hubert_alpha", "kmeans_k",
      "kmeans_iters",
      // stages
      "seed", "batch_size", "clip_norm", "d_ada", "finetune_mode", "pretrain_epochs", "adapt_epochs",
      "finetune_epochs", "pretrain_max_steps", "adapt_max_steps", "finetune_max_steps", "noam_factor",
      "noam_warmup", "saft_lr_scale", "draft_lr_scale", "adapt_warmup", "finetune_peak_lr", "finetune_ramp_frac",
      "finetune_hold_frac", "finetune_final_ratio", "specaug_time_masks", "specaug_time_width",
      "specaug_freq_masks", "specaug_freq_width", "verification"};
  return keys;
}

StageConfig stage_config_from(const KeyValueConfig& kv, Stage stage) {
  StageConfig c;
  c.stage = stage;
  ModelConfig& m = c.model;
  m.frontend = parse_frontend(kv.get_string("frontend", frontend_name(m.frontend)));
  m.feature_dim = kv.get_size("feature_dim", m.feature_dim);
  m.d_model = kv.get_size("d_model", m.d_model);
  m.n_heads = kv.get_size("n_heads", m.n_heads);
  m.n_blocks = kv.get_size("n_blocks", m.n_blocks);
  m.ffn_dim = kv.get_size("ffn_dim", m.ffn_dim);
  m.subsample_factor = kv.get_size("subsample_factor", m.subsample_factor);
  m.mask_mode = parse_mask_mode(kv.get_string("mask_mode", mask_mode_name(m.mask_mode)));
  m.dropout = kv.get_double("dropout", 0.1);
  m.dtype = parse_dtype(kv.get_string("dtype", dtype_name(m.dtype)));
  m.quant_codes = kv.get_size("quant_codes", 32);
  m.code_dim = kv.get_size("code_dim", 16);
  const std::string input = kv.get_string("input", "features");
  if (input != "features" && input != "waveform") throw std::invalid_argument("config key input: " + input);
  c.input = input == "features" ? InputKind::features : InputKind::waveform;

  c.objective = parse_objective(kv.get_string("objective", objective_name(c.objective)));
  c.shift.s = kv.get_size("shift_s", 1);
  c.shift.k = kv.get_size("shift_k", c.objective == Objective::apc ? 1 : 3);
  c.shift.p = static_cast<int>(kv.get_size("norm_p", 1));
  c.sharing = parse_scheme(kv.get_string("sharing", scheme_name(c.sharing)));
  const MaskConfig mask{kv.get_double("mask_prob", 0.2), kv.get_size("mask_span", 2), true};
  c.contrastive.mask = mask;
  c.contrastive.negatives = kv.get_size("negatives", c.contrastive.negatives);
  c.contrastive.similarity_tau = kv.get_double("similarity_tau", c.contrastive.similarity_tau);
  c.contrastive.gumbel_tau = kv.get_double("gumbel_tau_max", c.contrastive.gumbel_tau);
  c.contrastive.gumbel_tau_min = kv.get_double("gumbel_tau_min", c.contrastive.gumbel_tau_min);
  c.contrastive.diversity_weight = kv.get_double("diversity_weight", c.contrastive.diversity_weight);
  c.hubert.mask = mask;
  c.hubert.alpha = kv.get_double("hubert_alpha", c.hubert.alpha);
  c.kmeans_k = kv.get_size("kmeans_k", c.kmeans_k);
  c.kmeans_iters = kv.get_size("kmeans_iters", c.kmeans_iters);

  c.d_ada = kv.get_size("d_ada", c.d_ada);
  c.finetune_mode = parse_finetune_mode(kv.get_string("finetune_mode", "full"));
  c.vocab_size = kv.get_size("v_tok", 8) + 1;
  c.spec_augment.num_time_masks = kv.get_size("specaug_time_masks", 0);
  c.spec_augment.max_time_width = kv.get_size("specaug_time_width", 0);
  c.spec_augment.num_freq_masks = kv.get_size("specaug_freq_masks", 0);
  c.spec_augment.max_freq_width = kv.get_size("specaug_freq_width", 0);

  const std::string p = stage_prefix(stage);
  const std::size_t default_epochs = stage == Stage::pretrain ? 5 : stage == Stage::finetune ? 20 : 10;
  c.epochs = kv.get_size(p + "_epochs", default_epochs);
  c.max_steps = kv.get_size(p + "_max_steps", 0);
  c.batch_size = kv.get_size("batch_size", c.batch_size);
  c.seed = kv.get_u64("seed", 0);
  c.clip_norm = kv.get_double("clip_norm", c.clip_norm);

  NoamSchedule noam{kv.get_double("noam_factor", 0.2), kv.get_size("noam_warmup", 100), m.d_model};
  switch (stage) {
    case Stage::pretrain:
      c.schedule.kind = ScheduleKind::noam;
      c.schedule.noam = noam;
      break;
    case Stage::saft:
    case Stage::draft_adapt:
      c.schedule.kind = ScheduleKind::noam;
      noam.warmup = kv.get_size("adapt_warmup", 50);
      c.schedule.noam = noam;
      // Same peak as pretraining, scaled; the shorter warmup would otherwise raise it.
      c.schedule.scale = noam_peak(NoamSchedule{noam.factor, kv.get_size("noam_warmup", 100), m.d_model}) / noam_peak(noam) *
                         (stage == Stage::saft ? kv.get_double("saft_lr_scale", 0.5) : kv.get_double("draft_lr_scale", 1.0));
      break;
    case Stage::finetune:
      c.schedule.kind = ScheduleKind::tri_stage;
      c.schedule.tri.peak = kv.get_double("finetune_peak_lr", 2e-3);
      c.schedule.tri.final_ratio = kv.get_double("finetune_final_ratio", 0.05);
      c.schedule.ramp_frac = kv.get_double("finetune_ramp_frac", 0.1);
      c.schedule.hold_frac = kv.get_double("finetune_hold_frac", 0.4);
      break;
  }
  return c;
}

const char* pipeline_name(PipelineKind k) {
  switch (k) {
    case PipelineKind::draft: return "draft";
    case PipelineKind::saft: return "saft";
    case PipelineKind::no_adapt: return "no_adapt";
    case PipelineKind::scratch: return "scratch";
  }
  return "";
}

PipelineKind parse_pipeline(const std::string& s) {
  for (auto k : {PipelineKind::draft, PipelineKind::saft, PipelineKind::no_adapt, PipelineKind::scratch})
    if (s == pipeline_name(k)) return k;
  throw std::invalid_argument("unknown pipeline: " + s);
}

PipelineData load_pipeline_data(const std::string& corpus_dir) {
  namespace fs = std::filesystem;
  const fs::path d(corpus_dir);
  return {load_dataset((d / "source.tsv").string()), load_dataset((d / "target.tsv").string()),
          load_dataset((d / "test.tsv").string())};
}

PipelineResult run_pipeline(PipelineKind kind, const KeyValueConfig& kv, const PipelineData& data,
                            const std::optional<Checkpoint>& pretrained) {
  PipelineResult r;
  std::optional<Checkpoint> ck;
  if (kind != PipelineKind::scratch) {
    if (pretrained) {
      ck = pretrained;
    } else {
      StageResult s = run_stage(stage_config_from(kv, Stage::pretrain), std::nullopt, data.source);
      r.pretrain_epoch_loss = s.epoch_loss;
      ck = std::move(s.checkpoint);
    }
  }
  if (kind == PipelineKind::draft || kind == PipelineKind::saft) {
    const Stage st = kind == PipelineKind::draft ? Stage::draft_adapt : Stage::saft;
    ck = run_stage(stage_config_from(kv, st), ck, data.target).checkpoint;
  }
  StageConfig ft = stage_config_from(kv, Stage::finetune);
  r.finetuned = run_stage(ft, ck, data.target).checkpoint;
  r.ter = evaluate(r.finetuned, data.test, ft.vocab_size).ter;
  return r;
}

}  // namespace draft
