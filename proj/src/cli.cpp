#include "draft/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <stdexcept>

#include "CLI11.hpp"
#include "draft/data.hpp"
#include "draft/gradcheck_suite.hpp"
#include "draft/kernels.hpp"
#include "draft/pipeline.hpp"
#include "draft/train.hpp"
#include "json.hpp"

namespace draft {

namespace {

namespace fs = std::filesystem;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigFlags {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool verification = false;
};

void add_config_flags(CLI::App* sub, ConfigFlags& f) {
  sub->add_option("--config", f.config, "key = value config file")->check(CLI::ExistingFile);
  sub->add_option("--set", f.overrides, "KEY=VALUE override, repeatable; wins over the config file");
  sub->add_option("--seed", f.seed, "training and corpus seed (sets seed and corpus_seed)");
  sub->add_flag("--verification", f.verification, "checked kernels; same results as the default fast path");
}

// Flags over file values; every key must be known.
KeyValueConfig assemble(const ConfigFlags& f, const std::map<std::string, std::string>& extra = {}) {
  KeyValueConfig kv = f.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(f.config);
  for (const auto& o : f.overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects KEY=VALUE, got '" + o + "'");
    kv.set(o.substr(0, eq), o.substr(eq + 1));
  }
  if (f.seed) {
    kv.set("seed", std::to_string(*f.seed));
    kv.set("corpus_seed", std::to_string(*f.seed));
  }
  for (const auto& [k, v] : extra) kv.set(k, v);
  const auto& known = known_config_keys();
  for (const auto& [k, v] : kv.values())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw UsageError("unknown config key: " + k);
  const bool verify = f.verification || kv.get_bool("verification", false);
  kernels::set_exec_mode(verify ? kernels::ExecMode::verification : kernels::ExecMode::fast);
  return kv;
}

FeaturizerConfig featurizer_config_from(const KeyValueConfig& kv) {
  FeaturizerConfig fc;
  fc.n_mels = kv.get_size("n_mels", kv.get_size("feature_dim", 8));
  fc.window_ms = kv.get_double("window_ms", fc.window_ms);
  fc.shift_ms = kv.get_double("shift_ms", fc.shift_ms);
  return fc;
}

void print_losses(const StageResult& r) {
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) std::cout << "epoch " << e + 1 << " loss " << r.epoch_loss[e] << "\n";
  std::cout << "steps " << r.steps << " provenance " << r.checkpoint.provenance.render() << "\n";
}

struct StageFlags {
  ConfigFlags cfg;
  std::string data;
  std::string out;
  std::string metrics;
  std::string init;
  std::string mode;
  std::string objective;
};

void add_stage_flags(CLI::App* sub, StageFlags& f, bool needs_init) {
  add_config_flags(sub, f.cfg);
  sub->add_option("--data", f.data, "training manifest (TSV)")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", f.out, "checkpoint to write (SSLCKPT1)")->required();
  sub->add_option("--metrics", f.metrics, "JSON-lines metrics file");
  auto* init = sub->add_option("--init", f.init, "checkpoint to start from")->check(CLI::ExistingFile);
  if (needs_init) init->required();
}

int run_stage_command(Stage stage, const StageFlags& f) {
  std::map<std::string, std::string> extra;
  if (!f.objective.empty()) extra["objective"] = f.objective;
  if (stage == Stage::finetune && !f.mode.empty()) extra["finetune_mode"] = f.mode;
  const KeyValueConfig kv = assemble(f.cfg, extra);
  const StageConfig sc = stage_config_from(kv, stage);
  std::optional<Checkpoint> init;
  if (!f.init.empty()) init = load_checkpoint(f.init);
  const std::vector<Utterance> data = load_dataset(f.data);

  std::ofstream metrics;
  if (!f.metrics.empty()) {
    metrics.open(f.metrics, std::ios::binary);
    if (!metrics) throw std::runtime_error("cannot write " + f.metrics);
  }
  MetricsLog log(f.metrics.empty() ? nullptr : &metrics);
  const StageResult r = run_stage(sc, init, data, &log);
  save_checkpoint(r.checkpoint, f.out);
  print_losses(r);
  return 0;
}

int run_gradcheck(std::size_t seeds, double tolerance) {
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  for (std::uint64_t s = 0; s < seeds; ++s) {
    for (auto* suite : {&primitive_gradchecks, &loss_gradchecks}) {
      for (const auto& r : (*suite)(s)) {
        if (!worst.count(r.name)) order.push_back(r.name);
        worst[r.name] = std::max(worst[r.name], r.max_rel_error);
      }
    }
  }
  std::size_t failed = 0;
  for (const auto& name : order) {
    const bool ok = worst[name] < tolerance;
    failed += !ok;
    std::cout << (ok ? "PASS " : "FAIL ") << name << " max_rel_error " << worst[name] << "\n";
  }
  std::cout << order.size() - failed << "/" << order.size() << " checks passed over " << seeds << " seeds\n";
  return failed ? 1 : 0;
}

bool is_corpus_key(const std::string& k) {
  static const std::vector<std::string> keys{"v_tok",     "proto_len",   "duration_jitter", "feature_dim", "noise",
                                             "min_tokens", "max_tokens", "source_utts",     "target_utts", "test_utts",
                                             "corpus_seed", "emit",      "sample_rate",     "max_condition",
                                             "shift_scale"};
  return std::find(keys.begin(), keys.end(), k) != keys.end();
}

// Keys read only after pretraining; sweeping them can share one pretrained model.
bool is_downstream_key(const std::string& k) {
  return k == "d_ada" || k == "finetune_mode" || k.rfind("finetune_", 0) == 0 || k.rfind("adapt_", 0) == 0 ||
         k == "draft_lr_scale" || k == "saft_lr_scale" || k.rfind("specaug_", 0) == 0;
}

int run_sweep(const ConfigFlags& cf, const std::string& key, const std::vector<std::string>& values,
              const std::string& corpus, const std::string& pipeline, const std::string& out) {
  const PipelineKind kind = parse_pipeline(pipeline);
  KeyValueConfig base = assemble(cf);
  const auto& known = known_config_keys();
  if (std::find(known.begin(), known.end(), key) == known.end()) throw UsageError("unknown config key: " + key);
  if (corpus.empty() && !is_corpus_key(key)) throw UsageError("--corpus is required unless the swept key shapes the corpus");

  std::ofstream os(out, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + out);
  std::optional<PipelineData> shared;
  if (!corpus.empty() && !is_corpus_key(key)) shared = load_pipeline_data(corpus);
  std::optional<Checkpoint> pretrained;
  for (std::size_t i = 0; i < values.size(); ++i) {
    KeyValueConfig kv = base;
    kv.set(key, values[i]);
    PipelineData data;
    if (shared) {
      data = *shared;
    } else {
      const std::string dir = out + ".corpus/" + std::to_string(i);
      gen_corpus(synth_config_from(kv), dir);
      data = load_pipeline_data(dir);
    }
    const bool reuse = is_downstream_key(key) && kind != PipelineKind::scratch;
    if (reuse && !pretrained) pretrained = run_stage(stage_config_from(kv, Stage::pretrain), std::nullopt, data.source).checkpoint;
    const PipelineResult r = run_pipeline(kind, kv, data, reuse ? pretrained : std::nullopt);
    nlohmann::ordered_json line{{"key", key},
                                {"value", values[i]},
                                {"pipeline", pipeline},
                                {"seed", kv.get_u64("seed", 0)},
                                {"ter", r.ter}};
    os << line.dump() << "\n";
    os.flush();
    std::cout << key << "=" << values[i] << " ter " << r.ter << "\n";
  }
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"Self-supervised pretraining, residual-adapter domain adaptation and CTC finetuning on synthetic corpora",
               "draft"};
  app.require_subcommand(1);

  ConfigFlags gen_flags;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-corpus", "write a synthetic source/target/test corpus");
  add_config_flags(gen, gen_flags);
  gen->add_option("--out", gen_out, "output directory")->required();

  ConfigFlags feat_flags;
  std::string feat_manifest, feat_out;
  auto* feat = app.add_subcommand("featurize", "log-mel features for a waveform manifest");
  add_config_flags(feat, feat_flags);
  feat->add_option("--manifest", feat_manifest, "waveform manifest (TSV)")->required()->check(CLI::ExistingFile);
  feat->add_option("--out", feat_out, "output directory")->required();

  StageFlags pre_flags;
  auto* pre = app.add_subcommand("pretrain", "stage 1: self-supervised pretraining");
  add_stage_flags(pre, pre_flags, false);
  pre->add_option("--objective", pre_flags.objective, "apc | eapc | ebiapc | contrastive | hubert")
      ->check(CLI::IsMember({"apc", "eapc", "ebiapc", "contrastive", "hubert"}));

  StageFlags ada_flags;
  auto* ada = app.add_subcommand("adapt", "stage 2: SSL adaptation on target data");
  add_stage_flags(ada, ada_flags, true);
  ada->add_option("--mode", ada_flags.mode, "draft (adapters only) | saft (whole model)")
      ->required()
      ->check(CLI::IsMember({"saft", "draft"}));

  StageFlags ft_flags;
  auto* ft = app.add_subcommand("finetune", "stage 3: CTC finetuning (from scratch without --init)");
  add_stage_flags(ft, ft_flags, false);
  ft->add_option("--mode", ft_flags.mode, "full | adapters_frozen | adapters_only | random_adapters | plus_ra")
      ->check(CLI::IsMember({"full", "adapters_frozen", "adapters_only", "random_adapters", "plus_ra"}));

  ConfigFlags ev_flags;
  std::string ev_ckpt, ev_data, ev_report;
  std::optional<std::size_t> ev_vocab;
  auto* ev = app.add_subcommand("evaluate", "greedy CTC decoding and token error rate");
  add_config_flags(ev, ev_flags);
  ev->add_option("--ckpt", ev_ckpt, "finetuned checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "evaluation manifest (TSV)")->required()->check(CLI::ExistingFile);
  ev->add_option("--report", ev_report, "JSON report path");
  ev->add_option("--vocab-size", ev_vocab, "expected vocabulary size including blank (default: the checkpoint's)");

  std::size_t gc_seeds = 20;
  double gc_tol = 1e-6;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference oracle over every primitive and loss");
  gc->add_option("--seeds", gc_seeds, "number of random seeds")->check(CLI::PositiveNumber);
  gc->add_option("--tolerance", gc_tol, "maximum relative error");

  ConfigFlags sw_flags;
  std::string sw_key, sw_corpus, sw_pipeline = "draft", sw_out;
  std::vector<std::string> sw_values;
  auto* sw = app.add_subcommand("sweep", "run a pipeline once per value of one config key");
  add_config_flags(sw, sw_flags);
  sw->add_option("--key", sw_key, "config key to vary")->required();
  sw->add_option("--values", sw_values, "comma-separated values")->required()->delimiter(',');
  sw->add_option("--corpus", sw_corpus, "corpus directory from gen-corpus");
  sw->add_option("--pipeline", sw_pipeline, "draft | saft | no_adapt | scratch")
      ->check(CLI::IsMember({"draft", "saft", "no_adapt", "scratch"}));
  sw->add_option("--out", sw_out, "JSON-lines results")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (gen->parsed()) {
      const CorpusPaths p = gen_corpus(synth_config_from(assemble(gen_flags)), gen_out);
      std::cout << p.source << "\n" << p.target << "\n" << p.test << "\n";
      return 0;
    }
    if (feat->parsed()) {
      std::cout << featurize_manifest(feat_manifest, featurizer_config_from(assemble(feat_flags)), feat_out) << "\n";
      return 0;
    }
    if (pre->parsed()) return run_stage_command(Stage::pretrain, pre_flags);
    if (ada->parsed()) return run_stage_command(ada_flags.mode == "draft" ? Stage::draft_adapt : Stage::saft, ada_flags);
    if (ft->parsed()) return run_stage_command(Stage::finetune, ft_flags);
    if (ev->parsed()) {
      assemble(ev_flags);
      const Checkpoint ck = load_checkpoint(ev_ckpt);
      const EvalReport r = evaluate(ck, load_dataset(ev_data), ev_vocab.value_or(ck.vocab_size));
      if (!ev_report.empty()) {
        std::ofstream os(ev_report, std::ios::binary);
        if (!os) throw std::runtime_error("cannot write " + ev_report);
        os << report_json(r) << "\n";
      }
      std::cout << "ter " << r.ter << " utterances " << r.utterances.size() << "\n";
      return 0;
    }
    if (gc->parsed()) return run_gradcheck(gc_seeds, gc_tol);
    if (sw->parsed()) return run_sweep(sw_flags, sw_key, sw_values, sw_corpus, sw_pipeline, sw_out);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

int cli_main(const std::vector<std::string>& args) {
  std::vector<const char*> argv{"draft"};
  for (const auto& a : args) argv.push_back(a.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace draft
