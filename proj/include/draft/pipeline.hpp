#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "draft/data.hpp"
#include "draft/train.hpp"

namespace draft {

/// Stage settings from config keys. Unknown keys are ignored here; the CLI
/// reports them.
StageConfig stage_config_from(const KeyValueConfig& kv, Stage stage);
/// Every key stage_config_from or synth_config_from reads.
const std::vector<std::string>& known_config_keys();

enum class PipelineKind { draft, saft, no_adapt, scratch };
const char* pipeline_name(PipelineKind k);
PipelineKind parse_pipeline(const std::string& s);

struct PipelineData {
  std::vector<Utterance> source;
  std::vector<Utterance> target;
  std::vector<Utterance> test;
};

PipelineData load_pipeline_data(const std::string& corpus_dir);

struct PipelineResult {
  double ter = 0.0;
  Checkpoint finetuned;
  std::vector<double> pretrain_epoch_loss;
};

/// Pretrain on source (unless scratch), adapt on target (draft: adapters
/// only; saft: everything), CTC finetune on target, evaluate on test.
/// `pretrained` skips the first stage when given.
PipelineResult run_pipeline(PipelineKind kind, const KeyValueConfig& kv, const PipelineData& data,
                            const std::optional<Checkpoint>& pretrained = std::nullopt);

}  // namespace draft
