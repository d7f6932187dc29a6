#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "draft/data.hpp"
#include "draft/featurizer.hpp"
#include "draft/model.hpp"
#include "draft/optim.hpp"
#include "draft/ssl.hpp"

namespace draft {

struct NoamSchedule {
  double factor = 1.0;
  std::size_t warmup = 4000;
  std::size_t d_model = 64;
};

/// factor * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), step >= 1.
double noam_lr(const NoamSchedule& s, std::size_t step);
/// The value at step == warmup.
double noam_peak(const NoamSchedule& s);

struct TriStageSchedule {
  double peak = 3e-5;
  std::size_t ramp = 0;
  std::size_t hold = 0;
  double final_ratio = 0.05;
};

/// Linear 0 -> peak over ramp steps, peak for hold steps, then exponential
/// decay reaching final_ratio * peak at step == total.
double tri_stage_lr(const TriStageSchedule& s, std::size_t step, std::size_t total);

enum class Stage { pretrain, saft, draft_adapt, finetune };
enum class Objective { apc, eapc, ebiapc, contrastive, hubert };
enum class FinetuneMode { full, adapters_frozen, adapters_only, random_adapters, plus_ra };
enum class ScheduleKind { noam, tri_stage };

const char* stage_name(Stage s);
Stage parse_stage(const std::string& s);
const char* objective_name(Objective o);
Objective parse_objective(const std::string& s);
const char* finetune_mode_name(FinetuneMode m);
FinetuneMode parse_finetune_mode(const std::string& s);

struct ScheduleConfig {
  ScheduleKind kind = ScheduleKind::noam;
  NoamSchedule noam;
  TriStageSchedule tri;
  double scale = 1.0;  // multiplies every value
  // When set (>= 0), tri-stage ramp and hold lengths are fractions of the
  // stage's total steps instead of tri.ramp / tri.hold.
  double ramp_frac = -1.0;
  double hold_frac = -1.0;

  double lr(std::size_t step, std::size_t total) const;
};

struct StageConfig {
  Stage stage = Stage::pretrain;
  Objective objective = Objective::eapc;
  ModelConfig model;  // used when building a fresh model
  InputKind input = InputKind::features;
  ShiftSpec shift{1, 1, 1};
  SharingScheme sharing = SharingScheme::none;
  ContrastiveConfig contrastive;
  HubertConfig hubert;
  std::size_t kmeans_k = 16;
  std::size_t kmeans_iters = 20;
  std::size_t kmeans_max_points = 4000;

  std::size_t d_ada = 64;
  FinetuneMode finetune_mode = FinetuneMode::full;
  std::size_t vocab_size = 0;  // including the blank; required for finetune
  SpecAugConfig spec_augment;

  std::size_t epochs = 1;
  std::size_t max_steps = 0;  // 0: epochs only
  std::size_t batch_size = 16;
  std::uint64_t seed = 0;
  ScheduleConfig schedule;
  double clip_norm = 5.0;
  AdamHyper adam;
};

/// Number of updates each group has received, by stage. "g" is the SSL
/// generator, "g'" the CTC head.
struct Provenance {
  std::vector<std::string> stages;
  std::map<std::string, std::size_t> versions;

  /// e.g. "{θ_f¹, θ_ada¹, θ_g¹}".
  std::string render() const;
  /// True when every counter of `later` is >= this one's.
  bool precedes(const Provenance& later) const;
};

struct Checkpoint {
  Backbone model;
  Provenance provenance;
  Objective objective = Objective::eapc;
  InputKind input = InputKind::features;
  ShiftSpec shift{1, 1, 1};
  SharingScheme sharing = SharingScheme::none;
  std::size_t vocab_size = 0;  // 0 until finetuned
  std::optional<KMeansModel> kmeans;
  std::string rng_state;
};

/// SSLCKPT1: magic, u32 header length, JSON header, raw tensor payloads.
void save_checkpoint(const Checkpoint& c, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// One JSON object per line: {step, stage, loss, lr, seed}.
class MetricsLog {
 public:
  MetricsLog() = default;
  explicit MetricsLog(std::ostream* out) : out_(out) {}
  void log(std::size_t step, Stage stage, double loss, double lr, std::uint64_t seed);
  const std::vector<double>& losses() const { return losses_; }

 private:
  std::ostream* out_ = nullptr;
  std::vector<double> losses_;
};

struct StageResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_loss;  // mean training loss per epoch
  std::size_t steps = 0;
};

/// Runs one training stage on `data`. init is required except for pretrain
/// and for finetuning from scratch.
StageResult run_stage(const StageConfig& cfg, const std::optional<Checkpoint>& init, const std::vector<Utterance>& data,
                      MetricsLog* log = nullptr);

/// Output width the generators need for an objective.
std::size_t ssl_generator_dim(const StageConfig& cfg);

struct UtteranceResult {
  std::string id;
  std::vector<std::size_t> ref;
  std::vector<std::size_t> hyp;
  std::size_t edits = 0;
};

struct EvalReport {
  double ter = 0.0;
  std::vector<UtteranceResult> utterances;
  std::string provenance;
};

/// Greedy CTC decoding and token error rate. vocab_size must match the head.
EvalReport evaluate(const Checkpoint& ckpt, const std::vector<Utterance>& data, std::size_t vocab_size,
                    std::size_t batch_size = 32);
std::string report_json(const EvalReport& r);

}  // namespace draft
