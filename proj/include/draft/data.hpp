#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "draft/featurizer.hpp"
#include "draft/tensor.hpp"

namespace draft {

enum class Domain { source, target };
enum class EmitMode { features, waveform };

const char* domain_name(Domain d);
Domain parse_domain(const std::string& s);
const char* emit_mode_name(EmitMode m);
EmitMode parse_emit_mode(const std::string& s);

struct SynthConfig {
  std::size_t v_tok = 8;
  std::size_t proto_len = 8;  // frames per token before duration jitter
  std::size_t duration_jitter = 2;
  std::size_t dim = 8;
  double noise = 0.3;
  std::size_t min_tokens = 3;
  std::size_t max_tokens = 6;
  std::size_t source_utts = 500;
  std::size_t target_utts = 200;
  std::size_t test_utts = 100;  // held-out target-domain utterances
  std::uint64_t seed = 0;
  EmitMode emit = EmitMode::features;
  int sample_rate = 16000;
  // Singular values of A are drawn from [1 / sqrt(max_condition), sqrt(max_condition)].
  double max_condition = 8.0;
  double shift_scale = 1.0;  // scale of the offset b
};

/// Target-domain map x -> A x + b (D x D, row-major). A = U diag(s) V^T with
/// random orthogonal U, V.
struct DomainTransform {
  std::size_t dim = 0;
  std::vector<double> A;
  std::vector<double> b;

  std::vector<double> apply(const std::vector<double>& x) const;
};

DomainTransform make_domain_transform(const SynthConfig& cfg);

/// Per-token prototypes, proto_len x dim each; index 0 (blank) is unused.
std::vector<std::vector<double>> make_prototypes(const SynthConfig& cfg);

struct ManifestRow {
  std::string id;
  std::string path;  // relative paths resolve against the manifest's directory
  std::vector<std::size_t> transcript;
  Domain domain = Domain::source;
};

struct Manifest {
  std::string base_dir;
  std::vector<ManifestRow> rows;
};

/// Columns id, path, transcript (space-separated token ids), domain; '#' starts
/// a comment line.
Manifest load_manifest(const std::string& path);
void write_manifest(const Manifest& m, const std::string& path);
std::string resolve_path(const Manifest& m, const ManifestRow& row);

struct CorpusPaths {
  std::string source;
  std::string target;
  std::string test;
};

/// Writes FEAT1 files under out_dir/feats and the manifests source.tsv,
/// target.tsv and test.tsv. Byte-identical for equal configs.
CorpusPaths gen_corpus(const SynthConfig& cfg, const std::string& out_dir);

/// Log-mel features for every row of a waveform manifest; writes a new
/// manifest (same ids) under out_dir.
std::string featurize_manifest(const std::string& manifest_path, const FeaturizerConfig& fc, const std::string& out_dir);

struct Utterance {
  std::string id;
  FeatureMatrix features;
  std::vector<std::size_t> transcript;
  Domain domain = Domain::source;
};

/// Reads every feature file. Errors on duplicate ids or missing files.
std::vector<Utterance> load_dataset(const Manifest& m);
std::vector<Utterance> load_dataset(const std::string& manifest_path);

struct Batch {
  Tensor features;  // B x T_max x D, zero padded
  std::vector<std::size_t> lengths;
  std::vector<std::vector<std::size_t>> targets;
  std::vector<std::string> ids;
  std::vector<std::size_t> indices;  // positions in the dataset
};

/// Index groups: utterances sorted by length (ties shuffled), cut into
/// consecutive batches, batch order shuffled. Every index appears once.
std::vector<std::vector<std::size_t>> batch_indices(const std::vector<Utterance>& data, std::size_t batch_size,
                                                    std::uint64_t seed);
Batch make_batch(const std::vector<Utterance>& data, const std::vector<std::size_t>& indices, DType dtype);
std::vector<Batch> make_batches(const std::vector<Utterance>& data, std::size_t batch_size, std::uint64_t seed,
                                DType dtype = DType::f32);

/// `key = value` lines with '#' comments.
class KeyValueConfig {
 public:
  static KeyValueConfig parse(const std::string& text);
  static KeyValueConfig load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { values_[key] = value; }
  // Typed getters throw std::invalid_argument naming the key on bad values.
  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

SynthConfig synth_config_from(const KeyValueConfig& kv);

}  // namespace draft
