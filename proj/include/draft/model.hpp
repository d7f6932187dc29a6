#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "draft/tensor.hpp"

namespace draft {

enum class Frontend { filterbank, learned_conv };
enum class MaskMode { causal, full };
enum class ParamGroup { backbone, adapter, generator };
enum class SharingScheme { none, share_generator, share_gen_encoder, share_all };
enum class InputKind { features, waveform };

const char* frontend_name(Frontend f);
Frontend parse_frontend(const std::string& s);
const char* mask_mode_name(MaskMode m);
MaskMode parse_mask_mode(const std::string& s);
const char* group_name(ParamGroup g);
ParamGroup parse_group(const std::string& s);
const char* scheme_name(SharingScheme s);
SharingScheme parse_scheme(const std::string& s);

struct ModelConfig {
  Frontend frontend = Frontend::filterbank;
  std::size_t feature_dim = 8;
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t n_blocks = 2;
  std::size_t ffn_dim = 128;
  std::size_t subsample_factor = 4;
  MaskMode mask_mode = MaskMode::causal;
  std::size_t d_ada = 0;  // 0: no adapters
  double dropout = 0.0;
  DType dtype = DType::f32;

  // Output heads. gen_dim 0 means subsample_factor * feature_dim.
  std::size_t gen_count = 1;
  std::size_t gen_dim = 0;
  // Vector quantizer (contrastive objective); 0 disables it.
  std::size_t quant_codes = 0;
  std::size_t code_dim = 0;
  bool mask_embedding = false;

  std::size_t generator_dim() const { return gen_dim ? gen_dim : subsample_factor * feature_dim; }
  /// Throws std::invalid_argument on inconsistent settings.
  void validate() const;
};

struct NamedParam {
  std::string name;
  ParamGroup group;
  Tensor value;
};

struct Linear {
  Tensor weight;  // in x out
  Tensor bias;    // out
  Tensor operator()(const Tensor& x) const;
};

struct Norm {
  Tensor gamma, beta;
  Tensor operator()(const Tensor& x) const;
};

struct ConvLayer {
  Tensor kernel;  // W x Din x Dout
  Tensor bias;
  std::size_t stride = 2;
};

struct ResidualAdapter {
  Norm ln;
  Linear down, up;
  /// x + up(relu(down(ln(x)))).
  Tensor operator()(const Tensor& x) const;
};

struct EncoderBlock {
  Norm ln1;
  Linear q, k, v, o;
  Norm ln2;
  Linear ff1, ff2;
};

/// Hidden states with the valid length of every sequence in the batch.
struct Encoded {
  Tensor hidden;  // B x T x d
  std::vector<std::size_t> lengths;
};

struct ForwardOptions {
  bool train = false;
  std::mt19937_64* rng = nullptr;  // dropout noise, used when train is set
};

/// Frontend, conv subsampler, encoder blocks, adapters and generators. The
/// registry owns every parameter; the structured members are views that
/// bind() refreshes from it.
class Backbone {
 public:
  ModelConfig cfg;
  std::vector<NamedParam> registry;

  std::vector<ConvLayer> frontend;
  std::vector<ConvLayer> subsampler;
  std::vector<EncoderBlock> blocks;
  Norm final_ln;
  std::vector<ResidualAdapter> adapters;
  std::vector<Linear> generators;

  bool has(const std::string& name) const;
  const Tensor& param(const std::string& name) const;
  NamedParam& entry(const std::string& name);
  void add(std::string name, ParamGroup group, Tensor value);
  void remove_if_prefix(const std::string& prefix);
  void bind();

  std::vector<Tensor> parameters() const;
  std::vector<Tensor> parameters(ParamGroup g) const;
  std::size_t parameter_count() const;
  std::size_t parameter_count(ParamGroup g) const;
  bool has_adapters() const { return !adapters.empty(); }
};

Backbone build_backbone(const ModelConfig& cfg, std::uint64_t seed);
/// Structurally identical model with independent tensors.
Backbone clone_backbone(const Backbone& b);

/// Xavier-uniform init. Vectors use fan_in 1; W x Din x Dout kernels use
/// fan_in W Din and fan_out W Dout.
Tensor xavier_uniform(Shape shape, std::mt19937_64& rng, DType dtype);

/// B x T x T allow-matrix. Queries beyond a sequence's length attend its
/// valid keys so that no softmax row is empty; padded keys are never allowed.
BoolMask attention_mask(MaskMode mode, std::size_t T, const std::vector<std::size_t>& lengths);

/// Subsampled lengths for raw input lengths.
std::vector<std::size_t> output_lengths(const ModelConfig& cfg, const std::vector<std::size_t>& lengths);

/// Frontend plus conv block: B x T x D (or B x N x 1 waveform) to the latent
/// B x T' x d_model. Positions beyond each valid length are zero.
Encoded encode_frontend(const Backbone& b, const Tensor& x, const std::vector<std::size_t>& lengths, InputKind kind,
                        const ForwardOptions& opt = {});
/// Adapter after the conv block, positional encoding, encoder blocks with
/// their adapters, final layer norm.
Encoded encode_context(const Backbone& b, const Encoded& latent, const ForwardOptions& opt = {});
Encoded forward(const Backbone& b, const Tensor& x, const std::vector<std::size_t>& lengths, InputKind kind,
                const ForwardOptions& opt = {});
/// Generator i applied to hidden states.
Tensor generator_forward(const Backbone& b, std::size_t i, const Tensor& hidden);

Tensor sinusoidal_positions(std::size_t T, std::size_t d, DType dtype);

/// Adds n_blocks + 1 adapters with bottleneck d_ada. Existing tensors are
/// left untouched.
void insert_adapters(Backbone& b, std::size_t d_ada, std::uint64_t seed);
/// Re-initializes existing adapters in place.
void reinit_adapters(Backbone& b, std::uint64_t seed);
/// Replaces every generator with `count` fresh heads of width out_dim.
void replace_generators(Backbone& b, std::size_t count, std::size_t out_dim, std::uint64_t seed);
/// Parameter count of one adapter: 2 D d_ada + d_ada + 3 D.
std::size_t adapter_parameter_count(std::size_t d_model, std::size_t d_ada);

/// Only the listed groups keep requires_grad.
void set_trainable(Backbone& b, const std::set<ParamGroup>& groups);

/// Forward (left to right) and reverse direction models. Shared modules are
/// the same tensor objects.
struct BiApcPair {
  Backbone fwd;
  Backbone rev;
  SharingScheme scheme = SharingScheme::none;
};

bool shared_under(SharingScheme scheme, const NamedParam& p);
BiApcPair build_biapc_pair(const ModelConfig& cfg, SharingScheme scheme, std::uint64_t seed);
/// Elementwise mean of unshared tensors; shared ones are copied through.
Backbone average_directions(const Backbone& a, const Backbone& b);
Backbone average_directions(const BiApcPair& pair);

/// Reverses each sequence of a B x T x D batch within its valid length;
/// padding stays in place.
Tensor reverse_within_lengths(const Tensor& x, const std::vector<std::size_t>& lengths);

/// FNV-1a over the bytes of every tensor in the group, for freeze checks.
std::uint64_t checksum(const Backbone& b, ParamGroup g);

}  // namespace draft
