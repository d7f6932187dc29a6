#include "draft/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace draft {

const char* frontend_name(Frontend f) { return f == Frontend::filterbank ? "filterbank" : "learned_conv"; }

Frontend parse_frontend(const std::string& s) {
  if (s == "filterbank") return Frontend::filterbank;
  if (s == "learned_conv") return Frontend::learned_conv;
  throw std::invalid_argument("unknown frontend '" + s + "'");
}

const char* mask_mode_name(MaskMode m) { return m == MaskMode::causal ? "causal" : "full"; }

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "causal") return MaskMode::causal;
  if (s == "full") return MaskMode::full;
  throw std::invalid_argument("unknown mask mode '" + s + "'");
}

const char* group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::adapter: return "adapter";
    case ParamGroup::generator: return "generator";
  }
  return "?";
}

ParamGroup parse_group(const std::string& s) {
  if (s == "backbone") return ParamGroup::backbone;
  if (s == "adapter") return ParamGroup::adapter;
  if (s == "generator") return ParamGroup::generator;
  throw std::invalid_argument("unknown group name '" + s + "'");
}

const char* scheme_name(SharingScheme s) {
  switch (s) {
    case SharingScheme::none: return "none";
    case SharingScheme::share_generator: return "share_generator";
    case SharingScheme::share_gen_encoder: return "share_gen_encoder";
    case SharingScheme::share_all: return "share_all";
  }
  return "?";
}

SharingScheme parse_scheme(const std::string& s) {
  if (s == "none") return SharingScheme::none;
  if (s == "share_generator") return SharingScheme::share_generator;
  if (s == "share_gen_encoder") return SharingScheme::share_gen_encoder;
  if (s == "share_all") return SharingScheme::share_all;
  throw std::invalid_argument("unknown sharing scheme '" + s + "'");
}

void ModelConfig::validate() const {
  if (feature_dim == 0 || d_model == 0 || n_heads == 0 || ffn_dim == 0)
    throw std::invalid_argument("model dimensions must be positive");
  if (d_model % n_heads != 0) throw std::invalid_argument("d_model must be divisible by n_heads");
  if (subsample_factor != 1 && subsample_factor != 2 && subsample_factor != 4)
    throw std::invalid_argument("subsample_factor must be 1, 2 or 4");
  if (gen_count == 0) throw std::invalid_argument("at least one generator is required");
  if (quant_codes > 0 && code_dim == 0) throw std::invalid_argument("quantizer needs code_dim");
  if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0, 1)");
}

// ---------------------------------------------------------------------------

Tensor Linear::operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

Tensor Norm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta, 1e-5); }

Tensor ResidualAdapter::operator()(const Tensor& x) const {
  if (x.shape().back() != ln.gamma.numel()) throw std::invalid_argument("adapter input dimension mismatch");
  return add(x, up(relu(down(ln(x)))));
}

bool Backbone::has(const std::string& name) const {
  return std::any_of(registry.begin(), registry.end(), [&](const NamedParam& p) { return p.name == name; });
}

NamedParam& Backbone::entry(const std::string& name) {
  for (auto& p : registry)
    if (p.name == name) return p;
  throw std::out_of_range("no parameter named " + name);
}

const Tensor& Backbone::param(const std::string& name) const {
  for (const auto& p : registry)
    if (p.name == name) return p.value;
  throw std::out_of_range("no parameter named " + name);
}

void Backbone::add(std::string name, ParamGroup group, Tensor value) {
  if (has(name)) throw std::logic_error("duplicate parameter " + name);
  registry.push_back({std::move(name), group, std::move(value)});
}

void Backbone::remove_if_prefix(const std::string& prefix) {
  std::erase_if(registry, [&](const NamedParam& p) { return p.name.rfind(prefix, 0) == 0; });
}

void Backbone::bind() {
  auto lin = [&](const std::string& n) { return Linear{param(n + ".weight"), param(n + ".bias")}; };
  auto norm = [&](const std::string& n) { return Norm{param(n + ".gamma"), param(n + ".beta")}; };
  auto conv = [&](const std::string& n, std::size_t stride) {
    return ConvLayer{param(n + ".kernel"), param(n + ".bias"), stride};
  };

  frontend.clear();
  for (std::size_t i = 0; has("frontend.conv" + std::to_string(i) + ".kernel"); ++i)
    frontend.push_back(conv("frontend.conv" + std::to_string(i), 2));
  subsampler.clear();
  const std::size_t stride = cfg.subsample_factor == 1 ? 1 : 2;
  for (std::size_t i = 0; has("subsample.conv" + std::to_string(i) + ".kernel"); ++i)
    subsampler.push_back(conv("subsample.conv" + std::to_string(i), stride));
  blocks.clear();
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const std::string p = "block" + std::to_string(i);
    blocks.push_back({norm(p + ".ln1"), lin(p + ".attn.q"), lin(p + ".attn.k"), lin(p + ".attn.v"), lin(p + ".attn.o"),
                      norm(p + ".ln2"), lin(p + ".ffn.1"), lin(p + ".ffn.2")});
  }
  final_ln = norm("final_ln");
  adapters.clear();
  for (std::size_t i = 0; has("adapter" + std::to_string(i) + ".ln.gamma"); ++i) {
    const std::string p = "adapter" + std::to_string(i);
    adapters.push_back({norm(p + ".ln"), lin(p + ".down"), lin(p + ".up")});
  }
  generators.clear();
  for (std::size_t i = 0; has("gen" + std::to_string(i) + ".weight"); ++i) generators.push_back(lin("gen" + std::to_string(i)));
}

std::vector<Tensor> Backbone::parameters() const {
  std::vector<Tensor> out;
  for (const auto& p : registry) out.push_back(p.value);
  return out;
}

std::vector<Tensor> Backbone::parameters(ParamGroup g) const {
  std::vector<Tensor> out;
  for (const auto& p : registry)
    if (p.group == g) out.push_back(p.value);
  return out;
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : registry) n += p.value.numel();
  return n;
}

std::size_t Backbone::parameter_count(ParamGroup g) const {
  std::size_t n = 0;
  for (const auto& p : registry)
    if (p.group == g) n += p.value.numel();
  return n;
}

// ---------------------------------------------------------------------------

Tensor xavier_uniform(Shape shape, std::mt19937_64& rng, DType dtype) {
  double fan_in = 1, fan_out = 1;
  if (shape.size() == 1) {
    fan_out = static_cast<double>(shape[0]);
  } else if (shape.size() == 2) {
    fan_in = static_cast<double>(shape[0]);
    fan_out = static_cast<double>(shape[1]);
  } else if (shape.size() == 3) {
    fan_in = static_cast<double>(shape[0] * shape[1]);
    fan_out = static_cast<double>(shape[0] * shape[2]);
  } else {
    throw std::invalid_argument("xavier_uniform: unsupported rank");
  }
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> u(-limit, limit);
  std::vector<double> v(numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v), dtype);
}

namespace {

void add_linear(Backbone& b, const std::string& name, ParamGroup g, std::size_t in, std::size_t out,
                std::mt19937_64& rng) {
  b.add(name + ".weight", g, xavier_uniform({in, out}, rng, b.cfg.dtype));
  b.add(name + ".bias", g, Tensor::zeros({out}, b.cfg.dtype));
}

void add_norm(Backbone& b, const std::string& name, ParamGroup g, std::size_t d) {
  b.add(name + ".gamma", g, Tensor::full({d}, 1.0, b.cfg.dtype));
  b.add(name + ".beta", g, Tensor::zeros({d}, b.cfg.dtype));
}

void add_conv(Backbone& b, const std::string& name, std::size_t w, std::size_t in, std::size_t out,
              std::mt19937_64& rng) {
  b.add(name + ".kernel", ParamGroup::backbone, xavier_uniform({w, in, out}, rng, b.cfg.dtype));
  b.add(name + ".bias", ParamGroup::backbone, Tensor::zeros({out}, b.cfg.dtype));
}

void add_adapters(Backbone& b, std::size_t d_ada, std::mt19937_64& rng) {
  const std::size_t d = b.cfg.d_model;
  for (std::size_t i = 0; i <= b.cfg.n_blocks; ++i) {
    const std::string p = "adapter" + std::to_string(i);
    add_norm(b, p + ".ln", ParamGroup::adapter, d);
    add_linear(b, p + ".down", ParamGroup::adapter, d, d_ada, rng);
    add_linear(b, p + ".up", ParamGroup::adapter, d_ada, d, rng);
  }
}

void add_generators(Backbone& b, std::size_t count, std::size_t out_dim, std::mt19937_64& rng) {
  for (std::size_t i = 0; i < count; ++i)
    add_linear(b, "gen" + std::to_string(i), ParamGroup::generator, b.cfg.d_model, out_dim, rng);
}

constexpr std::size_t kSubsampleWidth = 3;
constexpr std::size_t kFrontendWidth = 8;
constexpr std::size_t kFrontendLayers = 3;

std::size_t subsample_layers(std::size_t factor) { return factor == 4 ? 2 : 1; }

Padding conv_padding(MaskMode m) { return m == MaskMode::causal ? Padding::causal : Padding::same; }

// B x T x 1 tensor of ones inside each valid length.
Tensor valid_mask(const std::vector<std::size_t>& lengths, std::size_t T, DType dtype) {
  std::vector<double> v(lengths.size() * T, 0.0);
  for (std::size_t b = 0; b < lengths.size(); ++b)
    for (std::size_t t = 0; t < std::min(lengths[b], T); ++t) v[b * T + t] = 1.0;
  return Tensor::from({lengths.size(), T, 1}, std::move(v), dtype);
}

std::vector<std::size_t> halve(const std::vector<std::size_t>& lengths) {
  std::vector<std::size_t> out(lengths.size());
  for (std::size_t i = 0; i < lengths.size(); ++i) out[i] = (lengths[i] + 1) / 2;
  return out;
}

Tensor apply_conv(const ConvLayer& c, const Tensor& x, MaskMode mode, const std::vector<std::size_t>& out_lengths) {
  Tensor y = gelu(add(conv1d(x, c.kernel, c.stride, conv_padding(mode)), c.bias));
  return mul(y, valid_mask(out_lengths, y.dim(1), y.dtype()));
}

Tensor dropout(const Tensor& x, const ForwardOptions& opt, double p) {
  if (!opt.train || p <= 0.0 || opt.rng == nullptr) return x;
  std::bernoulli_distribution keep(1.0 - p);
  std::vector<double> m(x.numel());
  for (auto& v : m) v = keep(*opt.rng) ? 1.0 / (1.0 - p) : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(m), x.dtype()));
}

Tensor split_heads(const Tensor& x, std::size_t B, std::size_t T, std::size_t H) {
  const std::size_t dh = x.dim(2) / H;
  return reshape(permute(reshape(x, {B, T, H, dh}), {0, 2, 1, 3}), {B * H, T, dh});
}

Tensor merge_heads(const Tensor& x, std::size_t B, std::size_t T, std::size_t H) {
  const std::size_t dh = x.dim(2);
  return reshape(permute(reshape(x, {B, H, T, dh}), {0, 2, 1, 3}), {B, T, H * dh});
}

Tensor self_attention(const EncoderBlock& blk, const Tensor& x, const BoolMask& mask, std::size_t H) {
  const std::size_t B = x.dim(0), T = x.dim(1), d = x.dim(2);
  const std::size_t dh = d / H;
  Tensor q = split_heads(blk.q(x), B, T, H);
  Tensor k = split_heads(blk.k(x), B, T, H);
  Tensor v = split_heads(blk.v(x), B, T, H);
  Tensor scores = scale(matmul(q, transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor attn = softmax(scores, 2, &mask);
  return blk.o(merge_heads(matmul(attn, v), B, T, H));
}

// Repeats a B x T x T mask for every head: (B H) x T x T.
BoolMask per_head(const BoolMask& m, std::size_t H) {
  const std::size_t B = m.shape[0], TT = m.shape[1] * m.shape[2];
  std::vector<std::uint8_t> v;
  v.reserve(B * H * TT);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t h = 0; h < H; ++h) v.insert(v.end(), m.values.begin() + b * TT, m.values.begin() + (b + 1) * TT);
  return BoolMask({B * H, m.shape[1], m.shape[2]}, std::move(v));
}

void check_lengths(const Tensor& x, const std::vector<std::size_t>& lengths) {
  if (x.rank() != 3) throw std::invalid_argument("expected a B x T x D batch, got " + shape_str(x.shape()));
  if (lengths.size() != x.dim(0)) throw std::invalid_argument("one length per sequence is required");
  for (auto l : lengths)
    if (l > x.dim(1)) throw std::invalid_argument("sequence length exceeds padded length");
}

}  // namespace

std::size_t adapter_parameter_count(std::size_t d_model, std::size_t d_ada) {
  return 2 * d_model * d_ada + d_ada + 3 * d_model;
}

Backbone build_backbone(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Backbone b;
  b.cfg = cfg;
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg.d_model;
  if (cfg.frontend == Frontend::learned_conv) {
    for (std::size_t i = 0; i < kFrontendLayers; ++i)
      add_conv(b, "frontend.conv" + std::to_string(i), kFrontendWidth, i == 0 ? 1 : d, d, rng);
  } else if (cfg.subsample_factor == 1) {
    add_conv(b, "subsample.conv0", 1, cfg.feature_dim, d, rng);
  } else {
    for (std::size_t i = 0; i < subsample_layers(cfg.subsample_factor); ++i)
      add_conv(b, "subsample.conv" + std::to_string(i), kSubsampleWidth, i == 0 ? cfg.feature_dim : d, d, rng);
  }
  if (cfg.mask_embedding) b.add("mask_emb", ParamGroup::backbone, xavier_uniform({d}, rng, cfg.dtype));
  for (std::size_t i = 0; i < cfg.n_blocks; ++i) {
    const std::string p = "block" + std::to_string(i);
    add_norm(b, p + ".ln1", ParamGroup::backbone, d);
    for (const char* n : {".attn.q", ".attn.k", ".attn.v", ".attn.o"}) add_linear(b, p + n, ParamGroup::backbone, d, d, rng);
    add_norm(b, p + ".ln2", ParamGroup::backbone, d);
    add_linear(b, p + ".ffn.1", ParamGroup::backbone, d, cfg.ffn_dim, rng);
    add_linear(b, p + ".ffn.2", ParamGroup::backbone, cfg.ffn_dim, d, rng);
  }
  add_norm(b, "final_ln", ParamGroup::backbone, d);
  add_generators(b, cfg.gen_count, cfg.generator_dim(), rng);
  if (cfg.quant_codes > 0) {
    add_linear(b, "quant.proj", ParamGroup::generator, d, cfg.quant_codes, rng);
    b.add("quant.codebook", ParamGroup::generator, xavier_uniform({cfg.quant_codes, cfg.code_dim}, rng, cfg.dtype));
  }
  if (cfg.d_ada > 0) add_adapters(b, cfg.d_ada, rng);
  b.bind();
  return b;
}

Backbone clone_backbone(const Backbone& b) {
  Backbone out;
  out.cfg = b.cfg;
  for (const auto& p : b.registry) {
    Tensor c = p.value.clone();
    c.set_requires_grad(p.value.requires_grad());
    out.registry.push_back({p.name, p.group, c});
  }
  out.bind();
  return out;
}

BoolMask attention_mask(MaskMode mode, std::size_t T, const std::vector<std::size_t>& lengths) {
  const std::size_t B = lengths.size();
  std::vector<std::uint8_t> v(B * T * T, 0);
  for (std::size_t b = 0; b < B; ++b) {
    const std::size_t len = lengths[b];
    if (len > T) throw std::invalid_argument("attention_mask: length exceeds T");
    for (std::size_t q = 0; q < T; ++q) {
      const std::size_t qq = std::min(q, len == 0 ? 0 : len - 1);
      for (std::size_t k = 0; k < len; ++k)
        if (mode == MaskMode::full || k <= qq) v[(b * T + q) * T + k] = 1;
    }
  }
  return BoolMask({B, T, T}, std::move(v));
}

std::vector<std::size_t> output_lengths(const ModelConfig& cfg, const std::vector<std::size_t>& lengths) {
  std::vector<std::size_t> out = lengths;
  const std::size_t halvings =
      cfg.frontend == Frontend::learned_conv ? kFrontendLayers : (cfg.subsample_factor == 1 ? 0 : subsample_layers(cfg.subsample_factor));
  for (std::size_t i = 0; i < halvings; ++i) out = halve(out);
  return out;
}

Tensor sinusoidal_positions(std::size_t T, std::size_t d, DType dtype) {
  std::vector<double> v(T * d);
  for (std::size_t t = 0; t < T; ++t)
    for (std::size_t i = 0; i < d; ++i) {
      const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
      v[t * d + i] = i % 2 == 0 ? std::sin(static_cast<double>(t) * rate) : std::cos(static_cast<double>(t) * rate);
    }
  return Tensor::from({T, d}, std::move(v), dtype);
}

Encoded encode_frontend(const Backbone& b, const Tensor& x, const std::vector<std::size_t>& lengths, InputKind kind,
                        const ForwardOptions& opt) {
  (void)opt;
  check_lengths(x, lengths);
  const bool wave = b.cfg.frontend == Frontend::learned_conv;
  if (wave && kind != InputKind::waveform) throw std::invalid_argument("learned_conv frontend expects waveform input");
  if (!wave && kind != InputKind::features) throw std::invalid_argument("filterbank frontend expects feature input");
  if (wave && x.dim(2) != 1) throw std::invalid_argument("waveform batch must be B x N x 1");
  if (!wave && x.dim(2) != b.cfg.feature_dim)
    throw std::invalid_argument("feature dim " + std::to_string(x.dim(2)) + " does not match model " +
                                std::to_string(b.cfg.feature_dim));

  Encoded e{x, lengths};
  for (const auto& layer : wave ? b.frontend : b.subsampler) {
    if (layer.stride == 2) e.lengths = halve(e.lengths);
    e.hidden = apply_conv(layer, e.hidden, b.cfg.mask_mode, e.lengths);
  }
  return e;
}

Encoded encode_context(const Backbone& b, const Encoded& latent, const ForwardOptions& opt) {
  const std::size_t T = latent.hidden.dim(1);
  Tensor h = latent.hidden;
  if (!b.adapters.empty()) h = b.adapters[0](h);
  h = add(h, sinusoidal_positions(T, b.cfg.d_model, h.dtype()));
  const BoolMask mask = per_head(attention_mask(b.cfg.mask_mode, T, latent.lengths), b.cfg.n_heads);
  for (std::size_t i = 0; i < b.blocks.size(); ++i) {
    const auto& blk = b.blocks[i];
    h = add(h, dropout(self_attention(blk, blk.ln1(h), mask, b.cfg.n_heads), opt, b.cfg.dropout));
    h = add(h, dropout(blk.ff2(gelu(blk.ff1(blk.ln2(h)))), opt, b.cfg.dropout));
    if (i + 1 < b.adapters.size()) h = b.adapters[i + 1](h);
  }
  h = b.final_ln(h);
  return {h, latent.lengths};
}

Encoded forward(const Backbone& b, const Tensor& x, const std::vector<std::size_t>& lengths, InputKind kind,
                const ForwardOptions& opt) {
  return encode_context(b, encode_frontend(b, x, lengths, kind, opt), opt);
}

Tensor generator_forward(const Backbone& b, std::size_t i, const Tensor& hidden) {
  if (i >= b.generators.size()) throw std::out_of_range("generator index out of range");
  return b.generators[i](hidden);
}

void insert_adapters(Backbone& b, std::size_t d_ada, std::uint64_t seed) {
  if (b.has_adapters()) throw std::logic_error("adapters already present");
  if (d_ada == 0) throw std::invalid_argument("d_ada must be positive");
  std::mt19937_64 rng(seed);
  b.cfg.d_ada = d_ada;
  add_adapters(b, d_ada, rng);
  b.bind();
}

void reinit_adapters(Backbone& b, std::uint64_t seed) {
  if (!b.has_adapters()) throw std::logic_error("no adapters to re-initialize");
  Backbone fresh;
  fresh.cfg = b.cfg;
  std::mt19937_64 rng(seed);
  add_adapters(fresh, b.cfg.d_ada, rng);
  for (const auto& p : fresh.registry) {
    Tensor t = b.param(p.name);
    t.set_data(p.value.data());
  }
}

void replace_generators(Backbone& b, std::size_t count, std::size_t out_dim, std::uint64_t seed) {
  if (count == 0 || out_dim == 0) throw std::invalid_argument("generator count and width must be positive");
  b.remove_if_prefix("gen");
  std::mt19937_64 rng(seed);
  add_generators(b, count, out_dim, rng);
  b.cfg.gen_count = count;
  b.cfg.gen_dim = out_dim;
  b.bind();
}

void set_trainable(Backbone& b, const std::set<ParamGroup>& groups) {
  std::size_t n = 0;
  for (auto& p : b.registry) {
    const bool on = groups.count(p.group) > 0;
    p.value.set_requires_grad(on);
    if (!on) p.value.zero_grad();
    n += on;
  }
  if (n == 0) throw std::invalid_argument("no trainable parameters");
}

bool shared_under(SharingScheme scheme, const NamedParam& p) {
  switch (scheme) {
    case SharingScheme::none: return false;
    case SharingScheme::share_generator: return p.group == ParamGroup::generator;
    case SharingScheme::share_gen_encoder:
      return p.group == ParamGroup::generator || p.name.rfind("block", 0) == 0 || p.name.rfind("final_ln", 0) == 0;
    case SharingScheme::share_all: return true;
  }
  return false;
}

BiApcPair build_biapc_pair(const ModelConfig& cfg, SharingScheme scheme, std::uint64_t seed) {
  BiApcPair pair{build_backbone(cfg, seed), build_backbone(cfg, seed + 1), scheme};
  for (auto& p : pair.rev.registry)
    if (shared_under(scheme, p)) p.value = pair.fwd.param(p.name);
  pair.rev.bind();
  return pair;
}

Backbone average_directions(const Backbone& a, const Backbone& b) {
  if (a.registry.size() != b.registry.size()) throw std::invalid_argument("average_directions: structural mismatch");
  Backbone out;
  out.cfg = a.cfg;
  for (std::size_t i = 0; i < a.registry.size(); ++i) {
    const auto& pa = a.registry[i];
    const auto& pb = b.registry[i];
    if (pa.name != pb.name || pa.value.shape() != pb.value.shape())
      throw std::invalid_argument("average_directions: structural mismatch at " + pa.name);
    Tensor v = pa.value.clone();
    if (!pa.value.same_object(pb.value)) {
      std::vector<double> m(v.numel());
      for (std::size_t j = 0; j < m.size(); ++j) m[j] = (pa.value[j] + pb.value[j]) / 2.0;
      v.set_data(m);
    }
    out.registry.push_back({pa.name, pa.group, v});
  }
  out.bind();
  return out;
}

Backbone average_directions(const BiApcPair& pair) { return average_directions(pair.fwd, pair.rev); }

Tensor reverse_within_lengths(const Tensor& x, const std::vector<std::size_t>& lengths) {
  check_lengths(x, lengths);
  const std::size_t B = x.dim(0), T = x.dim(1), D = x.dim(2);
  std::vector<std::size_t> idx(B * T);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t) idx[b * T + t] = b * T + (t < lengths[b] ? lengths[b] - 1 - t : t);
  return reshape(gather_rows(reshape(x, {B * T, D}), idx), {B, T, D});
}

std::uint64_t checksum(const Backbone& b, ParamGroup g) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto& p : b.registry) {
    if (p.group != g) continue;
    for (char c : p.name) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
    for (double v : p.value.data()) {
      unsigned char bytes[sizeof(double)];
      std::memcpy(bytes, &v, sizeof(double));
      for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ull;
    }
  }
  return h;
}

}  // namespace draft
