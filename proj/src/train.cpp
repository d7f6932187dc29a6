#include "draft/train.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "draft/ctc.hpp"
#include "draft/optim.hpp"
#include "json.hpp"

namespace draft {

using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint payloads assume a little-endian host");

double noam_lr(const NoamSchedule& s, std::size_t step) {
  if (step == 0) throw std::invalid_argument("noam_lr: step must be >= 1");
  if (s.warmup == 0 || s.d_model == 0) throw std::invalid_argument("noam_lr: warmup and d_model must be positive");
  const double st = static_cast<double>(step), w = static_cast<double>(s.warmup);
  return s.factor / std::sqrt(static_cast<double>(s.d_model)) * std::min(1.0 / std::sqrt(st), st * std::pow(w, -1.5));
}

double noam_peak(const NoamSchedule& s) { return noam_lr(s, s.warmup); }

double tri_stage_lr(const TriStageSchedule& s, std::size_t step, std::size_t total) {
  if (s.ramp + s.hold > total) throw std::invalid_argument("tri_stage_lr: ramp + hold exceeds total steps");
  if (!(s.final_ratio > 0.0)) throw std::invalid_argument("tri_stage_lr: final ratio must be positive");
  step = std::min(step, total);
  if (step == 0) return 0.0;
  if (step <= s.ramp) return s.peak * static_cast<double>(step) / static_cast<double>(s.ramp);
  if (step <= s.ramp + s.hold) return s.peak;
  const double frac = static_cast<double>(step - s.ramp - s.hold) / static_cast<double>(total - s.ramp - s.hold);
  return s.peak * std::pow(s.final_ratio, frac);
}

double ScheduleConfig::lr(std::size_t step, std::size_t total) const {
  if (kind == ScheduleKind::noam) return scale * noam_lr(noam, step);
  TriStageSchedule t = tri;
  if (ramp_frac >= 0.0 && hold_frac >= 0.0) {
    if (ramp_frac + hold_frac > 1.0) throw std::invalid_argument("ramp and hold fractions exceed 1");
    t.ramp = static_cast<std::size_t>(std::floor(ramp_frac * static_cast<double>(total)));
    t.hold = static_cast<std::size_t>(std::floor(hold_frac * static_cast<double>(total)));
  }
  return scale * tri_stage_lr(t, step, total);
}

namespace {

template <typename E, std::size_t N>
const char* enum_name(E v, const std::array<std::pair<E, const char*>, N>& table) {
  for (const auto& [e, n] : table)
    if (e == v) return n;
  throw std::logic_error("unnamed enum value");
}

template <typename E, std::size_t N>
E enum_parse(const std::string& s, const std::array<std::pair<E, const char*>, N>& table, const char* what) {
  for (const auto& [e, n] : table)
    if (s == n) return e;
  throw std::invalid_argument(std::string("unknown ") + what + ": " + s);
}

constexpr std::array<std::pair<Stage, const char*>, 4> kStages{
    {{Stage::pretrain, "pretrain"}, {Stage::saft, "saft"}, {Stage::draft_adapt, "draft_adapt"}, {Stage::finetune, "finetune"}}};
constexpr std::array<std::pair<Objective, const char*>, 5> kObjectives{{{Objective::apc, "apc"},
                                                                       {Objective::eapc, "eapc"},
                                                                       {Objective::ebiapc, "ebiapc"},
                                                                       {Objective::contrastive, "contrastive"},
                                                                       {Objective::hubert, "hubert"}}};
constexpr std::array<std::pair<FinetuneMode, const char*>, 5> kModes{{{FinetuneMode::full, "full"},
                                                                     {FinetuneMode::adapters_frozen, "adapters_frozen"},
                                                                     {FinetuneMode::adapters_only, "adapters_only"},
                                                                     {FinetuneMode::random_adapters, "random_adapters"},
                                                                     {FinetuneMode::plus_ra, "plus_ra"}}};

}  // namespace

const char* stage_name(Stage s) { return enum_name(s, kStages); }
Stage parse_stage(const std::string& s) { return enum_parse(s, kStages, "stage"); }
const char* objective_name(Objective o) { return enum_name(o, kObjectives); }
Objective parse_objective(const std::string& s) { return enum_parse(s, kObjectives, "objective"); }
const char* finetune_mode_name(FinetuneMode m) { return enum_name(m, kModes); }
FinetuneMode parse_finetune_mode(const std::string& s) { return enum_parse(s, kModes, "finetune mode"); }

// ---------------------------------------------------------------------------
// Provenance

namespace {

constexpr const char* kGroupOrder[] = {"f", "ada", "g", "g'"};

std::string superscript(std::size_t n) {
  static const char* digits[] = {"⁰", "¹", "²", "³", "⁴", "⁵", "⁶", "⁷", "⁸", "⁹"};
  const std::string s = std::to_string(n);
  std::string out;
  for (char c : s) out += digits[c - '0'];
  return out;
}

}  // namespace

std::string Provenance::render() const {
  std::string out = "{";
  bool first = true;
  for (const char* g : kGroupOrder) {
    const auto it = versions.find(g);
    if (it == versions.end()) continue;
    const std::string sym = std::string(g) == "g'" ? "θ_g′" : std::string("θ_") + g;
    out += (first ? "" : ", ") + sym + superscript(it->second);
    first = false;
  }
  return out + "}";
}

bool Provenance::precedes(const Provenance& later) const {
  if (later.stages.size() < stages.size()) return false;
  for (const auto& [g, v] : versions) {
    const auto it = later.versions.find(g);
    // The SSL generator is dropped when the CTC head replaces it.
    if (it == later.versions.end()) {
      if (g == "g" && later.versions.count("g'")) continue;
      return false;
    }
    if (it->second < v) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

const char kMagic[8] = {'S', 'S', 'L', 'C', 'K', 'P', 'T', '1'};
constexpr int kVersion = 1;

json model_config_json(const ModelConfig& c) {
  return json{{"frontend", frontend_name(c.frontend)},
              {"feature_dim", c.feature_dim},
              {"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"n_blocks", c.n_blocks},
              {"ffn_dim", c.ffn_dim},
              {"subsample_factor", c.subsample_factor},
              {"mask_mode", mask_mode_name(c.mask_mode)},
              {"d_ada", c.d_ada},
              {"dropout", c.dropout},
              {"dtype", dtype_name(c.dtype)},
              {"gen_count", c.gen_count},
              {"gen_dim", c.gen_dim},
              {"quant_codes", c.quant_codes},
              {"code_dim", c.code_dim},
              {"mask_embedding", c.mask_embedding}};
}

ModelConfig model_config_from(const json& j) {
  ModelConfig c;
  c.frontend = parse_frontend(j.at("frontend").get<std::string>());
  c.feature_dim = j.at("feature_dim").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_blocks = j.at("n_blocks").get<std::size_t>();
  c.ffn_dim = j.at("ffn_dim").get<std::size_t>();
  c.subsample_factor = j.at("subsample_factor").get<std::size_t>();
  c.mask_mode = parse_mask_mode(j.at("mask_mode").get<std::string>());
  c.d_ada = j.at("d_ada").get<std::size_t>();
  c.dropout = j.at("dropout").get<double>();
  c.dtype = parse_dtype(j.at("dtype").get<std::string>());
  c.gen_count = j.at("gen_count").get<std::size_t>();
  c.gen_dim = j.at("gen_dim").get<std::size_t>();
  c.quant_codes = j.at("quant_codes").get<std::size_t>();
  c.code_dim = j.at("code_dim").get<std::size_t>();
  c.mask_embedding = j.at("mask_embedding").get<bool>();
  return c;
}

const char* input_name(InputKind k) { return k == InputKind::features ? "features" : "waveform"; }

InputKind parse_input(const std::string& s) {
  if (s == "features") return InputKind::features;
  if (s == "waveform") return InputKind::waveform;
  throw std::invalid_argument("unknown input kind: " + s);
}

void append_payload(std::string& out, const Tensor& t) {
  const auto d = t.data();
  if (t.dtype() == DType::f64) {
    out.append(reinterpret_cast<const char*>(d.data()), d.size() * sizeof(double));
  } else {
    std::vector<float> f(d.begin(), d.end());
    out.append(reinterpret_cast<const char*>(f.data()), f.size() * sizeof(float));
  }
}

std::size_t byte_size(DType d, std::size_t n) { return n * (d == DType::f64 ? sizeof(double) : sizeof(float)); }

std::vector<double> read_payload(const std::string& buf, std::size_t offset, DType d, std::size_t n) {
  std::vector<double> out(n);
  if (d == DType::f64) {
    std::memcpy(out.data(), buf.data() + offset, n * sizeof(double));
  } else {
    std::vector<float> f(n);
    std::memcpy(f.data(), buf.data() + offset, n * sizeof(float));
    std::copy(f.begin(), f.end(), out.begin());
  }
  return out;
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  json header;
  header["version"] = kVersion;
  header["provenance"] = {{"stages", c.provenance.stages},
                          {"versions", c.provenance.versions},
                          {"tag", c.provenance.render()}};
  header["config"] = {{"model", model_config_json(c.model.cfg)},
                      {"objective", objective_name(c.objective)},
                      {"input", input_name(c.input)},
                      {"shift", {{"s", c.shift.s}, {"k", c.shift.k}, {"p", c.shift.p}}},
                      {"sharing", scheme_name(c.sharing)},
                      {"vocab_size", c.vocab_size}};
  header["rng_state"] = c.rng_state;
  std::string payload;
  json table = json::array();
  for (const auto& p : c.model.registry) {
    table.push_back({{"name", p.name},
                     {"group", group_name(p.group)},
                     {"dtype", dtype_name(p.value.dtype())},
                     {"shape", p.value.shape()},
                     {"offset", payload.size()}});
    append_payload(payload, p.value);
  }
  if (c.kmeans) {
    const Tensor cent = Tensor::from({c.kmeans->k, c.kmeans->dim}, c.kmeans->centroids, DType::f64);
    table.push_back({{"name", "kmeans.centroids"},
                     {"group", "kmeans"},
                     {"dtype", "float64"},
                     {"shape", cent.shape()},
                     {"offset", payload.size()}});
    append_payload(payload, cent);
  }
  header["tensors"] = table;
  const std::string h = header.dump();
  const auto hl = static_cast<std::uint32_t>(h.size());

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path);
  out.write(kMagic, 8);
  out.write(reinterpret_cast<const char*>(&hl), sizeof hl);
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw std::runtime_error("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string buf = ss.str();
  if (buf.size() < 8) throw std::runtime_error("truncated checkpoint");
  if (std::memcmp(buf.data(), kMagic, 8) != 0) throw std::runtime_error("bad checkpoint magic");
  if (buf.size() < 12) throw std::runtime_error("truncated checkpoint");
  std::uint32_t hl = 0;
  std::memcpy(&hl, buf.data() + 8, sizeof hl);
  if (buf.size() < 12 + static_cast<std::size_t>(hl)) throw std::runtime_error("truncated checkpoint");
  json header;
  try {
    header = json::parse(buf.substr(12, hl));
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("corrupt checkpoint header: ") + e.what());
  }
  if (header.value("version", -1) != kVersion)
    throw std::runtime_error("unsupported checkpoint version " + header.value("version", json(-1)).dump());
  const std::size_t base = 12 + hl;

  Checkpoint c;
  const json& cfg = header.at("config");
  const ModelConfig mc = model_config_from(cfg.at("model"));
  c.objective = parse_objective(cfg.at("objective").get<std::string>());
  c.input = parse_input(cfg.at("input").get<std::string>());
  c.shift = {cfg.at("shift").at("s").get<std::size_t>(), cfg.at("shift").at("k").get<std::size_t>(),
             cfg.at("shift").at("p").get<int>()};
  c.sharing = parse_scheme(cfg.at("sharing").get<std::string>());
  c.vocab_size = cfg.at("vocab_size").get<std::size_t>();
  c.rng_state = header.at("rng_state").get<std::string>();
  c.provenance.stages = header.at("provenance").at("stages").get<std::vector<std::string>>();
  c.provenance.versions = header.at("provenance").at("versions").get<std::map<std::string, std::size_t>>();

  // The config snapshot defines which tensors must exist and their shapes.
  const Backbone skeleton = build_backbone(mc, 0);
  std::set<std::string> seen;
  c.model.cfg = mc;
  std::size_t expected_end = base;
  for (const auto& e : header.at("tensors")) {
    const std::string name = e.at("name").get<std::string>();
    const DType dt = parse_dtype(e.at("dtype").get<std::string>());
    const Shape shape = e.at("shape").get<Shape>();
    const std::size_t off = base + e.at("offset").get<std::size_t>();
    const std::size_t n = numel(shape);
    if (off + byte_size(dt, n) > buf.size()) throw std::runtime_error("truncated checkpoint");
    expected_end = std::max(expected_end, off + byte_size(dt, n));
    Tensor t = Tensor::from(shape, read_payload(buf, off, dt, n), dt);
    if (name == "kmeans.centroids") {
      if (shape.size() != 2) throw std::runtime_error("tensor shape mismatch: " + name);
      c.kmeans = KMeansModel{shape[0], shape[1], {t.data().begin(), t.data().end()}, {}};
      continue;
    }
    if (!skeleton.has(name)) throw std::runtime_error("checkpoint tensor not in config: " + name);
    if (skeleton.param(name).shape() != shape)
      throw std::runtime_error("tensor shape mismatch: " + name + " is " + shape_str(shape) + ", config expects " +
                               shape_str(skeleton.param(name).shape()));
    if (!seen.insert(name).second) throw std::runtime_error("duplicate checkpoint tensor: " + name);
    c.model.registry.push_back({name, parse_group(e.at("group").get<std::string>()), t});
  }
  if (expected_end != buf.size()) throw std::runtime_error("trailing bytes after checkpoint payload");
  for (const auto& p : skeleton.registry)
    if (!seen.count(p.name)) throw std::runtime_error("checkpoint is missing tensor " + p.name);
  c.model.bind();
  return c;
}

// ---------------------------------------------------------------------------
// Metrics

void MetricsLog::log(std::size_t step, Stage stage, double loss, double lr, std::uint64_t seed) {
  losses_.push_back(loss);
  if (!out_) return;
  nlohmann::ordered_json j{{"step", step}, {"stage", stage_name(stage)}, {"loss", loss}, {"lr", lr}, {"seed", seed}};
  *out_ << j.dump() << '\n';
}

// ---------------------------------------------------------------------------
// Training

std::size_t ssl_generator_dim(const StageConfig& cfg) {
  switch (cfg.objective) {
    case Objective::contrastive: return cfg.model.code_dim;
    case Objective::hubert: return cfg.kmeans_k;
    default: return cfg.model.subsample_factor * cfg.model.feature_dim;
  }
}

namespace {

std::string group_key(ParamGroup g, bool ctc_head) {
  switch (g) {
    case ParamGroup::backbone: return "f";
    case ParamGroup::adapter: return "ada";
    case ParamGroup::generator: return ctc_head ? "g'" : "g";
  }
  return "";
}

std::set<ParamGroup> present_groups(const Backbone& b) {
  std::set<ParamGroup> g;
  for (const auto& p : b.registry) g.insert(p.group);
  return g;
}

// Reverse-direction twin of a trained model, sharing modules per the scheme.
Backbone reverse_twin(const Backbone& fwd, SharingScheme scheme) {
  Backbone rev = clone_backbone(fwd);
  for (auto& p : rev.registry)
    if (shared_under(scheme, p)) p.value = fwd.param(p.name);
  rev.bind();
  return rev;
}

// Stacked groups of `factor` frames, the last one zero-filled, per utterance.
std::vector<double> stacked_points(const std::vector<Utterance>& data, std::size_t factor, std::size_t max_points,
                                   std::uint64_t seed) {
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<double> pts;
  const std::size_t D = data.front().features.dim;
  std::size_t count = 0;
  for (auto i : order) {
    const auto& f = data[i].features;
    for (std::size_t g = 0; g * factor < f.frames && count < max_points; ++g, ++count)
      for (std::size_t j = 0; j < factor * D; ++j) {
        const std::size_t t = g * factor + j / D;
        pts.push_back(t < f.frames ? f.values[t * D + j % D] : 0.0);
      }
    if (count >= max_points) break;
  }
  return pts;
}

std::vector<std::vector<std::size_t>> all_hubert_labels(const KMeansModel& km, const std::vector<Utterance>& data,
                                                        std::size_t factor) {
  std::vector<std::vector<std::size_t>> out;
  for (const auto& u : data) {
    const Tensor f = Tensor::from({u.features.frames, u.features.dim}, {u.features.values.begin(), u.features.values.end()},
                                  DType::f64);
    out.push_back(hubert_labels(km, f, u.features.frames, factor));
  }
  return out;
}

struct Trainee {
  Checkpoint ck;
  std::optional<BiApcPair> pair;
  bool ctc = false;
  std::set<ParamGroup> groups;
  std::vector<std::vector<std::size_t>> labels;  // HuBERT targets per utterance
};

ModelConfig fresh_model_config(const StageConfig& cfg, const std::vector<Utterance>& data) {
  ModelConfig m = cfg.model;
  m.feature_dim = data.front().features.dim;
  if (cfg.input == InputKind::waveform) {
    if (m.feature_dim != 1) throw std::invalid_argument("waveform input needs dim-1 feature files");
    m.frontend = Frontend::learned_conv;
  }
  m.d_ada = 0;
  return m;
}

void require_feature_targets(const StageConfig& cfg) {
  if (cfg.input == InputKind::waveform &&
      (cfg.objective == Objective::apc || cfg.objective == Objective::eapc || cfg.objective == Objective::ebiapc ||
       cfg.objective == Objective::hubert))
    throw std::invalid_argument(std::string(objective_name(cfg.objective)) + " targets need feature input");
}

Trainee prepare(const StageConfig& cfg, const std::optional<Checkpoint>& init, const std::vector<Utterance>& data) {
  Trainee tr;
  Checkpoint& ck = tr.ck;
  if (cfg.stage != Stage::pretrain && cfg.stage != Stage::finetune && !init)
    throw std::invalid_argument(std::string(stage_name(cfg.stage)) + " requires an initial checkpoint");

  if (init) {
    ck = *init;
    ck.model = clone_backbone(init->model);
  } else {
    ck.input = cfg.input;
    ck.objective = cfg.objective;
    ck.shift = cfg.shift;
    ck.sharing = cfg.sharing;
  }
  if (init && !data.empty() && init->model.cfg.feature_dim != data.front().features.dim)
    throw std::invalid_argument("data feature dim does not match the checkpoint");

  switch (cfg.stage) {
    case Stage::pretrain: {
      if (!init) {
        require_feature_targets(cfg);
        ModelConfig m = fresh_model_config(cfg, data);
        StageConfig sized = cfg;
        sized.model = m;
        m.gen_dim = ssl_generator_dim(sized);
        m.gen_count = 1;
        if (cfg.objective == Objective::apc && cfg.shift.k != 1) throw std::invalid_argument("apc uses a single lag (k = 1)");
        if (cfg.objective == Objective::eapc || cfg.objective == Objective::ebiapc) m.gen_count = cfg.shift.k;
        if (cfg.objective == Objective::contrastive) {
          if (m.quant_codes == 0 || m.code_dim == 0) throw std::invalid_argument("contrastive needs quant_codes and code_dim");
          m.mask_embedding = true;
        } else {
          m.quant_codes = m.code_dim = 0;
          m.mask_embedding = cfg.objective == Objective::hubert;
        }
        if (cfg.objective == Objective::ebiapc)
          tr.pair = build_biapc_pair(m, cfg.sharing, cfg.seed);
        else
          ck.model = build_backbone(m, cfg.seed);
        if (tr.pair) ck.model = tr.pair->fwd;
      }
      tr.groups = present_groups(ck.model);
      break;
    }
    case Stage::saft:
      tr.groups = present_groups(ck.model);
      break;
    case Stage::draft_adapt:
      if (ck.model.has_adapters()) {
        if (ck.model.cfg.d_ada != cfg.d_ada)
          throw std::invalid_argument("model already has adapters with d_ada " + std::to_string(ck.model.cfg.d_ada) +
                                      ", requested " + std::to_string(cfg.d_ada));
      } else {
        insert_adapters(ck.model, cfg.d_ada, cfg.seed ^ 0xada);
      }
      tr.groups = {ParamGroup::adapter};
      break;
    case Stage::finetune: {
      if (cfg.vocab_size < 2) throw std::invalid_argument("finetune requires a vocabulary");
      if (!init) {
        ModelConfig m = fresh_model_config(cfg, data);
        m.quant_codes = m.code_dim = 0;
        m.mask_embedding = false;
        ck.model = build_backbone(m, cfg.seed);
        ck.input = cfg.input;
      }
      if (ck.model.has("quant.codebook")) {
        ck.model.remove_if_prefix("quant.");
        ck.model.cfg.quant_codes = ck.model.cfg.code_dim = 0;
        ck.model.bind();
      }
      replace_generators(ck.model, 1, cfg.vocab_size, cfg.seed ^ 0xc7c);
      ck.provenance.versions.erase("g");
      ck.vocab_size = cfg.vocab_size;
      ck.kmeans.reset();
      tr.ctc = true;
      const bool ada = ck.model.has_adapters();
      switch (cfg.finetune_mode) {
        case FinetuneMode::full:
          tr.groups = present_groups(ck.model);
          break;
        case FinetuneMode::adapters_frozen:
          if (!ada) throw std::invalid_argument("adapters_frozen needs a model with adapters");
          tr.groups = {ParamGroup::backbone, ParamGroup::generator};
          break;
        case FinetuneMode::adapters_only:
          if (!ada) throw std::invalid_argument("adapters_only needs a model with adapters");
          tr.groups = {ParamGroup::adapter, ParamGroup::generator};
          break;
        case FinetuneMode::random_adapters:
          if (!ada) throw std::invalid_argument("random_adapters needs a model with adapters");
          reinit_adapters(ck.model, cfg.seed ^ 0xada);
          tr.groups = present_groups(ck.model);
          break;
        case FinetuneMode::plus_ra:
          if (ada) throw std::invalid_argument("plus_ra expects a model without adapters");
          insert_adapters(ck.model, cfg.d_ada, cfg.seed ^ 0xada);
          tr.groups = present_groups(ck.model);
          break;
      }
      break;
    }
  }

  if (!tr.ctc) {
    StageConfig eff = cfg;
    eff.objective = ck.objective;
    eff.input = ck.input;
    require_feature_targets(eff);
    if (ck.objective == Objective::ebiapc && !tr.pair) {
      tr.pair = BiApcPair{ck.model, reverse_twin(ck.model, ck.sharing), ck.sharing};
    }
    if (ck.objective == Objective::hubert) {
      // Units are (re)discovered on the stage's own data.
      const std::size_t f = ck.model.cfg.subsample_factor;
      const auto pts = stacked_points(data, f, cfg.kmeans_max_points, cfg.seed);
      const std::size_t dim = f * data.front().features.dim;
      ck.kmeans = kmeans_fit(pts, dim, ck.model.cfg.generator_dim(), cfg.kmeans_iters, cfg.seed);
      tr.labels = all_hubert_labels(*ck.kmeans, data, f);
    }
  }
  set_trainable(ck.model, tr.groups);
  if (tr.pair) {
    tr.pair->fwd = ck.model;
    set_trainable(tr.pair->rev, tr.groups);
  }
  return tr;
}

std::vector<Tensor> trainable(const Trainee& tr) {
  std::vector<Tensor> out;
  auto take = [&](const Backbone& b) {
    for (const auto& p : b.registry) {
      if (!p.value.requires_grad()) continue;
      const bool dup = std::any_of(out.begin(), out.end(), [&](const Tensor& t) { return t.same_object(p.value); });
      if (!dup) out.push_back(p.value);
    }
  };
  take(tr.ck.model);
  if (tr.pair) take(tr.pair->rev);
  return out;
}

Tensor stage_loss(Trainee& tr, const StageConfig& cfg, const Batch& batch, std::mt19937_64& rng, std::size_t step,
                  std::size_t total) {
  const ForwardOptions opt{true, &rng};
  const Checkpoint& ck = tr.ck;
  if (tr.ctc) {
    const Encoded h = forward(ck.model, batch.features, batch.lengths, ck.input, opt);
    const Tensor lp = log_softmax(generator_forward(ck.model, 0, h.hidden), 2);
    return ctc_batch_loss(lp, batch.targets, h.lengths).normalized;
  }
  switch (ck.objective) {
    case Objective::apc:
    case Objective::eapc:
      return eapc_loss(ck.model, batch.features, batch.lengths, ck.shift, Reduction::mean, opt);
    case Objective::ebiapc:
      return ebiapc_loss(*tr.pair, batch.features, batch.lengths, ck.shift, Reduction::mean, opt);
    case Objective::contrastive: {
      ContrastiveConfig cc = cfg.contrastive;
      cc.gumbel_tau = anneal(cfg.contrastive.gumbel_tau, cfg.contrastive.gumbel_tau_min, step - 1, total);
      return contrastive_objective(ck.model, batch.features, batch.lengths, ck.input, cc, rng, opt).total;
    }
    case Objective::hubert: {
      const std::size_t T = batch.features.dim(1);
      const std::size_t Tp = output_lengths(ck.model.cfg, {T})[0];
      std::vector<std::size_t> labels(batch.indices.size() * Tp, 0);
      for (std::size_t b = 0; b < batch.indices.size(); ++b) {
        const auto& l = tr.labels[batch.indices[b]];
        std::copy(l.begin(), l.begin() + static_cast<long>(std::min(l.size(), Tp)), labels.begin() + static_cast<long>(b * Tp));
      }
      return hubert_objective(ck.model, batch.features, batch.lengths, labels, ck.input, cfg.hubert, rng, opt);
    }
  }
  throw std::logic_error("unhandled objective");
}

bool augmenting(const SpecAugConfig& s) { return s.num_time_masks > 0 || s.num_freq_masks > 0; }

}  // namespace

StageResult run_stage(const StageConfig& cfg, const std::optional<Checkpoint>& init, const std::vector<Utterance>& data,
                      MetricsLog* log) {
  if (data.empty()) throw std::runtime_error("no utterances");
  if (cfg.batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  if (cfg.epochs == 0 && cfg.max_steps == 0) throw std::invalid_argument("need epochs or max_steps");
  Trainee tr = prepare(cfg, init, data);
  std::vector<Tensor> params = trainable(tr);
  AdamState adam(cfg.adam, params);
  std::mt19937_64 rng(cfg.seed);

  const std::size_t per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::size_t total = cfg.epochs * per_epoch;
  if (cfg.max_steps > 0) total = cfg.epochs > 0 ? std::min(total, cfg.max_steps) : cfg.max_steps;
  const std::size_t epochs = (total + per_epoch - 1) / per_epoch;
  const DType dtype = tr.ck.model.cfg.dtype;

  StageResult res;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < epochs && step < total; ++epoch) {
    double epoch_sum = 0.0;
    std::size_t epoch_n = 0;
    for (const auto& idx : batch_indices(data, cfg.batch_size, cfg.seed * 1000003ULL + epoch)) {
      if (step == total) break;
      ++step;
      Batch batch;
      if (tr.ctc && augmenting(cfg.spec_augment)) {
        std::vector<Utterance> aug;
        for (std::size_t k = 0; k < idx.size(); ++k) {
          aug.push_back(data[idx[k]]);
          aug.back().features = spec_augment(aug.back().features, cfg.spec_augment, rng());
        }
        std::vector<std::size_t> local(idx.size());
        for (std::size_t k = 0; k < idx.size(); ++k) local[k] = k;
        batch = make_batch(aug, local, dtype);
        batch.indices = idx;
      } else {
        batch = make_batch(data, idx, dtype);
      }
      const double lr = cfg.schedule.lr(step, total);
      for (auto& p : params) p.zero_grad();
      Tape tape;
      double loss_value = 0.0;
      {
        Tape::Scope scope(tape);
        const Tensor loss = stage_loss(tr, cfg, batch, rng, step, total);
        loss_value = loss.item();
        if (loss.requires_grad()) backward(loss, tape);
      }
      clip_grad_norm(params, cfg.clip_norm);
      adam_step(params, adam, lr);
      if (log) log->log(step, cfg.stage, loss_value, lr, cfg.seed);
      epoch_sum += loss_value;
      ++epoch_n;
    }
    res.epoch_loss.push_back(epoch_n ? epoch_sum / static_cast<double>(epoch_n) : 0.0);
  }
  res.steps = step;

  Checkpoint& ck = tr.ck;
  if (tr.pair) ck.model = average_directions(*tr.pair);
  for (auto& p : ck.model.registry) {
    p.value.set_requires_grad(false);
    p.value.zero_grad();
  }
  ck.provenance.stages.push_back(stage_name(cfg.stage));
  for (const auto& p : ck.model.registry) ck.provenance.versions.try_emplace(group_key(p.group, tr.ctc), 0);
  for (ParamGroup g : tr.groups) ++ck.provenance.versions[group_key(g, tr.ctc)];
  std::ostringstream rs;
  rs << rng;
  ck.rng_state = rs.str();
  res.checkpoint = std::move(ck);
  return res;
}

// ---------------------------------------------------------------------------
// Evaluation

EvalReport evaluate(const Checkpoint& ckpt, const std::vector<Utterance>& data, std::size_t vocab_size,
                    std::size_t batch_size) {
  if (data.empty()) throw std::runtime_error("no utterances");
  if (ckpt.vocab_size == 0) throw std::invalid_argument("checkpoint has no CTC head; finetune it first");
  if (ckpt.vocab_size != vocab_size || ckpt.model.cfg.generator_dim() != vocab_size)
    throw std::invalid_argument("vocab mismatch: checkpoint has " + std::to_string(ckpt.vocab_size) + " symbols, expected " +
                                std::to_string(vocab_size));
  EvalReport rep;
  rep.provenance = ckpt.provenance.render();
  std::vector<std::vector<std::size_t>> refs, hyps;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(data.size(), start + batch_size); ++i) idx.push_back(i);
    const Batch b = make_batch(data, idx, ckpt.model.cfg.dtype);
    const Encoded h = forward(ckpt.model, b.features, b.lengths, ckpt.input);
    const Tensor lp = log_softmax(generator_forward(ckpt.model, 0, h.hidden), 2);
    const auto decoded = ctc_greedy_decode_batch(lp, h.lengths);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& ref = data[idx[k]].transcript;
      rep.utterances.push_back({data[idx[k]].id, ref, decoded[k].tokens, edit_distance(ref, decoded[k].tokens)});
      refs.push_back(ref);
      hyps.push_back(decoded[k].tokens);
    }
  }
  rep.ter = error_rate(refs, hyps);
  return rep;
}

std::string report_json(const EvalReport& r) {
  nlohmann::ordered_json utts = nlohmann::ordered_json::array();
  for (const auto& u : r.utterances) utts.push_back(nlohmann::ordered_json{{"id", u.id}, {"ref", u.ref}, {"hyp", u.hyp}, {"edits", u.edits}});
  return nlohmann::ordered_json{{"ter", r.ter}, {"provenance", r.provenance}, {"utterances", utts}}.dump(2);
}

}  // namespace draft
