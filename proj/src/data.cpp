#include "draft/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

namespace draft {

namespace fs = std::filesystem;

const char* domain_name(Domain d) { return d == Domain::source ? "source" : "target"; }

Domain parse_domain(const std::string& s) {
  if (s == "source") return Domain::source;
  if (s == "target") return Domain::target;
  throw std::invalid_argument("unknown domain: " + s);
}

const char* emit_mode_name(EmitMode m) { return m == EmitMode::features ? "features" : "waveform"; }

EmitMode parse_emit_mode(const std::string& s) {
  if (s == "features") return EmitMode::features;
  if (s == "waveform") return EmitMode::waveform;
  throw std::invalid_argument("unknown emit mode: " + s);
}

namespace {

// Independent streams for the prototypes, the transform and each split.
std::mt19937_64 stream(std::uint64_t seed, std::uint64_t which) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(which)};
  return std::mt19937_64(seq);
}

// Gram-Schmidt on a Gaussian matrix; rows are orthonormal.
std::vector<double> random_orthogonal(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> g;
  std::vector<double> q(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    double norm = 0.0;
    do {
      for (std::size_t j = 0; j < n; ++j) q[i * n + j] = g(rng);
      for (std::size_t k = 0; k < i; ++k) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += q[i * n + j] * q[k * n + j];
        for (std::size_t j = 0; j < n; ++j) q[i * n + j] -= dot * q[k * n + j];
      }
      norm = 0.0;
      for (std::size_t j = 0; j < n; ++j) norm += q[i * n + j] * q[i * n + j];
      norm = std::sqrt(norm);
    } while (norm < 1e-8);
    for (std::size_t j = 0; j < n; ++j) q[i * n + j] /= norm;
  }
  return q;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string transcript_str(const std::vector<std::size_t>& t) {
  std::string s;
  for (std::size_t i = 0; i < t.size(); ++i) s += (i ? " " : "") + std::to_string(t[i]);
  return s;
}

// Rows of the token prototype stretched to `frames` by linear interpolation.
std::vector<double> stretch(const std::vector<double>& proto, std::size_t len, std::size_t dim, std::size_t frames) {
  std::vector<double> out(frames * dim);
  for (std::size_t i = 0; i < frames; ++i) {
    const double pos = frames > 1 ? static_cast<double>(i) * static_cast<double>(len - 1) / static_cast<double>(frames - 1) : 0.0;
    const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, len - 1);
    const double w = pos - static_cast<double>(lo);
    for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] = (1.0 - w) * proto[lo * dim + j] + w * proto[hi * dim + j];
  }
  return out;
}

void check_synth(const SynthConfig& c) {
  if (c.v_tok == 0 || c.dim == 0 || c.proto_len == 0) throw std::invalid_argument("v_tok, dim and proto_len must be positive");
  if (c.duration_jitter >= c.proto_len) throw std::invalid_argument("duration_jitter must be below proto_len");
  if (c.min_tokens == 0 || c.min_tokens > c.max_tokens) throw std::invalid_argument("need 1 <= min_tokens <= max_tokens");
  if (c.noise < 0.0) throw std::invalid_argument("noise must be non-negative");
  if (c.max_condition < 1.0) throw std::invalid_argument("max_condition must be at least 1");
  if (c.emit == EmitMode::waveform && c.sample_rate < 8000) throw std::invalid_argument("sample_rate too low");
}

}  // namespace

std::vector<double> DomainTransform::apply(const std::vector<double>& x) const {
  std::vector<double> y(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    double s = b[i];
    for (std::size_t j = 0; j < dim; ++j) s += A[i * dim + j] * x[j];
    y[i] = s;
  }
  return y;
}

DomainTransform make_domain_transform(const SynthConfig& cfg) {
  const std::size_t n = cfg.emit == EmitMode::waveform ? 1 : cfg.dim;
  auto rng = stream(cfg.seed, 1);
  const std::vector<double> U = random_orthogonal(n, rng), V = random_orthogonal(n, rng);
  const double lo = -0.5 * std::log(cfg.max_condition);
  std::uniform_real_distribution<double> ls(lo, -lo);
  std::vector<double> s(n);
  for (auto& v : s) v = std::exp(ls(rng));
  DomainTransform t{n, std::vector<double>(n * n, 0.0), std::vector<double>(n)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < n; ++k) t.A[i * n + j] += U[k * n + i] * s[k] * V[k * n + j];
  std::normal_distribution<double> g(0.0, cfg.shift_scale);
  for (auto& v : t.b) v = g(rng);
  if (cfg.emit == EmitMode::waveform) t.b[0] *= 0.05;
  return t;
}

std::vector<std::vector<double>> make_prototypes(const SynthConfig& cfg) {
  auto rng = stream(cfg.seed, 0);
  std::normal_distribution<double> g;
  std::vector<std::vector<double>> p(cfg.v_tok + 1);
  for (std::size_t k = 1; k <= cfg.v_tok; ++k) {
    p[k].resize(cfg.proto_len * cfg.dim);
    for (auto& v : p[k]) v = g(rng);
  }
  return p;
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path);
  Manifest m;
  m.base_dir = fs::path(path).parent_path().string();
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty() || trim(line)[0] == '#') continue;
    const auto cols = split(line, '\t');
    if (cols.size() != 4) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 4 tab-separated columns");
    ManifestRow r{cols[0], cols[1], {}, parse_domain(trim(cols[3]))};
    std::istringstream ts(cols[2]);
    std::string tok;
    while (ts >> tok) {
      std::size_t used = 0;
      const unsigned long v = std::stoul(tok, &used);
      if (used != tok.size()) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": bad token id " + tok);
      r.transcript.push_back(v);
    }
    if (!ids.insert(r.id).second) throw std::runtime_error("duplicate utterance id " + r.id);
    m.rows.push_back(std::move(r));
  }
  return m;
}

void write_manifest(const Manifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write manifest " + path);
  out << "# id\tpath\ttranscript\tdomain\n";
  for (const auto& r : m.rows)
    out << r.id << '\t' << r.path << '\t' << transcript_str(r.transcript) << '\t' << domain_name(r.domain) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path);
}

std::string resolve_path(const Manifest& m, const ManifestRow& row) {
  const fs::path p(row.path);
  return p.is_absolute() || m.base_dir.empty() ? p.string() : (fs::path(m.base_dir) / p).string();
}

CorpusPaths gen_corpus(const SynthConfig& cfg, const std::string& out_dir) {
  check_synth(cfg);
  fs::create_directories(fs::path(out_dir) / "feats");
  const auto protos = make_prototypes(cfg);
  const DomainTransform tf = make_domain_transform(cfg);

  struct Split {
    const char* name;
    std::size_t count;
    Domain domain;
  };
  const Split splits[] = {{"source", cfg.source_utts, Domain::source},
                          {"target", cfg.target_utts, Domain::target},
                          {"test", cfg.test_utts, Domain::target}};
  CorpusPaths paths;
  for (std::size_t si = 0; si < 3; ++si) {
    const Split& sp = splits[si];
    auto rng = stream(cfg.seed, 10 + si);
    std::uniform_int_distribution<std::size_t> ntok(cfg.min_tokens, cfg.max_tokens), tok(1, cfg.v_tok);
    std::uniform_int_distribution<std::size_t> dur(cfg.proto_len - cfg.duration_jitter, cfg.proto_len + cfg.duration_jitter);
    std::normal_distribution<double> noise(0.0, 1.0);
    Manifest m;
    for (std::size_t u = 0; u < sp.count; ++u) {
      char id[64];
      std::snprintf(id, sizeof id, "%s-%05zu", sp.name, u);
      ManifestRow row{id, std::string("feats/") + id + ".feat", {}, sp.domain};
      const std::size_t n = ntok(rng);
      for (std::size_t i = 0; i < n; ++i) row.transcript.push_back(tok(rng));
      FeatureMatrix f;
      if (cfg.emit == EmitMode::features) {
        f.dim = cfg.dim;
        for (auto k : row.transcript) {
          const std::size_t d = dur(rng);
          const auto frames = stretch(protos[k], cfg.proto_len, cfg.dim, d);
          for (std::size_t t = 0; t < d; ++t) {
            std::vector<double> x(frames.begin() + t * cfg.dim, frames.begin() + (t + 1) * cfg.dim);
            for (auto& v : x) v += cfg.noise * noise(rng);
            if (sp.domain == Domain::target) x = tf.apply(x);
            for (double v : x) f.values.push_back(static_cast<float>(v));
          }
          f.frames += d;
        }
      } else {
        // Each token is a three-partial chord lasting its duration in 10 ms frames.
        f.dim = 1;
        f.shift_ms = f.window_ms = static_cast<float>(1000.0 / cfg.sample_rate);
        const double sr = cfg.sample_rate;
        double phase_t = 0.0;
        for (auto k : row.transcript) {
          const std::size_t samples = dur(rng) * static_cast<std::size_t>(sr / 100.0);
          const double kk = static_cast<double>(k);
          const double freqs[3] = {150.0 + 250.0 * kk, 1100.0 + 230.0 * kk, 2600.0 + 190.0 * kk};
          for (std::size_t i = 0; i < samples; ++i, phase_t += 1.0 / sr) {
            double x = 0.0;
            for (double fr : freqs) x += 0.2 * std::sin(2.0 * std::numbers::pi * fr * phase_t);
            x += 0.05 * cfg.noise * noise(rng);
            if (sp.domain == Domain::target) x = tf.A[0] * x + tf.b[0];
            f.values.push_back(static_cast<float>(x));
          }
          f.frames += samples;
        }
      }
      write_features(f, (fs::path(out_dir) / row.path).string());
      m.rows.push_back(std::move(row));
    }
    const std::string mp = (fs::path(out_dir) / (std::string(sp.name) + ".tsv")).string();
    write_manifest(m, mp);
    (si == 0 ? paths.source : si == 1 ? paths.target : paths.test) = mp;
  }
  return paths;
}

std::string featurize_manifest(const std::string& manifest_path, const FeaturizerConfig& fc, const std::string& out_dir) {
  const Manifest in = load_manifest(manifest_path);
  fs::create_directories(fs::path(out_dir) / "feats");
  Manifest out;
  for (const auto& r : in.rows) {
    const FeatureMatrix w = read_features(resolve_path(in, r));
    if (w.dim != 1) throw std::runtime_error("featurize expects waveform files (dim 1): " + r.id);
    Waveform wav{{w.values.begin(), w.values.end()}, static_cast<int>(std::lround(1000.0 / w.shift_ms))};
    ManifestRow o = r;
    o.path = "feats/" + r.id + ".feat";
    write_features(log_mel(wav, fc), (fs::path(out_dir) / o.path).string());
    out.rows.push_back(std::move(o));
  }
  const std::string mp = (fs::path(out_dir) / fs::path(manifest_path).filename()).string();
  write_manifest(out, mp);
  return mp;
}

std::vector<Utterance> load_dataset(const Manifest& m) {
  std::vector<Utterance> out;
  std::set<std::string> ids;
  for (const auto& r : m.rows) {
    if (!ids.insert(r.id).second) throw std::runtime_error("duplicate utterance id " + r.id);
    const std::string p = resolve_path(m, r);
    if (!fs::exists(p)) throw std::runtime_error("missing feature file " + p);
    out.push_back(Utterance{r.id, read_features(p), r.transcript, r.domain});
  }
  return out;
}

std::vector<Utterance> load_dataset(const std::string& manifest_path) { return load_dataset(load_manifest(manifest_path)); }

std::vector<std::vector<std::size_t>> batch_indices(const std::vector<Utterance>& data, std::size_t batch_size,
                                                    std::uint64_t seed) {
  if (batch_size == 0) throw std::invalid_argument("batch_size must be positive");
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return data[a].features.frames < data[b].features.frames; });
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    batches.emplace_back(order.begin() + i, order.begin() + std::min(order.size(), i + batch_size));
  std::shuffle(batches.begin(), batches.end(), rng);
  return batches;
}

Batch make_batch(const std::vector<Utterance>& data, const std::vector<std::size_t>& indices, DType dtype) {
  if (indices.empty()) throw std::invalid_argument("empty batch");
  const std::size_t D = data[indices[0]].features.dim;
  std::size_t T = 0;
  for (auto i : indices) {
    if (data[i].features.dim != D) throw std::invalid_argument("feature dims differ within a batch");
    T = std::max(T, data[i].features.frames);
  }
  std::vector<double> v(indices.size() * T * D, 0.0);
  Batch b;
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Utterance& u = data[indices[k]];
    std::copy(u.features.values.begin(), u.features.values.end(), v.begin() + static_cast<long>(k * T * D));
    b.lengths.push_back(u.features.frames);
    b.targets.push_back(u.transcript);
    b.ids.push_back(u.id);
  }
  b.indices = indices;
  b.features = Tensor::from({indices.size(), T, D}, std::move(v), dtype);
  return b;
}

std::vector<Batch> make_batches(const std::vector<Utterance>& data, std::size_t batch_size, std::uint64_t seed,
                                DType dtype) {
  std::vector<Batch> out;
  for (const auto& idx : batch_indices(data, batch_size, seed)) out.push_back(make_batch(data, idx, dtype));
  return out;
}

KeyValueConfig KeyValueConfig::parse(const std::string& text) {
  KeyValueConfig c;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    c.values_[key] = trim(line.substr(eq + 1));
  }
  return c;
}

KeyValueConfig KeyValueConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(it->second, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != it->second.size()) throw std::invalid_argument("config key " + key + ": not a number: " + it->second);
  return v;
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  std::size_t used = 0;
  std::uint64_t v = 0;
  try {
    if (!it->second.empty() && it->second[0] != '-') v = std::stoull(it->second, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != it->second.size())
    throw std::invalid_argument("config key " + key + ": not a non-negative integer: " + it->second);
  return v;
}

std::size_t KeyValueConfig::get_size(const std::string& key, std::size_t fallback) const {
  return static_cast<std::size_t>(get_u64(key, fallback));
}

bool KeyValueConfig::get_bool(const std::string& key, bool fallback) const {
  const auto it = values_.find(key);
  if (it == values_.end()) return fallback;
  if (it->second == "true" || it->second == "1" || it->second == "yes") return true;
  if (it->second == "false" || it->second == "0" || it->second == "no") return false;
  throw std::invalid_argument("config key " + key + ": not a boolean: " + it->second);
}

SynthConfig synth_config_from(const KeyValueConfig& kv) {
  SynthConfig c;
  c.v_tok = kv.get_size("v_tok", c.v_tok);
  c.proto_len = kv.get_size("proto_len", c.proto_len);
  c.duration_jitter = kv.get_size("duration_jitter", c.duration_jitter);
  c.dim = kv.get_size("feature_dim", c.dim);
  c.noise = kv.get_double("noise", c.noise);
  c.min_tokens = kv.get_size("min_tokens", c.min_tokens);
  c.max_tokens = kv.get_size("max_tokens", c.max_tokens);
  c.source_utts = kv.get_size("source_utts", c.source_utts);
  c.target_utts = kv.get_size("target_utts", c.target_utts);
  c.test_utts = kv.get_size("test_utts", c.test_utts);
  c.seed = kv.get_u64("corpus_seed", c.seed);
  c.emit = parse_emit_mode(kv.get_string("emit", emit_mode_name(c.emit)));
  c.sample_rate = static_cast<int>(kv.get_size("sample_rate", static_cast<std::size_t>(c.sample_rate)));
  c.max_condition = kv.get_double("max_condition", c.max_condition);
  c.shift_scale = kv.get_double("shift_scale", c.shift_scale);
  return c;
}

}  // namespace draft
