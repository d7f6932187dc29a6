#include "draft/featurizer.hpp"

#include <fftw3.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

namespace draft {

static_assert(std::endian::native == std::endian::little, "feature files are written in host order");

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> hamming_window(std::size_t len) {
  std::vector<double> w(len, 1.0);
  if (len < 2) return w;
  for (std::size_t n = 0; n < len; ++n)
    w[n] = 0.54 - 0.46 * std::cos(2.0 * std::numbers::pi * static_cast<double>(n) / static_cast<double>(len - 1));
  return w;
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

double mel_center_hz(std::size_t j, std::size_t n_mels, double fmin, double fmax) {
  const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
  return mel_to_hz(lo + (hi - lo) * static_cast<double>(j + 1) / static_cast<double>(n_mels + 1));
}

std::vector<std::vector<double>> mel_filterbank(std::size_t n_mels, std::size_t fft_len, int sample_rate, double fmin,
                                                double fmax) {
  const std::size_t bins = fft_len / 2 + 1;
  const double lo = hz_to_mel(fmin), hi = hz_to_mel(fmax);
  std::vector<double> edges(n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i)
    edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1);

  std::vector<std::vector<double>> fb(n_mels, std::vector<double>(bins, 0.0));
  for (std::size_t j = 0; j < n_mels; ++j) {
    const double l = edges[j], c = edges[j + 1], r = edges[j + 2];
    double peak = 0.0;
    for (std::size_t k = 0; k < bins; ++k) {
      const double m = hz_to_mel(static_cast<double>(k) * sample_rate / static_cast<double>(fft_len));
      double v = 0.0;
      if (m > l && m <= c)
        v = (m - l) / (c - l);
      else if (m > c && m < r)
        v = (r - m) / (r - c);
      fb[j][k] = v;
      peak = std::max(peak, v);
    }
    if (peak > 0.0)
      for (double& v : fb[j]) v /= peak;
  }
  return fb;
}

std::size_t frame_count(std::size_t n_samples, std::size_t win, std::size_t hop) {
  if (win == 0 || hop == 0 || n_samples < win) return 0;
  return (n_samples - win) / hop + 1;
}

namespace {

void validate(const FeaturizerConfig& cfg, int sample_rate, double fmax) {
  if (sample_rate <= 0) throw std::invalid_argument("sample_rate must be positive");
  if (!(cfg.shift_ms > 0.0) || cfg.shift_ms > cfg.window_ms)
    throw std::invalid_argument("featurizer needs 0 < shift_ms <= window_ms");
  if (cfg.n_mels == 0) throw std::invalid_argument("n_mels must be positive");
  if (cfg.fmin < 0.0 || cfg.fmin >= fmax || fmax > sample_rate / 2.0)
    throw std::invalid_argument("featurizer needs 0 <= fmin < fmax <= sample_rate/2");
  if (!(cfg.log_floor > 0.0)) throw std::invalid_argument("log_floor must be positive");
}

}  // namespace

FeatureMatrix log_mel(const Waveform& w, const FeaturizerConfig& cfg) {
  const double fmax = cfg.fmax > 0.0 ? cfg.fmax : w.sample_rate / 2.0;
  validate(cfg, w.sample_rate, fmax);
  for (double s : w.samples)
    if (!std::isfinite(s)) throw std::invalid_argument("waveform contains non-finite samples");

  const auto win = static_cast<std::size_t>(std::lround(w.sample_rate * cfg.window_ms / 1000.0));
  const auto hop = static_cast<std::size_t>(std::lround(w.sample_rate * cfg.shift_ms / 1000.0));
  if (win == 0 || hop == 0) throw std::invalid_argument("window or shift shorter than one sample");

  FeatureMatrix out;
  out.dim = cfg.n_mels;
  out.shift_ms = static_cast<float>(cfg.shift_ms);
  out.window_ms = static_cast<float>(cfg.window_ms);
  out.frames = frame_count(w.samples.size(), win, hop);
  out.values.assign(out.frames * out.dim, 0.0f);
  if (out.frames == 0) return out;

  const std::size_t nfft = next_pow2(win);
  const std::size_t bins = nfft / 2 + 1;
  const auto window = hamming_window(win);
  const auto fb = mel_filterbank(cfg.n_mels, nfft, w.sample_rate, cfg.fmin, fmax);

  double* in = fftw_alloc_real(nfft);
  fftw_complex* spec = fftw_alloc_complex(bins);
  fftw_plan plan = fftw_plan_dft_r2c_1d(static_cast<int>(nfft), in, spec, FFTW_ESTIMATE);
  std::vector<double> power(bins);
  for (std::size_t t = 0; t < out.frames; ++t) {
    std::fill(in, in + nfft, 0.0);
    for (std::size_t n = 0; n < win; ++n) in[n] = w.samples[t * hop + n] * window[n];
    fftw_execute(plan);
    for (std::size_t k = 0; k < bins; ++k) power[k] = spec[k][0] * spec[k][0] + spec[k][1] * spec[k][1];
    for (std::size_t j = 0; j < cfg.n_mels; ++j) {
      double e = 0.0;
      for (std::size_t k = 0; k < bins; ++k) e += fb[j][k] * power[k];
      out.at(t, j) = static_cast<float>(std::log(std::max(e, cfg.log_floor)));
    }
  }
  fftw_destroy_plan(plan);
  fftw_free(spec);
  fftw_free(in);
  return out;
}

FeatureMatrix spec_augment(const FeatureMatrix& f, const SpecAugConfig& cfg, std::uint64_t seed) {
  FeatureMatrix out = f;
  std::mt19937_64 rng(seed);
  auto span = [&](std::size_t lo, std::size_t hi, std::size_t extent) {
    hi = std::min(hi, extent);
    lo = std::min(lo, hi);
    const std::size_t width = std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
    const std::size_t start = std::uniform_int_distribution<std::size_t>(0, extent - width)(rng);
    return std::pair{start, width};
  };
  for (std::size_t i = 0; i < cfg.num_time_masks; ++i) {
    auto [t0, width] = span(cfg.min_time_width, cfg.max_time_width, out.frames);
    for (std::size_t t = t0; t < t0 + width; ++t)
      for (std::size_t d = 0; d < out.dim; ++d) out.at(t, d) = 0.0f;
  }
  for (std::size_t i = 0; i < cfg.num_freq_masks; ++i) {
    auto [d0, width] = span(cfg.min_freq_width, cfg.max_freq_width, out.dim);
    for (std::size_t t = 0; t < out.frames; ++t)
      for (std::size_t d = d0; d < d0 + width; ++d) out.at(t, d) = 0.0f;
  }
  return out;
}

namespace {

constexpr char kMagic[6] = {'F', 'E', 'A', 'T', '1', '\0'};
constexpr std::size_t kHeaderBytes = sizeof(kMagic) + 4 + 4 + 4 + 4;

template <class T>
void put(std::string& buf, T v) {
  char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  buf.append(b, sizeof(T));
}

template <class T>
T get(const std::string& buf, std::size_t& off) {
  T v;
  std::memcpy(&v, buf.data() + off, sizeof(T));
  off += sizeof(T);
  return v;
}

}  // namespace

void write_features(const FeatureMatrix& f, const std::string& path) {
  if (f.values.size() != f.frames * f.dim) throw std::invalid_argument("feature matrix size does not match shape");
  if (f.frames > std::numeric_limits<std::uint32_t>::max() || f.dim > std::numeric_limits<std::uint32_t>::max())
    throw std::invalid_argument("feature matrix too large for FEAT1");
  std::string buf(kMagic, sizeof(kMagic));
  put(buf, static_cast<std::uint32_t>(f.frames));
  put(buf, static_cast<std::uint32_t>(f.dim));
  put(buf, f.shift_ms);
  put(buf, f.window_ms);
  buf.append(reinterpret_cast<const char*>(f.values.data()), f.values.size() * sizeof(float));
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!os) throw std::runtime_error("write failed: " + path);
}

FeatureMatrix read_features(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("bad feature file magic: " + path);
  if (buf.size() < kHeaderBytes) throw std::runtime_error("truncated feature file: " + path);
  std::size_t off = sizeof(kMagic);
  FeatureMatrix f;
  f.frames = get<std::uint32_t>(buf, off);
  f.dim = get<std::uint32_t>(buf, off);
  f.shift_ms = get<float>(buf, off);
  f.window_ms = get<float>(buf, off);
  const std::uint64_t count = static_cast<std::uint64_t>(f.frames) * f.dim;
  if (count > (std::numeric_limits<std::uint64_t>::max() / sizeof(float)))
    throw std::runtime_error("feature file shape overflow: " + path);
  const std::uint64_t payload = count * sizeof(float);
  if (buf.size() - kHeaderBytes < payload) throw std::runtime_error("truncated feature file: " + path);
  if (buf.size() - kHeaderBytes > payload) throw std::runtime_error("trailing bytes in feature file: " + path);
  f.values.resize(count);
  std::memcpy(f.values.data(), buf.data() + kHeaderBytes, payload);
  return f;
}

}  // namespace draft
