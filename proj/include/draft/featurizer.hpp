#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace draft {

struct Waveform {
  std::vector<double> samples;
  int sample_rate = 16000;
};

/// T x D frame-level features, row-major, single precision.
struct FeatureMatrix {
  std::size_t frames = 0;
  std::size_t dim = 0;
  float shift_ms = 10.0f;
  float window_ms = 25.0f;
  std::vector<float> values;

  float at(std::size_t t, std::size_t d) const { return values[t * dim + d]; }
  float& at(std::size_t t, std::size_t d) { return values[t * dim + d]; }
};

struct FeaturizerConfig {
  double window_ms = 25.0;
  double shift_ms = 10.0;
  std::size_t n_mels = 80;
  double fmin = 0.0;
  double fmax = 0.0;  // 0 means sample_rate / 2
  double log_floor = 1e-10;
};

struct SpecAugConfig {
  std::size_t num_time_masks = 0;
  std::size_t max_time_width = 0;
  std::size_t num_freq_masks = 0;
  std::size_t max_freq_width = 0;
  // Widths are drawn uniformly from [min, max].
  std::size_t min_time_width = 0;
  std::size_t min_freq_width = 0;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Symmetric Hamming window 0.54 - 0.46 cos(2 pi n / (len - 1)).
std::vector<double> hamming_window(std::size_t len);

std::size_t next_pow2(std::size_t n);

/// Triangular HTK-style filters over the fft_len / 2 + 1 power bins,
/// n_mels rows. Each non-empty filter is scaled to peak at exactly 1.
std::vector<std::vector<double>> mel_filterbank(std::size_t n_mels, std::size_t fft_len, int sample_rate, double fmin,
                                                double fmax);

/// Center frequency in Hz of mel filter j.
double mel_center_hz(std::size_t j, std::size_t n_mels, double fmin, double fmax);

std::size_t frame_count(std::size_t n_samples, std::size_t win, std::size_t hop);

FeatureMatrix log_mel(const Waveform& w, const FeaturizerConfig& cfg);

FeatureMatrix spec_augment(const FeatureMatrix& f, const SpecAugConfig& cfg, std::uint64_t seed);

void write_features(const FeatureMatrix& f, const std::string& path);
FeatureMatrix read_features(const std::string& path);

}  // namespace draft
