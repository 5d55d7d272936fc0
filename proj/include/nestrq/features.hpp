#pragma once

// Log-mel filterbank frontend and SpecAugment-style feature masking.
//
// DSP choices pinned for reproducibility: Hann window (symmetric), power
// spectrum from a radix-2 FFT, Slaney mel spacing (linear below 1 kHz, log
// above), triangular filters evaluated at FFT bin centers, log floor 1e-10.

#include <algorithm>
#include <cmath>
#include <complex>
#include <string>
#include <vector>

#include "nestrq/common.hpp"
#include "nestrq/io.hpp"
#include "nestrq/rng.hpp"
#include "nestrq/tensor.hpp"

namespace nestrq {

struct FbankConfig {
  int sample_rate_hz = 16000;
  double frame_stride_ms = 10.0;
  double frame_length_ms = 25.0;
  int num_mels = 80;
  int fft_size = 512;
  double fmin_hz = 0.0;
  double fmax_hz = 8000.0;

  int window_samples() const {
    return static_cast<int>(std::lround(frame_length_ms * sample_rate_hz / 1000.0));
  }
  int hop_samples() const {
    return static_cast<int>(std::lround(frame_stride_ms * sample_rate_hz / 1000.0));
  }

  void validate() const {
    if (sample_rate_hz < 1) throw ConfigError("fbank: sample rate must be positive");
    if (frame_length_ms < frame_stride_ms)
      throw ConfigError("fbank: frame length must be >= frame stride");
    if (num_mels < 1) throw ConfigError("fbank: num_mels must be >= 1");
    if (fft_size < window_samples()) throw ConfigError("fbank: fft_size < window samples");
    if ((fft_size & (fft_size - 1)) != 0) throw ConfigError("fbank: fft_size must be a power of two");
    if (fmax_hz <= fmin_hz) throw ConfigError("fbank: fmax must exceed fmin");
  }
};

struct FeatureSequence {
  Tensor frames;  // [T x num_mels]
  std::string utterance_id;
  double stride_ms = 10.0;

  int num_frames() const { return frames.rows(); }
  int num_mels() const { return frames.cols(); }
};

namespace dsp {

// In-place iterative radix-2 Cooley-Tukey. n must be a power of two.
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw UsageError("fft: size must be a power of two");
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> t = a[i + k + len / 2] * w;
        a[i + k] = u + t;
        a[i + k + len / 2] = u - t;
        w *= wlen;
      }
    }
  }
}

// Slaney mel scale: linear below 1 kHz, logarithmic above.
inline double hz_to_mel(double hz) {
  constexpr double kBreak = 1000.0;
  constexpr double kLinearStep = 200.0 / 3.0;
  constexpr double kLogStep = 27.0;  // filters per ln(6.4) above the break
  if (hz < kBreak) return hz / kLinearStep;
  return kBreak / kLinearStep + std::log(hz / kBreak) / std::log(6.4) * kLogStep;
}

inline double mel_to_hz(double mel) {
  constexpr double kBreak = 1000.0;
  constexpr double kLinearStep = 200.0 / 3.0;
  constexpr double kLogStep = 27.0;
  const double break_mel = kBreak / kLinearStep;
  if (mel < break_mel) return mel * kLinearStep;
  return kBreak * std::exp(std::log(6.4) * (mel - break_mel) / kLogStep);
}

// Triangular filters on FFT bin center frequencies; rows are filters.
inline std::vector<std::vector<double>> mel_filterbank(const FbankConfig& cfg) {
  const int bins = cfg.fft_size / 2 + 1;
  const double mel_lo = hz_to_mel(cfg.fmin_hz);
  const double mel_hi = hz_to_mel(cfg.fmax_hz);
  std::vector<double> edges_hz(static_cast<std::size_t>(cfg.num_mels) + 2);
  for (int i = 0; i < cfg.num_mels + 2; ++i)
    edges_hz[static_cast<std::size_t>(i)] =
        mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (cfg.num_mels + 1));
  std::vector<std::vector<double>> filters(static_cast<std::size_t>(cfg.num_mels),
                                           std::vector<double>(static_cast<std::size_t>(bins), 0.0));
  for (int f = 0; f < cfg.num_mels; ++f) {
    const double lo = edges_hz[static_cast<std::size_t>(f)];
    const double mid = edges_hz[static_cast<std::size_t>(f) + 1];
    const double hi = edges_hz[static_cast<std::size_t>(f) + 2];
    for (int b = 0; b < bins; ++b) {
      const double hz = static_cast<double>(b) * cfg.sample_rate_hz / cfg.fft_size;
      double w = 0.0;
      if (hz > lo && hz < mid)
        w = (hz - lo) / (mid - lo);
      else if (hz >= mid && hz < hi)
        w = (hi - hz) / (hi - mid);
      filters[static_cast<std::size_t>(f)][static_cast<std::size_t>(b)] = std::max(0.0, w);
    }
  }
  return filters;
}

inline double mel_center_hz(const FbankConfig& cfg, int filter_index) {
  const double mel_lo = hz_to_mel(cfg.fmin_hz);
  const double mel_hi = hz_to_mel(cfg.fmax_hz);
  return mel_to_hz(mel_lo + (mel_hi - mel_lo) * (filter_index + 1) / (cfg.num_mels + 1));
}

// Symmetric Hann window coefficient n of a window of given length.
inline double hann(int n, int length) {
  return 0.5 - 0.5 * std::cos(2.0 * M_PI * n / (length - 1));
}

}  // namespace dsp

inline constexpr double kLogFloor = 1e-10;

inline FeatureSequence extract_fbank(const std::vector<double>& waveform, const FbankConfig& cfg,
                                     const std::string& utterance_id = "") {
  cfg.validate();
  const int win = cfg.window_samples();
  const int hop = cfg.hop_samples();
  if (static_cast<int>(waveform.size()) < win)
    throw InputError("extract_fbank: waveform shorter than one window");
  const int T = static_cast<int>((waveform.size() - static_cast<std::size_t>(win)) / hop) + 1;

  std::vector<double> hann(static_cast<std::size_t>(win));
  for (int n = 0; n < win; ++n) hann[static_cast<std::size_t>(n)] = dsp::hann(n, win);

  const auto filters = dsp::mel_filterbank(cfg);
  const int bins = cfg.fft_size / 2 + 1;

  Tensor frames = Tensor::zeros({T, cfg.num_mels});
  std::vector<std::complex<double>> spec(static_cast<std::size_t>(cfg.fft_size));
  std::vector<double> power(static_cast<std::size_t>(bins));
  for (int t = 0; t < T; ++t) {
    const std::size_t start = static_cast<std::size_t>(t) * hop;
    for (int n = 0; n < cfg.fft_size; ++n)
      spec[static_cast<std::size_t>(n)] =
          n < win ? waveform[start + static_cast<std::size_t>(n)] * hann[static_cast<std::size_t>(n)]
                  : 0.0;
    dsp::fft(spec);
    for (int b = 0; b < bins; ++b) power[static_cast<std::size_t>(b)] = std::norm(spec[static_cast<std::size_t>(b)]);
    for (int f = 0; f < cfg.num_mels; ++f) {
      double e = 0.0;
      const auto& filt = filters[static_cast<std::size_t>(f)];
      for (int b = 0; b < bins; ++b) e += filt[static_cast<std::size_t>(b)] * power[static_cast<std::size_t>(b)];
      frames.at(t, f) = std::log(e + kLogFloor);
    }
  }
  FeatureSequence out;
  out.frames = std::move(frames);
  out.utterance_id = utterance_id;
  out.stride_ms = cfg.frame_stride_ms;
  return out;
}

struct SpecAugmentConfig {
  int freq_mask_width = 0;   // F: exact width of each frequency mask
  int num_freq_masks = 0;
  int time_mask_width = 0;   // W: exact width of each time mask
  int num_time_masks = 0;
};

// Masks freq bands / time spans with the per-utterance mean value. Mask width
// is exactly F (resp. W); only the start position is drawn. Width 0 or zero
// mask counts are no-ops.
inline FeatureSequence spec_augment(const FeatureSequence& x, Rng& rng,
                                    const SpecAugmentConfig& cfg) {
  const int T = x.num_frames(), D = x.num_mels();
  if (cfg.freq_mask_width > D) throw ConfigError("spec_augment: freq mask wider than num_mels");
  if (cfg.time_mask_width > T) throw ConfigError("spec_augment: time mask wider than T");
  FeatureSequence out;
  out.utterance_id = x.utterance_id;
  out.stride_ms = x.stride_ms;
  out.frames = Tensor::from(x.frames.shape(), x.frames.values());

  double mean = 0.0;
  for (double v : x.frames.values()) mean += v;
  mean /= static_cast<double>(x.frames.size());

  for (int k = 0; k < cfg.num_freq_masks; ++k) {
    const int w = cfg.freq_mask_width;
    if (w <= 0) continue;
    const int f0 = static_cast<int>(rng.uniform_int(0, D - w));
    for (int t = 0; t < T; ++t)
      for (int f = f0; f < f0 + w; ++f) out.frames.at(t, f) = mean;
  }
  for (int k = 0; k < cfg.num_time_masks; ++k) {
    const int w = cfg.time_mask_width;
    if (w <= 0) continue;
    const int t0 = static_cast<int>(rng.uniform_int(0, T - w));
    for (int t = t0; t < t0 + w; ++t)
      for (int f = 0; f < D; ++f) out.frames.at(t, f) = mean;
  }
  return out;
}

// Feature file: JSON header line {utterance_id, T, num_mels, stride_ms} then
// T*num_mels little-endian f32, row major.
inline void write_feature_file(const std::filesystem::path& path, const FeatureSequence& x) {
  json header;
  header["utterance_id"] = x.utterance_id;
  header["T"] = x.num_frames();
  header["num_mels"] = x.num_mels();
  header["stride_ms"] = x.stride_ms;
  std::string buf = header.dump();
  buf.push_back('\n');
  io_detail::append_f32(buf, x.frames.values());
  write_file(path, buf);
}

inline FeatureSequence read_feature_file(const std::filesystem::path& path) {
  const std::string content = read_file(path);
  auto [header, pos] = read_header_line(content, "feature file");
  FeatureSequence x;
  try {
    x.utterance_id = header.at("utterance_id").get<std::string>();
    x.stride_ms = header.at("stride_ms").get<double>();
    const int T = header.at("T").get<int>();
    const int D = header.at("num_mels").get<int>();
    if (T < 1 || D < 1) throw IoError("feature file: bad dimensions");
    x.frames = Tensor::from({T, D}, io_detail::read_f32(content, pos, static_cast<std::size_t>(T) * D));
  } catch (const json::exception& e) {
    throw IoError(path.string() + ": bad feature header: " + e.what());
  }
  return x;
}

}  // namespace nestrq
