// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include "soundloc/common.hpp"
#include "soundloc/tensor.hpp"

namespace soundloc::audio {

struct AudioClip {
  std::vector<double> samples;  // amplitudes in [-1, 1]
  int sample_rate = 0;

  double duration_s() const {
    return sample_rate > 0
               ? static_cast<double>(samples.size()) / sample_rate
               : 0.0;
  }

  void validate() const {
    if (sample_rate <= 0) throw InvalidInput("AudioClip: sample_rate <= 0");
    if (samples.empty()) throw InvalidInput("AudioClip: empty");
    for (const double s : samples) {
      if (!std::isfinite(s)) throw InvalidInput("AudioClip: non-finite sample");
    }
  }
};

struct LogMelSpectrogram {
  RTensor values;  // [T, M], log power

  int frames() const { return values.dim(0); }
  int bands() const { return values.dim(1); }
};

/// Linear-interpolation resampler. Output length is round(duration * rate),
/// so duration is preserved to within one sample period.
inline AudioClip resample(const AudioClip& clip, int target_rate) {
  if (clip.samples.empty()) throw InvalidInput("resample: empty clip");
  if (clip.sample_rate <= 0 || target_rate <= 0) {
    throw InvalidInput("resample: rates must be positive");
  }
  if (clip.sample_rate == target_rate) return clip;

  const std::size_t n_in = clip.samples.size();
  const std::size_t n_out = static_cast<std::size_t>(std::llround(
      static_cast<double>(n_in) * target_rate / clip.sample_rate));
  AudioClip out;
  out.sample_rate = target_rate;
  out.samples.resize(n_out);
  const double step =
      static_cast<double>(clip.sample_rate) / static_cast<double>(target_rate);
  for (std::size_t i = 0; i < n_out; ++i) {
    const double pos = static_cast<double>(i) * step;
    std::size_t i0 = static_cast<std::size_t>(pos);
    if (i0 >= n_in - 1) i0 = n_in - 1;
    const std::size_t i1 = std::min(i0 + 1, n_in - 1);
    const double frac = pos - static_cast<double>(i0);
    out.samples[i] =
        clip.samples[i0] * (1.0 - frac) + clip.samples[i1] * frac;
  }
  return out;
}

namespace detail {

inline std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

/// In-place iterative radix-2 FFT.
inline void fft(std::vector<std::complex<double>>& a) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = -2.0 * M_PI / static_cast<double>(len);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const std::complex<double> u = a[i + k];
        const std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wl;
      }
    }
  }
}

inline double hz_to_mel(double hz) {
  return 2595.0 * std::log10(1.0 + hz / 700.0);
}

inline double mel_to_hz(double mel) {
  return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0);
}

}  // namespace detail

/// Periodic Hann window of length n.
inline std::vector<double> hann_window(int n) {
  std::vector<double> w(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    w[static_cast<std::size_t>(i)] =
        0.5 - 0.5 * std::cos(2.0 * M_PI * i / n);
  }
  return w;
}

/// HTK-style triangular mel filterbank over FFT bin center frequencies,
/// spanning [0, sample_rate/2]. Rows: n_mels, columns: n_fft/2 + 1.
inline RTensor mel_filterbank(int n_mels, int n_fft, int sample_rate) {
  const int n_bins = n_fft / 2 + 1;
  const double fmax = sample_rate / 2.0;
  const double mel_max = detail::hz_to_mel(fmax);
  std::vector<double> hz_pts(static_cast<std::size_t>(n_mels) + 2);
  for (int i = 0; i < n_mels + 2; ++i) {
    hz_pts[static_cast<std::size_t>(i)] =
        detail::mel_to_hz(mel_max * i / (n_mels + 1));
  }
  RTensor fb({n_mels, n_bins});
  for (int m = 0; m < n_mels; ++m) {
    const double lo = hz_pts[static_cast<std::size_t>(m)];
    const double mid = hz_pts[static_cast<std::size_t>(m) + 1];
    const double hi = hz_pts[static_cast<std::size_t>(m) + 2];
    for (int b = 0; b < n_bins; ++b) {
      const double f = static_cast<double>(b) * sample_rate / n_fft;
      double w = 0.0;
      if (f >= lo && f <= mid && mid > lo) {
        w = (f - lo) / (mid - lo);
      } else if (f > mid && f <= hi && hi > mid) {
        w = (hi - f) / (hi - mid);
      }
      fb(m, b) = w;
    }
  }
  return fb;
}

/// Log-mel spectrogram. Frames are centered via reflect padding of win/2
/// samples on both sides, so a clip of L samples yields L/hop + 1 frames.
/// The DFT size is the next power of two >= win (window is zero-padded);
/// magnitudes go through the mel filterbank and log(x + 1e-6).
inline LogMelSpectrogram log_mel(const AudioClip& clip, int win = 160,
                                 int hop = 80, int n_mels = 64) {
  if (win <= 1 || hop <= 0 || n_mels <= 0) {
    throw InvalidInput("log_mel: bad analysis parameters");
  }
  if (clip.samples.size() < static_cast<std::size_t>(win)) {
    throw InvalidInput("log_mel: clip shorter than one window");
  }
  constexpr double kLogEps = 1e-6;
  const std::size_t n = clip.samples.size();
  const int pad = win / 2;

  std::vector<double> padded(n + 2 * static_cast<std::size_t>(pad));
  for (std::size_t i = 0; i < padded.size(); ++i) {
    std::int64_t src = static_cast<std::int64_t>(i) - pad;
    if (src < 0) src = -src;  // reflect, excluding the edge sample
    if (src >= static_cast<std::int64_t>(n)) {
      src = 2 * static_cast<std::int64_t>(n) - 2 - src;
    }
    padded[i] = clip.samples[static_cast<std::size_t>(src)];
  }

  const int frames = static_cast<int>(n) / hop + 1;
  const std::size_t n_fft = detail::next_pow2(static_cast<std::size_t>(win));
  const int n_bins = static_cast<int>(n_fft / 2) + 1;
  const std::vector<double> window = hann_window(win);
  const RTensor fb = mel_filterbank(n_mels, static_cast<int>(n_fft),
                                    clip.sample_rate);

  LogMelSpectrogram spec;
  spec.values = RTensor({frames, n_mels});
  std::vector<std::complex<double>> buf(n_fft);
  std::vector<double> mag(static_cast<std::size_t>(n_bins));
  for (int t = 0; t < frames; ++t) {
    const std::size_t start = static_cast<std::size_t>(t) * hop;
    for (std::size_t k = 0; k < n_fft; ++k) {
      buf[k] = (k < static_cast<std::size_t>(win))
                   ? std::complex<double>(
                         padded[start + k] * window[k], 0.0)
                   : std::complex<double>(0.0, 0.0);
    }
    detail::fft(buf);
    for (int b = 0; b < n_bins; ++b) {
      mag[static_cast<std::size_t>(b)] = std::abs(buf[static_cast<std::size_t>(b)]);
    }
    for (int m = 0; m < n_mels; ++m) {
      double acc = 0.0;
      const double* fbrow = &fb(m, 0);
      for (int b = 0; b < n_bins; ++b) {
        acc += fbrow[b] * mag[static_cast<std::size_t>(b)];
      }
      spec.values(t, m) = std::log(acc + kLogEps);
    }
  }
  return spec;
}

}  // namespace soundloc::audio
