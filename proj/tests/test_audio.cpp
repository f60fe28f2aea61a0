// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <complex>
#include <cstdio>
#include <vector>

#include "soundloc/audio.hpp"
#include "soundloc/wav.hpp"

using soundloc::RTensor;
using namespace soundloc::audio;

namespace {

AudioClip sine_clip(double freq, int rate, double seconds, double amp = 0.5) {
  AudioClip c;
  c.sample_rate = rate;
  const auto n = static_cast<std::size_t>(std::llround(seconds * rate));
  c.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    c.samples[i] = amp * std::sin(2.0 * M_PI * freq * static_cast<double>(i) / rate);
  }
  return c;
}

// Reference one-frame log-mel built from a naive O(n^2) DFT and a from-
// scratch triangle filterbank. Independent of the fft-based pipeline.
std::vector<double> reference_frame_logmel(const AudioClip& clip, int t,
                                           int win, int hop, int n_mels) {
  const int pad = win / 2;
  const auto n = static_cast<std::int64_t>(clip.samples.size());
  auto sample_at = [&](std::int64_t j) {
    std::int64_t src = j - pad;
    if (src < 0) src = -src;
    if (src >= n) src = 2 * n - 2 - src;
    return clip.samples[static_cast<std::size_t>(src)];
  };
  std::size_t n_fft = 1;
  while (n_fft < static_cast<std::size_t>(win)) n_fft <<= 1;
  const int n_bins = static_cast<int>(n_fft / 2) + 1;

  std::vector<double> mag(static_cast<std::size_t>(n_bins), 0.0);
  for (int b = 0; b < n_bins; ++b) {
    std::complex<double> acc(0.0, 0.0);
    for (int k = 0; k < win; ++k) {
      const double w = 0.5 - 0.5 * std::cos(2.0 * M_PI * k / win);
      const double x = sample_at(static_cast<std::int64_t>(t) * hop + k) * w;
      const double ang = -2.0 * M_PI * b * k / static_cast<double>(n_fft);
      acc += x * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    mag[static_cast<std::size_t>(b)] = std::abs(acc);
  }

  auto hz2mel = [](double f) { return 2595.0 * std::log10(1.0 + f / 700.0); };
  auto mel2hz = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
  const double mel_max = hz2mel(clip.sample_rate / 2.0);
  std::vector<double> out(static_cast<std::size_t>(n_mels), 0.0);
  for (int m = 0; m < n_mels; ++m) {
    const double lo = mel2hz(mel_max * m / (n_mels + 1));
    const double mid = mel2hz(mel_max * (m + 1) / (n_mels + 1));
    const double hi = mel2hz(mel_max * (m + 2) / (n_mels + 1));
    double acc = 0.0;
    for (int b = 0; b < n_bins; ++b) {
      const double f =
          static_cast<double>(b) * clip.sample_rate / static_cast<double>(n_fft);
      double w = 0.0;
      if (f >= lo && f <= mid && mid > lo) w = (f - lo) / (mid - lo);
      else if (f > mid && f <= hi && hi > mid) w = (hi - f) / (hi - mid);
      acc += w * mag[static_cast<std::size_t>(b)];
    }
    out[static_cast<std::size_t>(m)] = std::log(acc + 1e-6);
  }
  return out;
}

}  // namespace

TEST_CASE("resample identity when rates match") {
  AudioClip c = sine_clip(440.0, 16000, 1.0);
  AudioClip r = resample(c, 16000);
  REQUIRE(r.samples.size() == c.samples.size());
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    CHECK(r.samples[i] == c.samples[i]);
  }
}

TEST_CASE("resample halves sample count from 32k to 16k") {
  AudioClip c = sine_clip(440.0, 32000, 1.0);
  AudioClip r = resample(c, 16000);
  CHECK(r.samples.size() == 16000);
  CHECK(r.sample_rate == 16000);
}

TEST_CASE("resample of zeros upsamples to zeros") {
  AudioClip c;
  c.sample_rate = 8000;
  c.samples.assign(8000, 0.0);
  AudioClip r = resample(c, 16000);
  REQUIRE(r.samples.size() == 16000);
  for (const double s : r.samples) CHECK(s == 0.0);
}

TEST_CASE("resample rejects empty clip") {
  AudioClip c;
  c.sample_rate = 16000;
  CHECK_THROWS_AS(resample(c, 8000), soundloc::InvalidInput);
}

TEST_CASE("log_mel produces 201x64 for a one-second 16 kHz clip") {
  AudioClip c = sine_clip(440.0, 16000, 1.0);
  LogMelSpectrogram spec = log_mel(c, 160, 80, 64);
  CHECK(spec.frames() == 201);
  CHECK(spec.bands() == 64);
  CHECK(spec.values.all_finite());
}

TEST_CASE("log_mel of silence is log(eps) everywhere") {
  AudioClip c;
  c.sample_rate = 16000;
  c.samples.assign(16000, 0.0);
  LogMelSpectrogram spec = log_mel(c);
  const double expect = std::log(1e-6);
  for (std::int64_t i = 0; i < spec.values.numel(); ++i) {
    CHECK(spec.values[i] == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("log_mel of a pure tone matches a reference DFT frame") {
  AudioClip c = sine_clip(440.0, 16000, 1.0);
  LogMelSpectrogram spec = log_mel(c, 160, 80, 64);

  // the dominant mel band is the same in every interior frame (frames 0 and
  // 200 see reflect padding, which distorts a pure sine)
  int expected_argmax = -1;
  for (int t = 1; t < spec.frames() - 1; ++t) {
    int arg = 0;
    for (int m = 1; m < 64; ++m) {
      if (spec.values(t, m) > spec.values(t, arg)) arg = m;
    }
    if (t == 1) expected_argmax = arg;
    CHECK(arg == expected_argmax);
  }

  const int t = 100;
  const std::vector<double> ref = reference_frame_logmel(c, t, 160, 80, 64);
  for (int m = 0; m < 64; ++m) {
    CHECK(spec.values(t, m) ==
          doctest::Approx(ref[static_cast<std::size_t>(m)]).epsilon(1e-6));
  }
}

TEST_CASE("log_mel energy monotonicity under amplitude doubling") {
  AudioClip c = sine_clip(523.25, 16000, 1.0, 0.25);
  AudioClip louder = c;
  for (double& s : louder.samples) s *= 2.0;
  LogMelSpectrogram a = log_mel(c);
  LogMelSpectrogram b = log_mel(louder);
  for (std::int64_t i = 0; i < a.values.numel(); ++i) {
    CHECK(b.values[i] >= a.values[i]);
  }
}

TEST_CASE("log_mel deterministic across calls") {
  AudioClip c = sine_clip(660.0, 16000, 1.0);
  LogMelSpectrogram a = log_mel(c);
  LogMelSpectrogram b = log_mel(c);
  for (std::int64_t i = 0; i < a.values.numel(); ++i) {
    CHECK(a.values[i] == b.values[i]);
  }
}

TEST_CASE("log_mel rejects clips shorter than one window") {
  AudioClip c;
  c.sample_rate = 16000;
  c.samples.assign(100, 0.1);
  CHECK_THROWS_AS(log_mel(c, 160, 80, 64), soundloc::InvalidInput);
}

TEST_CASE("wav pcm16 round trip") {
  AudioClip c = sine_clip(440.0, 16000, 0.25);
  const std::string path = "test_roundtrip.wav";
  write_wav_pcm16(path, c);
  AudioClip r = read_wav(path);
  REQUIRE(r.samples.size() == c.samples.size());
  CHECK(r.sample_rate == 16000);
  for (std::size_t i = 0; i < c.samples.size(); i += 37) {
    CHECK(r.samples[i] == doctest::Approx(c.samples[i]).epsilon(1e-3));
  }
  std::remove(path.c_str());
}

TEST_CASE("wav reader rejects garbage") {
  const std::string path = "test_garbage.wav";
  {
    std::ofstream f(path, std::ios::binary);
    f << "this is not a wav file at all, definitely not";
  }
  CHECK_THROWS_AS(read_wav(path), soundloc::CorruptFile);
  std::remove(path.c_str());
}
