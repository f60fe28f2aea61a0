// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "soundloc/audio.hpp"
#include "soundloc/common.hpp"

namespace soundloc::audio {

namespace detail {

inline void put_u32(std::string& s, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u16(std::string& s, std::uint16_t v) {
  for (int i = 0; i < 2; ++i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

}  // namespace detail

/// Writes a mono 16-bit PCM WAV file. Samples are clamped to [-1, 1].
inline void write_wav_pcm16(const std::string& path, const AudioClip& clip) {
  clip.validate();
  std::string out;
  const std::uint32_t data_bytes =
      static_cast<std::uint32_t>(clip.samples.size() * 2);
  out += "RIFF";
  detail::put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);  // PCM
  detail::put_u16(out, 1);  // mono
  detail::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(clip.sample_rate * 2));
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out += "data";
  detail::put_u32(out, data_bytes);
  for (const double s : clip.samples) {
    const double c = std::clamp(s, -1.0, 1.0);
    const auto v = static_cast<std::int16_t>(std::lround(c * 32767.0));
    detail::put_u16(out, static_cast<std::uint16_t>(v));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("write_wav_pcm16: cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write_wav_pcm16: write failed for " + path);
}

/// Reads a PCM16 or float32 WAV file. Multi-channel input is averaged down
/// to mono.
inline AudioClip read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("read_wav: cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw CorruptFile("read_wav: not a RIFF/WAVE file: " + path);
  }

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t data_off = 0, data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const std::uint32_t chunk_len = detail::get_u32(bytes.data() + pos + 4);
    if (std::memcmp(bytes.data() + pos, "fmt ", 4) == 0) {
      if (pos + 8 + 16 > bytes.size()) {
        throw CorruptFile("read_wav: truncated fmt chunk");
      }
      const unsigned char* p = bytes.data() + pos + 8;
      format = detail::get_u16(p);
      channels = detail::get_u16(p + 2);
      rate = detail::get_u32(p + 4);
      bits = detail::get_u16(p + 14);
    } else if (std::memcmp(bytes.data() + pos, "data", 4) == 0) {
      data_off = pos + 8;
      data_len = chunk_len;
    }
    pos += 8 + chunk_len + (chunk_len & 1);
  }
  if (rate == 0 || channels == 0 || data_off == 0) {
    throw CorruptFile("read_wav: missing fmt or data chunk: " + path);
  }
  if (data_off + data_len > bytes.size()) {
    throw CorruptFile("read_wav: truncated data chunk: " + path);
  }

  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  const unsigned char* d = bytes.data() + data_off;
  if (format == 1 && bits == 16) {
    const std::size_t frames = data_len / (2 * channels);
    clip.samples.resize(frames);
    for (std::size_t i = 0; i < frames; ++i) {
      double acc = 0.0;
      for (std::uint16_t c = 0; c < channels; ++c) {
        const auto v = static_cast<std::int16_t>(
            detail::get_u16(d + (i * channels + c) * 2));
        acc += static_cast<double>(v) / 32768.0;
      }
      clip.samples[i] = acc / channels;
    }
  } else if (format == 3 && bits == 32) {
    const std::size_t frames = data_len / (4 * channels);
    clip.samples.resize(frames);
    for (std::size_t i = 0; i < frames; ++i) {
      double acc = 0.0;
      for (std::uint16_t c = 0; c < channels; ++c) {
        float v = 0.0f;
        std::memcpy(&v, d + (i * channels + c) * 4, 4);
        acc += static_cast<double>(v);
      }
      clip.samples[i] = acc / channels;
    }
  } else {
    throw CorruptFile("read_wav: unsupported format (want PCM16 or float32)");
  }
  return clip;
}

}  // namespace soundloc::audio
