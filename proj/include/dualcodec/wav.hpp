// Minimal RIFF/WAVE reader and writer. Reads 16-bit PCM and 32-bit float,
// writes 32-bit float, little-endian throughout.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dualcodec/common.hpp"

namespace dualcodec {

// Deinterleaved audio: samples[c][i] is channel c, frame i.
template <class T = float>
struct WaveformBuffer {
  std::vector<std::vector<T>> samples;
  int sample_rate = 0;

  int channels() const { return static_cast<int>(samples.size()); }
  int64_t n_samples() const { return samples.empty() ? 0 : static_cast<int64_t>(samples[0].size()); }

  void validate() const {
    if (sample_rate <= 0) throw ConfigError("waveform: sample_rate must be positive");
    if (channels() < 1 || channels() > 2) throw ConfigError("waveform: channels must be 1 or 2");
    for (const auto& ch : samples) {
      if (static_cast<int64_t>(ch.size()) != n_samples())
        throw ShapeError("waveform: ragged channel lengths");
      for (T v : ch)
        if (!std::isfinite(static_cast<double>(v))) throw DataError("waveform: non-finite sample");
    }
  }
};

namespace wavio {

inline uint32_t read_u32(std::istream& s) {
  unsigned char b[4];
  s.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

inline uint16_t read_u16(std::istream& s) {
  unsigned char b[2];
  s.read(reinterpret_cast<char*>(b), 2);
  return uint16_t(b[0]) | uint16_t(b[1]) << 8;
}

inline void write_u32(std::ostream& s, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  s.write(reinterpret_cast<char*>(b), 4);
}

inline void write_u16(std::ostream& s, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
  s.write(reinterpret_cast<char*>(b), 2);
}

} // namespace wavio

template <class T = float>
WaveformBuffer<T> read_wav(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open WAV file: " + path);

  char tag[4];
  f.read(tag, 4);
  if (!f || std::memcmp(tag, "RIFF", 4) != 0) throw IoError(path + ": not a RIFF file");
  wavio::read_u32(f); // riff size
  f.read(tag, 4);
  if (!f || std::memcmp(tag, "WAVE", 4) != 0) throw IoError(path + ": not a WAVE file");

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t sample_rate = 0;
  std::vector<char> data;
  bool have_fmt = false, have_data = false;

  while (f.read(tag, 4)) {
    uint32_t size = wavio::read_u32(f);
    if (!f) break;
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      format = wavio::read_u16(f);
      channels = wavio::read_u16(f);
      sample_rate = wavio::read_u32(f);
      wavio::read_u32(f); // byte rate
      wavio::read_u16(f); // block align
      bits = wavio::read_u16(f);
      if (size > 16) f.seekg(size - 16, std::ios::cur);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      data.resize(size);
      f.read(data.data(), size);
      have_data = true;
    } else {
      f.seekg(size + (size & 1), std::ios::cur);
    }
  }
  if (!have_fmt || !have_data) throw IoError(path + ": missing fmt/data chunk");
  if (channels < 1 || channels > 2) throw IoError(path + ": unsupported channel count");

  const bool pcm16 = (format == 1 && bits == 16);
  const bool f32 = (format == 3 && bits == 32);
  if (!pcm16 && !f32) throw IoError(path + ": only 16-bit PCM and 32-bit float supported");

  const size_t bytes_per = pcm16 ? 2 : 4;
  const size_t frames = data.size() / (bytes_per * channels);

  WaveformBuffer<T> out;
  out.sample_rate = static_cast<int>(sample_rate);
  out.samples.assign(channels, std::vector<T>(frames));
  const unsigned char* p = reinterpret_cast<const unsigned char*>(data.data());
  for (size_t i = 0; i < frames; ++i) {
    for (int c = 0; c < channels; ++c) {
      if (pcm16) {
        int16_t v = static_cast<int16_t>(uint16_t(p[0]) | uint16_t(p[1]) << 8);
        out.samples[c][i] = static_cast<T>(v / 32768.0);
        p += 2;
      } else {
        uint32_t u = uint32_t(p[0]) | uint32_t(p[1]) << 8 | uint32_t(p[2]) << 16 | uint32_t(p[3]) << 24;
        float v;
        std::memcpy(&v, &u, 4);
        out.samples[c][i] = static_cast<T>(v);
        p += 4;
      }
    }
  }
  return out;
}

template <class T = float>
void write_wav(const std::string& path, const WaveformBuffer<T>& wave) {
  wave.validate();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot create WAV file: " + path);

  const int channels = wave.channels();
  const uint32_t frames = static_cast<uint32_t>(wave.n_samples());
  const uint32_t data_bytes = frames * channels * 4;

  f.write("RIFF", 4);
  wavio::write_u32(f, 36 + data_bytes);
  f.write("WAVE", 4);
  f.write("fmt ", 4);
  wavio::write_u32(f, 16);
  wavio::write_u16(f, 3); // IEEE float
  wavio::write_u16(f, static_cast<uint16_t>(channels));
  wavio::write_u32(f, static_cast<uint32_t>(wave.sample_rate));
  wavio::write_u32(f, static_cast<uint32_t>(wave.sample_rate) * channels * 4);
  wavio::write_u16(f, static_cast<uint16_t>(channels * 4));
  wavio::write_u16(f, 32);
  f.write("data", 4);
  wavio::write_u32(f, data_bytes);
  for (uint32_t i = 0; i < frames; ++i) {
    for (int c = 0; c < channels; ++c) {
      float v = static_cast<float>(wave.samples[c][i]);
      uint32_t u;
      std::memcpy(&u, &v, 4);
      wavio::write_u32(f, u);
    }
  }
  if (!f) throw IoError("short write: " + path);
}

} // namespace dualcodec
