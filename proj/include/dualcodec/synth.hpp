#pragma once
// Deterministic synthetic training material: sines, chirps, chords, noise
// bursts, and plucks, written out as a small WAV corpus.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "dualcodec/common.hpp"
#include "dualcodec/wav.hpp"

namespace dualcodec {

// one clip; `variant` selects the family, rng supplies its parameters
template <class T = float>
WaveformBuffer<T> synth_clip(int sample_rate, int channels, double seconds,
                             int variant, Rng& rng) {
  if (sample_rate < 1) throw ConfigError("synth: sample_rate must be positive");
  if (channels < 1 || channels > 2)
    throw ConfigError("synth: channels must be 1 or 2");
  if (!(seconds > 0)) throw ConfigError("synth: duration must be positive");
  const int64_t n = int64_t(seconds * sample_rate);
  if (n < 1) throw ConfigError("synth: duration shorter than one sample");

  const double pi = 3.14159265358979323846;
  const double f_lo = 80.0, f_hi = 0.30 * sample_rate;
  const double f0 = rng.uniform(f_lo, f_hi);
  const double f1 = rng.uniform(f_lo, f_hi);
  const double amp = rng.uniform(0.25, 0.55);
  const double detune = 1.0 + 0.003 * rng.uniform(-1.0, 1.0);
  const double burst_hz = rng.uniform(2.0, 6.0);
  const double decay = rng.uniform(1.5, 5.0);
  // per-sample noise is drawn once and shared across channels
  std::vector<double> noise;
  if (variant % 5 == 3) {
    noise.resize(size_t(n));
    for (auto& v : noise) v = rng.normal();
  }

  WaveformBuffer<T> w;
  w.sample_rate = sample_rate;
  w.samples.assign(size_t(channels), std::vector<T>(size_t(n)));
  for (int c = 0; c < channels; ++c) {
    const double fc0 = f0 * (c == 0 ? 1.0 : detune);
    const double fc1 = f1 * (c == 0 ? 1.0 : detune);
    for (int64_t i = 0; i < n; ++i) {
      const double t = double(i) / sample_rate;
      double v = 0.0;
      switch (variant % 5) {
        case 0:  // steady sine
          v = std::sin(2 * pi * fc0 * t);
          break;
        case 1:  // linear chirp f0 -> f1
          v = std::sin(2 * pi * (fc0 * t + 0.5 * (fc1 - fc0) * t * t / seconds));
          break;
        case 2:  // two-tone chord
          v = 0.6 * std::sin(2 * pi * fc0 * t) +
              0.4 * std::sin(2 * pi * fc1 * t);
          break;
        case 3: {  // noise bursts under a raised-cosine envelope train
          const double phase = t * burst_hz - std::floor(t * burst_hz);
          const double env = 0.5 * (1.0 - std::cos(2 * pi * phase));
          v = 0.5 * noise[size_t(i)] * env * env;
          break;
        }
        case 4: {  // repeating decaying pluck
          const double period = 1.0 / burst_hz;
          const double tau = t - period * std::floor(t / period);
          v = std::exp(-decay * tau / period) * std::sin(2 * pi * fc0 * tau);
          break;
        }
      }
      w.samples[size_t(c)][size_t(i)] = T(amp * v);
    }
  }
  return w;
}

// writes `count` clips cycling through the variants as clip_000.wav ...
inline std::vector<std::string> write_corpus(const std::string& dir,
                                             int sample_rate, int channels,
                                             double seconds, int count,
                                             uint64_t seed) {
  if (count < 1) throw ConfigError("synth: corpus count must be positive");
  std::filesystem::create_directories(dir);
  Rng root(seed);
  std::vector<std::string> paths;
  for (int i = 0; i < count; ++i) {
    Rng rng = root.derive(uint64_t(i) + 1);
    WaveformBuffer<float> w =
        synth_clip<float>(sample_rate, channels, seconds, i, rng);
    char name[32];
    std::snprintf(name, sizeof(name), "clip_%03d.wav", i);
    std::string path = (std::filesystem::path(dir) / name).string();
    write_wav(path, w);
    paths.push_back(std::move(path));
  }
  return paths;
}

}  // namespace dualcodec
