// Shared test utilities: signal generators and independent numeric oracles.
#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "dualcodec/common.hpp"
#include "dualcodec/wav.hpp"

namespace testutil {

inline dualcodec::WaveformBuffer<double> sine_wave(double freq, double amp, int sr, int n,
                                                   int channels = 1) {
  dualcodec::WaveformBuffer<double> w;
  w.sample_rate = sr;
  w.samples.assign(channels, std::vector<double>(n));
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < n; ++i)
      w.samples[c][i] = amp * std::sin(2.0 * M_PI * freq * i / sr);
  return w;
}

inline dualcodec::WaveformBuffer<double> noise_wave(int sr, int n, int channels, uint64_t seed) {
  dualcodec::Rng rng(seed);
  dualcodec::WaveformBuffer<double> w;
  w.sample_rate = sr;
  w.samples.assign(channels, std::vector<double>(n));
  for (int c = 0; c < channels; ++c)
    for (int i = 0; i < n; ++i) w.samples[c][i] = rng.uniform(-0.5, 0.5);
  return w;
}

inline double rms(const std::vector<double>& x) {
  double s = 0.0;
  for (double v : x) s += v * v;
  return std::sqrt(s / double(x.size()));
}

// Direct O(N^2) DFT of a windowed frame; the independent oracle for the FFT
// path inside stft().
inline std::vector<std::complex<double>> naive_windowed_dft(const std::vector<double>& frame,
                                                            const std::vector<double>& window) {
  const int n = static_cast<int>(frame.size());
  std::vector<std::complex<double>> out(n);
  for (int k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (int i = 0; i < n; ++i) {
      const double ang = -2.0 * M_PI * double(k) * double(i) / double(n);
      acc += frame[i] * window[i] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

inline std::vector<double> hann_window(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / n));
  return w;
}

} // namespace testutil
