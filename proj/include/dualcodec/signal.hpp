// Waveform <-> complex-spectrogram conversion, amplitude compression, and
// chunking into fixed-length frame blocks.
//
// Layout: a spectrogram holds C = 2 * channels data planes, where audio
// channel c occupies planes 2c (real) and 2c+1 (imaginary), each F x T
// row-major with frequency as the slow axis. The Nyquist bin is dropped so
// F = window/2 stays divisible by the model's frequency downsampling; it is
// restored as zero on inversion.
#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstdint>
#include <vector>

#include "dualcodec/common.hpp"
#include "dualcodec/wav.hpp"

namespace dualcodec {

template <class T = float>
struct ComplexSpectrogram {
  std::vector<T> data;   // [C][F][T] row-major
  int channels_c = 0;    // C = 2 * audio channels
  int freq_bins = 0;     // F
  int frames = 0;        // T
  int window_size = 0;
  int hop_size = 0;
  int sample_rate = 0;
  bool transformed = false;

  int64_t plane() const { return int64_t(freq_bins) * frames; }
  T& at(int c, int f, int t) { return data[(int64_t(c) * freq_bins + f) * frames + t]; }
  const T& at(int c, int f, int t) const { return data[(int64_t(c) * freq_bins + f) * frames + t]; }
};

struct TransformParams {
  double alpha = 0.65;
  double beta = 0.34;

  void validate() const {
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("amp transform: alpha must be in (0, 1]");
    if (!(beta > 0.0)) throw ConfigError("amp transform: beta must be positive");
  }
};

namespace fftdetail {

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// In-place iterative radix-2 FFT. inverse=true applies conjugate transform
// and 1/n scaling.
inline void fft(std::vector<std::complex<double>>& a, bool inverse) {
  const size_t n = a.size();
  if (n < 2) return;
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * M_PI / double(len) * (inverse ? 1.0 : -1.0);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse) {
    for (auto& x : a) x /= double(n);
  }
}

// Periodic Hann window.
inline std::vector<double> hann(int n) {
  std::vector<double> w(n);
  for (int i = 0; i < n; ++i) w[i] = 0.5 * (1.0 - std::cos(2.0 * M_PI * i / n));
  return w;
}

} // namespace fftdetail

// STFT with Hann analysis window. Frames are scaled by 2 / sum(window) so a
// unit-amplitude sinusoid lands near unit magnitude at its bin.
template <class T>
ComplexSpectrogram<T> stft(const WaveformBuffer<T>& wave, int window, int hop) {
  if (!fftdetail::is_pow2(window) || !fftdetail::is_pow2(hop))
    throw ConfigError("stft: window and hop must be powers of two");
  if (window != 2 * hop) throw ConfigError("stft: window must equal 2 * hop");
  const int64_t n = wave.n_samples();
  if (n < window) throw LengthError("stft: signal shorter than one window");

  const int channels = wave.channels();
  const int frames = static_cast<int>((n - window) / hop) + 1;
  const int bins = window / 2; // Nyquist dropped

  ComplexSpectrogram<T> spec;
  spec.channels_c = 2 * channels;
  spec.freq_bins = bins;
  spec.frames = frames;
  spec.window_size = window;
  spec.hop_size = hop;
  spec.sample_rate = wave.sample_rate;
  spec.data.assign(int64_t(spec.channels_c) * bins * frames, T(0));

  const auto win = fftdetail::hann(window);
  double wsum = 0.0;
  for (double w : win) wsum += w;
  const double scale = 2.0 / wsum;

  std::vector<std::complex<double>> buf(window);
  for (int c = 0; c < channels; ++c) {
    const auto& x = wave.samples[c];
    for (int t = 0; t < frames; ++t) {
      const int64_t off = int64_t(t) * hop;
      for (int i = 0; i < window; ++i)
        buf[i] = std::complex<double>(double(x[off + i]) * win[i], 0.0);
      fftdetail::fft(buf, false);
      for (int f = 0; f < bins; ++f) {
        spec.at(2 * c, f, t) = static_cast<T>(buf[f].real() * scale);
        spec.at(2 * c + 1, f, t) = static_cast<T>(buf[f].imag() * scale);
      }
    }
  }
  return spec;
}

// Inverse STFT: Hann synthesis window and overlap-add, normalized by the
// accumulated squared window. Interior samples reconstruct within 1e-4
// relative error; the first and last half-window are edge-attenuated.
template <class T>
WaveformBuffer<T> istft(const ComplexSpectrogram<T>& spec) {
  if (spec.transformed)
    throw StateError("istft: spectrogram is amplitude-transformed, inverse-transform first");
  if (spec.channels_c % 2 != 0) throw ShapeError("istft: odd channel count");

  const int window = spec.window_size;
  const int hop = spec.hop_size;
  const int frames = spec.frames;
  const int bins = spec.freq_bins;
  const int channels = spec.channels_c / 2;
  const int64_t n_out = int64_t(window) + int64_t(hop) * (frames - 1);

  const auto win = fftdetail::hann(window);
  double wsum = 0.0;
  for (double w : win) wsum += w;
  const double unscale = wsum / 2.0;

  WaveformBuffer<T> wave;
  wave.sample_rate = spec.sample_rate;
  wave.samples.assign(channels, std::vector<T>(n_out));

  std::vector<double> den(n_out, 0.0);
  for (int t = 0; t < frames; ++t) {
    const int64_t off = int64_t(t) * hop;
    for (int i = 0; i < window; ++i) den[off + i] += win[i] * win[i];
  }

  std::vector<std::complex<double>> buf(window);
  std::vector<double> acc(n_out);
  for (int c = 0; c < channels; ++c) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (int t = 0; t < frames; ++t) {
      for (int f = 0; f < bins; ++f)
        buf[f] = std::complex<double>(spec.at(2 * c, f, t), spec.at(2 * c + 1, f, t)) * unscale;
      buf[bins] = {0.0, 0.0}; // Nyquist restored as zero
      for (int f = bins + 1; f < window; ++f) buf[f] = std::conj(buf[window - f]);
      fftdetail::fft(buf, true);
      const int64_t off = int64_t(t) * hop;
      for (int i = 0; i < window; ++i) acc[off + i] += buf[i].real() * win[i];
    }
    auto& out = wave.samples[c];
    for (int64_t i = 0; i < n_out; ++i)
      out[i] = den[i] > 1e-12 ? static_cast<T>(acc[i] / den[i]) : T(0);
  }
  return wave;
}

// Per-bin magnitude compression: |c| -> beta * |c|^alpha, phase preserved.
template <class T>
ComplexSpectrogram<T> amp_transform(const ComplexSpectrogram<T>& spec, const TransformParams& params) {
  params.validate();
  if (spec.transformed) throw StateError("amp_transform: spectrogram already transformed");

  ComplexSpectrogram<T> out = spec;
  out.transformed = true;
  const int64_t plane = spec.plane();
  for (int c = 0; c < spec.channels_c; c += 2) {
    T* re = out.data.data() + int64_t(c) * plane;
    T* im = out.data.data() + int64_t(c + 1) * plane;
    for (int64_t i = 0; i < plane; ++i) {
      const double r = re[i], m = im[i];
      const double mag = std::hypot(r, m);
      if (mag == 0.0) continue;
      const double k = params.beta * std::pow(mag, params.alpha) / mag;
      re[i] = static_cast<T>(r * k);
      im[i] = static_cast<T>(m * k);
    }
  }
  return out;
}

// Inverse of amp_transform: |c| -> (|c| / beta)^(1/alpha), phase preserved.
template <class T>
ComplexSpectrogram<T> amp_inverse(const ComplexSpectrogram<T>& spec, const TransformParams& params) {
  params.validate();
  if (!spec.transformed) throw StateError("amp_inverse: spectrogram is not transformed");

  ComplexSpectrogram<T> out = spec;
  out.transformed = false;
  const int64_t plane = spec.plane();
  for (int c = 0; c < spec.channels_c; c += 2) {
    T* re = out.data.data() + int64_t(c) * plane;
    T* im = out.data.data() + int64_t(c + 1) * plane;
    for (int64_t i = 0; i < plane; ++i) {
      const double r = re[i], m = im[i];
      const double mag = std::hypot(r, m);
      if (mag == 0.0) continue;
      const double k = std::pow(mag / params.beta, 1.0 / params.alpha) / mag;
      re[i] = static_cast<T>(r * k);
      im[i] = static_cast<T>(m * k);
    }
  }
  return out;
}

// Splits along time into ceil(T / t_chunk) blocks of exactly t_chunk frames;
// the last block is zero-padded.
template <class T>
std::vector<ComplexSpectrogram<T>> chunk(const ComplexSpectrogram<T>& spec, int t_chunk) {
  if (t_chunk <= 0) throw ConfigError("chunk: t_chunk must be positive");
  if (!spec.transformed) throw StateError("chunk: expected an amplitude-transformed spectrogram");

  const int n_chunks = (spec.frames + t_chunk - 1) / t_chunk;
  std::vector<ComplexSpectrogram<T>> out;
  out.reserve(n_chunks);
  for (int k = 0; k < n_chunks; ++k) {
    ComplexSpectrogram<T> ck;
    ck.channels_c = spec.channels_c;
    ck.freq_bins = spec.freq_bins;
    ck.frames = t_chunk;
    ck.window_size = spec.window_size;
    ck.hop_size = spec.hop_size;
    ck.sample_rate = spec.sample_rate;
    ck.transformed = spec.transformed;
    ck.data.assign(int64_t(spec.channels_c) * spec.freq_bins * t_chunk, T(0));
    const int t0 = k * t_chunk;
    const int tn = std::min(t_chunk, spec.frames - t0);
    for (int c = 0; c < spec.channels_c; ++c)
      for (int f = 0; f < spec.freq_bins; ++f)
        for (int t = 0; t < tn; ++t) ck.at(c, f, t) = spec.at(c, f, t0 + t);
    out.push_back(std::move(ck));
  }
  return out;
}

// Reassembles chunks into one spectrogram of n_frames frames (dropping the
// final chunk's padding). Inverse of chunk().
template <class T>
ComplexSpectrogram<T> unchunk(const std::vector<ComplexSpectrogram<T>>& chunks, int n_frames) {
  if (chunks.empty()) throw ShapeError("unchunk: no chunks");
  const auto& c0 = chunks.front();
  ComplexSpectrogram<T> out;
  out.channels_c = c0.channels_c;
  out.freq_bins = c0.freq_bins;
  out.frames = n_frames;
  out.window_size = c0.window_size;
  out.hop_size = c0.hop_size;
  out.sample_rate = c0.sample_rate;
  out.transformed = c0.transformed;
  out.data.assign(int64_t(out.channels_c) * out.freq_bins * n_frames, T(0));
  const int t_chunk = c0.frames;
  for (size_t k = 0; k < chunks.size(); ++k) {
    const auto& ck = chunks[k];
    if (ck.channels_c != c0.channels_c || ck.freq_bins != c0.freq_bins || ck.frames != t_chunk)
      throw ShapeError("unchunk: inconsistent chunk shapes");
    const int t0 = static_cast<int>(k) * t_chunk;
    const int tn = std::min(t_chunk, n_frames - t0);
    for (int c = 0; c < out.channels_c; ++c)
      for (int f = 0; f < out.freq_bins; ++f)
        for (int t = 0; t < tn; ++t) out.at(c, f, t0 + t) = ck.at(c, f, t);
  }
  return out;
}

} // namespace dualcodec
