#pragma once
// end-to-end audio pipelines: chunk encoding into summary latents or packed
// tokens, chunk-by-chunk autoregressive decoding, and shifting-pair parallel
// decoding under a decreasing conditioning-noise schedule

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dualcodec/bridge.hpp"
#include "dualcodec/config.hpp"
#include "dualcodec/fsq.hpp"
#include "dualcodec/net.hpp"
#include "dualcodec/signal.hpp"
#include "dualcodec/wav.hpp"

namespace dualcodec {

// ------------------------------------------------------------- schedules

// open pair slot, decoded against zeroed summary embeddings and discarded
inline constexpr int64_t kPad = -1;

struct PairSchedule {
  // steps[s] lists (left, right) chunk indices; kPad marks the open slot
  std::vector<std::vector<std::pair<int64_t, int64_t>>> steps;
};

inline PairSchedule pair_schedule(int64_t t_chunks, int64_t s_steps) {
  if (t_chunks < 1)
    throw ConfigError("pair_schedule needs at least one chunk, got " +
                      std::to_string(t_chunks));
  if (s_steps < 1)
    throw ConfigError("pair_schedule needs at least one step, got " +
                      std::to_string(s_steps));
  PairSchedule ps;
  ps.steps.reserve(size_t(s_steps));
  for (int64_t s = 1; s <= s_steps; ++s) {
    std::vector<std::pair<int64_t, int64_t>> row;
    if (s % 2 == 1) {
      for (int64_t i = 0; i < t_chunks; i += 2)
        row.emplace_back(i, i + 1 < t_chunks ? i + 1 : kPad);
    } else {
      // shifted by one: the leftmost chunk faces the pad slot
      row.emplace_back(kPad, int64_t{0});
      for (int64_t i = 1; i < t_chunks; i += 2)
        row.emplace_back(i, i + 1 < t_chunks ? i + 1 : kPad);
    }
    ps.steps.push_back(std::move(row));
  }
  return ps;
}

struct CondNoiseSchedule {
  std::vector<double> sigma;  // strictly decreasing, sigma.front() = sigma_max
};

inline CondNoiseSchedule cond_noise_schedule(int64_t s_steps, double sigma_max,
                                             double sigma_end) {
  if (s_steps < 1)
    throw ConfigError("conditioning schedule needs at least one step, got " +
                      std::to_string(s_steps));
  if (!(sigma_end > 0) || !(sigma_max > sigma_end))
    throw ConfigError("conditioning schedule needs sigma_max > sigma_end > 0, got " +
                      std::to_string(sigma_max) + " and " +
                      std::to_string(sigma_end));
  CondNoiseSchedule cs;
  cs.sigma.resize(size_t(s_steps));
  if (s_steps == 1) {
    cs.sigma[0] = sigma_max;
    return cs;
  }
  for (int64_t s = 1; s <= s_steps; ++s)
    cs.sigma[size_t(s - 1)] =
        sigma_max + (sigma_end - sigma_max) * double(s - 1) / double(s_steps - 1);
  return cs;
}

// ------------------------------------------------------- encoded sequence

enum class PayloadMode { continuous, discrete };

template <class T = float>
struct EncodedSequence {
  PayloadMode mode = PayloadMode::continuous;
  std::vector<LatentSet<T>> latents;  // continuous payload, tanh-bounded
  std::vector<TokenChunk> tokens;     // discrete payload, packed indices
  int64_t n_samples = 0;              // original waveform length
  Profile profile;

  int64_t t_chunks() const {
    return mode == PayloadMode::discrete ? int64_t(tokens.size())
                                         : int64_t(latents.size());
  }
  // frame count of the original analysis, from which decode trims padding
  int64_t n_frames() const {
    return (n_samples - profile.window) / profile.hop() + 1;
  }
};

namespace codetail {

template <class T>
void check_sequence(const EncodedSequence<T>& seq) {
  const bool discrete = seq.mode == PayloadMode::discrete;
  if (discrete ? !seq.latents.empty() : !seq.tokens.empty())
    throw DataError("encoded sequence carries both payload kinds");
  const int64_t t = seq.t_chunks();
  if (t < 1) throw DataError("encoded sequence is empty");
  if (seq.n_samples < seq.profile.window)
    throw DataError("encoded sequence shorter than one analysis window");
  const int64_t frames = seq.n_frames();
  const int64_t tc = seq.profile.model.t_chunk;
  if ((frames + tc - 1) / tc != t)
    throw DataError("chunk count " + std::to_string(t) +
                    " does not match " + std::to_string(frames) + " frames");
}

// latent rows for the given slots stacked into [N, K, d_lat]; pad slots zero
template <class T>
Tensor<T> stack_latents(const EncodedSequence<T>& seq,
                        const std::vector<int64_t>& slots) {
  const int64_t k = seq.profile.model.k_summary;
  const int64_t d = seq.profile.model.d_lat;
  Tensor<T> out = Tensor<T>::zeros({int64_t(slots.size()), k, d});
  for (size_t i = 0; i < slots.size(); ++i) {
    if (slots[i] == kPad) continue;
    Tensor<T> v = seq.mode == PayloadMode::discrete
                      ? indices_to_levels<T>(seq.tokens[size_t(slots[i])],
                                             seq.profile.fsq)
                            .values
                      : seq.latents[size_t(slots[i])].values;
    if (v.dim(0) != k || v.dim(1) != d)
      throw ShapeError("latent chunk " + shape_str(v.shape()) +
                       " does not match profile [" + std::to_string(k) + "x" +
                       std::to_string(d) + "]");
    std::copy_n(v.data(), size_t(k * d), out.data() + int64_t(i) * k * d);
  }
  return out;
}

// one row of a [N, C, F, Tc] batch as a transformed spectrogram chunk
template <class T>
ComplexSpectrogram<T> chunk_to_spec(const Tensor<T>& batch, int64_t row,
                                    const Profile& prof) {
  ComplexSpectrogram<T> s;
  s.channels_c = prof.model.in_channels;
  s.freq_bins = prof.model.freq_bins;
  s.frames = prof.model.t_chunk;
  s.window_size = prof.window;
  s.hop_size = prof.hop();
  s.sample_rate = prof.sample_rate;
  s.transformed = true;
  const int64_t n = int64_t(s.channels_c) * s.freq_bins * s.frames;
  s.data.resize(size_t(n));
  std::copy_n(batch.data() + row * n, size_t(n), s.data.begin());
  return s;
}

// inverse-transform the decoded chunks and restore the original length
template <class T>
WaveformBuffer<T> assemble_wave(const std::vector<ComplexSpectrogram<T>>& chunks,
                                const EncodedSequence<T>& seq) {
  ComplexSpectrogram<T> joined = unchunk(chunks, int(seq.n_frames()));
  ComplexSpectrogram<T> lin = amp_inverse(joined, seq.profile.amp);
  WaveformBuffer<T> w = istft(lin);
  // analysis drops the tail shorter than one window; pad it back silent
  for (auto& ch : w.samples) ch.resize(size_t(seq.n_samples), T(0));
  return w;
}

}  // namespace codetail

// ---------------------------------------------------------------- encode

template <class T>
EncodedSequence<T> encode_sequence(const WaveformBuffer<T>& wave,
                                   const Model<T>& model, const Profile& prof,
                                   PayloadMode mode) {
  wave.validate();
  if (wave.sample_rate != prof.sample_rate)
    throw DataError("waveform sample rate " + std::to_string(wave.sample_rate) +
                    " does not match profile rate " +
                    std::to_string(prof.sample_rate));
  if (int(wave.channels()) != prof.audio_channels)
    throw DataError("waveform has " + std::to_string(wave.channels()) +
                    " channels, profile expects " +
                    std::to_string(prof.audio_channels));

  ComplexSpectrogram<T> spec = stft(wave, prof.window, prof.hop());
  ComplexSpectrogram<T> amp = amp_transform(spec, prof.amp);
  std::vector<ComplexSpectrogram<T>> chunks = chunk(amp, prof.model.t_chunk);
  Tensor<T> z = model.encode(stack_chunks(chunks));
  Tensor<T> bounded = tanh(z);

  EncodedSequence<T> seq;
  seq.mode = mode;
  seq.n_samples = int64_t(wave.n_samples());
  seq.profile = prof;
  const int64_t n = bounded.dim(0);
  const int64_t kd = bounded.dim(1) * bounded.dim(2);
  for (int64_t i = 0; i < n; ++i) {
    Tensor<T> v = Tensor<T>::zeros({bounded.dim(1), bounded.dim(2)});
    std::copy_n(bounded.data() + i * kd, size_t(kd), v.data());
    if (mode == PayloadMode::continuous) {
      seq.latents.push_back({v, false});
    } else {
      LatentSet<T> q{quantize_bounded(v, prof.fsq), true};
      seq.tokens.push_back(levels_to_indices(q, prof.fsq));
    }
  }
  return seq;
}

// ---------------------------------------------------------------- decode

template <class T>
struct DecodeResult {
  WaveformBuffer<T> wave;
  int64_t pair_calls = 0;         // decoder pair evaluations issued
  int64_t peak_tensor_bytes = 0;  // live-tensor high-water mark while decoding
};

// chunk t decoded in the right slot from pure noise, conditioned on the
// previously decoded chunk sitting clean at sigma_min in the left slot;
// per chunk the sigma ladder runs geometrically from sigma_max to sigma_min
template <class T>
DecodeResult<T> decode_autoregressive(const EncodedSequence<T>& seq,
                                      const Model<T>& model,
                                      int64_t denoise_steps, uint64_t seed) {
  codetail::check_sequence(seq);
  if (denoise_steps < 1)
    throw ConfigError("autoregressive decoding needs at least one step, got " +
                      std::to_string(denoise_steps));
  const Profile& prof = seq.profile;
  const EdmCoefficients& edm = prof.model.edm;
  std::vector<double> ladder(size_t(denoise_steps), edm.sigma_max);
  for (int64_t j = 1; j < denoise_steps; ++j)
    ladder[size_t(j)] =
        std::exp(std::log(edm.sigma_max) +
                 (std::log(edm.sigma_min) - std::log(edm.sigma_max)) *
                     double(j) / double(denoise_steps - 1));

  memstat::reset_peak();
  const int64_t t_total = seq.t_chunks();
  const Shape chunk_shape{1, prof.model.in_channels, prof.model.freq_bins,
                          prof.model.t_chunk};
  Rng root(seed);
  std::vector<ComplexSpectrogram<T>> out;
  out.reserve(size_t(t_total));

  // the first chunk sees a zeroed left context: silent input, pad embeddings
  std::vector<Tensor<T>> cc_left = model.upsample(
      codetail::stack_latents(seq, {kPad}));
  Tensor<T> left_clean = Tensor<T>::zeros(chunk_shape);
  int64_t calls = 0;
  for (int64_t t = 0; t < t_total; ++t) {
    Rng rng = root.derive(uint64_t(t) + 1);
    std::vector<Tensor<T>> cc_right =
        model.upsample(codetail::stack_latents(seq, {t}));
    Tensor<T> x0;
    for (int64_t j = 0; j < denoise_steps; ++j) {
      Tensor<T> eps = Tensor<T>::randn(chunk_shape, rng);
      Tensor<T> noisy = j == 0 ? mul_scalar(eps, T(ladder[0]))
                               : add(x0, mul_scalar(eps, T(ladder[size_t(j)])));
      auto [l, r] = model.decode_denoise(left_clean, noisy, {edm.sigma_min},
                                         {ladder[size_t(j)]}, cc_left, cc_right);
      x0 = r;
      ++calls;
    }
    out.push_back(codetail::chunk_to_spec(x0, 0, prof));
    left_clean = x0;            // clean context for the next chunk
    cc_left = std::move(cc_right);
  }

  DecodeResult<T> res;
  res.wave = codetail::assemble_wave(out, seq);
  res.pair_calls = calls;
  res.peak_tensor_bytes = memstat::peak_bytes.load();
  return res;
}

// all pairs of a step denoised in one batched call; between steps the decoded
// chunks are re-noised at the conditioning level and re-paired one position
// over, so context spreads across chunk boundaries without sequential passes
template <class T>
DecodeResult<T> decode_parallel(const EncodedSequence<T>& seq,
                                const Model<T>& model, int64_t s_steps,
                                uint64_t seed, double sigma_end = -1.0) {
  codetail::check_sequence(seq);
  if (s_steps < 1)
    throw ConfigError("parallel decoding needs at least one step, got " +
                      std::to_string(s_steps));
  const Profile& prof = seq.profile;
  const EdmCoefficients& edm = prof.model.edm;
  if (sigma_end < 0) sigma_end = edm.sigma_min;
  const int64_t t_total = seq.t_chunks();
  const PairSchedule sched = pair_schedule(t_total, s_steps);
  const CondNoiseSchedule noise =
      cond_noise_schedule(s_steps, edm.sigma_max, sigma_end);

  memstat::reset_peak();
  const int64_t c = prof.model.in_channels;
  const int64_t f = prof.model.freq_bins;
  const int64_t tc = prof.model.t_chunk;
  const int64_t plane = c * f * tc;
  Rng root(seed);
  Tensor<T> state = Tensor<T>::zeros({t_total, c, f, tc});
  int64_t calls = 0;

  for (size_t s = 0; s < sched.steps.size(); ++s) {
    const auto& row = sched.steps[s];
    const T sg = T(noise.sigma[s]);
    Rng rng = root.derive(uint64_t(s) + 1);
    const int64_t p = int64_t(row.size());

    std::vector<int64_t> lslots(size_t(p)), rslots(size_t(p));
    Tensor<T> lx = Tensor<T>::zeros({p, c, f, tc});
    Tensor<T> rx = Tensor<T>::zeros({p, c, f, tc});
    // pad slots re-noise from silence; real slots from their current state
    auto fill = [&](Tensor<T>& dst, int64_t i, int64_t slot) {
      T* d = dst.data() + i * plane;
      const T* base = slot == kPad ? nullptr : state.data() + slot * plane;
      for (int64_t e = 0; e < plane; ++e)
        d[e] = (base ? base[e] : T(0)) + sg * T(rng.normal());
    };
    for (int64_t i = 0; i < p; ++i) {
      lslots[size_t(i)] = row[size_t(i)].first;
      rslots[size_t(i)] = row[size_t(i)].second;
      fill(lx, i, lslots[size_t(i)]);
      fill(rx, i, rslots[size_t(i)]);
    }

    std::vector<Tensor<T>> cc_l =
        model.upsample(codetail::stack_latents(seq, lslots));
    std::vector<Tensor<T>> cc_r =
        model.upsample(codetail::stack_latents(seq, rslots));
    const std::vector<double> sig(size_t(p), noise.sigma[s]);
    auto [lo, ro] = model.decode_denoise(lx, rx, sig, sig, cc_l, cc_r);
    calls += p;

    for (int64_t i = 0; i < p; ++i) {
      if (lslots[size_t(i)] != kPad)
        std::copy_n(lo.data() + i * plane, size_t(plane),
                    state.data() + lslots[size_t(i)] * plane);
      if (rslots[size_t(i)] != kPad)
        std::copy_n(ro.data() + i * plane, size_t(plane),
                    state.data() + rslots[size_t(i)] * plane);
    }
  }

  std::vector<ComplexSpectrogram<T>> out;
  out.reserve(size_t(t_total));
  for (int64_t t = 0; t < t_total; ++t)
    out.push_back(codetail::chunk_to_spec(state, t, prof));

  DecodeResult<T> res;
  res.wave = codetail::assemble_wave(out, seq);
  res.pair_calls = calls;
  res.peak_tensor_bytes = memstat::peak_bytes.load();
  return res;
}

// continuous-payload entry point: feeds tanh-bounded latents straight to the
// upsampler with no rounding anywhere on the path
template <class T>
DecodeResult<T> decode_latents_direct(const EncodedSequence<T>& seq,
                                      const Model<T>& model, int64_t s_steps,
                                      uint64_t seed) {
  if (seq.mode != PayloadMode::continuous)
    throw UsageError("direct latent decoding requires a continuous payload");
  return decode_parallel(seq, model, s_steps, seed);
}

}  // namespace dualcodec
