// Finite scalar quantization: tanh-bounded latents rounded onto a fixed grid,
// FSQ-dropout for training, and base-(2n+1) token index packing.
#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dualcodec/ops.hpp"

namespace dualcodec {

struct FsqConfig {
  int n = 5;               // levels per dimension = 2n+1
  int d = 4;               // dimensions per embedding
  double dropout_p = 0.75; // per-chunk probability of bypassing the rounding
};

// checked (2n+1)^d
inline uint64_t codebook_size(const FsqConfig& cfg) {
  if (cfg.n < 1) throw ConfigError("fsq n must be >= 1, got " + std::to_string(cfg.n));
  if (cfg.d < 1) throw ConfigError("fsq d must be >= 1, got " + std::to_string(cfg.d));
  const uint64_t base = uint64_t(2 * cfg.n + 1);
  uint64_t size = 1;
  for (int i = 0; i < cfg.d; ++i) {
    if (size > std::numeric_limits<uint64_t>::max() / base)
      throw ConfigError("fsq codebook (2*" + std::to_string(cfg.n) + "+1)^" +
                        std::to_string(cfg.d) + " overflows u64");
    size *= base;
  }
  return size;
}

inline void validate(const FsqConfig& cfg) {
  codebook_size(cfg);
  if (!(cfg.dropout_p >= 0.0 && cfg.dropout_p <= 1.0))
    throw ConfigError("fsq dropout_p must lie in [0,1], got " +
                      std::to_string(cfg.dropout_p));
}

// K summary embeddings of one chunk, tanh-bounded; grid-aligned iff quantized
template <class T>
struct LatentSet {
  Tensor<T> values;  // [K, d_lat], entries in [-1, 1]
  bool quantized = false;

  int64_t k() const { return values.dim(0); }
  int64_t d_lat() const { return values.dim(1); }
};

struct TokenChunk {
  std::vector<uint64_t> indices;  // [K], each < codebook_size
};

// rounding half of the quantizer: round(n*x)/n with a straight-through
// gradient; input must already be tanh-bounded. Idempotent on its output.
template <class T>
Tensor<T> quantize_bounded(const Tensor<T>& x, const FsqConfig& cfg) {
  return ste_round(x, cfg.n);
}

// elementwise round(n*tanh(z))/n, any shape, differentiable
template <class T>
Tensor<T> quantize_values(const Tensor<T>& z, const FsqConfig& cfg) {
  return quantize_bounded(tanh(z), cfg);
}

template <class T>
LatentSet<T> quantize(const Tensor<T>& z, const FsqConfig& cfg) {
  validate(cfg);
  return {quantize_values(z, cfg), true};
}

// one Bernoulli draw for the whole chunk: either the rounding step is
// bypassed (continuous tanh output) or standard quantization applies
template <class T>
LatentSet<T> fsq_dropout(const Tensor<T>& z, const FsqConfig& cfg, Rng& rng,
                         bool training) {
  validate(cfg);
  if (!training)
    throw StateError("fsq_dropout applies during training only; "
                     "call quantize or tanh explicitly at inference");
  if (rng.bernoulli(cfg.dropout_p)) return {tanh(z), false};
  return {quantize_values(z, cfg), true};
}

template <class T>
TokenChunk levels_to_indices(const LatentSet<T>& lat, const FsqConfig& cfg) {
  validate(cfg);
  if (!lat.quantized)
    throw StateError("token packing requires quantized latents");
  if (lat.values.rank() != 2 || lat.values.dim(1) != cfg.d)
    throw ShapeError("latents " + shape_str(lat.values.shape()) +
                     " do not pack with d=" + std::to_string(cfg.d));
  const uint64_t base = uint64_t(2 * cfg.n + 1);
  const int64_t k = lat.values.dim(0);
  const T* v = lat.values.data();
  TokenChunk tok;
  tok.indices.resize(size_t(k));
  for (int64_t e = 0; e < k; ++e) {
    uint64_t index = 0;
    uint64_t place = 1;
    for (int i = 0; i < cfg.d; ++i) {
      const double val = double(v[e * cfg.d + i]);
      const double level = std::round(val * cfg.n);
      if (std::abs(val - level / cfg.n) > 1e-6)
        throw DataError("off-grid latent value " + std::to_string(val) +
                        " at embedding " + std::to_string(e));
      const long digit = long(level) + cfg.n;
      if (digit < 0 || digit > 2 * cfg.n)
        throw DataError("latent value " + std::to_string(val) +
                        " outside [-1, 1] at embedding " + std::to_string(e));
      index += uint64_t(digit) * place;
      place *= base;
    }
    tok.indices[size_t(e)] = index;
  }
  return tok;
}

template <class T>
LatentSet<T> indices_to_levels(const TokenChunk& tok, const FsqConfig& cfg) {
  const uint64_t size = codebook_size(cfg);
  validate(cfg);
  const int64_t k = int64_t(tok.indices.size());
  Tensor<T> values = Tensor<T>::zeros({k, cfg.d});
  const uint64_t base = uint64_t(2 * cfg.n + 1);
  T* v = values.data();
  for (int64_t e = 0; e < k; ++e) {
    uint64_t index = tok.indices[size_t(e)];
    if (index >= size)
      throw DataError("token index " + std::to_string(index) +
                      " exceeds codebook size " + std::to_string(size));
    for (int i = 0; i < cfg.d; ++i) {
      const long digit = long(index % base);
      index /= base;
      v[e * cfg.d + i] = T(digit - cfg.n) / T(cfg.n);
    }
  }
  return {values, true};
}

// raw token rate: k embeddings/chunk, log2(levels^d) bits each
inline double bitrate(double levels_per_dim, int d, int64_t k,
                      double chunk_seconds) {
  if (!(chunk_seconds > 0))
    throw ConfigError("chunk duration must be positive, got " +
                      std::to_string(chunk_seconds));
  return double(k) * double(d) * std::log2(levels_per_dim) / chunk_seconds;
}

inline double bitrate(const FsqConfig& cfg, int64_t k, double chunk_seconds) {
  validate(cfg);
  return bitrate(2.0 * cfg.n + 1.0, cfg.d, k, chunk_seconds);
}

}  // namespace dualcodec
