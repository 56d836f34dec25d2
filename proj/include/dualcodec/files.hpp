#pragma once
// token-stream (DCTK) and continuous-latent (DCLT) file formats; both carry
// the numeric profile block and the source sample count so decoding restores
// the exact original duration

#include <bit>
#include <cstdint>
#include <string>
#include <vector>

#include "dualcodec/checkpoint.hpp"
#include "dualcodec/codec.hpp"
#include "dualcodec/config.hpp"

namespace dualcodec {

inline constexpr uint32_t kPayloadVersion = 1;

namespace detail {

inline void put_profile(std::string& buf, const Profile& prof) {
  const std::vector<float> meta = profile_meta(prof);
  put_bytes(buf, uint64_t(meta.size()), 4);
  for (float v : meta) put_bytes(buf, std::bit_cast<uint32_t>(v), 4);
}

inline Profile get_profile(ByteReader& r) {
  const uint64_t n = r.get_bytes(4);
  if (n == 0 || n > 4096)
    throw DataError("implausible profile block size " + std::to_string(n) +
                    " in " + r.path);
  std::vector<float> meta(size_t(n));
  for (size_t i = 0; i < meta.size(); ++i)
    meta[i] = std::bit_cast<float>(uint32_t(r.get_bytes(4)));
  return profile_from_meta(meta);
}

inline void check_magic(ByteReader& r, const std::string& magic) {
  if (r.get_str(4) != magic)
    throw MagicError("unknown magic in " + r.path + " (expected " + magic +
                     ")");
}

inline void check_version(uint64_t v, const std::string& path) {
  if (v != kPayloadVersion)
    throw DataError("unsupported version " + std::to_string(v) + " in " +
                    path);
}

}  // namespace detail

// DCTK: u32 version, u16 n, u16 d, u32 k_per_chunk, u64 chunk count,
// u64 n_samples, profile block, then u16 indices chunk-major little-endian
template <class T>
void write_tokens(const std::string& path, const EncodedSequence<T>& seq) {
  if (seq.mode != PayloadMode::discrete)
    throw UsageError("token file needs a discrete payload");
  codetail::check_sequence(seq);
  const FsqConfig& fsq = seq.profile.fsq;
  if (codebook_size(fsq) > 65'536)
    throw DataError("codebook size " + std::to_string(codebook_size(fsq)) +
                    " exceeds the 16-bit token range");
  const uint64_t k = uint64_t(seq.profile.model.k_summary);

  std::string buf = "DCTK";
  detail::put_bytes(buf, kPayloadVersion, 4);
  detail::put_bytes(buf, uint64_t(fsq.n), 2);
  detail::put_bytes(buf, uint64_t(fsq.d), 2);
  detail::put_bytes(buf, k, 4);
  detail::put_bytes(buf, uint64_t(seq.tokens.size()), 8);
  detail::put_bytes(buf, uint64_t(seq.n_samples), 8);
  detail::put_profile(buf, seq.profile);
  for (const TokenChunk& tok : seq.tokens) {
    if (tok.indices.size() != k)
      throw DataError("token chunk holds " +
                      std::to_string(tok.indices.size()) + " indices, expected " +
                      std::to_string(k));
    for (uint64_t ix : tok.indices) detail::put_bytes(buf, ix, 2);
  }
  detail::write_file_bytes(path, buf);
}

template <class T = float>
EncodedSequence<T> read_tokens(const std::string& path) {
  const std::string buf = detail::read_file_bytes(path);
  detail::ByteReader r{buf, 0, path};
  detail::check_magic(r, "DCTK");
  detail::check_version(r.get_bytes(4), path);
  const uint64_t n = r.get_bytes(2);
  const uint64_t d = r.get_bytes(2);
  const uint64_t k = r.get_bytes(4);
  const uint64_t count = r.get_bytes(8);
  const uint64_t n_samples = r.get_bytes(8);

  EncodedSequence<T> seq;
  seq.mode = PayloadMode::discrete;
  seq.profile = detail::get_profile(r);
  seq.n_samples = int64_t(n_samples);
  if (n != uint64_t(seq.profile.fsq.n) || d != uint64_t(seq.profile.fsq.d) ||
      k != uint64_t(seq.profile.model.k_summary))
    throw DataError("token header disagrees with its profile block in " + path);
  const uint64_t cap = codebook_size(seq.profile.fsq);
  seq.tokens.resize(size_t(count));
  for (TokenChunk& tok : seq.tokens) {
    tok.indices.resize(size_t(k));
    for (uint64_t& ix : tok.indices) {
      ix = r.get_bytes(2);
      if (ix >= cap)
        throw DataError("token index " + std::to_string(ix) +
                        " exceeds codebook size " + std::to_string(cap) +
                        " in " + path);
    }
  }
  if (r.pos != buf.size())
    throw DataError("trailing bytes after token payload in " + path);
  codetail::check_sequence(seq);
  return seq;
}

// DCLT: u32 version, u32 K, u32 d_lat, u64 chunk count, u64 n_samples,
// profile block, then f32 values chunk-major little-endian
template <class T>
void write_latents(const std::string& path, const EncodedSequence<T>& seq) {
  if (seq.mode != PayloadMode::continuous)
    throw UsageError("latent file needs a continuous payload");
  codetail::check_sequence(seq);
  const uint64_t k = uint64_t(seq.profile.model.k_summary);
  const uint64_t d = uint64_t(seq.profile.model.d_lat);

  std::string buf = "DCLT";
  detail::put_bytes(buf, kPayloadVersion, 4);
  detail::put_bytes(buf, k, 4);
  detail::put_bytes(buf, d, 4);
  detail::put_bytes(buf, uint64_t(seq.latents.size()), 8);
  detail::put_bytes(buf, uint64_t(seq.n_samples), 8);
  detail::put_profile(buf, seq.profile);
  for (const LatentSet<T>& lat : seq.latents) {
    if (lat.values.rank() != 2 || uint64_t(lat.values.dim(0)) != k ||
        uint64_t(lat.values.dim(1)) != d)
      throw DataError("latent chunk " + shape_str(lat.values.shape()) +
                      " does not match the profile geometry");
    const T* v = lat.values.data();
    for (int64_t i = 0; i < lat.values.numel(); ++i)
      detail::put_bytes(buf, std::bit_cast<uint32_t>(float(v[i])), 4);
  }
  detail::write_file_bytes(path, buf);
}

template <class T = float>
EncodedSequence<T> read_latents(const std::string& path) {
  const std::string buf = detail::read_file_bytes(path);
  detail::ByteReader r{buf, 0, path};
  detail::check_magic(r, "DCLT");
  detail::check_version(r.get_bytes(4), path);
  const uint64_t k = r.get_bytes(4);
  const uint64_t d = r.get_bytes(4);
  const uint64_t count = r.get_bytes(8);
  const uint64_t n_samples = r.get_bytes(8);

  EncodedSequence<T> seq;
  seq.mode = PayloadMode::continuous;
  seq.profile = detail::get_profile(r);
  seq.n_samples = int64_t(n_samples);
  if (k != uint64_t(seq.profile.model.k_summary) ||
      d != uint64_t(seq.profile.model.d_lat))
    throw DataError("latent header disagrees with its profile block in " + path);
  seq.latents.reserve(size_t(count));
  for (uint64_t i = 0; i < count; ++i) {
    Tensor<T> v = Tensor<T>::zeros({int64_t(k), int64_t(d)});
    T* p = v.data();
    for (int64_t e = 0; e < v.numel(); ++e) {
      const float x = std::bit_cast<float>(uint32_t(r.get_bytes(4)));
      if (!(x >= -1.0f && x <= 1.0f))
        throw DataError("latent value " + std::to_string(x) +
                        " outside [-1, 1] in " + path);
      p[e] = T(x);
    }
    seq.latents.push_back({v, false});
  }
  if (r.pos != buf.size())
    throw DataError("trailing bytes after latent payload in " + path);
  codetail::check_sequence(seq);
  return seq;
}

}  // namespace dualcodec
