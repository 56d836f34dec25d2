#pragma once
// Parameter checkpoint file (magic "DCKP"): named float arrays holding raw
// weights, EMA weights, and the structural profile metadata.
//
// Layout, all integers little-endian:
//   "DCKP"  u32 version  u64 array_count
//   per array: u32 name_len, name bytes (UTF-8), u32 rank,
//              rank * u64 dims, prod(dims) * f32 data
// Weight arrays live under "raw/<param>" and "ema/<param>"; the profile is
// the float vector "meta/profile" (see profile_meta in config.hpp).

#include <bit>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "dualcodec/config.hpp"
#include "dualcodec/net.hpp"

namespace dualcodec {
namespace detail {

inline void put_bytes(std::string& buf, uint64_t v, int n) {
  for (int i = 0; i < n; ++i) buf.push_back(char(uint8_t(v >> (8 * i))));
}

struct ByteReader {
  const std::string& buf;
  size_t pos = 0;
  const std::string path;

  uint64_t get_bytes(int n) {
    if (pos + size_t(n) > buf.size())
      throw DataError("truncated checkpoint file: " + path);
    uint64_t v = 0;
    for (int i = 0; i < n; ++i)
      v |= uint64_t(uint8_t(buf[pos + size_t(i)])) << (8 * i);
    pos += size_t(n);
    return v;
  }
  std::string get_str(size_t n) {
    if (pos + n > buf.size())
      throw DataError("truncated checkpoint file: " + path);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open file: " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  return buf;
}

inline void write_file_bytes(const std::string& path, const std::string& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot create file: " + path);
  out.write(buf.data(), std::streamsize(buf.size()));
  if (!out) throw IoError("write failed: " + path);
}

}  // namespace detail

using NamedArrays = std::vector<std::pair<std::string, Tensor<float>>>;

inline constexpr uint32_t kCheckpointVersion = 1;

inline void write_dckp(const std::string& path, const NamedArrays& arrays) {
  std::string buf;
  buf += "DCKP";
  detail::put_bytes(buf, kCheckpointVersion, 4);
  detail::put_bytes(buf, uint64_t(arrays.size()), 8);
  for (const auto& [name, t] : arrays) {
    detail::put_bytes(buf, uint64_t(name.size()), 4);
    buf += name;
    detail::put_bytes(buf, uint64_t(t.rank()), 4);
    for (int i = 0; i < t.rank(); ++i)
      detail::put_bytes(buf, uint64_t(t.dim(i)), 8);
    const float* d = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
      detail::put_bytes(buf, std::bit_cast<uint32_t>(d[i]), 4);
  }
  detail::write_file_bytes(path, buf);
}

inline NamedArrays read_dckp(const std::string& path) {
  const std::string buf = detail::read_file_bytes(path);
  detail::ByteReader r{buf, 0, path};
  if (r.get_str(4) != "DCKP")
    throw MagicError("unknown magic in " + path + " (expected DCKP)");
  const uint64_t version = r.get_bytes(4);
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint version " +
                    std::to_string(version) + " in " + path);
  const uint64_t count = r.get_bytes(8);
  NamedArrays arrays;
  arrays.reserve(size_t(count));
  for (uint64_t a = 0; a < count; ++a) {
    const uint64_t name_len = r.get_bytes(4);
    std::string name = r.get_str(size_t(name_len));
    const uint64_t rank = r.get_bytes(4);
    if (rank > 8) throw DataError("implausible array rank in " + path);
    Shape shape;
    int64_t numel = 1;
    for (uint64_t i = 0; i < rank; ++i) {
      const int64_t d = int64_t(r.get_bytes(8));
      if (d < 0 || (numel > 0 && d > (int64_t(1) << 40) / std::max<int64_t>(numel, 1)))
        throw DataError("implausible array dims in " + path);
      shape.push_back(d);
      numel *= d;
    }
    Tensor<float> t = Tensor<float>::zeros(shape);
    float* d = t.data();
    for (int64_t i = 0; i < t.numel(); ++i)
      d[i] = std::bit_cast<float>(uint32_t(r.get_bytes(4)));
    arrays.emplace_back(std::move(name), std::move(t));
  }
  if (r.pos != buf.size())
    throw DataError("trailing bytes after checkpoint arrays: " + path);
  return arrays;
}

// ------------------------------------------------------- model-level layer

template <class T>
Tensor<float> to_float_tensor(const Tensor<T>& t) {
  Tensor<float> out = Tensor<float>::zeros(t.shape());
  const T* s = t.data();
  float* d = out.data();
  for (int64_t i = 0; i < t.numel(); ++i) d[i] = float(s[i]);
  return out;
}

struct Checkpoint {
  Profile profile;
  NamedArrays raw;  // names with the "raw/" prefix stripped
  NamedArrays ema;  // names with the "ema/" prefix stripped; may be empty
};

template <class T>
void save_checkpoint(const std::string& path, const Profile& profile,
                     const ParamStore<T>& params,
                     const std::vector<std::pair<std::string, Tensor<T>>>*
                         ema_shadow = nullptr) {
  NamedArrays arrays;
  const std::vector<float> meta = profile_meta(profile);
  Tensor<float> mt = Tensor<float>::zeros({int64_t(meta.size())});
  std::copy(meta.begin(), meta.end(), mt.data());
  arrays.emplace_back("meta/profile", std::move(mt));
  for (const auto& [name, p] : params.entries())
    arrays.emplace_back("raw/" + name, to_float_tensor(p));
  if (ema_shadow)
    for (const auto& [name, s] : *ema_shadow)
      arrays.emplace_back("ema/" + name, to_float_tensor(s));
  write_dckp(path, arrays);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  NamedArrays arrays = read_dckp(path);
  Checkpoint ck;
  bool have_meta = false;
  for (auto& [name, t] : arrays) {
    if (name == "meta/profile") {
      std::vector<float> meta(t.data(), t.data() + t.numel());
      ck.profile = profile_from_meta(meta);
      have_meta = true;
    } else if (name.rfind("raw/", 0) == 0) {
      ck.raw.emplace_back(name.substr(4), std::move(t));
    } else if (name.rfind("ema/", 0) == 0) {
      ck.ema.emplace_back(name.substr(4), std::move(t));
    } else {
      throw DataError("unrecognized checkpoint array '" + name + "' in " +
                      path);
    }
  }
  if (!have_meta)
    throw DataError("checkpoint missing meta/profile: " + path);
  if (ck.raw.empty()) throw DataError("checkpoint has no raw weights: " + path);
  return ck;
}

// copy arrays into a model's parameters; the set of names must match exactly
template <class T>
void load_params(ParamStore<T>& params, const NamedArrays& arrays) {
  const auto& entries = params.entries();
  std::vector<bool> seen(entries.size(), false);
  for (const auto& [name, src] : arrays) {
    bool found = false;
    for (size_t i = 0; i < entries.size(); ++i) {
      if (entries[i].first != name) continue;
      Tensor<T> dst = entries[i].second;
      if (src.shape() != dst.shape())
        throw ShapeError("checkpoint array '" + name + "' shape " +
                         shape_str(src.shape()) + " != parameter shape " +
                         shape_str(dst.shape()));
      const float* s = src.data();
      T* d = dst.data();
      for (int64_t j = 0; j < dst.numel(); ++j) d[j] = T(s[j]);
      seen[i] = true;
      found = true;
      break;
    }
    if (!found)
      throw DataError("checkpoint array '" + name +
                      "' matches no model parameter");
  }
  for (size_t i = 0; i < entries.size(); ++i)
    if (!seen[i])
      throw DataError("model parameter '" + entries[i].first +
                      "' missing from checkpoint");
}

}  // namespace dualcodec
