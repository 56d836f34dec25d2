// The three-network model: encoder with summary embeddings, upsampler
// producing cross-connections, and the EDM-parameterized consistency decoder
// operating on chunk pairs under a chunked causal mask.
#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "dualcodec/ops.hpp"

namespace dualcodec {

// ----------------------------------------------------------------- config

struct EdmCoefficients {
  double sigma_data = 0.5;
  double sigma_min = 0.002;
  double sigma_max = 80.0;

  void check(double sigma) const {
    if (!(sigma >= sigma_min && sigma <= sigma_max))
      throw DomainError("sigma " + std::to_string(sigma) + " outside [" +
                        std::to_string(sigma_min) + ", " +
                        std::to_string(sigma_max) + "]");
  }
  // c_skip(sigma_min) = 1 and c_out(sigma_min) = 0 hold exactly
  double c_skip(double sigma) const {
    const double d = sigma - sigma_min;
    return sigma_data * sigma_data / (d * d + sigma_data * sigma_data);
  }
  double c_out(double sigma) const {
    return sigma_data * (sigma - sigma_min) /
           std::sqrt(sigma_data * sigma_data + sigma * sigma);
  }
  double c_in(double sigma) const {
    return 1.0 / std::sqrt(sigma * sigma + sigma_data * sigma_data);
  }
};

struct ModelConfig {
  std::vector<int> conv_channels{64, 128, 256, 512};
  std::vector<int> conv_layers{3, 3, 3, 1};
  int transformer_blocks = 12;
  int hidden_dim = 512;
  int head_dim = 128;
  int mlp_mult = 4;
  int k_summary = 128;
  int d_lat = 4;
  int sigma_embed_channels = 512;
  int in_channels = 4;   // 2 x audio channels (real/imag per channel)
  int freq_bins = 1024;  // model-facing spectrogram rows
  int t_chunk = 32;      // frames per chunk
  EdmCoefficients edm{};

  // downsampling is fixed: 2x2, 2x2, then frequency-only x4
  int64_t freq_tokens() const { return freq_bins / 16; }
  int64_t time_tokens() const { return t_chunk / 4; }
  int64_t audio_tokens() const { return freq_tokens() * time_tokens(); }
  int heads() const { return hidden_dim / head_dim; }
};

inline void validate(const ModelConfig& cfg) {
  if (cfg.conv_channels.size() != 4 || cfg.conv_layers.size() != 4)
    throw ConfigError("model wants 4 conv levels, got " +
                      std::to_string(cfg.conv_channels.size()) + "/" +
                      std::to_string(cfg.conv_layers.size()));
  for (int c : cfg.conv_channels)
    if (c < 1) throw ConfigError("conv channels must be positive");
  for (int l : cfg.conv_layers)
    if (l < 1) throw ConfigError("conv layers must be positive");
  if (cfg.freq_bins % 16 != 0)
    throw ConfigError("freq_bins " + std::to_string(cfg.freq_bins) +
                      " not divisible by the total frequency downsampling 16");
  if (cfg.t_chunk % 4 != 0)
    throw ConfigError("t_chunk " + std::to_string(cfg.t_chunk) +
                      " not divisible by the total time downsampling 4");
  if (cfg.hidden_dim % cfg.head_dim != 0)
    throw ConfigError("hidden_dim " + std::to_string(cfg.hidden_dim) +
                      " not divisible by head_dim " +
                      std::to_string(cfg.head_dim));
  if (cfg.transformer_blocks < 1 || cfg.mlp_mult < 1 || cfg.k_summary < 1 ||
      cfg.d_lat < 1 || cfg.in_channels < 1)
    throw ConfigError("model dimensions must be positive");
  if (cfg.sigma_embed_channels < 2 || cfg.sigma_embed_channels % 2 != 0)
    throw ConfigError("sigma_embed_channels must be even and >= 2");
}

// per-level [channels, F_i, T_i] walking the patchifier downward
inline std::vector<Shape> patch_grid_shapes(const ModelConfig& cfg) {
  const int64_t f = cfg.freq_bins, t = cfg.t_chunk;
  return {{cfg.conv_channels[0], f, t},
          {cfg.conv_channels[1], f / 2, t / 2},
          {cfg.conv_channels[2], f / 4, t / 4},
          {cfg.conv_channels[3], f / 16, t / 4}};
}

// the same ladder walked upward through transposed-conv geometry
inline std::vector<Shape> depatch_grid_shapes(const ModelConfig& cfg) {
  auto tconv = [](int64_t n, int64_t k, int64_t s, int64_t p) {
    return (n - 1) * s - 2 * p + k;
  };
  const int64_t f3 = cfg.freq_bins / 16, t3 = cfg.t_chunk / 4;
  // up stage 2: two stacked frequency-only k(4,3) s(2,1) p(1,1)
  const int64_t f2 = tconv(tconv(f3, 4, 2, 1), 4, 2, 1), t2 = tconv(t3, 3, 1, 1);
  const int64_t f1 = tconv(f2, 4, 2, 1), t1 = tconv(t2, 4, 2, 1);
  const int64_t f0 = tconv(f1, 4, 2, 1), t0 = tconv(t1, 4, 2, 1);
  return {{cfg.conv_channels[0], f0, t0},
          {cfg.conv_channels[1], f1, t1},
          {cfg.conv_channels[2], f2, t2},
          {cfg.conv_channels[3], f3, t3}};
}

// --------------------------------------------------------- free functions

// sinusoidal features of log(sigma) at geometrically spaced frequencies
template <class T>
Tensor<T> sigma_embed(const std::vector<double>& sigma, int channels) {
  if (channels < 2 || channels % 2 != 0)
    throw ConfigError("sigma embedding needs an even channel count");
  const int half = channels / 2;
  // top frequency kept low so embeddings of nearby sigmas stay correlated:
  // consistency pairs sit ~0.1 apart in log-sigma, and conditioning must be
  // smooth at that resolution or the objective turns into noise
  const double f_lo = 0.25, f_hi = 4.0;
  Tensor<T> out = Tensor<T>::zeros({int64_t(sigma.size()), channels});
  T* p = out.data();
  for (size_t b = 0; b < sigma.size(); ++b) {
    if (!(sigma[b] > 0.0))
      throw DomainError("sigma must be positive, got " +
                        std::to_string(sigma[b]));
    const double ls = std::log(sigma[b]);
    for (int i = 0; i < half; ++i) {
      const double freq =
          half == 1 ? f_lo
                    : f_lo * std::pow(f_hi / f_lo, double(i) / (half - 1));
      p[b * size_t(channels) + size_t(i)] = T(std::sin(freq * ls));
      p[b * size_t(channels) + size_t(half + i)] = T(std::cos(freq * ls));
    }
  }
  return out;
}

// additive mask: left-chunk queries see only left keys, right sees both
template <class T>
Tensor<T> chunked_causal_mask(int64_t t_left, int64_t t_right) {
  if (t_left < 1 || t_right < 0)
    throw ConfigError("mask wants t_left >= 1 and t_right >= 0");
  const int64_t n = t_left + t_right;
  Tensor<T> mask = Tensor<T>::zeros({n, n});
  T* p = mask.data();
  const T blocked = -std::numeric_limits<T>::infinity();
  for (int64_t r = 0; r < t_left; ++r)
    for (int64_t c = t_left; c < n; ++c) p[r * n + c] = blocked;
  return mask;
}

// f = c_skip(sigma) * x + c_out(sigma) * raw, per batch item
template <class T>
Tensor<T> edm_wrap(const Tensor<T>& raw, const Tensor<T>& x,
                   const std::vector<double>& sigma,
                   const EdmCoefficients& edm) {
  if (x.dim(0) != int64_t(sigma.size()))
    throw ShapeError("edm_wrap got " + std::to_string(sigma.size()) +
                     " sigmas for batch " + shape_str(x.shape()));
  Shape bshape(size_t(x.rank()), 1);
  bshape[0] = x.dim(0);
  Tensor<T> cskip = Tensor<T>::zeros(bshape);
  Tensor<T> cout = Tensor<T>::zeros(bshape);
  for (size_t b = 0; b < sigma.size(); ++b) {
    edm.check(sigma[b]);
    cskip.data()[b] = T(edm.c_skip(sigma[b]));
    cout.data()[b] = T(edm.c_out(sigma[b]));
  }
  return add(mul(cskip, x), mul(cout, raw));
}

// --------------------------------------------------------- weight registry

template <class T>
class ParamStore {
 public:
  explicit ParamStore(uint64_t seed) : rng_(seed) {}

  Tensor<T> randn(const std::string& name, const Shape& shape,
                  double scale = 1.0) {
    return reg(name, Tensor<T>::randn(shape, rng_, T(scale)));
  }
  Tensor<T> zeros(const std::string& name, const Shape& shape) {
    return reg(name, Tensor<T>::zeros(shape));
  }
  Tensor<T> ones(const std::string& name, const Shape& shape) {
    return reg(name, Tensor<T>::full(shape, T(1)));
  }

  const std::vector<std::pair<std::string, Tensor<T>>>& entries() const {
    return entries_;
  }
  Tensor<T> find(const std::string& name) const {
    for (const auto& [n, t] : entries_)
      if (n == name) return t;
    throw UsageError("no parameter named " + name);
  }
  int64_t total_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : entries_) n += t.numel();
    return n;
  }

 private:
  Tensor<T> reg(const std::string& name, Tensor<T> t) {
    for (const auto& [n, _] : entries_)
      if (n == name) throw UsageError("duplicate parameter name " + name);
    t.set_requires_grad(true);
    entries_.emplace_back(name, t);
    return t;
  }

  Rng rng_;
  std::vector<std::pair<std::string, Tensor<T>>> entries_;
};

// ------------------------------------------------------------ layer pieces

namespace netdetail {

template <class T>
struct Linear {
  Tensor<T> w, b;  // w [in, out], b [out]
};

template <class T>
Linear<T> make_linear(ParamStore<T>& ps, const std::string& name, int in,
                      int out, bool zero_init = false) {
  if (zero_init)
    return {ps.zeros(name + ".w", {in, out}), ps.zeros(name + ".b", {out})};
  return {ps.randn(name + ".w", {in, out}, 1.0 / std::sqrt(double(in))),
          ps.zeros(name + ".b", {out})};
}

template <class T>
Tensor<T> apply(const Linear<T>& lin, const Tensor<T>& x) {
  return add(matmul(x, lin.w), lin.b);
}

template <class T>
struct Conv {
  Tensor<T> w, b;  // conv [Co,Ci,kh,kw]; transposed [Ci,Co,kh,kw]
  int sh = 1, sw = 1, ph = 1, pw = 1;
};

template <class T>
Conv<T> make_conv(ParamStore<T>& ps, const std::string& name, int ci, int co,
                  int kh, int kw, int sh, int sw, int ph, int pw,
                  bool zero_init = false) {
  const double scale = 1.0 / std::sqrt(double(ci) * kh * kw);
  Conv<T> c;
  c.w = zero_init ? ps.zeros(name + ".w", {co, ci, kh, kw})
                  : ps.randn(name + ".w", {co, ci, kh, kw}, scale);
  c.b = ps.zeros(name + ".b", {co});
  c.sh = sh; c.sw = sw; c.ph = ph; c.pw = pw;
  return c;
}

template <class T>
Conv<T> make_tconv(ParamStore<T>& ps, const std::string& name, int ci, int co,
                   int kh, int kw, int sh, int sw, int ph, int pw) {
  const double scale = 1.0 / std::sqrt(double(ci) * kh * kw);
  Conv<T> c;
  c.w = ps.randn(name + ".w", {ci, co, kh, kw}, scale);
  c.b = ps.zeros(name + ".b", {co});
  c.sh = sh; c.sw = sw; c.ph = ph; c.pw = pw;
  return c;
}

template <class T>
Tensor<T> apply(const Conv<T>& c, const Tensor<T>& x) {
  return conv2d(x, c.w, c.b, c.sh, c.sw, c.ph, c.pw);
}

template <class T>
Tensor<T> apply_t(const Conv<T>& c, const Tensor<T>& x) {
  return transposed_conv2d(x, c.w, c.b, c.sh, c.sw, c.ph, c.pw);
}

template <class T>
struct Attention {
  Linear<T> q, k, v, o;
  int heads = 1, head_dim = 1;
};

template <class T>
Attention<T> make_attention(ParamStore<T>& ps, const std::string& name,
                            const ModelConfig& cfg) {
  Attention<T> a;
  a.q = make_linear(ps, name + ".q", cfg.hidden_dim, cfg.hidden_dim);
  a.k = make_linear(ps, name + ".k", cfg.hidden_dim, cfg.hidden_dim);
  a.v = make_linear(ps, name + ".v", cfg.hidden_dim, cfg.hidden_dim);
  a.o = make_linear(ps, name + ".o", cfg.hidden_dim, cfg.hidden_dim);
  a.heads = cfg.heads();
  a.head_dim = cfg.head_dim;
  return a;
}

template <class T>
Tensor<T> apply(const Attention<T>& a, const Tensor<T>& x,
                const Tensor<T>& mask) {
  const int64_t n = x.dim(0), l = x.dim(1);
  auto heads = [&](const Linear<T>& lin) {
    return permute(reshape(apply(lin, x), {n, l, a.heads, a.head_dim}),
                   {0, 2, 1, 3});
  };
  Tensor<T> att =
      scaled_dot_attention(heads(a.q), heads(a.k), heads(a.v), mask);
  Tensor<T> merged =
      reshape(permute(att, {0, 2, 1, 3}), {n, l, a.heads * a.head_dim});
  return apply(a.o, merged);
}

template <class T>
struct Mlp {
  Linear<T> fc1, fc2;
};

template <class T>
Mlp<T> make_mlp(ParamStore<T>& ps, const std::string& name,
                const ModelConfig& cfg) {
  return {make_linear(ps, name + ".fc1", cfg.hidden_dim,
                      cfg.hidden_dim * cfg.mlp_mult),
          make_linear(ps, name + ".fc2", cfg.hidden_dim * cfg.mlp_mult,
                      cfg.hidden_dim)};
}

template <class T>
Tensor<T> apply(const Mlp<T>& m, const Tensor<T>& x) {
  return apply(m.fc2, gelu(apply(m.fc1, x)));
}

// pre-LN block without conditioning (encoder and upsampler)
template <class T>
struct Block {
  Tensor<T> ln1_g, ln1_b, ln2_g, ln2_b;
  Attention<T> attn;
  Mlp<T> mlp;
};

template <class T>
Block<T> make_block(ParamStore<T>& ps, const std::string& name,
                    const ModelConfig& cfg) {
  Block<T> b;
  b.ln1_g = ps.ones(name + ".ln1.g", {cfg.hidden_dim});
  b.ln1_b = ps.zeros(name + ".ln1.b", {cfg.hidden_dim});
  b.ln2_g = ps.ones(name + ".ln2.g", {cfg.hidden_dim});
  b.ln2_b = ps.zeros(name + ".ln2.b", {cfg.hidden_dim});
  b.attn = make_attention(ps, name + ".attn", cfg);
  b.mlp = make_mlp(ps, name + ".mlp", cfg);
  return b;
}

template <class T>
Tensor<T> apply(const Block<T>& b, Tensor<T> x, const Tensor<T>& mask) {
  x = add(x, apply(b.attn, layer_norm(x, b.ln1_g, b.ln1_b), mask));
  x = add(x, apply(b.mlp, layer_norm(x, b.ln2_g, b.ln2_b)));
  return x;
}

// sigma-modulated block (decoder): per-half adaptive scale/shift/gate from
// the sigma features. The modulation head is zero-initialized so the block
// starts sigma-independent; residual branches stay active at init (gates sit
// at 1 + g) so gradients reach block weights from the first step
template <class T>
struct ModBlock {
  Attention<T> attn;
  Mlp<T> mlp;
  Linear<T> mod;  // hidden -> 6 * hidden
};

template <class T>
ModBlock<T> make_mod_block(ParamStore<T>& ps, const std::string& name,
                           const ModelConfig& cfg) {
  ModBlock<T> b;
  b.attn = make_attention(ps, name + ".attn", cfg);
  b.mlp = make_mlp(ps, name + ".mlp", cfg);
  b.mod = make_linear(ps, name + ".mod", cfg.hidden_dim, 6 * cfg.hidden_dim,
                      /*zero_init=*/true);
  return b;
}

template <class T>
struct HalfMod {  // six [B,1,h] modulation slices for one chunk half
  Tensor<T> sa, ba, ga, sm, bm, gm;
};

template <class T>
HalfMod<T> mod_slices(const ModBlock<T>& b, const Tensor<T>& sig_feat,
                      int64_t h) {
  Tensor<T> m = reshape(apply(b.mod, sig_feat), {sig_feat.dim(0), 1, 6 * h});
  return {slice(m, 2, 0 * h, h), slice(m, 2, 1 * h, h), slice(m, 2, 2 * h, h),
          slice(m, 2, 3 * h, h), slice(m, 2, 4 * h, h), slice(m, 2, 5 * h, h)};
}

template <class T>
Tensor<T> modulate(const Tensor<T>& x, const Tensor<T>& unit_g,
                   const Tensor<T>& unit_b, const Tensor<T>& scale,
                   const Tensor<T>& shift) {
  return add(mul(layer_norm(x, unit_g, unit_b), add_scalar(scale, T(1))),
             shift);
}

}  // namespace netdetail

// ------------------------------------------------------------------ model

template <class T>
class Model {
 public:
  Model(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg), params_(seed) {
    validate(cfg_);
    assert_symmetry();
    build();
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return params_; }
  const ParamStore<T>& params() const { return params_; }

  // chunk batch [N, C, F, T] -> pre-activation latents [N, K, d_lat]
  Tensor<T> encode(const Tensor<T>& chunks) const {
    check_chunk_shape(chunks, "encode");
    const int64_t n = chunks.dim(0);
    auto pat = patchify(enc_patch_, chunks, nullptr, false);
    Tensor<T> seq = netdetail::apply(enc_proj_in_, pat.tokens);
    Tensor<T> summary =
        add(Tensor<T>::zeros({n, cfg_.k_summary, cfg_.hidden_dim}),
            reshape(summary_emb_, {1, cfg_.k_summary, cfg_.hidden_dim}));
    seq = concat<T>({seq, summary}, 1);
    seq = add(seq, enc_pos_);
    Tensor<T> no_mask;
    for (const auto& b : enc_blocks_) seq = netdetail::apply(b, seq, no_mask);
    Tensor<T> kept = slice(seq, 1, cfg_.audio_tokens(), cfg_.k_summary);
    kept = layer_norm(kept, enc_ln_g_, enc_ln_b_);
    return netdetail::apply(enc_proj_lat_, kept);
  }

  // latents [N, K, d_lat] in [-1,1] -> cross-connections per level,
  // cc[i] shaped [N, C_i, F_i, T_i]
  std::vector<Tensor<T>> upsample(const Tensor<T>& lat) const {
    if (lat.rank() != 3 || lat.dim(1) != cfg_.k_summary ||
        lat.dim(2) != cfg_.d_lat)
      throw ShapeError("upsample wants [N, " + std::to_string(cfg_.k_summary) +
                       ", " + std::to_string(cfg_.d_lat) + "], got " +
                       shape_str(lat.shape()));
    const int64_t n = lat.dim(0), na = cfg_.audio_tokens();
    Tensor<T> lat_tok = netdetail::apply(up_proj_lat_, lat);  // [N,K,h]
    Tensor<T> audio =
        add(Tensor<T>::zeros({n, na, cfg_.hidden_dim}),
            reshape(mask_emb_, {1, 1, cfg_.hidden_dim}));
    Tensor<T> seq = concat<T>({audio, lat_tok}, 1);
    seq = add(seq, up_pos_);
    Tensor<T> no_mask;
    for (const auto& b : up_blocks_) seq = netdetail::apply(b, seq, no_mask);
    Tensor<T> kept = slice(seq, 1, 0, na);
    kept = layer_norm(kept, up_ln_g_, up_ln_b_);
    Tensor<T> grid = tokens_to_grid(netdetail::apply(up_proj_out_, kept), n);
    std::vector<Tensor<T>> cc(4);
    depatchify(up_depatch_, grid, nullptr, &cc);
    return cc;
  }

  // denoise one batch of chunk pairs; sigma per item, cc per level
  std::pair<Tensor<T>, Tensor<T>> decode_denoise(
      const Tensor<T>& noisy_left, const Tensor<T>& noisy_right,
      const std::vector<double>& sigma_left,
      const std::vector<double>& sigma_right,
      const std::vector<Tensor<T>>& cc_left,
      const std::vector<Tensor<T>>& cc_right) const {
    check_chunk_shape(noisy_left, "decode_denoise");
    check_chunk_shape(noisy_right, "decode_denoise");
    const int64_t b = noisy_left.dim(0);
    if (noisy_right.dim(0) != b || int64_t(sigma_left.size()) != b ||
        int64_t(sigma_right.size()) != b)
      throw ShapeError("pair batch sizes disagree");
    check_cc(cc_left, b);
    check_cc(cc_right, b);

    // chunks ride the batch axis through all convolutions: items 0..b-1 are
    // left chunks, b..2b-1 right chunks, so no op ever mixes the two
    Tensor<T> x = concat<T>({noisy_left, noisy_right}, 0);
    std::vector<double> sigma(sigma_left);
    sigma.insert(sigma.end(), sigma_right.begin(), sigma_right.end());
    for (double s : sigma) cfg_.edm.check(s);

    std::vector<Tensor<T>> cc(4);
    for (int i = 0; i < 4; ++i)
      cc[size_t(i)] = concat<T>({cc_left[size_t(i)], cc_right[size_t(i)]}, 0);

    Shape bshape{2 * b, 1, 1, 1};
    Tensor<T> cin = Tensor<T>::zeros(bshape);
    for (int64_t i = 0; i < 2 * b; ++i)
      cin.data()[i] = T(cfg_.edm.c_in(sigma[size_t(i)]));

    auto pat = patchify(dec_patch_, mul(cin, x), &cc, true);

    // fold [2b, na, h] into pairs [b, 2*na, h]: left tokens then right
    const int64_t na = cfg_.audio_tokens();
    Tensor<T> tok = netdetail::apply(dec_proj_in_, pat.tokens);
    tok = reshape(permute(reshape(tok, {2, b, na, cfg_.hidden_dim}),
                          {1, 0, 2, 3}),
                  {b, 2 * na, cfg_.hidden_dim});
    tok = add(tok, dec_pos_);

    Tensor<T> sf_left = sigma_features(sigma_left);
    Tensor<T> sf_right = sigma_features(sigma_right);
    for (const auto& blk : dec_blocks_)
      tok = mod_block_forward(blk, tok, sf_left, sf_right);

    // back to [2b, na, h] with the same left-then-right layout
    const int64_t h = cfg_.hidden_dim;
    tok = reshape(permute(reshape(tok, {b, 2, na, h}), {1, 0, 2, 3}),
                  {2 * b, na, h});
    Tensor<T> sf_all = concat<T>({sf_left, sf_right}, 0);
    Tensor<T> mo =
        reshape(netdetail::apply(dec_mod_out_, sf_all), {2 * b, 1, 2 * h});
    tok = netdetail::modulate(tok, dec_ln_g_, dec_ln_b_, slice(mo, 2, h, h),
                              slice(mo, 2, 0, h));
    Tensor<T> grid = tokens_to_grid(netdetail::apply(dec_proj_out_, tok), 2 * b);
    Tensor<T> raw = depatchify(dec_depatch_, grid, &pat.skips, nullptr);
    Tensor<T> f = edm_wrap(raw, x, sigma, cfg_.edm);
    return {slice(f, 0, 0, b), slice(f, 0, b, b)};
  }

 private:
  struct PatchResult {
    Tensor<T> tokens;  // [N, audio_tokens, C3]
    std::vector<Tensor<T>> skips;
  };

  struct Patchifier {
    netdetail::Conv<T> in_conv;
    std::vector<std::vector<netdetail::Conv<T>>> levels;  // per-level stacks
    std::vector<std::vector<netdetail::Conv<T>>> downs;   // 3 stages
  };

  struct DePatchifier {
    std::vector<std::vector<netdetail::Conv<T>>> levels;
    std::vector<std::vector<netdetail::Conv<T>>> ups;  // 3 stages (transposed)
    netdetail::Conv<T> out_conv;
    bool has_out = false;
  };

  void assert_symmetry() const {
    const auto down = patch_grid_shapes(cfg_);
    const auto up = depatch_grid_shapes(cfg_);
    for (size_t i = 0; i < 4; ++i)
      if (down[i] != up[i])
        throw SymmetryError("level " + std::to_string(i) +
                            " patchifier shape " + shape_str(down[i]) +
                            " != de-patchifier shape " + shape_str(up[i]));
  }

  void check_chunk_shape(const Tensor<T>& x, const char* who) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels ||
        x.dim(2) != cfg_.freq_bins || x.dim(3) != cfg_.t_chunk)
      throw ShapeError(std::string(who) + " wants [N, " +
                       std::to_string(cfg_.in_channels) + ", " +
                       std::to_string(cfg_.freq_bins) + ", " +
                       std::to_string(cfg_.t_chunk) + "], got " +
                       shape_str(x.shape()));
  }

  void check_cc(const std::vector<Tensor<T>>& cc, int64_t n) const {
    if (cc.size() != 4)
      throw SymmetryError("expected 4 cross-connection levels, got " +
                          std::to_string(cc.size()));
    const auto want = patch_grid_shapes(cfg_);
    for (size_t i = 0; i < 4; ++i) {
      Shape expect{n, want[i][0], want[i][1], want[i][2]};
      if (cc[i].shape() != expect)
        throw SymmetryError("cross-connection level " + std::to_string(i) +
                            " shape " + shape_str(cc[i].shape()) +
                            " != " + shape_str(expect));
    }
  }

  Patchifier make_patchifier(const std::string& name) {
    const auto& ch = cfg_.conv_channels;
    Patchifier p;
    p.in_conv = netdetail::make_conv(params_, name + ".in", cfg_.in_channels,
                                     ch[0], 3, 3, 1, 1, 1, 1);
    p.levels.resize(4);
    for (int lv = 0; lv < 4; ++lv)
      for (int j = 0; j < cfg_.conv_layers[size_t(lv)]; ++j)
        p.levels[size_t(lv)].push_back(netdetail::make_conv(
            params_, name + ".lv" + std::to_string(lv) + ".c" +
                std::to_string(j),
            ch[size_t(lv)], ch[size_t(lv)], 3, 3, 1, 1, 1, 1));
    p.downs.resize(3);
    p.downs[0].push_back(netdetail::make_conv(params_, name + ".down0", ch[0],
                                              ch[1], 4, 4, 2, 2, 1, 1));
    p.downs[1].push_back(netdetail::make_conv(params_, name + ".down1", ch[1],
                                              ch[2], 4, 4, 2, 2, 1, 1));
    // frequency-only x4 as two stacked x2 strided convs
    p.downs[2].push_back(netdetail::make_conv(params_, name + ".down2a", ch[2],
                                              ch[3], 4, 3, 2, 1, 1, 1));
    p.downs[2].push_back(netdetail::make_conv(params_, name + ".down2b", ch[3],
                                              ch[3], 4, 3, 2, 1, 1, 1));
    return p;
  }

  DePatchifier make_depatchifier(const std::string& name, bool with_out) {
    const auto& ch = cfg_.conv_channels;
    DePatchifier d;
    d.levels.resize(4);
    for (int lv = 0; lv < 4; ++lv)
      for (int j = 0; j < cfg_.conv_layers[size_t(lv)]; ++j)
        d.levels[size_t(lv)].push_back(netdetail::make_conv(
            params_, name + ".lv" + std::to_string(lv) + ".c" +
                std::to_string(j),
            ch[size_t(lv)], ch[size_t(lv)], 3, 3, 1, 1, 1, 1));
    d.ups.resize(3);
    d.ups[0].push_back(netdetail::make_tconv(params_, name + ".up0", ch[1],
                                             ch[0], 4, 4, 2, 2, 1, 1));
    d.ups[1].push_back(netdetail::make_tconv(params_, name + ".up1", ch[2],
                                             ch[1], 4, 4, 2, 2, 1, 1));
    d.ups[2].push_back(netdetail::make_tconv(params_, name + ".up2a", ch[3],
                                             ch[3], 4, 3, 2, 1, 1, 1));
    d.ups[2].push_back(netdetail::make_tconv(params_, name + ".up2b", ch[3],
                                             ch[2], 4, 3, 2, 1, 1, 1));
    d.has_out = with_out;
    if (with_out)
      d.out_conv = netdetail::make_conv(params_, name + ".out", ch[0],
                                        cfg_.in_channels, 3, 3, 1, 1, 1, 1,
                                        /*zero_init=*/true);
    return d;
  }

  void build() {
    const int h = cfg_.hidden_dim;
    const int c3 = cfg_.conv_channels[3];
    const int64_t na = cfg_.audio_tokens();

    enc_patch_ = make_patchifier("enc.patch");
    enc_proj_in_ = netdetail::make_linear(params_, "enc.proj_in", c3, h);
    summary_emb_ = params_.randn("enc.summary", {cfg_.k_summary, h});
    enc_pos_ = params_.randn("enc.pos", {1, na + cfg_.k_summary, h}, 0.02);
    for (int i = 0; i < cfg_.transformer_blocks; ++i)
      enc_blocks_.push_back(netdetail::make_block(
          params_, "enc.block" + std::to_string(i), cfg_));
    enc_ln_g_ = params_.ones("enc.ln.g", {h});
    enc_ln_b_ = params_.zeros("enc.ln.b", {h});
    enc_proj_lat_ = netdetail::make_linear(params_, "enc.proj_lat", h,
                                           cfg_.d_lat);

    up_proj_lat_ = netdetail::make_linear(params_, "up.proj_lat", cfg_.d_lat,
                                          h);
    mask_emb_ = params_.zeros("up.mask", {h});
    up_pos_ = params_.randn("up.pos", {1, na + cfg_.k_summary, h}, 0.02);
    for (int i = 0; i < cfg_.transformer_blocks; ++i)
      up_blocks_.push_back(netdetail::make_block(
          params_, "up.block" + std::to_string(i), cfg_));
    up_ln_g_ = params_.ones("up.ln.g", {h});
    up_ln_b_ = params_.zeros("up.ln.b", {h});
    up_proj_out_ = netdetail::make_linear(params_, "up.proj_out", h, c3);
    up_depatch_ = make_depatchifier("up.depatch", false);

    dec_patch_ = make_patchifier("dec.patch");
    dec_proj_in_ = netdetail::make_linear(params_, "dec.proj_in", c3, h);
    dec_pos_ = params_.randn("dec.pos", {1, 2 * na, h}, 0.02);
    sig_mlp1_ = netdetail::make_linear(params_, "dec.sigma.fc1",
                                       cfg_.sigma_embed_channels, h);
    sig_mlp2_ = netdetail::make_linear(params_, "dec.sigma.fc2", h, h);
    for (int i = 0; i < cfg_.transformer_blocks; ++i)
      dec_blocks_.push_back(netdetail::make_mod_block(
          params_, "dec.block" + std::to_string(i), cfg_));
    dec_ln_g_ = params_.ones("dec.ln.g", {h});
    dec_ln_b_ = params_.zeros("dec.ln.b", {h});
    // sigma-conditioned shift/scale on the final readout so per-noise-level
    // output gains do not have to route through block-internal modulation
    dec_mod_out_ =
        netdetail::make_linear(params_, "dec.mod_out", h, 2 * h,
                               /*zero_init=*/true);
    dec_proj_out_ = netdetail::make_linear(params_, "dec.proj_out", h, c3);
    dec_depatch_ = make_depatchifier("dec.depatch", true);

    unit_g_ = Tensor<T>::full({h}, T(1));  // fixed LN affine for mod blocks
    unit_b_ = Tensor<T>::zeros({h});
    dec_mask_ = chunked_causal_mask<T>(na, na);
  }

  Tensor<T> grid_to_tokens(const Tensor<T>& x) const {
    const int64_t n = x.dim(0), c = x.dim(1), f = x.dim(2), t = x.dim(3);
    return reshape(permute(x, {0, 2, 3, 1}), {n, f * t, c});
  }

  Tensor<T> tokens_to_grid(const Tensor<T>& tok, int64_t n) const {
    const int64_t f = cfg_.freq_tokens(), t = cfg_.time_tokens();
    return permute(reshape(tok, {n, f, t, tok.dim(2)}), {0, 3, 1, 2});
  }

  PatchResult patchify(const Patchifier& p, const Tensor<T>& x,
                       const std::vector<Tensor<T>>* cc,
                       bool keep_skips) const {
    PatchResult out;
    Tensor<T> h = netdetail::apply(p.in_conv, x);
    for (int lv = 0; lv < 4; ++lv) {
      if (cc) h = add(h, (*cc)[size_t(lv)]);
      for (const auto& c : p.levels[size_t(lv)])
        h = gelu(netdetail::apply(c, h));
      if (keep_skips) out.skips.push_back(h);
      if (lv < 3)
        for (const auto& c : p.downs[size_t(lv)])
          h = gelu(netdetail::apply(c, h));
    }
    out.tokens = grid_to_tokens(h);
    return out;
  }

  // walks levels upward; writes cc maps and/or consumes additive skips
  Tensor<T> depatchify(const DePatchifier& d, Tensor<T> h,
                       const std::vector<Tensor<T>>* skips,
                       std::vector<Tensor<T>>* cc_out) const {
    for (int lv = 3; lv >= 0; --lv) {
      if (skips) h = add(h, (*skips)[size_t(lv)]);
      for (const auto& c : d.levels[size_t(lv)])
        h = gelu(netdetail::apply(c, h));
      if (cc_out) (*cc_out)[size_t(lv)] = h;
      if (lv > 0)
        for (const auto& c : d.ups[size_t(lv - 1)])
          h = gelu(netdetail::apply_t(c, h));
    }
    return d.has_out ? netdetail::apply(d.out_conv, h) : h;
  }

  Tensor<T> sigma_features(const std::vector<double>& sigma) const {
    Tensor<T> se = sigma_embed<T>(sigma, cfg_.sigma_embed_channels);
    return netdetail::apply(sig_mlp2_,
                            gelu(netdetail::apply(sig_mlp1_, se)));
  }

  Tensor<T> mod_block_forward(const netdetail::ModBlock<T>& blk, Tensor<T> x,
                              const Tensor<T>& sf_left,
                              const Tensor<T>& sf_right) const {
    const int64_t h = cfg_.hidden_dim, na = cfg_.audio_tokens();
    auto ml = netdetail::mod_slices(blk, sf_left, h);
    auto mr = netdetail::mod_slices(blk, sf_right, h);

    Tensor<T> xl = slice(x, 1, 0, na), xr = slice(x, 1, na, na);
    Tensor<T> ul = netdetail::modulate(xl, unit_g_, unit_b_, ml.sa, ml.ba);
    Tensor<T> ur = netdetail::modulate(xr, unit_g_, unit_b_, mr.sa, mr.ba);
    Tensor<T> att =
        netdetail::apply(blk.attn, concat<T>({ul, ur}, 1), dec_mask_);
    xl = add(xl, mul(slice(att, 1, 0, na), add_scalar(ml.ga, T(1))));
    xr = add(xr, mul(slice(att, 1, na, na), add_scalar(mr.ga, T(1))));

    Tensor<T> vl = netdetail::modulate(xl, unit_g_, unit_b_, ml.sm, ml.bm);
    Tensor<T> vr = netdetail::modulate(xr, unit_g_, unit_b_, mr.sm, mr.bm);
    xl = add(xl, mul(netdetail::apply(blk.mlp, vl), add_scalar(ml.gm, T(1))));
    xr = add(xr, mul(netdetail::apply(blk.mlp, vr), add_scalar(mr.gm, T(1))));
    return concat<T>({xl, xr}, 1);
  }

  ModelConfig cfg_;
  ParamStore<T> params_;

  Patchifier enc_patch_;
  netdetail::Linear<T> enc_proj_in_, enc_proj_lat_;
  Tensor<T> summary_emb_, enc_pos_, enc_ln_g_, enc_ln_b_;
  std::vector<netdetail::Block<T>> enc_blocks_;

  netdetail::Linear<T> up_proj_lat_, up_proj_out_;
  Tensor<T> mask_emb_, up_pos_, up_ln_g_, up_ln_b_;
  std::vector<netdetail::Block<T>> up_blocks_;
  DePatchifier up_depatch_;

  Patchifier dec_patch_;
  DePatchifier dec_depatch_;
  netdetail::Linear<T> dec_proj_in_, dec_proj_out_, dec_mod_out_, sig_mlp1_,
      sig_mlp2_;
  Tensor<T> dec_pos_, dec_ln_g_, dec_ln_b_;
  std::vector<netdetail::ModBlock<T>> dec_blocks_;
  Tensor<T> unit_g_, unit_b_, dec_mask_;
};

}  // namespace dualcodec
