#pragma once
// Named configuration profiles tying together signal geometry, model
// dimensions, quantizer settings, and training hyperparameters, plus a
// small key-value config-file parser and a numeric metadata codec used to
// embed the profile inside checkpoints and token/latent files.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dualcodec/fsq.hpp"
#include "dualcodec/net.hpp"
#include "dualcodec/signal.hpp"

namespace dualcodec {

struct TrainConfig {
  int64_t steps = 2'000'000;
  int batch = 20;
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  bool radam = true;
  double ema_momentum = 0.9999;
  double mix_p = 0.5;           // per-item probability of waveform mixing
  double p_mean = -1.0;         // log-normal noise parameters
  double p_std = 1.4;
  double delta0 = 0.1;          // consistency step at u = 0
  double e_k = 2.0;             // final exponent of the step schedule
  double huber_coeff = 0.00054; // pseudo-huber scale per sqrt(dimension)
  int64_t checkpoint_every = 10'000;
  double smooth_beta = 0.98;    // EMA factor of the reported smoothed loss
};

struct Profile {
  std::string name = "full";
  int sample_rate = 44'100;
  int window = 2'048;           // STFT window; hop is always window/2
  int audio_channels = 2;
  TransformParams amp{};
  ModelConfig model{};
  FsqConfig fsq{};
  TrainConfig train{};

  int hop() const { return window / 2; }
  int64_t chunk_samples() const { return int64_t(model.t_chunk) * hop(); }
  double chunk_seconds() const {
    return double(chunk_samples()) / double(sample_rate);
  }
  // waveform samples per chunk vs latent entries per chunk
  double compression_ratio() const {
    return double(audio_channels) * double(chunk_samples()) /
           (double(model.k_summary) * double(model.d_lat));
  }
  // latent frame rate under the convention of 64-channel embedding rows
  double latent_hz() const {
    return (double(model.k_summary) * double(model.d_lat) / 64.0) /
           chunk_seconds();
  }
  double bitrate_bps() const {
    return bitrate(fsq, model.k_summary, chunk_seconds());
  }
};

inline Profile full_profile() { return Profile{}; }

// small everything: fast enough to train for a few thousand steps on a CPU
inline Profile toy_profile() {
  Profile p;
  p.name = "toy";
  p.sample_rate = 8'000;
  p.window = 256;
  p.audio_channels = 1;
  // tone spectra are sparse, so the default transform scale leaves chunk
  // rms ~0.016, far from the sigma_data the noise schedule assumes; boost
  // the transform gain so toy features sit near sigma_data = 0.5
  p.amp.beta = 10.9;
  p.model.conv_channels = {3, 6, 12, 16};
  p.model.conv_layers = {1, 1, 1, 1};
  p.model.transformer_blocks = 2;
  p.model.hidden_dim = 32;
  p.model.head_dim = 16;
  p.model.mlp_mult = 2;
  p.model.k_summary = 16;
  p.model.d_lat = 4;
  p.model.sigma_embed_channels = 32;
  p.model.in_channels = 2;
  p.model.freq_bins = 128;
  p.model.t_chunk = 8;
  // consistency training is only anchored to data through draws near
  // sigma_min; at desk-scale step counts a wide unanchored high-sigma range
  // lets the student/teacher pair drift freely (loss falls, reconstruction
  // diverges), so the toy noise range stays narrow
  p.model.edm.sigma_max = 8.0;
  p.train.steps = 2'000;
  p.train.batch = 8;
  p.train.lr = 3e-4;
  p.train.ema_momentum = 0.998;
  p.train.checkpoint_every = 1'000;
  return p;
}

inline void validate(const Profile& p) {
  if (p.sample_rate < 1)
    throw ConfigError("sample_rate must be positive, got " +
                      std::to_string(p.sample_rate));
  if (p.window < 32 || (p.window & (p.window - 1)) != 0)
    throw ConfigError("window must be a power of two >= 32, got " +
                      std::to_string(p.window));
  if (p.audio_channels != 1 && p.audio_channels != 2)
    throw ConfigError("audio_channels must be 1 or 2, got " +
                      std::to_string(p.audio_channels));
  if (p.model.freq_bins != p.window / 2)
    throw ConfigError("model freq_bins " + std::to_string(p.model.freq_bins) +
                      " must equal window/2 = " + std::to_string(p.window / 2));
  if (p.model.in_channels != 2 * p.audio_channels)
    throw ConfigError("model in_channels " +
                      std::to_string(p.model.in_channels) +
                      " must equal 2*audio_channels = " +
                      std::to_string(2 * p.audio_channels));
  p.amp.validate();
  validate(p.model);
  validate(p.fsq);
  const TrainConfig& t = p.train;
  if (t.steps < 1 || t.batch < 1)
    throw ConfigError("train steps and batch must be positive");
  if (!(t.lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(t.beta1 >= 0.0 && t.beta1 < 1.0 && t.beta2 >= 0.0 && t.beta2 < 1.0))
    throw ConfigError("adam betas must lie in [0,1)");
  if (!(t.ema_momentum > 0.0 && t.ema_momentum < 1.0))
    throw ConfigError("ema_momentum must lie in (0,1), got " +
                      std::to_string(t.ema_momentum));
  if (!(t.mix_p >= 0.0 && t.mix_p <= 1.0))
    throw ConfigError("mix_p must lie in [0,1]");
  if (!(t.p_std > 0.0)) throw ConfigError("p_std must be positive");
  if (!(t.delta0 > 0.0 && t.delta0 < 1.0))
    throw ConfigError("delta0 must lie in (0,1)");
  if (!(t.e_k >= 1.0)) throw ConfigError("e_k must be >= 1");
  if (t.checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  if (!(t.smooth_beta >= 0.0 && t.smooth_beta < 1.0))
    throw ConfigError("smooth_beta must lie in [0,1)");
}

// ------------------------------------------------------ key-value parsing

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline int64_t to_i64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    int64_t x = std::stoll(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected integer, got '" + v +
                      "'");
  }
}

inline double to_f64(const std::string& key, const std::string& v) {
  try {
    size_t used = 0;
    double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': expected number, got '" + v +
                      "'");
  }
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("config key '" + key + "': expected boolean, got '" + v +
                    "'");
}

inline std::vector<int> to_int_list(const std::string& key,
                                    const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = trim(part);
    if (part.empty())
      throw ConfigError("config key '" + key + "': empty list element");
    out.push_back(int(to_i64(key, part)));
  }
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

}  // namespace detail

// Text format: one "key = value" per line, '#' starts a comment, blank lines
// ignored. The optional "profile" key (full|toy) picks the base profile; all
// other keys override individual fields of it regardless of line order.
inline Profile parse_config_text(const std::string& text) {
  using detail::trim;
  std::vector<std::pair<std::string, std::string>> kv;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected 'key = value', got '" + line + "'");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": empty key or value");
    kv.emplace_back(std::move(key), std::move(val));
  }

  Profile p = full_profile();
  for (const auto& [k, v] : kv) {
    if (k == "profile") {
      if (v == "full")
        p = full_profile();
      else if (v == "toy")
        p = toy_profile();
      else
        throw ConfigError("unknown profile '" + v + "' (expected full|toy)");
    }
  }
  for (const auto& [k, v] : kv) {
    using namespace detail;
    if (k == "profile") {
      continue;
    } else if (k == "sample_rate") {
      p.sample_rate = int(to_i64(k, v));
    } else if (k == "window") {
      p.window = int(to_i64(k, v));
      p.model.freq_bins = p.window / 2;
    } else if (k == "audio_channels") {
      p.audio_channels = int(to_i64(k, v));
      p.model.in_channels = 2 * p.audio_channels;
    } else if (k == "alpha") {
      p.amp.alpha = to_f64(k, v);
    } else if (k == "beta") {
      p.amp.beta = to_f64(k, v);
    } else if (k == "conv_channels") {
      p.model.conv_channels = to_int_list(k, v);
    } else if (k == "conv_layers") {
      p.model.conv_layers = to_int_list(k, v);
    } else if (k == "transformer_blocks") {
      p.model.transformer_blocks = int(to_i64(k, v));
    } else if (k == "hidden_dim") {
      p.model.hidden_dim = int(to_i64(k, v));
    } else if (k == "head_dim") {
      p.model.head_dim = int(to_i64(k, v));
    } else if (k == "mlp_mult") {
      p.model.mlp_mult = int(to_i64(k, v));
    } else if (k == "k_summary") {
      p.model.k_summary = int(to_i64(k, v));
    } else if (k == "d_lat") {
      p.model.d_lat = int(to_i64(k, v));
    } else if (k == "sigma_embed_channels") {
      p.model.sigma_embed_channels = int(to_i64(k, v));
    } else if (k == "t_chunk") {
      p.model.t_chunk = int(to_i64(k, v));
    } else if (k == "sigma_data") {
      p.model.edm.sigma_data = to_f64(k, v);
    } else if (k == "sigma_min") {
      p.model.edm.sigma_min = to_f64(k, v);
    } else if (k == "sigma_max") {
      p.model.edm.sigma_max = to_f64(k, v);
    } else if (k == "fsq_n") {
      p.fsq.n = int(to_i64(k, v));
    } else if (k == "fsq_d") {
      p.fsq.d = int(to_i64(k, v));
    } else if (k == "fsq_dropout_p") {
      p.fsq.dropout_p = to_f64(k, v);
    } else if (k == "steps") {
      p.train.steps = to_i64(k, v);
    } else if (k == "batch") {
      p.train.batch = int(to_i64(k, v));
    } else if (k == "lr") {
      p.train.lr = to_f64(k, v);
    } else if (k == "beta1") {
      p.train.beta1 = to_f64(k, v);
    } else if (k == "beta2") {
      p.train.beta2 = to_f64(k, v);
    } else if (k == "radam") {
      p.train.radam = to_bool(k, v);
    } else if (k == "ema_momentum") {
      p.train.ema_momentum = to_f64(k, v);
    } else if (k == "mix_p") {
      p.train.mix_p = to_f64(k, v);
    } else if (k == "p_mean") {
      p.train.p_mean = to_f64(k, v);
    } else if (k == "p_std") {
      p.train.p_std = to_f64(k, v);
    } else if (k == "delta0") {
      p.train.delta0 = to_f64(k, v);
    } else if (k == "e_k") {
      p.train.e_k = to_f64(k, v);
    } else if (k == "checkpoint_every") {
      p.train.checkpoint_every = to_i64(k, v);
    } else if (k == "smooth_beta") {
      p.train.smooth_beta = to_f64(k, v);
    } else {
      throw ConfigError("unknown config key '" + k + "'");
    }
    p.name = "custom";
  }
  validate(p);
  return p;
}

inline Profile load_profile(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

// ------------------------------------------------- numeric profile metadata

// flat numeric encoding of the structural fields (everything that affects
// weights and stream layout; training hyperparameters are excluded)
inline std::vector<float> profile_meta(const Profile& p) {
  std::vector<float> m;
  m.push_back(1.0f);  // metadata version
  m.push_back(float(p.sample_rate));
  m.push_back(float(p.window));
  m.push_back(float(p.audio_channels));
  m.push_back(float(p.amp.alpha));
  m.push_back(float(p.amp.beta));
  for (int c : p.model.conv_channels) m.push_back(float(c));
  for (int l : p.model.conv_layers) m.push_back(float(l));
  m.push_back(float(p.model.transformer_blocks));
  m.push_back(float(p.model.hidden_dim));
  m.push_back(float(p.model.head_dim));
  m.push_back(float(p.model.mlp_mult));
  m.push_back(float(p.model.k_summary));
  m.push_back(float(p.model.d_lat));
  m.push_back(float(p.model.sigma_embed_channels));
  m.push_back(float(p.model.t_chunk));
  m.push_back(float(p.fsq.n));
  m.push_back(float(p.fsq.d));
  m.push_back(float(p.fsq.dropout_p));
  m.push_back(float(p.model.edm.sigma_data));
  m.push_back(float(p.model.edm.sigma_min));
  m.push_back(float(p.model.edm.sigma_max));
  return m;
}

// structural equality (name and training settings excluded)
inline bool profiles_compatible(const Profile& a, const Profile& b) {
  const std::vector<float> ma = profile_meta(a), mb = profile_meta(b);
  if (ma.size() != mb.size()) return false;
  for (size_t i = 0; i < ma.size(); ++i) {
    const float scale = std::max({std::fabs(ma[i]), std::fabs(mb[i]), 1.0f});
    if (std::fabs(ma[i] - mb[i]) > 1e-6f * scale) return false;
  }
  return true;
}

inline Profile profile_from_meta(const std::vector<float>& m) {
  if (m.size() != 28 || m[0] != 1.0f)
    throw DataError("unrecognized profile metadata (version/size mismatch)");
  Profile p;
  size_t i = 1;
  auto geti = [&] { return int(std::lround(double(m[i++]))); };
  auto getf = [&] { return double(m[i++]); };
  p.sample_rate = geti();
  p.window = geti();
  p.audio_channels = geti();
  p.amp.alpha = getf();
  p.amp.beta = getf();
  for (int& c : p.model.conv_channels) c = geti();
  for (int& l : p.model.conv_layers) l = geti();
  p.model.transformer_blocks = geti();
  p.model.hidden_dim = geti();
  p.model.head_dim = geti();
  p.model.mlp_mult = geti();
  p.model.k_summary = geti();
  p.model.d_lat = geti();
  p.model.sigma_embed_channels = geti();
  p.model.t_chunk = geti();
  p.model.freq_bins = p.window / 2;
  p.model.in_channels = 2 * p.audio_channels;
  p.fsq.n = geti();
  p.fsq.d = geti();
  p.fsq.dropout_p = getf();
  p.model.edm.sigma_data = getf();
  p.model.edm.sigma_min = getf();
  p.model.edm.sigma_max = getf();
  p.name = profiles_compatible(p, full_profile()) ? "full"
           : profiles_compatible(p, toy_profile()) ? "toy"
                                                   : "custom";
  validate(p);
  return p;
}

}  // namespace dualcodec
