#pragma once
// Consistency training: log-normal noise sampling, the shrinking step
// schedule, pseudo-Huber distance, the student/teacher pair loss with shared
// noise and stop-gradient teacher, waveform mixing, pair sampling from a WAV
// pool, and the training loop with optimizer, EMA, and loss-curve output.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <string>
#include <vector>

#include "dualcodec/bridge.hpp"
#include "dualcodec/checkpoint.hpp"
#include "dualcodec/config.hpp"
#include "dualcodec/fsq.hpp"
#include "dualcodec/net.hpp"
#include "dualcodec/optim.hpp"
#include "dualcodec/signal.hpp"
#include "dualcodec/wav.hpp"

namespace dualcodec {

// ------------------------------------------------------------ noise model

struct NoiseSampler {
  double p_mean = -1.0;  // parameters of ln sigma ~ Normal(p_mean, p_std^2)
  double p_std = 1.4;
  double sigma_min = 0.002;
  double sigma_max = 80.0;
};

inline double sample_sigma(Rng& rng, const NoiseSampler& s) {
  if (!(s.p_std > 0.0)) throw ConfigError("noise p_std must be positive");
  if (!(s.sigma_min > 0.0 && s.sigma_min < s.sigma_max))
    throw ConfigError("noise sigma range must satisfy 0 < min < max");
  return std::clamp(std::exp(rng.normal(s.p_mean, s.p_std)), s.sigma_min,
                    s.sigma_max);
}

struct DeltaSigmaSchedule {
  double delta0 = 0.1;  // step at u = 0
  double e_k = 2.0;     // exponent at u = 1: step becomes delta0^e_k
};

// delta0^(1 + (e_k-1)*u): exponential in u, hitting both endpoints
inline double delta_sigma(double u, const DeltaSigmaSchedule& s) {
  if (!(u >= 0.0 && u <= 1.0))
    throw DomainError("training progress u must lie in [0,1], got " +
                      std::to_string(u));
  if (!(s.delta0 > 0.0 && s.delta0 < 1.0))
    throw ConfigError("delta0 must lie in (0,1)");
  if (!(s.e_k >= 1.0)) throw ConfigError("e_k must be >= 1");
  return std::pow(s.delta0, 1.0 + (s.e_k - 1.0) * u);
}

// ---------------------------------------------------------- pseudo-Huber

// sqrt(|a-b|^2 + c^2) - c over the whole tensor, as a graph op
template <class T>
Tensor<T> pseudo_huber(const Tensor<T>& a, const Tensor<T>& b, double c) {
  if (a.shape() != b.shape())
    throw ShapeError("pseudo_huber shapes differ: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  if (!(c > 0.0)) throw DomainError("pseudo_huber scale c must be positive");
  Tensor<T> d = sub(a, b);
  Tensor<T> q = sum(mul(d, d));
  return add_scalar(sqrt(add_scalar(q, T(c * c))), T(-c));
}

// same distance per leading-dim item: [B, ...] x [B, ...] -> [B]
template <class T>
Tensor<T> pseudo_huber_rows(const Tensor<T>& a, const Tensor<T>& b, double c) {
  if (a.shape() != b.shape())
    throw ShapeError("pseudo_huber shapes differ: " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  if (!(c > 0.0)) throw DomainError("pseudo_huber scale c must be positive");
  Tensor<T> d = sub(a, b);
  Tensor<T> q = sum_trailing(mul(d, d));
  return add_scalar(sqrt(add_scalar(q, T(c * c))), T(-c));
}

// ------------------------------------------------------------- batch loss

template <class T>
struct TrainBatch {
  Tensor<T> left, right;  // [B,C,F,T] each; consecutive chunks per item
};

struct CtLossConfig {
  NoiseSampler noise{};
  DeltaSigmaSchedule dsig{};
  FsqConfig fsq{};
  double huber_coeff = 0.00054;  // c = coeff * sqrt(dim of the chunk pair)
};

template <class T>
struct CtLossResult {
  Tensor<T> loss;  // scalar; graph-recorded through the student branch
  std::vector<double> sigma_left, sigma_right;
  std::vector<uint8_t> continuous;  // per item: 1 = rounding bypassed
  double dsigma = 0.0;
  double huber_c = 0.0;
};

// One consistency step on a batch of chunk pairs. Per item: independent
// sigma per chunk, one shared delta-sigma, shared epsilon between the
// student (sigma + delta) and the stop-gradient teacher (sigma), and one
// quantizer-dropout draw covering both chunks.
template <class T>
CtLossResult<T> ct_loss(const TrainBatch<T>& batch, const Model<T>& model,
                        double u, Rng& rng, const CtLossConfig& cfg) {
  if (!batch.left.defined() || !batch.right.defined() ||
      batch.left.shape() != batch.right.shape())
    throw ShapeError("ct_loss wants equally shaped left/right chunk batches");
  const int64_t b = batch.left.dim(0);
  const int64_t ch = batch.left.dim(1), f = batch.left.dim(2),
                tc = batch.left.dim(3);

  const double dsig = delta_sigma(u, cfg.dsig);
  // keep the student's sigma + delta inside the EDM range for every u
  const double cap = cfg.noise.sigma_max - delta_sigma(0.0, cfg.dsig);
  if (!(cap > cfg.noise.sigma_min))
    throw ConfigError("sigma_max too small for the delta-sigma schedule");

  CtLossResult<T> out;
  out.dsigma = dsig;
  out.sigma_left.resize(size_t(b));
  out.sigma_right.resize(size_t(b));
  std::vector<double> sl_hi(static_cast<size_t>(b));
  std::vector<double> sr_hi(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    out.sigma_left[size_t(i)] = std::min(sample_sigma(rng, cfg.noise), cap);
    out.sigma_right[size_t(i)] = std::min(sample_sigma(rng, cfg.noise), cap);
    sl_hi[size_t(i)] = out.sigma_left[size_t(i)] + dsig;
    sr_hi[size_t(i)] = out.sigma_right[size_t(i)] + dsig;
  }
  out.continuous.resize(size_t(b));
  for (int64_t i = 0; i < b; ++i)
    out.continuous[size_t(i)] = rng.bernoulli(cfg.fsq.dropout_p) ? 1 : 0;
  Tensor<T> eps_l = Tensor<T>::randn(batch.left.shape(), rng);
  Tensor<T> eps_r = Tensor<T>::randn(batch.right.shape(), rng);

  // shared conditioning: encoder latents with per-item quantizer dropout
  auto condition = [&](const Tensor<T>& chunks) {
    Tensor<T> bounded = tanh(model.encode(chunks));
    Tensor<T> lat =
        select_rows(out.continuous, bounded, ste_round(bounded, cfg.fsq.n));
    return model.upsample(lat);
  };
  std::vector<Tensor<T>> cc_l = condition(batch.left);
  std::vector<Tensor<T>> cc_r = condition(batch.right);

  auto noisy = [&](const Tensor<T>& x, const Tensor<T>& eps,
                   const std::vector<double>& s) {
    Tensor<T> st = Tensor<T>::zeros({b, 1, 1, 1});
    for (int64_t i = 0; i < b; ++i) st.data()[i] = T(s[i]);
    return add(x, mul(st, eps));
  };

  auto [stu_l, stu_r] =
      model.decode_denoise(noisy(batch.left, eps_l, sl_hi),
                           noisy(batch.right, eps_r, sr_hi), sl_hi, sr_hi,
                           cc_l, cc_r);
  Tensor<T> tea_l, tea_r;
  {
    NoGradScope<T> ng;  // stop-gradient teacher: same epsilon, sigma lower
    auto tea = model.decode_denoise(
        noisy(batch.left, eps_l, out.sigma_left),
        noisy(batch.right, eps_r, out.sigma_right), out.sigma_left,
        out.sigma_right, cc_l, cc_r);
    tea_l = tea.first.detach();
    tea_r = tea.second.detach();
  }

  out.huber_c = cfg.huber_coeff * std::sqrt(double(2 * ch * f * tc));
  Tensor<T> dl = sub(stu_l, tea_l);
  Tensor<T> dr = sub(stu_r, tea_r);
  Tensor<T> per = add(sum_trailing(mul(dl, dl)), sum_trailing(mul(dr, dr)));
  per = add_scalar(sqrt(add_scalar(per, T(out.huber_c * out.huber_c))),
                   T(-out.huber_c));
  out.loss = mul_scalar(mean(per), T(1.0 / dsig));

  const double lv = double(out.loss.item());
  if (!std::isfinite(lv)) {
    std::ostringstream ss;
    ss << "non-finite consistency loss at u=" << u << ", delta_sigma=" << dsig
       << "; sigma_left=[";
    for (size_t i = 0; i < out.sigma_left.size() && i < 8; ++i)
      ss << (i ? ", " : "") << out.sigma_left[i];
    ss << "], sigma_right=[";
    for (size_t i = 0; i < out.sigma_right.size() && i < 8; ++i)
      ss << (i ? ", " : "") << out.sigma_right[i];
    ss << "]";
    throw DataError(ss.str());
  }
  return out;
}

// ------------------------------------------------------------ augmentation

// with probability p each item becomes itself plus another (pre-mix) item;
// sums are not renormalized — the amplitude transform absorbs level changes
template <class T>
void random_mix(std::vector<WaveformBuffer<T>>& items, Rng& rng,
                double p = 0.5) {
  if (!(p >= 0.0 && p <= 1.0))
    throw DomainError("mix probability must lie in [0,1]");
  if (items.size() < 2) throw UsageError("random_mix needs at least 2 items");
  const std::vector<WaveformBuffer<T>> orig = items;
  for (size_t i = 0; i < items.size(); ++i) {
    if (!rng.bernoulli(p)) continue;
    size_t j = size_t(rng.below(uint64_t(items.size() - 1)));
    if (j >= i) ++j;
    const WaveformBuffer<T>& other = orig[j];
    WaveformBuffer<T>& mine = items[i];
    if (other.channels() != mine.channels() ||
        other.n_samples() != mine.n_samples())
      throw ShapeError("random_mix items have mismatched shapes");
    for (int c = 0; c < mine.channels(); ++c)
      for (int64_t s = 0; s < mine.n_samples(); ++s)
        mine.samples[size_t(c)][size_t(s)] +=
            other.samples[size_t(c)][size_t(s)];
  }
}

// ------------------------------------------------------------ pair source

// draws random crops covering exactly two consecutive chunks, mixes them,
// and converts to transformed-spectrogram tensors
template <class T>
class PairSampler {
 public:
  PairSampler(const Profile& prof, std::vector<WaveformBuffer<T>> pool)
      : prof_(prof), pool_(std::move(pool)) {
    if (pool_.empty()) throw DataError("training pool is empty");
    span_ = int64_t(prof_.window) +
            int64_t(2 * prof_.model.t_chunk - 1) * prof_.hop();
    for (size_t i = 0; i < pool_.size(); ++i) {
      const auto& w = pool_[i];
      w.validate();
      if (w.sample_rate != prof_.sample_rate)
        throw DataError("pool item " + std::to_string(i) + " sample rate " +
                        std::to_string(w.sample_rate) + " != profile " +
                        std::to_string(prof_.sample_rate));
      if (w.channels() != prof_.audio_channels)
        throw DataError("pool item " + std::to_string(i) + " has " +
                        std::to_string(w.channels()) + " channels, profile " +
                        std::to_string(prof_.audio_channels));
    }
  }

  int64_t crop_samples() const { return span_; }
  size_t pool_size() const { return pool_.size(); }

  // one crop starting anywhere, wrapping around the end of the clip
  WaveformBuffer<T> crop(size_t item, int64_t offset) const {
    const WaveformBuffer<T>& w = pool_[item];
    const int64_t n = w.n_samples();
    WaveformBuffer<T> out;
    out.sample_rate = w.sample_rate;
    out.samples.assign(size_t(w.channels()), std::vector<T>(size_t(span_)));
    for (int c = 0; c < w.channels(); ++c)
      for (int64_t s = 0; s < span_; ++s)
        out.samples[size_t(c)][size_t(s)] =
            w.samples[size_t(c)][size_t((offset + s) % n)];
    return out;
  }

  TrainBatch<T> sample(int batch, Rng& rng, double mix_p) const {
    if (batch < 1) throw ConfigError("batch must be positive");
    std::vector<WaveformBuffer<T>> crops;
    crops.reserve(size_t(batch));
    for (int i = 0; i < batch; ++i) {
      const size_t item = size_t(rng.below(pool_.size()));
      const int64_t off = int64_t(rng.below(uint64_t(pool_[item].n_samples())));
      crops.push_back(crop(item, off));
    }
    if (batch >= 2 && mix_p > 0.0) random_mix(crops, rng, mix_p);

    const ModelConfig& mc = prof_.model;
    Tensor<T> left = Tensor<T>::zeros(
        {int64_t(batch), mc.in_channels, mc.freq_bins, mc.t_chunk});
    Tensor<T> right = Tensor<T>::zeros(
        {int64_t(batch), mc.in_channels, mc.freq_bins, mc.t_chunk});
    const int64_t per = int64_t(mc.in_channels) * mc.freq_bins * mc.t_chunk;
    for (int i = 0; i < batch; ++i) {
      ComplexSpectrogram<T> spec =
          stft(crops[size_t(i)], prof_.window, prof_.hop());
      spec = amp_transform(spec, prof_.amp);
      std::vector<ComplexSpectrogram<T>> parts = chunk(spec, mc.t_chunk);
      if (parts.size() != 2)
        throw ShapeError("pair crop produced " + std::to_string(parts.size()) +
                         " chunks, expected 2");
      std::copy(parts[0].data.begin(), parts[0].data.end(),
                left.data() + int64_t(i) * per);
      std::copy(parts[1].data.begin(), parts[1].data.end(),
                right.data() + int64_t(i) * per);
    }
    return {left, right};
  }

 private:
  Profile prof_;
  std::vector<WaveformBuffer<T>> pool_;
  int64_t span_ = 0;
};

// ------------------------------------------------------------- train loop

struct TrainLoopOptions {
  uint64_t seed = 1;
  int64_t steps = 0;            // 0 -> profile.train.steps
  std::string csv_path;         // loss curve; empty -> not written
  std::string checkpoint_path;  // empty -> no checkpoints
  bool verbose = false;         // progress lines on stderr
};

struct TrainStats {
  int64_t steps = 0;
  double first100_mean = 0.0;   // mean raw loss over the first 100 steps
  double final_smoothed = 0.0;  // bias-corrected EMA of the raw loss
  double final_raw = 0.0;
  std::vector<double> raw_losses;
};

template <class T>
TrainStats train_loop(Model<T>& model, const PairSampler<T>& sampler,
                      const Profile& prof, const TrainLoopOptions& opt) {
  const TrainConfig& tc = prof.train;
  const int64_t steps = opt.steps > 0 ? opt.steps : tc.steps;
  if (steps < 1) throw ConfigError("train_loop needs steps >= 1");

  OptimConfig oc;
  oc.lr = tc.lr;
  oc.beta1 = tc.beta1;
  oc.beta2 = tc.beta2;
  oc.radam = tc.radam;
  oc.cosine = true;
  oc.total_steps = steps;
  Optimizer<T> optim(model.params(), oc);
  EmaState<T> ema(model.params(), tc.ema_momentum);

  CtLossConfig lc;
  lc.noise.p_mean = tc.p_mean;
  lc.noise.p_std = tc.p_std;
  lc.noise.sigma_min = prof.model.edm.sigma_min;
  lc.noise.sigma_max = prof.model.edm.sigma_max;
  lc.dsig.delta0 = tc.delta0;
  lc.dsig.e_k = tc.e_k;
  lc.fsq = prof.fsq;

  Rng root(opt.seed);
  Rng data_rng = root.derive(0xda7a);
  Rng loss_rng = root.derive(0x10ff);

  std::ofstream csv;
  if (!opt.csv_path.empty()) {
    csv.open(opt.csv_path, std::ios::trunc);
    if (!csv) throw IoError("cannot open loss curve file: " + opt.csv_path);
    csv << "step,raw_loss,smoothed_loss,lr,delta_sigma\n";
    csv << std::setprecision(10);
  }

  TrainStats stats;
  stats.steps = steps;
  stats.raw_losses.reserve(size_t(steps));
  double smooth = 0.0;
  double first_sum = 0.0;
  int64_t first_n = 0;

  for (int64_t t = 0; t < steps; ++t) {
    const double u = steps > 1 ? double(t) / double(steps - 1) : 0.0;
    TrainBatch<T> batch = sampler.sample(tc.batch, data_rng, tc.mix_p);

    double raw = 0.0;
    {
      Graph<T> g;
      CtLossResult<T> res = ct_loss(batch, model, u, loss_rng, lc);
      raw = double(res.loss.item());
      g.backward(res.loss);
    }
    optim.step(model.params());
    zero_grads(model.params());
    ema.update(model.params());

    smooth = tc.smooth_beta * smooth + (1.0 - tc.smooth_beta) * raw;
    const double smooth_hat =
        smooth / (1.0 - std::pow(tc.smooth_beta, double(t + 1)));
    stats.raw_losses.push_back(raw);
    if (first_n < 100) {
      first_sum += raw;
      ++first_n;
    }
    stats.final_raw = raw;
    stats.final_smoothed = smooth_hat;

    if (csv.is_open())
      csv << (t + 1) << ',' << raw << ',' << smooth_hat << ','
          << optim.lr_at(t) << ',' << delta_sigma(u, lc.dsig) << '\n';
    if (opt.verbose && ((t + 1) % 50 == 0 || t == 0))
      std::fprintf(stderr, "step %lld/%lld  raw %.5f  smoothed %.5f\n",
                   (long long)(t + 1), (long long)steps, raw, smooth_hat);

    const bool last = (t + 1 == steps);
    if (!opt.checkpoint_path.empty() &&
        (last || (tc.checkpoint_every > 0 &&
                  (t + 1) % tc.checkpoint_every == 0))) {
      save_checkpoint(opt.checkpoint_path, prof, model.params(),
                      &ema.shadow());
    }
  }
  stats.first100_mean = first_n > 0 ? first_sum / double(first_n) : 0.0;
  return stats;
}

}  // namespace dualcodec
