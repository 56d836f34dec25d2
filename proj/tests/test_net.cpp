#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dualcodec/net.hpp"
#include "fd_check.hpp"

using namespace dualcodec;
using Catch::Approx;
using D = Tensor<double>;

namespace {

// smallest legal geometry: one audio token per chunk
ModelConfig micro_config() {
  ModelConfig cfg;
  cfg.conv_channels = {2, 3, 4, 5};
  cfg.conv_layers = {1, 1, 1, 1};
  cfg.transformer_blocks = 1;
  cfg.hidden_dim = 8;
  cfg.head_dim = 4;
  cfg.mlp_mult = 2;
  cfg.k_summary = 2;
  cfg.d_lat = 3;
  cfg.sigma_embed_channels = 8;
  cfg.in_channels = 2;
  cfg.freq_bins = 16;
  cfg.t_chunk = 4;
  return cfg;
}

template <class T>
std::vector<Tensor<T>> random_cc(const ModelConfig& cfg, int64_t n, Rng& rng) {
  std::vector<Tensor<T>> cc;
  for (const Shape& s : patch_grid_shapes(cfg))
    cc.push_back(Tensor<T>::randn({n, s[0], s[1], s[2]}, rng));
  return cc;
}

}  // namespace

TEST_CASE("model config validation") {
  ModelConfig cfg = micro_config();
  CHECK_NOTHROW(validate(cfg));
  SECTION("frequency divisibility") {
    cfg.freq_bins = 24;
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  }
  SECTION("time divisibility") {
    cfg.t_chunk = 6;
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  }
  SECTION("head divisibility") {
    cfg.head_dim = 3;
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  }
  SECTION("level count") {
    cfg.conv_channels = {2, 3, 4};
    CHECK_THROWS_AS(validate(cfg), ConfigError);
  }
}

TEST_CASE("patchifier and de-patchifier ladders mirror exactly") {
  for (ModelConfig cfg : {micro_config(), ModelConfig{}}) {
    const auto down = patch_grid_shapes(cfg);
    const auto up = depatch_grid_shapes(cfg);
    REQUIRE(down.size() == 4);
    for (size_t i = 0; i < 4; ++i) CHECK(down[i] == up[i]);
  }
}

TEST_CASE("edm coefficients satisfy the boundary condition") {
  EdmCoefficients edm;
  CHECK(edm.c_skip(edm.sigma_min) == 1.0);  // exact, not approximate
  CHECK(edm.c_out(edm.sigma_min) == 0.0);
  const double s = edm.sigma_data;
  const double d = s - edm.sigma_min;
  CHECK(edm.c_skip(s) ==
        Approx(s * s / (d * d + s * s)).epsilon(1e-15));
  CHECK(edm.c_out(s) == Approx(s * d / std::sqrt(2.0 * s * s)).epsilon(1e-12));
  CHECK(edm.c_in(s) == Approx(1.0 / std::sqrt(2.0 * s * s)).epsilon(1e-12));
  CHECK_THROWS_AS(edm.check(0.001), DomainError);
  CHECK_THROWS_AS(edm.check(81.0), DomainError);
}

TEST_CASE("edm_wrap blends skip and output paths") {
  EdmCoefficients edm;
  Rng rng(50);
  auto x = D::randn({3, 2, 4, 4}, rng);
  auto raw = D::randn({3, 2, 4, 4}, rng);

  SECTION("sigma_min returns the input bitwise") {
    auto f = edm_wrap(raw, x, {edm.sigma_min, edm.sigma_min, edm.sigma_min},
                      edm);
    for (int64_t i = 0; i < x.numel(); ++i)
      CHECK(f.data()[i] == x.data()[i]);
  }
  SECTION("zero network output leaves the scaled skip") {
    auto zero = D::zeros({3, 2, 4, 4});
    auto f = edm_wrap(zero, x, {0.5, 1.0, 2.0}, edm);
    const double sig[] = {0.5, 1.0, 2.0};
    for (int64_t b = 0; b < 3; ++b)
      for (int64_t i = 0; i < 32; ++i)
        CHECK(f.data()[b * 32 + i] ==
              Approx(edm.c_skip(sig[b]) * x.data()[b * 32 + i]).margin(1e-12));
  }
  SECTION("out-of-range sigma is rejected") {
    CHECK_THROWS_AS(edm_wrap(raw, x, {0.5, 1.0, 100.0}, edm), DomainError);
    CHECK_THROWS_AS(edm_wrap(raw, x, {0.5, 1.0}, edm), ShapeError);
  }
}

TEST_CASE("sigma embedding is deterministic and distinguishes scales") {
  auto a = sigma_embed<double>({0.7, 0.7, 1.4}, 16);
  CHECK(a.shape() == Shape{3, 16});
  for (int i = 0; i < 16; ++i) {
    CHECK(a.data()[i] == a.data()[16 + i]);  // same sigma, same features
    CHECK(std::isfinite(a.data()[i]));
  }
  double diff = 0;
  for (int i = 0; i < 16; ++i)
    diff = std::max(diff, std::abs(a.data()[i] - a.data()[32 + i]));
  CHECK(diff > 1e-3);  // sigma vs 2*sigma separated

  EdmCoefficients edm;
  auto ends = sigma_embed<double>({edm.sigma_min, edm.sigma_max}, 16);
  for (int64_t i = 0; i < ends.numel(); ++i)
    CHECK(std::isfinite(ends.data()[i]));

  CHECK_THROWS_AS(sigma_embed<double>({1.0}, 15), ConfigError);
  CHECK_THROWS_AS(sigma_embed<double>({0.0}, 16), DomainError);
}

TEST_CASE("chunked causal mask blocks exactly the left-to-right entries") {
  auto m = chunked_causal_mask<double>(2, 2);
  const double ninf = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      const bool blocked = r < 2 && c >= 2;
      CHECK(m.data()[r * 4 + c] == (blocked ? ninf : 0.0));
    }
  auto solo = chunked_causal_mask<double>(3, 0);
  for (int64_t i = 0; i < solo.numel(); ++i) CHECK(solo.data()[i] == 0.0);
  CHECK_THROWS_AS(chunked_causal_mask<double>(0, 2), ConfigError);
}

TEST_CASE("parameter store registers, finds, and rejects duplicates") {
  ParamStore<double> ps(5);
  auto w = ps.randn("w", {2, 3});
  CHECK(w.requires_grad());
  CHECK(ps.zeros("b", {3}).numel() == 3);
  CHECK(ps.total_count() == 9);
  CHECK(ps.find("w").data() == w.data());
  CHECK_THROWS_AS(ps.randn("w", {1}), UsageError);
  CHECK_THROWS_AS(ps.find("missing"), UsageError);
}

TEST_CASE("model init is seed-deterministic") {
  ModelConfig cfg = micro_config();
  Model<float> a(cfg, 99), b(cfg, 99), c(cfg, 100);
  const auto& ea = a.params().entries();
  const auto& eb = b.params().entries();
  const auto& ec = c.params().entries();
  REQUIRE(ea.size() == eb.size());
  bool any_diff = false;
  for (size_t i = 0; i < ea.size(); ++i) {
    CHECK(ea[i].first == eb[i].first);
    for (int64_t j = 0; j < ea[i].second.numel(); ++j) {
      CHECK(ea[i].second.data()[j] == eb[i].second.data()[j]);
      if (ea[i].second.data()[j] != ec[i].second.data()[j]) any_diff = true;
    }
  }
  CHECK(any_diff);
}

TEST_CASE("encoder emits latents of the configured shape") {
  ModelConfig cfg = micro_config();
  Model<double> model(cfg, 7);
  Rng rng(8);
  auto chunks = D::randn({2, 2, 16, 4}, rng);
  auto z = model.encode(chunks);
  CHECK(z.shape() == Shape{2, cfg.k_summary, cfg.d_lat});
  for (int64_t i = 0; i < z.numel(); ++i) CHECK(std::isfinite(z.data()[i]));

  // two different chunks produce different latents at random init
  double diff = 0;
  for (int64_t i = 0; i < cfg.k_summary * cfg.d_lat; ++i)
    diff = std::max(diff, std::abs(z.data()[i] -
                                   z.data()[cfg.k_summary * cfg.d_lat + i]));
  CHECK(diff > 1e-9);

  CHECK_THROWS_AS(model.encode(D::zeros({1, 2, 16, 8})), ShapeError);
}

TEST_CASE("upsampler emits mirrored finite cross-connections") {
  ModelConfig cfg = micro_config();
  Model<double> model(cfg, 9);
  auto lat = D::zeros({2, cfg.k_summary, cfg.d_lat});  // PAD-style zeros
  auto cc = model.upsample(lat);
  const auto want = patch_grid_shapes(cfg);
  REQUIRE(cc.size() == 4);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(cc[i].shape() == Shape{2, want[i][0], want[i][1], want[i][2]});
    for (int64_t j = 0; j < cc[i].numel(); ++j)
      CHECK(std::isfinite(cc[i].data()[j]));
  }

  // identical latents give bitwise identical maps
  Rng rng(10);
  auto l2 = D::uniform({1, cfg.k_summary, cfg.d_lat}, rng, -1.0, 1.0);
  auto ca = model.upsample(l2);
  auto cb = model.upsample(l2);
  for (size_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < ca[i].numel(); ++j)
      CHECK(ca[i].data()[j] == cb[i].data()[j]);

  CHECK_THROWS_AS(model.upsample(D::zeros({1, 3, cfg.d_lat})), ShapeError);
}

TEST_CASE("decode_denoise respects the boundary condition bitwise") {
  ModelConfig cfg = micro_config();
  Model<double> model(cfg, 11);
  Rng rng(12);
  const double smin = cfg.edm.sigma_min;
  auto nl = D::randn({2, 2, 16, 4}, rng);
  auto nr = D::randn({2, 2, 16, 4}, rng);
  auto ccl = random_cc<double>(cfg, 2, rng);
  auto ccr = random_cc<double>(cfg, 2, rng);
  auto [fl, fr] = model.decode_denoise(nl, nr, {smin, smin}, {smin, smin},
                                       ccl, ccr);
  CHECK(fl.shape() == nl.shape());
  CHECK(fr.shape() == nr.shape());
  for (int64_t i = 0; i < nl.numel(); ++i) {
    CHECK(fl.data()[i] == nl.data()[i]);
    CHECK(fr.data()[i] == nr.data()[i]);
  }
}

TEST_CASE("decode_denoise validates sigma and cross-connection shapes") {
  ModelConfig cfg = micro_config();
  Model<double> model(cfg, 13);
  Rng rng(14);
  auto nl = D::randn({1, 2, 16, 4}, rng);
  auto nr = D::randn({1, 2, 16, 4}, rng);
  auto ccl = random_cc<double>(cfg, 1, rng);
  auto ccr = random_cc<double>(cfg, 1, rng);

  CHECK_THROWS_AS(
      model.decode_denoise(nl, nr, {1000.0}, {1.0}, ccl, ccr), DomainError);

  auto bad = ccl;
  bad[2] = D::zeros({1, 4, 3, 1});
  CHECK_THROWS_AS(model.decode_denoise(nl, nr, {1.0}, {1.0}, bad, ccr),
                  SymmetryError);
  bad = ccl;
  bad.pop_back();
  CHECK_THROWS_AS(model.decode_denoise(nl, nr, {1.0}, {1.0}, bad, ccr),
                  SymmetryError);
}

TEST_CASE("left chunk output is bitwise blind to the right chunk") {
  ModelConfig cfg = micro_config();
  Model<double> model(cfg, 15);
  Rng rng(16);
  auto nl = D::randn({1, 2, 16, 4}, rng);
  auto ccl = random_cc<double>(cfg, 1, rng);

  std::vector<double> base;
  for (int trial = 0; trial < 5; ++trial) {
    Rng salt = rng.derive(uint64_t(trial));
    auto nr = D::randn({1, 2, 16, 4}, salt, 10.0);
    auto ccr = random_cc<double>(cfg, 1, salt);
    const double sr = 0.01 + 7.9 * salt.uniform();
    auto [fl, fr] = model.decode_denoise(nl, nr, {1.25}, {sr}, ccl, ccr);
    if (trial == 0) {
      base.assign(fl.data(), fl.data() + fl.numel());
    } else {
      for (int64_t i = 0; i < fl.numel(); ++i)
        CHECK(fl.data()[i] == base[size_t(i)]);
    }
  }
}

TEST_CASE("full pipeline gradients pass finite differences") {
  ModelConfig cfg = micro_config();
  Model<double> model(cfg, 17);
  Rng rng(18);

  // nudge every parameter so zero-initialized heads see gradient too
  for (auto& [name, t] : model.params().entries()) {
    Tensor<double> p = t;
    for (int64_t i = 0; i < p.numel(); ++i)
      p.data()[i] += 0.05 * rng.normal();
  }

  auto clean_l = D::randn({1, 2, 16, 4}, rng);
  auto clean_r = D::randn({1, 2, 16, 4}, rng);
  auto eps_l = D::randn({1, 2, 16, 4}, rng);
  auto eps_r = D::randn({1, 2, 16, 4}, rng);
  const double sl = 0.8, sr = 1.7;
  auto noisy_l = add(clean_l, mul_scalar(eps_l, sl));
  auto noisy_r = add(clean_r, mul_scalar(eps_r, sr));

  auto loss_fn = [&]() {
    auto zl = model.encode(clean_l);
    auto zr = model.encode(clean_r);
    auto ccl = model.upsample(tanh(zl));
    auto ccr = model.upsample(tanh(zr));
    auto [fl, fr] = model.decode_denoise(noisy_l, noisy_r, {sl}, {sr}, ccl,
                                         ccr);
    return add(sum(mul(fl, fl)), sum(mul(fr, fr)));
  };

  // a spread of small parameter tensors across all three networks
  std::vector<Tensor<double>> picks = {
      model.params().find("enc.proj_lat.b"),
      model.params().find("enc.patch.lv0.c0.b"),
      model.params().find("enc.ln.g"),
      model.params().find("up.mask"),
      model.params().find("up.depatch.up1.b"),
      model.params().find("dec.sigma.fc2.b"),
      model.params().find("dec.block0.mod.b"),
      model.params().find("dec.depatch.out.b"),
      model.params().find("dec.patch.down0.b"),
  };
  testutil::fd_check(loss_fn, picks, 2e-3, 1e-5);
}

TEST_CASE("default config spends more parameters on transformers than convs") {
  Model<float> model(ModelConfig{}, 1);
  int64_t conv = 0, trans = 0, total = 0;
  for (const auto& [name, t] : model.params().entries()) {
    total += t.numel();
    if (name.find(".patch.") != std::string::npos ||
        name.find(".depatch.") != std::string::npos)
      conv += t.numel();
    else if (name.find(".block") != std::string::npos)
      trans += t.numel();
  }
  CHECK(trans > conv);
  CHECK(total > 100'000'000);  // the stated scale of the reference setup
}
