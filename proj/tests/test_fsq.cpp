#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <set>

#include "dualcodec/fsq.hpp"

using namespace dualcodec;
using Catch::Approx;
using D = Tensor<double>;

namespace {
bool on_grid(double v, int n, double tol = 1e-6) {
  return std::abs(v * n - std::round(v * n)) <= tol * n && std::abs(v) <= 1.0 + tol;
}
}  // namespace

TEST_CASE("fsq config arithmetic and validation") {
  FsqConfig full;  // n=5, d=4
  CHECK(codebook_size(full) == 14641);
  CHECK(codebook_size({1, 3, 0.0}) == 27);
  CHECK_THROWS_AS(codebook_size({0, 4, 0.0}), ConfigError);
  CHECK_THROWS_AS(codebook_size({5, 0, 0.0}), ConfigError);
  CHECK_THROWS_AS(codebook_size({5, 20, 0.0}), ConfigError);  // 11^20 > u64
  CHECK_THROWS_AS(validate({5, 4, 1.5}), ConfigError);
  CHECK_THROWS_AS(validate({5, 4, -0.1}), ConfigError);
}

TEST_CASE("quantize rounds tanh onto the level grid") {
  FsqConfig cfg;  // n=5
  auto z = D::from({3}, {0.0, std::atanh(0.43), 100.0});
  auto lat = quantize(z, cfg);
  CHECK(lat.quantized);
  CHECK(lat.values.data()[0] == 0.0);
  CHECK(lat.values.data()[1] == Approx(0.4).margin(1e-12));
  CHECK(lat.values.data()[2] == 1.0);  // saturated tanh -> top level

  // straight-through gradient: d/dz round(n*tanh(z))/n == 1 - tanh(z)^2
  auto zg = D::from({4}, {-1.3, -0.2, 0.4, 2.0}).set_requires_grad();
  {
    Graph<double> g;
    auto loss = sum(quantize_values(zg, cfg));
    g.backward(loss);
  }
  for (int i = 0; i < 4; ++i) {
    const double t = std::tanh(zg.data()[i]);
    CHECK(zg.grad_data()[i] == Approx(1.0 - t * t).epsilon(1e-12));
  }
}

TEST_CASE("quantized values stay on the grid and re-round to themselves") {
  FsqConfig cfg;
  Rng rng(7);
  auto z = D::randn({64, 4}, rng, 2.0);
  auto lat = quantize(z, cfg);
  for (int64_t i = 0; i < lat.values.numel(); ++i)
    CHECK(on_grid(lat.values.data()[i], cfg.n));
  auto again = quantize_bounded(lat.values, cfg);
  for (int64_t i = 0; i < lat.values.numel(); ++i)
    CHECK(again.data()[i] == lat.values.data()[i]);  // bitwise idempotent
}

TEST_CASE("uniform stimulus exercises every level of every dimension") {
  FsqConfig cfg;  // n=5: 11 levels
  Rng rng(11);
  auto z = D::uniform({2500, 4}, rng, -4.0, 4.0);
  auto lat = quantize(z, cfg);
  for (int dim = 0; dim < 4; ++dim) {
    std::set<long> seen;
    for (int64_t e = 0; e < 2500; ++e)
      seen.insert(lround(lat.values.data()[e * 4 + dim] * cfg.n));
    CHECK(seen.size() == 11);
  }
}

TEST_CASE("fsq dropout bypasses rounding per chunk") {
  FsqConfig cfg;
  Rng rng(21);
  auto z = D::randn({8, 4}, rng);

  SECTION("p=1 is a bit-exact tanh passthrough") {
    cfg.dropout_p = 1.0;
    auto lat = fsq_dropout(z, cfg, rng, true);
    CHECK_FALSE(lat.quantized);
    auto t = tanh(z);
    for (int64_t i = 0; i < z.numel(); ++i)
      CHECK(lat.values.data()[i] == t.data()[i]);
  }
  SECTION("p=0 matches plain quantization bitwise") {
    cfg.dropout_p = 0.0;
    auto lat = fsq_dropout(z, cfg, rng, true);
    CHECK(lat.quantized);
    auto q = quantize(z, cfg);
    for (int64_t i = 0; i < z.numel(); ++i)
      CHECK(lat.values.data()[i] == q.values.data()[i]);
  }
  SECTION("inference mode refuses the stochastic path") {
    CHECK_THROWS_AS(fsq_dropout(z, cfg, rng, false), StateError);
  }
  SECTION("bypass fraction tracks the configured probability") {
    cfg.dropout_p = 0.75;
    int bypassed = 0;
    const int chunks = 10000;
    for (int c = 0; c < chunks; ++c) {
      auto lat = fsq_dropout(z, cfg, rng, true);
      // classify by value, not by flag: off-grid entries prove the bypass
      bool off_grid = false;
      for (int64_t i = 0; i < lat.values.numel(); ++i)
        if (!on_grid(lat.values.data()[i], cfg.n)) off_grid = true;
      CHECK(off_grid == !lat.quantized);
      if (off_grid) ++bypassed;
    }
    const double frac = double(bypassed) / chunks;
    CHECK(frac > 0.73);
    CHECK(frac < 0.77);
  }
}

TEST_CASE("token packing follows base-11 arithmetic") {
  FsqConfig cfg;  // n=5, d=4
  auto lat = LatentSet<double>{
      D::from({3, 4},
              {-1.0, -1.0, -1.0, -1.0,   //
               0.0, 0.2, -0.4, 1.0,      //
               1.0, 1.0, 1.0, 1.0}),
      true};
  auto tok = levels_to_indices(lat, cfg);
  REQUIRE(tok.indices.size() == 3);
  CHECK(tok.indices[0] == 0);
  CHECK(tok.indices[1] == 13744);  // 5 + 6*11 + 3*121 + 10*1331
  CHECK(tok.indices[2] == 14640);  // codebook_size - 1

  auto back = indices_to_levels<double>(tok, cfg);
  CHECK(back.quantized);
  for (int64_t i = 0; i < lat.values.numel(); ++i)
    CHECK(back.values.data()[i] == Approx(lat.values.data()[i]).margin(1e-12));
}

TEST_CASE("token packing rejects bad inputs") {
  FsqConfig cfg;
  SECTION("unquantized latents") {
    LatentSet<double> lat{D::zeros({2, 4}), false};
    CHECK_THROWS_AS(levels_to_indices(lat, cfg), StateError);
  }
  SECTION("off-grid value") {
    LatentSet<double> lat{D::from({1, 4}, {0.0, 0.13, 0.0, 0.0}), true};
    CHECK_THROWS_AS(levels_to_indices(lat, cfg), DataError);
  }
  SECTION("value outside the bound") {
    LatentSet<double> lat{D::from({1, 4}, {0.0, 0.0, 0.0, 1.2}), true};
    CHECK_THROWS_AS(levels_to_indices(lat, cfg), DataError);
  }
  SECTION("wrong embedding width") {
    LatentSet<double> lat{D::zeros({2, 3}), true};
    CHECK_THROWS_AS(levels_to_indices(lat, cfg), ShapeError);
  }
  SECTION("index beyond the codebook") {
    TokenChunk tok{{14641}};
    CHECK_THROWS_AS(indices_to_levels<double>(tok, cfg), DataError);
  }
}

TEST_CASE("packing and unpacking are mutually inverse") {
  SECTION("exhaustive over the n=1 d=3 codebook") {
    FsqConfig small{1, 3, 0.0};
    for (uint64_t idx = 0; idx < 27; ++idx) {
      TokenChunk tok{{idx}};
      auto lat = indices_to_levels<double>(tok, small);
      auto rt = levels_to_indices(lat, small);
      REQUIRE(rt.indices.size() == 1);
      CHECK(rt.indices[0] == idx);
    }
  }
  SECTION("random indices through the full codebook") {
    FsqConfig cfg;
    Rng rng(33);
    TokenChunk tok;
    for (int i = 0; i < 1000; ++i)
      tok.indices.push_back(rng.below(14641));
    auto lat = indices_to_levels<double>(tok, cfg);
    auto rt = levels_to_indices(lat, cfg);
    for (size_t i = 0; i < tok.indices.size(); ++i)
      CHECK(rt.indices[i] == tok.indices[i]);
  }
  SECTION("random grid levels through packing") {
    FsqConfig cfg;
    Rng rng(34);
    auto z = D::randn({100, 4}, rng, 2.0);
    auto lat = quantize(z, cfg);
    auto rt = indices_to_levels<double>(levels_to_indices(lat, cfg), cfg);
    for (int64_t i = 0; i < lat.values.numel(); ++i)
      CHECK(rt.values.data()[i] == Approx(lat.values.data()[i]).margin(1e-9));
  }
}

TEST_CASE("bitrate arithmetic") {
  FsqConfig cfg;  // n=5, d=4
  const double chunk_seconds = 32.0 * 1024.0 / 44100.0;
  const double bps = bitrate(cfg, 128, chunk_seconds);
  CHECK(bps == Approx(2384.0).margin(1.0));
  CHECK(bps / 1000.0 == Approx(2.38).margin(0.01));  // the headline rate

  // hypothetical binary codebook: 1 bit per chunk duration
  CHECK(bitrate(2.0, 1, 1, 1.0) == Approx(1.0));
  CHECK(bitrate(2.0, 1, 1, 0.5) == Approx(2.0));

  // linearity in the token count
  CHECK(bitrate(cfg, 256, chunk_seconds) == Approx(2.0 * bps));

  CHECK_THROWS_AS(bitrate(cfg, 128, 0.0), ConfigError);
}
