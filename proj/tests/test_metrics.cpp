#include <cmath>

#include "doctest.h"
#include "duq/metrics.hpp"
#include "duq/rng.hpp"
#include "oracles.hpp"

using namespace duq;

namespace {

TensorMap binary_map(int h, int w, std::uint64_t seed, double p = 0.5) {
  RngStream rng(seed, 0);
  TensorMap m(1, h, w);
  for (auto& v : m.data()) v = rng.bernoulli(p) ? 1.0 : 0.0;
  return m;
}

// Prediction values spanning exact endpoints, exact bin edges and interior
// values, so every ECE bin gets exercised.
TensorMap mixed_pred(int h, int w, std::uint64_t seed) {
  RngStream rng(seed, 1);
  TensorMap m(1, h, w);
  for (auto& v : m.data()) {
    const auto pick = rng.uniform_int(6);
    if (pick == 0) v = 0.0;
    else if (pick == 1) v = 1.0;
    else if (pick == 2) v = 0.5;
    else if (pick == 3) v = 0.1 * static_cast<double>(rng.uniform_int(11));
    else v = rng.uniform();
  }
  return m;
}

}  // namespace

TEST_CASE("mae trivial and hand cases") {
  TensorMap y = binary_map(4, 4, 5);
  CHECK(mae(y, y) == 0.0);
  TensorMap inv(1, 4, 4);
  for (std::size_t i = 0; i < y.size(); ++i) inv[i] = 1.0 - y[i];
  CHECK(mae(inv, y) == 1.0);

  TensorMap s(1, 2, 2, {0.2, 0.8, 0.5, 0.0});
  TensorMap g(1, 2, 2, {0.0, 1.0, 1.0, 0.0});
  CHECK(mae(s, g) == doctest::Approx(0.225).epsilon(1e-12));
}

TEST_CASE("f_measure on exact predictions") {
  TensorMap y = binary_map(6, 6, 7);
  // s == y is perfect at every threshold below 1; the t = 1 term is the
  // empty-prediction convention and contributes 0.
  CHECK(f_measure(y, y) == doctest::Approx(255.0 / 256.0).epsilon(1e-12));
  TensorMap inv(1, 6, 6);
  for (std::size_t i = 0; i < y.size(); ++i) inv[i] = 1.0 - y[i];
  CHECK(f_measure(inv, y) == 0.0);
}

TEST_CASE("f_measure matches the per-threshold reference on the 2x2 case") {
  TensorMap s(1, 2, 2, {0.2, 0.8, 0.5, 0.0});
  TensorMap g(1, 2, 2, {0.0, 1.0, 1.0, 0.0});
  const double ref = testing::ref_f_measure(s, g);
  CHECK(f_measure(s, g) == ref);
  // Frozen from the reference: 51 thresholds at the three-positive point
  // (F = 13/18), 77 at F = 1, 76 at the single-positive point (F = 0.8125).
  CHECK(ref == doctest::Approx((51.0 * 13 / 18 + 77.0 + 76.0 * 0.8125) / 256.0)
                   .epsilon(1e-12));
}

TEST_CASE("f_measure rejects all-zero ground truth") {
  TensorMap s(1, 2, 2, {0.2, 0.8, 0.5, 0.0});
  TensorMap g(1, 2, 2);
  CHECK_THROWS_AS(f_measure(s, g), usage_error);
}

TEST_CASE("f_measure against reference on random grayscale maps") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    RngStream rng(seed, 3);
    const int h = 2 + static_cast<int>(rng.uniform_int(7));
    const int w = 2 + static_cast<int>(rng.uniform_int(7));
    TensorMap s(1, h, w);
    for (auto& v : s.data()) v = rng.uniform();
    TensorMap y = binary_map(h, w, seed + 100);
    bool any = false;
    for (double v : y.data()) any = any || v > 0.5;
    if (!any) y[0] = 1.0;
    CHECK(f_measure(s, y) == testing::ref_f_measure(s, y));
  }
}

TEST_CASE("ece_dense: binary prediction equal to gt is perfectly calibrated") {
  TensorMap y = binary_map(8, 8, 11);
  CHECK(ece_dense(y, y) == 0.0);
}

TEST_CASE("ece_dense: constant 0.5 prediction occupies one bin") {
  TensorMap s(1, 4, 4);
  s.fill(0.5);
  TensorMap y = binary_map(4, 4, 13);
  EceBins bins = ece_bins(s, y);
  int occupied = 0;
  for (int m = 0; m < EceBins::kBins; ++m) {
    if (bins.counts[m] > 0) {
      ++occupied;
      CHECK(bins.conf[m] == 0.5);
    }
  }
  CHECK(occupied == 1);
  CHECK(bins.ece == testing::ref_ece_dense(s, y));
}

TEST_CASE("ece_dense equals the brute-force reference on 2x2..8x8 maps") {
  for (int size = 2; size <= 8; ++size) {
    for (std::uint64_t seed = 0; seed < 12; ++seed) {
      TensorMap s = mixed_pred(size, size, seed * 31 + size);
      TensorMap y = binary_map(size, size, seed * 17 + size);
      CHECK(ece_dense(s, y) == testing::ref_ece_dense(s, y));
    }
  }
}

TEST_CASE("ece_dense is invariant to pixel permutation") {
  TensorMap s = mixed_pred(4, 4, 3);
  TensorMap y = binary_map(4, 4, 4);
  const double base = ece_dense(s, y);
  // Reverse both maps: same multiset of (s, y) pairs.
  TensorMap s2(1, 4, 4), y2(1, 4, 4);
  for (std::size_t i = 0; i < s.size(); ++i) {
    s2[i] = s[s.size() - 1 - i];
    y2[i] = y[s.size() - 1 - i];
  }
  CHECK(ece_dense(s2, y2) == doctest::Approx(base).epsilon(1e-15));
  CHECK(base >= 0.0);
  CHECK(base <= 1.0);
}

TEST_CASE("pavpu: oracle uncertainty on inaccurate patches scores 1.0 at t=0.5") {
  // 8x8, g=4: four patches. Make patch (0,0) fully wrong, others right.
  TensorMap y = binary_map(8, 8, 21);
  TensorMap s = y;
  for (int yy = 0; yy < 4; ++yy) {
    for (int xx = 0; xx < 4; ++xx) s.at(0, yy, xx) = 1.0 - s.at(0, yy, xx);
  }
  TensorMap u(1, 8, 8);
  for (int yy = 0; yy < 4; ++yy) {
    for (int xx = 0; xx < 4; ++xx) u.at(0, yy, xx) = 1.0;
  }
  PavpuTable t = pavpu(s, y, u, 4);
  CHECK(t.pavpu[4] == 1.0);  // t = 0.5
  auto ref = testing::ref_pavpu(s, y, u, 4);
  for (int k = 0; k < 10; ++k) {
    CHECK(t.pavpu[k] == ref.bins[k]);
    CHECK(t.n_ac[k] == ref.n_ac[k]);
    CHECK(t.n_au[k] == ref.n_au[k]);
    CHECK(t.n_ic[k] == ref.n_ic[k]);
    CHECK(t.n_iu[k] == ref.n_iu[k]);
  }
}

TEST_CASE("pavpu: all patches accurate and certain gives 1.0 at all bins") {
  TensorMap y = binary_map(8, 8, 23);
  TensorMap u(1, 8, 8);
  PavpuTable t = pavpu(y, y, u, 4);
  for (int k = 0; k < 10; ++k) CHECK(t.pavpu[k] == 1.0);
  CHECK(t.mean_pavpu == 1.0);
}

TEST_CASE("pavpu counts always partition the patch set") {
  RngStream rng(29, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const int size = 2 + static_cast<int>(rng.uniform_int(7));
    TensorMap s = mixed_pred(size, size, trial + 400);
    TensorMap y = binary_map(size, size, trial + 500);
    TensorMap u(1, size, size);
    for (auto& v : u.data()) v = rng.uniform();
    for (int g : {2, 4}) {
      PavpuTable t = pavpu(s, y, u, g);
      auto ref = testing::ref_pavpu(s, y, u, g);
      for (int k = 0; k < 10; ++k) {
        CHECK(t.n_ac[k] + t.n_au[k] + t.n_ic[k] + t.n_iu[k] ==
              static_cast<std::size_t>(t.patch_count));
        CHECK(t.pavpu[k] == ref.bins[k]);
      }
      CHECK(t.mean_pavpu == ref.mean);
    }
  }
}

TEST_CASE("aggregate means and permutation invariance") {
  ImageMetrics a{"a.dmap", 0.1, 0.8, 0.0, 0.9, false};
  ImageMetrics b{"b.dmap", 0.3, 0.6, 0.1, 0.7, false};
  auto r1 = aggregate("ds", "m", {a, b});
  CHECK(r1.ece_d == doctest::Approx(0.05));
  CHECK(r1.mae == doctest::Approx(0.2));
  auto r2 = aggregate("ds", "m", {b, a});
  CHECK(r2.ece_d == doctest::Approx(r1.ece_d));
  CHECK(r2.f_beta == doctest::Approx(r1.f_beta));

  auto single = aggregate("ds", "m", {a});
  CHECK(single.mae == a.mae);
  CHECK(single.pavpu == a.pavpu);

  CHECK_THROWS_AS(aggregate("ds", "m", {}), usage_error);
}

TEST_CASE("aggregate skips f-measure of excluded images") {
  ImageMetrics a{"a", 0.1, 0.8, 0.0, 0.9, false};
  ImageMetrics b{"b", 0.3, 0.0, 0.1, 0.7, true};
  auto r = aggregate("ds", "m", {a, b});
  CHECK(r.f_beta == doctest::Approx(0.8));
  CHECK(r.f_beta_excluded == 1);
}
