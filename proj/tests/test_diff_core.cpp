#include <cmath>
#include <vector>

#include "doctest.h"
#include "duq/layers.hpp"
#include "duq/param_store.hpp"
#include "duq/rng.hpp"
#include "duq/tensor.hpp"
#include "oracles.hpp"

using namespace duq;

namespace {

TensorMap random_map(int c, int h, int w, RngStream& rng, double lo = -1.0,
                     double hi = 1.0) {
  TensorMap m(c, h, w);
  for (auto& v : m.data()) v = rng.uniform(lo, hi);
  return m;
}

}  // namespace

TEST_CASE("TensorMap rejects non-finite values at construction") {
  std::vector<double> data = {0.0, 1.0, std::nan(""), 2.0};
  CHECK_THROWS_AS(TensorMap(1, 2, 2, std::move(data)), numeric_error);
  std::vector<double> inf = {0.0, 1.0, INFINITY, 2.0};
  CHECK_THROWS_AS(TensorMap(2, 2, 1, std::move(inf)), numeric_error);
  CHECK_THROWS_AS(TensorMap(1, 2, 2, std::vector<double>{1.0}), usage_error);
}

TEST_CASE("RngStream reproducibility and stream independence") {
  RngStream a(42, 7), b(42, 7), c(42, 8);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 64; ++i) {
    const double va = a.uniform(), vb = b.uniform(), vc = c.uniform();
    all_equal = all_equal && (va == vb);
    any_diff = any_diff || (va != vc);
  }
  CHECK(all_equal);
  CHECK(any_diff);

  RngStream d = RngStream(9, 1).substream(3, 4);
  RngStream e = RngStream(9, 1).substream(3, 4);
  CHECK(d.normal() == e.normal());
}

TEST_CASE("RngStream normal moments") {
  RngStream rng(123, 0);
  double sum = 0.0, sq = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    sum += v;
    sq += v * v;
  }
  CHECK(std::fabs(sum / n) < 0.01);
  CHECK(std::fabs(sq / n - 1.0) < 0.02);
}

TEST_CASE("forward: 1x1 identity conv preserves the map") {
  ParamStore store;
  Sequential net("id", {LayerSpec::Conv2d(1, 1, 1, 1, 0)});
  net.bind(store, Shape{1, 5, 4});
  store.values(0)[0] = 1.0;  // identity kernel, zero bias
  RngStream rng(1, 0);
  TensorMap x = random_map(1, 5, 4, rng);
  TensorMap y = net.forward(store, x, ForwardMode{});
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("forward: dense W=[[2]] b=[1] x=[3] -> [7]") {
  ParamStore store;
  Sequential net("d", {LayerSpec::Dense(1, 1)});
  net.bind(store, Shape{1, 1, 1});
  store.values(0)[0] = 2.0;
  store.values(1)[0] = 1.0;
  TensorMap x(1, 1, 1, {3.0});
  TensorMap y = net.forward(store, x, ForwardMode{});
  CHECK(y[0] == doctest::Approx(7.0));
}

TEST_CASE("forward: 3-layer conv net matches nested-loop reference") {
  RngStream rng(7, 0);
  ParamStore store;
  Sequential net("c3", {LayerSpec::Conv2d(2, 4, 3, 1, 1), LayerSpec::Conv2d(4, 3, 3, 2, 0),
                        LayerSpec::Conv2d(3, 2, 1, 1, 0)});
  net.bind(store, Shape{2, 9, 11});
  net.init_params(store, rng);
  TensorMap x = random_map(2, 9, 11, rng);
  TensorMap y = net.forward(store, x, ForwardMode{});

  TensorMap r1 = testing::ref_conv2d(x, store.values(0), store.values(1), 4, 3, 1, 1);
  TensorMap r2 = testing::ref_conv2d(r1, store.values(2), store.values(3), 3, 3, 2, 0);
  TensorMap r3 = testing::ref_conv2d(r2, store.values(4), store.values(5), 2, 1, 1, 0);
  REQUIRE(y.same_shape(r3));
  double worst = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    worst = std::max(worst, std::fabs(y[i] - r3[i]));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("conv oracle equivalence over 120 random shapes/strides/paddings") {
  RngStream rng(99, 0);
  double worst = 0.0;
  for (int t = 0; t < 120; ++t) {
    const int ic = 1 + static_cast<int>(rng.uniform_int(3));
    const int oc = 1 + static_cast<int>(rng.uniform_int(3));
    const int k = 1 + 2 * static_cast<int>(rng.uniform_int(3));  // 1,3,5
    const int stride = 1 + static_cast<int>(rng.uniform_int(3));
    const int pad = static_cast<int>(rng.uniform_int(3));
    const int h = k + static_cast<int>(rng.uniform_int(10));
    const int w = k + static_cast<int>(rng.uniform_int(10));
    ParamStore store;
    Sequential net("c", {LayerSpec::Conv2d(ic, oc, k, stride, pad)});
    net.bind(store, Shape{ic, h, w});
    net.init_params(store, rng);
    for (auto& b : store.values(1)) b = rng.uniform(-0.5, 0.5);
    TensorMap x = random_map(ic, h, w, rng);
    TensorMap y = net.forward(store, x, ForwardMode{});
    TensorMap r = testing::ref_conv2d(x, store.values(0), store.values(1), oc, k, stride, pad);
    REQUIRE(y.same_shape(r));
    for (std::size_t i = 0; i < y.size(); ++i) {
      worst = std::max(worst, std::fabs(y[i] - r[i]));
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("forward reports shape mismatches with the offending layer index") {
  ParamStore store;
  Sequential net("bad", {LayerSpec::Conv2d(1, 2, 3, 1, 1), LayerSpec::Conv2d(3, 2, 3, 1, 1)});
  try {
    net.bind(store, Shape{1, 8, 8});
    FAIL("expected config_error");
  } catch (const config_error& e) {
    CHECK(std::string(e.what()).find("layer 1") != std::string::npos);
  }
}

TEST_CASE("backward: zero output gradient gives all-zero gradients") {
  RngStream rng(5, 0);
  ParamStore store;
  Sequential net("z", {LayerSpec::Conv2d(1, 3, 3, 1, 1), LayerSpec::LeakyRelu(0.01),
                       LayerSpec::Conv2d(3, 1, 3, 1, 1), LayerSpec::Sigmoid()});
  net.bind(store, Shape{1, 6, 6});
  net.init_params(store, rng);
  TensorMap x = random_map(1, 6, 6, rng);
  Cache cache;
  net.forward(store, x, ForwardMode{true, false}, &cache);
  Grads grads(store);
  TensorMap gout(1, 6, 6);
  TensorMap gin = net.backward(store, cache, gout, &grads);
  CHECK(grads.norm() == 0.0);
  for (double v : gin.data()) CHECK(v == 0.0);
}

TEST_CASE("backward: sigmoid at 0 with upstream 1 gives 0.25") {
  ParamStore store;
  Sequential net("s", {LayerSpec::Sigmoid()});
  net.bind(store, Shape{1, 1, 1});
  TensorMap x(1, 1, 1, {0.0});
  Cache cache;
  net.forward(store, x, ForwardMode{}, &cache);
  Grads grads(store);
  TensorMap gout(1, 1, 1, {1.0});
  TensorMap gin = net.backward(store, cache, gout, &grads);
  CHECK(gin[0] == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("backward rejects a stale cache") {
  ParamStore store;
  Sequential a("a", {LayerSpec::Relu()});
  Sequential b("b", {LayerSpec::Relu()});
  a.bind(store, Shape{1, 2, 2});
  b.bind(store, Shape{1, 2, 2});
  TensorMap x(1, 2, 2, {1.0, -1.0, 2.0, -2.0});
  Cache cache;
  a.forward(store, x, ForwardMode{}, &cache);
  TensorMap gout(1, 2, 2);
  Grads grads(store);
  CHECK_THROWS_AS(b.backward(store, cache, gout, &grads), numeric_error);
}

TEST_CASE("grad_check: pure dense linear net is exact to fp noise") {
  RngStream rng(11, 0);
  ParamStore store;
  Sequential net("lin", {LayerSpec::Dense(6, 5), LayerSpec::Dense(5, 3)});
  net.bind(store, Shape{1, 2, 3});
  net.init_params(store, rng);
  TensorMap x = random_map(1, 2, 3, rng);
  auto res = grad_check(net, store, x, {}, 1e-5, rng);
  CHECK(res.max_rel_error < 1e-9);
  CHECK(res.coords_checked >= 53);
}

TEST_CASE("grad_check: conv/leaky/sigmoid/upsample/concat composite") {
  RngStream rng(13, 0);
  ParamStore store;
  Sequential net("mix", {LayerSpec::Conv2d(2, 4, 3, 2, 1), LayerSpec::LeakyRelu(0.01),
                         LayerSpec::NearestUpsample(2), LayerSpec::ConcatChannels(3),
                         LayerSpec::Conv2d(7, 2, 3, 1, 1), LayerSpec::Sigmoid()});
  net.bind(store, Shape{2, 8, 8});
  net.init_params(store, rng);
  // Keep preactivations away from the leaky-relu kink.
  TensorMap x = random_map(2, 8, 8, rng, 0.2, 1.0);
  TensorMap side = random_map(3, 8, 8, rng);
  std::vector<TensorMap> sides{side};
  auto res = grad_check(net, store, x, sides, 1e-5, rng);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("grad_check: batch_norm in training mode") {
  RngStream rng(17, 0);
  ParamStore store;
  Sequential net("bn", {LayerSpec::BatchNorm(2), LayerSpec::LeakyRelu(0.01),
                        LayerSpec::Conv2d(2, 1, 3, 1, 1)});
  net.bind(store, Shape{2, 6, 6});
  net.init_params(store, rng);
  TensorMap x = random_map(2, 6, 6, rng, 0.1, 1.0);
  auto res = grad_check(net, store, x, {}, 1e-5, rng);
  CHECK(res.max_rel_error < 1e-3);
}

TEST_CASE("grad_check: conv feeding batch_norm") {
  // A conv bias ahead of batch norm has an exactly-zero gradient (the
  // normalization cancels the shift); a wider step keeps the FD noise on
  // those coordinates below the tolerance.
  RngStream rng(17, 0);
  ParamStore store;
  Sequential net("cbn", {LayerSpec::Conv2d(1, 4, 3, 1, 1), LayerSpec::BatchNorm(4),
                         LayerSpec::LeakyRelu(0.01), LayerSpec::Conv2d(4, 1, 3, 1, 1)});
  net.bind(store, Shape{1, 6, 6});
  net.init_params(store, rng);
  TensorMap x = random_map(1, 6, 6, rng, 0.1, 1.0);
  auto res = grad_check(net, store, x, {}, 3e-3, rng);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("grad_check: side-input gradients through concat") {
  RngStream rng(19, 0);
  ParamStore store;
  Sequential net("cc", {LayerSpec::ConcatChannels(2), LayerSpec::Conv2d(3, 2, 3, 1, 1)});
  net.bind(store, Shape{1, 5, 5});
  net.init_params(store, rng);
  TensorMap x = random_map(1, 5, 5, rng);
  TensorMap side = random_map(2, 5, 5, rng);

  TensorMap weights(2, 5, 5);
  for (auto& w : weights.data()) w = rng.uniform(-1.0, 1.0);
  ForwardMode mode{true, false};
  Cache cache;
  std::vector<TensorMap> sides{side};
  net.forward(store, x, sides, mode, &cache);
  Grads grads(store);
  std::vector<TensorMap> side_grads;
  net.backward(store, cache, weights, &grads, &side_grads);
  REQUIRE(side_grads.size() == 1);

  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t j = 0; j < side.size(); ++j) {
    TensorMap sp = side, sm = side;
    sp[j] += h;
    sm[j] -= h;
    std::vector<TensorMap> vp{sp}, vm{sm};
    TensorMap op = net.forward(store, x, vp, mode);
    TensorMap om = net.forward(store, x, vm, mode);
    double lp = 0.0, lm = 0.0;
    for (std::size_t i = 0; i < op.size(); ++i) {
      lp += weights[i] * op[i];
      lm += weights[i] * om[i];
    }
    const double fd = (lp - lm) / (2.0 * h);
    worst = std::max(worst, std::fabs(fd - side_grads[0][j]));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("batch_norm eval mode uses running statistics") {
  RngStream rng(23, 0);
  ParamStore store;
  Sequential net("bne", {LayerSpec::BatchNorm(2)});
  net.bind(store, Shape{2, 2, 2});
  net.init_params(store, rng);
  TensorMap x = random_map(2, 2, 2, rng);
  // Train-mode pass with updates shifts the running stats off (0, 1).
  net.forward(store, x, ForwardMode{true, true});
  const auto& rm = store.values(store.index_of("bne.0.running_mean"));
  CHECK(rm[0] != 0.0);
  // Eval normalizes with running stats, not batch stats.
  TensorMap y = net.forward(store, x, ForwardMode{false, false});
  const auto& rv = store.values(store.index_of("bne.0.running_var"));
  const double expect = (x.at(0, 0, 0) - rm[0]) / std::sqrt(rv[0] + 1e-5);
  CHECK(y.at(0, 0, 0) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("adam_step: zero gradients leave parameters unchanged") {
  ParamStore store;
  store.register_block("w", 4);
  auto& w = store.values(0);
  w = {1.0, -2.0, 3.0, 0.5};
  Grads grads(store);
  adam_step(store, grads, AdamConfig{});
  CHECK(store.values(0) == std::vector<double>{1.0, -2.0, 3.0, 0.5});
}

TEST_CASE("adam_step: first step moves each coordinate by about lr") {
  ParamStore store;
  store.register_block("w", 3);
  store.values(0) = {1.0, 1.0, 1.0};
  Grads grads(store);
  grads[0] = {0.5, -3.0, 1e-3};
  AdamConfig cfg;
  cfg.lr = 0.05;
  adam_step(store, grads, cfg);
  for (int j = 0; j < 3; ++j) {
    CHECK(std::fabs(std::fabs(store.values(0)[j] - 1.0) - cfg.lr) < 1e-6);
  }
}

TEST_CASE("adam_step: quadratic converges within 200 steps") {
  ParamStore store;
  store.register_block("w", 1);
  store.values(0) = {1.0};
  AdamConfig cfg;
  cfg.lr = 0.1;
  for (int t = 0; t < 200; ++t) {
    Grads grads(store);
    grads[0][0] = 2.0 * store.values(0)[0];
    adam_step(store, grads, cfg);
  }
  CHECK(std::fabs(store.values(0)[0]) < 0.01);
}

TEST_CASE("adam_step: non-finite gradient aborts naming the block") {
  ParamStore store;
  store.register_block("enc.w", 2);
  Grads grads(store);
  grads[0][1] = std::nan("");
  try {
    adam_step(store, grads, AdamConfig{});
    FAIL("expected numeric_error");
  } catch (const numeric_error& e) {
    CHECK(std::string(e.what()).find("enc.w") != std::string::npos);
  }
}

TEST_CASE("forward/backward determinism across repeated runs") {
  auto run = [](std::uint64_t seed) {
    RngStream rng(seed, 0);
    ParamStore store;
    Sequential net("det", {LayerSpec::Conv2d(1, 4, 3, 1, 1), LayerSpec::BatchNorm(4),
                           LayerSpec::LeakyRelu(0.01), LayerSpec::Conv2d(4, 1, 3, 1, 1),
                           LayerSpec::Sigmoid()});
    net.bind(store, Shape{1, 8, 8});
    net.init_params(store, rng);
    TensorMap x = random_map(1, 8, 8, rng);
    Cache cache;
    TensorMap y = net.forward(store, x, ForwardMode{true, false}, &cache);
    Grads grads(store);
    TensorMap gout(1, 8, 8);
    gout.fill(0.37);
    TensorMap gin = net.backward(store, cache, gout, &grads);
    std::vector<double> sig = y.data();
    sig.insert(sig.end(), gin.data().begin(), gin.data().end());
    return sig;
  };
  CHECK(run(31) == run(31));
}
