#include "duq/uncertainty.hpp"

#include <algorithm>
#include <cmath>

#include "duq/errors.hpp"

namespace duq {

namespace {

constexpr double kLogClamp = 1e-7;
constexpr double kLogVarClamp = 30.0;  // exp() guard for head outputs
// Attenuation weights stay within exp(+-4): the consistency losses anchor
// only the normalized uncertainty map, so the raw log-variance scale can
// drift and would otherwise blow up the 1/sigma^2 task-loss weights.
constexpr double kAttenuationClamp = 4.0;
// Per-pixel cap on CE gradients. Dense maps here are ~256 pixels, so a
// single near-clamp pixel would otherwise dominate the whole map's update.
constexpr double kCeGradClip = 50.0;
// Backward-path floor on the min-max range: a near-constant map would
// otherwise scale gradients by 1/range without bound.
constexpr double kRangeFloor = 1e-2;

double clamp_unit(double v) {
  return std::clamp(v, kLogClamp, 1.0 - kLogClamp);
}

void check_unit(const TensorMap& m, const char* who) {
  for (double v : m.data()) {
    if (v < -1e-9 || v > 1.0 + 1e-9) {
      throw usage_error(std::string(who) + ": value " + std::to_string(v) +
                        " outside [0,1]");
    }
  }
}

TensorMap exp_clamped(const TensorMap& s) {
  TensorMap out = s;
  for (auto& v : out.data()) {
    v = std::exp(std::clamp(v, -kLogVarClamp, kLogVarClamp));
  }
  return out;
}

}  // namespace

TensorMap binary_entropy(const TensorMap& p) {
  check_unit(p, "binary_entropy");
  TensorMap out = p;
  for (auto& v : out.data()) {
    const double q = std::clamp(v, 0.0, 1.0);
    double h = 0.0;
    if (q > 0.0) h -= q * std::log2(q);
    if (q < 1.0) h -= (1.0 - q) * std::log2(1.0 - q);
    v = h;
  }
  return out;
}

TensorMap minmax_norm(const TensorMap& m, MinMax* stats) {
  m.validate("minmax_norm");
  const double lo = m.min();
  const double hi = m.max();
  if (stats) *stats = MinMax{lo, hi};
  TensorMap out = m;
  if (hi == lo) {
    out.fill(0.0);
    return out;
  }
  const double inv = 1.0 / (hi - lo);
  for (auto& v : out.data()) v = (v - lo) * inv;
  return out;
}

double bce_value(double p, double t) {
  const double q = clamp_unit(p);
  return -(t * std::log(q) + (1.0 - t) * std::log(1.0 - q));
}

double bce_dpred(double p, double t) {
  const double q = clamp_unit(p);
  return -(t / q - (1.0 - t) / (1.0 - q));
}

LossMode loss_mode_from_name(const std::string& name) {
  if (name == "regression") return LossMode::regression;
  if (name == "classification") return LossMode::classification;
  throw usage_error("unknown loss mode '" + name + "'");
}

std::string loss_mode_name(LossMode mode) {
  return mode == LossMode::regression ? "regression" : "classification";
}

AttenuatedLoss attenuated_loss(const TensorMap& pred, const TensorMap& target,
                               const TensorMap& s, LossMode mode) {
  if (!pred.same_shape(target) || !pred.same_shape(s)) {
    throw usage_error("attenuated_loss: shape mismatch " + pred.shape_str() +
                      " / " + target.shape_str() + " / " + s.shape_str());
  }
  AttenuatedLoss out;
  out.d_pred = TensorMap(pred.channels(), pred.height(), pred.width());
  out.d_s = TensorMap(pred.channels(), pred.height(), pred.width());
  const double n = static_cast<double>(pred.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double L = bce_value(pred[i], target[i]);
    const double dL = bce_dpred(pred[i], target[i]);
    const double si = std::clamp(s[i], -kAttenuationClamp, kAttenuationClamp);
    if (mode == LossMode::regression) {
      const double w = std::exp(-si);
      acc += 0.5 * (L * w + si);
      out.d_pred[i] = 0.5 * w * dL / n;
      out.d_s[i] = 0.5 * (1.0 - L * w) / n;
    } else {
      const double sigma2 = std::exp(si);
      const double w = std::exp(-sigma2);
      acc += L * w + sigma2;
      out.d_pred[i] = w * dL / n;
      out.d_s[i] = sigma2 * (1.0 - L * w) / n;
    }
  }
  out.value = acc / n;
  return out;
}

TensorMap optimal_prediction(std::span<const TensorMap> preds,
                             const TensorMap& y) {
  if (preds.empty()) throw usage_error("optimal_prediction: empty set");
  for (const auto& p : preds) {
    if (!p.same_shape(y)) {
      throw usage_error("optimal_prediction: shape mismatch " + p.shape_str() +
                        " vs " + y.shape_str());
    }
  }
  TensorMap best = preds[0];
  if (preds.size() == 1) return best;
  for (std::size_t i = 0; i < y.size(); ++i) {
    double best_loss = bce_value(preds[0][i], y[i]);
    for (std::size_t m = 1; m < preds.size(); ++m) {
      const double l = bce_value(preds[m][i], y[i]);
      if (l < best_loss) {
        best_loss = l;
        best[i] = preds[m][i];
      }
    }
  }
  return best;
}

TensorMap mean_error(std::span<const TensorMap> preds, const TensorMap& y) {
  if (preds.empty()) throw usage_error("mean_error: empty set");
  TensorMap err(y.channels(), y.height(), y.width());
  for (std::size_t i = 0; i < y.size(); ++i) {
    double mean = 0.0;
    for (const auto& p : preds) mean += p[i];
    mean /= static_cast<double>(preds.size());
    const double d = mean - y[i];
    err[i] = d * d;
  }
  return err;
}

BiceLoss bice_loss(const TensorMap& u, const TensorMap& t) {
  if (!u.same_shape(t)) {
    throw usage_error("bice_loss: shape mismatch " + u.shape_str() + " vs " +
                      t.shape_str());
  }
  check_unit(u, "bice_loss(u)");
  check_unit(t, "bice_loss(t)");
  BiceLoss out;
  out.d_u = TensorMap(u.channels(), u.height(), u.width());
  const double n = static_cast<double>(u.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    acc += bce_value(u[i], t[i]) + bce_value(t[i], u[i]);
    out.d_u[i] = std::clamp(bce_dpred(u[i], t[i]), -kCeGradClip, kCeGradClip) / n;
  }
  out.value = acc / n;
  return out;
}

CeLoss ce_loss(const TensorMap& pred, const TensorMap& target) {
  if (!pred.same_shape(target)) {
    throw usage_error("ce_loss: shape mismatch " + pred.shape_str() + " vs " +
                      target.shape_str());
  }
  CeLoss out;
  out.d_pred = TensorMap(pred.channels(), pred.height(), pred.width());
  const double n = static_cast<double>(pred.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    acc += bce_value(pred[i], target[i]);
    out.d_pred[i] =
        std::clamp(bce_dpred(pred[i], target[i]), -kCeGradClip, kCeGradClip) / n;
  }
  out.value = acc / n;
  return out;
}

UncertaintyHeads::UncertaintyHeads(const HeadsConfig& cfg) : cfg_(cfg) {
  const int a = cfg.alpha_channels;
  const double sl = cfg.leaky_slope;
  alpha_net_ = Sequential(
      "alpha",
      {LayerSpec::Conv2d(cfg.image_channels, a, 3, 2, 1), LayerSpec::LeakyRelu(sl),
       LayerSpec::Conv2d(a, 2 * a, 3, 2, 1), LayerSpec::LeakyRelu(sl),
       LayerSpec::Conv2d(2 * a, 2 * a, 3, 1, 1), LayerSpec::LeakyRelu(sl),
       LayerSpec::NearestUpsample(2), LayerSpec::Conv2d(2 * a, a, 3, 1, 1),
       LayerSpec::LeakyRelu(sl), LayerSpec::NearestUpsample(2),
       LayerSpec::Conv2d(a, a, 3, 1, 1), LayerSpec::LeakyRelu(sl),
       LayerSpec::Conv2d(a, 1, 1, 1, 0)});
  alpha_net_.bind(alpha_store_, Shape{cfg.image_channels, cfg.image_size, cfg.image_size});

  const int b = cfg.beta_channels;
  beta_net_ = Sequential(
      "beta",
      {LayerSpec::Conv2d(cfg.image_channels + 1, b, 3, 2, 1), LayerSpec::BatchNorm(b),
       LayerSpec::LeakyRelu(sl),
       LayerSpec::Conv2d(b, b, 3, 1, 1), LayerSpec::BatchNorm(b),
       LayerSpec::LeakyRelu(sl),
       LayerSpec::Conv2d(b, b, 3, 2, 1), LayerSpec::BatchNorm(b),
       LayerSpec::LeakyRelu(sl),
       LayerSpec::Conv2d(b, b, 3, 1, 1), LayerSpec::BatchNorm(b),
       LayerSpec::LeakyRelu(sl),
       LayerSpec::Conv2d(b, 1, 3, 2, 1)});
  beta_net_.bind(beta_store_, Shape{cfg.image_channels + 1, cfg.image_size, cfg.image_size});
}

void UncertaintyHeads::init_params(RngStream& rng) {
  RngStream ra = rng.substream(1);
  RngStream rb = rng.substream(2);
  alpha_net_.init_params(alpha_store_, ra);
  beta_net_.init_params(beta_store_, rb);
}

TensorMap UncertaintyHeads::aleatoric_log_var(const TensorMap& x,
                                              ForwardMode mode, Cache* cache) {
  ++alpha_forwards_;
  return alpha_net_.forward(alpha_store_, x, mode, cache);
}

TensorMap UncertaintyHeads::predictive_log_var(const TensorMap& x,
                                               const TensorMap& pred,
                                               ForwardMode mode, Cache* cache) {
  ++beta_forwards_;
  TensorMap joined = concat_channels(x, pred);
  return beta_net_.forward(beta_store_, joined, mode, cache);
}

void UncertaintyHeads::aleatoric_backward(const Cache& cache,
                                          const TensorMap& grad_out,
                                          Grads* alpha_grads) {
  alpha_net_.backward(alpha_store_, cache, grad_out, alpha_grads);
}

void UncertaintyHeads::predictive_backward(const Cache& cache,
                                           const TensorMap& grad_out,
                                           Grads* beta_grads) {
  beta_net_.backward(beta_store_, cache, grad_out, beta_grads);
}

void UncertaintyHeads::reset_forward_counts() {
  alpha_forwards_ = 0;
  beta_forwards_ = 0;
}

void UncertaintyHeads::update_predictive_running_stats(const TensorMap& x,
                                                       const TensorMap& pred) {
  TensorMap joined = concat_channels(x, pred);
  beta_net_.forward(beta_store_, joined, ForwardMode{true, true});
}

double aleatoric_consistency_loss(UncertaintyHeads& heads, const TensorMap& x,
                                  const TensorMap& f_star, Grads* alpha_grads) {
  Cache cache;
  const ForwardMode mode{/*training=*/true, /*update_running_stats=*/false};
  TensorMap s_a = heads.aleatoric_log_var(x, mode, &cache);
  TensorMap u_raw = exp_clamped(s_a);
  MinMax stats;
  TensorMap u = minmax_norm(u_raw, &stats);
  TensorMap target = minmax_norm(binary_entropy(f_star));

  BiceLoss loss = bice_loss(u, target);
  if (alpha_grads) {
    // d loss / d s_a = d loss / d u * (1/range) * exp(s_a). Pixels at the
    // extremes are pinned to 0/1 by the normalization, so their derivative
    // is exactly zero.
    TensorMap g = loss.d_u;
    const double inv =
        stats.range() > 0.0 ? 1.0 / std::max(stats.range(), kRangeFloor) : 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool pinned = u_raw[i] == stats.min || u_raw[i] == stats.max;
      g[i] = pinned ? 0.0 : g[i] * inv * u_raw[i];
    }
    heads.aleatoric_backward(cache, g, alpha_grads);
  }
  return loss.value;
}

PredictiveHeadPass predictive_head_pass(UncertaintyHeads& heads,
                                        const TensorMap& x,
                                        const TensorMap& stochastic_pred,
                                        bool training) {
  PredictiveHeadPass pass;
  // Running stats are refreshed once per optimizer step by the trainer so
  // parallel per-sample passes stay deterministic.
  const ForwardMode mode{training, false};
  pass.s_p = heads.predictive_log_var(x, stochastic_pred, mode,
                                      training ? &pass.cache : nullptr);
  pass.s_up = bilinear_resize(pass.s_p, x.height(), x.width());
  pass.u_raw = exp_clamped(pass.s_up);
  pass.u = minmax_norm(pass.u_raw, &pass.stats);
  return pass;
}

double predictive_consistency_from_pass(UncertaintyHeads& heads,
                                        const PredictiveHeadPass& pass,
                                        std::span<const TensorMap> preds,
                                        const TensorMap& y, Grads* beta_grads) {
  if (preds.empty()) {
    throw usage_error("predictive_consistency_loss: empty prediction set");
  }
  TensorMap mean_pred(y.channels(), y.height(), y.width());
  for (std::size_t i = 0; i < y.size(); ++i) {
    double m = 0.0;
    for (const auto& p : preds) m += p[i];
    mean_pred[i] = m / static_cast<double>(preds.size());
  }
  TensorMap entropy_target = minmax_norm(binary_entropy(mean_pred));
  TensorMap err_target = minmax_norm(mean_error(preds, y));

  BiceLoss l_bice = bice_loss(pass.u, entropy_target);
  CeLoss l_ce = ce_loss(pass.u, err_target);

  if (beta_grads) {
    TensorMap g(pass.u.channels(), pass.u.height(), pass.u.width());
    const double inv = pass.stats.range() > 0.0
                           ? 1.0 / std::max(pass.stats.range(), kRangeFloor)
                           : 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const bool pinned =
          pass.u_raw[i] == pass.stats.min || pass.u_raw[i] == pass.stats.max;
      g[i] = pinned ? 0.0
                    : (l_bice.d_u[i] + l_ce.d_pred[i]) * inv * pass.u_raw[i];
    }
    TensorMap g_sp =
        bilinear_resize_backward(g, pass.s_p.height(), pass.s_p.width());
    heads.predictive_backward(pass.cache, g_sp, beta_grads);
  }
  return l_bice.value + l_ce.value;
}

double predictive_consistency_loss(UncertaintyHeads& heads, const TensorMap& x,
                                   const TensorMap& stochastic_pred,
                                   std::span<const TensorMap> preds,
                                   const TensorMap& y, Grads* beta_grads) {
  PredictiveHeadPass pass =
      predictive_head_pass(heads, x, stochastic_pred, /*training=*/true);
  return predictive_consistency_from_pass(heads, pass, preds, y, beta_grads);
}

UncertaintyBundle decompose(UncertaintyHeads& heads, const TensorMap& x,
                            const TensorMap& stochastic_pred) {
  const ForwardMode mode{/*training=*/false, /*update_running_stats=*/false};
  TensorMap s_a = heads.aleatoric_log_var(x, mode);
  TensorMap s_p = heads.predictive_log_var(x, stochastic_pred, mode);
  s_a.validate("decompose: aleatoric head output");
  s_p.validate("decompose: predictive head output");

  UncertaintyBundle bundle;
  bundle.aleatoric = minmax_norm(exp_clamped(s_a));
  bundle.predictive =
      minmax_norm(exp_clamped(bilinear_resize(s_p, x.height(), x.width())));
  bundle.epistemic_raw = bundle.predictive;
  for (std::size_t i = 0; i < bundle.epistemic_raw.size(); ++i) {
    bundle.epistemic_raw[i] -= bundle.aleatoric[i];
  }
  bundle.epistemic_clamped = bundle.epistemic_raw;
  for (auto& v : bundle.epistemic_clamped.data()) v = std::max(0.0, v);
  return bundle;
}

}  // namespace duq
