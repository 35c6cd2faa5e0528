#include "duq/model.hpp"

#include <cmath>

#include "duq/errors.hpp"

namespace duq {

void ArchConfig::validate() const {
  if (image_size % 32 != 0) {
    throw config_error("ArchConfig: image_size must be a multiple of 32");
  }
  if (latent_dim < 1) throw config_error("ArchConfig: latent_dim must be >= 1");
  if (ensemble_size < 1) {
    throw config_error("ArchConfig: ensemble_size must be >= 1");
  }
}

namespace {

Sequential conv_block(const std::string& name, int in_ch, int out_ch,
                      int stride, double slope) {
  return Sequential(name, {LayerSpec::Conv2d(in_ch, out_ch, 3, stride, 1),
                           LayerSpec::LeakyRelu(slope)});
}

Sequential reduce_block(const std::string& name, int in_ch, int out_ch,
                        double slope) {
  return Sequential(name, {LayerSpec::Conv2d(in_ch, out_ch, 1, 1, 0),
                           LayerSpec::LeakyRelu(slope)});
}

Sequential up_block(const std::string& name, int in_ch, int skip_ch,
                    int out_ch, double slope) {
  if (skip_ch > 0) {
    return Sequential(name, {LayerSpec::NearestUpsample(2),
                             LayerSpec::ConcatChannels(skip_ch),
                             LayerSpec::Conv2d(in_ch + skip_ch, out_ch, 3, 1, 1),
                             LayerSpec::LeakyRelu(slope)});
  }
  return Sequential(name, {LayerSpec::NearestUpsample(2),
                           LayerSpec::Conv2d(in_ch, out_ch, 3, 1, 1),
                           LayerSpec::LeakyRelu(slope)});
}

Sequential head_block(const std::string& name, int in_ch) {
  return Sequential(name, {LayerSpec::Conv2d(in_ch, 1, 1, 1, 0),
                           LayerSpec::Sigmoid()});
}

TensorMap broadcast_latent(const std::vector<double>& z, Shape spatial) {
  TensorMap out(static_cast<int>(z.size()), spatial.h, spatial.w);
  for (int k = 0; k < out.channels(); ++k) {
    for (int y = 0; y < spatial.h; ++y) {
      for (int x = 0; x < spatial.w; ++x) out.at(k, y, x) = z[k];
    }
  }
  return out;
}

std::vector<double> collapse_latent_grad(const TensorMap& g) {
  std::vector<double> out(g.channels(), 0.0);
  for (int k = 0; k < g.channels(); ++k) {
    for (int y = 0; y < g.height(); ++y) {
      for (int x = 0; x < g.width(); ++x) out[k] += g.at(k, y, x);
    }
  }
  return out;
}

void add_into(TensorMap& acc, const TensorMap& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

}  // namespace

ElvmState::ElvmState(const ArchConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const double sl = cfg.leaky_slope;
  const int cr = cfg.reduced_channels;
  const int K = cfg.latent_dim;

  enc1_ = conv_block("enc1", cfg.image_channels, cfg.enc1_channels, 2, sl);
  enc2_ = conv_block("enc2", cfg.enc1_channels, cfg.enc2_channels, 2, sl);
  enc3_ = conv_block("enc3", cfg.enc2_channels, cfg.enc3_channels, 2, sl);
  red1_ = reduce_block("red1", cfg.enc1_channels, cr, sl);
  red2_ = reduce_block("red2", cfg.enc2_channels, cr, sl);
  red3_ = reduce_block("red3", cfg.enc3_channels, cr, sl);
  zin_ = Sequential("zin", {LayerSpec::ConcatChannels(K),
                            LayerSpec::Conv2d(cr + K, cr, 3, 1, 1),
                            LayerSpec::LeakyRelu(sl)});
  det_deep_ = Sequential("det_deep", {LayerSpec::Conv2d(cr, cr, 3, 1, 1),
                                      LayerSpec::LeakyRelu(sl)});
  dec2_ = up_block("dec2", cr, cr, cr, sl);
  dec1_ = up_block("dec1", cr, cr, cr, sl);
  dec0_ = up_block("dec0", cr, 0, cr, sl);
  if (!cfg.det_shares_trunk) {
    ddec2_ = up_block("ddec2", cr, cr, cr, sl);
    ddec1_ = up_block("ddec1", cr, cr, cr, sl);
    ddec0_ = up_block("ddec0", cr, 0, cr, sl);
  }
  for (int m = 0; m < cfg.ensemble_size; ++m) {
    heads_.push_back(head_block("cls" + std::to_string(m), cr));
  }
  det_head_ = head_block("det_head", cr);

  // Prior net: five stride-2 convs then two dense heads for mu / log var.
  const int p = cfg.prior_channels;
  const int pc[5] = {p, 2 * p, 4 * p, 4 * p, 4 * p};
  std::vector<LayerSpec> prior_layers;
  int in_ch = cfg.image_channels;
  for (int i = 0; i < 5; ++i) {
    prior_layers.push_back(LayerSpec::Conv2d(in_ch, pc[i], 3, 2, 1));
    prior_layers.push_back(LayerSpec::LeakyRelu(sl));
    in_ch = pc[i];
  }
  prior_trunk_ = Sequential("prior", std::move(prior_layers));

  // Bind in a fixed order; this defines the checkpoint block layout.
  const int s = cfg.image_size;
  enc1_.bind(store_, Shape{cfg.image_channels, s, s});
  enc2_.bind(store_, enc1_.output_shape());
  enc3_.bind(store_, enc2_.output_shape());
  red1_.bind(store_, enc1_.output_shape());
  red2_.bind(store_, enc2_.output_shape());
  red3_.bind(store_, enc3_.output_shape());
  deep_shape_ = red3_.output_shape();
  zin_.bind(store_, deep_shape_);
  det_deep_.bind(store_, deep_shape_);
  dec2_.bind(store_, deep_shape_);
  dec1_.bind(store_, dec2_.output_shape());
  dec0_.bind(store_, dec1_.output_shape());
  if (!cfg.det_shares_trunk) {
    ddec2_.bind(store_, deep_shape_);
    ddec1_.bind(store_, ddec2_.output_shape());
    ddec0_.bind(store_, ddec1_.output_shape());
  }
  for (auto& h : heads_) h.bind(store_, dec0_.output_shape());
  det_head_.bind(store_, dec0_.output_shape());
  prior_trunk_.bind(store_, Shape{cfg.image_channels, s, s});
  const Shape ps = prior_trunk_.output_shape();
  const int prior_flat = ps.c * ps.h * ps.w;
  prior_mu_ = Sequential("prior_mu", {LayerSpec::Dense(prior_flat, K)});
  prior_logvar_ = Sequential("prior_logvar", {LayerSpec::Dense(prior_flat, K)});
  prior_mu_.bind(store_, ps);
  prior_logvar_.bind(store_, ps);
}

void ElvmState::init_params(RngStream& rng) {
  RngStream r = rng.substream(0x454c564dULL);
  enc1_.init_params(store_, r);
  enc2_.init_params(store_, r);
  enc3_.init_params(store_, r);
  red1_.init_params(store_, r);
  red2_.init_params(store_, r);
  red3_.init_params(store_, r);
  zin_.init_params(store_, r);
  det_deep_.init_params(store_, r);
  dec2_.init_params(store_, r);
  dec1_.init_params(store_, r);
  dec0_.init_params(store_, r);
  if (!cfg_.det_shares_trunk) {
    ddec2_.init_params(store_, r);
    ddec1_.init_params(store_, r);
    ddec0_.init_params(store_, r);
  }
  // Distinct streams keep the ensemble heads diverse.
  for (std::size_t m = 0; m < heads_.size(); ++m) {
    RngStream rh = rng.substream(0x4845ULL, m);
    heads_[m].init_params(store_, rh);
  }
  det_head_.init_params(store_, r);
  prior_trunk_.init_params(store_, r);
  prior_mu_.init_params(store_, r);
  prior_logvar_.init_params(store_, r);
}

EncoderFeatures ElvmState::encode(const TensorMap& x, bool training,
                                  bool with_cache) {
  const ForwardMode mode{training, false};
  EncoderFeatures out;
  out.with_cache = with_cache;
  Cache* c1 = with_cache ? &out.c_enc1 : nullptr;
  Cache* c2 = with_cache ? &out.c_enc2 : nullptr;
  Cache* c3 = with_cache ? &out.c_enc3 : nullptr;
  TensorMap e1 = enc1_.forward(store_, x, mode, c1);
  TensorMap e2 = enc2_.forward(store_, e1, mode, c2);
  TensorMap e3 = enc3_.forward(store_, e2, mode, c3);
  out.r1 = red1_.forward(store_, e1, mode, with_cache ? &out.c_red1 : nullptr);
  out.r2 = red2_.forward(store_, e2, mode, with_cache ? &out.c_red2 : nullptr);
  out.r3 = red3_.forward(store_, e3, mode, with_cache ? &out.c_red3 : nullptr);
  return out;
}

TensorMap ElvmState::decode_trunk(ParamStore& store, const EncoderFeatures& enc,
                                  const std::vector<double>& z, bool training,
                                  TrunkCache* cache) {
  if (static_cast<int>(z.size()) != cfg_.latent_dim) {
    throw usage_error("decode_trunk: latent has dimension " +
                      std::to_string(z.size()) + ", expected " +
                      std::to_string(cfg_.latent_dim));
  }
  const ForwardMode mode{training, false};
  TensorMap zmap = broadcast_latent(z, deep_shape_);
  zmap.validate("decode_trunk latent");
  std::vector<TensorMap> zin_sides{zmap};
  TensorMap d3 = zin_.forward(store, enc.r3, zin_sides, mode,
                              cache ? &cache->zin : nullptr);
  std::vector<TensorMap> s2{enc.r2};
  TensorMap d2 = dec2_.forward(store, d3, s2, mode, cache ? &cache->d2 : nullptr);
  std::vector<TensorMap> s1{enc.r1};
  TensorMap d1 = dec1_.forward(store, d2, s1, mode, cache ? &cache->d1 : nullptr);
  TensorMap d0 = dec0_.forward(store, d1, mode, cache ? &cache->d0 : nullptr);
  if (cache) cache->zmap = std::move(zmap);
  return d0;
}

TensorMap ElvmState::apply_head(ParamStore& store, int head,
                                const TensorMap& trunk_out, bool training,
                                Cache* cache) {
  if (head < 0 || head >= static_cast<int>(heads_.size())) {
    throw usage_error("apply_head: head index " + std::to_string(head) +
                      " out of range [0, " + std::to_string(heads_.size()) + ")");
  }
  const ForwardMode mode{training, false};
  return heads_[head].forward(store, trunk_out, mode, cache);
}

TensorMap ElvmState::backward_head(int head, const Cache& cache,
                                   const TensorMap& g_pred, Grads* grads) {
  return heads_[head].backward(store_, cache, g_pred, grads);
}

std::vector<double> ElvmState::backward_trunk(const TrunkCache& cache,
                                              const TensorMap& g_trunk_out,
                                              Grads* grads, SkipGrads* skips) {
  TensorMap g_d1 = dec0_.backward(store_, cache.d0, g_trunk_out, grads);
  std::vector<TensorMap> side1;
  TensorMap g_d2 = dec1_.backward(store_, cache.d1, g_d1, grads, &side1);
  std::vector<TensorMap> side2;
  TensorMap g_d3 = dec2_.backward(store_, cache.d2, g_d2, grads, &side2);
  std::vector<TensorMap> side_z;
  TensorMap g_r3 = zin_.backward(store_, cache.zin, g_d3, grads, &side_z);
  if (skips) {
    add_into(skips->g_r1, side1[0]);
    add_into(skips->g_r2, side2[0]);
    add_into(skips->g_r3, g_r3);
  }
  return collapse_latent_grad(side_z[0]);
}

TensorMap ElvmState::decode_stochastic(ParamStore& store,
                                       const EncoderFeatures& enc,
                                       const std::vector<double>& z, int head,
                                       bool training, StochDecodeCache* cache) {
  TensorMap d0 =
      decode_trunk(store, enc, z, training, cache ? &cache->trunk : nullptr);
  TensorMap pred =
      apply_head(store, head, d0, training, cache ? &cache->head : nullptr);
  if (cache) cache->head_index = head;
  return pred;
}

TensorMap ElvmState::decode_deterministic(ParamStore& store,
                                          const EncoderFeatures& enc,
                                          bool training, DetDecodeCache* cache) {
  const ForwardMode mode{training, false};
  TensorMap d3 = det_deep_.forward(store, enc.r3, mode,
                                   cache ? &cache->deep : nullptr);
  Sequential& s2net = cfg_.det_shares_trunk ? dec2_ : ddec2_;
  Sequential& s1net = cfg_.det_shares_trunk ? dec1_ : ddec1_;
  Sequential& s0net = cfg_.det_shares_trunk ? dec0_ : ddec0_;
  std::vector<TensorMap> s2{enc.r2};
  TensorMap d2 = s2net.forward(store, d3, s2, mode, cache ? &cache->d2 : nullptr);
  std::vector<TensorMap> s1{enc.r1};
  TensorMap d1 = s1net.forward(store, d2, s1, mode, cache ? &cache->d1 : nullptr);
  TensorMap d0 = s0net.forward(store, d1, mode, cache ? &cache->d0 : nullptr);
  return det_head_.forward(store, d0, mode, cache ? &cache->head : nullptr);
}

TensorMap ElvmState::forward_stochastic(const TensorMap& x,
                                        const std::vector<double>& z, int head) {
  ++stoch_forwards_;
  EncoderFeatures enc = encode(x, false, false);
  return decode_stochastic(store_, enc, z, head, false, nullptr);
}

TensorMap ElvmState::forward_deterministic(const TensorMap& x) {
  ++det_forwards_;
  EncoderFeatures enc = encode(x, false, false);
  return decode_deterministic(store_, enc, false, nullptr);
}

std::vector<double> ElvmState::backward_stochastic(const StochDecodeCache& cache,
                                                   const TensorMap& grad_pred,
                                                   Grads* grads,
                                                   SkipGrads* skips) {
  TensorMap g_d0 = backward_head(cache.head_index, cache.head, grad_pred, grads);
  return backward_trunk(cache.trunk, g_d0, grads, skips);
}

void ElvmState::backward_deterministic(const DetDecodeCache& cache,
                                       const TensorMap& grad_pred, Grads* grads,
                                       SkipGrads* skips) {
  Sequential& s2net = cfg_.det_shares_trunk ? dec2_ : ddec2_;
  Sequential& s1net = cfg_.det_shares_trunk ? dec1_ : ddec1_;
  Sequential& s0net = cfg_.det_shares_trunk ? dec0_ : ddec0_;
  TensorMap g_d0 = det_head_.backward(store_, cache.head, grad_pred, grads);
  TensorMap g_d1 = s0net.backward(store_, cache.d0, g_d0, grads);
  std::vector<TensorMap> side1;
  TensorMap g_d2 = s1net.backward(store_, cache.d1, g_d1, grads, &side1);
  std::vector<TensorMap> side2;
  TensorMap g_d3 = s2net.backward(store_, cache.d2, g_d2, grads, &side2);
  TensorMap g_r3 = det_deep_.backward(store_, cache.deep, g_d3, grads);
  if (skips) {
    add_into(skips->g_r1, side1[0]);
    add_into(skips->g_r2, side2[0]);
    add_into(skips->g_r3, g_r3);
  }
}

void ElvmState::backward_encoder(const EncoderFeatures& enc,
                                 const SkipGrads& skips, Grads* grads) {
  if (!enc.with_cache) {
    throw numeric_error("backward_encoder: encoder was run without caches");
  }
  TensorMap g_e3 = red3_.backward(store_, enc.c_red3, skips.g_r3, grads);
  TensorMap g_e2 = enc3_.backward(store_, enc.c_enc3, g_e3, grads);
  {
    TensorMap g_e2b = red2_.backward(store_, enc.c_red2, skips.g_r2, grads);
    for (std::size_t i = 0; i < g_e2.size(); ++i) g_e2[i] += g_e2b[i];
  }
  TensorMap g_e1 = enc2_.backward(store_, enc.c_enc2, g_e2, grads);
  {
    TensorMap g_e1b = red1_.backward(store_, enc.c_red1, skips.g_r1, grads);
    for (std::size_t i = 0; i < g_e1.size(); ++i) g_e1[i] += g_e1b[i];
  }
  enc1_.backward(store_, enc.c_enc1, g_e1, grads);
}

PriorForward ElvmState::prior_forward(const TensorMap& x, bool training,
                                      bool with_cache) {
  const ForwardMode mode{training, false};
  PriorForward out;
  out.with_cache = with_cache;
  out.trunk_out = prior_trunk_.forward(store_, x, mode,
                                       with_cache ? &out.c_trunk : nullptr);
  TensorMap mu = prior_mu_.forward(store_, out.trunk_out, mode,
                                   with_cache ? &out.c_mu : nullptr);
  TensorMap lv = prior_logvar_.forward(store_, out.trunk_out, mode,
                                       with_cache ? &out.c_logvar : nullptr);
  mu.validate("prior_forward mu");
  lv.validate("prior_forward log_var");
  out.mu = mu.data();
  out.log_var = lv.data();
  return out;
}

void ElvmState::prior_backward(const PriorForward& fwd,
                               const std::vector<double>& g_mu,
                               const std::vector<double>& g_logvar,
                               Grads* grads) {
  if (!fwd.with_cache) {
    throw numeric_error("prior_backward: forward was run without caches");
  }
  const Shape ps = prior_trunk_.output_shape();
  TensorMap gm(static_cast<int>(g_mu.size()), 1, 1, g_mu);
  TensorMap gl(static_cast<int>(g_logvar.size()), 1, 1, g_logvar);
  TensorMap g_trunk = prior_mu_.backward(store_, fwd.c_mu, gm, grads);
  TensorMap g_trunk2 = prior_logvar_.backward(store_, fwd.c_logvar, gl, grads);
  for (std::size_t i = 0; i < g_trunk.size(); ++i) g_trunk[i] += g_trunk2[i];
  TensorMap g_flat(ps.c, ps.h, ps.w, g_trunk.data());
  prior_trunk_.backward(store_, fwd.c_trunk, g_flat, grads);
}

void ElvmState::reset_forward_counts() {
  stoch_forwards_ = 0;
  det_forwards_ = 0;
}

PriorSample prior_sample(ElvmState& state, const TensorMap& x, RngStream& rng,
                         const std::vector<double>* eps_override) {
  PriorForward fwd = state.prior_forward(x, false, false);
  PriorSample out;
  out.mu = fwd.mu;
  out.log_var = fwd.log_var;
  const std::size_t K = fwd.mu.size();
  if (eps_override) {
    if (eps_override->size() != K) {
      throw usage_error("prior_sample: eps override has wrong dimension");
    }
    out.eps = *eps_override;
  } else {
    out.eps = rng.normal_vector(K);
  }
  out.z0.resize(K);
  for (std::size_t k = 0; k < K; ++k) {
    out.z0[k] = out.mu[k] + std::exp(out.log_var[k] / 2.0) * out.eps[k];
  }
  return out;
}

std::vector<double> langevin_step(LangevinTarget& target,
                                  const std::vector<double>& z,
                                  const LangevinConfig& cfg,
                                  const std::vector<double>& prior_mu,
                                  const std::vector<double>& prior_log_var,
                                  RngStream& rng) {
  if (cfg.step_size < 0.0) throw usage_error("langevin_step: negative step size");
  if (cfg.sigma_lik <= 0.0) throw usage_error("langevin_step: sigma_lik must be > 0");
  if (prior_mu.size() != z.size() || prior_log_var.size() != z.size()) {
    throw usage_error("langevin_step: prior moment dimension mismatch");
  }
  std::vector<double> score = target.likelihood_score(z);
  if (score.size() != z.size()) {
    throw numeric_error("langevin_step: score dimension mismatch");
  }
  const double s = cfg.step_size;
  std::vector<double> out(z.size());
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double prior_grad = (z[k] - prior_mu[k]) / std::exp(prior_log_var[k]);
    const double drift = (s * s / 2.0) * (score[k] - prior_grad);
    const double noise = s * cfg.noise_scale * rng.normal();
    out[k] = z[k] + drift + noise;
    if (!std::isfinite(out[k])) {
      throw numeric_error("langevin_step: non-finite update at coordinate " +
                          std::to_string(k));
    }
  }
  return out;
}

ElvmLangevinTarget::ElvmLangevinTarget(ElvmState& state,
                                       const EncoderFeatures& enc,
                                       const TensorMap& y, double sigma_lik)
    : state_(state), enc_(enc), y_(y), sigma_lik_(sigma_lik) {}

std::vector<double> ElvmLangevinTarget::likelihood_score(
    const std::vector<double>& z) {
  const int M = state_.config().ensemble_size;
  TrunkCache trunk;
  TensorMap d0 =
      state_.decode_trunk(state_.store(), enc_, z, /*training=*/true, &trunk);
  std::vector<Cache> head_caches(M);
  TensorMap mean(y_.channels(), y_.height(), y_.width());
  for (int m = 0; m < M; ++m) {
    TensorMap p =
        state_.apply_head(state_.store(), m, d0, /*training=*/true, &head_caches[m]);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += p[i];
  }
  for (auto& v : mean.data()) v /= M;

  const double inv_var = 1.0 / (sigma_lik_ * sigma_lik_);
  TensorMap g_pred(mean.channels(), mean.height(), mean.width());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    g_pred[i] = inv_var * (y_[i] - mean[i]) / M;
  }
  TensorMap g_d0(d0.channels(), d0.height(), d0.width());
  for (int m = 0; m < M; ++m) {
    TensorMap g = state_.backward_head(m, head_caches[m], g_pred, nullptr);
    for (std::size_t i = 0; i < g_d0.size(); ++i) g_d0[i] += g[i];
  }
  return state_.backward_trunk(trunk, g_d0, nullptr, nullptr);
}

double ElvmLangevinTarget::log_likelihood(const std::vector<double>& z) {
  const int M = state_.config().ensemble_size;
  TensorMap d0 =
      state_.decode_trunk(state_.store(), enc_, z, /*training=*/true, nullptr);
  TensorMap mean(y_.channels(), y_.height(), y_.width());
  for (int m = 0; m < M; ++m) {
    TensorMap p = state_.apply_head(state_.store(), m, d0, /*training=*/true, nullptr);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += p[i];
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    const double d = y_[i] - mean[i] / M;
    sq += d * d;
  }
  return -sq / (2.0 * sigma_lik_ * sigma_lik_);
}

namespace {

double prior_log_density(const std::vector<double>& z,
                         const std::vector<double>& mu,
                         const std::vector<double>& log_var) {
  double acc = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double d = z[k] - mu[k];
    acc -= 0.5 * (log_var[k] + d * d / std::exp(log_var[k]));
  }
  return acc;
}

}  // namespace

LatentChain infer_latent(ElvmState& state, const TensorMap& x,
                         const TensorMap& y, const LangevinConfig& cfg,
                         RngStream& rng) {
  if (cfg.steps < 0) throw usage_error("infer_latent: negative step count");
  EncoderFeatures enc = state.encode(x, /*training=*/true, /*with_cache=*/false);
  PriorSample prior = prior_sample(state, x, rng);
  const std::size_t K = prior.z0.size();
  std::vector<double> zeros(K, 0.0);
  const std::vector<double>& mu = cfg.conditional ? prior.mu : zeros;
  const std::vector<double>& lv = cfg.conditional ? prior.log_var : zeros;

  ElvmLangevinTarget target(state, enc, y, cfg.sigma_lik);
  LatentChain chain;
  chain.step_size = cfg.step_size;
  chain.steps = cfg.steps;
  chain.prior_mu = mu;
  chain.prior_log_var = lv;
  chain.z.push_back(prior.z0);
  chain.log_joint.push_back(target.log_likelihood(prior.z0) +
                            prior_log_density(prior.z0, mu, lv));
  for (int t = 0; t < cfg.steps; ++t) {
    std::vector<double> next =
        langevin_step(target, chain.z.back(), cfg, mu, lv, rng);
    chain.log_joint.push_back(target.log_likelihood(next) +
                              prior_log_density(next, mu, lv));
    chain.z.push_back(std::move(next));
  }
  return chain;
}

}  // namespace duq
