#include "duq/baselines.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "duq/checkpoint.hpp"
#include "duq/errors.hpp"
#include "duq/metrics.hpp"
#include "duq/threading.hpp"
#include "duq/uncertainty.hpp"

using nlohmann::json;

namespace duq {

namespace {

const char* kMethodNames[] = {"base", "mc_dropout", "deep_ensemble", "gan",
                              "cvae"};

Sequential simple_conv(const std::string& name, int in_ch, int out_ch,
                       int stride, double slope) {
  return Sequential(name, {LayerSpec::Conv2d(in_ch, out_ch, 3, stride, 1),
                           LayerSpec::LeakyRelu(slope)});
}

}  // namespace

std::string baseline_method_name(BaselineMethod m) {
  return kMethodNames[static_cast<int>(m)];
}

BaselineMethod baseline_method_from_name(const std::string& name) {
  for (int i = 0; i < 5; ++i) {
    if (name == kMethodNames[i]) return static_cast<BaselineMethod>(i);
  }
  // CLI spelling with dashes.
  if (name == "mc-dropout") return BaselineMethod::mc_dropout;
  if (name == "deep-ensemble") return BaselineMethod::deep_ensemble;
  throw usage_error("unknown baseline method '" + name + "'");
}

void BaselineConfig::validate() const {
  arch.validate();
  if (epochs < 1 || batch_size < 1) {
    throw usage_error("BaselineConfig: epochs/batch_size must be >= 1");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw usage_error("BaselineConfig: dropout_rate must be in [0,1)");
  }
  if (eval_passes < 1) throw usage_error("BaselineConfig: eval_passes >= 1");
}

json BaselineConfig::to_json() const {
  json j;
  j["method"] = baseline_method_name(method);
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["base_lr"] = base_lr;
  j["lr_decay_point"] = lr_decay_point;
  j["lr_decay_factor"] = lr_decay_factor;
  j["dropout_rate"] = dropout_rate;
  j["eval_passes"] = eval_passes;
  j["gan_lambda"] = gan_lambda;
  j["seed"] = seed;
  j["threads"] = threads;
  j["image_size"] = arch.image_size;
  j["enc1_channels"] = arch.enc1_channels;
  j["enc2_channels"] = arch.enc2_channels;
  j["enc3_channels"] = arch.enc3_channels;
  j["reduced_channels"] = arch.reduced_channels;
  j["prior_channels"] = arch.prior_channels;
  j["latent_dim"] = arch.latent_dim;
  j["ensemble_size"] = arch.ensemble_size;
  j["leaky_slope"] = arch.leaky_slope;
  return j;
}

BaselineConfig BaselineConfig::from_json(const json& j) {
  BaselineConfig cfg;
  cfg.method = baseline_method_from_name(j.value("method", "base"));
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.base_lr = j.value("base_lr", cfg.base_lr);
  cfg.lr_decay_point = j.value("lr_decay_point", cfg.lr_decay_point);
  cfg.lr_decay_factor = j.value("lr_decay_factor", cfg.lr_decay_factor);
  cfg.dropout_rate = j.value("dropout_rate", cfg.dropout_rate);
  cfg.eval_passes = j.value("eval_passes", cfg.eval_passes);
  cfg.gan_lambda = j.value("gan_lambda", cfg.gan_lambda);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.threads = j.value("threads", cfg.threads);
  cfg.arch.image_size = j.value("image_size", cfg.arch.image_size);
  cfg.arch.enc1_channels = j.value("enc1_channels", cfg.arch.enc1_channels);
  cfg.arch.enc2_channels = j.value("enc2_channels", cfg.arch.enc2_channels);
  cfg.arch.enc3_channels = j.value("enc3_channels", cfg.arch.enc3_channels);
  cfg.arch.reduced_channels = j.value("reduced_channels", cfg.arch.reduced_channels);
  cfg.arch.prior_channels = j.value("prior_channels", cfg.arch.prior_channels);
  cfg.arch.latent_dim = j.value("latent_dim", cfg.arch.latent_dim);
  cfg.arch.ensemble_size = j.value("ensemble_size", cfg.arch.ensemble_size);
  cfg.arch.leaky_slope = j.value("leaky_slope", cfg.arch.leaky_slope);
  cfg.validate();
  return cfg;
}

EnsembleDecomposition ensemble_decompose(const SampledPredictions& samples) {
  if (samples.preds.size() < 2) {
    throw usage_error("ensemble_decompose: need at least 2 samples");
  }
  const TensorMap& first = samples.preds.front();
  TensorMap mean(first.channels(), first.height(), first.width());
  TensorMap mean_entropy(first.channels(), first.height(), first.width());
  for (const auto& p : samples.preds) {
    if (!p.same_shape(first)) {
      throw usage_error("ensemble_decompose: inconsistent shapes");
    }
    TensorMap h = binary_entropy(p);
    for (std::size_t i = 0; i < mean.size(); ++i) {
      mean[i] += p[i];
      mean_entropy[i] += h[i];
    }
  }
  const double n = static_cast<double>(samples.preds.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    mean[i] /= n;
    mean_entropy[i] /= n;
  }
  EnsembleDecomposition out;
  out.predictive = binary_entropy(mean);
  out.aleatoric = mean_entropy;
  out.epistemic = out.predictive;
  for (std::size_t i = 0; i < out.epistemic.size(); ++i) {
    out.epistemic[i] -= out.aleatoric[i];
  }
  return out;
}

double gaussian_kl(const std::vector<double>& mu_post,
                   const std::vector<double>& logvar_post,
                   const std::vector<double>& mu_prior,
                   const std::vector<double>& logvar_prior) {
  const std::size_t K = mu_post.size();
  if (logvar_post.size() != K || mu_prior.size() != K ||
      logvar_prior.size() != K) {
    throw usage_error("gaussian_kl: dimension mismatch");
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    const double d = mu_post[k] - mu_prior[k];
    acc += 0.5 * ((std::exp(logvar_post[k]) + d * d) / std::exp(logvar_prior[k]) -
                  1.0 + logvar_prior[k] - logvar_post[k]);
  }
  return acc;
}

double cvae_loss(double rec_loss, const std::vector<double>& mu_post,
                 const std::vector<double>& logvar_post,
                 const std::vector<double>& mu_prior,
                 const std::vector<double>& logvar_prior) {
  return rec_loss + gaussian_kl(mu_post, logvar_post, mu_prior, logvar_prior);
}

// ---------------------------------------------------------------------------

struct BaselineModel::Impl {
  // shared encoder
  Sequential enc1, enc2, enc3, red1, red2, red3;
  // decoders: base/mc_dropout/gan/cvae use one; deep_ensemble uses M
  struct Decoder {
    Sequential deep;  // plain conv at depth, or latent-inject for gan/cvae
    Sequential dec2, dec1, dec0, head;
  };
  std::vector<Decoder> decoders;
  bool latent_inject = false;
  // gan
  Sequential disc;
  // cvae
  Sequential prior_trunk, prior_mu, prior_logvar;
  Sequential post_trunk, post_mu, post_logvar;
  Shape deep_shape{};

  struct EncOut {
    TensorMap r1, r2, r3;
    Cache c_enc1, c_enc2, c_enc3, c_red1, c_red2, c_red3;
    // dropout masks (mc_dropout), kept for backward
    TensorMap m1, m2, m3;
    bool with_cache = false;
  };

  struct DecCaches {
    Cache deep, d2, d1, d0, head;
    TensorMap zmap;
  };
};

namespace {

void apply_dropout(TensorMap& e, TensorMap* mask, double rate, RngStream& rng) {
  const double keep = 1.0 - rate;
  TensorMap m(e.channels(), e.height(), e.width());
  for (std::size_t i = 0; i < e.size(); ++i) {
    m[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    e[i] *= m[i];
  }
  if (mask) *mask = std::move(m);
}

TensorMap broadcast_z(const std::vector<double>& z, Shape s) {
  TensorMap out(static_cast<int>(z.size()), s.h, s.w);
  for (int k = 0; k < out.channels(); ++k) {
    for (int y = 0; y < s.h; ++y) {
      for (int x = 0; x < s.w; ++x) out.at(k, y, x) = z[k];
    }
  }
  return out;
}

std::vector<double> sum_z_grad(const TensorMap& g) {
  std::vector<double> out(g.channels(), 0.0);
  for (int k = 0; k < g.channels(); ++k) {
    for (int y = 0; y < g.height(); ++y) {
      for (int x = 0; x < g.width(); ++x) out[k] += g.at(k, y, x);
    }
  }
  return out;
}

}  // namespace

BaselineModel::BaselineModel(const BaselineConfig& cfg)
    : cfg_(cfg), impl_(std::make_unique<Impl>()) {
  cfg_.validate();
  const ArchConfig& a = cfg_.arch;
  const double sl = a.leaky_slope;
  const int cr = a.reduced_channels;
  const int s = a.image_size;
  Impl& im = *impl_;

  im.enc1 = simple_conv("enc1", a.image_channels, a.enc1_channels, 2, sl);
  im.enc2 = simple_conv("enc2", a.enc1_channels, a.enc2_channels, 2, sl);
  im.enc3 = simple_conv("enc3", a.enc2_channels, a.enc3_channels, 2, sl);
  im.red1 = Sequential("red1", {LayerSpec::Conv2d(a.enc1_channels, cr, 1, 1, 0),
                                LayerSpec::LeakyRelu(sl)});
  im.red2 = Sequential("red2", {LayerSpec::Conv2d(a.enc2_channels, cr, 1, 1, 0),
                                LayerSpec::LeakyRelu(sl)});
  im.red3 = Sequential("red3", {LayerSpec::Conv2d(a.enc3_channels, cr, 1, 1, 0),
                                LayerSpec::LeakyRelu(sl)});
  im.enc1.bind(gen_store_, Shape{a.image_channels, s, s});
  im.enc2.bind(gen_store_, im.enc1.output_shape());
  im.enc3.bind(gen_store_, im.enc2.output_shape());
  im.red1.bind(gen_store_, im.enc1.output_shape());
  im.red2.bind(gen_store_, im.enc2.output_shape());
  im.red3.bind(gen_store_, im.enc3.output_shape());
  im.deep_shape = im.red3.output_shape();

  im.latent_inject =
      cfg_.method == BaselineMethod::gan || cfg_.method == BaselineMethod::cvae;
  const int n_decoders =
      cfg_.method == BaselineMethod::deep_ensemble ? a.ensemble_size : 1;
  for (int d = 0; d < n_decoders; ++d) {
    const std::string p = "dec" + std::to_string(d) + "_";
    Impl::Decoder dec;
    if (im.latent_inject) {
      dec.deep = Sequential(p + "deep",
                            {LayerSpec::ConcatChannels(a.latent_dim),
                             LayerSpec::Conv2d(cr + a.latent_dim, cr, 3, 1, 1),
                             LayerSpec::LeakyRelu(sl)});
    } else {
      dec.deep = Sequential(p + "deep", {LayerSpec::Conv2d(cr, cr, 3, 1, 1),
                                         LayerSpec::LeakyRelu(sl)});
    }
    dec.dec2 = Sequential(p + "up2", {LayerSpec::NearestUpsample(2),
                                      LayerSpec::ConcatChannels(cr),
                                      LayerSpec::Conv2d(2 * cr, cr, 3, 1, 1),
                                      LayerSpec::LeakyRelu(sl)});
    dec.dec1 = Sequential(p + "up1", {LayerSpec::NearestUpsample(2),
                                      LayerSpec::ConcatChannels(cr),
                                      LayerSpec::Conv2d(2 * cr, cr, 3, 1, 1),
                                      LayerSpec::LeakyRelu(sl)});
    dec.dec0 = Sequential(p + "up0", {LayerSpec::NearestUpsample(2),
                                      LayerSpec::Conv2d(cr, cr, 3, 1, 1),
                                      LayerSpec::LeakyRelu(sl)});
    dec.head = Sequential(p + "head", {LayerSpec::Conv2d(cr, 1, 1, 1, 0),
                                       LayerSpec::Sigmoid()});
    dec.deep.bind(gen_store_, im.deep_shape);
    dec.dec2.bind(gen_store_, im.deep_shape);
    dec.dec1.bind(gen_store_, dec.dec2.output_shape());
    dec.dec0.bind(gen_store_, dec.dec1.output_shape());
    dec.head.bind(gen_store_, dec.dec0.output_shape());
    im.decoders.push_back(std::move(dec));
  }

  if (cfg_.method == BaselineMethod::cvae) {
    auto make_latent_net = [&](const std::string& name, int in_ch,
                               Sequential* trunk, Sequential* mu,
                               Sequential* logvar) {
      const int p = a.prior_channels;
      const int pc[5] = {p, 2 * p, 4 * p, 4 * p, 4 * p};
      std::vector<LayerSpec> layers;
      int ch = in_ch;
      for (int i = 0; i < 5; ++i) {
        layers.push_back(LayerSpec::Conv2d(ch, pc[i], 3, 2, 1));
        layers.push_back(LayerSpec::LeakyRelu(sl));
        ch = pc[i];
      }
      *trunk = Sequential(name, std::move(layers));
      trunk->bind(gen_store_, Shape{in_ch, s, s});
      const Shape ps = trunk->output_shape();
      const int flat = ps.c * ps.h * ps.w;
      *mu = Sequential(name + "_mu", {LayerSpec::Dense(flat, a.latent_dim)});
      *logvar = Sequential(name + "_logvar", {LayerSpec::Dense(flat, a.latent_dim)});
      mu->bind(gen_store_, ps);
      logvar->bind(gen_store_, ps);
    };
    make_latent_net("prior", a.image_channels, &im.prior_trunk, &im.prior_mu,
                    &im.prior_logvar);
    // The posterior differs only in its input channels (image + label).
    make_latent_net("post", a.image_channels + 1, &im.post_trunk, &im.post_mu,
                    &im.post_logvar);
  }

  if (cfg_.method == BaselineMethod::gan) {
    const int dc = 16;
    im.disc = Sequential(
        "disc", {LayerSpec::Conv2d(1, dc, 3, 2, 1), LayerSpec::LeakyRelu(sl),
                 LayerSpec::Conv2d(dc, 2 * dc, 3, 2, 1), LayerSpec::LeakyRelu(sl),
                 LayerSpec::Conv2d(2 * dc, 2 * dc, 3, 2, 1), LayerSpec::LeakyRelu(sl),
                 LayerSpec::Conv2d(2 * dc, 2 * dc, 3, 2, 1), LayerSpec::LeakyRelu(sl),
                 LayerSpec::Conv2d(2 * dc, 1, 1, 1, 0), LayerSpec::Sigmoid()});
    im.disc.bind(disc_store_, Shape{1, s, s});
  }
}

BaselineModel::~BaselineModel() = default;
BaselineModel::BaselineModel(BaselineModel&&) noexcept = default;

void BaselineModel::init_params(RngStream& rng) {
  Impl& im = *impl_;
  RngStream r = rng.substream(0x42415345ULL);
  im.enc1.init_params(gen_store_, r);
  im.enc2.init_params(gen_store_, r);
  im.enc3.init_params(gen_store_, r);
  im.red1.init_params(gen_store_, r);
  im.red2.init_params(gen_store_, r);
  im.red3.init_params(gen_store_, r);
  for (std::size_t d = 0; d < im.decoders.size(); ++d) {
    RngStream rd = rng.substream(0x444543ULL, d);
    im.decoders[d].deep.init_params(gen_store_, rd);
    im.decoders[d].dec2.init_params(gen_store_, rd);
    im.decoders[d].dec1.init_params(gen_store_, rd);
    im.decoders[d].dec0.init_params(gen_store_, rd);
    im.decoders[d].head.init_params(gen_store_, rd);
  }
  if (cfg_.method == BaselineMethod::cvae) {
    im.prior_trunk.init_params(gen_store_, r);
    im.prior_mu.init_params(gen_store_, r);
    im.prior_logvar.init_params(gen_store_, r);
    im.post_trunk.init_params(gen_store_, r);
    im.post_mu.init_params(gen_store_, r);
    im.post_logvar.init_params(gen_store_, r);
  }
  if (cfg_.method == BaselineMethod::gan) {
    RngStream rg = rng.substream(0x47414eULL);
    im.disc.init_params(disc_store_, rg);
  }
}

TensorMap BaselineModel::discriminate(const TensorMap& map) {
  return impl_->disc.forward(disc_store_, map, ForwardMode{});
}

GanLossValues gan_losses(const TensorMap& pred, const TensorMap& y,
                         BaselineModel& model, double lambda) {
  if (model.config().method != BaselineMethod::gan) {
    throw usage_error("gan_losses: model is not a GAN baseline");
  }
  GanLossValues out;
  out.l_rec = ce_loss(pred, y).value;
  TensorMap g_pred = model.discriminate(pred);
  TensorMap g_y = model.discriminate(y);
  TensorMap ones(g_pred.channels(), g_pred.height(), g_pred.width());
  ones.fill(1.0);
  TensorMap zeros(g_pred.channels(), g_pred.height(), g_pred.width());
  out.l_adv = ce_loss(g_pred, ones).value;
  out.l_gen = out.l_rec + lambda * out.l_adv;
  out.l_dis = ce_loss(g_pred, zeros).value + ce_loss(g_y, ones).value;
  return out;
}

// --- forward/backward plumbing ---------------------------------------------

namespace {

struct EncSkips {
  TensorMap g_r1, g_r2, g_r3;
};

void acc_into(TensorMap& acc, const TensorMap& g) {
  if (acc.empty()) {
    acc = g;
    return;
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

}  // namespace

struct BaselineOps {
  using Impl = BaselineModel::Impl;

  static Impl::EncOut encode(BaselineModel& model, const TensorMap& x,
                             RngStream* drop_rng, bool training,
                             bool with_cache) {
    Impl& im = *model.impl_;
    const ForwardMode mode{training, false};
    Impl::EncOut out;
    out.with_cache = with_cache;
    const bool dropout =
        model.cfg_.method == BaselineMethod::mc_dropout && drop_rng != nullptr;
    TensorMap e1 = im.enc1.forward(model.gen_store_, x, mode,
                                   with_cache ? &out.c_enc1 : nullptr);
    if (dropout) apply_dropout(e1, with_cache ? &out.m1 : nullptr,
                               model.cfg_.dropout_rate, *drop_rng);
    TensorMap e2 = im.enc2.forward(model.gen_store_, e1, mode,
                                   with_cache ? &out.c_enc2 : nullptr);
    if (dropout) apply_dropout(e2, with_cache ? &out.m2 : nullptr,
                               model.cfg_.dropout_rate, *drop_rng);
    TensorMap e3 = im.enc3.forward(model.gen_store_, e2, mode,
                                   with_cache ? &out.c_enc3 : nullptr);
    if (dropout) apply_dropout(e3, with_cache ? &out.m3 : nullptr,
                               model.cfg_.dropout_rate, *drop_rng);
    out.r1 = im.red1.forward(model.gen_store_, e1, mode,
                             with_cache ? &out.c_red1 : nullptr);
    out.r2 = im.red2.forward(model.gen_store_, e2, mode,
                             with_cache ? &out.c_red2 : nullptr);
    out.r3 = im.red3.forward(model.gen_store_, e3, mode,
                             with_cache ? &out.c_red3 : nullptr);
    return out;
  }

  static TensorMap decode(BaselineModel& model, int which,
                          const Impl::EncOut& enc,
                          const std::vector<double>* z, bool training,
                          Impl::DecCaches* caches) {
    Impl& im = *model.impl_;
    Impl::Decoder& dec = im.decoders.at(which);
    const ForwardMode mode{training, false};
    TensorMap d3;
    if (im.latent_inject) {
      if (!z) throw usage_error("baseline decode: latent required");
      TensorMap zmap = broadcast_z(*z, im.deep_shape);
      std::vector<TensorMap> sides{zmap};
      d3 = dec.deep.forward(model.gen_store_, enc.r3, sides, mode,
                            caches ? &caches->deep : nullptr);
      if (caches) caches->zmap = std::move(zmap);
    } else {
      d3 = dec.deep.forward(model.gen_store_, enc.r3, mode,
                            caches ? &caches->deep : nullptr);
    }
    std::vector<TensorMap> s2{enc.r2};
    TensorMap d2 = dec.dec2.forward(model.gen_store_, d3, s2, mode,
                                    caches ? &caches->d2 : nullptr);
    std::vector<TensorMap> s1{enc.r1};
    TensorMap d1 = dec.dec1.forward(model.gen_store_, d2, s1, mode,
                                    caches ? &caches->d1 : nullptr);
    TensorMap d0 = dec.dec0.forward(model.gen_store_, d1, mode,
                                    caches ? &caches->d0 : nullptr);
    return dec.head.forward(model.gen_store_, d0, mode,
                            caches ? &caches->head : nullptr);
  }

  // Returns the latent gradient (empty when the decoder has no latent).
  static std::vector<double> backward_decoder(BaselineModel& model, int which,
                                              const Impl::DecCaches& caches,
                                              const TensorMap& g_pred,
                                              Grads* grads, EncSkips* skips) {
    Impl& im = *model.impl_;
    Impl::Decoder& dec = im.decoders.at(which);
    TensorMap g_d0 = dec.head.backward(model.gen_store_, caches.head, g_pred, grads);
    TensorMap g_d1 = dec.dec0.backward(model.gen_store_, caches.d0, g_d0, grads);
    std::vector<TensorMap> side1;
    TensorMap g_d2 = dec.dec1.backward(model.gen_store_, caches.d1, g_d1, grads, &side1);
    std::vector<TensorMap> side2;
    TensorMap g_d3 = dec.dec2.backward(model.gen_store_, caches.d2, g_d2, grads, &side2);
    std::vector<double> gz;
    TensorMap g_r3;
    if (im.latent_inject) {
      std::vector<TensorMap> side_z;
      g_r3 = dec.deep.backward(model.gen_store_, caches.deep, g_d3, grads, &side_z);
      gz = sum_z_grad(side_z[0]);
    } else {
      g_r3 = dec.deep.backward(model.gen_store_, caches.deep, g_d3, grads);
    }
    if (skips) {
      acc_into(skips->g_r1, side1[0]);
      acc_into(skips->g_r2, side2[0]);
      acc_into(skips->g_r3, g_r3);
    }
    return gz;
  }

  static void backward_encoder(BaselineModel& model, const Impl::EncOut& enc,
                               const EncSkips& skips, Grads* grads) {
    Impl& im = *model.impl_;
    if (!enc.with_cache) {
      throw numeric_error("baseline backward_encoder: missing caches");
    }
    const bool dropout = !enc.m1.empty();
    TensorMap g_e3 = im.red3.backward(model.gen_store_, enc.c_red3, skips.g_r3, grads);
    if (dropout) {
      for (std::size_t i = 0; i < g_e3.size(); ++i) g_e3[i] *= enc.m3[i];
    }
    TensorMap g_e2 = im.enc3.backward(model.gen_store_, enc.c_enc3, g_e3, grads);
    {
      TensorMap g_e2b = im.red2.backward(model.gen_store_, enc.c_red2, skips.g_r2, grads);
      for (std::size_t i = 0; i < g_e2.size(); ++i) g_e2[i] += g_e2b[i];
    }
    if (dropout) {
      for (std::size_t i = 0; i < g_e2.size(); ++i) g_e2[i] *= enc.m2[i];
    }
    TensorMap g_e1 = im.enc2.backward(model.gen_store_, enc.c_enc2, g_e2, grads);
    {
      TensorMap g_e1b = im.red1.backward(model.gen_store_, enc.c_red1, skips.g_r1, grads);
      for (std::size_t i = 0; i < g_e1.size(); ++i) g_e1[i] += g_e1b[i];
    }
    if (dropout) {
      for (std::size_t i = 0; i < g_e1.size(); ++i) g_e1[i] *= enc.m1[i];
    }
    im.enc1.backward(model.gen_store_, enc.c_enc1, g_e1, grads);
  }

  struct LatentNetOut {
    std::vector<double> mu, log_var;
    Cache c_trunk, c_mu, c_logvar;
    Shape trunk_shape{};
  };

  static LatentNetOut latent_forward(BaselineModel& model, Sequential& trunk,
                                     Sequential& mu_net, Sequential& logvar_net,
                                     const TensorMap& input, bool training,
                                     bool with_cache) {
    const ForwardMode mode{training, false};
    LatentNetOut out;
    TensorMap t = trunk.forward(model.gen_store_, input, mode,
                                with_cache ? &out.c_trunk : nullptr);
    out.trunk_shape = trunk.output_shape();
    TensorMap m = mu_net.forward(model.gen_store_, t, mode,
                                 with_cache ? &out.c_mu : nullptr);
    TensorMap lv = logvar_net.forward(model.gen_store_, t, mode,
                                      with_cache ? &out.c_logvar : nullptr);
    out.mu = m.data();
    out.log_var = lv.data();
    return out;
  }

  static void latent_backward(BaselineModel& model, Sequential& trunk,
                              Sequential& mu_net, Sequential& logvar_net,
                              const LatentNetOut& fwd,
                              const std::vector<double>& g_mu,
                              const std::vector<double>& g_logvar,
                              Grads* grads) {
    TensorMap gm(static_cast<int>(g_mu.size()), 1, 1, g_mu);
    TensorMap gl(static_cast<int>(g_logvar.size()), 1, 1, g_logvar);
    TensorMap g_t = mu_net.backward(model.gen_store_, fwd.c_mu, gm, grads);
    TensorMap g_t2 = logvar_net.backward(model.gen_store_, fwd.c_logvar, gl, grads);
    for (std::size_t i = 0; i < g_t.size(); ++i) g_t[i] += g_t2[i];
    TensorMap g_shaped(fwd.trunk_shape.c, fwd.trunk_shape.h, fwd.trunk_shape.w,
                       g_t.data());
    trunk.backward(model.gen_store_, fwd.c_trunk, g_shaped, grads);
  }
};

TensorMap BaselineModel::predict(const TensorMap& x, RngStream& rng,
                                 int pass_index) {
  Impl& im = *impl_;
  RngStream pass_rng = rng.substream(static_cast<std::uint64_t>(pass_index));
  switch (cfg_.method) {
    case BaselineMethod::base: {
      auto enc = BaselineOps::encode(*this, x, nullptr, false, false);
      return BaselineOps::decode(*this, 0, enc, nullptr, false, nullptr);
    }
    case BaselineMethod::mc_dropout: {
      // Dropout stays active at test time.
      auto enc = BaselineOps::encode(*this, x, &pass_rng, false, false);
      return BaselineOps::decode(*this, 0, enc, nullptr, false, nullptr);
    }
    case BaselineMethod::deep_ensemble: {
      auto enc = BaselineOps::encode(*this, x, nullptr, false, false);
      const int which = pass_index % static_cast<int>(im.decoders.size());
      return BaselineOps::decode(*this, which, enc, nullptr, false, nullptr);
    }
    case BaselineMethod::gan: {
      auto enc = BaselineOps::encode(*this, x, nullptr, false, false);
      std::vector<double> z = pass_rng.normal_vector(cfg_.arch.latent_dim);
      return BaselineOps::decode(*this, 0, enc, &z, false, nullptr);
    }
    case BaselineMethod::cvae: {
      auto enc = BaselineOps::encode(*this, x, nullptr, false, false);
      auto prior = BaselineOps::latent_forward(*this, im.prior_trunk, im.prior_mu,
                                               im.prior_logvar, x, false, false);
      std::vector<double> z(cfg_.arch.latent_dim);
      for (int k = 0; k < cfg_.arch.latent_dim; ++k) {
        z[k] = prior.mu[k] + std::exp(prior.log_var[k] / 2.0) * pass_rng.normal();
      }
      return BaselineOps::decode(*this, 0, enc, &z, false, nullptr);
    }
  }
  throw usage_error("predict: unknown method");
}

SampledPredictions BaselineModel::sample_predictions(const TensorMap& x,
                                                     RngStream& rng,
                                                     int passes) {
  SampledPredictions out;
  out.source = baseline_method_name(cfg_.method);
  out.preds.reserve(passes);
  for (int p = 0; p < passes; ++p) out.preds.push_back(predict(x, rng, p));
  return out;
}

std::pair<double, double> BaselineModel::train_step(
    const std::vector<const SyntheticSample*>& batch, int epoch) {
  if (batch.empty()) throw usage_error("baseline train_step: empty batch");
  Impl& im = *impl_;
  const int n = static_cast<int>(batch.size());

  struct Result {
    Grads gen, disc;
    double primary = 0.0, secondary = 0.0;
  };
  std::vector<Result> results(n);

  auto work = [&](std::size_t i) {
    const SyntheticSample& sample = *batch[i];
    const TensorMap& x = sample.image;
    const TensorMap& y = sample.noisy_label;
    RngStream rng = RngStream(cfg_.seed, 0x42535450ULL)
                        .substream(static_cast<std::uint64_t>(epoch),
                                   static_cast<std::uint64_t>(sample.index));
    Result& res = results[i];
    res.gen = Grads(gen_store_);
    res.disc = Grads(disc_store_);

    switch (cfg_.method) {
      case BaselineMethod::base:
      case BaselineMethod::mc_dropout: {
        RngStream drop = rng.substream(1);
        auto enc = BaselineOps::encode(
            *this, x, cfg_.method == BaselineMethod::mc_dropout ? &drop : nullptr,
            true, true);
        Impl::DecCaches caches;
        TensorMap pred = BaselineOps::decode(*this, 0, enc, nullptr, true, &caches);
        CeLoss loss = ce_loss(pred, y);
        res.primary = loss.value;
        EncSkips skips;
        BaselineOps::backward_decoder(*this, 0, caches, loss.d_pred, &res.gen, &skips);
        BaselineOps::backward_encoder(*this, enc, skips, &res.gen);
        break;
      }
      case BaselineMethod::deep_ensemble: {
        auto enc = BaselineOps::encode(*this, x, nullptr, true, true);
        EncSkips skips;
        const int D = static_cast<int>(im.decoders.size());
        for (int d = 0; d < D; ++d) {
          Impl::DecCaches caches;
          TensorMap pred = BaselineOps::decode(*this, d, enc, nullptr, true, &caches);
          CeLoss loss = ce_loss(pred, y);
          res.primary += loss.value / D;
          TensorMap g = loss.d_pred;
          for (auto& v : g.data()) v /= D;
          BaselineOps::backward_decoder(*this, d, caches, g, &res.gen, &skips);
        }
        BaselineOps::backward_encoder(*this, enc, skips, &res.gen);
        break;
      }
      case BaselineMethod::gan: {
        auto enc = BaselineOps::encode(*this, x, nullptr, true, true);
        std::vector<double> z = rng.substream(2).normal_vector(cfg_.arch.latent_dim);
        Impl::DecCaches caches;
        TensorMap pred = BaselineOps::decode(*this, 0, enc, &z, true, &caches);

        CeLoss rec = ce_loss(pred, y);
        // Adversarial term: gradient reaches the generator through the
        // discriminator's input, with discriminator weights frozen.
        Cache disc_cache;
        TensorMap score = im.disc.forward(disc_store_, pred, ForwardMode{true, false},
                                          &disc_cache);
        TensorMap ones(score.channels(), score.height(), score.width());
        ones.fill(1.0);
        CeLoss adv = ce_loss(score, ones);
        TensorMap g_pred_adv =
            im.disc.backward(disc_store_, disc_cache, adv.d_pred, nullptr);
        TensorMap g_pred = rec.d_pred;
        for (std::size_t p = 0; p < g_pred.size(); ++p) {
          g_pred[p] += cfg_.gan_lambda * g_pred_adv[p];
        }
        res.primary = rec.value + cfg_.gan_lambda * adv.value;
        EncSkips skips;
        BaselineOps::backward_decoder(*this, 0, caches, g_pred, &res.gen, &skips);
        BaselineOps::backward_encoder(*this, enc, skips, &res.gen);

        // Discriminator step on the detached prediction and the label map.
        Cache dc_fake, dc_real;
        TensorMap s_fake =
            im.disc.forward(disc_store_, pred, ForwardMode{true, false}, &dc_fake);
        TensorMap s_real =
            im.disc.forward(disc_store_, y, ForwardMode{true, false}, &dc_real);
        TensorMap zeros(s_fake.channels(), s_fake.height(), s_fake.width());
        CeLoss d_fake = ce_loss(s_fake, zeros);
        CeLoss d_real = ce_loss(s_real, ones);
        im.disc.backward(disc_store_, dc_fake, d_fake.d_pred, &res.disc);
        im.disc.backward(disc_store_, dc_real, d_real.d_pred, &res.disc);
        res.secondary = d_fake.value + d_real.value;
        break;
      }
      case BaselineMethod::cvae: {
        auto enc = BaselineOps::encode(*this, x, nullptr, true, true);
        auto prior = BaselineOps::latent_forward(*this, im.prior_trunk, im.prior_mu,
                                                 im.prior_logvar, x, true, true);
        TensorMap xy = concat_channels(x, y);
        auto post = BaselineOps::latent_forward(*this, im.post_trunk, im.post_mu,
                                                im.post_logvar, xy, true, true);
        const int K = cfg_.arch.latent_dim;
        std::vector<double> eps(K), z(K);
        RngStream zr = rng.substream(3);
        for (int k = 0; k < K; ++k) {
          eps[k] = zr.normal();
          z[k] = post.mu[k] + std::exp(post.log_var[k] / 2.0) * eps[k];
        }
        Impl::DecCaches caches;
        TensorMap pred = BaselineOps::decode(*this, 0, enc, &z, true, &caches);
        CeLoss rec = ce_loss(pred, y);
        EncSkips skips;
        std::vector<double> gz = BaselineOps::backward_decoder(
            *this, 0, caches, rec.d_pred, &res.gen, &skips);
        BaselineOps::backward_encoder(*this, enc, skips, &res.gen);

        const double kl = gaussian_kl(post.mu, post.log_var, prior.mu, prior.log_var);
        std::vector<double> g_mu_q(K), g_lv_q(K), g_mu_p(K), g_lv_p(K);
        for (int k = 0; k < K; ++k) {
          const double inv_p = std::exp(-prior.log_var[k]);
          const double var_q = std::exp(post.log_var[k]);
          const double d = post.mu[k] - prior.mu[k];
          // Reparameterized reconstruction path.
          g_mu_q[k] = gz[k];
          g_lv_q[k] = gz[k] * eps[k] * std::exp(post.log_var[k] / 2.0) * 0.5;
          // KL(post || prior) closed-form gradients.
          g_mu_q[k] += d * inv_p;
          g_mu_p[k] = -d * inv_p;
          g_lv_q[k] += 0.5 * (var_q * inv_p - 1.0);
          g_lv_p[k] = 0.5 * (1.0 - (var_q + d * d) * inv_p);
        }
        BaselineOps::latent_backward(*this, im.post_trunk, im.post_mu, im.post_logvar,
                                     post, g_mu_q, g_lv_q, &res.gen);
        BaselineOps::latent_backward(*this, im.prior_trunk, im.prior_mu,
                                     im.prior_logvar, prior, g_mu_p, g_lv_p,
                                     &res.gen);
        res.primary = rec.value;
        res.secondary = kl;
        break;
      }
    }
  };
  parallel_for(static_cast<std::size_t>(n), cfg_.threads, work);

  Grads gen(gen_store_), disc(disc_store_);
  double primary = 0.0, secondary = 0.0;
  for (const auto& r : results) {
    gen.add(r.gen);
    disc.add(r.disc);
    primary += r.primary / n;
    secondary += r.secondary / n;
  }
  gen.scale(1.0 / n);
  disc.scale(1.0 / n);

  AdamConfig adam;
  const double t = cfg_.lr_decay_point * cfg_.epochs;
  adam.lr = epoch >= t ? cfg_.base_lr * cfg_.lr_decay_factor : cfg_.base_lr;
  adam_step(gen_store_, gen, adam);
  if (cfg_.method == BaselineMethod::gan) adam_step(disc_store_, disc, adam);
  return {primary, secondary};
}

ValMetrics BaselineModel::evaluate(const std::vector<SyntheticSample>& samples) {
  if (samples.empty()) throw usage_error("baseline evaluate: empty set");
  struct Row {
    double mae = 0.0, f = 0.0, ece = 0.0;
    bool excluded = false;
  };
  std::vector<Row> rows(samples.size());
  auto work = [&](std::size_t i) {
    const SyntheticSample& s = samples[i];
    RngStream rng = RngStream(cfg_.seed, 0x4556414cULL)
                        .substream(static_cast<std::uint64_t>(s.index));
    SampledPredictions sp = sample_predictions(s.image, rng, cfg_.eval_passes);
    TensorMap mean(1, s.image.height(), s.image.width());
    for (const auto& p : sp.preds) {
      for (std::size_t q = 0; q < mean.size(); ++q) mean[q] += p[q];
    }
    for (auto& v : mean.data()) v /= static_cast<double>(sp.preds.size());
    rows[i].mae = mae(mean, s.noisy_label);
    rows[i].ece = ece_dense(mean, s.noisy_label);
    try {
      rows[i].f = f_measure(mean, s.noisy_label);
    } catch (const usage_error&) {
      rows[i].excluded = true;
    }
  };
  parallel_for(samples.size(), cfg_.threads, work);
  ValMetrics out;
  int f_count = 0;
  for (const auto& r : rows) {
    out.mae += r.mae / static_cast<double>(samples.size());
    out.ece += r.ece / static_cast<double>(samples.size());
    if (!r.excluded) {
      out.f_beta += r.f;
      ++f_count;
    }
  }
  out.f_beta = f_count > 0 ? out.f_beta / f_count : 0.0;
  return out;
}

TrainResult BaselineModel::train(const std::vector<SyntheticSample>& train_set,
                                 const std::vector<SyntheticSample>& val_set,
                                 const std::string& out_dir) {
  if (train_set.empty()) throw usage_error("baseline train: empty training set");
  TrainResult result;
  RngStream shuffle_rng(cfg_.seed, 0x53485546ULL);
  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    RngStream er = shuffle_rng.substream(static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order = er.permutation(train_set.size());
    double primary = 0.0, secondary = 0.0;
    int steps = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg_.batch_size) {
      std::vector<const SyntheticSample*> batch;
      for (std::size_t j = at; j < std::min(order.size(), at + cfg_.batch_size);
           ++j) {
        batch.push_back(&train_set[order[j]]);
      }
      auto [p, s] = train_step(batch, epoch);
      primary += p;
      secondary += s;
      ++steps;
    }
    EpochRow row;
    row.epoch = epoch;
    row.losses.l_d = primary / steps;
    row.losses.l_s = secondary / steps;
    if (!val_set.empty()) {
      ValMetrics v = evaluate(val_set);
      row.val_mae = v.mae;
      row.val_fbeta = v.f_beta;
      row.val_ece = v.ece;
    }
    row.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.log.rows.push_back(row);
  }

  quantize_store(gen_store_);
  if (cfg_.method == BaselineMethod::gan) quantize_store(disc_store_);
  if (!val_set.empty()) result.final_val = evaluate(val_set);

  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw io_error("baseline train: cannot create " + out_dir);
    json header;
    header["method"] = baseline_method_name(cfg_.method);
    header["baseline_config"] = cfg_.to_json();
    header["seed"] = cfg_.seed;
    header["tool"] = "duq";
    result.checkpoint_path = out_dir + "/checkpoint.duqc";
    std::vector<std::pair<std::string, const ParamStore*>> stores{
        {"gen", &gen_store_}};
    if (cfg_.method == BaselineMethod::gan) stores.push_back({"disc", &disc_store_});
    save_checkpoint(result.checkpoint_path, header, stores);
    result.log.write_csv(out_dir + "/train_log.csv");
  }
  return result;
}

}  // namespace duq
