#include "duq/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "duq/checkpoint.hpp"
#include "duq/errors.hpp"
#include "duq/metrics.hpp"
#include "duq/threading.hpp"

using nlohmann::json;

namespace duq {

void TrainConfig::validate() const {
  arch.validate();
  if (epochs < 1) throw usage_error("TrainConfig: epochs must be >= 1");
  if (batch_size < 1) throw usage_error("TrainConfig: batch_size must be >= 1");
  if (base_lr <= 0.0) throw usage_error("TrainConfig: base_lr must be > 0");
  if (lr_decay_point <= 0.0 || lr_decay_point >= 1.0) {
    throw usage_error("TrainConfig: lr_decay_point must be in (0,1)");
  }
  if (lr_decay_factor <= 0.0 || lr_decay_factor > 1.0) {
    throw usage_error("TrainConfig: lr_decay_factor must be in (0,1]");
  }
  if (heads.image_size != arch.image_size) {
    throw usage_error("TrainConfig: head/arch image sizes differ");
  }
}

json TrainConfig::to_json() const {
  json j;
  j["epochs"] = epochs;
  j["batch_size"] = batch_size;
  j["base_lr"] = base_lr;
  j["lr_decay_point"] = lr_decay_point;
  j["lr_decay_factor"] = lr_decay_factor;
  j["langevin_steps"] = langevin.steps;
  j["langevin_step_size"] = langevin.step_size;
  j["langevin_sigma_lik"] = langevin.sigma_lik;
  j["conditional_prior"] = langevin.conditional;
  j["shared_z"] = langevin.shared_z;
  j["loss_mode"] = loss_mode_name(loss_mode);
  j["prior_nll_weight"] = prior_nll_weight;
  j["use_consistency"] = use_consistency;
  j["plain_dual_head"] = plain_dual_head;
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
  j["det_shares_trunk"] = arch.det_shares_trunk;
  j["leaky_slope"] = arch.leaky_slope;
  j["alpha_channels"] = heads.alpha_channels;
  j["beta_channels"] = heads.beta_channels;
  return j;
}

TrainConfig TrainConfig::from_json(const json& j) {
  static const char* known[] = {
      "epochs",          "batch_size",       "base_lr",
      "lr_decay_point",  "lr_decay_factor",  "langevin_steps",
      "langevin_step_size", "langevin_sigma_lik", "conditional_prior",
      "shared_z",        "loss_mode",        "prior_nll_weight",
      "use_consistency", "plain_dual_head",  "seed",
      "threads",         "image_size",       "enc1_channels",
      "enc2_channels",   "enc3_channels",    "reduced_channels",
      "prior_channels",  "latent_dim",       "ensemble_size",
      "det_shares_trunk", "leaky_slope",     "alpha_channels",
      "beta_channels"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw usage_error("train config: unknown key '" + it.key() + "'");
  }
  TrainConfig cfg;
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.batch_size = j.value("batch_size", cfg.batch_size);
  cfg.base_lr = j.value("base_lr", cfg.base_lr);
  cfg.lr_decay_point = j.value("lr_decay_point", cfg.lr_decay_point);
  cfg.lr_decay_factor = j.value("lr_decay_factor", cfg.lr_decay_factor);
  cfg.langevin.steps = j.value("langevin_steps", cfg.langevin.steps);
  cfg.langevin.step_size = j.value("langevin_step_size", cfg.langevin.step_size);
  cfg.langevin.sigma_lik = j.value("langevin_sigma_lik", cfg.langevin.sigma_lik);
  cfg.langevin.conditional = j.value("conditional_prior", cfg.langevin.conditional);
  cfg.langevin.shared_z = j.value("shared_z", cfg.langevin.shared_z);
  cfg.loss_mode = loss_mode_from_name(
      j.value("loss_mode", loss_mode_name(cfg.loss_mode)));
  cfg.prior_nll_weight = j.value("prior_nll_weight", cfg.prior_nll_weight);
  cfg.use_consistency = j.value("use_consistency", cfg.use_consistency);
  cfg.plain_dual_head = j.value("plain_dual_head", cfg.plain_dual_head);
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
  cfg.arch.det_shares_trunk = j.value("det_shares_trunk", cfg.arch.det_shares_trunk);
  cfg.arch.leaky_slope = j.value("leaky_slope", cfg.arch.leaky_slope);
  cfg.heads.image_size = cfg.arch.image_size;
  cfg.heads.image_channels = cfg.arch.image_channels;
  cfg.heads.alpha_channels = j.value("alpha_channels", cfg.heads.alpha_channels);
  cfg.heads.beta_channels = j.value("beta_channels", cfg.heads.beta_channels);
  cfg.heads.leaky_slope = cfg.arch.leaky_slope;
  cfg.validate();
  return cfg;
}

TrainConfig TrainConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw usage_error(std::string("train config: bad JSON: ") + e.what());
  }
  return from_json(j);
}

double lr_schedule(const TrainConfig& cfg, int epoch) {
  if (epoch < 0 || epoch >= cfg.epochs) {
    throw usage_error("lr_schedule: epoch out of range");
  }
  const double threshold = cfg.lr_decay_point * cfg.epochs;
  return epoch >= threshold ? cfg.base_lr * cfg.lr_decay_factor : cfg.base_lr;
}

void TrainLog::write_csv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw io_error("TrainLog: cannot open " + path);
  out.precision(17);
  out << "epoch,l_d,l_s,l_au,l_pu,l_prior,val_mae,val_fbeta,val_ece,"
         "wall_time_s\n";
  for (const auto& r : rows) {
    out << r.epoch << "," << r.losses.l_d << "," << r.losses.l_s << ","
        << r.losses.l_au << "," << r.losses.l_pu << "," << r.losses.l_prior
        << "," << r.val_mae << "," << r.val_fbeta << "," << r.val_ece << ","
        << r.wall_time_s << "\n";
  }
}

Trainer::Trainer(const TrainConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  state_ = std::make_unique<ElvmState>(cfg_.arch);
  heads_ = std::make_unique<UncertaintyHeads>(cfg_.heads);
  RngStream init_rng(cfg_.seed, 0x494e4954ULL);
  state_->init_params(init_rng);
  heads_->init_params(init_rng);
}

std::vector<std::vector<double>> Trainer::head_latents(const LatentChain& chain,
                                                       int ensemble_size,
                                                       bool shared_z) {
  std::vector<std::vector<double>> out;
  out.reserve(ensemble_size);
  const int last = static_cast<int>(chain.z.size()) - 1;
  for (int m = 0; m < ensemble_size; ++m) {
    if (shared_z) {
      out.push_back(chain.z[last]);
    } else {
      const int idx = std::max(0, last - (ensemble_size - 1 - m));
      out.push_back(chain.z[idx]);
    }
  }
  return out;
}

namespace {

struct SampleResult {
  Grads theta, alpha, beta;
  StepLosses losses;
  TensorMap stats_pred;  // sample 0 only: feeds the running-stat refresh
};

double prior_nll_and_grads(const std::vector<double>& z,
                           const std::vector<double>& mu,
                           const std::vector<double>& log_var,
                           std::vector<double>* g_mu,
                           std::vector<double>* g_logvar, double scale) {
  const double K = static_cast<double>(z.size());
  double acc = 0.0;
  for (std::size_t k = 0; k < z.size(); ++k) {
    const double inv = std::exp(-log_var[k]);
    const double d = z[k] - mu[k];
    acc += 0.5 * (log_var[k] + d * d * inv);
    if (g_mu) (*g_mu)[k] += scale * (mu[k] - z[k]) * inv / K;
    if (g_logvar) (*g_logvar)[k] += scale * 0.5 * (1.0 - d * d * inv) / K;
  }
  return acc / K;
}

}  // namespace

StepLosses Trainer::train_step(const std::vector<const SyntheticSample*>& batch,
                               int epoch) {
  if (batch.empty()) throw usage_error("train_step: empty batch");
  const int n = static_cast<int>(batch.size());
  const int M = cfg_.arch.ensemble_size;

  std::vector<SampleResult> results(n);
  auto work = [&](std::size_t i) {
    const SyntheticSample& sample = *batch[i];
    const TensorMap& x = sample.image;
    const TensorMap& y = sample.noisy_label;
    RngStream rng = RngStream(cfg_.seed, 0x53544550ULL)
                        .substream(static_cast<std::uint64_t>(epoch),
                                   static_cast<std::uint64_t>(sample.index));
    SampleResult& res = results[i];
    res.theta = Grads(state_->store());
    res.alpha = Grads(heads_->alpha_store());
    res.beta = Grads(heads_->beta_store());

    try {
      EncoderFeatures enc = state_->encode(x, /*training=*/true, /*with_cache=*/true);
      SkipGrads skips;
      DetDecodeCache det_cache;
      TensorMap f_det =
          state_->decode_deterministic(state_->store(), enc, true, &det_cache);

      if (cfg_.plain_dual_head) {
        // Eq.-(3)-style dual head: sigma comes from the aleatoric head and
        // learns through the attenuated loss itself.
        Cache alpha_cache;
        TensorMap s_a = heads_->aleatoric_log_var(x, ForwardMode{true, true},
                                                  &alpha_cache);
        AttenuatedLoss l_d = attenuated_loss(f_det, y, s_a, cfg_.loss_mode);
        res.losses.l_d = l_d.value;
        state_->backward_deterministic(det_cache, l_d.d_pred, &res.theta, &skips);
        state_->backward_encoder(enc, skips, &res.theta);
        heads_->aleatoric_backward(alpha_cache, l_d.d_s, &res.alpha);
        return;
      }

      RngStream chain_rng = rng.substream(1);
      LatentChain chain = infer_latent(*state_, x, y, cfg_.langevin, chain_rng);
      std::vector<std::vector<double>> zs = head_latents(chain, M,
                                                         cfg_.langevin.shared_z);

      std::vector<StochDecodeCache> caches(M);
      std::vector<TensorMap> preds;
      preds.reserve(M);
      for (int m = 0; m < M; ++m) {
        preds.push_back(state_->decode_stochastic(state_->store(), enc, zs[m],
                                                  m, true, &caches[m]));
      }

      PredictiveHeadPass ppass =
          predictive_head_pass(*heads_, x, preds[0], /*training=*/true);
      if (i == 0) res.stats_pred = preds[0];
      const TensorMap& sigma_map = ppass.s_up;  // gradient-free in L_task

      AttenuatedLoss l_d = attenuated_loss(f_det, y, sigma_map, cfg_.loss_mode);
      res.losses.l_d = l_d.value;
      state_->backward_deterministic(det_cache, l_d.d_pred, &res.theta, &skips);

      for (int m = 0; m < M; ++m) {
        AttenuatedLoss l_m = attenuated_loss(preds[m], y, sigma_map, cfg_.loss_mode);
        res.losses.l_s += l_m.value / M;
        TensorMap g = l_m.d_pred;
        for (auto& v : g.data()) v /= M;
        state_->backward_stochastic(caches[m], g, &res.theta, &skips);
      }

      // Conditional-prior likelihood of the inferred latents trains the
      // prior net together with the task losses.
      PriorForward prior = state_->prior_forward(x, true, true);
      std::vector<double> g_mu(prior.mu.size(), 0.0);
      std::vector<double> g_lv(prior.mu.size(), 0.0);
      for (int m = 0; m < M; ++m) {
        res.losses.l_prior +=
            cfg_.prior_nll_weight *
            prior_nll_and_grads(zs[m], prior.mu, prior.log_var, &g_mu, &g_lv,
                                cfg_.prior_nll_weight / M) /
            M;
      }
      state_->prior_backward(prior, g_mu, g_lv, &res.theta);

      state_->backward_encoder(enc, skips, &res.theta);

      if (cfg_.use_consistency) {
        TensorMap f_star = optimal_prediction(preds, y);
        res.losses.l_au =
            aleatoric_consistency_loss(*heads_, x, f_star, &res.alpha);
        res.losses.l_pu =
            predictive_consistency_from_pass(*heads_, ppass, preds, y, &res.beta);
      }
    } catch (const numeric_error& e) {
      std::ostringstream diag;
      diag << "train_step: numeric failure on sample index " << sample.index
           << " (epoch " << epoch << "): " << e.what();
      throw numeric_error(diag.str());
    }
  };
  parallel_for(static_cast<std::size_t>(n), cfg_.threads, work);

  Grads theta(state_->store());
  Grads alpha(heads_->alpha_store());
  Grads beta(heads_->beta_store());
  StepLosses losses;
  for (const auto& res : results) {
    theta.add(res.theta);
    alpha.add(res.alpha);
    beta.add(res.beta);
    losses.l_d += res.losses.l_d / n;
    losses.l_s += res.losses.l_s / n;
    losses.l_au += res.losses.l_au / n;
    losses.l_pu += res.losses.l_pu / n;
    losses.l_prior += res.losses.l_prior / n;
  }
  theta.scale(1.0 / n);
  alpha.scale(1.0 / n);
  beta.scale(1.0 / n);

  AdamConfig adam;
  adam.lr = lr_schedule(cfg_, epoch);
  adam_step(state_->store(), theta, adam);
  if (cfg_.plain_dual_head || cfg_.use_consistency) {
    adam_step(heads_->alpha_store(), alpha, adam);
  }
  if (!cfg_.plain_dual_head && cfg_.use_consistency) {
    adam_step(heads_->beta_store(), beta, adam);
    heads_->update_predictive_running_stats(batch[0]->image,
                                            results[0].stats_pred);
  }
  return losses;
}

ValMetrics Trainer::evaluate(const std::vector<SyntheticSample>& samples) {
  if (samples.empty()) throw usage_error("evaluate: empty sample set");
  struct Row {
    double mae = 0.0, f = 0.0, ece = 0.0;
    bool f_excluded = false;
  };
  std::vector<Row> rows(samples.size());
  auto work = [&](std::size_t i) {
    const SyntheticSample& s = samples[i];
    EncoderFeatures enc = state_->encode(s.image, false, false);
    TensorMap pred =
        state_->decode_deterministic(state_->store(), enc, false, nullptr);
    rows[i].mae = mae(pred, s.noisy_label);
    rows[i].ece = ece_dense(pred, s.noisy_label);
    try {
      rows[i].f = f_measure(pred, s.noisy_label);
    } catch (const usage_error&) {
      rows[i].f_excluded = true;
    }
  };
  parallel_for(samples.size(), cfg_.threads, work);
  ValMetrics out;
  int f_count = 0;
  for (const auto& r : rows) {
    out.mae += r.mae / static_cast<double>(samples.size());
    out.ece += r.ece / static_cast<double>(samples.size());
    if (!r.f_excluded) {
      out.f_beta += r.f;
      ++f_count;
    }
  }
  out.f_beta = f_count > 0 ? out.f_beta / f_count : 0.0;
  return out;
}

json elvm_checkpoint_header(const TrainConfig& cfg) {
  json header;
  header["method"] = cfg.plain_dual_head ? "dual_head" : "elvm";
  header["train_config"] = cfg.to_json();
  header["seed"] = cfg.seed;
  header["tool"] = "duq";
  return header;
}

TrainResult Trainer::train(const std::vector<SyntheticSample>& train_set,
                           const std::vector<SyntheticSample>& val_set,
                           const std::string& out_dir) {
  if (train_set.empty()) throw usage_error("train: empty training set");
  TrainResult result;
  RngStream shuffle_rng(cfg_.seed, 0x53485546ULL);

  for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    RngStream er = shuffle_rng.substream(static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order = er.permutation(train_set.size());

    StepLosses epoch_losses;
    int steps = 0;
    for (std::size_t at = 0; at < order.size(); at += cfg_.batch_size) {
      std::vector<const SyntheticSample*> batch;
      for (std::size_t j = at;
           j < std::min(order.size(), at + cfg_.batch_size); ++j) {
        batch.push_back(&train_set[order[j]]);
      }
      StepLosses l = train_step(batch, epoch);
      epoch_losses.l_d += l.l_d;
      epoch_losses.l_s += l.l_s;
      epoch_losses.l_au += l.l_au;
      epoch_losses.l_pu += l.l_pu;
      epoch_losses.l_prior += l.l_prior;
      ++steps;
    }
    epoch_losses.l_d /= steps;
    epoch_losses.l_s /= steps;
    epoch_losses.l_au /= steps;
    epoch_losses.l_pu /= steps;
    epoch_losses.l_prior /= steps;

    EpochRow row;
    row.epoch = epoch;
    row.losses = epoch_losses;
    if (!val_set.empty()) {
      ValMetrics v = evaluate(val_set);
      row.val_mae = v.mae;
      row.val_fbeta = v.f_beta;
      row.val_ece = v.ece;
    }
    row.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
            .count();
    result.log.rows.push_back(row);
  }

  // Final metrics are computed after float32 quantization so a checkpoint
  // reload reproduces them exactly.
  quantize_store(state_->store());
  quantize_store(heads_->alpha_store());
  quantize_store(heads_->beta_store());
  if (!val_set.empty()) result.final_val = evaluate(val_set);

  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw io_error("train: cannot create " + out_dir);
    result.checkpoint_path = out_dir + "/checkpoint.duqc";
    save_checkpoint(result.checkpoint_path, elvm_checkpoint_header(cfg_),
                    {{"theta", &state_->store()},
                     {"alpha", &heads_->alpha_store()},
                     {"beta", &heads_->beta_store()}});
    result.log.write_csv(out_dir + "/train_log.csv");
  }
  return result;
}

}  // namespace duq
