#pragma once

#include <memory>
#include <string>
#include <vector>

#include "duq/model.hpp"
#include "duq/param_store.hpp"
#include "duq/synth.hpp"
#include "duq/tensor.hpp"
#include "duq/trainer.hpp"
#include "json.hpp"

namespace duq {

enum class BaselineMethod { base, mc_dropout, deep_ensemble, gan, cvae };

std::string baseline_method_name(BaselineMethod m);
BaselineMethod baseline_method_from_name(const std::string& name);

struct BaselineConfig {
  ArchConfig arch;  // encoder/decoder widths; ensemble_size and latent_dim
  BaselineMethod method = BaselineMethod::base;
  int epochs = 30;
  int batch_size = 8;
  double base_lr = 1e-3;
  double lr_decay_point = 0.8;
  double lr_decay_factor = 0.9;
  double dropout_rate = 0.3;
  int eval_passes = 10;
  double gan_lambda = 0.1;
  std::uint64_t seed = 0;
  int threads = 0;

  void validate() const;
  nlohmann::json to_json() const;
  static BaselineConfig from_json(const nlohmann::json& j);
};

// Predictions from repeated stochastic forward passes of one method.
struct SampledPredictions {
  std::vector<TensorMap> preds;
  std::string source;
};

// predictive = H(mean p), aleatoric = mean H(p), epistemic = difference
// (non-negative up to fp error, by Jensen).
struct EnsembleDecomposition {
  TensorMap predictive, aleatoric, epistemic;
};
EnsembleDecomposition ensemble_decompose(const SampledPredictions& samples);

// Closed-form KL of diagonal Gaussians, KL(post || prior).
double gaussian_kl(const std::vector<double>& mu_post,
                   const std::vector<double>& logvar_post,
                   const std::vector<double>& mu_prior,
                   const std::vector<double>& logvar_prior);

// rec_loss + KL(post || prior).
double cvae_loss(double rec_loss, const std::vector<double>& mu_post,
                 const std::vector<double>& logvar_post,
                 const std::vector<double>& mu_prior,
                 const std::vector<double>& logvar_prior);

class BaselineModel;

// Loss values of the adversarial pair for a given prediction/label:
// l_gen = l_rec + lambda * CE(g(pred), 1); l_dis = CE(g(pred), 0) + CE(g(y), 1).
struct GanLossValues {
  double l_gen = 0.0, l_dis = 0.0, l_rec = 0.0, l_adv = 0.0;
};
GanLossValues gan_losses(const TensorMap& pred, const TensorMap& y,
                         BaselineModel& model, double lambda);

// Comparison estimators sharing the ELVM's encoder/decoder building blocks:
//   base          deterministic encoder-decoder, plain BCE
//   mc_dropout    base + rate-0.3 dropout after each encoder feature, masks
//                 kept at test time
//   deep_ensemble shared encoder, ensemble_size full decoders
//   gan           latent decoder with standard-normal z + convolutional
//                 discriminator
//   cvae          latent decoder with conditional prior and posterior nets
class BaselineModel {
 public:
  explicit BaselineModel(const BaselineConfig& cfg);

  void init_params(RngStream& rng);
  const BaselineConfig& config() const { return cfg_; }
  ParamStore& gen_store() { return gen_store_; }
  ParamStore& disc_store() { return disc_store_; }

  // One stochastic forward pass (the pass index seeds dropout masks, latent
  // draws, or selects the ensemble decoder).
  TensorMap predict(const TensorMap& x, RngStream& rng, int pass_index);
  SampledPredictions sample_predictions(const TensorMap& x, RngStream& rng,
                                        int passes);

  // Discriminator score map in (0,1).
  TensorMap discriminate(const TensorMap& map);

  // One optimizer step; returns (primary loss, secondary loss) where the
  // secondary is the discriminator (gan) or KL (cvae) term.
  std::pair<double, double> train_step(
      const std::vector<const SyntheticSample*>& batch, int epoch);

  TrainResult train(const std::vector<SyntheticSample>& train_set,
                    const std::vector<SyntheticSample>& val_set,
                    const std::string& out_dir);

  ValMetrics evaluate(const std::vector<SyntheticSample>& samples);

  ~BaselineModel();
  BaselineModel(BaselineModel&&) noexcept;

 private:
  friend struct BaselineOps;
  BaselineConfig cfg_;
  ParamStore gen_store_;
  ParamStore disc_store_;
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct BaselineOps;

}  // namespace duq
