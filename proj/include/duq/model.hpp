#pragma once

#include <atomic>
#include <memory>
#include <string>
#include <vector>

#include "duq/layers.hpp"
#include "duq/param_store.hpp"
#include "duq/rng.hpp"
#include "duq/tensor.hpp"

namespace duq {

// Desk-scale generator topology: a three-block stride-2 encoder with
// per-scale channel reduction, a latent injected at the deepest scale, a
// skip-connected upsampling decoder, M last-layer ensemble heads, and a
// deterministic branch that shares the trunk (configurable).
struct ArchConfig {
  int image_size = 32;
  int image_channels = 1;
  int enc1_channels = 16;
  int enc2_channels = 32;
  int enc3_channels = 64;
  int reduced_channels = 16;
  int prior_channels = 8;
  int latent_dim = 8;    // K
  int ensemble_size = 5; // M
  bool det_shares_trunk = true;
  double leaky_slope = 0.01;

  void validate() const;
};

struct EncoderFeatures {
  TensorMap r1, r2, r3;  // reduced features at 1/2, 1/4, 1/8 scale
  // caches, present only when built with gradients in mind
  Cache c_enc1, c_enc2, c_enc3, c_red1, c_red2, c_red3;
  bool with_cache = false;
};

// Decoder trunk activations for one (x, z); the M ensemble heads are 1x1
// convolutions applied on top, so trunk work is shared across members.
struct TrunkCache {
  Cache zin, d2, d1, d0;
  TensorMap zmap;
};

struct StochDecodeCache {
  TrunkCache trunk;
  Cache head;
  int head_index = 0;
};

struct DetDecodeCache {
  Cache deep, d2, d1, d0, head;
};

// Gradients flowing into the reduced skip features, accumulated across the
// stochastic and deterministic branches before the shared encoder backward.
struct SkipGrads {
  TensorMap g_r1, g_r2, g_r3;
};

struct PriorForward {
  std::vector<double> mu, log_var;
  Cache c_trunk, c_mu, c_logvar;
  TensorMap trunk_out;
  bool with_cache = false;
};

struct PriorSample {
  std::vector<double> z0, mu, log_var, eps;
};

class ElvmState {
 public:
  explicit ElvmState(const ArchConfig& cfg);

  void init_params(RngStream& rng);
  const ArchConfig& config() const { return cfg_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }

  EncoderFeatures encode(const TensorMap& x, bool training, bool with_cache);

  TensorMap decode_trunk(ParamStore& store, const EncoderFeatures& enc,
                         const std::vector<double>& z, bool training,
                         TrunkCache* cache);
  TensorMap apply_head(ParamStore& store, int head, const TensorMap& trunk_out,
                       bool training, Cache* cache);
  // Returns the gradient w.r.t. the trunk output.
  TensorMap backward_head(int head, const Cache& cache, const TensorMap& g_pred,
                          Grads* grads);
  std::vector<double> backward_trunk(const TrunkCache& cache,
                                     const TensorMap& g_trunk_out, Grads* grads,
                                     SkipGrads* skips);

  TensorMap decode_stochastic(ParamStore& store, const EncoderFeatures& enc,
                              const std::vector<double>& z, int head,
                              bool training, StochDecodeCache* cache);
  TensorMap decode_deterministic(ParamStore& store, const EncoderFeatures& enc,
                                 bool training, DetDecodeCache* cache);

  // Full forwards on this state's own store (instrumented).
  TensorMap forward_stochastic(const TensorMap& x, const std::vector<double>& z,
                               int head);
  TensorMap forward_deterministic(const TensorMap& x);

  // Returns d(loss)/dz; accumulates parameter gradients when grads is
  // non-null and skip gradients when skips is non-null.
  std::vector<double> backward_stochastic(const StochDecodeCache& cache,
                                          const TensorMap& grad_pred,
                                          Grads* grads, SkipGrads* skips);
  void backward_deterministic(const DetDecodeCache& cache,
                              const TensorMap& grad_pred, Grads* grads,
                              SkipGrads* skips);
  void backward_encoder(const EncoderFeatures& enc, const SkipGrads& skips,
                        Grads* grads);

  PriorForward prior_forward(const TensorMap& x, bool training, bool with_cache);
  void prior_backward(const PriorForward& fwd, const std::vector<double>& g_mu,
                      const std::vector<double>& g_logvar, Grads* grads);

  std::int64_t stochastic_forward_count() const { return stoch_forwards_; }
  std::int64_t deterministic_forward_count() const { return det_forwards_; }
  void reset_forward_counts();
  void count_stochastic_forward() { ++stoch_forwards_; }
  void count_deterministic_forward() { ++det_forwards_; }

  Shape deep_shape() const { return deep_shape_; }

 private:
  ArchConfig cfg_;
  ParamStore store_;
  Sequential enc1_, enc2_, enc3_;
  Sequential red1_, red2_, red3_;
  Sequential zin_, det_deep_;
  Sequential dec2_, dec1_, dec0_;
  Sequential ddec2_, ddec1_, ddec0_;  // bound only when !det_shares_trunk
  std::vector<Sequential> heads_;
  Sequential det_head_;
  Sequential prior_trunk_, prior_mu_, prior_logvar_;
  Shape deep_shape_{};
  std::atomic<std::int64_t> stoch_forwards_{0};
  std::atomic<std::int64_t> det_forwards_{0};
};

// z0 = mu + exp(log_var / 2) * eps, eps ~ N(0, I) from the stream (or the
// override, for tests).
PriorSample prior_sample(ElvmState& state, const TensorMap& x, RngStream& rng,
                         const std::vector<double>* eps_override = nullptr);

struct LangevinConfig {
  int steps = 5;          // T_L
  double step_size = 0.1; // s
  double sigma_lik = 0.3;
  bool conditional = true;  // conditional Gaussian prior gradient
  bool shared_z = false;    // one z for every ensemble head
  double noise_scale = 1.0; // tests may suppress the injected noise
};

// Supplies the likelihood part of the posterior score; the model adapter
// and the closed-form test generators both implement this.
class LangevinTarget {
 public:
  virtual ~LangevinTarget() = default;
  // (1/sigma^2) J^T (y - f(z))
  virtual std::vector<double> likelihood_score(const std::vector<double>& z) = 0;
  // log p(y | x, z) up to an additive constant
  virtual double log_likelihood(const std::vector<double>& z) = 0;
};

// One unadjusted Langevin step:
//   z' = z + (s^2/2) [ score - (z - mu) / exp(log_var) ] + s * eta.
// Pass zero mu/log_var for a standard-normal prior.
std::vector<double> langevin_step(LangevinTarget& target,
                                  const std::vector<double>& z,
                                  const LangevinConfig& cfg,
                                  const std::vector<double>& prior_mu,
                                  const std::vector<double>& prior_log_var,
                                  RngStream& rng);

struct LatentChain {
  std::vector<std::vector<double>> z;  // steps + 1 entries, z[0] = prior draw
  std::vector<double> log_joint;       // per entry, up to a constant
  double step_size = 0.0;
  int steps = 0;
  std::vector<double> prior_mu, prior_log_var;
};

// Ensemble-mean likelihood target over the model's stochastic branch.
class ElvmLangevinTarget : public LangevinTarget {
 public:
  ElvmLangevinTarget(ElvmState& state, const EncoderFeatures& enc,
                     const TensorMap& y, double sigma_lik);
  std::vector<double> likelihood_score(const std::vector<double>& z) override;
  double log_likelihood(const std::vector<double>& z) override;

 private:
  ElvmState& state_;
  const EncoderFeatures& enc_;
  const TensorMap& y_;
  double sigma_lik_;
};

// z0 from the conditional prior, then cfg.steps Langevin steps.
LatentChain infer_latent(ElvmState& state, const TensorMap& x,
                         const TensorMap& y, const LangevinConfig& cfg,
                         RngStream& rng);

}  // namespace duq
