#pragma once

#include <atomic>
#include <span>
#include <vector>

#include "duq/layers.hpp"
#include "duq/param_store.hpp"
#include "duq/tensor.hpp"

namespace duq {

// Per-pixel base-2 entropy of a probability map; range [0,1], 0*log0 := 0.
// Values outside [0,1] by more than 1e-9 are a domain error.
TensorMap binary_entropy(const TensorMap& p);

// (v - min) / (max - min); a constant map maps to all zeros. The recorded
// stats let callers chain gradients (min/max are treated as constants).
struct MinMax {
  double min = 0.0;
  double max = 0.0;
  double range() const { return max - min; }
};
TensorMap minmax_norm(const TensorMap& m, MinMax* stats = nullptr);

// Clamped natural-log binary cross-entropy helpers (log arguments clamped
// at 1e-7).
double bce_value(double p, double t);
double bce_dpred(double p, double t);

enum class LossMode { regression, classification };
LossMode loss_mode_from_name(const std::string& name);
std::string loss_mode_name(LossMode mode);

// Attenuated task loss over per-pixel BCE:
//   regression:      mean( L * exp(-s) / 2 + s / 2 )
//   classification:  mean( L * exp(-sigma2) + sigma2 ), sigma2 = exp(s)
// d_s is the gradient for callers that learn s; the main trainer treats s
// as a constant and ignores it.
struct AttenuatedLoss {
  double value = 0.0;
  TensorMap d_pred;
  TensorMap d_s;
};
AttenuatedLoss attenuated_loss(const TensorMap& pred, const TensorMap& target,
                               const TensorMap& s, LossMode mode);

// Per-pixel assembly of the ensemble member with least BCE against y;
// ties go to the lowest head index.
TensorMap optimal_prediction(std::span<const TensorMap> preds,
                             const TensorMap& y);

// err = (mean_m preds_m - y)^2, per pixel.
TensorMap mean_error(std::span<const TensorMap> preds, const TensorMap& y);

// Bi-directional cross-entropy: value CE(u;t) + CE(t;u), with every target
// slot gradient-free, so the gradient on u comes from the CE(u;t) term and
// the u-optimum sits exactly at t.
struct BiceLoss {
  double value = 0.0;
  TensorMap d_u;
};
BiceLoss bice_loss(const TensorMap& u, const TensorMap& t);

// Plain mean BCE with gradient on the prediction side.
struct CeLoss {
  double value = 0.0;
  TensorMap d_pred;
};
CeLoss ce_loss(const TensorMap& pred, const TensorMap& target);

// The two uncertainty heads. alpha: encoder-decoder over the image giving a
// full-resolution log-variance map. beta: five 3x3 convs at strides
// (2,1,2,1,2) with batch norm + leaky relu after the first four, over the
// image concatenated with a stochastic prediction, giving a log-variance
// map at 1/8 resolution.
struct HeadsConfig {
  int image_size = 32;
  int image_channels = 1;
  int alpha_channels = 8;
  int beta_channels = 64;
  double leaky_slope = 0.01;
};

class UncertaintyHeads {
 public:
  explicit UncertaintyHeads(const HeadsConfig& cfg);

  void init_params(RngStream& rng);

  const HeadsConfig& config() const { return cfg_; }
  ParamStore& alpha_store() { return alpha_store_; }
  ParamStore& beta_store() { return beta_store_; }
  const ParamStore& alpha_store() const { return alpha_store_; }
  const ParamStore& beta_store() const { return beta_store_; }

  TensorMap aleatoric_log_var(const TensorMap& x, ForwardMode mode,
                              Cache* cache = nullptr);
  TensorMap predictive_log_var(const TensorMap& x, const TensorMap& pred,
                               ForwardMode mode, Cache* cache = nullptr);

  void aleatoric_backward(const Cache& cache, const TensorMap& grad_out,
                          Grads* alpha_grads);
  void predictive_backward(const Cache& cache, const TensorMap& grad_out,
                           Grads* beta_grads);

  // Forward-pass instrumentation (single-pass contract checks).
  std::int64_t alpha_forward_count() const { return alpha_forwards_; }
  std::int64_t beta_forward_count() const { return beta_forwards_; }
  void reset_forward_counts();

  // One training-mode pass that refreshes the batch-norm running averages;
  // called once per optimizer step, outside the parallel section.
  void update_predictive_running_stats(const TensorMap& x, const TensorMap& pred);

 private:
  HeadsConfig cfg_;
  ParamStore alpha_store_;
  ParamStore beta_store_;
  Sequential alpha_net_;
  Sequential beta_net_;
  std::atomic<std::int64_t> alpha_forwards_{0};
  std::atomic<std::int64_t> beta_forwards_{0};
};

// L_au: bice(minmax(exp(s_a)), minmax(H[f*])). Training mode; gradients go
// to the alpha store only.
double aleatoric_consistency_loss(UncertaintyHeads& heads, const TensorMap& x,
                                  const TensorMap& f_star, Grads* alpha_grads);

// One training-mode forward of the predictive head with everything the
// losses need: raw log variance, its upsampling to input resolution, and
// the normalized uncertainty map. The trainer reuses s_up as the (gradient
// free) sigma of the task losses, so the head runs once per sample.
struct PredictiveHeadPass {
  TensorMap s_p;    // head resolution
  TensorMap s_up;   // input resolution
  TensorMap u_raw;  // exp(s_up)
  TensorMap u;      // minmax-normalized
  MinMax stats;
  Cache cache;
};
PredictiveHeadPass predictive_head_pass(UncertaintyHeads& heads,
                                        const TensorMap& x,
                                        const TensorMap& stochastic_pred,
                                        bool training);

// L_pu: bice(U_p, minmax(H[mean pred])) + CE(U_p, minmax(err)), with
// U_p = minmax(exp(bilinear-upsampled s_p)). Gradients go to the beta
// store only.
double predictive_consistency_from_pass(UncertaintyHeads& heads,
                                        const PredictiveHeadPass& pass,
                                        std::span<const TensorMap> preds,
                                        const TensorMap& y, Grads* beta_grads);
double predictive_consistency_loss(UncertaintyHeads& heads, const TensorMap& x,
                                   const TensorMap& stochastic_pred,
                                   std::span<const TensorMap> preds,
                                   const TensorMap& y, Grads* beta_grads);

struct UncertaintyBundle {
  TensorMap aleatoric;          // [0,1]
  TensorMap predictive;         // [0,1]
  TensorMap epistemic_raw;      // predictive - aleatoric, in [-1,1]
  TensorMap epistemic_clamped;  // max(0, raw)
};

// Single-pass decomposition: two head forwards over an already-computed
// stochastic prediction.
UncertaintyBundle decompose(UncertaintyHeads& heads, const TensorMap& x,
                            const TensorMap& stochastic_pred);

}  // namespace duq
