#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "duq/model.hpp"
#include "duq/synth.hpp"
#include "duq/uncertainty.hpp"
#include "json.hpp"

namespace duq {

struct TrainConfig {
  ArchConfig arch;
  HeadsConfig heads;
  int epochs = 50;
  int batch_size = 8;
  double base_lr = 1e-3;
  double lr_decay_point = 0.8;   // fraction of max epochs
  double lr_decay_factor = 0.9;
  LangevinConfig langevin;
  LossMode loss_mode = LossMode::regression;
  double prior_nll_weight = 1.0;
  bool use_consistency = true;
  // Plain attenuated dual-head setup: deterministic branch plus the
  // aleatoric head as a learnable log-variance, trained only through the
  // attenuated loss (no latents, no ensemble, no consistency terms). Its
  // variance collapse is what the consistency losses exist to prevent.
  bool plain_dual_head = false;
  std::uint64_t seed = 0;
  int threads = 0;  // 0: DUQ_THREADS or hardware

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  static TrainConfig from_json_file(const std::string& path);
};

double lr_schedule(const TrainConfig& cfg, int epoch);

struct StepLosses {
  double l_d = 0.0, l_s = 0.0, l_au = 0.0, l_pu = 0.0, l_prior = 0.0;
};

struct EpochRow {
  int epoch = 0;
  StepLosses losses;
  double val_mae = 0.0, val_fbeta = 0.0, val_ece = 0.0;
  double wall_time_s = 0.0;
};

struct TrainLog {
  std::vector<EpochRow> rows;
  void write_csv(const std::string& path) const;
};

struct ValMetrics {
  double mae = 0.0, f_beta = 0.0, ece = 0.0;
};

struct TrainResult {
  TrainLog log;
  ValMetrics final_val;  // computed after float32 quantization
  std::string checkpoint_path;
};

class Trainer {
 public:
  explicit Trainer(const TrainConfig& cfg);

  ElvmState& state() { return *state_; }
  UncertaintyHeads& heads() { return *heads_; }
  const TrainConfig& config() const { return cfg_; }

  // One optimizer step over a batch: Langevin inference with the pre-update
  // parameters, then Adam updates of theta (task + prior losses), alpha
  // (aleatoric consistency) and beta (predictive consistency).
  StepLosses train_step(const std::vector<const SyntheticSample*>& batch,
                        int epoch);

  ValMetrics evaluate(const std::vector<SyntheticSample>& samples);

  // Full run: writes checkpoint (DUQC) and TrainLog CSV under out_dir when
  // non-empty.
  TrainResult train(const std::vector<SyntheticSample>& train_set,
                    const std::vector<SyntheticSample>& val_set,
                    const std::string& out_dir);

  // Latents assigned to the ensemble heads: the last M chain states spaced
  // one step apart (clamped at the chain start), or M copies of the final
  // state when shared_z is set.
  static std::vector<std::vector<double>> head_latents(const LatentChain& chain,
                                                       int ensemble_size,
                                                       bool shared_z);

 private:
  TrainConfig cfg_;
  std::unique_ptr<ElvmState> state_;
  std::unique_ptr<UncertaintyHeads> heads_;
};

// Checkpoint helpers shared with eval: header layout for the elvm method.
nlohmann::json elvm_checkpoint_header(const TrainConfig& cfg);

}  // namespace duq
