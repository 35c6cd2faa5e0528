#pragma once

#include <array>
#include <string>
#include <vector>

#include "duq/tensor.hpp"

namespace duq {

// Binarization used across the metric suite: predicted positive iff
// value > threshold. With thresholds strictly inside (0,1) this maps exact
// 0/1 predictions to themselves at every threshold.
inline bool binarize(double v, double t) { return v > t; }

double mae(const TensorMap& pred, const TensorMap& gt);

// Mean F-measure over 256 thresholds t = j/255. Thresholds whose precision
// or F denominator is undefined contribute zero. Throws usage_error on an
// all-zero ground truth (callers exclude such images with a warning).
double f_measure(const TensorMap& pred, const TensorMap& gt,
                 double beta_sq = 0.3);

// Dense expected calibration error, 12 bins: bin 0 holds exactly s = 0,
// bin 11 exactly s = 1, bins 1..10 cover (0,1) uniformly. Accuracy per bin
// is a 256-vector over thresholds t = j/256; confidence is the mean of
// max(s, 1-s).
struct EceBins {
  static constexpr int kBins = 12;
  static constexpr int kThresholds = 256;
  std::array<std::size_t, kBins> counts{};
  std::array<std::array<double, kThresholds>, kBins> acc{};
  std::array<double, kBins> macc{};
  std::array<double, kBins> conf{};
  double ece = 0.0;
};

int ece_bin_index(double s);
EceBins ece_bins(const TensorMap& pred, const TensorMap& gt);
double ece_dense(const TensorMap& pred, const TensorMap& gt);

// Patch accuracy vs patch uncertainty on a fixed g x g grid with 10
// threshold bins t_k = k/10; the same t_k is applied to both the accuracy
// and the uncertainty side. Non-divisible maps are reflection-padded.
struct PavpuTable {
  static constexpr int kBins = 10;
  int patch_size = 4;
  int patch_count = 0;
  bool padded = false;
  std::array<std::size_t, kBins> n_ac{}, n_au{}, n_ic{}, n_iu{};
  std::array<double, kBins> pavpu{};
  double mean_pavpu = 0.0;
};

PavpuTable pavpu(const TensorMap& pred, const TensorMap& gt,
                 const TensorMap& uncertainty, int patch_size = 4);

struct ImageMetrics {
  std::string file;
  double mae = 0.0;
  double f_beta = 0.0;
  double ece_d = 0.0;
  double pavpu = 0.0;
  bool f_beta_excluded = false;  // all-zero ground truth
};

struct CalibrationReport {
  std::string dataset_id;
  std::string method_id;
  std::vector<ImageMetrics> per_image;
  double mae = 0.0;
  double f_beta = 0.0;
  double ece_d = 0.0;
  double pavpu = 0.0;
  int f_beta_excluded = 0;
};

// Arithmetic means over images; F-measure skips excluded images.
CalibrationReport aggregate(const std::string& dataset_id,
                            const std::string& method_id,
                            std::vector<ImageMetrics> rows);

void write_report_json(const std::string& path, const CalibrationReport& report);
void write_report_csv(const std::string& path, const CalibrationReport& report);
CalibrationReport read_report_json(const std::string& path);

}  // namespace duq
