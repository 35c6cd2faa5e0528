#include "duq/metrics.hpp"

#include <cmath>
#include <fstream>

#include "duq/errors.hpp"
#include "json.hpp"

using nlohmann::json;

namespace duq {

namespace {

void check_pair(const TensorMap& pred, const TensorMap& gt, const char* who) {
  if (!pred.same_shape(gt)) {
    throw usage_error(std::string(who) + ": shape mismatch " + pred.shape_str() +
                      " vs " + gt.shape_str());
  }
}

void check_unit_range(const TensorMap& m, const char* who) {
  for (double v : m.data()) {
    if (v < -1e-9 || v > 1.0 + 1e-9) {
      throw usage_error(std::string(who) + ": value " + std::to_string(v) +
                        " outside [0,1]");
    }
  }
}

}  // namespace

double mae(const TensorMap& pred, const TensorMap& gt) {
  check_pair(pred, gt, "mae");
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    acc += std::fabs(pred[i] - gt[i]);
  }
  return acc / static_cast<double>(pred.size());
}

double f_measure(const TensorMap& pred, const TensorMap& gt, double beta_sq) {
  check_pair(pred, gt, "f_measure");
  check_unit_range(pred, "f_measure");
  bool any_positive = false;
  for (double v : gt.data()) {
    if (v > 0.5) {
      any_positive = true;
      break;
    }
  }
  if (!any_positive) {
    throw usage_error("f_measure: all-zero ground truth");
  }
  double total = 0.0;
  for (int j = 0; j < 256; ++j) {
    const double t = static_cast<double>(j) / 255.0;
    std::size_t tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const bool p = binarize(pred[i], t);
      const bool g = gt[i] > 0.5;
      if (p && g) ++tp;
      else if (p && !g) ++fp;
      else if (!p && g) ++fn;
    }
    if (tp + fp == 0) continue;  // precision undefined, contributes 0
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
    const double denom = beta_sq * precision + recall;
    if (denom == 0.0) continue;
    total += (1.0 + beta_sq) * precision * recall / denom;
  }
  return total / 256.0;
}

int ece_bin_index(double s) {
  if (s == 0.0) return 0;
  if (s == 1.0) return EceBins::kBins - 1;
  const int b = 1 + static_cast<int>(s * 10.0);
  return b > 10 ? 10 : b;
}

EceBins ece_bins(const TensorMap& pred, const TensorMap& gt) {
  check_pair(pred, gt, "ece_dense");
  check_unit_range(pred, "ece_dense");
  EceBins bins;
  // Per-bin pixel lists in row-major order keep the accumulation order
  // identical to a direct per-bin scan.
  std::array<std::vector<std::size_t>, EceBins::kBins> members;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    members[ece_bin_index(pred[i])].push_back(i);
  }
  for (int m = 0; m < EceBins::kBins; ++m) {
    bins.counts[m] = members[m].size();
    if (members[m].empty()) continue;
    double acc_sum = 0.0;
    for (int j = 0; j < EceBins::kThresholds; ++j) {
      const double t = static_cast<double>(j) / 256.0;
      std::size_t correct = 0;
      for (std::size_t i : members[m]) {
        if (binarize(pred[i], t) == (gt[i] > 0.5)) ++correct;
      }
      bins.acc[m][j] =
          static_cast<double>(correct) / static_cast<double>(members[m].size());
      acc_sum += bins.acc[m][j];
    }
    bins.macc[m] = acc_sum / EceBins::kThresholds;
    double conf_sum = 0.0;
    for (std::size_t i : members[m]) {
      conf_sum += std::max(pred[i], 1.0 - pred[i]);
    }
    bins.conf[m] = conf_sum / static_cast<double>(members[m].size());
  }
  const double total = static_cast<double>(pred.size());
  double ece = 0.0;
  for (int m = 0; m < EceBins::kBins; ++m) {
    if (bins.counts[m] == 0) continue;
    ece += (static_cast<double>(bins.counts[m]) / total) *
           std::fabs(bins.macc[m] - bins.conf[m]);
  }
  bins.ece = ece;
  return bins;
}

double ece_dense(const TensorMap& pred, const TensorMap& gt) {
  return ece_bins(pred, gt).ece;
}

namespace {

// Reflection padding index: 0,1,...,n-1,n-2,n-3,...
int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

PavpuTable pavpu(const TensorMap& pred, const TensorMap& gt,
                 const TensorMap& uncertainty, int patch_size) {
  check_pair(pred, gt, "pavpu");
  check_pair(pred, uncertainty, "pavpu");
  check_unit_range(uncertainty, "pavpu");
  if (patch_size < 1) throw usage_error("pavpu: patch_size must be >= 1");

  PavpuTable table;
  table.patch_size = patch_size;
  const int h = pred.height(), w = pred.width();
  const int ph = (h + patch_size - 1) / patch_size;
  const int pw = (w + patch_size - 1) / patch_size;
  table.padded = (h % patch_size != 0) || (w % patch_size != 0);
  table.patch_count = ph * pw;

  std::vector<double> patch_acc(static_cast<std::size_t>(ph) * pw);
  std::vector<double> patch_unc(static_cast<std::size_t>(ph) * pw);
  for (int py = 0; py < ph; ++py) {
    for (int px = 0; px < pw; ++px) {
      std::size_t correct = 0;
      double unc = 0.0;
      for (int dy = 0; dy < patch_size; ++dy) {
        const int y = reflect(py * patch_size + dy, h);
        for (int dx = 0; dx < patch_size; ++dx) {
          const int x = reflect(px * patch_size + dx, w);
          if (binarize(pred.at(0, y, x), 0.5) == (gt.at(0, y, x) > 0.5)) {
            ++correct;
          }
          unc += uncertainty.at(0, y, x);
        }
      }
      const double n = static_cast<double>(patch_size) * patch_size;
      patch_acc[static_cast<std::size_t>(py) * pw + px] = correct / n;
      patch_unc[static_cast<std::size_t>(py) * pw + px] = unc / n;
    }
  }

  double mean = 0.0;
  for (int k = 1; k <= PavpuTable::kBins; ++k) {
    const double t = static_cast<double>(k) / 10.0;
    std::size_t ac = 0, au = 0, ic = 0, iu = 0;
    for (std::size_t p = 0; p < patch_acc.size(); ++p) {
      const bool accurate = patch_acc[p] >= t;
      const bool uncertain = patch_unc[p] >= t;
      if (accurate && !uncertain) ++ac;
      else if (accurate && uncertain) ++au;
      else if (!accurate && !uncertain) ++ic;
      else ++iu;
    }
    table.n_ac[k - 1] = ac;
    table.n_au[k - 1] = au;
    table.n_ic[k - 1] = ic;
    table.n_iu[k - 1] = iu;
    table.pavpu[k - 1] =
        static_cast<double>(ac + iu) / static_cast<double>(patch_acc.size());
    mean += table.pavpu[k - 1];
  }
  table.mean_pavpu = mean / PavpuTable::kBins;
  return table;
}

CalibrationReport aggregate(const std::string& dataset_id,
                            const std::string& method_id,
                            std::vector<ImageMetrics> rows) {
  if (rows.empty()) throw usage_error("aggregate: empty report set");
  CalibrationReport report;
  report.dataset_id = dataset_id;
  report.method_id = method_id;
  double mae_sum = 0.0, f_sum = 0.0, ece_sum = 0.0, pavpu_sum = 0.0;
  int f_count = 0;
  for (const auto& r : rows) {
    mae_sum += r.mae;
    ece_sum += r.ece_d;
    pavpu_sum += r.pavpu;
    if (!r.f_beta_excluded) {
      f_sum += r.f_beta;
      ++f_count;
    } else {
      ++report.f_beta_excluded;
    }
  }
  const double n = static_cast<double>(rows.size());
  report.mae = mae_sum / n;
  report.f_beta = f_count > 0 ? f_sum / f_count : 0.0;
  report.ece_d = ece_sum / n;
  report.pavpu = pavpu_sum / n;
  report.per_image = std::move(rows);
  return report;
}

void write_report_json(const std::string& path, const CalibrationReport& report) {
  json j;
  j["dataset_id"] = report.dataset_id;
  j["method_id"] = report.method_id;
  j["image_count"] = report.per_image.size();
  j["f_beta_excluded"] = report.f_beta_excluded;
  j["aggregate"] = {{"mae", report.mae},
                    {"f_beta", report.f_beta},
                    {"ece_d", report.ece_d},
                    {"pavpu", report.pavpu}};
  std::ofstream out(path);
  if (!out) throw io_error("write_report_json: cannot open " + path);
  out << j.dump(2) << "\n";
}

void write_report_csv(const std::string& path, const CalibrationReport& report) {
  std::ofstream out(path);
  if (!out) throw io_error("write_report_csv: cannot open " + path);
  out << "file,mae,f_beta,ece_d,pavpu\n";
  out.precision(17);
  for (const auto& r : report.per_image) {
    out << r.file << "," << r.mae << ","
        << (r.f_beta_excluded ? std::string("excluded") : std::to_string(r.f_beta))
        << "," << r.ece_d << "," << r.pavpu << "\n";
  }
}

CalibrationReport read_report_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("read_report_json: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw format_error("read_report_json: " + path + ": " + e.what());
  }
  CalibrationReport r;
  r.dataset_id = j.value("dataset_id", "");
  r.method_id = j.value("method_id", "");
  r.f_beta_excluded = j.value("f_beta_excluded", 0);
  const auto& agg = j.at("aggregate");
  r.mae = agg.at("mae").get<double>();
  r.f_beta = agg.at("f_beta").get<double>();
  r.ece_d = agg.at("ece_d").get<double>();
  r.pavpu = agg.at("pavpu").get<double>();
  return r;
}

}  // namespace duq
