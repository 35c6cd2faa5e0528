#pragma once

// Test-only reference implementations, kept independent of the library code
// paths they check.

#include <cmath>
#include <vector>

#include "duq/tensor.hpp"

namespace duq::testing {

// Plain correlation-style conv reference: copies the input into an
// explicitly zero-padded buffer, then runs the textbook quadruple loop.
inline TensorMap ref_conv2d(const TensorMap& x, const std::vector<double>& w,
                            const std::vector<double>& b, int out_channels,
                            int kernel, int stride, int padding) {
  const int in_channels = x.channels();
  const int ph = x.height() + 2 * padding;
  const int pw = x.width() + 2 * padding;
  std::vector<double> padded(static_cast<std::size_t>(in_channels) * ph * pw, 0.0);
  for (int c = 0; c < in_channels; ++c) {
    for (int y = 0; y < x.height(); ++y) {
      for (int xx = 0; xx < x.width(); ++xx) {
        padded[(static_cast<std::size_t>(c) * ph + y + padding) * pw + xx + padding] =
            x.at(c, y, xx);
      }
    }
  }
  const int oh = (ph - kernel) / stride + 1;
  const int ow = (pw - kernel) / stride + 1;
  TensorMap out(out_channels, oh, ow);
  for (int oc = 0; oc < out_channels; ++oc) {
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = b[oc];
        for (int ic = 0; ic < in_channels; ++ic) {
          for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
              const double xv =
                  padded[(static_cast<std::size_t>(ic) * ph + oy * stride + ky) * pw +
                         ox * stride + kx];
              const double wv =
                  w[((static_cast<std::size_t>(oc) * in_channels + ic) * kernel + ky) *
                        kernel +
                    kx];
              acc += xv * wv;
            }
          }
        }
        out.at(oc, oy, ox) = acc;
      }
    }
  }
  return out;
}

// Base-2 binary entropy, written directly from the definition.
inline double ref_binary_entropy(double p) {
  double acc = 0.0;
  if (p > 0.0) acc -= p * std::log2(p);
  if (p < 1.0) acc -= (1.0 - p) * std::log2(1.0 - p);
  return acc;
}

// Mean F-measure over 256 thresholds t = j/255, straight from the
// per-threshold precision/recall definition.
inline double ref_f_measure(const TensorMap& s, const TensorMap& y,
                            double beta_sq = 0.3) {
  double total = 0.0;
  for (int j = 0; j < 256; ++j) {
    const double t = j / 255.0;
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const bool p = s[i] > t;
      const bool g = y[i] > 0.5;
      if (p && g) tp += 1;
      if (p && !g) fp += 1;
      if (!p && g) fn += 1;
    }
    if (tp + fp == 0) continue;
    const double prec = tp / (tp + fp);
    const double rec = tp / (tp + fn);
    if (beta_sq * prec + rec == 0) continue;
    total += (1 + beta_sq) * prec * rec / (beta_sq * prec + rec);
  }
  return total / 256.0;
}

// Dense ECE, 12 bins (bin 0: s == 0, bin 11: s == 1), 256 thresholds
// t = j/256, confidence max(s, 1-s). Scans every pixel per bin per
// threshold; deliberately the dumbest possible organization.
inline double ref_ece_dense(const TensorMap& s, const TensorMap& y) {
  auto bin_of = [](double v) {
    if (v == 0.0) return 0;
    if (v == 1.0) return 11;
    const int b = 1 + static_cast<int>(v * 10.0);
    return b > 10 ? 10 : b;
  };
  double ece = 0.0;
  for (int m = 0; m < 12; ++m) {
    std::size_t count = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (bin_of(s[i]) == m) ++count;
    }
    if (count == 0) continue;
    double acc_sum = 0.0;
    for (int j = 0; j < 256; ++j) {
      const double t = j / 256.0;
      std::size_t correct = 0;
      for (std::size_t i = 0; i < s.size(); ++i) {
        if (bin_of(s[i]) != m) continue;
        if ((s[i] > t) == (y[i] > 0.5)) ++correct;
      }
      acc_sum += static_cast<double>(correct) / static_cast<double>(count);
    }
    const double macc = acc_sum / 256.0;
    double conf_sum = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (bin_of(s[i]) != m) continue;
      conf_sum += std::max(s[i], 1.0 - s[i]);
    }
    const double conf = conf_sum / static_cast<double>(count);
    ece += (static_cast<double>(count) / static_cast<double>(s.size())) *
           std::fabs(macc - conf);
  }
  return ece;
}

inline int ref_reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

struct RefPavpu {
  double bins[10];
  double mean;
  std::size_t n_ac[10], n_au[10], n_ic[10], n_iu[10];
};

// Exhaustive patch enumeration with the same >=-threshold pairing rule on
// both the accuracy and the uncertainty side.
inline RefPavpu ref_pavpu(const TensorMap& s, const TensorMap& y,
                          const TensorMap& u, int g) {
  const int h = s.height(), w = s.width();
  const int ph = (h + g - 1) / g, pw = (w + g - 1) / g;
  RefPavpu out{};
  double mean = 0.0;
  for (int k = 1; k <= 10; ++k) {
    const double t = k / 10.0;
    std::size_t ac = 0, au = 0, ic = 0, iu = 0;
    for (int py = 0; py < ph; ++py) {
      for (int px = 0; px < pw; ++px) {
        double correct = 0, unc = 0;
        for (int dy = 0; dy < g; ++dy) {
          for (int dx = 0; dx < g; ++dx) {
            const int yy = ref_reflect(py * g + dy, h);
            const int xx = ref_reflect(px * g + dx, w);
            if ((s.at(0, yy, xx) > 0.5) == (y.at(0, yy, xx) > 0.5)) correct += 1;
            unc += u.at(0, yy, xx);
          }
        }
        const double a = correct / (g * g);
        const double uu = unc / (g * g);
        const bool accurate = a >= t;
        const bool uncertain = uu >= t;
        if (accurate && !uncertain) ++ac;
        else if (accurate && uncertain) ++au;
        else if (!accurate && !uncertain) ++ic;
        else ++iu;
      }
    }
    out.n_ac[k - 1] = ac;
    out.n_au[k - 1] = au;
    out.n_ic[k - 1] = ic;
    out.n_iu[k - 1] = iu;
    out.bins[k - 1] = static_cast<double>(ac + iu) /
                      static_cast<double>(ph * pw);
    mean += out.bins[k - 1];
  }
  out.mean = mean / 10.0;
  return out;
}

}  // namespace duq::testing
