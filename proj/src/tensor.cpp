#include "duq/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

namespace duq {

TensorMap::TensorMap(int channels, int height, int width)
    : c_(channels), h_(height), w_(width) {
  if (channels <= 0 || height <= 0 || width <= 0) {
    throw usage_error("TensorMap: non-positive shape " + shape_str());
  }
  data_.assign(static_cast<std::size_t>(c_) * h_ * w_, 0.0);
}

TensorMap::TensorMap(int channels, int height, int width,
                     std::vector<double> data)
    : c_(channels), h_(height), w_(width), data_(std::move(data)) {
  if (channels <= 0 || height <= 0 || width <= 0) {
    throw usage_error("TensorMap: non-positive shape " + shape_str());
  }
  if (data_.size() != static_cast<std::size_t>(c_) * h_ * w_) {
    throw usage_error("TensorMap: data length " + std::to_string(data_.size()) +
                      " does not match shape " + shape_str());
  }
  validate("TensorMap construction");
}

std::string TensorMap::shape_str() const {
  std::ostringstream os;
  os << c_ << "x" << h_ << "x" << w_;
  return os.str();
}

void TensorMap::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

double TensorMap::min() const {
  return *std::min_element(data_.begin(), data_.end());
}

double TensorMap::max() const {
  return *std::max_element(data_.begin(), data_.end());
}

double TensorMap::mean() const {
  if (data_.empty()) return 0.0;
  return std::accumulate(data_.begin(), data_.end(), 0.0) /
         static_cast<double>(data_.size());
}

bool TensorMap::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void TensorMap::validate(const std::string& context) const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw numeric_error(context + ": non-finite value at flat index " +
                          std::to_string(i) + " of " + shape_str());
    }
  }
}

TensorMap concat_channels(const TensorMap& a, const TensorMap& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw usage_error("concat_channels: spatial mismatch " + a.shape_str() +
                      " vs " + b.shape_str());
  }
  TensorMap out(a.channels() + b.channels(), a.height(), a.width());
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(),
            out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

void split_channels(const TensorMap& joined, int front_channels,
                    TensorMap* front, TensorMap* back) {
  if (front_channels <= 0 || front_channels >= joined.channels()) {
    throw usage_error("split_channels: bad split " +
                      std::to_string(front_channels) + " of " +
                      joined.shape_str());
  }
  const int back_channels = joined.channels() - front_channels;
  *front = TensorMap(front_channels, joined.height(), joined.width());
  *back = TensorMap(back_channels, joined.height(), joined.width());
  const std::size_t front_n = front->size();
  std::copy(joined.data().begin(),
            joined.data().begin() + static_cast<std::ptrdiff_t>(front_n),
            front->data().begin());
  std::copy(joined.data().begin() + static_cast<std::ptrdiff_t>(front_n),
            joined.data().end(), back->data().begin());
}

TensorMap nearest_upsample(const TensorMap& x, int factor) {
  if (factor < 1) throw usage_error("nearest_upsample: factor < 1");
  TensorMap out(x.channels(), x.height() * factor, x.width() * factor);
  for (int c = 0; c < x.channels(); ++c) {
    for (int y = 0; y < out.height(); ++y) {
      const int sy = y / factor;
      for (int xx = 0; xx < out.width(); ++xx) {
        out.at(c, y, xx) = x.at(c, sy, xx / factor);
      }
    }
  }
  return out;
}

TensorMap nearest_upsample_backward(const TensorMap& grad_out, int factor) {
  if (factor < 1) throw usage_error("nearest_upsample_backward: factor < 1");
  if (grad_out.height() % factor != 0 || grad_out.width() % factor != 0) {
    throw usage_error("nearest_upsample_backward: shape not divisible");
  }
  TensorMap gin(grad_out.channels(), grad_out.height() / factor,
                grad_out.width() / factor);
  for (int c = 0; c < grad_out.channels(); ++c) {
    for (int y = 0; y < grad_out.height(); ++y) {
      for (int xx = 0; xx < grad_out.width(); ++xx) {
        gin.at(c, y / factor, xx / factor) += grad_out.at(c, y, xx);
      }
    }
  }
  return gin;
}

namespace {

struct LerpCoord {
  int lo, hi;
  double w_hi;  // weight of hi; lo gets 1 - w_hi
};

LerpCoord lerp_coord(int out_i, int out_n, int in_n) {
  const double scale = static_cast<double>(in_n) / out_n;
  double pos = (out_i + 0.5) * scale - 0.5;
  if (pos < 0.0) pos = 0.0;
  if (pos > in_n - 1.0) pos = in_n - 1.0;
  const int lo = static_cast<int>(pos);
  const int hi = std::min(lo + 1, in_n - 1);
  return {lo, hi, pos - lo};
}

}  // namespace

TensorMap bilinear_resize(const TensorMap& x, int out_h, int out_w) {
  if (out_h < 1 || out_w < 1) throw usage_error("bilinear_resize: bad size");
  TensorMap out(x.channels(), out_h, out_w);
  for (int c = 0; c < x.channels(); ++c) {
    for (int y = 0; y < out_h; ++y) {
      const LerpCoord cy = lerp_coord(y, out_h, x.height());
      for (int xx = 0; xx < out_w; ++xx) {
        const LerpCoord cx = lerp_coord(xx, out_w, x.width());
        const double top = (1.0 - cx.w_hi) * x.at(c, cy.lo, cx.lo) +
                           cx.w_hi * x.at(c, cy.lo, cx.hi);
        const double bot = (1.0 - cx.w_hi) * x.at(c, cy.hi, cx.lo) +
                           cx.w_hi * x.at(c, cy.hi, cx.hi);
        out.at(c, y, xx) = (1.0 - cy.w_hi) * top + cy.w_hi * bot;
      }
    }
  }
  return out;
}

TensorMap bilinear_resize_backward(const TensorMap& grad_out, int in_h,
                                   int in_w) {
  TensorMap gin(grad_out.channels(), in_h, in_w);
  for (int c = 0; c < grad_out.channels(); ++c) {
    for (int y = 0; y < grad_out.height(); ++y) {
      const LerpCoord cy = lerp_coord(y, grad_out.height(), in_h);
      for (int xx = 0; xx < grad_out.width(); ++xx) {
        const LerpCoord cx = lerp_coord(xx, grad_out.width(), in_w);
        const double g = grad_out.at(c, y, xx);
        gin.at(c, cy.lo, cx.lo) += (1.0 - cy.w_hi) * (1.0 - cx.w_hi) * g;
        gin.at(c, cy.lo, cx.hi) += (1.0 - cy.w_hi) * cx.w_hi * g;
        gin.at(c, cy.hi, cx.lo) += cy.w_hi * (1.0 - cx.w_hi) * g;
        gin.at(c, cy.hi, cx.hi) += cy.w_hi * cx.w_hi * g;
      }
    }
  }
  return gin;
}

}  // namespace duq
