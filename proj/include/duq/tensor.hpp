#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "duq/errors.hpp"

namespace duq {

// Dense C x H x W float field, channel-major then row-major.
// All values are finite; NaN/Inf is rejected at construction and by
// validate(). Internal arithmetic is double precision throughout.
class TensorMap {
 public:
  TensorMap() = default;

  // Zero-filled tensor.
  TensorMap(int channels, int height, int width);

  // Takes ownership of data; length must equal channels*height*width and
  // every value must be finite.
  TensorMap(int channels, int height, int width, std::vector<double> data);

  int channels() const { return c_; }
  int height() const { return h_; }
  int width() const { return w_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& at(int c, int y, int x) {
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }
  double at(int c, int y, int x) const {
    return data_[(static_cast<std::size_t>(c) * h_ + y) * w_ + x];
  }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const TensorMap& other) const {
    return c_ == other.c_ && h_ == other.h_ && w_ == other.w_;
  }
  std::string shape_str() const;

  void fill(double v);
  double min() const;
  double max() const;
  double mean() const;

  // Throws numeric_error if any entry is NaN/Inf.
  void validate(const std::string& context) const;
  bool all_finite() const;

 private:
  int c_ = 0, h_ = 0, w_ = 0;
  std::vector<double> data_;
};

// Stacks b's channels after a's. Spatial shapes must match.
TensorMap concat_channels(const TensorMap& a, const TensorMap& b);

// Splits a gradient (or any map) produced by concat_channels back into the
// two channel groups.
void split_channels(const TensorMap& joined, int front_channels,
                    TensorMap* front, TensorMap* back);

// Nearest-neighbour upsampling by an integer factor, and its adjoint.
TensorMap nearest_upsample(const TensorMap& x, int factor);
TensorMap nearest_upsample_backward(const TensorMap& grad_out, int factor);

// Bilinear resize to (out_h, out_w) with half-pixel centres, and its adjoint.
TensorMap bilinear_resize(const TensorMap& x, int out_h, int out_w);
TensorMap bilinear_resize_backward(const TensorMap& grad_out, int in_h,
                                   int in_w);

}  // namespace duq
