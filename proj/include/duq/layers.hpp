#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "duq/param_store.hpp"
#include "duq/rng.hpp"
#include "duq/tensor.hpp"

namespace duq {

enum class LayerKind {
  dense,
  conv2d,
  relu,
  leaky_relu,
  sigmoid,
  batch_norm,
  nearest_upsample,
  concat_channels,
};

std::string layer_kind_name(LayerKind kind);

// One layer of the fixed catalog. Use the factory functions; field use
// depends on kind.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int in_channels = 0, out_channels = 0;  // conv2d / batch_norm(channels)
  int kernel = 0, stride = 1, padding = 0;
  int in_features = 0, out_features = 0;  // dense
  double slope = 0.01;                    // leaky_relu
  int factor = 1;                         // nearest_upsample
  int side_channels = 0;                  // concat_channels

  static LayerSpec Dense(int in_features, int out_features);
  static LayerSpec Conv2d(int in_channels, int out_channels, int kernel,
                          int stride = 1, int padding = 0);
  static LayerSpec Relu();
  static LayerSpec LeakyRelu(double slope = 0.01);
  static LayerSpec Sigmoid();
  static LayerSpec BatchNorm(int channels);
  static LayerSpec NearestUpsample(int factor);
  // Concatenates an auxiliary input (supplied to forward()) after the
  // current activation's channels.
  static LayerSpec ConcatChannels(int side_channels);
};

struct Shape {
  int c = 0, h = 0, w = 0;
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

struct ForwardMode {
  bool training = false;
  // Batch-norm running averages are only touched when this is set; gradient
  // checking and evaluation keep it off.
  bool update_running_stats = false;
};

// Activation cache produced by forward() and consumed by backward().
struct LayerCache {
  TensorMap a;                 // layer input (or output, for sigmoid)
  std::vector<double> mean;    // batch_norm per-channel stats
  std::vector<double> var;
};

struct Cache {
  std::uint64_t net_tag = 0;
  bool training = false;
  std::vector<LayerCache> layers;
  TensorMap output;
};

// A sequence of catalog layers bound to named blocks in a ParamStore.
// Shapes are inferred and validated at bind time; a mismatch reports the
// offending layer index.
class Sequential {
 public:
  Sequential() = default;
  Sequential(std::string name, std::vector<LayerSpec> layers);

  // Registers parameter blocks ("<name>.<layer>.<w|b|...>") and runs shape
  // inference from input_shape. Must be called exactly once.
  void bind(ParamStore& store, Shape input_shape);

  // Glorot-uniform weights, zero biases, identity batch-norm. Draws from
  // rng in layer order.
  void init_params(ParamStore& store, RngStream& rng) const;

  const std::string& name() const { return name_; }
  Shape input_shape() const { return input_shape_; }
  Shape output_shape() const { return output_shape_; }
  // Expected shapes of the side inputs, one per concat_channels layer, in
  // layer order.
  const std::vector<Shape>& side_shapes() const { return side_shapes_; }
  const std::vector<LayerSpec>& layers() const { return layers_; }

  TensorMap forward(ParamStore& store, const TensorMap& input,
                    std::span<const TensorMap> sides, ForwardMode mode,
                    Cache* cache = nullptr) const;
  TensorMap forward(ParamStore& store, const TensorMap& input,
                    ForwardMode mode, Cache* cache = nullptr) const;

  // Returns the input gradient; accumulates parameter gradients into
  // *grads (may be null to skip, e.g. for latent-only gradients) and side
  // input gradients into *side_grads (ordered like side_shapes()).
  TensorMap backward(const ParamStore& store, const Cache& cache,
                     const TensorMap& grad_out, Grads* grads,
                     std::vector<TensorMap>* side_grads = nullptr) const;

 private:
  std::string name_;
  std::vector<LayerSpec> layers_;
  Shape input_shape_{};
  Shape output_shape_{};
  std::vector<Shape> shapes_;       // per-layer output shapes
  std::vector<Shape> side_shapes_;  // per concat layer
  std::vector<int> param_index_;    // first block index per layer, -1 if none
  std::uint64_t uid_ = 0;
  bool bound_ = false;
};

struct GradCheckIssue {
  std::string where;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::string worst_coordinate;
};

// Central-difference check of Sequential::backward. The scalar objective is
// a fixed random weighting of the outputs. Samples at least min_coords
// coordinates across parameters and the input (all of them if fewer).
GradCheckResult grad_check(Sequential& net, ParamStore& store,
                           const TensorMap& input,
                           std::span<const TensorMap> sides, double h,
                           RngStream& rng, std::size_t min_coords = 256);

// Generic variant for composite models: loss_fn recomputes the scalar
// objective from the store's current values; analytic holds the gradients
// being verified.
GradCheckResult grad_check_fn(ParamStore& store,
                              const std::function<double()>& loss_fn,
                              const Grads& analytic, double h, RngStream& rng,
                              std::size_t min_coords = 256);

}  // namespace duq
