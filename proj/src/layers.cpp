#include "duq/layers.hpp"

#include <algorithm>
#include <limits>
#include <atomic>
#include <cmath>
#include <functional>
#include <sstream>

namespace duq {

namespace {

constexpr double kBnEps = 1e-5;
constexpr double kBnMomentum = 0.1;

std::atomic<std::uint64_t> g_net_uid{1};

}  // namespace

std::string layer_kind_name(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::leaky_relu: return "leaky_relu";
    case LayerKind::sigmoid: return "sigmoid";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::nearest_upsample: return "nearest_upsample";
    case LayerKind::concat_channels: return "concat_channels";
  }
  return "?";
}

std::string Shape::str() const {
  std::ostringstream os;
  os << c << "x" << h << "x" << w;
  return os.str();
}

LayerSpec LayerSpec::Dense(int in_features, int out_features) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.in_features = in_features;
  s.out_features = out_features;
  return s;
}

LayerSpec LayerSpec::Conv2d(int in_channels, int out_channels, int kernel,
                            int stride, int padding) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.in_channels = in_channels;
  s.out_channels = out_channels;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::Relu() {
  LayerSpec s;
  s.kind = LayerKind::relu;
  return s;
}

LayerSpec LayerSpec::LeakyRelu(double slope) {
  LayerSpec s;
  s.kind = LayerKind::leaky_relu;
  s.slope = slope;
  return s;
}

LayerSpec LayerSpec::Sigmoid() {
  LayerSpec s;
  s.kind = LayerKind::sigmoid;
  return s;
}

LayerSpec LayerSpec::BatchNorm(int channels) {
  LayerSpec s;
  s.kind = LayerKind::batch_norm;
  s.in_channels = channels;
  s.out_channels = channels;
  return s;
}

LayerSpec LayerSpec::NearestUpsample(int factor) {
  LayerSpec s;
  s.kind = LayerKind::nearest_upsample;
  s.factor = factor;
  return s;
}

LayerSpec LayerSpec::ConcatChannels(int side_channels) {
  LayerSpec s;
  s.kind = LayerKind::concat_channels;
  s.side_channels = side_channels;
  return s;
}

Sequential::Sequential(std::string name, std::vector<LayerSpec> layers)
    : name_(std::move(name)), layers_(std::move(layers)) {
  uid_ = g_net_uid.fetch_add(1);
}

void Sequential::bind(ParamStore& store, Shape input_shape) {
  if (bound_) throw config_error("Sequential '" + name_ + "': bind called twice");
  input_shape_ = input_shape;
  Shape cur = input_shape;
  shapes_.clear();
  side_shapes_.clear();
  param_index_.assign(layers_.size(), -1);

  auto fail = [&](std::size_t i, const std::string& why) {
    throw config_error("Sequential '" + name_ + "' layer " + std::to_string(i) +
                       " (" + layer_kind_name(layers_[i].kind) + "): " + why);
  };

  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    const std::string prefix = name_ + "." + std::to_string(i);
    switch (l.kind) {
      case LayerKind::dense: {
        if (cur.c * cur.h * cur.w != l.in_features) {
          fail(i, "expects " + std::to_string(l.in_features) +
                      " flattened inputs, got " + cur.str());
        }
        if (l.out_features <= 0) fail(i, "out_features must be positive");
        param_index_[i] = store.register_block(
            prefix + ".w",
            static_cast<std::size_t>(l.out_features) * l.in_features);
        store.register_block(prefix + ".b", l.out_features);
        cur = Shape{l.out_features, 1, 1};
        break;
      }
      case LayerKind::conv2d: {
        if (l.kernel <= 0 || l.kernel % 2 == 0) fail(i, "kernel must be odd");
        if (l.stride < 1) fail(i, "stride must be >= 1");
        if (l.padding < 0) fail(i, "padding must be >= 0");
        if (cur.c != l.in_channels) {
          fail(i, "expects " + std::to_string(l.in_channels) +
                      " input channels, got " + cur.str());
        }
        const int eh = cur.h + 2 * l.padding - l.kernel;
        const int ew = cur.w + 2 * l.padding - l.kernel;
        if (eh < 0 || ew < 0) fail(i, "kernel larger than padded input");
        param_index_[i] = store.register_block(
            prefix + ".w", static_cast<std::size_t>(l.out_channels) *
                               l.in_channels * l.kernel * l.kernel);
        store.register_block(prefix + ".b", l.out_channels);
        cur = Shape{l.out_channels, eh / l.stride + 1, ew / l.stride + 1};
        break;
      }
      case LayerKind::relu:
      case LayerKind::leaky_relu:
      case LayerKind::sigmoid:
        break;
      case LayerKind::batch_norm: {
        if (cur.c != l.in_channels) {
          fail(i, "normalizes " + std::to_string(l.in_channels) +
                      " channels, got " + cur.str());
        }
        param_index_[i] = store.register_block(prefix + ".gamma", cur.c);
        store.register_block(prefix + ".beta", cur.c);
        store.register_block(prefix + ".running_mean", cur.c,
                             /*learnable=*/false);
        store.register_block(prefix + ".running_var", cur.c,
                             /*learnable=*/false);
        break;
      }
      case LayerKind::nearest_upsample: {
        if (l.factor < 1) fail(i, "factor must be >= 1");
        cur = Shape{cur.c, cur.h * l.factor, cur.w * l.factor};
        break;
      }
      case LayerKind::concat_channels: {
        if (l.side_channels <= 0) fail(i, "side_channels must be positive");
        side_shapes_.push_back(Shape{l.side_channels, cur.h, cur.w});
        cur = Shape{cur.c + l.side_channels, cur.h, cur.w};
        break;
      }
    }
    shapes_.push_back(cur);
  }
  output_shape_ = cur;
  bound_ = true;
}

void Sequential::init_params(ParamStore& store, RngStream& rng) const {
  if (!bound_) throw config_error("Sequential '" + name_ + "': init before bind");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    if (param_index_[i] < 0) continue;
    const int pi = param_index_[i];
    switch (l.kind) {
      case LayerKind::dense: {
        auto& w = store.values(pi);
        const double bound =
            std::sqrt(6.0 / (l.in_features + l.out_features));
        for (auto& v : w) v = rng.uniform(-bound, bound);
        // bias block pi+1 stays zero
        break;
      }
      case LayerKind::conv2d: {
        auto& w = store.values(pi);
        const double fan_in = static_cast<double>(l.in_channels) * l.kernel * l.kernel;
        const double fan_out = static_cast<double>(l.out_channels) * l.kernel * l.kernel;
        const double bound = std::sqrt(6.0 / (fan_in + fan_out));
        for (auto& v : w) v = rng.uniform(-bound, bound);
        break;
      }
      case LayerKind::batch_norm: {
        auto& gamma = store.values(pi);
        std::fill(gamma.begin(), gamma.end(), 1.0);
        auto& rv = store.values(pi + 3);
        std::fill(rv.begin(), rv.end(), 1.0);
        break;
      }
      default:
        break;
    }
  }
}

TensorMap Sequential::forward(ParamStore& store, const TensorMap& input,
                              ForwardMode mode, Cache* cache) const {
  return forward(store, input, std::span<const TensorMap>{}, mode, cache);
}

TensorMap Sequential::forward(ParamStore& store, const TensorMap& input,
                              std::span<const TensorMap> sides,
                              ForwardMode mode, Cache* cache) const {
  if (!bound_) throw config_error("Sequential '" + name_ + "': forward before bind");
  if (input.channels() != input_shape_.c || input.height() != input_shape_.h ||
      input.width() != input_shape_.w) {
    throw config_error("Sequential '" + name_ + "': input shape " +
                       input.shape_str() + " != declared " + input_shape_.str());
  }
  if (sides.size() != side_shapes_.size()) {
    throw config_error("Sequential '" + name_ + "': expected " +
                       std::to_string(side_shapes_.size()) + " side inputs, got " +
                       std::to_string(sides.size()));
  }
  if (cache) {
    cache->net_tag = uid_;
    cache->training = mode.training;
    cache->layers.assign(layers_.size(), LayerCache{});
  }

  TensorMap cur = input;
  std::size_t side_at = 0;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const LayerSpec& l = layers_[i];
    const int pi = param_index_[i];
    switch (l.kind) {
      case LayerKind::dense: {
        const auto& w = store.values(pi);
        const auto& b = store.values(pi + 1);
        if (cache) cache->layers[i].a = cur;
        TensorMap out(l.out_features, 1, 1);
        for (int o = 0; o < l.out_features; ++o) {
          double acc = b[o];
          const double* wr = &w[static_cast<std::size_t>(o) * l.in_features];
          for (int j = 0; j < l.in_features; ++j) acc += wr[j] * cur[j];
          out[o] = acc;
        }
        cur = std::move(out);
        break;
      }
      case LayerKind::conv2d: {
        const auto& w = store.values(pi);
        const auto& b = store.values(pi + 1);
        if (cache) cache->layers[i].a = cur;
        const Shape os = shapes_[i];
        TensorMap out(os.c, os.h, os.w);
        const int k = l.kernel, st = l.stride, p = l.padding;
        const int ih = cur.height(), iw = cur.width();
        for (int oc = 0; oc < os.c; ++oc) {
          const double bias = b[oc];
          for (int oy = 0; oy < os.h; ++oy) {
            const int iy0 = oy * st - p;
            for (int ox = 0; ox < os.w; ++ox) {
              const int ix0 = ox * st - p;
              double acc = bias;
              for (int ic = 0; ic < l.in_channels; ++ic) {
                const double* wbase =
                    &w[((static_cast<std::size_t>(oc) * l.in_channels + ic) * k) * k];
                for (int ky = 0; ky < k; ++ky) {
                  const int iy = iy0 + ky;
                  if (iy < 0 || iy >= ih) continue;
                  const double* xrow = &cur.data()[(static_cast<std::size_t>(ic) * ih + iy) * iw];
                  const double* wrow = wbase + static_cast<std::size_t>(ky) * k;
                  for (int kx = 0; kx < k; ++kx) {
                    const int ix = ix0 + kx;
                    if (ix < 0 || ix >= iw) continue;
                    acc += wrow[kx] * xrow[ix];
                  }
                }
              }
              out.at(oc, oy, ox) = acc;
            }
          }
        }
        cur = std::move(out);
        break;
      }
      case LayerKind::relu: {
        if (cache) cache->layers[i].a = cur;
        for (auto& v : cur.data()) v = v > 0.0 ? v : 0.0;
        break;
      }
      case LayerKind::leaky_relu: {
        if (cache) cache->layers[i].a = cur;
        for (auto& v : cur.data()) {
          if (v < 0.0) v *= l.slope;
        }
        break;
      }
      case LayerKind::sigmoid: {
        for (auto& v : cur.data()) v = 1.0 / (1.0 + std::exp(-v));
        if (cache) cache->layers[i].a = cur;  // derivative needs the output
        break;
      }
      case LayerKind::batch_norm: {
        const auto& gamma = store.values(pi);
        const auto& beta = store.values(pi + 1);
        const int C = cur.channels();
        const int n = cur.height() * cur.width();
        std::vector<double> mean(C), var(C);
        if (mode.training) {
          for (int c = 0; c < C; ++c) {
            const double* xc = &cur.data()[static_cast<std::size_t>(c) * n];
            double m = 0.0;
            for (int j = 0; j < n; ++j) m += xc[j];
            m /= n;
            double v = 0.0;
            for (int j = 0; j < n; ++j) v += (xc[j] - m) * (xc[j] - m);
            v /= n;
            mean[c] = m;
            var[c] = v;
          }
          if (mode.update_running_stats) {
            auto& rm = store.values(pi + 2);
            auto& rv = store.values(pi + 3);
            for (int c = 0; c < C; ++c) {
              rm[c] = (1.0 - kBnMomentum) * rm[c] + kBnMomentum * mean[c];
              rv[c] = (1.0 - kBnMomentum) * rv[c] + kBnMomentum * var[c];
            }
          }
        } else {
          const auto& rm = store.values(pi + 2);
          const auto& rv = store.values(pi + 3);
          mean.assign(rm.begin(), rm.end());
          var.assign(rv.begin(), rv.end());
        }
        if (cache) {
          cache->layers[i].a = cur;
          cache->layers[i].mean = mean;
          cache->layers[i].var = var;
        }
        for (int c = 0; c < C; ++c) {
          const double inv = 1.0 / std::sqrt(var[c] + kBnEps);
          double* xc = &cur.data()[static_cast<std::size_t>(c) * n];
          for (int j = 0; j < n; ++j) {
            xc[j] = gamma[c] * (xc[j] - mean[c]) * inv + beta[c];
          }
        }
        break;
      }
      case LayerKind::nearest_upsample: {
        cur = nearest_upsample(cur, l.factor);
        break;
      }
      case LayerKind::concat_channels: {
        const TensorMap& side = sides[side_at];
        const Shape want = side_shapes_[side_at];
        if (side.channels() != want.c || side.height() != want.h ||
            side.width() != want.w) {
          throw config_error("Sequential '" + name_ + "' layer " +
                             std::to_string(i) + ": side input shape " +
                             side.shape_str() + " != expected " + want.str());
        }
        ++side_at;
        cur = concat_channels(cur, side);
        break;
      }
    }
  }
  if (cache) cache->output = cur;
  return cur;
}

TensorMap Sequential::backward(const ParamStore& store, const Cache& cache,
                               const TensorMap& grad_out, Grads* grads,
                               std::vector<TensorMap>* side_grads) const {
  if (!bound_) throw config_error("Sequential '" + name_ + "': backward before bind");
  if (cache.net_tag != uid_ || cache.layers.size() != layers_.size()) {
    throw numeric_error("Sequential '" + name_ +
                        "': stale or mismatched cache in backward");
  }
  if (grad_out.channels() != output_shape_.c ||
      grad_out.height() != output_shape_.h ||
      grad_out.width() != output_shape_.w) {
    throw usage_error("Sequential '" + name_ + "': grad_out shape " +
                      grad_out.shape_str() + " != output " + output_shape_.str());
  }
  if (side_grads) {
    side_grads->clear();
    side_grads->resize(side_shapes_.size());
  }

  TensorMap g = grad_out;
  std::size_t side_at = side_shapes_.size();
  for (std::size_t ii = layers_.size(); ii-- > 0;) {
    const LayerSpec& l = layers_[ii];
    const int pi = param_index_[ii];
    const LayerCache& lc = cache.layers[ii];
    switch (l.kind) {
      case LayerKind::dense: {
        const auto& w = store.values(pi);
        const TensorMap& x = lc.a;
        TensorMap gx(x.channels(), x.height(), x.width());
        for (int o = 0; o < l.out_features; ++o) {
          const double go = g[o];
          const double* wr = &w[static_cast<std::size_t>(o) * l.in_features];
          if (grads) {
            double* gw = &(*grads)[pi][static_cast<std::size_t>(o) * l.in_features];
            for (int j = 0; j < l.in_features; ++j) gw[j] += go * x[j];
            (*grads)[pi + 1][o] += go;
          }
          for (int j = 0; j < l.in_features; ++j) gx[j] += wr[j] * go;
        }
        g = std::move(gx);
        break;
      }
      case LayerKind::conv2d: {
        const auto& w = store.values(pi);
        const TensorMap& x = lc.a;
        TensorMap gx(x.channels(), x.height(), x.width());
        const int k = l.kernel, st = l.stride, p = l.padding;
        const int ih = x.height(), iw = x.width();
        const int oh = g.height(), ow = g.width();
        for (int oc = 0; oc < l.out_channels; ++oc) {
          double gb = 0.0;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy0 = oy * st - p;
            for (int ox = 0; ox < ow; ++ox) {
              const int ix0 = ox * st - p;
              const double go = g.at(oc, oy, ox);
              if (go == 0.0) continue;
              gb += go;
              for (int ic = 0; ic < l.in_channels; ++ic) {
                const std::size_t wbase =
                    ((static_cast<std::size_t>(oc) * l.in_channels + ic) * k) * k;
                for (int ky = 0; ky < k; ++ky) {
                  const int iy = iy0 + ky;
                  if (iy < 0 || iy >= ih) continue;
                  const double* xrow =
                      &x.data()[(static_cast<std::size_t>(ic) * ih + iy) * iw];
                  double* gxrow =
                      &gx.data()[(static_cast<std::size_t>(ic) * ih + iy) * iw];
                  const std::size_t wrow = wbase + static_cast<std::size_t>(ky) * k;
                  for (int kx = 0; kx < k; ++kx) {
                    const int ix = ix0 + kx;
                    if (ix < 0 || ix >= iw) continue;
                    if (grads) (*grads)[pi][wrow + kx] += go * xrow[ix];
                    gxrow[ix] += w[wrow + kx] * go;
                  }
                }
              }
            }
          }
          if (grads) (*grads)[pi + 1][oc] += gb;
        }
        g = std::move(gx);
        break;
      }
      case LayerKind::relu: {
        const TensorMap& x = lc.a;
        for (std::size_t j = 0; j < g.size(); ++j) {
          if (x[j] <= 0.0) g[j] = 0.0;
        }
        break;
      }
      case LayerKind::leaky_relu: {
        const TensorMap& x = lc.a;
        for (std::size_t j = 0; j < g.size(); ++j) {
          if (x[j] < 0.0) g[j] *= l.slope;
        }
        break;
      }
      case LayerKind::sigmoid: {
        const TensorMap& y = lc.a;
        for (std::size_t j = 0; j < g.size(); ++j) {
          g[j] *= y[j] * (1.0 - y[j]);
        }
        break;
      }
      case LayerKind::batch_norm: {
        const auto& gamma = store.values(pi);
        const TensorMap& x = lc.a;
        const int C = x.channels();
        const int n = x.height() * x.width();
        TensorMap gx(C, x.height(), x.width());
        for (int c = 0; c < C; ++c) {
          const double m = lc.mean[c];
          const double inv = 1.0 / std::sqrt(lc.var[c] + kBnEps);
          const double* xc = &x.data()[static_cast<std::size_t>(c) * n];
          const double* gc = &g.data()[static_cast<std::size_t>(c) * n];
          double* gxc = &gx.data()[static_cast<std::size_t>(c) * n];
          double sum_g = 0.0, sum_gxhat = 0.0;
          for (int j = 0; j < n; ++j) {
            sum_g += gc[j];
            sum_gxhat += gc[j] * (xc[j] - m) * inv;
          }
          if (grads) {
            (*grads)[pi][c] += sum_gxhat;
            (*grads)[pi + 1][c] += sum_g;
          }
          if (cache.training) {
            const double a1 = gamma[c] * inv;
            for (int j = 0; j < n; ++j) {
              const double xhat = (xc[j] - m) * inv;
              gxc[j] = a1 * (gc[j] - sum_g / n - xhat * sum_gxhat / n);
            }
          } else {
            const double a1 = gamma[c] * inv;
            for (int j = 0; j < n; ++j) gxc[j] = a1 * gc[j];
          }
        }
        g = std::move(gx);
        break;
      }
      case LayerKind::nearest_upsample: {
        g = nearest_upsample_backward(g, l.factor);
        break;
      }
      case LayerKind::concat_channels: {
        --side_at;
        const int front =
            (ii == 0 ? input_shape_.c
                     : shapes_[ii - 1].c);
        TensorMap gfront, gside;
        split_channels(g, front, &gfront, &gside);
        if (side_grads) (*side_grads)[side_at] = std::move(gside);
        g = std::move(gfront);
        break;
      }
    }
  }
  return g;
}

namespace {

// Central difference with a small step ladder. The base step suffers from
// roundoff on small-magnitude gradients and wider steps can cross leaky-relu
// kinks, so each coordinate keeps its best-agreeing measurement; a genuinely
// wrong analytic gradient disagrees at every step size.
double fd_rel_error(const std::function<double()>& loss_fn, double& coord,
                    double base_h, double analytic, const std::string& where) {
  double best = std::numeric_limits<double>::infinity();
  const double saved = coord;
  for (double h : {base_h, 4.0 * base_h, 16.0 * base_h}) {
    coord = saved + h;
    const double lp = loss_fn();
    coord = saved - h;
    const double lm = loss_fn();
    coord = saved;
    if (!std::isfinite(lp) || !std::isfinite(lm)) {
      throw numeric_error("grad_check: non-finite loss at " + where);
    }
    const double fd = (lp - lm) / (2.0 * h);
    const double rel = std::fabs(analytic - fd) /
                       std::max({std::fabs(analytic), std::fabs(fd), 1e-8});
    best = std::min(best, rel);
  }
  return best;
}

}  // namespace

GradCheckResult grad_check(Sequential& net, ParamStore& store,
                           const TensorMap& input,
                           std::span<const TensorMap> sides, double h,
                           RngStream& rng, std::size_t min_coords) {
  if (h <= 0.0) throw usage_error("grad_check: h must be positive");
  const Shape os = net.output_shape();
  TensorMap weights(os.c, os.h, os.w);
  for (auto& w : weights.data()) w = rng.uniform(-1.0, 1.0);

  const ForwardMode mode{/*training=*/true, /*update_running_stats=*/false};
  auto loss_of = [&]() {
    TensorMap out = net.forward(store, input, sides, mode, nullptr);
    double acc = 0.0;
    for (std::size_t j = 0; j < out.size(); ++j) acc += weights[j] * out[j];
    return acc;
  };

  Cache cache;
  net.forward(store, input, sides, mode, &cache);
  Grads analytic(store);
  std::vector<TensorMap> side_grads;
  TensorMap input_grad =
      net.backward(store, cache, weights, &analytic, &side_grads);

  // Parameter coordinates first, then input coordinates.
  GradCheckResult param_part =
      grad_check_fn(store, loss_of, analytic, h, rng, min_coords);

  GradCheckResult result = param_part;
  std::size_t n_input = input.size();
  std::size_t want = std::min<std::size_t>(n_input, std::max<std::size_t>(min_coords / 4, 32));
  TensorMap mutable_input = input;
  auto loss_of_input = [&]() {
    TensorMap out = net.forward(store, mutable_input, sides, mode, nullptr);
    double acc = 0.0;
    for (std::size_t j = 0; j < out.size(); ++j) acc += weights[j] * out[j];
    return acc;
  };
  for (std::size_t t = 0; t < want; ++t) {
    const std::size_t j =
        want == n_input ? t : static_cast<std::size_t>(rng.uniform_int(n_input));
    const std::string where = "input[" + std::to_string(j) + "]";
    const double rel =
        fd_rel_error(loss_of_input, mutable_input[j], h, input_grad[j], where);
    ++result.coords_checked;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_coordinate = where;
    }
  }
  return result;
}

GradCheckResult grad_check_fn(ParamStore& store,
                              const std::function<double()>& loss_fn,
                              const Grads& analytic, double h, RngStream& rng,
                              std::size_t min_coords) {
  if (h <= 0.0) throw usage_error("grad_check_fn: h must be positive");
  // Collect learnable coordinates.
  std::vector<std::pair<int, std::size_t>> coords;
  for (std::size_t b = 0; b < store.block_count(); ++b) {
    const auto& blk = store.block(static_cast<int>(b));
    if (!blk.learnable) continue;
    for (std::size_t j = 0; j < blk.values.size(); ++j) {
      coords.emplace_back(static_cast<int>(b), j);
    }
  }
  GradCheckResult result;
  if (coords.empty()) return result;

  std::vector<std::pair<int, std::size_t>> picked;
  if (coords.size() <= min_coords) {
    picked = coords;
  } else {
    picked.reserve(min_coords);
    for (std::size_t t = 0; t < min_coords; ++t) {
      picked.push_back(coords[rng.uniform_int(coords.size())]);
    }
  }

  for (const auto& [b, j] : picked) {
    const std::string where = store.block(b).name + "[" + std::to_string(j) + "]";
    const double rel =
        fd_rel_error(loss_fn, store.values(b)[j], h, analytic[b][j], where);
    ++result.coords_checked;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_coordinate = where;
    }
  }
  return result;
}

}  // namespace duq
