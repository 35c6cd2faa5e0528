#include "duq/param_store.hpp"

#include <cmath>

namespace duq {

int ParamStore::register_block(const std::string& name, std::size_t size,
                               bool learnable) {
  if (by_name_.count(name)) {
    throw config_error("ParamStore: duplicate block name '" + name + "'");
  }
  Block b;
  b.name = name;
  b.values.assign(size, 0.0);
  b.adam_m.assign(size, 0.0);
  b.adam_v.assign(size, 0.0);
  b.learnable = learnable;
  blocks_.push_back(std::move(b));
  const int idx = static_cast<int>(blocks_.size()) - 1;
  by_name_[name] = idx;
  return idx;
}

int ParamStore::index_of(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) {
    throw config_error("ParamStore: unknown block '" + name + "'");
  }
  return it->second;
}

bool ParamStore::has_block(const std::string& name) const {
  return by_name_.count(name) != 0;
}

std::size_t ParamStore::total_values() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.values.size();
  return n;
}

bool ParamStore::all_finite() const {
  for (const auto& b : blocks_) {
    for (double v : b.values) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

Grads::Grads(const ParamStore& store) {
  g_.resize(store.block_count());
  for (std::size_t i = 0; i < g_.size(); ++i) {
    g_[i].assign(store.block(static_cast<int>(i)).values.size(), 0.0);
  }
}

void Grads::zero() {
  for (auto& b : g_) std::fill(b.begin(), b.end(), 0.0);
}

void Grads::add(const Grads& other) {
  if (other.g_.size() != g_.size()) {
    throw usage_error("Grads::add: block count mismatch");
  }
  for (std::size_t i = 0; i < g_.size(); ++i) {
    if (other.g_[i].size() != g_[i].size()) {
      throw usage_error("Grads::add: block size mismatch at " +
                        std::to_string(i));
    }
    for (std::size_t j = 0; j < g_[i].size(); ++j) g_[i][j] += other.g_[i][j];
  }
}

void Grads::scale(double s) {
  for (auto& b : g_) {
    for (auto& v : b) v *= s;
  }
}

double Grads::norm() const {
  double acc = 0.0;
  for (const auto& b : g_) {
    for (double v : b) acc += v * v;
  }
  return std::sqrt(acc);
}

void adam_step(ParamStore& store, const Grads& grads, const AdamConfig& cfg) {
  if (grads.block_count() != store.block_count()) {
    throw usage_error("adam_step: gradient/store block count mismatch");
  }
  // Validate before mutating anything so a bad block aborts the whole step.
  for (std::size_t i = 0; i < store.block_count(); ++i) {
    const auto& b = store.block(static_cast<int>(i));
    if (!b.learnable) continue;
    for (double g : grads[static_cast<int>(i)]) {
      if (!std::isfinite(g)) {
        throw numeric_error("adam_step: non-finite gradient in block '" +
                            b.name + "'");
      }
    }
  }
  const std::int64_t t = store.step_count() + 1;
  store.set_step_count(t);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (std::size_t i = 0; i < store.block_count(); ++i) {
    auto& b = store.block(static_cast<int>(i));
    if (!b.learnable) continue;
    const auto& g = grads[static_cast<int>(i)];
    for (std::size_t j = 0; j < b.values.size(); ++j) {
      b.adam_m[j] = cfg.beta1 * b.adam_m[j] + (1.0 - cfg.beta1) * g[j];
      b.adam_v[j] = cfg.beta2 * b.adam_v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
      const double m_hat = b.adam_m[j] / bc1;
      const double v_hat = b.adam_v[j] / bc2;
      b.values[j] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

}  // namespace duq
