#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "duq/errors.hpp"

namespace duq {

// Named flat parameter blocks in deterministic registration order, with
// per-block Adam moments. Non-learnable blocks (batch-norm running stats)
// live in the same store so checkpoints capture them, but are skipped by
// the optimizer and by gradient accumulation.
class ParamStore {
 public:
  struct Block {
    std::string name;
    std::vector<double> values;
    std::vector<double> adam_m;
    std::vector<double> adam_v;
    bool learnable = true;
  };

  // Returns the block index. Names must be unique within a store.
  int register_block(const std::string& name, std::size_t size,
                     bool learnable = true);

  int index_of(const std::string& name) const;
  bool has_block(const std::string& name) const;

  Block& block(int index) { return blocks_.at(index); }
  const Block& block(int index) const { return blocks_.at(index); }
  std::size_t block_count() const { return blocks_.size(); }

  std::vector<double>& values(int index) { return blocks_.at(index).values; }
  const std::vector<double>& values(int index) const {
    return blocks_.at(index).values;
  }

  std::size_t total_values() const;
  std::int64_t step_count() const { return step_count_; }
  void set_step_count(std::int64_t t) { step_count_ = t; }

  bool all_finite() const;

 private:
  std::vector<Block> blocks_;
  std::unordered_map<std::string, int> by_name_;
  std::int64_t step_count_ = 0;
};

// Gradient buffers aligned with a ParamStore's blocks.
class Grads {
 public:
  Grads() = default;
  explicit Grads(const ParamStore& store);

  std::vector<double>& operator[](int index) { return g_.at(index); }
  const std::vector<double>& operator[](int index) const { return g_.at(index); }
  std::size_t block_count() const { return g_.size(); }

  void zero();
  // this += other, block by block. Shapes must match.
  void add(const Grads& other);
  void scale(double s);
  double norm() const;

 private:
  std::vector<std::vector<double>> g_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// One bias-corrected Adam update over every learnable block.
// Throws numeric_error naming the block if a gradient is non-finite.
void adam_step(ParamStore& store, const Grads& grads, const AdamConfig& cfg);

}  // namespace duq
