#pragma once

#include <cstdint>
#include <vector>

namespace duq {

// Counter-keyed deterministic RNG. A stream is identified by (master seed,
// stream id); identical pairs replay the same draw sequence, distinct ids
// give independent sequences. Generation is xoshiro256** seeded through
// splitmix64, with draws fully defined here so sequences are reproducible
// across platforms and standard-library versions.
class RngStream {
 public:
  RngStream() : RngStream(0, 0) {}
  RngStream(std::uint64_t master_seed, std::uint64_t stream_id);

  std::uint64_t master_seed() const { return master_seed_; }
  std::uint64_t stream_id() const { return stream_id_; }

  // Derived stream: same master seed, id mixed from this stream's id and
  // the given keys. Used to key per-sample / per-epoch substreams.
  RngStream substream(std::uint64_t key) const;
  RngStream substream(std::uint64_t key_a, std::uint64_t key_b) const;
  RngStream substream(std::uint64_t key_a, std::uint64_t key_b,
                      std::uint64_t key_c) const;

  std::uint64_t next_u64();
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  // Integer uniform in [0, n).
  std::uint64_t uniform_int(std::uint64_t n);
  // Standard normal via Box-Muller (second value cached).
  double normal();
  double normal(double mean, double stddev);
  bool bernoulli(double p);

  std::vector<double> normal_vector(std::size_t n);
  // Fisher-Yates shuffle of indices 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::uint64_t master_seed_ = 0;
  std::uint64_t stream_id_ = 0;
  std::uint64_t state_[4] = {};
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace duq
