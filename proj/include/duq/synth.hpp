#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "duq/rng.hpp"
#include "duq/tensor.hpp"

namespace duq {

enum class ShapeClass { disk, square, triangle, crescent };

std::string shape_class_name(ShapeClass s);
ShapeClass shape_class_from_name(const std::string& name);

enum class Split { train, val, test_id, test_ood };

std::string split_name(Split s);
Split split_from_name(const std::string& name);

// Camouflage-style binary segmentation task with a known per-pixel label
// flip probability (the aleatoric ground truth) and an out-of-distribution
// split driven by a held-out shape class plus off-centre placement.
struct BenchConfig {
  int image_size = 32;
  double contrast = 0.35;           // foreground/background intensity gap
  double texture_amplitude = 0.12;  // shared texture on both sides
  double boundary_band = 3.0;       // pixels; noise is zero beyond this
  double rho_max = 0.35;            // peak flip probability at the boundary
  int train_count = 200;
  int val_count = 50;
  int test_id_count = 50;
  int test_ood_count = 50;
  // OOD rule: this shape class never appears in train/val/test_id, and OOD
  // centre offsets have magnitude >= ood_offset_min.
  std::string ood_shape = "crescent";
  double ood_offset_min = 6.0;
  double train_offset_sigma = 2.0;  // centre bias of in-distribution samples
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static BenchConfig from_json_text(const std::string& text);
  static BenchConfig from_json_file(const std::string& path);
};

struct SyntheticSample {
  TensorMap image;        // 1xHxW in [0,1]
  TensorMap clean_mask;   // binary
  TensorMap noisy_label;  // binary
  TensorMap noise_field;  // flip probability in [0, rho_max]
  ShapeClass shape_class = ShapeClass::disk;
  double center_dy = 0.0, center_dx = 0.0;
  bool ood = false;
  int index = 0;
};

// Deterministic in (cfg.seed, split, index). Degenerate (empty/full) masks
// are regenerated from perturbed substreams, at most 8 times.
SyntheticSample generate_sample(const BenchConfig& cfg, Split split, int index);

// Writes DMAP files plus one JSON manifest per split under out_dir.
void generate_dataset(const BenchConfig& cfg, const std::string& out_dir);

// Checks every manifest against the files on disk; throws on mismatch.
void validate_dataset(const std::string& dir);

std::vector<SyntheticSample> load_split(const std::string& dir, Split split);

// Independent Bernoulli flips of a binary mask. Exposed so tests can
// re-flip a fixed field many times.
TensorMap flip_labels(const TensorMap& clean_mask, const TensorMap& noise_field,
                      RngStream& rng);

}  // namespace duq
