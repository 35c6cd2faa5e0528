#include <cstdint>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "duq/dmap.hpp"
#include "duq/rng.hpp"
#include "duq/synth.hpp"

using namespace duq;
namespace fs = std::filesystem;

namespace {

BenchConfig small_cfg() {
  BenchConfig cfg;
  cfg.train_count = 6;
  cfg.val_count = 3;
  cfg.test_id_count = 3;
  cfg.test_ood_count = 4;
  cfg.seed = 1234;
  return cfg;
}

std::string read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  return std::string((std::istreambuf_iterator<char>(in)),
                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("DMAP roundtrip is exact for single-precision values") {
  RngStream rng(3, 0);
  TensorMap m(1, 32, 32);
  for (auto& v : m.data()) v = static_cast<float>(rng.uniform(-5.0, 5.0));
  const std::string path = "/tmp/duq_test_roundtrip.dmap";
  write_dmap(path, m);
  TensorMap back = read_dmap(path);
  REQUIRE(back.same_shape(m));
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(back[i] == m[i]);
}

TEST_CASE("DMAP rejects wrong magic") {
  const std::string path = "/tmp/duq_test_magic.dmap";
  TensorMap m(1, 2, 2, {1.0, 2.0, 3.0, 4.0});
  write_dmap(path, m);
  std::string bytes = read_bytes(path);
  bytes[0] = 'X';
  std::ofstream(path, std::ios::binary) << bytes;
  CHECK_THROWS_AS(read_dmap(path), format_error);
}

TEST_CASE("DMAP rejects truncated payload naming the offset") {
  const std::string path = "/tmp/duq_test_trunc.dmap";
  TensorMap m(2, 3, 4);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<double>(i);
  write_dmap(path, m);
  std::string bytes = read_bytes(path);
  bytes.resize(bytes.size() - 4);  // 23 floats instead of 24
  std::ofstream(path, std::ios::binary) << bytes;
  try {
    read_dmap(path);
    FAIL("expected format_error");
  } catch (const format_error& e) {
    CHECK(std::string(e.what()).find("truncated") != std::string::npos);
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }
}

TEST_CASE("DMAP rejects non-finite payload") {
  const std::string path = "/tmp/duq_test_nan.dmap";
  TensorMap m(1, 1, 2, {1.0, 2.0});
  write_dmap(path, m);
  std::string bytes = read_bytes(path);
  // Overwrite the second float with a NaN pattern.
  bytes[24] = '\x00';
  bytes[25] = '\x00';
  bytes[26] = '\xc0';
  bytes[27] = '\x7f';
  std::ofstream(path, std::ios::binary) << bytes;
  CHECK_THROWS_AS(read_dmap(path), format_error);
}

TEST_CASE("rho_max = 0 gives noisy_label == clean_mask") {
  BenchConfig cfg = small_cfg();
  cfg.rho_max = 0.0;
  SyntheticSample s = generate_sample(cfg, Split::train, 0);
  CHECK(s.noisy_label.data() == s.clean_mask.data());
}

TEST_CASE("generate_sample is deterministic in (seed, split, index)") {
  BenchConfig cfg = small_cfg();
  SyntheticSample a = generate_sample(cfg, Split::val, 2);
  SyntheticSample b = generate_sample(cfg, Split::val, 2);
  CHECK(a.image.data() == b.image.data());
  CHECK(a.noisy_label.data() == b.noisy_label.data());
  CHECK(a.noise_field.data() == b.noise_field.data());
  CHECK(a.shape_class == b.shape_class);
  // A different index gives a different sample.
  SyntheticSample c = generate_sample(cfg, Split::val, 1);
  CHECK(a.image.data() != c.image.data());
}

TEST_CASE("label noise is local to the boundary band and bounded by rho_max") {
  BenchConfig cfg = small_cfg();
  for (int i = 0; i < 6; ++i) {
    SyntheticSample s = generate_sample(cfg, Split::train, i);
    double field_max = 0.0;
    for (std::size_t j = 0; j < s.noise_field.size(); ++j) {
      const double p = s.noise_field[j];
      CHECK(p >= 0.0);
      CHECK(p <= cfg.rho_max);
      field_max = std::max(field_max, p);
      if (p == 0.0) CHECK(s.noisy_label[j] == s.clean_mask[j]);
    }
    // The boundary itself sits at distance zero, so the peak is attained.
    CHECK(field_max == doctest::Approx(cfg.rho_max));
  }
}

TEST_CASE("empirical flip rate matches the noise field") {
  BenchConfig cfg = small_cfg();
  SyntheticSample s = generate_sample(cfg, Split::train, 1);
  // Pick a handful of in-band pixels spanning the probability range.
  std::vector<std::size_t> picks;
  for (std::size_t j = 0; j < s.noise_field.size() && picks.size() < 12; ++j) {
    if (s.noise_field[j] > 0.03) picks.push_back(j);
  }
  REQUIRE(!picks.empty());
  const int n = 10000;
  std::vector<int> flips(picks.size(), 0);
  RngStream rng(777, 0);
  for (int t = 0; t < n; ++t) {
    RngStream sub = rng.substream(t);
    TensorMap noisy = flip_labels(s.clean_mask, s.noise_field, sub);
    for (std::size_t k = 0; k < picks.size(); ++k) {
      if (noisy[picks[k]] != s.clean_mask[picks[k]]) ++flips[k];
    }
  }
  for (std::size_t k = 0; k < picks.size(); ++k) {
    const double emp = static_cast<double>(flips[k]) / n;
    CHECK(std::fabs(emp - s.noise_field[picks[k]]) < 0.01);
  }
}

TEST_CASE("generate_dataset writes consistent manifests and obeys the OOD rule") {
  BenchConfig cfg = small_cfg();
  const std::string dir = "/tmp/duq_test_dataset";
  fs::remove_all(dir);
  generate_dataset(cfg, dir);
  validate_dataset(dir);

  auto train = load_split(dir, Split::train);
  auto ood = load_split(dir, Split::test_ood);
  CHECK(train.size() == 6);
  CHECK(ood.size() == 4);
  for (const auto& s : train) {
    CHECK(s.shape_class != ShapeClass::crescent);
    CHECK(!s.ood);
  }
  for (const auto& s : ood) {
    CHECK(s.shape_class == ShapeClass::crescent);
    CHECK(s.ood);
    CHECK(std::hypot(s.center_dy, s.center_dx) >= cfg.ood_offset_min);
  }

  // Tampering with the file count must fail validation.
  fs::remove(dir + "/val/s0000_image.dmap");
  CHECK_THROWS_AS(validate_dataset(dir), format_error);
}

TEST_CASE("dataset bytes are a pure function of the config") {
  BenchConfig cfg = small_cfg();
  const std::string d1 = "/tmp/duq_test_ds_a";
  const std::string d2 = "/tmp/duq_test_ds_b";
  fs::remove_all(d1);
  fs::remove_all(d2);
  generate_dataset(cfg, d1);
  generate_dataset(cfg, d2);
  for (const std::string split : {"train", "val", "test_id", "test_ood"}) {
    for (const auto& entry : fs::directory_iterator(d1 + "/" + split)) {
      const std::string name = entry.path().filename().string();
      CHECK(read_bytes(entry.path().string()) ==
            read_bytes(d2 + "/" + split + "/" + name));
    }
  }
}

TEST_CASE("sample images stay in [0,1] with the declared contrast structure") {
  BenchConfig cfg = small_cfg();
  SyntheticSample s = generate_sample(cfg, Split::train, 3);
  double fg = 0.0, bg = 0.0;
  int nfg = 0, nbg = 0;
  for (std::size_t j = 0; j < s.image.size(); ++j) {
    CHECK(s.image[j] >= 0.0);
    CHECK(s.image[j] <= 1.0);
    if (s.clean_mask[j] > 0.5) {
      fg += s.image[j];
      ++nfg;
    } else {
      bg += s.image[j];
      ++nbg;
    }
  }
  REQUIRE(nfg > 0);
  REQUIRE(nbg > 0);
  CHECK(fg / nfg - bg / nbg > cfg.contrast * 0.5);
}
