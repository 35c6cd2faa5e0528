#include "duq/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "duq/dmap.hpp"
#include "duq/errors.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace duq {

namespace {

constexpr std::uint64_t kSampleDomain = 0x53594e5448ULL;  // sample substreams

const char* kShapeNames[] = {"disk", "square", "triangle", "crescent"};
const char* kSplitNames[] = {"train", "val", "test_id", "test_ood"};

struct Point {
  double y, x;
};

}  // namespace

std::string shape_class_name(ShapeClass s) {
  return kShapeNames[static_cast<int>(s)];
}

ShapeClass shape_class_from_name(const std::string& name) {
  for (int i = 0; i < 4; ++i) {
    if (name == kShapeNames[i]) return static_cast<ShapeClass>(i);
  }
  throw usage_error("unknown shape class '" + name + "'");
}

std::string split_name(Split s) { return kSplitNames[static_cast<int>(s)]; }

Split split_from_name(const std::string& name) {
  for (int i = 0; i < 4; ++i) {
    if (name == kSplitNames[i]) return static_cast<Split>(i);
  }
  throw usage_error("unknown split '" + name + "'");
}

void BenchConfig::validate() const {
  if (image_size < 8) throw usage_error("BenchConfig: image_size too small");
  if (rho_max < 0.0 || rho_max > 0.5) {
    throw usage_error("BenchConfig: rho_max must be in [0, 0.5]");
  }
  if (contrast < 0.0) throw usage_error("BenchConfig: contrast must be >= 0");
  if (boundary_band <= 0.0) throw usage_error("BenchConfig: boundary_band must be > 0");
  if (train_count <= 0 || val_count <= 0 || test_id_count <= 0 ||
      test_ood_count <= 0) {
    throw usage_error("BenchConfig: split counts must be positive");
  }
  if (!ood_shape.empty()) shape_class_from_name(ood_shape);
}

std::string BenchConfig::to_json() const {
  json j;
  j["image_size"] = image_size;
  j["contrast"] = contrast;
  j["texture_amplitude"] = texture_amplitude;
  j["boundary_band"] = boundary_band;
  j["rho_max"] = rho_max;
  j["train_count"] = train_count;
  j["val_count"] = val_count;
  j["test_id_count"] = test_id_count;
  j["test_ood_count"] = test_ood_count;
  j["ood_shape"] = ood_shape;
  j["ood_offset_min"] = ood_offset_min;
  j["train_offset_sigma"] = train_offset_sigma;
  j["seed"] = seed;
  return j.dump(2);
}

BenchConfig BenchConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw usage_error(std::string("bench config: bad JSON: ") + e.what());
  }
  BenchConfig cfg;
  static const char* known[] = {
      "image_size",    "contrast",       "texture_amplitude",
      "boundary_band", "rho_max",        "train_count",
      "val_count",     "test_id_count",  "test_ood_count",
      "ood_shape",     "ood_offset_min", "train_offset_sigma",
      "seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find_if(std::begin(known), std::end(known), [&](const char* k) {
          return it.key() == k;
        }) == std::end(known)) {
      throw usage_error("bench config: unknown key '" + it.key() + "'");
    }
  }
  cfg.image_size = j.value("image_size", cfg.image_size);
  cfg.contrast = j.value("contrast", cfg.contrast);
  cfg.texture_amplitude = j.value("texture_amplitude", cfg.texture_amplitude);
  cfg.boundary_band = j.value("boundary_band", cfg.boundary_band);
  cfg.rho_max = j.value("rho_max", cfg.rho_max);
  cfg.train_count = j.value("train_count", cfg.train_count);
  cfg.val_count = j.value("val_count", cfg.val_count);
  cfg.test_id_count = j.value("test_id_count", cfg.test_id_count);
  cfg.test_ood_count = j.value("test_ood_count", cfg.test_ood_count);
  cfg.ood_shape = j.value("ood_shape", cfg.ood_shape);
  cfg.ood_offset_min = j.value("ood_offset_min", cfg.ood_offset_min);
  cfg.train_offset_sigma = j.value("train_offset_sigma", cfg.train_offset_sigma);
  cfg.seed = j.value("seed", cfg.seed);
  cfg.validate();
  return cfg;
}

BenchConfig BenchConfig::from_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json_text(ss.str());
}

TensorMap flip_labels(const TensorMap& clean_mask, const TensorMap& noise_field,
                      RngStream& rng) {
  TensorMap out = clean_mask;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double p = noise_field[i];
    if (p > 0.0 && rng.bernoulli(p)) out[i] = 1.0 - out[i];
  }
  return out;
}

namespace {

bool inside_shape(ShapeClass shape, double y, double x, double cy, double cx,
                  double r, double angle) {
  const double dy = y - cy, dx = x - cx;
  switch (shape) {
    case ShapeClass::disk:
      return dy * dy + dx * dx <= r * r;
    case ShapeClass::square: {
      const double s = r * 0.9;
      return std::fabs(dy) <= s && std::fabs(dx) <= s;
    }
    case ShapeClass::triangle: {
      Point v[3];
      for (int i = 0; i < 3; ++i) {
        const double a = angle + 2.0 * M_PI * i / 3.0;
        v[i] = {cy + 1.15 * r * std::sin(a), cx + 1.15 * r * std::cos(a)};
      }
      for (int i = 0; i < 3; ++i) {
        const Point& p0 = v[i];
        const Point& p1 = v[(i + 1) % 3];
        const double cross =
            (p1.x - p0.x) * (y - p0.y) - (p1.y - p0.y) * (x - p0.x);
        if (cross < 0.0) return false;
      }
      return true;
    }
    case ShapeClass::crescent: {
      if (dy * dy + dx * dx > r * r) return false;
      const double hy = cy + 0.55 * r * std::sin(angle);
      const double hx = cx + 0.55 * r * std::cos(angle);
      const double hr = 0.8 * r;
      const double hdy = y - hy, hdx = x - hx;
      return hdy * hdy + hdx * hdx > hr * hr;
    }
  }
  return false;
}

// Two-octave value noise in roughly [-1, 1].
TensorMap value_noise(int size, RngStream& rng) {
  TensorMap out(1, size, size);
  double amp = 1.0;
  for (int grid : {5, 9}) {
    std::vector<double> knots(static_cast<std::size_t>(grid) * grid);
    for (auto& k : knots) k = rng.uniform(-1.0, 1.0);
    const double step = static_cast<double>(size) / (grid - 1);
    for (int y = 0; y < size; ++y) {
      const double gy = y / step;
      const int y0 = std::min(static_cast<int>(gy), grid - 2);
      const double fy = gy - y0;
      for (int x = 0; x < size; ++x) {
        const double gx = x / step;
        const int x0 = std::min(static_cast<int>(gx), grid - 2);
        const double fx = gx - x0;
        const double a = knots[static_cast<std::size_t>(y0) * grid + x0];
        const double b = knots[static_cast<std::size_t>(y0) * grid + x0 + 1];
        const double c = knots[static_cast<std::size_t>(y0 + 1) * grid + x0];
        const double d = knots[static_cast<std::size_t>(y0 + 1) * grid + x0 + 1];
        out.at(0, y, x) += amp * ((1 - fy) * ((1 - fx) * a + fx * b) +
                                  fy * ((1 - fx) * c + fx * d));
      }
    }
    amp *= 0.5;
  }
  for (auto& v : out.data()) v /= 1.5;
  return out;
}

TensorMap boundary_noise_field(const TensorMap& mask, double band,
                               double rho_max) {
  const int h = mask.height(), w = mask.width();
  std::vector<Point> boundary;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double m = mask.at(0, y, x);
      const bool edge = (y > 0 && mask.at(0, y - 1, x) != m) ||
                        (y + 1 < h && mask.at(0, y + 1, x) != m) ||
                        (x > 0 && mask.at(0, y, x - 1) != m) ||
                        (x + 1 < w && mask.at(0, y, x + 1) != m);
      if (edge) boundary.push_back({static_cast<double>(y), static_cast<double>(x)});
    }
  }
  TensorMap field(1, h, w);
  if (boundary.empty()) return field;
  const double sigma = band / 2.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double best = 1e18;
      for (const auto& p : boundary) {
        const double dy = y - p.y, dx = x - p.x;
        best = std::min(best, dy * dy + dx * dx);
      }
      const double d = std::sqrt(best);
      if (d <= band) {
        field.at(0, y, x) = rho_max * std::exp(-d * d / (2.0 * sigma * sigma));
      }
    }
  }
  return field;
}

std::vector<ShapeClass> allowed_shapes(const BenchConfig& cfg, bool ood) {
  std::vector<ShapeClass> all = {ShapeClass::disk, ShapeClass::square,
                                 ShapeClass::triangle, ShapeClass::crescent};
  if (cfg.ood_shape.empty()) return all;
  const ShapeClass held = shape_class_from_name(cfg.ood_shape);
  std::vector<ShapeClass> out;
  for (ShapeClass s : all) {
    if (ood == (s == held)) out.push_back(s);
  }
  return out;
}

}  // namespace

SyntheticSample generate_sample(const BenchConfig& cfg, Split split, int index) {
  cfg.validate();
  const bool ood = split == Split::test_ood;
  const int size = cfg.image_size;

  for (int retry = 0; retry <= 8; ++retry) {
    RngStream rng = RngStream(cfg.seed, kSampleDomain)
                        .substream(static_cast<std::uint64_t>(split),
                                   static_cast<std::uint64_t>(index),
                                   static_cast<std::uint64_t>(retry));
    const auto shapes = allowed_shapes(cfg, ood);
    const ShapeClass shape = shapes[rng.uniform_int(shapes.size())];
    const double r = rng.uniform(0.15, 0.22) * size;
    double dy, dx;
    if (ood) {
      const double theta = rng.uniform(0.0, 2.0 * M_PI);
      const double mag = rng.uniform(cfg.ood_offset_min, cfg.ood_offset_min + 3.0);
      dy = mag * std::sin(theta);
      dx = mag * std::cos(theta);
    } else {
      const double clip = std::max(0.0, cfg.ood_offset_min - 2.0);
      dy = std::clamp(rng.normal(0.0, cfg.train_offset_sigma), -clip, clip);
      dx = std::clamp(rng.normal(0.0, cfg.train_offset_sigma), -clip, clip);
    }
    const double cy = (size - 1) / 2.0 + dy;
    const double cx = (size - 1) / 2.0 + dx;
    const double angle = rng.uniform(0.0, 2.0 * M_PI);

    TensorMap mask(1, size, size);
    int inside = 0;
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        if (inside_shape(shape, y, x, cy, cx, r, angle)) {
          mask.at(0, y, x) = 1.0;
          ++inside;
        }
      }
    }
    if (inside == 0 || inside == size * size) continue;

    TensorMap tex = value_noise(size, rng);
    TensorMap image(1, size, size);
    const double base = 0.5 - cfg.contrast / 2.0;
    for (std::size_t i = 0; i < image.size(); ++i) {
      const double v =
          base + cfg.contrast * mask[i] + cfg.texture_amplitude * tex[i];
      image[i] = std::clamp(v, 0.0, 1.0);
    }

    TensorMap field = boundary_noise_field(mask, cfg.boundary_band, cfg.rho_max);
    TensorMap noisy = flip_labels(mask, field, rng);

    SyntheticSample s;
    s.image = std::move(image);
    s.clean_mask = std::move(mask);
    s.noisy_label = std::move(noisy);
    s.noise_field = std::move(field);
    s.shape_class = shape;
    s.center_dy = dy;
    s.center_dx = dx;
    s.ood = ood;
    s.index = index;
    return s;
  }
  throw numeric_error("generate_sample: degenerate mask after 8 retries (split " +
                      split_name(split) + ", index " + std::to_string(index) + ")");
}

namespace {

int split_count(const BenchConfig& cfg, Split s) {
  switch (s) {
    case Split::train: return cfg.train_count;
    case Split::val: return cfg.val_count;
    case Split::test_id: return cfg.test_id_count;
    case Split::test_ood: return cfg.test_ood_count;
  }
  return 0;
}

std::string sample_stem(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "s%04d", index);
  return buf;
}

}  // namespace

void generate_dataset(const BenchConfig& cfg, const std::string& out_dir) {
  cfg.validate();
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw io_error("generate_dataset: cannot create " + out_dir);

  {
    std::ofstream cf(out_dir + "/bench_config.json");
    if (!cf) throw io_error("generate_dataset: cannot write config to " + out_dir);
    cf << cfg.to_json() << "\n";
  }

  for (Split split : {Split::train, Split::val, Split::test_id, Split::test_ood}) {
    const std::string dir = out_dir + "/" + split_name(split);
    fs::create_directories(dir, ec);
    if (ec) throw io_error("generate_dataset: cannot create " + dir);
    json manifest;
    manifest["split"] = split_name(split);
    manifest["samples"] = json::array();
    const int n = split_count(cfg, split);
    for (int i = 0; i < n; ++i) {
      SyntheticSample s = generate_sample(cfg, split, i);
      const std::string stem = sample_stem(i);
      json files;
      files["image"] = stem + "_image.dmap";
      files["clean_mask"] = stem + "_clean_mask.dmap";
      files["noisy_label"] = stem + "_noisy_label.dmap";
      files["noise_field"] = stem + "_noise_field.dmap";
      write_dmap(dir + "/" + std::string(files["image"]), s.image);
      write_dmap(dir + "/" + std::string(files["clean_mask"]), s.clean_mask);
      write_dmap(dir + "/" + std::string(files["noisy_label"]), s.noisy_label);
      write_dmap(dir + "/" + std::string(files["noise_field"]), s.noise_field);
      json entry;
      entry["index"] = i;
      entry["files"] = files;
      entry["shape_class"] = shape_class_name(s.shape_class);
      entry["center_offset"] = {s.center_dy, s.center_dx};
      entry["ood"] = s.ood;
      manifest["samples"].push_back(entry);
    }
    manifest["count"] = n;
    std::ofstream mf(dir + "/manifest.json");
    if (!mf) throw io_error("generate_dataset: cannot write manifest in " + dir);
    mf << manifest.dump(1) << "\n";
  }
  validate_dataset(out_dir);
}

void validate_dataset(const std::string& dir) {
  for (Split split : {Split::train, Split::val, Split::test_id, Split::test_ood}) {
    const std::string sdir = dir + "/" + split_name(split);
    std::ifstream mf(sdir + "/manifest.json");
    if (!mf) throw io_error("validate_dataset: missing manifest in " + sdir);
    json manifest;
    try {
      mf >> manifest;
    } catch (const json::parse_error& e) {
      throw format_error("validate_dataset: bad manifest in " + sdir + ": " + e.what());
    }
    const auto& samples = manifest.at("samples");
    if (manifest.at("count").get<int>() != static_cast<int>(samples.size())) {
      throw format_error("validate_dataset: count mismatch in " + sdir);
    }
    std::size_t dmap_files = 0;
    for (const auto& entry : fs::directory_iterator(sdir)) {
      if (entry.path().extension() == ".dmap") ++dmap_files;
    }
    if (dmap_files != samples.size() * 4) {
      throw format_error("validate_dataset: " + sdir + " has " +
                         std::to_string(dmap_files) + " dmap files, manifest lists " +
                         std::to_string(samples.size() * 4));
    }
    for (const auto& s : samples) {
      for (const auto& [role, fname] : s.at("files").items()) {
        if (!fs::exists(sdir + "/" + fname.get<std::string>())) {
          throw format_error("validate_dataset: missing file " +
                             fname.get<std::string>() + " (" + role + ") in " + sdir);
        }
      }
    }
  }
}

std::vector<SyntheticSample> load_split(const std::string& dir, Split split) {
  const std::string sdir = dir + "/" + split_name(split);
  std::ifstream mf(sdir + "/manifest.json");
  if (!mf) throw io_error("load_split: missing manifest in " + sdir);
  json manifest;
  try {
    mf >> manifest;
  } catch (const json::parse_error& e) {
    throw format_error("load_split: bad manifest in " + sdir + ": " + e.what());
  }
  std::vector<SyntheticSample> out;
  for (const auto& entry : manifest.at("samples")) {
    SyntheticSample s;
    const auto& files = entry.at("files");
    s.image = read_dmap(sdir + "/" + files.at("image").get<std::string>());
    s.clean_mask = read_dmap(sdir + "/" + files.at("clean_mask").get<std::string>());
    s.noisy_label = read_dmap(sdir + "/" + files.at("noisy_label").get<std::string>());
    s.noise_field = read_dmap(sdir + "/" + files.at("noise_field").get<std::string>());
    s.shape_class = shape_class_from_name(entry.at("shape_class").get<std::string>());
    s.center_dy = entry.at("center_offset")[0].get<double>();
    s.center_dx = entry.at("center_offset")[1].get<double>();
    s.ood = entry.at("ood").get<bool>();
    s.index = entry.at("index").get<int>();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace duq
