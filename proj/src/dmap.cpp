#include "duq/dmap.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <vector>

#include "duq/errors.hpp"

namespace duq {

namespace {

constexpr char kMagic[4] = {'D', 'M', 'A', 'P'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

void put_f32(std::string& buf, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(buf, bits);
}

std::uint32_t get_u32(const std::string& buf, std::size_t off) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off])) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 1])) << 8) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 2])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 3])) << 24);
}

float get_f32(const std::string& buf, std::size_t off) {
  const std::uint32_t bits = get_u32(buf, off);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace

void write_dmap(const std::string& path, const TensorMap& map) {
  if (map.empty()) throw usage_error("write_dmap: empty map");
  map.validate("write_dmap " + path);
  std::string buf;
  buf.reserve(20 + map.size() * 4);
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(map.channels()));
  put_u32(buf, static_cast<std::uint32_t>(map.height()));
  put_u32(buf, static_cast<std::uint32_t>(map.width()));
  for (double v : map.data()) put_f32(buf, static_cast<float>(v));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("write_dmap: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw io_error("write_dmap: write failed for " + path);
}

TensorMap read_dmap(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("read_dmap: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());

  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw format_error("read_dmap " + path + ": bad magic at offset 0");
  }
  if (buf.size() < 20) {
    throw format_error("read_dmap " + path + ": truncated header at offset " +
                       std::to_string(buf.size()));
  }
  const std::uint32_t version = get_u32(buf, 4);
  if (version != kVersion) {
    throw format_error("read_dmap " + path + ": unsupported version " +
                       std::to_string(version) + " at offset 4");
  }
  const std::uint32_t c = get_u32(buf, 8);
  const std::uint32_t h = get_u32(buf, 12);
  const std::uint32_t w = get_u32(buf, 16);
  if (c == 0 || h == 0 || w == 0 || c > (1u << 16) || h > (1u << 16) ||
      w > (1u << 16)) {
    throw format_error("read_dmap " + path + ": implausible shape " +
                       std::to_string(c) + "x" + std::to_string(h) + "x" +
                       std::to_string(w));
  }
  const std::size_t count = static_cast<std::size_t>(c) * h * w;
  const std::size_t need = 20 + count * 4;
  if (buf.size() != need) {
    throw format_error("read_dmap " + path + ": payload truncated, have " +
                       std::to_string(buf.size()) + " bytes, need " +
                       std::to_string(need) + " (offset " +
                       std::to_string(buf.size()) + ")");
  }
  std::vector<double> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t off = 20 + i * 4;
    const float f = get_f32(buf, off);
    if (!std::isfinite(f)) {
      throw format_error("read_dmap " + path + ": non-finite value at offset " +
                         std::to_string(off));
    }
    data[i] = static_cast<double>(f);
  }
  return TensorMap(static_cast<int>(c), static_cast<int>(h),
                   static_cast<int>(w), std::move(data));
}

void write_pgm(const std::string& path, const TensorMap& map) {
  const int rows = map.channels() * map.height();
  std::string buf = "P5\n" + std::to_string(map.width()) + " " +
                    std::to_string(rows) + "\n255\n";
  buf.reserve(buf.size() + map.size());
  for (double v : map.data()) {
    double c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    buf.push_back(static_cast<char>(static_cast<unsigned char>(
        std::lround(255.0 * c))));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("write_pgm: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw io_error("write_pgm: write failed for " + path);
}

}  // namespace duq
