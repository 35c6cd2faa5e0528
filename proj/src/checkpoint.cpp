#include "duq/checkpoint.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include "duq/errors.hpp"

using nlohmann::json;

namespace duq {

namespace {

constexpr char kMagic[4] = {'D', 'U', 'Q', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& buf, std::uint32_t v) {
  buf.push_back(static_cast<char>(v & 0xff));
  buf.push_back(static_cast<char>((v >> 8) & 0xff));
  buf.push_back(static_cast<char>((v >> 16) & 0xff));
  buf.push_back(static_cast<char>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::string& buf, std::size_t off) {
  return static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off])) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 1])) << 8) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 2])) << 16) |
         (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[off + 3])) << 24);
}

}  // namespace

void save_checkpoint(
    const std::string& path, const json& header,
    const std::vector<std::pair<std::string, const ParamStore*>>& stores) {
  json full = header;
  full["format_version"] = kVersion;
  json jstores = json::array();
  for (const auto& [name, store] : stores) {
    json js;
    js["name"] = name;
    js["step_count"] = store->step_count();
    json blocks = json::array();
    for (std::size_t b = 0; b < store->block_count(); ++b) {
      const auto& blk = store->block(static_cast<int>(b));
      blocks.push_back({{"name", blk.name},
                        {"size", blk.values.size()},
                        {"learnable", blk.learnable}});
    }
    js["blocks"] = blocks;
    jstores.push_back(js);
  }
  full["stores"] = jstores;
  const std::string header_text = full.dump();

  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  put_u32(buf, static_cast<std::uint32_t>(header_text.size()));
  buf.append(header_text);
  for (const auto& [name, store] : stores) {
    for (std::size_t b = 0; b < store->block_count(); ++b) {
      for (double v : store->block(static_cast<int>(b)).values) {
        const float f = static_cast<float>(v);
        std::uint32_t bits;
        std::memcpy(&bits, &f, 4);
        put_u32(buf, bits);
      }
    }
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("save_checkpoint: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw io_error("save_checkpoint: write failed for " + path);
}

CheckpointData load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("load_checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)),
                  std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw format_error("load_checkpoint " + path + ": bad magic");
  }
  if (get_u32(buf, 4) != kVersion) {
    throw format_error("load_checkpoint " + path + ": unsupported version");
  }
  const std::uint32_t hlen = get_u32(buf, 8);
  if (buf.size() < 12 + static_cast<std::size_t>(hlen)) {
    throw format_error("load_checkpoint " + path + ": truncated header");
  }
  CheckpointData data;
  try {
    data.header = json::parse(buf.substr(12, hlen));
  } catch (const json::parse_error& e) {
    throw format_error("load_checkpoint " + path + ": bad header JSON: " +
                       e.what());
  }
  std::size_t off = 12 + hlen;
  for (const auto& js : data.header.at("stores")) {
    std::vector<std::pair<std::string, std::vector<double>>> blocks;
    for (const auto& jb : js.at("blocks")) {
      const std::size_t size = jb.at("size").get<std::size_t>();
      if (off + size * 4 > buf.size()) {
        throw format_error("load_checkpoint " + path +
                           ": truncated payload at offset " + std::to_string(off));
      }
      std::vector<double> values(size);
      for (std::size_t i = 0; i < size; ++i) {
        const std::uint32_t bits = get_u32(buf, off + i * 4);
        float f;
        std::memcpy(&f, &bits, 4);
        if (!std::isfinite(f)) {
          throw format_error("load_checkpoint " + path +
                             ": non-finite parameter at offset " +
                             std::to_string(off + i * 4));
        }
        values[i] = static_cast<double>(f);
      }
      off += size * 4;
      blocks.emplace_back(jb.at("name").get<std::string>(), std::move(values));
    }
    data.stores.emplace_back(js.at("name").get<std::string>(), std::move(blocks));
  }
  if (off != buf.size()) {
    throw format_error("load_checkpoint " + path + ": trailing bytes after " +
                       std::to_string(off));
  }
  return data;
}

void fill_store(const CheckpointData& data, const std::string& store_name,
                ParamStore& store) {
  const auto it = std::find_if(data.stores.begin(), data.stores.end(),
                               [&](const auto& s) { return s.first == store_name; });
  if (it == data.stores.end()) {
    throw format_error("fill_store: checkpoint has no store '" + store_name + "'");
  }
  const auto& blocks = it->second;
  if (blocks.size() != store.block_count()) {
    throw format_error("fill_store: store '" + store_name + "' has " +
                       std::to_string(blocks.size()) + " blocks, model expects " +
                       std::to_string(store.block_count()));
  }
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto& blk = store.block(static_cast<int>(b));
    if (blocks[b].first != blk.name || blocks[b].second.size() != blk.values.size()) {
      throw format_error("fill_store: block mismatch at index " +
                         std::to_string(b) + " ('" + blocks[b].first + "' vs '" +
                         blk.name + "')");
    }
    blk.values = blocks[b].second;
  }
}

void quantize_store(ParamStore& store) {
  for (std::size_t b = 0; b < store.block_count(); ++b) {
    for (auto& v : store.block(static_cast<int>(b)).values) {
      v = static_cast<double>(static_cast<float>(v));
    }
  }
}

}  // namespace duq
