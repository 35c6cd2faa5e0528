#pragma once

#include <string>
#include <utility>
#include <vector>

#include "duq/param_store.hpp"
#include "json.hpp"

namespace duq {

// DUQC checkpoint: "DUQC" magic, u32 LE version=1, u32 LE JSON byte length,
// JSON header, then every block of every store as float32 LE values in
// registration order. The header records the store/block layout plus
// arbitrary metadata (method, architecture, training config, seed).

void save_checkpoint(
    const std::string& path, const nlohmann::json& header,
    const std::vector<std::pair<std::string, const ParamStore*>>& stores);

struct CheckpointData {
  nlohmann::json header;
  // store name -> (block name, float32-rounded values)
  std::vector<std::pair<std::string,
                        std::vector<std::pair<std::string, std::vector<double>>>>>
      stores;
};

CheckpointData load_checkpoint(const std::string& path);

// Copies the named store's blocks into an already-constructed ParamStore,
// validating block names and sizes.
void fill_store(const CheckpointData& data, const std::string& store_name,
                ParamStore& store);

// Rounds every parameter to float32 in place, so in-memory evaluation
// matches a save/load round trip exactly.
void quantize_store(ParamStore& store);

}  // namespace duq
