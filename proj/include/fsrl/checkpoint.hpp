#pragma once

#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fsrl/adapter.hpp"
#include "fsrl/lm.hpp"
#include "fsrl/sae.hpp"
#include "fsrl/tensor.hpp"

namespace fsrl {

// Checkpoint file layout (little-endian):
//   bytes 0..7   magic "FSRLCKP1"
//   bytes 8..11  u32 format version (= 1)
//   bytes 12..15 u32 manifest length
//   manifest     UTF-8 JSON: format_version, config (snapshot of the run
//                config that produced the artifact), extra (string map),
//                tensors [{name, shape, dtype:"f32", offset, count}],
//                payload_fnv1a64 (hex)
//   payload      concatenated 32-bit float tensor data
// Values round-trip exactly at 32-bit precision; the payload hash and sizes
// are verified on load.

void save_checkpoint(const std::string& path,
                     std::span<const std::pair<std::string, Tensor>> tensors,
                     const std::string& config_snapshot_json,
                     const std::map<std::string, std::string>& extra = {});

struct LoadedCheckpoint {
  std::vector<std::pair<std::string, Tensor>> tensors;
  std::string config_snapshot_json;
  std::map<std::string, std::string> extra;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

// Typed artifact helpers; structural dimensions ride in the manifest extras.
void save_lm(const std::string& path, const LM& lm, const std::string& config_snapshot_json);
LM load_lm(const std::string& path);  // returned frozen

void save_sae(const std::string& path, const SparseAutoencoder& sae,
              const std::string& config_snapshot_json);
SparseAutoencoder load_sae(const std::string& path);

void save_adapter(const std::string& path, const SteeringAdapter& adapter,
                  const std::string& config_snapshot_json);
SteeringAdapter load_adapter(const std::string& path);

}  // namespace fsrl
