#pragma once
// Model snapshots: JSON manifest (config, iteration, tensor directory) next to
// a raw little-endian float32 blob. Save -> load -> save must reproduce both
// files byte for byte.

#include <memory>
#include <string>

#include "dosegen/net.hpp"

namespace dosegen {

// Writes <json_path> and a sibling blob with the same stem and ".raw".
// Optimizer moments are stored alongside the weights (names prefixed
// "opt.m." / "opt.v.") when include_optimizer is set and they exist.
// run_config_json, when non-empty, must be a JSON object; it is embedded in
// the manifest so inference can recover the training-time settings.
void save_checkpoint(const std::string& json_path, const ModelConfig& cfg,
                     int iteration, ParamStore<float>& params,
                     bool include_optimizer,
                     const std::string& run_config_json = "");

struct LoadedCheckpoint {
  ModelConfig config;
  int iteration = 0;
  std::unique_ptr<FusionDenoiser<float>> model;
  bool has_optimizer = false;
  std::string run_config_json;  // empty when the manifest carries none
};

LoadedCheckpoint load_checkpoint(const std::string& json_path);

}  // namespace dosegen
