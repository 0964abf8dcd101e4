#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "sfpn/dataset.hpp"
#include "sfpn/detection.hpp"
#include "sfpn/encoding.hpp"
#include "sfpn/scene.hpp"
#include "sfpn/spikefpn.hpp"
#include "sfpn/training.hpp"

namespace sfpn {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline constexpr int kRunConfigVersion = 1;

/// Everything a run depends on. Missing keys keep their defaults; unknown
/// keys are rejected.
struct RunConfig {
  int version = kRunConfigVersion;
  SceneConfig scene;
  EncoderConfig encoder;
  NetworkSpec network;
  TrainConfig train;
  DatasetConfig data;
  AnchorSet anchors = AnchorSet::defaults();

  /// Desk preset: 64x64 scenes, ICS 8, S = C = 3, batch 8, 20% validation, lr 3e-3, box weight 5.
  static RunConfig desk();
  /// Cross-checks sections (geometry, stack shape) and validates each one.
  void validate() const;
};

nlohmann::json to_json(const NetworkSpec& spec);
NetworkSpec network_spec_from_json(const nlohmann::json& j);

nlohmann::json to_json(const RunConfig& config);
RunConfig run_config_from_json(const nlohmann::json& j);

/// Canonical text: sorted keys, two-space indent.
std::string serialize(const RunConfig& config);
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace sfpn
