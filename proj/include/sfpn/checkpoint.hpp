#pragma once

#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfpn/spikefpn.hpp"

namespace sfpn {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Layout: "SFPN", u8 version, u32 header length, header JSON (canonical),
// u32 tensor count, then per tensor: u32 name length, name, u32 rank,
// rank x u32 dims, little-endian f32 values.
struct Checkpoint {
  nlohmann::json header;
  std::vector<NamedTensor> tensors;

  std::map<std::string, ag::Tensor> by_name() const;
};

inline constexpr std::uint8_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Header "network" holds the spec; the weights are the network state.
Checkpoint make_checkpoint(const SpikeFpn& net, nlohmann::json meta = nlohmann::json::object());
/// Builds a network from the stored spec and loads its state.
SpikeFpn network_from_checkpoint(const Checkpoint& ckpt);

}  // namespace sfpn
