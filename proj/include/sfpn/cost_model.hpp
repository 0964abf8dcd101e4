#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfpn/spikefpn.hpp"

namespace sfpn {

inline constexpr double kAddEnergyPj = 0.9;
inline constexpr double kMacEnergyPj = 4.6;

struct LayerFiring {
  std::string name;
  std::vector<double> rate_per_step;
  double rate = 0.0;  // mean over steps
  std::size_t neurons = 0;
};

struct ConvCost {
  std::string name;
  double s = 0.0;  // mean input activity per step
  std::uint64_t A = 0;
  double ops = 0.0;  // s * T * A for spiking inputs, A MACs for head outputs
  double energy_pj = 0.0;
  bool mac = false;
};

struct FiringReport {
  int time_steps = 0;
  std::vector<LayerFiring> layers;
  std::vector<ConvCost> convs;
  double mean_rate = 0.0;  // neuron-count weighted
  double total_adds = 0.0;
  double head_macs = 0.0;

  const LayerFiring* layer(const std::string& name) const;
};

/// Averages repeated entries (one per recorded forward pass) by name.
FiringReport record_firing(const ActivityRecord& record, int time_steps);

/// A = Cout * H' * W' * Cin * k * k per conv layer.
std::vector<std::pair<std::string, std::uint64_t>> dense_additions(const SpikeFpn& net);

struct EnergyEstimate {
  double add_joules = 0.0;
  double mac_joules = 0.0;
  double total_joules() const { return add_joules + mac_joules; }
};

EnergyEstimate energy_estimate(double additions, double macs);
EnergyEstimate energy_estimate(const FiringReport& report);

/// {per_layer: [{name, s, A, ops, energy_pj}], firing: [...], totals: {...}}
nlohmann::json report_to_json(const FiringReport& report);
/// name,kind,s,A,ops,energy_pj rows plus one row per spiking layer rate.
void write_report_csv(const std::filesystem::path& path, const FiringReport& report);

}  // namespace sfpn
