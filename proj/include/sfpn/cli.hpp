#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "sfpn/config.hpp"
#include "sfpn/training.hpp"

namespace sfpn {

/// Entry point of the `sfpn` tool; returns the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Worker cap from SFPN_THREADS (>= 1; 1 when unset or invalid).
int thread_cap();

/// Training data for a run: scenes from `data_dir` when given, otherwise
/// config.data.samples synthetic scenes drawn from `seed`.
Dataset prepare_dataset(const RunConfig& config, std::uint64_t seed,
                        const std::optional<std::filesystem::path>& data_dir = std::nullopt);

/// Builds the network from the config and trains it.
TrainResult run_training(const RunConfig& config, std::uint64_t seed, const Dataset& data,
                         const std::filesystem::path& out_dir, std::optional<Checkpoint> resume = std::nullopt);

enum class SweepAxis { Tau, Threshold, SCConfig, Beta };
SweepAxis sweep_axis_from_string(const std::string& s);
const char* to_string(SweepAxis axis);

struct SweepRow {
  std::string value;
  double map50 = 0.0;
  double map50_95 = 0.0;
  int best_epoch = -1;
  double first_layer_rate = 0.0;
  double firing_rate_mean = 0.0;
  bool diverged = false;
};

/// Applies one grid value to a config ("SxC" strings for the s_c_config axis).
RunConfig apply_sweep_value(RunConfig config, SweepAxis axis, const std::string& value);

/// Trains and evaluates every grid point; points run on up to `threads`
/// workers. Each point gets out_dir/<axis>_<value>/ and sweep.csv collects
/// one row per point in grid order.
std::vector<SweepRow> run_sweep(const RunConfig& config, SweepAxis axis, const std::vector<std::string>& values,
                                std::uint64_t seed, const std::filesystem::path& out_dir, int threads = 1);

}  // namespace sfpn
