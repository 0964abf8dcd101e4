#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sfpn/encoding.hpp"
#include "sfpn/event_io.hpp"
#include "sfpn/scene.hpp"

namespace sfpn {

struct DatasetConfig {
  int samples = 500;
  double val_fraction = 0.1;

  void validate() const;
};

/// One encoded stack and the boxes at its label time.
struct Sample {
  std::string id;
  FrameStack stack;
  std::vector<GtBox> boxes;
};

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> val;
};

/// Scene i uses seed mix_seed(seed, i); the sample is taken at the end of
/// the scene, which must leave a full encoder history.
std::vector<Sample> synthesize_samples(const SceneConfig& scene, const EncoderConfig& encoder,
                                       const DatasetConfig& data, std::uint64_t seed);

/// The last round(n * val_fraction) samples (at least one) form the
/// validation split.
Dataset split_dataset(std::vector<Sample> samples, double val_fraction);

/// Writes scene_XXXX.events.csv / scene_XXXX.labels.csv for every scene.
void write_scenes(const std::filesystem::path& dir, const SceneConfig& scene, int count, std::uint64_t seed);

/// Reads a directory written by write_scenes and encodes each scene at its
/// last label time.
std::vector<Sample> load_samples(const std::filesystem::path& dir, Geometry geometry, const EncoderConfig& encoder);

}  // namespace sfpn
