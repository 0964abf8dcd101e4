#include "sfpn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "sfpn/random.hpp"

namespace sfpn {

namespace {

std::string scene_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04d", i);
  return buf;
}

Sample sample_at_end(std::string id, const EventStream& stream, const std::vector<GtBox>& labels,
                     const EncoderConfig& encoder) {
  if (labels.empty()) throw std::runtime_error(id + ": scene has no labels");
  const std::int64_t t = std::max_element(labels.begin(), labels.end(), [](const GtBox& a, const GtBox& b) {
                           return a.t < b.t;
                         })->t;
  Sample s;
  s.id = std::move(id);
  s.stack = encode(stream, t, encoder);
  for (const auto& b : labels) {
    if (b.t == t) s.boxes.push_back(b);
  }
  return s;
}

}  // namespace

void DatasetConfig::validate() const {
  if (samples < 2) throw std::invalid_argument("dataset needs at least two samples");
  if (!(val_fraction > 0.0 && val_fraction < 1.0)) throw std::invalid_argument("val_fraction must lie in (0, 1)");
}

std::vector<Sample> synthesize_samples(const SceneConfig& scene, const EncoderConfig& encoder,
                                       const DatasetConfig& data, std::uint64_t seed) {
  data.validate();
  scene.validate();
  encoder.validate();
  std::vector<Sample> out;
  out.reserve(data.samples);
  for (int i = 0; i < data.samples; ++i) {
    Scene s = synthesize_scene(mix_seed(seed, i), scene);
    out.push_back(sample_at_end(scene_name(i), s.stream, s.labels, encoder));
  }
  return out;
}

Dataset split_dataset(std::vector<Sample> samples, double val_fraction) {
  const auto n = samples.size();
  std::size_t n_val = static_cast<std::size_t>(std::lround(n * val_fraction));
  n_val = std::clamp<std::size_t>(n_val, 1, n - 1);
  Dataset d;
  d.val.assign(std::make_move_iterator(samples.end() - n_val), std::make_move_iterator(samples.end()));
  samples.resize(n - n_val);
  d.train = std::move(samples);
  return d;
}

void write_scenes(const std::filesystem::path& dir, const SceneConfig& scene, int count, std::uint64_t seed) {
  scene.validate();
  std::filesystem::create_directories(dir);
  for (int i = 0; i < count; ++i) {
    Scene s = synthesize_scene(mix_seed(seed, i), scene);
    save_events(dir / (scene_name(i) + ".events.csv"), s.stream);
    save_labels(dir / (scene_name(i) + ".labels.csv"), s.labels);
  }
}

std::vector<Sample> load_samples(const std::filesystem::path& dir, Geometry geometry, const EncoderConfig& encoder) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("data directory " + dir.string() + " not found");
  std::vector<std::string> names;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string f = entry.path().filename().string();
    const std::string suffix = ".events.csv";
    if (f.size() > suffix.size() && f.compare(f.size() - suffix.size(), suffix.size(), suffix) == 0) {
      names.push_back(f.substr(0, f.size() - suffix.size()));
    }
  }
  if (names.empty()) throw std::runtime_error("no *.events.csv files in " + dir.string());
  std::sort(names.begin(), names.end());
  std::vector<Sample> out;
  for (const auto& name : names) {
    EventStream stream = load_events(dir / (name + ".events.csv"), geometry);
    auto labels = load_labels(dir / (name + ".labels.csv"), geometry);
    out.push_back(sample_at_end(name, stream, labels, encoder));
  }
  return out;
}

}  // namespace sfpn
