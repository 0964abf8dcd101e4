#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "sfpn/event_io.hpp"

namespace sfpn {

struct SizeRange {
  double min_w = 0.0, max_w = 0.0;
  double min_h = 0.0, max_h = 0.0;
};

/// Parameters of the moving-rectangle event simulator.
struct SceneConfig {
  Geometry geometry{64, 64};
  std::int64_t duration_us = 180'000;
  int num_objects = 2;
  double min_speed = 60.0;   // px/s
  double max_speed = 180.0;  // px/s
  double events_per_edge_pixel = 1.0;
  double noise_rate = 0.5;  // events per pixel per second
  std::int64_t label_interval_us = 60'000;
  std::int64_t step_us = 1'000;
  double car_fraction = 0.5;
  SizeRange car_size{14.0, 28.0, 10.0, 18.0};
  SizeRange pedestrian_size{5.0, 8.0, 12.0, 20.0};

  void validate() const;
};

/// A bright rectangle in linear motion; bounces off the sensor borders.
struct MovingObject {
  int class_id = 0;
  double x = 0.0, y = 0.0;  // top-left, px
  double w = 0.0, h = 0.0;
  double vx = 0.0, vy = 0.0;  // px/s
};

struct Scene {
  EventStream stream;
  std::vector<GtBox> labels;
};

std::vector<MovingObject> spawn_objects(std::uint64_t seed, const SceneConfig& config);

/// Emits events where the rendered brightness changes between simulation
/// steps: +1 where a pixel becomes covered, -1 where it is uncovered.
Scene render_scene(std::vector<MovingObject> objects, const SceneConfig& config, std::uint64_t noise_seed);

/// Deterministic in (seed, config).
Scene synthesize_scene(std::uint64_t seed, const SceneConfig& config);

/// Advances one object by dt seconds with reflection at the borders.
void advance(MovingObject& object, double dt_s, Geometry geometry);

}  // namespace sfpn
