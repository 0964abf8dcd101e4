#include "sfpn/scene.hpp"

#include <algorithm>
#include <cmath>

#include "sfpn/random.hpp"

namespace sfpn {

void SceneConfig::validate() const {
  if (geometry.width <= 0 || geometry.height <= 0) throw ValidationError("scene geometry must be positive");
  if (duration_us <= 0) throw ValidationError("scene duration must be positive (empty stream)");
  if (num_objects < 0) throw ValidationError("num_objects must be >= 0");
  if (num_objects == 0 && noise_rate <= 0.0) {
    throw ValidationError("degenerate scene: no objects and no noise would produce an empty stream");
  }
  if (min_speed < 0.0 || max_speed < min_speed) throw ValidationError("invalid speed range");
  if (events_per_edge_pixel < 0.0 || noise_rate < 0.0) throw ValidationError("rates must be non-negative");
  if (step_us <= 0 || label_interval_us <= 0 || label_interval_us % step_us != 0) {
    throw ValidationError("label_interval_us must be a positive multiple of step_us");
  }
  if (car_fraction < 0.0 || car_fraction > 1.0) throw ValidationError("car_fraction must lie in [0,1]");
  for (const auto* s : {&car_size, &pedestrian_size}) {
    if (s->min_w <= 0.0 || s->min_h <= 0.0 || s->max_w < s->min_w || s->max_h < s->min_h) {
      throw ValidationError("invalid object size range");
    }
    if (s->max_w >= geometry.width || s->max_h >= geometry.height) {
      throw ValidationError("object size range does not fit the sensor");
    }
  }
}

std::vector<MovingObject> spawn_objects(std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  Rng rng(mix_seed(seed, 0));
  std::vector<MovingObject> objects;
  objects.reserve(config.num_objects);
  for (int i = 0; i < config.num_objects; ++i) {
    MovingObject o;
    o.class_id = rng.bernoulli(config.car_fraction) ? 0 : 1;
    const auto& size = o.class_id == 0 ? config.car_size : config.pedestrian_size;
    o.w = rng.uniform(size.min_w, size.max_w);
    o.h = rng.uniform(size.min_h, size.max_h);
    o.x = rng.uniform(0.0, config.geometry.width - o.w);
    o.y = rng.uniform(0.0, config.geometry.height - o.h);
    double speed = rng.uniform(config.min_speed, config.max_speed);
    double heading = rng.uniform(0.0, 2.0 * M_PI);
    o.vx = speed * std::cos(heading);
    o.vy = speed * std::sin(heading);
    objects.push_back(o);
  }
  return objects;
}

void advance(MovingObject& o, double dt_s, Geometry g) {
  auto reflect = [](double& pos, double& vel, double extent, double limit, double dt) {
    pos += vel * dt;
    double hi = limit - extent;
    // Reflect until inside; a single pass suffices unless the step is huge.
    for (int guard = 0; guard < 8 && (pos < 0.0 || pos > hi); ++guard) {
      if (pos < 0.0) {
        pos = -pos;
        vel = std::abs(vel);
      } else if (pos > hi) {
        pos = 2.0 * hi - pos;
        vel = -std::abs(vel);
      }
    }
    pos = std::clamp(pos, 0.0, hi);
  };
  reflect(o.x, o.vx, o.w, g.width, dt_s);
  reflect(o.y, o.vy, o.h, g.height, dt_s);
}

namespace {

// Pixel (i, j) is covered when its center lies inside the rectangle.
void rasterize(const std::vector<MovingObject>& objects, Geometry g, std::vector<std::uint8_t>& bright) {
  std::fill(bright.begin(), bright.end(), 0);
  for (const auto& o : objects) {
    int x0 = std::max(0, static_cast<int>(std::ceil(o.x - 0.5)));
    int x1 = std::min(g.width, static_cast<int>(std::ceil(o.x + o.w - 0.5)));
    int y0 = std::max(0, static_cast<int>(std::ceil(o.y - 0.5)));
    int y1 = std::min(g.height, static_cast<int>(std::ceil(o.y + o.h - 0.5)));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) bright[static_cast<std::size_t>(y) * g.width + x] = 1;
    }
  }
}

GtBox box_of(const MovingObject& o, std::int64_t t) { return GtBox{t, o.class_id, o.x, o.y, o.w, o.h}; }

}  // namespace

Scene render_scene(std::vector<MovingObject> objects, const SceneConfig& config, std::uint64_t noise_seed) {
  config.validate();
  const Geometry g = config.geometry;
  Rng rng(noise_seed);
  Scene scene;
  scene.stream.geometry = g;

  const std::size_t pixels = static_cast<std::size_t>(g.width) * g.height;
  std::vector<std::uint8_t> prev(pixels), cur(pixels);
  rasterize(objects, g, prev);

  const double dt_s = static_cast<double>(config.step_us) * 1e-6;
  const int whole = static_cast<int>(std::floor(config.events_per_edge_pixel));
  const double frac = config.events_per_edge_pixel - whole;
  const double noise_mean = config.noise_rate * static_cast<double>(pixels) * dt_s;

  auto& events = scene.stream.events;
  for (std::int64_t t0 = 0; t0 < config.duration_us; t0 += config.step_us) {
    const std::int64_t t1 = std::min(t0 + config.step_us, config.duration_us);
    for (auto& o : objects) advance(o, static_cast<double>(t1 - t0) * 1e-6, g);
    rasterize(objects, g, cur);

    for (std::size_t i = 0; i < pixels; ++i) {
      if (cur[i] == prev[i]) continue;
      int polarity = cur[i] ? 1 : -1;
      int count = whole + (frac > 0.0 && rng.bernoulli(frac) ? 1 : 0);
      for (int k = 0; k < count; ++k) {
        auto t = t0 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(t1 - t0)));
        events.push_back(Event{t, static_cast<int>(i % g.width), static_cast<int>(i / g.width), polarity});
      }
    }
    int noise = rng.poisson(noise_mean);
    for (int k = 0; k < noise; ++k) {
      auto t = t0 + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(t1 - t0)));
      int x = static_cast<int>(rng.below(g.width));
      int y = static_cast<int>(rng.below(g.height));
      events.push_back(Event{t, x, y, rng.bernoulli(0.5) ? 1 : -1});
    }
    std::swap(prev, cur);

    if (t1 % config.label_interval_us == 0) {
      for (const auto& o : objects) scene.labels.push_back(box_of(o, t1));
    }
  }
  std::stable_sort(events.begin(), events.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
  return scene;
}

Scene synthesize_scene(std::uint64_t seed, const SceneConfig& config) {
  return render_scene(spawn_objects(seed, config), config, mix_seed(seed, 1));
}

}  // namespace sfpn
