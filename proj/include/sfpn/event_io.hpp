#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace sfpn {

struct Geometry {
  int width = 0;
  int height = 0;

  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  bool operator==(const Geometry&) const = default;
};

/// One sensor event. Polarity is signed in memory: +1 (ON) or -1 (OFF).
struct Event {
  std::int64_t t = 0;  // microseconds
  int x = 0;
  int y = 0;
  int p = 1;

  bool operator==(const Event&) const = default;
};

/// Time-ordered events of one sensor.
struct EventStream {
  Geometry geometry;
  std::vector<Event> events;
};

/// Ground-truth box; (x, y) is the top-left corner in pixels.
struct GtBox {
  std::int64_t t = 0;
  int class_id = 0;
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;

  bool operator==(const GtBox&) const = default;
};

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class ValidationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class EventFileFormat { Csv, Binary };

// Reads CSV (`t_us,x,y,p`) or packed binary (magic EVT1); the format is
// detected from the first four bytes. On-disk polarity 0 maps to -1.
// Out-of-order records are stably sorted by t.
EventStream load_events(const std::filesystem::path& path, Geometry geometry);

void save_events(const std::filesystem::path& path, const EventStream& stream,
                 EventFileFormat format = EventFileFormat::Csv);

// Boxes extending past the sensor are clamped; a message is appended to
// `warnings` (when given) for every clamped box.
std::vector<GtBox> load_labels(const std::filesystem::path& path, Geometry geometry,
                               std::vector<std::string>* warnings = nullptr);

void save_labels(const std::filesystem::path& path, const std::vector<GtBox>& boxes);

/// Clamps a box to the sensor; returns false if nothing positive is left.
bool clamp_box(GtBox& box, Geometry geometry);

/// Boxes keyed by timestamp; input order is kept within a key.
std::map<std::int64_t, std::vector<GtBox>> group_by_time(const std::vector<GtBox>& boxes);

void validate_stream(const EventStream& stream);

}  // namespace sfpn
