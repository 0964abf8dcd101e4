#include "sfpn/event_io.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string_view>

namespace sfpn {
namespace {

constexpr std::array<char, 4> kEventMagic = {'E', 'V', 'T', '1'};
constexpr std::size_t kBinaryRecordSize = 4 + 2 + 2 + 1;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_fields(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma == std::string_view::npos ? line.npos : comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view field, std::size_t line, const char* what) {
  T value{};
  auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), value);
  if (ec != std::errc() || ptr != field.data() + field.size() || field.empty()) {
    throw ParseError("malformed " + std::string(what) + " field '" + std::string(field) + "'", line);
  }
  return value;
}

bool is_header(std::string_view line) {
  line = trim(line);
  return !line.empty() && !(line.front() >= '0' && line.front() <= '9') && line.front() != '-' &&
         line.front() != '+' && line.front() != '.';
}

std::vector<char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Calls fn(line_number, line) for every non-empty data line.
template <typename Fn>
void for_each_csv_record(const std::vector<char>& bytes, Fn&& fn) {
  std::string_view text(bytes.data(), bytes.size());
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    auto line = text.substr(pos, nl == text.npos ? text.npos : nl - pos);
    pos = nl == text.npos ? text.size() : nl + 1;
    ++line_no;
    if (trim(line).empty()) continue;
    if (line_no == 1 && is_header(line)) continue;
    fn(line_no, line);
  }
}

int polarity_from_disk(long raw, std::size_t line) {
  if (raw == 0) return -1;
  if (raw == 1) return 1;
  throw ParseError("polarity must be 0 or 1, got " + std::to_string(raw), line);
}

void check_in_geometry(const Event& e, Geometry g, std::size_t record) {
  if (!g.contains(e.x, e.y)) {
    throw ValidationError("event (" + std::to_string(e.x) + "," + std::to_string(e.y) + ") at record " +
                          std::to_string(record) + " is outside " + std::to_string(g.width) + "x" +
                          std::to_string(g.height));
  }
}

template <typename T>
T read_le(const char* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    v |= static_cast<T>(static_cast<std::uint8_t>(p[i])) << (8 * i);
  }
  return v;
}

template <typename T>
void write_le(std::ostream& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.put(static_cast<char>((v >> (8 * i)) & 0xff));
  }
}

}  // namespace

EventStream load_events(const std::filesystem::path& path, Geometry geometry) {
  auto bytes = read_file(path);
  EventStream stream;
  stream.geometry = geometry;

  if (bytes.size() >= 4 && std::equal(kEventMagic.begin(), kEventMagic.end(), bytes.begin())) {
    std::size_t payload = bytes.size() - 4;
    if (payload % kBinaryRecordSize != 0) {
      throw ParseError("truncated binary event record at byte offset " +
                           std::to_string(4 + payload / kBinaryRecordSize * kBinaryRecordSize),
                       0);
    }
    std::size_t n = payload / kBinaryRecordSize;
    stream.events.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
      const char* rec = bytes.data() + 4 + i * kBinaryRecordSize;
      Event e;
      e.t = read_le<std::uint32_t>(rec);
      e.x = read_le<std::uint16_t>(rec + 4);
      e.y = read_le<std::uint16_t>(rec + 6);
      e.p = polarity_from_disk(static_cast<std::uint8_t>(rec[8]), i + 1);
      check_in_geometry(e, geometry, i + 1);
      stream.events.push_back(e);
    }
  } else {
    for_each_csv_record(bytes, [&](std::size_t line_no, std::string_view line) {
      auto f = split_fields(line);
      if (f.size() != 4) throw ParseError("expected 4 fields, got " + std::to_string(f.size()), line_no);
      Event e;
      e.t = parse_number<std::int64_t>(f[0], line_no, "t_us");
      e.x = parse_number<int>(f[1], line_no, "x");
      e.y = parse_number<int>(f[2], line_no, "y");
      e.p = polarity_from_disk(parse_number<long>(f[3], line_no, "p"), line_no);
      if (e.t < 0) throw ParseError("negative timestamp", line_no);
      check_in_geometry(e, geometry, line_no);
      stream.events.push_back(e);
    });
  }

  std::stable_sort(stream.events.begin(), stream.events.end(),
                   [](const Event& a, const Event& b) { return a.t < b.t; });
  return stream;
}

void save_events(const std::filesystem::path& path, const EventStream& stream, EventFileFormat format) {
  validate_stream(stream);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  if (format == EventFileFormat::Csv) {
    out << "t_us,x,y,p\n";
    for (const auto& e : stream.events) {
      out << e.t << ',' << e.x << ',' << e.y << ',' << (e.p > 0 ? 1 : 0) << '\n';
    }
  } else {
    out.write(kEventMagic.data(), kEventMagic.size());
    for (const auto& e : stream.events) {
      if (e.t > 0xffffffffLL || e.x > 0xffff || e.y > 0xffff) {
        throw ValidationError("event does not fit the packed binary layout");
      }
      write_le<std::uint32_t>(out, static_cast<std::uint32_t>(e.t));
      write_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.x));
      write_le<std::uint16_t>(out, static_cast<std::uint16_t>(e.y));
      write_le<std::uint8_t>(out, e.p > 0 ? 1 : 0);
    }
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

bool clamp_box(GtBox& box, Geometry geometry) {
  double x0 = std::clamp(box.x, 0.0, static_cast<double>(geometry.width));
  double y0 = std::clamp(box.y, 0.0, static_cast<double>(geometry.height));
  double x1 = std::clamp(box.x + box.w, 0.0, static_cast<double>(geometry.width));
  double y1 = std::clamp(box.y + box.h, 0.0, static_cast<double>(geometry.height));
  box.x = x0;
  box.y = y0;
  box.w = x1 - x0;
  box.h = y1 - y0;
  return box.w > 0.0 && box.h > 0.0;
}

std::vector<GtBox> load_labels(const std::filesystem::path& path, Geometry geometry,
                               std::vector<std::string>* warnings) {
  auto bytes = read_file(path);
  std::vector<GtBox> boxes;
  for_each_csv_record(bytes, [&](std::size_t line_no, std::string_view line) {
    auto f = split_fields(line);
    if (f.size() != 6) throw ParseError("expected 6 fields, got " + std::to_string(f.size()), line_no);
    GtBox b;
    b.t = parse_number<std::int64_t>(f[0], line_no, "t_us");
    b.class_id = parse_number<int>(f[1], line_no, "class_id");
    b.x = parse_number<double>(f[2], line_no, "x");
    b.y = parse_number<double>(f[3], line_no, "y");
    b.w = parse_number<double>(f[4], line_no, "w");
    b.h = parse_number<double>(f[5], line_no, "h");
    if (b.class_id < 0) throw ValidationError("negative class_id at line " + std::to_string(line_no));
    if (!(b.w > 0.0) || !(b.h > 0.0)) {
      throw ValidationError("box with non-positive extent at line " + std::to_string(line_no));
    }
    GtBox before = b;
    if (!clamp_box(b, geometry)) {
      throw ValidationError("box at line " + std::to_string(line_no) + " lies outside the sensor");
    }
    if (warnings && !(before == b)) {
      std::ostringstream msg;
      msg << "line " << line_no << ": box clamped to sensor (w " << before.w << " -> " << b.w << ", h "
          << before.h << " -> " << b.h << ")";
      warnings->push_back(msg.str());
    }
    boxes.push_back(b);
  });
  return boxes;
}

void save_labels(const std::filesystem::path& path, const std::vector<GtBox>& boxes) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "t_us,class_id,x,y,w,h\n";
  out.precision(17);
  for (const auto& b : boxes) {
    out << b.t << ',' << b.class_id << ',' << b.x << ',' << b.y << ',' << b.w << ',' << b.h << '\n';
  }
}

std::map<std::int64_t, std::vector<GtBox>> group_by_time(const std::vector<GtBox>& boxes) {
  std::map<std::int64_t, std::vector<GtBox>> out;
  for (const auto& b : boxes) out[b.t].push_back(b);
  return out;
}

void validate_stream(const EventStream& stream) {
  std::int64_t last = 0;
  for (std::size_t i = 0; i < stream.events.size(); ++i) {
    const auto& e = stream.events[i];
    if (e.p != 1 && e.p != -1) throw ValidationError("polarity must be +1 or -1 at event " + std::to_string(i));
    check_in_geometry(e, stream.geometry, i);
    if (e.t < 0) throw ValidationError("negative timestamp at event " + std::to_string(i));
    if (i > 0 && e.t < last) throw ValidationError("events not sorted at index " + std::to_string(i));
    last = e.t;
  }
}

}  // namespace sfpn
