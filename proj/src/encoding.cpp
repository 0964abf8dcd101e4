#include "sfpn/encoding.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <string>

namespace sfpn {
namespace {

std::int8_t sign_of(int v) { return static_cast<std::int8_t>((v > 0) - (v < 0)); }

auto lower_time(const std::vector<Event>& events, std::int64_t t) {
  return std::lower_bound(events.begin(), events.end(), t, [](const Event& e, std::int64_t v) { return e.t < v; });
}

void check_geometry(const EventStream& stream, const EncoderConfig& config) {
  if (stream.geometry.width != config.width || stream.geometry.height != config.height) {
    throw ValidationError("stream geometry " + std::to_string(stream.geometry.width) + "x" +
                          std::to_string(stream.geometry.height) + " does not match encoder " +
                          std::to_string(config.width) + "x" + std::to_string(config.height));
  }
}

constexpr std::array<char, 4> kStackMagic = {'S', 'T', 'K', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32(std::istream& in) {
  std::array<unsigned char, 4> b{};
  in.read(reinterpret_cast<char*>(b.data()), 4);
  if (!in) throw std::runtime_error("truncated stack header");
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void EncoderConfig::validate() const {
  if (frames_per_stack < 1 || stacks < 1) throw ValidationError("stacks and frames_per_stack must be >= 1");
  if (height <= 0 || width <= 0) throw ValidationError("encoder geometry must be positive");
  if (mode == StackingMode::Sbt) {
    if (delta_t_us <= 0) throw ValidationError("delta_t must be positive");
    if (delta_t_us % frames_per_stack != 0) {
      throw ValidationError("delta_t (" + std::to_string(delta_t_us) + " us) is not divisible by " +
                            std::to_string(frames_per_stack) + " frames");
    }
  } else if (events_per_frame < 1) {
    throw ValidationError("events_per_frame must be >= 1");
  }
}

FrameStack encode_sbt(const EventStream& stream, std::int64_t t_label, const EncoderConfig& config) {
  config.validate();
  if (config.mode != StackingMode::Sbt) throw ValidationError("encode_sbt called with a non-SBT config");
  check_geometry(stream, config);
  const std::int64_t start = t_label - config.history_us();
  if (start < 0) {
    throw InsufficientHistory("label at " + std::to_string(t_label) + " us lacks history; earliest admissible is " +
                              std::to_string(config.history_us()) + " us");
  }

  const int total_frames = config.stacks * config.frames_per_stack;
  const std::int64_t window = config.frame_window_us();
  const std::size_t plane = static_cast<std::size_t>(config.height) * config.width;
  std::vector<int> sums(plane * total_frames, 0);

  const auto& events = stream.events;
  for (auto it = lower_time(events, start), end = lower_time(events, t_label); it != end; ++it) {
    auto frame = static_cast<std::size_t>((it->t - start) / window);
    sums[frame * plane + static_cast<std::size_t>(it->y) * config.width + it->x] += it->p;
  }

  FrameStack out(config.stacks, config.frames_per_stack, config.height, config.width);
  out.t_end = t_label;
  std::transform(sums.begin(), sums.end(), out.data.begin(), sign_of);
  return out;
}

FrameStack encode_sbe(const EventStream& stream, std::int64_t t_label, const EncoderConfig& config) {
  config.validate();
  if (config.mode != StackingMode::Sbe) throw ValidationError("encode_sbe called with a non-SBE config");
  check_geometry(stream, config);
  const int total_frames = config.stacks * config.frames_per_stack;
  const auto needed = static_cast<std::size_t>(total_frames) * config.events_per_frame;
  const auto& events = stream.events;
  const auto last = static_cast<std::size_t>(lower_time(events, t_label) - events.begin());
  if (last < needed) {
    throw InsufficientHistory("SBE needs " + std::to_string(needed) + " events before " + std::to_string(t_label) +
                              " us, only " + std::to_string(last) + " available");
  }

  const std::size_t plane = static_cast<std::size_t>(config.height) * config.width;
  std::vector<int> sums(plane * total_frames, 0);
  const std::size_t first = last - needed;
  for (std::size_t i = first; i < last; ++i) {
    const auto& e = events[i];
    std::size_t frame = (i - first) / config.events_per_frame;
    sums[frame * plane + static_cast<std::size_t>(e.y) * config.width + e.x] += e.p;
  }

  FrameStack out(config.stacks, config.frames_per_stack, config.height, config.width);
  out.t_end = t_label;
  std::transform(sums.begin(), sums.end(), out.data.begin(), sign_of);
  return out;
}

FrameStack encode(const EventStream& stream, std::int64_t t_label, const EncoderConfig& config) {
  return config.mode == StackingMode::Sbt ? encode_sbt(stream, t_label, config)
                                          : encode_sbe(stream, t_label, config);
}

double stack_sparsity(const FrameStack& stack) {
  if (stack.data.empty()) return 0.0;
  auto nz = std::count_if(stack.data.begin(), stack.data.end(), [](std::int8_t v) { return v != 0; });
  return static_cast<double>(nz) / static_cast<double>(stack.data.size());
}

void append_stack(std::ostream& out, const FrameStack& stack) {
  out.write(kStackMagic.data(), kStackMagic.size());
  put_u32(out, static_cast<std::uint32_t>(stack.stacks));
  put_u32(out, static_cast<std::uint32_t>(stack.frames));
  put_u32(out, static_cast<std::uint32_t>(stack.height));
  put_u32(out, static_cast<std::uint32_t>(stack.width));
  out.write(reinterpret_cast<const char*>(stack.data.data()), static_cast<std::streamsize>(stack.data.size()));
}

FrameStack read_stack(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), 4);
  if (!in || magic != kStackMagic) throw std::runtime_error("not a packed stack (bad magic)");
  int s = static_cast<int>(get_u32(in));
  int c = static_cast<int>(get_u32(in));
  int h = static_cast<int>(get_u32(in));
  int w = static_cast<int>(get_u32(in));
  FrameStack stack(s, c, h, w);
  in.read(reinterpret_cast<char*>(stack.data.data()), static_cast<std::streamsize>(stack.data.size()));
  if (!in) throw std::runtime_error("truncated stack payload");
  for (auto v : stack.data) {
    if (v < -1 || v > 1) throw std::runtime_error("stack value outside {-1,0,1}");
  }
  return stack;
}

void save_stack(const std::filesystem::path& path, const FrameStack& stack) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  append_stack(out, stack);
}

FrameStack load_stack(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_stack(in);
}

}  // namespace sfpn
