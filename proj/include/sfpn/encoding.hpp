#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "sfpn/event_io.hpp"

namespace sfpn {

enum class StackingMode { Sbt, Sbe };

struct EncoderConfig {
  StackingMode mode = StackingMode::Sbt;
  std::int64_t delta_t_us = 60'000;  // duration of one stack (SBT)
  int frames_per_stack = 3;
  int stacks = 3;
  int events_per_frame = 5000;  // SBE only
  int height = 64;
  int width = 64;

  void validate() const;
  std::int64_t frame_window_us() const { return delta_t_us / frames_per_stack; }
  /// Earliest label time with a full SBT history.
  std::int64_t history_us() const { return delta_t_us * stacks; }
};

/// Dense S x C x H x W tensor of signed frame values in {-1, 0, +1}.
struct FrameStack {
  int stacks = 0;
  int frames = 0;
  int height = 0;
  int width = 0;
  std::int64_t t_end = 0;
  std::vector<std::int8_t> data;

  FrameStack() = default;
  FrameStack(int s, int c, int h, int w)
      : stacks(s), frames(c), height(h), width(w), data(static_cast<std::size_t>(s) * c * h * w, 0) {}

  std::size_t index(int s, int c, int y, int x) const {
    return ((static_cast<std::size_t>(s) * frames + c) * height + y) * width + x;
  }
  std::int8_t at(int s, int c, int y, int x) const { return data[index(s, c, y, x)]; }
  std::int8_t& at(int s, int c, int y, int x) { return data[index(s, c, y, x)]; }
  bool operator==(const FrameStack&) const = default;
};

class InsufficientHistory : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Stacking based on time: frame i of stack s covers a half-open window of
/// length delta_t / C; all windows tile [t_label - S*delta_t, t_label).
FrameStack encode_sbt(const EventStream& stream, std::int64_t t_label, const EncoderConfig& config);

/// Stacking based on event count, anchored at t_label and walking backward.
FrameStack encode_sbe(const EventStream& stream, std::int64_t t_label, const EncoderConfig& config);

FrameStack encode(const EventStream& stream, std::int64_t t_label, const EncoderConfig& config);

/// Fraction of nonzero elements.
double stack_sparsity(const FrameStack& stack);

// Packed stack file: magic STK1, u32 S, C, H, W (little-endian), i8 values row-major.
void save_stack(const std::filesystem::path& path, const FrameStack& stack);
FrameStack load_stack(const std::filesystem::path& path);
void append_stack(std::ostream& out, const FrameStack& stack);
FrameStack read_stack(std::istream& in);

}  // namespace sfpn
