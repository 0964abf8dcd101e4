#include <doctest.h>

#include <algorithm>
#include <sstream>

#include "sfpn/encoding.hpp"
#include "test_util.hpp"

using namespace sfpn;

namespace {

EventStream random_stream(Rng& rng, int n, Geometry g, std::int64_t t_max) {
  EventStream s{g, {}};
  for (int i = 0; i < n; ++i) {
    s.events.push_back({static_cast<std::int64_t>(rng.below(t_max)), static_cast<int>(rng.below(g.width)),
                        static_cast<int>(rng.below(g.height)), rng.bernoulli(0.5) ? 1 : -1});
  }
  std::stable_sort(s.events.begin(), s.events.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
  return s;
}

int sign(int v) { return (v > 0) - (v < 0); }

// Per pixel and frame, scan every event.
FrameStack sbt_oracle(const EventStream& s, std::int64_t t_label, const EncoderConfig& c) {
  FrameStack out(c.stacks, c.frames_per_stack, c.height, c.width);
  const std::int64_t win = c.delta_t_us / c.frames_per_stack;
  const std::int64_t start = t_label - c.delta_t_us * c.stacks;
  for (int st = 0; st < c.stacks; ++st) {
    for (int f = 0; f < c.frames_per_stack; ++f) {
      const std::int64_t lo = start + (st * c.frames_per_stack + f) * win;
      for (int y = 0; y < c.height; ++y) {
        for (int x = 0; x < c.width; ++x) {
          int sum = 0;
          for (const auto& e : s.events) {
            if (e.x == x && e.y == y && e.t >= lo && e.t < lo + win) sum += e.p;
          }
          out.at(st, f, y, x) = static_cast<std::int8_t>(sign(sum));
        }
      }
    }
  }
  return out;
}

FrameStack sbe_oracle(const EventStream& s, std::int64_t t_label, const EncoderConfig& c) {
  std::vector<Event> before;
  for (const auto& e : s.events) {
    if (e.t < t_label) before.push_back(e);
  }
  const int frames = c.stacks * c.frames_per_stack;
  const std::size_t need = static_cast<std::size_t>(frames) * c.events_per_frame;
  std::vector<Event> used(before.end() - need, before.end());
  std::vector<int> sums(static_cast<std::size_t>(frames) * c.height * c.width, 0);
  for (std::size_t i = 0; i < used.size(); ++i) {
    const std::size_t f = i / c.events_per_frame;
    sums[(f * c.height + used[i].y) * c.width + used[i].x] += used[i].p;
  }
  FrameStack out(c.stacks, c.frames_per_stack, c.height, c.width);
  for (std::size_t i = 0; i < sums.size(); ++i) out.data[i] = static_cast<std::int8_t>(sign(sums[i]));
  return out;
}

}  // namespace

TEST_CASE("SBT matches the brute-force oracle") {
  Rng rng(5);
  EncoderConfig c;
  c.height = 6;
  c.width = 7;
  c.delta_t_us = 300;
  for (int trial = 0; trial < 20; ++trial) {
    auto s = random_stream(rng, 1 + static_cast<int>(rng.below(2000)), {7, 6}, 1200);
    const std::int64_t t = 900 + static_cast<std::int64_t>(rng.below(300));
    auto got = encode_sbt(s, t, c);
    auto want = sbt_oracle(s, t, c);
    CHECK(got.data == want.data);
  }
}

TEST_CASE("SBE matches the brute-force oracle") {
  Rng rng(6);
  EncoderConfig c;
  c.mode = StackingMode::Sbe;
  c.height = 5;
  c.width = 5;
  c.events_per_frame = 13;
  for (int trial = 0; trial < 20; ++trial) {
    auto s = random_stream(rng, 200 + static_cast<int>(rng.below(800)), {5, 5}, 5000);
    const std::int64_t t = 4000 + static_cast<std::int64_t>(rng.below(1001));
    auto got = encode_sbe(s, t, c);
    auto want = sbe_oracle(s, t, c);
    CHECK(got.data == want.data);
  }
}

TEST_CASE("balanced polarities cancel to zero") {
  EncoderConfig c;
  c.height = c.width = 2;
  c.delta_t_us = 30;
  c.stacks = 1;
  EventStream s{{2, 2}, {{0, 1, 1, 1}, {1, 1, 1, -1}, {2, 0, 0, 1}}};
  auto st = encode_sbt(s, 30, c);
  CHECK(st.at(0, 0, 1, 1) == 0);
  CHECK(st.at(0, 0, 0, 0) == 1);
}

TEST_CASE("insufficient history is an error") {
  EncoderConfig c;
  EventStream s{{64, 64}, {{0, 0, 0, 1}}};
  CHECK_THROWS_AS(encode_sbt(s, c.history_us() - 1, c), InsufficientHistory);
  c.mode = StackingMode::Sbe;
  CHECK_THROWS_AS(encode_sbe(s, 1000, c), InsufficientHistory);
}

TEST_CASE("events at t_label fall outside the window") {
  EncoderConfig c;
  c.height = c.width = 1;
  c.stacks = 1;
  c.frames_per_stack = 1;
  c.delta_t_us = 10;
  EventStream s{{1, 1}, {{10, 0, 0, 1}}};
  CHECK(encode_sbt(s, 10, c).data[0] == 0);
  CHECK(encode_sbt(s, 11, c).data[0] == 1);
}

TEST_CASE("packed stacks round trip") {
  Rng rng(9);
  FrameStack a(2, 3, 4, 5);
  for (auto& v : a.data) v = static_cast<std::int8_t>(static_cast<int>(rng.below(3)) - 1);
  std::stringstream ss;
  append_stack(ss, a);
  append_stack(ss, a);
  auto b = read_stack(ss);
  auto c2 = read_stack(ss);
  CHECK(b.data == a.data);
  CHECK(c2.data == a.data);
  CHECK(b.stacks == 2);
  CHECK(b.width == 5);

  std::stringstream bad("XXXX");
  CHECK_THROWS(read_stack(bad));
}

TEST_CASE("sparsity counts nonzero entries") {
  FrameStack a(1, 1, 2, 2);
  a.data = {0, 1, -1, 0};
  CHECK(stack_sparsity(a) == doctest::Approx(0.5));
}
