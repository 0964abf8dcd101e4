#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>

#include "sfpn/cost_model.hpp"
#include "test_util.hpp"

using namespace sfpn;
using ag::Tape;
using ag::Tensor;

namespace {

NetworkSpec desk_spec() {
  NetworkSpec s;
  s.initial_channels = 8;
  s.height = s.width = 64;
  return s;
}

double sig3(double v) {
  const double mag = std::pow(10.0, std::floor(std::log10(std::abs(v))) - 2);
  return std::round(v / mag) * mag;
}

ActivityRecord::Conv conv_entry(const std::string& name, std::vector<double> s, std::uint64_t A, bool mac = false) {
  ActivityRecord::Conv c;
  c.name = name;
  c.input_activity = std::move(s);
  c.dense_ops = A;
  c.real_valued = mac;
  return c;
}

}  // namespace

TEST_CASE("dense addition closed forms") {
  CHECK(ConvLayerInfo{"a", 2, 4, 1, 8, 8}.dense_ops() == 512);
  CHECK(ConvLayerInfo{"b", 16, 32, 3, 16, 16}.dense_ops() == 1'179'648);
}

TEST_CASE("dense_additions agrees with what a forward records") {
  SpikeFpn net(desk_spec(), 1);
  std::map<std::string, std::uint64_t> by_name;
  for (const auto& [name, A] : dense_additions(net)) by_name[name] = A;
  Rng rng(1);
  Tensor x = testutil::random_tensor(rng, {3, 3, 64, 64}, -1, 1, false);
  ActivityRecord rec;
  Tape tape(false);
  net.forward(tape, x, {true, SpikeMode::Hard}, &rec);
  REQUIRE(rec.convs.size() == by_name.size());
  for (const auto& c : rec.convs) {
    CAPTURE(c.name);
    REQUIRE(by_name.count(c.name));
    CHECK(by_name.at(c.name) == c.dense_ops);
  }
}

TEST_CASE("energy identity on the published operation counts") {
  const auto snn = energy_estimate(2.83e9, 0.0);
  CHECK(sig3(snn.total_joules() * 1e3) == doctest::Approx(2.55));
  CHECK(snn.add_joules == doctest::Approx(2.83e9 * 0.9e-12).epsilon(1e-12));
  const auto ann = energy_estimate(0.0, 18.73e9);
  CHECK(sig3(ann.total_joules() * 1e3) == doctest::Approx(86.2));
  CHECK(ann.mac_joules * 1e3 == doctest::Approx(86.158).epsilon(1e-9));
}

TEST_CASE("s * T * A equals a direct accumulation count") {
  // stride-1 3x3 conv, binary input with an empty one-pixel border so
  // no tap falls into the padding
  Rng rng(2);
  const int T = 3, cin = 4, cout = 5, H = 9, W = 7;
  std::vector<std::vector<std::int8_t>> in(T, std::vector<std::int8_t>(cin * H * W, 0));
  std::vector<double> s(T, 0.0);
  for (int t = 0; t < T; ++t) {
    int nnz = 0;
    for (int c = 0; c < cin; ++c) {
      for (int y = 1; y < H - 1; ++y) {
        for (int x = 1; x < W - 1; ++x) {
          const bool on = rng.bernoulli(0.3);
          in[t][(c * H + y) * W + x] = on;
          nnz += on;
        }
      }
    }
    s[t] = static_cast<double>(nnz) / (cin * H * W);
  }
  std::int64_t count = 0;
  for (int t = 0; t < T; ++t) {
    for (int o = 0; o < cout; ++o) {
      for (int y = 0; y < H; ++y) {
        for (int x = 0; x < W; ++x) {
          for (int c = 0; c < cin; ++c) {
            for (int ky = -1; ky <= 1; ++ky) {
              for (int kx = -1; kx <= 1; ++kx) {
                const int iy = y + ky, ix = x + kx;
                if (iy >= 0 && iy < H && ix >= 0 && ix < W) count += in[t][(c * H + iy) * W + ix];
              }
            }
          }
        }
      }
    }
  }
  ActivityRecord rec;
  rec.convs.push_back(conv_entry("c", s, ConvLayerInfo{"c", cin, cout, 3, H, W}.dense_ops()));
  FiringReport r = record_firing(rec, T);
  CHECK(std::llround(r.convs[0].ops) == count);
  CHECK(r.total_adds == r.convs[0].ops);
}

TEST_CASE("recorded rates equal a direct nonzero count of the spike tensors") {
  SpikeFpn net(desk_spec(), 2);
  Rng rng(3);
  Tensor x({3 * 2, 3, 64, 64});
  for (double& v : x.data()) v = rng.bernoulli(0.1) ? (rng.bernoulli(0.5) ? 1.0 : -1.0) : 0.0;
  ActivityRecord rec;
  rec.keep_tensors = true;
  Tape tape(false);
  net.forward(tape, x, {true, SpikeMode::Hard}, &rec);
  std::map<std::string, Tensor> kept(rec.boundaries.begin(), rec.boundaries.end());
  for (const auto& l : rec.spiking) {
    if (!kept.count(l.name)) continue;
    const Tensor& t = kept.at(l.name);
    const std::size_t per = t.size() / 3;
    for (int step = 0; step < 3; ++step) {
      std::size_t on = 0;
      for (std::size_t i = 0; i < per; ++i) on += t.data()[step * per + i] != 0.0;
      CHECK(l.rate_per_step[step] == doctest::Approx(static_cast<double>(on) / per).epsilon(1e-12));
    }
  }
  // the first conv sees the ternary input at its nonzero fraction
  for (const auto& c : rec.convs) {
    if (c.name != "stem0.b0") continue;
    const std::size_t per = x.size() / 3;
    for (int step = 0; step < 3; ++step) {
      std::size_t on = 0;
      for (std::size_t i = 0; i < per; ++i) on += x.data()[step * per + i] != 0.0;
      CHECK(c.input_activity[step] == doctest::Approx(static_cast<double>(on) / per).epsilon(1e-12));
    }
  }
}

TEST_CASE("a silent network costs only its head MACs") {
  SpikeFpn net(desk_spec(), 4);
  std::map<std::string, Tensor> st;
  for (const auto& t : net.state()) {
    Tensor c = t.tensor.clone();
    if (t.name.ends_with(".bn_initialized")) c.data()[0] = 1.0;
    st.emplace(t.name, c);
  }
  net.load_state(st);
  ActivityRecord rec;
  Tape tape(false);
  net.forward(tape, Tensor({3, 3, 64, 64}), {false, SpikeMode::Hard}, &rec);
  FiringReport r = record_firing(rec, 3);
  CHECK(r.total_adds == 0.0);
  CHECK(r.mean_rate == 0.0);
  double macs = 0.0;
  for (const auto& l : net.conv_layers()) {
    if (l.real_valued) macs += static_cast<double>(l.dense_ops());
  }
  CHECK(macs > 0.0);
  CHECK(r.head_macs == macs);
  const auto e = energy_estimate(r);
  CHECK(e.add_joules == 0.0);
  CHECK(e.total_joules() == doctest::Approx(macs * 4.6e-12));
}

TEST_CASE("full firing has rate 1 and repeated passes are averaged") {
  ActivityRecord rec;
  rec.spiking.push_back({"l", {1.0, 1.0}, 10});
  rec.spiking.push_back({"m", {0.2, 0.4}, 30});
  rec.spiking.push_back({"m", {0.4, 0.6}, 30});
  rec.convs.push_back(conv_entry("c", {0.5, 0.5}, 100));
  rec.convs.push_back(conv_entry("c", {0.1, 0.1}, 100));
  FiringReport r = record_firing(rec, 2);
  CHECK(r.layer("l")->rate == 1.0);
  CHECK(r.layer("m")->rate_per_step[0] == doctest::Approx(0.3));
  CHECK(r.layer("m")->rate == doctest::Approx(0.4));
  CHECK(r.mean_rate == doctest::Approx((1.0 * 10 + 0.4 * 30) / 40));
  REQUIRE(r.convs.size() == 1);
  CHECK(r.convs[0].ops == doctest::Approx(0.3 * 2 * 100));
  CHECK(r.layer("none") == nullptr);
  CHECK_THROWS(record_firing(rec, 0));
}

TEST_CASE("energy is monotone in every layer's activity") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    ActivityRecord rec;
    for (int l = 0; l < 5; ++l) {
      rec.convs.push_back(conv_entry("c" + std::to_string(l), {rng.uniform(), rng.uniform(), rng.uniform()},
                                     1000 + rng.below(100000)));
    }
    rec.convs.push_back(conv_entry("head", {0.3}, 5000, true));
    const double base = energy_estimate(record_firing(rec, 3)).total_joules();
    ActivityRecord more = rec;
    auto& c = more.convs[rng.below(5)];
    c.input_activity[rng.below(3)] += 0.1;
    CHECK(energy_estimate(record_firing(more, 3)).total_joules() >= base);
  }
}

TEST_CASE("report totals equal the per-layer sums") {
  SpikeFpn net(desk_spec(), 5);
  Rng rng(6);
  Tensor x = testutil::random_tensor(rng, {3, 3, 64, 64}, -1, 1, false);
  ActivityRecord rec;
  Tape tape(false);
  net.forward(tape, x, {true, SpikeMode::Hard}, &rec);
  FiringReport r = record_firing(rec, 3);
  nlohmann::json j = report_to_json(r);
  double adds = 0.0, macs = 0.0;
  for (const auto& row : j["per_layer"]) {
    if (row["kind"] == "mac") {
      macs += row["ops"].get<double>();
    } else {
      adds += row["ops"].get<double>();
      CHECK(row["ops"].get<double>() ==
            doctest::Approx(row["s"].get<double>() * 3 * row["A"].get<double>()).epsilon(1e-12));
    }
  }
  CHECK(j["totals"]["additions"].get<double>() == doctest::Approx(adds).epsilon(1e-12));
  CHECK(j["totals"]["head_macs"].get<double>() == doctest::Approx(macs).epsilon(1e-12));
  for (const auto& l : r.layers) {
    CHECK(l.rate >= 0.0);
    CHECK(l.rate <= 1.0);
  }

  auto dir = testutil::scratch("cost_csv");
  write_report_csv(dir / "r.csv", r);
  std::ifstream in(dir / "r.csv");
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line);) ++lines;
  CHECK(lines == 1 + r.convs.size() + r.layers.size());
}
