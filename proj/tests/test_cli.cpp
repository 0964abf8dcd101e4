#include <doctest.h>

#include <fstream>
#include <sstream>

#include "sfpn/cli.hpp"
#include "sfpn/config.hpp"
#include "test_util.hpp"

using namespace sfpn;
namespace fs = std::filesystem;

namespace {

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  args.insert(args.begin(), "sfpn");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

// Small enough for a unit test: 32x32, ICS 4, 2 epochs on a handful of scenes.
RunConfig tiny_config() {
  RunConfig c = RunConfig::desk();
  c.scene.geometry = {32, 32};
  c.scene.car_size = {8.0, 14.0, 6.0, 10.0};
  c.scene.pedestrian_size = {3.0, 5.0, 6.0, 10.0};
  c.encoder.height = c.encoder.width = 32;
  c.network.height = c.network.width = 32;
  c.network.initial_channels = 4;
  c.data.samples = 8;
  c.train.epochs = 2;
  c.train.batch_size = 4;
  return c;
}

fs::path write_config(const fs::path& dir, const RunConfig& c) {
  const auto p = dir / "cfg.json";
  std::ofstream(p) << serialize(c);
  return p;
}

}  // namespace

TEST_CASE("config round-trips through serialize and parse") {
  RunConfig c = RunConfig::desk();
  c.train.lr = 0.0025;
  c.network.first_layer_neuron = NeuronKind::Lif;
  c.anchors.scales[0][1] = {7.5, 9.25};
  const std::string text = serialize(c);
  CHECK(serialize(parse_run_config(text)) == text);
  CHECK(parse_run_config(text).train.lr == 0.0025);
}

TEST_CASE("unknown config keys are rejected") {
  nlohmann::json j = to_json(RunConfig::desk());
  j["train"]["learning_rate"] = 0.1;
  CHECK_THROWS_AS(run_config_from_json(j), ConfigError);
  nlohmann::json k = to_json(RunConfig::desk());
  k["extra"] = 1;
  CHECK_THROWS_AS(run_config_from_json(k), ConfigError);
  nlohmann::json v = to_json(RunConfig::desk());
  v["version"] = 99;
  CHECK_THROWS_AS(run_config_from_json(v).validate(), ConfigError);
}

TEST_CASE("help enumerates every flag") {
  Run r = cli({"--help"});
  CHECK(r.code == 0);
  for (const char* flag : {"--config", "--seed", "--out", "--force", "synthesize", "encode", "train", "eval", "infer",
                           "cost-report", "sweep", "--scenes", "--objects", "--noise", "--duration", "--format",
                           "--events", "--t-label", "--stride", "--mode", "--data", "--epochs", "--first-layer",
                           "--resume", "--checkpoint", "--split", "--score", "--samples", "--csv", "--axis",
                           "--values"}) {
    CAPTURE(flag);
    CHECK(r.out.find(flag) != std::string::npos);
  }
  CHECK(cli({}).code == 2);
  CHECK(cli({"bogus"}).code == 2);
}

TEST_CASE("synthesize is deterministic and matches the recorded hashes") {
  auto a = testutil::scratch("cli_syn_a");
  auto b = testutil::scratch("cli_syn_b");
  REQUIRE(cli({"synthesize", "--scenes", "2", "--out", a.string(), "--force"}).code == 0);
  REQUIRE(cli({"synthesize", "--scenes", "2", "--out", b.string(), "--force"}).code == 0);
  for (const char* f : {"scene_0000.events.csv", "scene_0000.labels.csv", "scene_0001.events.csv",
                        "scene_0001.labels.csv", "config.json"}) {
    CAPTURE(f);
    CHECK(slurp(a / f) == slurp(b / f));
  }
  CHECK(fnv1a(slurp(a / "scene_0000.events.csv")) == 2645429756289008709ull);
  CHECK(fnv1a(slurp(a / "scene_0000.labels.csv")) == 9130881762073475921ull);
  CHECK(fnv1a(slurp(a / "scene_0001.events.csv")) == 17086801372306789555ull);

  auto c = testutil::scratch("cli_syn_c");
  REQUIRE(cli({"--seed", "2", "synthesize", "--scenes", "1", "--out", c.string(), "--force"}).code == 0);
  CHECK(slurp(c / "scene_0000.events.csv") != slurp(a / "scene_0000.events.csv"));
}

TEST_CASE("synthesize rejects degenerate scenes and non-empty outputs") {
  auto dir = testutil::scratch("cli_syn_err");
  CHECK(cli({"synthesize", "--objects", "0", "--noise", "0", "--out", dir.string(), "--force"}).code != 0);
  CHECK(cli({"synthesize", "--duration", "0", "--out", dir.string(), "--force"}).code != 0);
  std::ofstream(dir / "keep.txt") << "x";
  Run r = cli({"synthesize", "--scenes", "1", "--out", dir.string()});
  CHECK(r.code == 2);
  CHECK(r.err.find("--force") != std::string::npos);
  CHECK(cli({"synthesize", "--scenes", "1", "--out", dir.string(), "--force"}).code == 0);
}

TEST_CASE("encode writes one packed stack per label time") {
  auto dir = testutil::scratch("cli_enc");
  REQUIRE(cli({"synthesize", "--scenes", "1", "--out", (dir / "s").string()}).code == 0);
  const RunConfig c = RunConfig::desk();
  const std::int64_t h = c.encoder.history_us();
  const auto file = dir / "x.stk";
  Run r = cli({"encode", "--events", (dir / "s" / "scene_0000.events.csv").string(), "--t-label", std::to_string(h),
               "--t-label", std::to_string(h + 1000), "--out", file.string()});
  REQUIRE(r.code == 0);
  const std::size_t per = 4 + 16 + static_cast<std::size_t>(c.encoder.stacks) * c.encoder.frames_per_stack * 64 * 64;
  CHECK(fs::file_size(file) == 2 * per);
  CHECK(slurp(file).substr(0, 4) == "STK1");
  CHECK(cli({"encode", "--events", (dir / "s" / "scene_0000.events.csv").string(), "--out", file.string()}).code ==
        2);
}

TEST_CASE("train, eval, infer and cost-report on a tiny run") {
  auto dir = testutil::scratch("cli_train");
  const auto cfg = write_config(dir, tiny_config()).string();
  const auto run = dir / "run";
  Run t = cli({"--config", cfg, "train", "--out", run.string()});
  REQUIRE(t.code == 0);
  CHECK(fs::exists(run / "best.ckpt"));
  CHECK(fs::exists(run / "last.ckpt"));
  CHECK(fs::exists(run / "metrics.jsonl"));

  // reproducible metrics
  const auto run2 = dir / "run2";
  REQUIRE(cli({"--config", cfg, "train", "--out", run2.string()}).code == 0);
  CHECK(slurp(run / "metrics.jsonl") == slurp(run2 / "metrics.jsonl"));

  Run e1 = cli({"--config", cfg, "eval", "--checkpoint", (run / "last.ckpt").string()});
  Run e2 = cli({"--config", cfg, "eval", "--checkpoint", (run / "last.ckpt").string()});
  REQUIRE(e1.code == 0);
  CHECK(e1.out == e2.out);
  CHECK(e1.out.find("mAP50") != std::string::npos);

  // a network spec that differs from the checkpoint's is refused
  RunConfig other = tiny_config();
  other.network.initial_channels = 6;
  const auto other_cfg = dir / "other.json";
  std::ofstream(other_cfg) << serialize(other);
  Run bad = cli({"--config", other_cfg.string(), "eval", "--checkpoint", (run / "last.ckpt").string()});
  CHECK(bad.code == 1);
  CHECK(bad.err.find("mismatch") != std::string::npos);

  REQUIRE(cli({"--config", cfg, "synthesize", "--scenes", "1", "--out", (dir / "s").string()}).code == 0);
  Run i = cli({"--config", cfg, "infer", "--checkpoint", (run / "last.ckpt").string(), "--events",
               (dir / "s" / "scene_0000.events.csv").string(), "--score", "0.0", "--out",
               (dir / "dets.csv").string()});
  REQUIRE(i.code == 0);
  CHECK(i.out.find("detections") != std::string::npos);
  CHECK(fs::exists(dir / "dets.csv"));

  Run cr = cli({"--config", cfg, "cost-report", "--checkpoint", (run / "last.ckpt").string(), "--samples", "2",
                "--out", (dir / "cost.json").string(), "--csv", (dir / "cost.csv").string()});
  REQUIRE(cr.code == 0);
  nlohmann::json j = nlohmann::json::parse(slurp(dir / "cost.json"));
  CHECK(j.contains("per_layer"));
  CHECK(j.contains("totals"));
  CHECK(j["samples"] == 2);
  // an existing report is not overwritten without --force
  CHECK(cli({"--config", cfg, "cost-report", "--samples", "1", "--out", (dir / "cost.json").string()}).code == 2);
}

TEST_CASE("corrupt checkpoints are reported") {
  auto dir = testutil::scratch("cli_corrupt");
  std::ofstream(dir / "bad.ckpt") << "NOTACKPT and some bytes";
  Run r = cli({"eval", "--checkpoint", (dir / "bad.ckpt").string()});
  CHECK(r.code == 1);
  CHECK_FALSE(r.err.empty());
  CHECK(cli({"train", "--resume", (dir / "bad.ckpt").string(), "--out", (dir / "r").string()}).code == 1);
}

TEST_CASE("sweep writes one row per grid point") {
  auto dir = testutil::scratch("cli_sweep");
  RunConfig c = tiny_config();
  c.train.epochs = 1;
  const auto cfg = write_config(dir, c).string();
  Run r = cli({"--config", cfg, "sweep", "--axis", "tau", "--values", "0.2", "--out", (dir / "sw").string()});
  REQUIRE(r.code == 0);
  std::ifstream in(dir / "sw" / "sweep.csv");
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(line);
  REQUIRE(lines.size() == 2);
  CHECK(lines[1].rfind("tau,0.2,", 0) == 0);
  CHECK(cli({"--config", cfg, "sweep", "--axis", "tau", "--values", ",", "--out", (dir / "e").string()}).code == 2);
  CHECK(cli({"--config", cfg, "sweep", "--axis", "gamma", "--values", "1", "--out", (dir / "g").string()}).code == 2);
}

TEST_CASE("sweep values are applied to the right field") {
  RunConfig c = RunConfig::desk();
  CHECK(apply_sweep_value(c, SweepAxis::Tau, "0.3").network.lif.tau == 0.3);
  CHECK(apply_sweep_value(c, SweepAxis::Threshold, "0.5").network.lif.u_th == 0.5);
  CHECK(apply_sweep_value(c, SweepAxis::Beta, "0.1").network.alif_beta == 0.1);
  RunConfig sc = apply_sweep_value(c, SweepAxis::SCConfig, "1x9");
  CHECK(sc.network.time_steps == 1);
  CHECK(sc.encoder.stacks == 1);
  CHECK(sc.encoder.frames_per_stack == 9);
  CHECK(sc.network.frames_per_stack == 9);
  CHECK_THROWS(apply_sweep_value(c, SweepAxis::SCConfig, "3"));
  CHECK(sweep_axis_from_string("s_c_config") == SweepAxis::SCConfig);
}

TEST_CASE("thread cap reads SFPN_THREADS") {
  setenv("SFPN_THREADS", "3", 1);
  CHECK(thread_cap() == 3);
  setenv("SFPN_THREADS", "zero", 1);
  CHECK(thread_cap() == 1);
  unsetenv("SFPN_THREADS");
  CHECK(thread_cap() == 1);
}
