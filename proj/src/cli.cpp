#include "sfpn/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include "sfpn/cost_model.hpp"
#include "sfpn/random.hpp"

namespace sfpn {

namespace fs = std::filesystem;

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void prepare_out_dir(const fs::path& dir, bool force) {
  if (dir.empty()) throw UsageError("--out is required");
  if (fs::exists(dir)) {
    if (!fs::is_directory(dir)) throw UsageError(dir.string() + " exists and is not a directory");
    if (!fs::is_empty(dir) && !force) {
      throw UsageError("output directory " + dir.string() + " is not empty (use --force to overwrite)");
    }
  }
  fs::create_directories(dir);
}

void prepare_out_file(const fs::path& file, bool force) {
  if (file.empty()) throw UsageError("--out is required");
  if (fs::exists(file) && !force) throw UsageError(file.string() + " exists (use --force to overwrite)");
  if (file.has_parent_path()) fs::create_directories(file.parent_path());
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item.erase(0, item.find_first_not_of(" \t"));
    item.erase(item.find_last_not_of(" \t") + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_number(const std::string& s, const char* what) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != s.size()) throw UsageError(std::string("invalid ") + what + " value '" + s + "'");
  return v;
}

AnchorSet anchors_from_header(const nlohmann::json& header, const AnchorSet& fallback) {
  if (!header.contains("anchors")) return fallback;
  AnchorSet a;
  for (const auto& row : header.at("anchors")) {
    std::vector<std::pair<double, double>> s;
    for (const auto& wh : row) s.emplace_back(wh.at(0).get<double>(), wh.at(1).get<double>());
    a.scales.push_back(s);
  }
  return a;
}

struct Globals {
  std::string config;
  std::uint64_t seed = 1;
  std::string out;
  bool force = false;
};

RunConfig base_config(const Globals& g) {
  RunConfig c = g.config.empty() ? RunConfig::desk() : load_run_config(g.config);
  c.validate();
  return c;
}

// Config for commands that start from a checkpoint: the config stored in it
// unless --config overrides.
RunConfig config_for_checkpoint(const Globals& g, const Checkpoint& ck) {
  RunConfig c;
  if (!g.config.empty()) {
    c = load_run_config(g.config);
  } else if (ck.header.contains("run_config") && !ck.header.at("run_config").empty()) {
    c = run_config_from_json(ck.header.at("run_config"));
  } else {
    c = RunConfig::desk();
  }
  NetworkSpec stored = network_spec_from_json(ck.header.at("network"));
  if (to_json(stored) != to_json(c.network)) {
    throw std::runtime_error("checkpoint network spec does not match the configuration (spec/checkpoint mismatch)");
  }
  c.validate();
  return c;
}

void print_map(std::ostream& out, const MapReport& m) {
  out << std::fixed << std::setprecision(4);
  out << "mAP50      " << m.map50 << "\n";
  out << "mAP50:95   " << m.map50_95 << "\n";
  for (std::size_t c = 0; c < m.ap50.size(); ++c) {
    out << "class " << c << "    AP50 ";
    if (m.ap50[c] < 0.0) {
      out << "n/a (no GT)\n";
    } else {
      out << m.ap50[c] << "  AP50:95 " << m.ap50_95[c] << "\n";
    }
  }
  out.unsetf(std::ios::floatfield);
}

nlohmann::json map_json(const MapReport& m) {
  return {{"map50", m.map50}, {"map50_95", m.map50_95}, {"ap50", m.ap50}, {"ap50_95", m.ap50_95}};
}

}  // namespace

int thread_cap() {
  const char* env = std::getenv("SFPN_THREADS");
  if (!env) return 1;
  char* end = nullptr;
  long v = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || v < 1) return 1;
  return static_cast<int>(std::min<long>(v, 256));
}

Dataset prepare_dataset(const RunConfig& config, std::uint64_t seed, const std::optional<fs::path>& data_dir) {
  std::vector<Sample> samples = data_dir ? load_samples(*data_dir, config.scene.geometry, config.encoder)
                                         : synthesize_samples(config.scene, config.encoder, config.data, seed);
  return split_dataset(std::move(samples), config.data.val_fraction);
}

TrainResult run_training(const RunConfig& config, std::uint64_t seed, const Dataset& data, const fs::path& out_dir,
                         std::optional<Checkpoint> resume) {
  config.validate();
  SpikeFpn net(config.network, mix_seed(seed, 7));
  TrainOutputs outputs;
  outputs.dir = out_dir;
  outputs.run_config = to_json(config);
  outputs.resume = std::move(resume);
  return train(net, config.anchors, data, config.train, seed, outputs);
}

SweepAxis sweep_axis_from_string(const std::string& s) {
  if (s == "tau") return SweepAxis::Tau;
  if (s == "threshold") return SweepAxis::Threshold;
  if (s == "s_c_config") return SweepAxis::SCConfig;
  if (s == "beta") return SweepAxis::Beta;
  throw UsageError("unknown sweep axis '" + s + "' (expected tau, threshold, s_c_config or beta)");
}

const char* to_string(SweepAxis axis) {
  switch (axis) {
    case SweepAxis::Tau: return "tau";
    case SweepAxis::Threshold: return "threshold";
    case SweepAxis::SCConfig: return "s_c_config";
    case SweepAxis::Beta: return "beta";
  }
  return "?";
}

RunConfig apply_sweep_value(RunConfig config, SweepAxis axis, const std::string& value) {
  switch (axis) {
    case SweepAxis::Tau:
      config.network.lif.tau = parse_number(value, "tau");
      break;
    case SweepAxis::Threshold:
      config.network.lif.u_th = parse_number(value, "threshold");
      break;
    case SweepAxis::Beta:
      config.network.alif_beta = parse_number(value, "beta");
      break;
    case SweepAxis::SCConfig: {
      const auto x = value.find('x');
      if (x == std::string::npos) throw UsageError("s_c_config values look like SxC, got '" + value + "'");
      const int s = static_cast<int>(parse_number(value.substr(0, x), "S"));
      const int c = static_cast<int>(parse_number(value.substr(x + 1), "C"));
      if (s < 1 || c < 1) throw UsageError("S and C must be >= 1");
      // the total history window stays fixed
      const std::int64_t history = config.encoder.history_us();
      if (history % s != 0 || (history / s) % c != 0) {
        throw UsageError("history " + std::to_string(history) + " us does not split into " + value + " frames");
      }
      config.encoder.stacks = config.network.time_steps = s;
      config.encoder.frames_per_stack = config.network.frames_per_stack = c;
      config.encoder.delta_t_us = history / s;
      break;
    }
  }
  config.validate();
  return config;
}

std::vector<SweepRow> run_sweep(const RunConfig& config, SweepAxis axis, const std::vector<std::string>& values,
                                std::uint64_t seed, const fs::path& out_dir, int threads) {
  if (values.empty()) throw UsageError("sweep grid is empty");
  std::vector<RunConfig> configs;
  for (const auto& v : values) configs.push_back(apply_sweep_value(config, axis, v));

  // Points that share the encoder share one dataset.
  const bool shared_data = axis != SweepAxis::SCConfig;
  std::optional<Dataset> common;
  if (shared_data) common = prepare_dataset(config, seed);

  std::vector<SweepRow> rows(values.size());
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr error;
  auto worker = [&] {
    for (std::size_t i = next++; i < values.size(); i = next++) {
      try {
        const fs::path dir = out_dir / (std::string(to_string(axis)) + "_" + values[i]);
        fs::create_directories(dir);
        write_text(dir / "config.json", serialize(configs[i]));
        const Dataset data = shared_data ? *common : prepare_dataset(configs[i], seed);
        TrainResult r = run_training(configs[i], seed, data, dir);
        SweepRow row;
        row.value = values[i];
        row.map50 = std::max(0.0, r.best_map50);
        row.best_epoch = r.best_epoch;
        row.diverged = r.diverged;
        for (const auto& m : r.history) {
          if (m.epoch == r.best_epoch) {
            row.map50_95 = m.map50_95;
            row.first_layer_rate = m.first_layer_rate;
            row.firing_rate_mean = m.firing_rate_mean;
          }
        }
        rows[i] = row;
      } catch (...) {
        std::lock_guard lock(error_mutex);
        if (!error) error = std::current_exception();
      }
    }
  };
  const int n = std::max(1, std::min<int>(threads, static_cast<int>(values.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (error) std::rethrow_exception(error);

  std::ofstream csv(out_dir / "sweep.csv");
  csv << "axis,value,map50,map50_95,best_epoch,first_layer_rate,firing_rate_mean,diverged\n";
  csv.precision(10);
  for (const auto& r : rows) {
    csv << to_string(axis) << ',' << r.value << ',' << r.map50 << ',' << r.map50_95 << ',' << r.best_epoch << ','
        << r.first_layer_rate << ',' << r.firing_rate_mean << ',' << (r.diverged ? 1 : 0) << '\n';
  }
  return rows;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Spiking feature-pyramid detector for event streams", "sfpn"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--config", g.config, "Run configuration JSON (strict; defaults to the desk preset)");
  app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--out", g.out, "Output directory or file");
  app.add_flag("--force", g.force, "Overwrite existing outputs");

  // synthesize
  auto* syn = app.add_subcommand("synthesize", "Render synthetic moving-object scenes to event/label files");
  std::optional<int> syn_scenes, syn_objects;
  std::optional<double> syn_noise;
  std::optional<std::int64_t> syn_duration;
  std::string syn_format = "csv";
  syn->add_option("--scenes", syn_scenes, "Number of scenes (default: data.samples)");
  syn->add_option("--objects", syn_objects, "Objects per scene");
  syn->add_option("--noise", syn_noise, "Noise events per pixel per second");
  syn->add_option("--duration", syn_duration, "Scene duration in microseconds");
  syn->add_option("--format", syn_format, "Event file format")->check(CLI::IsMember({"csv", "binary"}));

  // encode
  auto* enc = app.add_subcommand("encode", "Encode an event file into packed frame stacks (STK1)");
  std::string enc_events;
  std::vector<std::int64_t> enc_times;
  std::optional<std::int64_t> enc_stride;
  std::string enc_mode;
  enc->add_option("--events", enc_events, "Event file (CSV or EVT1 binary)")->required();
  enc->add_option("--t-label", enc_times, "Label time(s) in microseconds");
  enc->add_option("--stride", enc_stride, "Encode every STRIDE us from the first full history");
  enc->add_option("--mode", enc_mode, "Stacking mode")->check(CLI::IsMember({"sbt", "sbe"}));

  // train
  auto* trn = app.add_subcommand("train", "Train a detector");
  std::string trn_data, trn_first, trn_resume;
  std::optional<int> trn_epochs;
  trn->add_option("--data", trn_data, "Directory written by synthesize (default: synthesize in memory)");
  trn->add_option("--epochs", trn_epochs, "Override train.epochs");
  trn->add_option("--first-layer", trn_first, "First-layer neuron")->check(CLI::IsMember({"lif", "alif", "binary"}));
  trn->add_option("--resume", trn_resume, "Resume from a last.ckpt");

  // eval
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string ev_ckpt, ev_data, ev_split = "val";
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", ev_data, "Scene directory (default: regenerate from the config)");
  ev->add_option("--split", ev_split, "Split to score")->check(CLI::IsMember({"train", "val", "all"}));

  // infer
  auto* inf = app.add_subcommand("infer", "Detect objects in an event file");
  std::string inf_ckpt, inf_events;
  std::optional<std::int64_t> inf_t;
  std::optional<double> inf_score;
  inf->add_option("--checkpoint", inf_ckpt, "Checkpoint file")->required();
  inf->add_option("--events", inf_events, "Event file")->required();
  inf->add_option("--t-label", inf_t, "Prediction time in microseconds (default: first full history)");
  inf->add_option("--score", inf_score, "Score threshold");

  // cost-report
  auto* cost = app.add_subcommand("cost-report", "Firing rates, operation counts and energy estimate");
  std::string cost_ckpt, cost_csv;
  int cost_samples = 16;
  cost->add_option("--checkpoint", cost_ckpt, "Checkpoint (default: freshly initialized network)");
  cost->add_option("--samples", cost_samples, "Synthetic samples to average over")->capture_default_str();
  cost->add_option("--csv", cost_csv, "Also write per-layer CSV");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Train and evaluate over a hyper-parameter grid");
  std::string sw_axis, sw_values;
  sw->add_option("--axis", sw_axis, "tau, threshold, s_c_config or beta")->required();
  sw->add_option("--values", sw_values, "Comma-separated grid (SxC for s_c_config)")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    // top-level help lists every subcommand with its flags
    const auto subs = app.get_subcommands();
    out << (subs.empty() ? app.help("", CLI::AppFormatMode::All) : subs.front()->help());
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (syn->parsed()) {
      RunConfig c = base_config(g);
      if (syn_objects) c.scene.num_objects = *syn_objects;
      if (syn_noise) c.scene.noise_rate = *syn_noise;
      if (syn_duration) c.scene.duration_us = *syn_duration;
      c.scene.validate();
      const int scenes = syn_scenes.value_or(c.data.samples);
      if (scenes < 1) throw UsageError("--scenes must be >= 1");
      prepare_out_dir(g.out, g.force);
      std::size_t events = 0, labels = 0;
      for (int i = 0; i < scenes; ++i) {
        Scene s = synthesize_scene(mix_seed(g.seed, i), c.scene);
        if (s.stream.events.empty()) throw ValidationError("scene " + std::to_string(i) + " produced an empty stream");
        char name[32];
        std::snprintf(name, sizeof name, "scene_%04d", i);
        save_events(fs::path(g.out) / (std::string(name) + ".events.csv"), s.stream,
                    syn_format == "binary" ? EventFileFormat::Binary : EventFileFormat::Csv);
        save_labels(fs::path(g.out) / (std::string(name) + ".labels.csv"), s.labels);
        events += s.stream.events.size();
        labels += s.labels.size();
      }
      write_text(fs::path(g.out) / "config.json", serialize(c));
      out << "synthesized " << scenes << " scenes: " << events << " events, " << labels << " labels -> " << g.out
          << "\n";
      return 0;
    }

    if (enc->parsed()) {
      RunConfig c = base_config(g);
      if (!enc_mode.empty()) c.encoder.mode = enc_mode == "sbt" ? StackingMode::Sbt : StackingMode::Sbe;
      EventStream stream = load_events(enc_events, c.scene.geometry);
      std::vector<std::int64_t> times = enc_times;
      if (enc_stride) {
        if (*enc_stride <= 0) throw UsageError("--stride must be positive");
        const std::int64_t last = stream.events.empty() ? 0 : stream.events.back().t + 1;
        for (std::int64_t t = c.encoder.history_us(); t <= last; t += *enc_stride) times.push_back(t);
      }
      if (times.empty()) times.push_back(c.encoder.history_us());
      prepare_out_file(g.out, g.force);
      std::ofstream file(g.out, std::ios::binary | std::ios::trunc);
      double density = 0.0;
      for (auto t : times) {
        FrameStack s = encode(stream, t, c.encoder);
        density += stack_sparsity(s);
        append_stack(file, s);
      }
      out << "encoded " << times.size() << " stacks, mean nonzero fraction " << density / times.size() << " -> "
          << g.out << "\n";
      return 0;
    }

    if (trn->parsed()) {
      RunConfig c = base_config(g);
      if (trn_epochs) c.train.epochs = *trn_epochs;
      if (!trn_first.empty()) c.network.first_layer_neuron = neuron_kind_from_string(trn_first);
      c.validate();
      std::optional<Checkpoint> resume;
      if (!trn_resume.empty()) {
        resume = load_checkpoint(trn_resume);
        if (to_json(network_spec_from_json(resume->header.at("network"))) != to_json(c.network)) {
          throw std::runtime_error("resume checkpoint network spec does not match the configuration");
        }
      } else {
        prepare_out_dir(g.out, g.force);
      }
      if (g.out.empty()) throw UsageError("--out is required");
      fs::create_directories(g.out);
      write_text(fs::path(g.out) / "config.json", serialize(c));
      Dataset data = prepare_dataset(c, g.seed, trn_data.empty() ? std::nullopt : std::optional<fs::path>(trn_data));
      out << "training on " << data.train.size() << " samples, validating on " << data.val.size() << "\n";
      SpikeFpn net(c.network, mix_seed(g.seed, 7));
      TrainOutputs outputs;
      outputs.dir = g.out;
      outputs.run_config = to_json(c);
      outputs.resume = std::move(resume);
      outputs.on_epoch = [&](const EpochMetrics& m) {
        out << "epoch " << m.epoch << "  loss " << m.train_loss << "  mAP50 " << m.map50 << "  mAP50:95 "
            << m.map50_95 << "  rate " << m.firing_rate_mean << "\n"
            << std::flush;
      };
      TrainResult r = train(net, c.anchors, data, c.train, g.seed, outputs);
      if (r.diverged) {
        err << r.message << "\n";
        return 1;
      }
      out << "best mAP50 " << r.best_map50 << " at epoch " << r.best_epoch << "\n";
      return 0;
    }

    if (ev->parsed()) {
      Checkpoint ck = load_checkpoint(ev_ckpt);
      RunConfig c = config_for_checkpoint(g, ck);
      SpikeFpn net = network_from_checkpoint(ck);
      const std::uint64_t seed = ck.header.value("seed", g.seed);
      Dataset data = prepare_dataset(c, seed, ev_data.empty() ? std::nullopt : std::optional<fs::path>(ev_data));
      std::vector<Sample> samples = ev_split == "train" ? data.train : data.val;
      if (ev_split == "all") samples.insert(samples.end(), data.train.begin(), data.train.end());
      EvalResult r = evaluate(net, anchors_from_header(ck.header, c.anchors), samples, c.train);
      out << "evaluated " << samples.size() << " samples (" << ev_split << ")\n";
      print_map(out, r.map);
      if (!g.out.empty()) {
        prepare_out_file(g.out, g.force);
        nlohmann::json j = map_json(r.map);
        j["samples"] = samples.size();
        j["split"] = ev_split;
        j["firing_rate_mean"] = r.firing.mean_rate;
        write_text(g.out, j.dump(2) + "\n");
      }
      return 0;
    }

    if (inf->parsed()) {
      Checkpoint ck = load_checkpoint(inf_ckpt);
      RunConfig c = config_for_checkpoint(g, ck);
      SpikeFpn net = network_from_checkpoint(ck);
      EventStream stream = load_events(inf_events, c.scene.geometry);
      FrameStack stack = encode(stream, inf_t.value_or(c.encoder.history_us()), c.encoder);
      const FrameStack* ptr = &stack;
      ag::Tape tape(false);
      HeadOutput head = net.forward(tape, stacks_to_input({&ptr, 1}), {false, SpikeMode::Hard});
      auto dets = nms(decode(head, anchors_from_header(ck.header, c.anchors), c.network.num_classes,
                             inf_score.value_or(c.train.score_threshold), c.scene.geometry),
                      c.train.nms_iou);
      if (!g.out.empty()) {
        prepare_out_file(g.out, g.force);
        write_detections_csv(g.out, {dets});
      }
      out << dets.size() << " detections\n";
      for (const auto& d : dets) {
        out << "class " << d.class_id << " score " << d.score << " box " << d.box.x << "," << d.box.y << ","
            << d.box.w << "," << d.box.h << "\n";
      }
      return 0;
    }

    if (cost->parsed()) {
      std::optional<SpikeFpn> net;
      RunConfig c;
      if (!cost_ckpt.empty()) {
        Checkpoint ck = load_checkpoint(cost_ckpt);
        c = config_for_checkpoint(g, ck);
        net.emplace(network_from_checkpoint(ck));
      } else {
        c = base_config(g);
        net.emplace(c.network, mix_seed(g.seed, 7));
      }
      if (cost_samples < 1) throw UsageError("--samples must be >= 1");
      DatasetConfig dc = c.data;
      dc.samples = std::max(2, cost_samples);
      std::vector<Sample> samples = synthesize_samples(c.scene, c.encoder, dc, mix_seed(g.seed, 99));
      samples.resize(cost_samples);
      // an untrained network has no running statistics: use batch statistics
      const bool batch_stats = cost_ckpt.empty();
      ActivityRecord record;
      for (const auto& s : samples) {
        const FrameStack* ptr = &s.stack;
        ag::Tape tape(false);
        net->forward(tape, stacks_to_input({&ptr, 1}), {batch_stats, SpikeMode::Hard}, &record);
      }
      FiringReport report = record_firing(record, c.network.time_steps);
      nlohmann::json j = report_to_json(report);
      j["parameters"] = net->parameter_count();
      j["samples"] = cost_samples;
      const auto e = energy_estimate(report);
      out << "additions " << report.total_adds << "  head MACs " << report.head_macs << "  energy "
          << e.total_joules() * 1e3 << " mJ  mean rate " << report.mean_rate << "\n";
      if (!g.out.empty()) {
        prepare_out_file(g.out, g.force);
        write_text(g.out, j.dump(2) + "\n");
      }
      if (!cost_csv.empty()) {
        prepare_out_file(cost_csv, g.force);
        write_report_csv(cost_csv, report);
      }
      return 0;
    }

    if (sw->parsed()) {
      RunConfig c = base_config(g);
      const SweepAxis axis = sweep_axis_from_string(sw_axis);
      const auto values = split_list(sw_values);
      if (values.empty()) throw UsageError("sweep grid is empty");
      prepare_out_dir(g.out, g.force);
      write_text(fs::path(g.out) / "config.json", serialize(c));
      auto rows = run_sweep(c, axis, values, g.seed, g.out, thread_cap());
      out << sw_axis << ",map50,map50_95\n";
      for (const auto& r : rows) out << r.value << "," << r.map50 << "," << r.map50_95 << "\n";
      return 0;
    }
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace sfpn
