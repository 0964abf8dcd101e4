#include "sfpn/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace sfpn {

using nlohmann::json;

namespace {

// Pulls known keys out of an object and rejects whatever is left.
class Reader {
 public:
  Reader(const json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError(where_ + ": expected an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where_ + "." + key + ": " + e.what());
    }
  }

  template <typename Fn>
  void with(const char* key, Fn&& fn) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    fn(j_.at(key), where_ + "." + key);
  }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!used_.count(k)) throw ConfigError(where_ + ": unknown key '" + k + "'");
    }
  }

 private:
  const json& j_;
  std::string where_;
  std::set<std::string> used_;
};

json size_json(const SizeRange& s) { return {{"min_w", s.min_w}, {"max_w", s.max_w}, {"min_h", s.min_h}, {"max_h", s.max_h}}; }

SizeRange size_from(const json& j, const std::string& where, SizeRange s) {
  Reader r(j, where);
  r.get("min_w", s.min_w);
  r.get("max_w", s.max_w);
  r.get("min_h", s.min_h);
  r.get("max_h", s.max_h);
  r.finish();
  return s;
}

json scene_json(const SceneConfig& c) {
  return {{"width", c.geometry.width},
          {"height", c.geometry.height},
          {"duration_us", c.duration_us},
          {"num_objects", c.num_objects},
          {"min_speed", c.min_speed},
          {"max_speed", c.max_speed},
          {"events_per_edge_pixel", c.events_per_edge_pixel},
          {"noise_rate", c.noise_rate},
          {"label_interval_us", c.label_interval_us},
          {"step_us", c.step_us},
          {"car_fraction", c.car_fraction},
          {"car_size", size_json(c.car_size)},
          {"pedestrian_size", size_json(c.pedestrian_size)}};
}

SceneConfig scene_from(const json& j, const std::string& where) {
  SceneConfig c;
  Reader r(j, where);
  r.get("width", c.geometry.width);
  r.get("height", c.geometry.height);
  r.get("duration_us", c.duration_us);
  r.get("num_objects", c.num_objects);
  r.get("min_speed", c.min_speed);
  r.get("max_speed", c.max_speed);
  r.get("events_per_edge_pixel", c.events_per_edge_pixel);
  r.get("noise_rate", c.noise_rate);
  r.get("label_interval_us", c.label_interval_us);
  r.get("step_us", c.step_us);
  r.get("car_fraction", c.car_fraction);
  r.with("car_size", [&](const json& v, const std::string& w) { c.car_size = size_from(v, w, c.car_size); });
  r.with("pedestrian_size",
         [&](const json& v, const std::string& w) { c.pedestrian_size = size_from(v, w, c.pedestrian_size); });
  r.finish();
  return c;
}

json encoder_json(const EncoderConfig& c) {
  return {{"mode", c.mode == StackingMode::Sbt ? "sbt" : "sbe"},
          {"delta_t_us", c.delta_t_us},
          {"frames_per_stack", c.frames_per_stack},
          {"stacks", c.stacks},
          {"events_per_frame", c.events_per_frame},
          {"height", c.height},
          {"width", c.width}};
}

EncoderConfig encoder_from(const json& j, const std::string& where) {
  EncoderConfig c;
  Reader r(j, where);
  std::string mode = c.mode == StackingMode::Sbt ? "sbt" : "sbe";
  r.get("mode", mode);
  if (mode == "sbt") {
    c.mode = StackingMode::Sbt;
  } else if (mode == "sbe") {
    c.mode = StackingMode::Sbe;
  } else {
    throw ConfigError(where + ".mode: expected sbt or sbe, got '" + mode + "'");
  }
  r.get("delta_t_us", c.delta_t_us);
  r.get("frames_per_stack", c.frames_per_stack);
  r.get("stacks", c.stacks);
  r.get("events_per_frame", c.events_per_frame);
  r.get("height", c.height);
  r.get("width", c.width);
  r.finish();
  return c;
}

json train_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"weight_decay", c.weight_decay},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"warmup", c.warmup},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"loss_box", c.loss.box},
          {"loss_conf", c.loss.conf},
          {"loss_cls", c.loss.cls},
          {"divergence_limit", c.divergence_limit},
          {"score_threshold", c.score_threshold},
          {"nms_iou", c.nms_iou},
          {"eval_batch_size", c.eval_batch_size}};
}

TrainConfig train_from(const json& j, const std::string& where) {
  TrainConfig c;
  Reader r(j, where);
  r.get("lr", c.lr);
  r.get("weight_decay", c.weight_decay);
  r.get("epochs", c.epochs);
  r.get("batch_size", c.batch_size);
  r.get("warmup", c.warmup);
  r.get("beta1", c.beta1);
  r.get("beta2", c.beta2);
  r.get("eps", c.eps);
  r.get("loss_box", c.loss.box);
  r.get("loss_conf", c.loss.conf);
  r.get("loss_cls", c.loss.cls);
  r.get("divergence_limit", c.divergence_limit);
  r.get("score_threshold", c.score_threshold);
  r.get("nms_iou", c.nms_iou);
  r.get("eval_batch_size", c.eval_batch_size);
  r.finish();
  return c;
}

json anchors_json(const AnchorSet& a) {
  json j = json::array();
  for (const auto& s : a.scales) {
    json row = json::array();
    for (auto [w, h] : s) row.push_back({w, h});
    j.push_back(row);
  }
  return j;
}

AnchorSet anchors_from(const json& j, const std::string& where) {
  AnchorSet a;
  try {
    for (const auto& row : j) {
      std::vector<std::pair<double, double>> s;
      for (const auto& wh : row) {
        if (!wh.is_array() || wh.size() != 2) throw ConfigError(where + ": anchors are [w, h] pairs");
        s.emplace_back(wh[0].get<double>(), wh[1].get<double>());
      }
      a.scales.push_back(s);
    }
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
  return a;
}

}  // namespace

json to_json(const NetworkSpec& s) {
  json stages = json::array();
  for (const auto& st : s.stages) stages.push_back({{"cells", st.cells}, {"downsample", st.downsample}});
  return {{"initial_channels", s.initial_channels},
          {"num_classes", s.num_classes},
          {"num_anchors", s.num_anchors},
          {"height", s.height},
          {"width", s.width},
          {"time_steps", s.time_steps},
          {"frames_per_stack", s.frames_per_stack},
          {"first_layer_neuron", to_string(s.first_layer_neuron)},
          {"body_neuron", to_string(s.body_neuron)},
          {"node_divisor", s.node_divisor},
          {"fusion", to_string(s.fusion)},
          {"tau", s.lif.tau},
          {"u_th", s.lif.u_th},
          {"alif_beta", s.alif_beta},
          {"alif_tau_a", s.alif_tau_a},
          {"alif_tau_a_lo", s.alif_tau_a_lo},
          {"alif_tau_a_hi", s.alif_tau_a_hi},
          {"train_beta", s.train_beta},
          {"surrogate_temperature", s.surrogate_temperature},
          {"head_conf_bias", s.head_conf_bias},
          {"bn_gamma_init", s.bn_gamma_init},
          {"stages", stages}};
}

static NetworkSpec network_from(const json& j, const std::string& where) {
  NetworkSpec s;
  Reader r(j, where);
  r.get("initial_channels", s.initial_channels);
  r.get("num_classes", s.num_classes);
  r.get("num_anchors", s.num_anchors);
  r.get("height", s.height);
  r.get("width", s.width);
  r.get("time_steps", s.time_steps);
  r.get("frames_per_stack", s.frames_per_stack);
  try {
    std::string v;
    v = to_string(s.first_layer_neuron);
    r.get("first_layer_neuron", v);
    s.first_layer_neuron = neuron_kind_from_string(v);
    v = to_string(s.body_neuron);
    r.get("body_neuron", v);
    s.body_neuron = neuron_kind_from_string(v);
    v = to_string(s.fusion);
    r.get("fusion", v);
    s.fusion = cell_fusion_from_string(v);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where + ": " + e.what());
  }
  r.get("node_divisor", s.node_divisor);
  r.get("tau", s.lif.tau);
  r.get("u_th", s.lif.u_th);
  r.get("alif_beta", s.alif_beta);
  r.get("alif_tau_a", s.alif_tau_a);
  r.get("alif_tau_a_lo", s.alif_tau_a_lo);
  r.get("alif_tau_a_hi", s.alif_tau_a_hi);
  r.get("train_beta", s.train_beta);
  r.get("surrogate_temperature", s.surrogate_temperature);
  r.get("head_conf_bias", s.head_conf_bias);
  r.get("bn_gamma_init", s.bn_gamma_init);
  r.with("stages", [&](const json& v, const std::string& w) {
    if (!v.is_array()) throw ConfigError(w + ": expected an array");
    s.stages.clear();
    for (std::size_t i = 0; i < v.size(); ++i) {
      StagePlan p;
      Reader sr(v[i], w + "[" + std::to_string(i) + "]");
      sr.get("cells", p.cells);
      sr.get("downsample", p.downsample);
      sr.finish();
      s.stages.push_back(p);
    }
  });
  r.finish();
  return s;
}

NetworkSpec network_spec_from_json(const json& j) { return network_from(j, "network"); }

RunConfig RunConfig::desk() {
  RunConfig c;
  c.scene.geometry = {64, 64};
  c.encoder.height = c.encoder.width = 64;
  c.network.initial_channels = 8;
  c.network.height = c.network.width = 64;
  c.network.time_steps = c.encoder.stacks = 3;
  c.network.frames_per_stack = c.encoder.frames_per_stack = 3;
  c.train.batch_size = 8;
  // tuned on the synthetic desk task (seed 1)
  c.train.lr = 3e-3;
  c.train.loss.box = 5.0;
  c.data.val_fraction = 0.2;
  return c;
}

void RunConfig::validate() const {
  if (version != kRunConfigVersion) {
    throw ConfigError("unsupported config version " + std::to_string(version) + " (expected " +
                      std::to_string(kRunConfigVersion) + ")");
  }
  try {
    scene.validate();
    encoder.validate();
    network.validate();
    train.validate();
    data.validate();
    anchors.validate(3, network.num_anchors);
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (encoder.width != scene.geometry.width || encoder.height != scene.geometry.height) {
    throw ConfigError("encoder geometry differs from the scene geometry");
  }
  if (network.width != encoder.width || network.height != encoder.height) {
    throw ConfigError("network input geometry differs from the encoder geometry");
  }
  if (network.time_steps != encoder.stacks || network.frames_per_stack != encoder.frames_per_stack) {
    throw ConfigError("network time_steps/frames_per_stack must equal encoder stacks/frames_per_stack");
  }
  if (encoder.mode == StackingMode::Sbt && encoder.history_us() > scene.duration_us) {
    throw ConfigError("scene duration is shorter than the encoder history (stacks * delta_t_us)");
  }
}

json to_json(const RunConfig& c) {
  return {{"version", c.version},
          {"scene", scene_json(c.scene)},
          {"encoder", encoder_json(c.encoder)},
          {"network", to_json(c.network)},
          {"train", train_json(c.train)},
          {"data", {{"samples", c.data.samples}, {"val_fraction", c.data.val_fraction}}},
          {"anchors", anchors_json(c.anchors)}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c = RunConfig::desk();
  Reader r(j, "config");
  r.get("version", c.version);
  r.with("scene", [&](const json& v, const std::string& w) { c.scene = scene_from(v, w); });
  r.with("encoder", [&](const json& v, const std::string& w) { c.encoder = encoder_from(v, w); });
  r.with("network", [&](const json& v, const std::string& w) { c.network = network_from(v, w); });
  r.with("train", [&](const json& v, const std::string& w) { c.train = train_from(v, w); });
  r.with("data", [&](const json& v, const std::string& w) {
    Reader dr(v, w);
    dr.get("samples", c.data.samples);
    dr.get("val_fraction", c.data.val_fraction);
    dr.finish();
  });
  r.with("anchors", [&](const json& v, const std::string& w) { c.anchors = anchors_from(v, w); });
  r.finish();
  return c;
}

std::string serialize(const RunConfig& config) { return to_json(config).dump(2) + "\n"; }

RunConfig parse_run_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return run_config_from_json(j);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

}  // namespace sfpn
