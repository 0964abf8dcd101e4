#include "sfpn/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "sfpn/random.hpp"

namespace sfpn {

namespace {

std::vector<std::vector<GtBox>> gts_of(const std::vector<const Sample*>& batch) {
  std::vector<std::vector<GtBox>> out;
  for (const auto* s : batch) out.push_back(s->boxes);
  return out;
}

ag::Tensor input_of(const std::vector<const Sample*>& batch) {
  std::vector<const FrameStack*> stacks;
  for (const auto* s : batch) stacks.push_back(&s->stack);
  return stacks_to_input(stacks);
}

nlohmann::json anchors_to_json(const AnchorSet& a) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& s : a.scales) {
    nlohmann::json row = nlohmann::json::array();
    for (auto [w, h] : s) row.push_back({w, h});
    j.push_back(row);
  }
  return j;
}

struct Snapshot {
  std::map<std::string, ag::Tensor> state;
  OptimizerState opt;
};

Snapshot take_snapshot(const SpikeFpn& net, const OptimizerState& opt) {
  Snapshot s;
  for (const auto& t : net.state()) s.state.emplace(t.name, t.tensor.clone());
  s.opt = opt;
  return s;
}

// Rounds the network and optimizer state to the f32 precision checkpoints
// store, so a resumed run continues from exactly the in-memory state.
void round_to_checkpoint_precision(SpikeFpn& net, OptimizerState& opt) {
  std::map<std::string, ag::Tensor> state;
  for (const auto& t : net.state()) {
    ag::Tensor c = t.tensor.clone();
    for (double& v : c.data()) v = static_cast<float>(v);
    state.emplace(t.name, c);
  }
  net.load_state(state);
  for (auto* moments : {&opt.m, &opt.v}) {
    for (auto& m : *moments) {
      for (double& v : m) v = static_cast<float>(v);
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("weight_decay must be >= 0");
  if (epochs < 1 || batch_size < 1 || eval_batch_size < 1) throw std::invalid_argument("epochs and batch sizes must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && eps > 0.0)) {
    throw std::invalid_argument("invalid AdamW moments configuration");
  }
  if (loss.box < 0.0 || loss.conf < 0.0 || loss.cls < 0.0) throw std::invalid_argument("loss weights must be >= 0");
  if (!(divergence_limit > 0.0)) throw std::invalid_argument("divergence_limit must be positive");
  if (score_threshold < 0.0 || score_threshold > 1.0) throw std::invalid_argument("score_threshold must lie in [0,1]");
  if (nms_iou <= 0.0 || nms_iou > 1.0) throw std::invalid_argument("nms_iou must lie in (0,1]");
}

void adamw_step(std::vector<NamedTensor>& params, OptimizerState& state, const TrainConfig& config, double lr) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].tensor;
    if (state.m[i].size() != p.size()) {
      state.m[i].assign(p.size(), 0.0);
      state.v[i].assign(p.size(), 0.0);
    }
    if (p.has_grad()) {
      for (double g : p.grad()) {
        if (!std::isfinite(g)) throw ag::NonFiniteError("non-finite gradient in " + params[i].name);
      }
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * config.weight_decay;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i].tensor;
    auto w = p.data();
    const bool has = p.has_grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double g = has ? p.grad()[k] : 0.0;
      m[k] = config.beta1 * m[k] + (1.0 - config.beta1) * g;
      v[k] = config.beta2 * v[k] + (1.0 - config.beta2) * g * g;
      w[k] *= decay;
      w[k] -= lr * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + config.eps);
    }
  }
}

double lr_at(std::int64_t step, std::int64_t steps_per_epoch, const TrainConfig& config) {
  if (steps_per_epoch <= 0) throw std::invalid_argument("steps_per_epoch must be positive");
  if (!config.warmup || step >= steps_per_epoch) return config.lr;
  return config.lr * std::max(0.05, static_cast<double>(step) / static_cast<double>(steps_per_epoch));
}

nlohmann::json EpochMetrics::to_json() const {
  return {{"epoch", epoch},       {"train_loss", train_loss}, {"map50", map50},
          {"map50_95", map50_95}, {"lr", lr},                 {"firing_rate_mean", firing_rate_mean},
          {"first_layer_rate", first_layer_rate}};
}

EvalResult evaluate(SpikeFpn& net, const AnchorSet& anchors, const std::vector<Sample>& samples,
                    const TrainConfig& config) {
  if (samples.empty()) throw std::invalid_argument("evaluate: no samples");
  const auto& spec = net.spec();
  EvalResult r;
  ActivityRecord record;
  std::vector<std::vector<GtBox>> gts;
  double loss_sum = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += config.eval_batch_size) {
    std::vector<const Sample*> batch;
    for (std::size_t i = start; i < std::min(samples.size(), start + config.eval_batch_size); ++i) {
      batch.push_back(&samples[i]);
    }
    ag::Tape tape(false);
    HeadOutput head = net.forward(tape, input_of(batch), {false, SpikeMode::Hard}, &record);
    const auto batch_gts = gts_of(batch);
    LossBreakdown lb;
    detection_loss(tape, head, assign_targets(batch_gts, anchors, head), anchors, spec.num_classes, config.loss, &lb);
    loss_sum += lb.total * batch.size();
    for (std::size_t n = 0; n < batch.size(); ++n) {
      auto dets = decode(head, anchors, spec.num_classes, config.score_threshold, {spec.width, spec.height},
                         static_cast<int>(n));
      r.predictions.push_back(nms(dets, config.nms_iou));
      gts.push_back(batch_gts[n]);
    }
  }
  r.loss = loss_sum / samples.size();
  r.map = evaluate_map(r.predictions, gts, spec.num_classes);
  r.firing = record_firing(record, spec.time_steps);
  return r;
}

TrainResult train(SpikeFpn& net, const AnchorSet& anchors, const Dataset& data, const TrainConfig& config,
                  std::uint64_t seed, const TrainOutputs& outputs) {
  config.validate();
  if (data.train.empty() || data.val.empty()) throw std::invalid_argument("train: empty train or validation split");
  const auto& spec = net.spec();
  anchors.validate(3, spec.num_anchors);

  auto params = net.parameters();
  OptimizerState opt;
  TrainResult result;
  int start_epoch = 0;

  if (outputs.resume) {
    const Checkpoint& ck = *outputs.resume;
    const auto tensors = ck.by_name();
    net.load_state(tensors);
    opt.step = ck.header.value("optimizer_step", std::int64_t{0});
    for (const auto& p : params) {
      auto m = tensors.find("adam.m." + p.name);
      auto v = tensors.find("adam.v." + p.name);
      if (m == tensors.end() || v == tensors.end()) {
        throw CheckpointError("resume checkpoint lacks optimizer moments for " + p.name);
      }
      opt.m.emplace_back(m->second.data().begin(), m->second.data().end());
      opt.v.emplace_back(v->second.data().begin(), v->second.data().end());
    }
    start_epoch = ck.header.value("epoch", -1) + 1;
    result.best_map50 = ck.header.value("best_map50", -1.0);
    result.best_epoch = ck.header.value("best_epoch", -1);
  }

  std::ofstream metrics;
  if (!outputs.dir.empty()) {
    std::filesystem::create_directories(outputs.dir);
    metrics.open(outputs.dir / "metrics.jsonl", outputs.resume ? std::ios::app : std::ios::trunc);
    if (!metrics) throw std::runtime_error("cannot write metrics log in " + outputs.dir.string());
  }

  auto save = [&](const std::filesystem::path& path, int epoch) {
    nlohmann::json meta = {{"epoch", epoch},
                           {"best_map50", result.best_map50},
                           {"best_epoch", result.best_epoch},
                           {"optimizer_step", opt.step},
                           {"seed", seed},
                           {"anchors", anchors_to_json(anchors)},
                           {"run_config", outputs.run_config}};
    Checkpoint ck = make_checkpoint(net, meta);
    for (std::size_t i = 0; i < params.size() && i < opt.m.size(); ++i) {
      ck.tensors.push_back({"adam.m." + params[i].name, ag::Tensor(params[i].tensor.shape(), opt.m[i])});
      ck.tensors.push_back({"adam.v." + params[i].name, ag::Tensor(params[i].tensor.shape(), opt.v[i])});
    }
    save_checkpoint(path, ck);
  };

  const std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(data.train.size()) + config.batch_size - 1) / config.batch_size;
  Snapshot good = take_snapshot(net, opt);

  for (int epoch = start_epoch; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(data.train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(mix_seed(seed, 1000 + epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

    double loss_sum = 0.0, lr = config.lr;
    std::string failure;
    for (std::size_t start = 0; start < order.size() && failure.empty(); start += config.batch_size) {
      std::vector<const Sample*> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + config.batch_size); ++i) {
        batch.push_back(&data.train[order[i]]);
      }
      lr = lr_at(opt.step, steps_per_epoch, config);
      for (auto& p : params) p.tensor.zero_grad();
      try {
        ag::Tape tape;
        HeadOutput head = net.forward(tape, input_of(batch), {true, SpikeMode::Hard});
        const auto gts = gts_of(batch);
        ag::Tensor loss =
            detection_loss(tape, head, assign_targets(gts, anchors, head), anchors, spec.num_classes, config.loss);
        if (loss.item() > config.divergence_limit) {
          failure = "loss " + std::to_string(loss.item()) + " exceeds the divergence limit";
          break;
        }
        tape.backward(loss);
        adamw_step(params, opt, config, lr);
        net.project_constraints();
        loss_sum += loss.item() * batch.size();
      } catch (const ag::NonFiniteError& e) {
        failure = e.what();
      }
    }
    if (!failure.empty()) {
      net.load_state(good.state);
      opt = good.opt;
      result.diverged = true;
      result.message = "training diverged in epoch " + std::to_string(epoch) + ": " + failure +
                       "; restored the last completed epoch";
      break;
    }

    round_to_checkpoint_precision(net, opt);

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / data.train.size();
    m.lr = lr;
    EvalResult ev = evaluate(net, anchors, data.val, config);
    m.map50 = ev.map.map50;
    m.map50_95 = ev.map.map50_95;
    m.firing_rate_mean = ev.firing.mean_rate;
    if (const auto* l = ev.firing.layer("stem0")) m.first_layer_rate = l->rate;
    result.history.push_back(m);
    if (m.map50 > result.best_map50) {
      result.best_map50 = m.map50;
      result.best_epoch = epoch;
      if (!outputs.dir.empty()) save(outputs.dir / "best.ckpt", epoch);
    }
    if (metrics.is_open()) metrics << m.to_json().dump() << '\n' << std::flush;
    if (!outputs.dir.empty()) save(outputs.dir / "last.ckpt", epoch);
    if (outputs.on_epoch) outputs.on_epoch(m);
    good = take_snapshot(net, opt);
  }
  return result;
}

}  // namespace sfpn
