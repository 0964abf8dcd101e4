#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sfpn/checkpoint.hpp"
#include "sfpn/cost_model.hpp"
#include "sfpn/dataset.hpp"
#include "sfpn/detection.hpp"
#include "sfpn/loss.hpp"
#include "sfpn/spikefpn.hpp"

namespace sfpn {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 5e-4;
  int epochs = 30;
  int batch_size = 8;
  bool warmup = true;  // linear ramp over epoch 0
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  LossWeights loss;
  double divergence_limit = 1e4;
  double score_threshold = 0.3;
  double nms_iou = 0.5;
  int eval_batch_size = 16;

  void validate() const;
};

struct OptimizerState {
  std::int64_t step = 0;
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
};

/// One decoupled-weight-decay Adam update over `params` (grads read from the
/// tensors). Throws NonFiniteError on a non-finite gradient.
void adamw_step(std::vector<NamedTensor>& params, OptimizerState& state, const TrainConfig& config, double lr);

/// Epoch 0: lr * max(0.05, step / steps_per_epoch); afterwards lr.
double lr_at(std::int64_t step, std::int64_t steps_per_epoch, const TrainConfig& config);

struct EvalResult {
  std::vector<std::vector<Detection>> predictions;
  MapReport map;
  FiringReport firing;
  double loss = 0.0;
};

/// Eval-mode forward over `samples`, decode + NMS, mAP and firing report.
EvalResult evaluate(SpikeFpn& net, const AnchorSet& anchors, const std::vector<Sample>& samples,
                    const TrainConfig& config);

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double map50 = 0.0;
  double map50_95 = 0.0;
  double lr = 0.0;
  double firing_rate_mean = 0.0;
  double first_layer_rate = 0.0;

  nlohmann::json to_json() const;
};

struct TrainOutputs {
  std::filesystem::path dir;  // empty: no files written
  nlohmann::json run_config = nlohmann::json::object();
  std::optional<Checkpoint> resume;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  double best_map50 = -1.0;
  int best_epoch = -1;
  bool diverged = false;
  std::string message;
};

/// Trains in place. With an output dir, writes metrics.jsonl, last.ckpt and
/// best.ckpt (highest validation mAP50). Loss and targets use the final
/// step's heads only. On divergence the network is restored to the last
/// completed epoch and the run stops.
TrainResult train(SpikeFpn& net, const AnchorSet& anchors, const Dataset& data, const TrainConfig& config,
                  std::uint64_t seed, const TrainOutputs& outputs = {});

}  // namespace sfpn
