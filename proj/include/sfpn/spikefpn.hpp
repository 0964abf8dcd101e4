#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sfpn/encoding.hpp"
#include "sfpn/ops.hpp"
#include "sfpn/spiking.hpp"

namespace sfpn {

enum class NeuronKind { Lif, Alif, Binary };

/// How a cell merges its three node outputs before the 1x1 output block.
enum class CellFusion {
  Sum,     // spikes summed, one 1x1 conv (same as a shared conv per node)
  Concat,  // channel concatenation, 1x1 conv over 3x node width
};

struct StagePlan {
  int cells = 0;
  bool downsample = false;

  bool operator==(const StagePlan&) const = default;
};

struct NetworkSpec {
  int initial_channels = 48;
  int num_classes = 2;
  int num_anchors = 3;
  int height = 256;
  int width = 256;
  int time_steps = 3;        // S, one stack per step
  int frames_per_stack = 3;  // input channels per step
  NeuronKind first_layer_neuron = NeuronKind::Alif;
  NeuronKind body_neuron = NeuronKind::Lif;
  int node_divisor = 4;  // node width = cell channels / node_divisor
  CellFusion fusion = CellFusion::Sum;
  LifParams lif{0.2, 0.3};
  double alif_beta = 0.07;
  double alif_tau_a = 0.3;
  double alif_tau_a_lo = 0.2;
  double alif_tau_a_hi = 0.4;
  bool train_beta = false;
  double surrogate_temperature = 3.0;
  double head_conf_bias = -2.0;
  double bn_gamma_init = 0.25;  // a unit scale makes the deep spiking stack chaotic
  std::vector<StagePlan> stages{{2, false}, {3, true}, {3, true}, {2, true}};

  void validate() const;
  int total_cells() const;
  int stride() const;  // total downsampling
  int head_channels() const { return num_anchors * (num_classes + 5); }
  AlifParams alif() const { return {lif, alif_beta, alif_tau_a, alif_tau_a_lo, alif_tau_a_hi}; }
};

/// Per-step activity captured during a forward pass.
struct ActivityRecord {
  struct Spiking {
    std::string name;
    std::vector<double> rate_per_step;  // fraction of neurons firing
    std::size_t neurons = 0;            // per sample per step
  };
  struct Conv {
    std::string name;
    std::vector<double> input_activity;  // mean |input| per step
    std::uint64_t dense_ops = 0;         // accumulations per sample per step at full density
    bool real_valued = false;            // head output conv, counted as MACs
  };
  std::vector<Spiking> spiking;
  std::vector<Conv> convs;
  bool keep_tensors = false;
  std::vector<std::pair<std::string, ag::Tensor>> boundaries;  // when keep_tensors
};

struct ForwardOptions {
  bool train = false;
  SpikeMode mode = SpikeMode::Hard;
};

/// Raw head outputs at the final time step, finest scale first:
/// [N, K*(C+5), H/8, W/8], [.., H/16, ..], [.., H/32, ..].
struct HeadOutput {
  std::vector<ag::Tensor> scales;
  std::vector<int> strides;
};

struct LayerShape {
  std::string name;
  int channels = 0;
  int height = 0;
  int width = 0;
};

struct ConvLayerInfo {
  std::string name;
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 0;
  int out_height = 0;
  int out_width = 0;
  bool real_valued = false;
  std::uint64_t dense_ops() const {
    return static_cast<std::uint64_t>(out_channels) * out_height * out_width * in_channels * kernel * kernel;
  }
};

struct NamedTensor {
  std::string name;
  ag::Tensor tensor;
};

struct RunContext;

struct ConvBn {
  std::string name;
  ag::Tensor weight;
  ag::Tensor gamma;
  ag::Tensor beta;
  ag::BatchNormState bn;
  int stride = 1;
  int padding = 0;
  std::optional<ag::FoldedConv> folded;
  int out_h = 0, out_w = 0;

  ag::Tensor forward(ag::Tape& tape, const ag::Tensor& x, RunContext& ctx);
};

struct SpikingNeuron {
  NeuronKind kind = NeuronKind::Lif;
  LifParams lif;
  ag::Tensor tau_a;  // shared across adaptive layers
  ag::Tensor beta;
  SurrogateSpec surrogate;

  /// Scans the neuron over time; current is [steps*N, ...] step-major.
  ag::Tensor run(ag::Tape& tape, const ag::Tensor& current, RunContext& ctx) const;
};

/// Convolution branches summed at the membrane, then one spiking activation.
struct SpikingBlock {
  std::string name;
  std::vector<ConvBn> branches;
  SpikingNeuron neuron;

  ag::Tensor forward(ag::Tape& tape, std::span<const ag::Tensor> inputs, RunContext& ctx);
  int out_channels() const { return branches.front().weight.dim(0); }
};

struct Cell {
  std::string name;
  std::optional<SpikingBlock> align0;
  std::optional<SpikingBlock> align1;
  SpikingBlock node0, node1, node2;
  SpikingBlock output;
  CellFusion fusion = CellFusion::Sum;
  int channels = 0;
  int height = 0, width = 0;
};

struct DetectionHead {
  std::string name;
  SpikingBlock block;
  ag::Tensor weight;  // 1x1, real-valued output
  ag::Tensor bias;
  int stride = 0;
};

class SpikeFpn {
 public:
  SpikeFpn(const NetworkSpec& spec, std::uint64_t seed);

  const NetworkSpec& spec() const { return spec_; }

  /// input: [S*N, frames, H, W], step-major (row s*N + n is step s of sample n).
  HeadOutput forward(ag::Tape& tape, const ag::Tensor& input, const ForwardOptions& options,
                     ActivityRecord* record = nullptr);

  /// Trainable tensors, in a fixed order.
  std::vector<NamedTensor> parameters();
  std::size_t parameter_count() const;

  /// Parameters plus BN running statistics, for checkpoints.
  std::vector<NamedTensor> state() const;
  void load_state(const std::map<std::string, ag::Tensor>& tensors);

  /// Replaces every conv+BN pair by an equivalent biased conv (inference only).
  void fold_batch_norm();
  bool folded() const { return folded_; }

  /// Analytic per-sample output shapes of every named stage (stems, cells,
  /// pyramid, heads).
  std::vector<LayerShape> layer_shapes() const;
  std::vector<ConvLayerInfo> conv_layers() const;

  ag::Tensor& tau_a() { return tau_a_; }
  const ag::Tensor& tau_a() const { return tau_a_; }
  /// Clamps tau_a into its configured box.
  void project_constraints();

 private:
  NetworkSpec spec_;
  ag::Tensor tau_a_;
  ag::Tensor beta_;
  SpikingBlock stem0_, stem1_;
  std::vector<Cell> cells_;
  std::vector<int> taps_;  // cell indices feeding the pyramid, finest first
  SpikingBlock fpn3_, fpn2_, fpn1_;
  std::vector<DetectionHead> heads_;  // finest first
  bool folded_ = false;

  template <typename Fn>
  void for_each_block(Fn&& fn);
  template <typename Fn>
  void for_each_block(Fn&& fn) const;
};

using NetworkGraph = SpikeFpn;

SpikeFpn build_network(const NetworkSpec& spec, std::uint64_t seed);

/// Packs stacks into a step-major input tensor [S*N, C, H, W].
ag::Tensor stacks_to_input(std::span<const FrameStack* const> batch);

const char* to_string(NeuronKind kind);
NeuronKind neuron_kind_from_string(const std::string& s);
const char* to_string(CellFusion fusion);
CellFusion cell_fusion_from_string(const std::string& s);

}  // namespace sfpn
