#include "sfpn/spikefpn.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "sfpn/random.hpp"

namespace sfpn {

using ag::Tape;
using ag::Tensor;

struct RunContext {
  int steps = 1;
  int batch = 1;
  bool train = false;
  SpikeMode mode = SpikeMode::Hard;
  ActivityRecord* record = nullptr;
};

namespace {

// Mean |x| of each step's rows.
std::vector<double> activity_per_step(const Tensor& x, int steps) {
  std::vector<double> out(steps, 0.0);
  const std::size_t per_step = x.size() / steps;
  auto d = x.data();
  for (int t = 0; t < steps; ++t) {
    double acc = 0.0;
    for (std::size_t i = 0; i < per_step; ++i) acc += std::abs(d[t * per_step + i]);
    out[t] = per_step ? acc / static_cast<double>(per_step) : 0.0;
  }
  return out;
}

Tensor init_conv_weight(Rng& rng, int cout, int cin, int k) {
  Tensor w({cout, cin, k, k}, true);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
  for (double& v : w.data()) v = rng.uniform(-bound, bound);
  return w;
}

ConvBn make_conv_bn(double gamma, const std::string& name, Rng& rng, int cin, int cout, int k, int stride,
                    int out_h, int out_w) {
  ConvBn c;
  c.name = name;
  c.weight = init_conv_weight(rng, cout, cin, k);
  c.gamma = Tensor::full({cout}, gamma, true);
  c.beta = Tensor::zeros({cout}, true);
  c.bn = ag::BatchNormState(cout);
  c.stride = stride;
  c.padding = k / 2;
  c.out_h = out_h;
  c.out_w = out_w;
  return c;
}

struct Level {
  int channels;
  int h;
  int w;
};

}  // namespace

// ---- building blocks -------------------------------------------------------------

Tensor ConvBn::forward(Tape& tape, const Tensor& x, RunContext& ctx) {
  if (ctx.record) {
    ActivityRecord::Conv rec;
    rec.name = name;
    rec.input_activity = activity_per_step(x, ctx.steps);
    rec.dense_ops = static_cast<std::uint64_t>(weight.size()) * out_h * out_w;
    ctx.record->convs.push_back(std::move(rec));
  }
  if (folded) {
    return ag::add_channel_bias(tape, ag::conv2d(tape, x, folded->weight, stride, padding), folded->bias);
  }
  return ag::batch_norm(tape, ag::conv2d(tape, x, weight, stride, padding), gamma, beta, bn, ctx.train);
}

Tensor SpikingNeuron::run(Tape& tape, const Tensor& current, RunContext& ctx) const {
  LifParams params = lif;
  if (kind == NeuronKind::Binary) params.tau = 0.0;
  NeuronState state;
  std::vector<Tensor> spikes;
  spikes.reserve(ctx.steps);
  for (int t = 0; t < ctx.steps; ++t) {
    Tensor step = ctx.steps == 1 ? current : ag::slice_batch(tape, current, t * ctx.batch, ctx.batch);
    if (kind == NeuronKind::Alif) {
      spikes.push_back(alif_step(tape, state, step, params, tau_a, beta, surrogate, ctx.mode));
    } else {
      spikes.push_back(lif_step(tape, state, step, params, surrogate, ctx.mode));
    }
  }
  return ctx.steps == 1 ? spikes.front() : ag::concat_batch(tape, spikes);
}

Tensor SpikingBlock::forward(Tape& tape, std::span<const Tensor> inputs, RunContext& ctx) {
  if (inputs.size() != branches.size()) {
    throw std::logic_error(name + ": expected " + std::to_string(branches.size()) + " inputs");
  }
  Tensor current = branches[0].forward(tape, inputs[0], ctx);
  for (std::size_t i = 1; i < branches.size(); ++i) {
    current = ag::add(tape, current, branches[i].forward(tape, inputs[i], ctx));
  }
  Tensor spikes = neuron.run(tape, current, ctx);
  if (ctx.record) {
    ActivityRecord::Spiking rec;
    rec.name = name;
    rec.rate_per_step = activity_per_step(spikes, ctx.steps);
    rec.neurons = spikes.size() / (static_cast<std::size_t>(ctx.steps) * ctx.batch);
    ctx.record->spiking.push_back(std::move(rec));
    if (ctx.record->keep_tensors) ctx.record->boundaries.emplace_back(name, spikes);
  }
  return spikes;
}

// ---- spec ---------------------------------------------------------------------------

int NetworkSpec::total_cells() const {
  int n = 0;
  for (const auto& s : stages) n += s.cells;
  return n;
}

int NetworkSpec::stride() const {
  int s = 4;
  for (const auto& st : stages) s *= st.downsample ? 2 : 1;
  return s;
}

void NetworkSpec::validate() const {
  if (initial_channels <= 0 || num_classes <= 0 || num_anchors <= 0) {
    throw std::invalid_argument("network channel/class/anchor counts must be positive");
  }
  if (time_steps < 1 || frames_per_stack < 1) throw std::invalid_argument("time_steps and frames must be >= 1");
  if (!(bn_gamma_init > 0.0)) throw std::invalid_argument("bn_gamma_init must be positive");
  if (stages.size() < 3) throw std::invalid_argument("the pyramid needs at least three stages");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].cells < 1) throw std::invalid_argument("every stage needs at least one cell");
    if (i + 2 >= stages.size() && !stages[i].downsample) {
      throw std::invalid_argument("the last two stages must downsample so pyramid levels differ by 2x");
    }
  }
  if (height % stride() != 0 || width % stride() != 0) {
    throw std::invalid_argument("input geometry " + std::to_string(width) + "x" + std::to_string(height) +
                                " is not divisible by the network stride " + std::to_string(stride()));
  }
  if (node_divisor < 1 || (2 * initial_channels) % node_divisor != 0) {
    throw std::invalid_argument("2 * initial_channels must be divisible by the node divisor " +
                                std::to_string(node_divisor));
  }
  if (body_neuron == NeuronKind::Alif) throw std::invalid_argument("body neurons must be LIF or binary");
  lif.validate();
  if (first_layer_neuron == NeuronKind::Alif) alif().validate();
  SurrogateSpec::with_temperature(surrogate_temperature);
}

// ---- network -----------------------------------------------------------------------

SpikeFpn::SpikeFpn(const NetworkSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  Rng rng(mix_seed(seed, 0x5eed));
  const SurrogateSpec surrogate = SurrogateSpec::with_temperature(spec_.surrogate_temperature);
  tau_a_ = Tensor::scalar(spec_.alif_tau_a, spec_.first_layer_neuron == NeuronKind::Alif);
  beta_ = Tensor::scalar(spec_.alif_beta, spec_.first_layer_neuron == NeuronKind::Alif && spec_.train_beta);

  auto neuron = [&](NeuronKind kind) {
    SpikingNeuron n;
    n.kind = kind;
    n.lif = spec_.lif;
    n.tau_a = tau_a_;
    n.beta = beta_;
    n.surrogate = surrogate;
    return n;
  };
  auto block = [&](const std::string& name, NeuronKind kind, std::vector<ConvBn> branches) {
    SpikingBlock b;
    b.name = name;
    b.branches = std::move(branches);
    b.neuron = neuron(kind);
    return b;
  };

  const int ics = spec_.initial_channels;
  const int H = spec_.height, W = spec_.width;
  stem0_ = block("stem0", spec_.first_layer_neuron,
                 {make_conv_bn(spec_.bn_gamma_init, "stem0.b0", rng, spec_.frames_per_stack, ics, 3, 2, H / 2, W / 2)});
  stem1_ = block("stem1", spec_.body_neuron, {make_conv_bn(spec_.bn_gamma_init, "stem1.b0", rng, ics, 2 * ics, 3, 2, H / 4, W / 4)});

  std::vector<Level> levels{{ics, H / 2, W / 2}, {2 * ics, H / 4, W / 4}};
  Level current{2 * ics, H / 4, W / 4};
  const NeuronKind body = spec_.body_neuron;
  int index = 0;
  std::vector<int> stage_last;
  for (const auto& stage : spec_.stages) {
    for (int c = 0; c < stage.cells; ++c, ++index) {
      if (c == 0 && stage.downsample) current = {current.channels * 2, current.h / 2, current.w / 2};
      Cell cell;
      cell.name = "cell" + std::to_string(index);
      cell.fusion = spec_.fusion;
      cell.channels = current.channels;
      cell.height = current.h;
      cell.width = current.w;
      const int width = current.channels / spec_.node_divisor;

      auto make_align = [&](const Level& in, const std::string& tag) -> std::optional<SpikingBlock> {
        if (in.channels == current.channels && in.h == current.h && in.w == current.w) return std::nullopt;
        const int stride = in.h / current.h;
        if (stride < 1 || stride > 2 || in.h != current.h * stride || in.w != current.w * stride) {
          throw std::logic_error(cell.name + ": cannot align input of size " + std::to_string(in.h));
        }
        return block(cell.name + "." + tag, body,
                     {make_conv_bn(spec_.bn_gamma_init, cell.name + "." + tag + ".b0", rng, in.channels, current.channels, 1, stride,
                                   current.h, current.w)});
      };
      cell.align0 = make_align(levels[index], "align0");
      cell.align1 = make_align(levels[index + 1], "align1");

      auto node = [&](const std::string& tag, int cin) {
        return block(cell.name + "." + tag, body,
                     {make_conv_bn(spec_.bn_gamma_init, cell.name + "." + tag + ".b0", rng, cin, width, 3, 1, current.h, current.w),
                      make_conv_bn(spec_.bn_gamma_init, cell.name + "." + tag + ".b1", rng, cin, width, 3, 1, current.h, current.w)});
      };
      cell.node0 = node("node0", current.channels);
      cell.node1 = node("node1", current.channels);
      cell.node2 = node("node2", width);
      const int fused = spec_.fusion == CellFusion::Sum ? width : 3 * width;
      cell.output = block(cell.name + ".out", body,
                          {make_conv_bn(spec_.bn_gamma_init, cell.name + ".out.b0", rng, fused, current.channels, 1, 1, current.h,
                                        current.w)});
      cells_.push_back(std::move(cell));
      levels.push_back(current);
    }
    stage_last.push_back(index - 1);
  }
  taps_.assign(stage_last.end() - 3, stage_last.end());

  const Cell& c1 = cells_[taps_[0]];
  const Cell& c2 = cells_[taps_[1]];
  const Cell& c3 = cells_[taps_[2]];
  const int p3c = c3.channels / 2, p2c = c2.channels / 2, p1c = c1.channels / 2;
  fpn3_ = block("p3", body, {make_conv_bn(spec_.bn_gamma_init, "p3.b0", rng, c3.channels, p3c, 1, 1, c3.height, c3.width)});
  fpn2_ = block("p2", body, {make_conv_bn(spec_.bn_gamma_init, "p2.b0", rng, p3c + c2.channels, p2c, 1, 1, c2.height, c2.width)});
  fpn1_ = block("p1", body, {make_conv_bn(spec_.bn_gamma_init, "p1.b0", rng, p2c + c1.channels, p1c, 1, 1, c1.height, c1.width)});

  const std::vector<std::pair<int, const Cell*>> pyramid{{p1c, &c1}, {p2c, &c2}, {p3c, &c3}};
  for (std::size_t d = 0; d < pyramid.size(); ++d) {
    const auto [ch, cell] = pyramid[d];
    DetectionHead head;
    head.name = "head" + std::to_string(d + 1);
    head.block = block(head.name, body,
                       {make_conv_bn(spec_.bn_gamma_init, head.name + ".b0", rng, ch, ch, 3, 1, cell->height, cell->width)});
    head.weight = init_conv_weight(rng, spec_.head_channels(), ch, 1);
    head.bias = Tensor::zeros({spec_.head_channels()}, true);
    for (int k = 0; k < spec_.num_anchors; ++k) {
      head.bias.data()[k * (spec_.num_classes + 5) + 4] = spec_.head_conf_bias;
    }
    head.stride = H / cell->height;
    heads_.push_back(std::move(head));
  }
}

template <typename Fn>
void SpikeFpn::for_each_block(Fn&& fn) {
  fn(stem0_);
  fn(stem1_);
  for (auto& c : cells_) {
    if (c.align0) fn(*c.align0);
    if (c.align1) fn(*c.align1);
    fn(c.node0);
    fn(c.node1);
    fn(c.node2);
    fn(c.output);
  }
  fn(fpn3_);
  fn(fpn2_);
  fn(fpn1_);
  for (auto& h : heads_) fn(h.block);
}

template <typename Fn>
void SpikeFpn::for_each_block(Fn&& fn) const {
  const_cast<SpikeFpn*>(this)->for_each_block([&](const SpikingBlock& b) { fn(b); });
}

HeadOutput SpikeFpn::forward(Tape& tape, const Tensor& input, const ForwardOptions& options, ActivityRecord* record) {
  const int steps = spec_.time_steps;
  if (input.rank() != 4 || input.dim(0) % steps != 0 || input.dim(0) == 0 || input.dim(1) != spec_.frames_per_stack ||
      input.dim(2) != spec_.height || input.dim(3) != spec_.width) {
    throw ag::ShapeError("network input " + ag::to_string(input.shape()) + " does not match [S*N," +
                         std::to_string(spec_.frames_per_stack) + "," + std::to_string(spec_.height) + "," +
                         std::to_string(spec_.width) + "] with S=" + std::to_string(steps));
  }
  if (folded_ && options.train) throw std::logic_error("a BN-folded network cannot be trained");
  RunContext ctx{steps, input.dim(0) / steps, options.train, options.mode, record};

  auto keep = [&](const std::string& name, const Tensor& t) {
    if (record && record->keep_tensors) record->boundaries.emplace_back(name, t);
  };

  std::vector<Tensor> levels;
  levels.push_back(stem0_.forward(tape, std::span(&input, 1), ctx));
  levels.push_back(stem1_.forward(tape, std::span(&levels.back(), 1), ctx));
  for (std::size_t i = 0; i < cells_.size(); ++i) {
    Cell& cell = cells_[i];
    Tensor s0 = levels[i];
    Tensor s1 = levels[i + 1];
    if (cell.align0) s0 = cell.align0->forward(tape, std::span(&s0, 1), ctx);
    if (cell.align1) s1 = cell.align1->forward(tape, std::span(&s1, 1), ctx);
    const Tensor pair[2] = {s0, s1};
    Tensor n0 = cell.node0.forward(tape, pair, ctx);
    Tensor n1 = cell.node1.forward(tape, pair, ctx);
    const Tensor inner[2] = {n0, n1};
    Tensor n2 = cell.node2.forward(tape, inner, ctx);
    Tensor fused = cell.fusion == CellFusion::Sum
                       ? ag::add(tape, ag::add(tape, n0, n1), n2)
                       : ag::concat_channels(tape, ag::concat_channels(tape, n0, n1), n2);
    levels.push_back(cell.output.forward(tape, std::span(&fused, 1), ctx));
    keep(cell.name, levels.back());
  }

  const Tensor& c1 = levels[taps_[0] + 2];
  const Tensor& c2 = levels[taps_[1] + 2];
  const Tensor& c3 = levels[taps_[2] + 2];
  Tensor p3 = fpn3_.forward(tape, std::span(&c3, 1), ctx);
  Tensor in2 = ag::concat_channels(tape, ag::upsample_nearest_x2(tape, p3), c2);
  Tensor p2 = fpn2_.forward(tape, std::span(&in2, 1), ctx);
  Tensor in1 = ag::concat_channels(tape, ag::upsample_nearest_x2(tape, p2), c1);
  Tensor p1 = fpn1_.forward(tape, std::span(&in1, 1), ctx);

  HeadOutput out;
  const Tensor pyramid[3] = {p1, p2, p3};
  for (std::size_t d = 0; d < heads_.size(); ++d) {
    DetectionHead& head = heads_[d];
    Tensor spikes = head.block.forward(tape, std::span(&pyramid[d], 1), ctx);
    Tensor last = steps == 1 ? spikes : ag::slice_batch(tape, spikes, (steps - 1) * ctx.batch, ctx.batch);
    if (record) {
      ActivityRecord::Conv rec;
      rec.name = head.name + ".out";
      rec.input_activity = activity_per_step(last, 1);
      rec.dense_ops = static_cast<std::uint64_t>(head.weight.size()) * last.dim(2) * last.dim(3);
      rec.real_valued = true;
      record->convs.push_back(std::move(rec));
    }
    Tensor logits = ag::add_channel_bias(tape, ag::conv2d(tape, last, head.weight, 1, 0), head.bias);
    keep("d" + std::to_string(d + 1), logits);
    out.scales.push_back(logits);
    out.strides.push_back(head.stride);
  }
  return out;
}

std::vector<NamedTensor> SpikeFpn::parameters() {
  std::vector<NamedTensor> out;
  for_each_block([&](SpikingBlock& b) {
    for (auto& br : b.branches) {
      out.push_back({br.name + ".weight", br.weight});
      out.push_back({br.name + ".gamma", br.gamma});
      out.push_back({br.name + ".beta", br.beta});
    }
  });
  for (auto& h : heads_) {
    out.push_back({h.name + ".out.weight", h.weight});
    out.push_back({h.name + ".out.bias", h.bias});
  }
  if (tau_a_.requires_grad()) out.push_back({"neuron.tau_a", tau_a_});
  if (beta_.requires_grad()) out.push_back({"neuron.beta", beta_});
  return out;
}

std::size_t SpikeFpn::parameter_count() const {
  std::size_t n = 0;
  for (auto& p : const_cast<SpikeFpn*>(this)->parameters()) n += p.tensor.size();
  return n;
}

std::vector<NamedTensor> SpikeFpn::state() const {
  if (folded_) throw std::logic_error("state() of a BN-folded network is not supported");
  std::vector<NamedTensor> out;
  for_each_block([&](const SpikingBlock& b) {
    for (const auto& br : b.branches) {
      const int c = br.gamma.dim(0);
      out.push_back({br.name + ".weight", br.weight});
      out.push_back({br.name + ".gamma", br.gamma});
      out.push_back({br.name + ".beta", br.beta});
      out.push_back({br.name + ".running_mean", Tensor({c}, br.bn.running_mean)});
      out.push_back({br.name + ".running_var", Tensor({c}, br.bn.running_var)});
      out.push_back({br.name + ".bn_initialized", Tensor::scalar(br.bn.initialized ? 1.0 : 0.0)});
    }
  });
  for (const auto& h : heads_) {
    out.push_back({h.name + ".out.weight", h.weight});
    out.push_back({h.name + ".out.bias", h.bias});
  }
  out.push_back({"neuron.tau_a", tau_a_});
  out.push_back({"neuron.beta", beta_});
  return out;
}

void SpikeFpn::load_state(const std::map<std::string, Tensor>& tensors) {
  if (folded_) throw std::logic_error("cannot load state into a BN-folded network");
  auto fetch = [&](const std::string& name, const ag::Shape& shape) -> const Tensor& {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::runtime_error("checkpoint is missing tensor '" + name + "'");
    if (it->second.shape() != shape) {
      throw std::runtime_error("checkpoint tensor '" + name + "' has shape " + ag::to_string(it->second.shape()) +
                               ", network expects " + ag::to_string(shape));
    }
    return it->second;
  };
  auto copy_into = [&](const std::string& name, Tensor& dst) {
    const Tensor& src = fetch(name, dst.shape());
    std::copy(src.data().begin(), src.data().end(), dst.data().begin());
  };
  for_each_block([&](SpikingBlock& b) {
    for (auto& br : b.branches) {
      const int c = br.gamma.dim(0);
      copy_into(br.name + ".weight", br.weight);
      copy_into(br.name + ".gamma", br.gamma);
      copy_into(br.name + ".beta", br.beta);
      const Tensor& rm = fetch(br.name + ".running_mean", {c});
      const Tensor& rv = fetch(br.name + ".running_var", {c});
      br.bn.running_mean.assign(rm.data().begin(), rm.data().end());
      br.bn.running_var.assign(rv.data().begin(), rv.data().end());
      br.bn.initialized = fetch(br.name + ".bn_initialized", {1}).item() != 0.0;
    }
  });
  for (auto& h : heads_) {
    copy_into(h.name + ".out.weight", h.weight);
    copy_into(h.name + ".out.bias", h.bias);
  }
  copy_into("neuron.tau_a", tau_a_);
  copy_into("neuron.beta", beta_);
}

void SpikeFpn::fold_batch_norm() {
  if (folded_) return;
  for_each_block([](SpikingBlock& b) {
    for (auto& br : b.branches) br.folded = ag::fold_bn_into_conv(br.weight, br.gamma, br.beta, br.bn);
  });
  folded_ = true;
}

void SpikeFpn::project_constraints() {
  auto d = tau_a_.data();
  d[0] = std::clamp(d[0], spec_.alif_tau_a_lo, spec_.alif_tau_a_hi);
}

std::vector<LayerShape> SpikeFpn::layer_shapes() const {
  std::vector<LayerShape> out;
  auto of = [](const SpikingBlock& b) { return b.branches.front(); };
  out.push_back({"stem0", stem0_.out_channels(), of(stem0_).out_h, of(stem0_).out_w});
  out.push_back({"stem1", stem1_.out_channels(), of(stem1_).out_h, of(stem1_).out_w});
  for (const auto& c : cells_) out.push_back({c.name, c.channels, c.height, c.width});
  for (const auto* b : {&fpn1_, &fpn2_, &fpn3_}) {
    out.push_back({b->name, b->out_channels(), of(*b).out_h, of(*b).out_w});
  }
  for (std::size_t d = 0; d < heads_.size(); ++d) {
    const auto& h = heads_[d];
    out.push_back({"d" + std::to_string(d + 1), h.weight.dim(0), of(h.block).out_h, of(h.block).out_w});
  }
  return out;
}

std::vector<ConvLayerInfo> SpikeFpn::conv_layers() const {
  std::vector<ConvLayerInfo> out;
  for_each_block([&](const SpikingBlock& b) {
    for (const auto& br : b.branches) {
      out.push_back({br.name, br.weight.dim(1), br.weight.dim(0), br.weight.dim(2), br.out_h, br.out_w, false});
    }
  });
  for (const auto& h : heads_) {
    const auto& last = h.block.branches.front();
    out.push_back({h.name + ".out", h.weight.dim(1), h.weight.dim(0), 1, last.out_h, last.out_w, true});
  }
  return out;
}

SpikeFpn build_network(const NetworkSpec& spec, std::uint64_t seed) { return SpikeFpn(spec, seed); }

Tensor stacks_to_input(std::span<const FrameStack* const> batch) {
  if (batch.empty()) throw std::invalid_argument("empty batch");
  const FrameStack& first = *batch.front();
  const int n = static_cast<int>(batch.size());
  Tensor out({first.stacks * n, first.frames, first.height, first.width});
  auto d = out.data();
  const std::size_t per_step = static_cast<std::size_t>(first.frames) * first.height * first.width;
  for (int i = 0; i < n; ++i) {
    const FrameStack& s = *batch[i];
    if (s.stacks != first.stacks || s.frames != first.frames || s.height != first.height || s.width != first.width) {
      throw ag::ShapeError("frame stacks in a batch must share one shape");
    }
    for (int t = 0; t < s.stacks; ++t) {
      const std::size_t dst = (static_cast<std::size_t>(t) * n + i) * per_step;
      for (std::size_t k = 0; k < per_step; ++k) d[dst + k] = s.data[t * per_step + k];
    }
  }
  return out;
}

const char* to_string(NeuronKind kind) {
  switch (kind) {
    case NeuronKind::Lif: return "lif";
    case NeuronKind::Alif: return "alif";
    case NeuronKind::Binary: return "binary";
  }
  return "?";
}

NeuronKind neuron_kind_from_string(const std::string& s) {
  if (s == "lif") return NeuronKind::Lif;
  if (s == "alif") return NeuronKind::Alif;
  if (s == "binary") return NeuronKind::Binary;
  throw std::invalid_argument("unknown neuron kind '" + s + "' (expected lif, alif or binary)");
}

const char* to_string(CellFusion fusion) { return fusion == CellFusion::Sum ? "sum" : "concat"; }

CellFusion cell_fusion_from_string(const std::string& s) {
  if (s == "sum") return CellFusion::Sum;
  if (s == "concat") return CellFusion::Concat;
  throw std::invalid_argument("unknown cell fusion '" + s + "' (expected sum or concat)");
}

}  // namespace sfpn
