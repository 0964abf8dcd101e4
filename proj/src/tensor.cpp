#include "sfpn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sfpn::ag {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ShapeError("negative dimension in " + to_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  node_->value.assign(numel(shape), 0.0);
  node_->shape = std::move(shape);
  node_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad) : node_(std::make_shared<detail::Node>()) {
  if (values.size() != numel(shape)) {
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " + to_string(shape));
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.node_->value.begin(), t.node_->value.end(), value);
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->value[0];
}

Tensor Tensor::clone() const { return Tensor(node_->shape, node_->value, node_->requires_grad); }

void Tape::backward(const Tensor& root, double seed) {
  if (!root.requires_grad()) throw std::logic_error("backward() on a tensor that does not require grad");
  auto& g = root.node()->ensure_grad();
  std::fill(g.begin(), g.end(), seed);
  for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  ops_.clear();
}

void Tape::verify(const Tensor& t, const char* op) const {
  if (!check_finite_) return;
  auto data = t.data();
  auto bad = std::find_if(data.begin(), data.end(), [](double v) { return !std::isfinite(v); });
  if (bad != data.end()) {
    throw NonFiniteError(std::string(op) + " produced a non-finite value at flat index " +
                         std::to_string(bad - data.begin()) + " of " + to_string(t.shape()));
  }
}

}  // namespace sfpn::ag
