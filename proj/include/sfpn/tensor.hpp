#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sfpn::ag {

using Shape = std::vector<int>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;

  std::vector<double>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

/// Dense row-major real tensor. Copies share storage (handle semantics);
/// use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false) { return Tensor(std::move(shape), requires_grad); }
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false) { return full({1}, value, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::span<double> data() { return node_->value; }
  std::span<const double> data() const { return node_->value; }
  double item() const;
  double operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return node_ && node_->grad.size() == node_->value.size() && !node_->value.empty(); }
  /// Gradient storage, allocated (zeroed) on first access.
  std::span<double> grad() { return node_->ensure_grad(); }
  std::span<const double> grad() const { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy without gradient history.
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode record. Ops executed against a recording tape push a
/// backward closure; backward() replays them in exact reverse order and
/// gradients accumulate additively into every consumer's input.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  void set_recording(bool on) { recording_ = on; }

  bool check_finite() const { return check_finite_; }
  void set_check_finite(bool on) { check_finite_ = on; }

  void record(std::function<void()> backward) { ops_.push_back(std::move(backward)); }
  std::size_t size() const { return ops_.size(); }

  /// Seeds d(root)/d(root) = seed elementwise and runs the recorded ops in
  /// reverse. The tape is cleared afterwards.
  void backward(const Tensor& root, double seed = 1.0);
  void clear() { ops_.clear(); }

  /// Throws NonFiniteError naming `op` if checking is enabled and the tensor
  /// holds a NaN or infinity.
  void verify(const Tensor& t, const char* op) const;

 private:
  bool recording_;
  bool check_finite_ = false;
  std::vector<std::function<void()>> ops_;
};

}  // namespace sfpn::ag
