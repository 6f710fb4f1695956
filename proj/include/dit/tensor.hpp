#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dit {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

/// Raised when operand shapes are incompatible. The message names both shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
  ShapeError(const std::string& op, const Shape& a, const Shape& b);
};

struct Node {
  Shape shape;
  std::vector<float> value;
  std::vector<float> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  float* grad_buffer();  // zero-initialises on first use
};

/// Dense row-major float32 tensor with reverse-mode gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage. Operations in
/// ops.hpp build a graph of Nodes when any input requires a gradient and
/// grad mode is enabled (see NoGradGuard).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, float v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float v);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const;
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<float> data() { return node_->value; }
  std::span<const float> data() const { return node_->value; }
  const std::vector<float>& values() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient view; zero-filled storage is created on first access.
  std::span<float> grad();
  std::span<const float> grad() const;
  void zero_grad();

  float item() const;
  /// Copy of the values with no graph history.
  Tensor detach() const;

  /// Reverse-mode accumulation from this scalar into every leaf requiring a
  /// gradient. Leaf gradients accumulate across calls; intermediate buffers
  /// are reset on each call.
  void backward() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

/// Disables graph construction for the lifetime of the guard (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

namespace detail {
/// Creates a result node; wires inputs and backward only when a gradient is
/// required by some input and grad mode is on.
Tensor make_result(Shape shape, std::vector<float> value, const char* op,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward);
}  // namespace detail

}  // namespace dit
