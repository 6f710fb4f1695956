#include "dit/tensor.hpp"

#include <cassert>
#include <sstream>
#include <unordered_set>

namespace dit {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

ShapeError::ShapeError(const std::string& op, const Shape& a, const Shape& b)
    : std::invalid_argument(op + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b)) {}

float* Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0f);
  return grad.data();
}

namespace {
thread_local bool g_grad_enabled = true;

std::shared_ptr<Node> make_leaf(Shape shape, std::vector<float> values, bool requires_grad) {
  if (values.size() != shape_numel(shape)) {
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  }
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return n;
}
}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<float>(n, 0.0f), requires_grad));
}

Tensor Tensor::full(Shape shape, float v, bool requires_grad) {
  auto n = shape_numel(shape);
  return Tensor(make_leaf(std::move(shape), std::vector<float>(n, v), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<float> values, bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(float v) { return from({1}, {v}); }

std::size_t Tensor::dim(std::size_t i) const {
  if (i >= node_->shape.size()) {
    throw std::out_of_range("tensor dim " + std::to_string(i) + " of " + shape_str(node_->shape));
  }
  return node_->shape[i];
}

std::span<float> Tensor::grad() {
  node_->grad_buffer();
  return node_->grad;
}

std::span<const float> Tensor::grad() const {
  node_->grad_buffer();
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

float Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

void Tensor::backward() const {
  if (numel() != 1) {
    throw std::invalid_argument("backward() needs a scalar loss, got shape " + shape_str(shape()));
  }
  if (!node_->requires_grad) return;

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Node*> order;
  std::unordered_set<Node*> done;
  std::unordered_set<Node*> on_stack;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  on_stack.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (!child->requires_grad || done.count(child)) continue;
      assert(!on_stack.count(child) && "cycle in computation graph");
      on_stack.insert(child);
      stack.emplace_back(child, 0);
    } else {
      done.insert(n);
      on_stack.erase(n);
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0f);
  }
  node_->grad_buffer()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

namespace detail {

Tensor make_result(Shape shape, std::vector<float> value, const char* op,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  assert(n->value.size() == shape_numel(n->shape));
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) needs = needs || (t.defined() && t.requires_grad());
  }
  if (needs) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (auto& t : inputs) n->inputs.push_back(t.defined() ? t.node_ptr() : std::make_shared<Node>());
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

}  // namespace detail
}  // namespace dit
