#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "nif/tensor.hpp"

namespace nif {

struct Node {
  Tensor value;
  // Allocated lazily on first accumulation.
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  Tensor& grad_buffer();
};

// Handle to a node in the dynamic computation graph.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  // Direct write access; only valid for leaves (parameters, inputs).
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(int axis) const { return node_->value.dim(axis); }
  int64_t numel() const { return node_->value.numel(); }
  double item() const { return node_->value.item(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  Tensor& mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor(); }

  // Reverse-mode sweep from this scalar. Leaf gradients accumulate across
  // calls; interior gradients are reset per call.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Creates an op result. The backward closure is dropped when no parent
// requires grad or grad mode is off.
Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// Convenience for closures: the parent's grad buffer, or nullptr when the
// parent does not participate in differentiation.
inline Tensor* parent_grad(Node& self, size_t i) {
  Node& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

}  // namespace nif
