#pragma once

#include <functional>
#include <memory>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sadi/matrix.hpp"

namespace sadi::nn {

class GradBuffer;

// One vertex of the reverse-mode tape. `backward` receives dL/d(value) and
// accumulates into the parents' entries of a GradBuffer.
struct TensorNode {
  Matrix value;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const Matrix&, GradBuffer&)> backward;
};

// Thread-local autodiff switch. With grad mode off, ops compute values only
// and record no tape; forward-only paths (sampling, evaluation) rely on this.
inline bool& grad_mode() {
  thread_local bool on = true;
  return on;
}

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

// Value-semantics handle onto a shared tape node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

  // Leaf tensor. Parameters pass requires_grad=true; data enters the graph
  // as constants with requires_grad=false.
  explicit Tensor(Matrix m, bool requires_grad = false) : n_(std::make_shared<TensorNode>()) {
    n_->value = std::move(m);
    n_->requires_grad = requires_grad && grad_mode();
  }

  static Tensor constant(Matrix m) { return Tensor(std::move(m), false); }

  // Trainable leaf; tracked unconditionally, independent of the current
  // grad mode (parameter stores may be built inside no-grad scopes).
  static Tensor param(Matrix m) {
    Tensor t(std::move(m), false);
    t.n_->requires_grad = true;
    return t;
  }

  bool defined() const { return n_ != nullptr; }
  const Matrix& value() const { return n_->value; }
  Matrix& mutable_value() { return n_->value; }
  int rows() const { return n_->value.rows; }
  int cols() const { return n_->value.cols; }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  const std::shared_ptr<TensorNode>& node() const { return n_; }

 private:
  std::shared_ptr<TensorNode> n_;
};

// Gradients live outside the nodes so concurrent backward passes over shared
// parameters stay independent; each pass owns its buffer.
class GradBuffer {
 public:
  // Get-or-create the accumulator for a node, zero-initialized to its shape.
  Matrix& acc(const TensorNode* n) {
    auto it = g_.find(n);
    if (it == g_.end()) it = g_.emplace(n, Matrix(n->value.rows, n->value.cols)).first;
    return it->second;
  }

  const Matrix* find(const TensorNode* n) const {
    auto it = g_.find(n);
    return it == g_.end() ? nullptr : &it->second;
  }
  const Matrix* find(const Tensor& t) const { return find(t.node().get()); }

  void clear() { g_.clear(); }
  size_t entries() const { return g_.size(); }

 private:
  std::unordered_map<const TensorNode*, Matrix> g_;
};

inline void add_into(Matrix& dst, const Matrix& src) {
  check_same_shape(dst, src, "add_into");
  for (size_t i = 0; i < dst.v.size(); ++i) dst.v[i] += src.v[i];
}

// Reverse-mode sweep from a scalar root. Topological order is built
// iteratively; graphs grow linearly in network depth and must not be limited
// by stack size.
inline void backprop(const Tensor& root, GradBuffer& buf) {
  if (!root.defined()) throw ArgError("backprop: undefined tensor");
  if (root.rows() != 1 || root.cols() != 1) throw DimError("backprop: root must be 1x1, got " + shape_str(root.value()));
  if (!root.requires_grad()) throw ArgError("backprop: root does not require grad");

  std::vector<const TensorNode*> order;
  std::unordered_set<const TensorNode*> seen;
  std::vector<std::pair<const TensorNode*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      const TensorNode* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // `order` is children-after-parents reversed: root is last. Sweep from the
  // end so every node's gradient is complete before it propagates.
  buf.acc(root.node().get())(0, 0) += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const TensorNode* n = *it;
    if (!n->backward) continue;
    const Matrix* g = buf.find(n);
    if (g == nullptr) continue;
    n->backward(*g, buf);
  }
}

}  // namespace sadi::nn
