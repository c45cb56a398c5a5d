#pragma once

#include <functional>
#include <string>
#include <vector>

#include "bregmanlens/tensor.hpp"

namespace blns {

// Reverse-mode autodiff over an append-only tape of primitive operations.
// Node creation order is a topological order, so backward() is a single
// reverse scan. One tape per training step; tapes are single-threaded.
class GradTape {
 public:
  struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
  };

  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // ---- graph construction ----
  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  Var matmul(Var a, Var b);     // a * b
  Var matmul_nt(Var a, Var b);  // a * b^T (avoids explicit transposes)
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise
  Var scale(Var a, double c);
  Var add_rowvec(Var a, Var v);                 // [n x d] + [d] broadcast
  Var add_tiled_rows(Var a, Var b, int times);  // [t*r x d] + [r x d] tiled
  Var slice_rows(Var a, int begin, int count);
  Var slice_cols(Var a, int begin, int count);
  Var concat_rows(const std::vector<Var>& parts);
  Var concat_cols(const std::vector<Var>& parts);
  Var embedding_gather(Var table, std::vector<int> ids);
  Var layer_norm_rows(Var x, Var gain, Var bias);
  Var gelu(Var x);
  Var sigmoid(Var x);
  // Rowwise softmax restricted to the causal prefix (cols 0..i for row i),
  // with logits pre-scaled by `scale`; entries past the diagonal are exactly 0.
  Var causal_softmax_scaled(Var x, double scale);
  Var sum_all(Var x);
  Var mean_all(Var x);
  // Mean cross-entropy of row-wise logits against integer targets, fused with
  // log-softmax for stability.
  Var cross_entropy_mean(Var logits, std::vector<int> targets);

  // ---- execution ----
  // Accumulates gradients for every node that (transitively) needs_grad them.
  // `loss` must be a scalar.
  void backward(Var loss);

  const Tensor& value(Var v) const { return nodes_[size_t(check(v))].value; }
  // Gradient of the last backward() w.r.t. node v; zero tensor if the node
  // was never reached.
  const Tensor& grad(Var v);
  bool requires_grad(Var v) const { return nodes_[size_t(check(v))].needs_grad; }
  size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;  // lazily allocated
    bool needs_grad = false;
    std::function<void(GradTape&)> backprop;  // null for leaves
  };

  int check(Var v) const;
  Tensor& grad_buf(int id);
  Var push(Tensor value, bool needs_grad, std::function<void(GradTape&)> fn);

  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

}  // namespace blns
