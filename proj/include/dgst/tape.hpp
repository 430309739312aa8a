#pragma once

#include <array>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "dgst/tensor.hpp"

namespace dgst {

using NodeId = int32_t;

enum class OpKind : uint8_t {
  leaf,
  constant,
  add,
  mul,
  divide,
  scale_add,
  exp_op,
  sum_all,
  matmul,
  reshape,
  transpose01,
  channel_slice,
  leaky_relu,
  conv2d,
  conv_transpose2d,
  instance_norm2d,
  max_pool2d,
  channel_concat,
  softmax_channel,
  log_softmax_channel,
};

const char* op_name(OpKind k);

struct OpAttrs {
  int stride = 1;
  int pad = 0;
  int c0 = 0, c1 = 0;  // channel_slice range
  real a = 0, b = 0;   // scale_add coefficients; leaky slope / eps live in a
};

struct TapeNode {
  OpKind kind = OpKind::leaf;
  std::array<NodeId, 3> in{-1, -1, -1};
  OpAttrs attrs;
  int param_id = -1;                 // leaves bound to model parameters
  bool needs_grad = false;
  const Tensor* external = nullptr;  // leaf storage, owned by the caller
  Tensor out;                        // owned value (non-leaf)
  Tensor grad;                       // allocated during backward
  Tensor saved0, saved1;             // op context (pool argmax, IN stats)

  const Tensor& value() const { return external ? *external : out; }
};

// Append-only reverse-mode tape over whole tensors. Node ids are assigned in
// construction order, which is a topological order of the compute graph, so
// backward() is a single reverse sweep. One tape per training step; tapes are
// independent and may run concurrently.
class GradientTape {
 public:
  NodeId leaf(const Tensor* value, int param_id = -1, bool needs_grad = true);
  NodeId constant(Tensor value);

  NodeId add(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId divide(NodeId a, NodeId b);
  NodeId scale_add(NodeId x, real a, real b);  // a*x + b, elementwise
  NodeId exp(NodeId x);
  NodeId sum(NodeId x);  // full reduction -> scalar {1}
  NodeId matmul(NodeId a, NodeId b);
  NodeId reshape(NodeId x, std::vector<int64_t> shape);
  NodeId transpose01(NodeId x);  // swap leading two axes of a 4-d tensor
  NodeId channel_slice(NodeId x, int c0, int c1);
  NodeId leaky_relu(NodeId x, real slope = real(0.01));
  NodeId conv2d(NodeId x, NodeId w, NodeId bias, int stride = 1, int pad = 0);
  NodeId conv_transpose2d(NodeId x, NodeId w, NodeId bias, int stride = 1,
                          int pad = 0);
  NodeId instance_norm2d(NodeId x, NodeId scale, NodeId shift,
                         real eps = real(1e-5));
  NodeId max_pool2d(NodeId x);  // 2x2, stride 2
  NodeId channel_concat(NodeId a, NodeId b);
  NodeId softmax_channel(NodeId x);
  NodeId log_softmax_channel(NodeId x);

  const Tensor& value(NodeId id) const { return node(id).value(); }
  const TapeNode& node(NodeId id) const;

  // Reverse sweep from a scalar loss. May be called once per tape.
  void backward(NodeId loss);

  // Accumulated gradient of a node; null when the node is not on any path to
  // the loss (callers treat that as a zero gradient).
  const Tensor* grad(NodeId id) const;
  const Tensor* param_grad(int param_id) const;
  NodeId param_node(int param_id) const;

  size_t size() const { return nodes_.size(); }
  bool backward_done() const { return backward_done_; }

 private:
  NodeId push(TapeNode&& n);
  TapeNode& mut(NodeId id) { return nodes_[size_t(id)]; }
  Tensor& grad_buf(NodeId id);
  void check_finite(const Tensor& t, OpKind kind) const;
  void backward_node(NodeId id);

  std::vector<TapeNode> nodes_;
  std::unordered_map<int, NodeId> param_nodes_;
  bool backward_done_ = false;
};

}  // namespace dgst
