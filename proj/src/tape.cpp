#include "dgst/tape.hpp"

#include <cmath>
#include <string>

#include "dgst/kernels.hpp"

namespace dgst {

const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::constant: return "constant";
    case OpKind::add: return "add";
    case OpKind::mul: return "mul";
    case OpKind::divide: return "divide";
    case OpKind::scale_add: return "scale_add";
    case OpKind::exp_op: return "exp";
    case OpKind::sum_all: return "sum";
    case OpKind::matmul: return "matmul";
    case OpKind::reshape: return "reshape";
    case OpKind::transpose01: return "transpose01";
    case OpKind::channel_slice: return "channel_slice";
    case OpKind::leaky_relu: return "leaky_relu";
    case OpKind::conv2d: return "conv2d";
    case OpKind::conv_transpose2d: return "conv_transpose2d";
    case OpKind::instance_norm2d: return "instance_norm2d";
    case OpKind::max_pool2d: return "max_pool2d";
    case OpKind::channel_concat: return "channel_concat";
    case OpKind::softmax_channel: return "softmax_channel";
    case OpKind::log_softmax_channel: return "log_softmax_channel";
  }
  return "?";
}

const TapeNode& GradientTape::node(NodeId id) const {
  if (id < 0 || size_t(id) >= nodes_.size())
    throw error("tape: node id " + std::to_string(id) + " not on this tape");
  return nodes_[size_t(id)];
}

void GradientTape::check_finite(const Tensor& t, OpKind kind) const {
  if (!t.all_finite())
    throw numeric_error(std::string("non-finite value produced by op '") +
                        op_name(kind) + "'");
}

NodeId GradientTape::push(TapeNode&& n) {
  check_finite(n.value(), n.kind);
  nodes_.push_back(std::move(n));
  return NodeId(nodes_.size() - 1);
}

NodeId GradientTape::leaf(const Tensor* value, int param_id, bool needs_grad) {
  if (param_id >= 0) {
    auto it = param_nodes_.find(param_id);
    if (it != param_nodes_.end()) return it->second;
  }
  TapeNode n;
  n.kind = OpKind::leaf;
  n.external = value;
  n.param_id = param_id;
  n.needs_grad = needs_grad;
  const NodeId id = push(std::move(n));
  if (param_id >= 0) param_nodes_.emplace(param_id, id);
  return id;
}

NodeId GradientTape::constant(Tensor value) {
  TapeNode n;
  n.kind = OpKind::constant;
  n.out = std::move(value);
  n.needs_grad = false;
  return push(std::move(n));
}

namespace {
void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b))
    throw shape_error(std::string(op) + ": operand shapes differ, " +
                      shape_str(a.shape) + " vs " + shape_str(b.shape));
}
}  // namespace

NodeId GradientTape::add(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  require_same_shape(va, vb, "add");
  TapeNode n;
  n.kind = OpKind::add;
  n.in = {a, b, -1};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.out = Tensor::zeros(va.shape);
  for (int64_t i = 0; i < va.numel(); ++i)
    n.out.data[size_t(i)] = va.data[size_t(i)] + vb.data[size_t(i)];
  return push(std::move(n));
}

NodeId GradientTape::mul(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  require_same_shape(va, vb, "mul");
  TapeNode n;
  n.kind = OpKind::mul;
  n.in = {a, b, -1};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.out = Tensor::zeros(va.shape);
  for (int64_t i = 0; i < va.numel(); ++i)
    n.out.data[size_t(i)] = va.data[size_t(i)] * vb.data[size_t(i)];
  return push(std::move(n));
}

NodeId GradientTape::divide(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  require_same_shape(va, vb, "divide");
  TapeNode n;
  n.kind = OpKind::divide;
  n.in = {a, b, -1};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.out = Tensor::zeros(va.shape);
  for (int64_t i = 0; i < va.numel(); ++i)
    n.out.data[size_t(i)] = va.data[size_t(i)] / vb.data[size_t(i)];
  return push(std::move(n));
}

NodeId GradientTape::scale_add(NodeId x, real a, real b) {
  const Tensor& v = value(x);
  TapeNode n;
  n.kind = OpKind::scale_add;
  n.in = {x, -1, -1};
  n.attrs.a = a;
  n.attrs.b = b;
  n.needs_grad = node(x).needs_grad;
  n.out = Tensor::zeros(v.shape);
  for (int64_t i = 0; i < v.numel(); ++i)
    n.out.data[size_t(i)] = a * v.data[size_t(i)] + b;
  return push(std::move(n));
}

NodeId GradientTape::exp(NodeId x) {
  const Tensor& v = value(x);
  TapeNode n;
  n.kind = OpKind::exp_op;
  n.in = {x, -1, -1};
  n.needs_grad = node(x).needs_grad;
  n.out = Tensor::zeros(v.shape);
  for (int64_t i = 0; i < v.numel(); ++i)
    n.out.data[size_t(i)] = std::exp(v.data[size_t(i)]);
  return push(std::move(n));
}

NodeId GradientTape::sum(NodeId x) {
  const Tensor& v = value(x);
  real s = 0;
  for (real e : v.data) s += e;
  TapeNode n;
  n.kind = OpKind::sum_all;
  n.in = {x, -1, -1};
  n.needs_grad = node(x).needs_grad;
  n.out = Tensor::scalar(s);
  return push(std::move(n));
}

NodeId GradientTape::matmul(NodeId a, NodeId b) {
  TapeNode n;
  n.kind = OpKind::matmul;
  n.in = {a, b, -1};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.out = kern::matmul_forward(value(a), value(b));
  return push(std::move(n));
}

NodeId GradientTape::reshape(NodeId x, std::vector<int64_t> shape) {
  const Tensor& v = value(x);
  if (shape_numel(shape) != v.numel())
    throw shape_error("reshape: element count mismatch " +
                      shape_str(v.shape) + " -> " + shape_str(shape));
  TapeNode n;
  n.kind = OpKind::reshape;
  n.in = {x, -1, -1};
  n.needs_grad = node(x).needs_grad;
  n.out = Tensor(std::move(shape), v.data);
  return push(std::move(n));
}

NodeId GradientTape::transpose01(NodeId x) {
  const Tensor& v = value(x);
  if (v.rank() != 4)
    throw shape_error("transpose01: expected 4-d tensor, got " +
                      shape_str(v.shape));
  const int64_t a = v.dim(0), b = v.dim(1), rest = v.dim(2) * v.dim(3);
  TapeNode n;
  n.kind = OpKind::transpose01;
  n.in = {x, -1, -1};
  n.needs_grad = node(x).needs_grad;
  n.out = Tensor::zeros({b, a, v.dim(2), v.dim(3)});
  for (int64_t i = 0; i < a; ++i)
    for (int64_t j = 0; j < b; ++j)
      for (int64_t r = 0; r < rest; ++r)
        n.out.data[size_t((j * a + i) * rest + r)] =
            v.data[size_t((i * b + j) * rest + r)];
  return push(std::move(n));
}

NodeId GradientTape::channel_slice(NodeId x, int c0, int c1) {
  const Tensor& v = value(x);
  if (v.rank() != 4 || c0 < 0 || c1 <= c0 || c1 > v.dim(1))
    throw shape_error("channel_slice: range [" + std::to_string(c0) + "," +
                      std::to_string(c1) + ") invalid for " +
                      shape_str(v.shape));
  const int64_t n_ = v.dim(0), c = v.dim(1), hw = v.dim(2) * v.dim(3);
  TapeNode n;
  n.kind = OpKind::channel_slice;
  n.in = {x, -1, -1};
  n.attrs.c0 = c0;
  n.attrs.c1 = c1;
  n.needs_grad = node(x).needs_grad;
  n.out = Tensor::zeros({n_, c1 - c0, v.dim(2), v.dim(3)});
  for (int64_t ni = 0; ni < n_; ++ni)
    for (int64_t k = c0; k < c1; ++k)
      std::copy_n(v.data.data() + (ni * c + k) * hw, hw,
                  n.out.data.data() + (ni * (c1 - c0) + (k - c0)) * hw);
  return push(std::move(n));
}

NodeId GradientTape::leaky_relu(NodeId x, real slope) {
  const Tensor& v = value(x);
  TapeNode n;
  n.kind = OpKind::leaky_relu;
  n.in = {x, -1, -1};
  n.attrs.a = slope;
  n.needs_grad = node(x).needs_grad;
  n.out = Tensor::zeros(v.shape);
  for (int64_t i = 0; i < v.numel(); ++i) {
    const real e = v.data[size_t(i)];
    n.out.data[size_t(i)] = e > 0 ? e : slope * e;
  }
  return push(std::move(n));
}

NodeId GradientTape::conv2d(NodeId x, NodeId w, NodeId bias, int stride,
                            int pad) {
  TapeNode n;
  n.kind = OpKind::conv2d;
  n.in = {x, w, bias};
  n.attrs.stride = stride;
  n.attrs.pad = pad;
  n.needs_grad = node(x).needs_grad || node(w).needs_grad || node(bias).needs_grad;
  n.out = kern::conv2d_forward(value(x), value(w), value(bias), stride, pad);
  return push(std::move(n));
}

NodeId GradientTape::conv_transpose2d(NodeId x, NodeId w, NodeId bias,
                                      int stride, int pad) {
  TapeNode n;
  n.kind = OpKind::conv_transpose2d;
  n.in = {x, w, bias};
  n.attrs.stride = stride;
  n.attrs.pad = pad;
  n.needs_grad = node(x).needs_grad || node(w).needs_grad || node(bias).needs_grad;
  n.out = kern::tconv2d_forward(value(x), value(w), value(bias), stride, pad);
  return push(std::move(n));
}

NodeId GradientTape::instance_norm2d(NodeId x, NodeId scale, NodeId shift,
                                     real eps) {
  TapeNode n;
  n.kind = OpKind::instance_norm2d;
  n.in = {x, scale, shift};
  n.attrs.a = eps;
  n.needs_grad =
      node(x).needs_grad || node(scale).needs_grad || node(shift).needs_grad;
  n.out = kern::instance_norm_forward(value(x), value(scale), value(shift), eps,
                                      n.saved0, n.saved1);
  return push(std::move(n));
}

NodeId GradientTape::max_pool2d(NodeId x) {
  TapeNode n;
  n.kind = OpKind::max_pool2d;
  n.in = {x, -1, -1};
  n.needs_grad = node(x).needs_grad;
  n.out = kern::max_pool2d_forward(value(x), n.saved0);
  return push(std::move(n));
}

NodeId GradientTape::channel_concat(NodeId a, NodeId b) {
  const Tensor& va = value(a);
  const Tensor& vb = value(b);
  if (va.rank() != 4 || vb.rank() != 4 || va.dim(0) != vb.dim(0) ||
      va.dim(2) != vb.dim(2) || va.dim(3) != vb.dim(3))
    throw shape_error("channel_concat: shapes " + shape_str(va.shape) +
                      " and " + shape_str(vb.shape) +
                      " differ outside the channel dim");
  const int64_t n_ = va.dim(0), ca = va.dim(1), cb = vb.dim(1),
                hw = va.dim(2) * va.dim(3);
  TapeNode n;
  n.kind = OpKind::channel_concat;
  n.in = {a, b, -1};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  n.out = Tensor::zeros({n_, ca + cb, va.dim(2), va.dim(3)});
  for (int64_t ni = 0; ni < n_; ++ni) {
    std::copy_n(va.data.data() + ni * ca * hw, ca * hw,
                n.out.data.data() + ni * (ca + cb) * hw);
    std::copy_n(vb.data.data() + ni * cb * hw, cb * hw,
                n.out.data.data() + (ni * (ca + cb) + ca) * hw);
  }
  return push(std::move(n));
}

NodeId GradientTape::softmax_channel(NodeId x) {
  TapeNode n;
  n.kind = OpKind::softmax_channel;
  n.in = {x, -1, -1};
  n.needs_grad = node(x).needs_grad;
  n.out = kern::softmax_channel_forward(value(x));
  return push(std::move(n));
}

NodeId GradientTape::log_softmax_channel(NodeId x) {
  TapeNode n;
  n.kind = OpKind::log_softmax_channel;
  n.in = {x, -1, -1};
  n.needs_grad = node(x).needs_grad;
  n.out = kern::log_softmax_channel_forward(value(x));
  return push(std::move(n));
}

Tensor& GradientTape::grad_buf(NodeId id) {
  TapeNode& n = mut(id);
  if (n.grad.numel() == 0) n.grad = Tensor::zeros(n.value().shape);
  return n.grad;
}

const Tensor* GradientTape::grad(NodeId id) const {
  const TapeNode& n = node(id);
  return n.grad.numel() > 0 ? &n.grad : nullptr;
}

const Tensor* GradientTape::param_grad(int param_id) const {
  auto it = param_nodes_.find(param_id);
  if (it == param_nodes_.end()) return nullptr;
  return grad(it->second);
}

NodeId GradientTape::param_node(int param_id) const {
  auto it = param_nodes_.find(param_id);
  return it == param_nodes_.end() ? NodeId(-1) : it->second;
}

void GradientTape::backward(NodeId loss) {
  const TapeNode& ln = node(loss);
  if (ln.value().numel() != 1)
    throw error("backward: loss must be scalar, got shape " +
                shape_str(ln.value().shape));
  if (backward_done_) throw error("backward: tape already differentiated");
  backward_done_ = true;
  grad_buf(loss).data[0] = real(1);
  for (NodeId id = NodeId(nodes_.size()) - 1; id >= 0; --id) {
    const TapeNode& n = nodes_[size_t(id)];
    if (n.grad.numel() == 0 || !n.needs_grad) continue;
    check_finite(n.grad, n.kind);
    backward_node(id);
  }
}

void GradientTape::backward_node(NodeId id) {
  TapeNode& n = mut(id);
  const Tensor& g = n.grad;
  auto in_needs = [&](int slot) {
    const NodeId i = n.in[size_t(slot)];
    return i >= 0 && node(i).needs_grad;
  };
  auto gbuf = [&](int slot) -> Tensor& { return grad_buf(n.in[size_t(slot)]); };

  switch (n.kind) {
    case OpKind::leaf:
    case OpKind::constant:
      return;
    case OpKind::add: {
      for (int s = 0; s < 2; ++s)
        if (in_needs(s)) {
          Tensor& gb = gbuf(s);
          for (int64_t i = 0; i < g.numel(); ++i)
            gb.data[size_t(i)] += g.data[size_t(i)];
        }
      return;
    }
    case OpKind::mul: {
      const Tensor& va = value(n.in[0]);
      const Tensor& vb = value(n.in[1]);
      if (in_needs(0)) {
        Tensor& gb = gbuf(0);
        for (int64_t i = 0; i < g.numel(); ++i)
          gb.data[size_t(i)] += g.data[size_t(i)] * vb.data[size_t(i)];
      }
      if (in_needs(1)) {
        Tensor& gb = gbuf(1);
        for (int64_t i = 0; i < g.numel(); ++i)
          gb.data[size_t(i)] += g.data[size_t(i)] * va.data[size_t(i)];
      }
      return;
    }
    case OpKind::divide: {
      const Tensor& va = value(n.in[0]);
      const Tensor& vb = value(n.in[1]);
      if (in_needs(0)) {
        Tensor& gb = gbuf(0);
        for (int64_t i = 0; i < g.numel(); ++i)
          gb.data[size_t(i)] += g.data[size_t(i)] / vb.data[size_t(i)];
      }
      if (in_needs(1)) {
        Tensor& gb = gbuf(1);
        for (int64_t i = 0; i < g.numel(); ++i)
          gb.data[size_t(i)] -= g.data[size_t(i)] * va.data[size_t(i)] /
                                (vb.data[size_t(i)] * vb.data[size_t(i)]);
      }
      return;
    }
    case OpKind::scale_add: {
      if (in_needs(0)) {
        Tensor& gb = gbuf(0);
        for (int64_t i = 0; i < g.numel(); ++i)
          gb.data[size_t(i)] += n.attrs.a * g.data[size_t(i)];
      }
      return;
    }
    case OpKind::exp_op: {
      if (in_needs(0)) {
        Tensor& gb = gbuf(0);
        for (int64_t i = 0; i < g.numel(); ++i)
          gb.data[size_t(i)] += g.data[size_t(i)] * n.out.data[size_t(i)];
      }
      return;
    }
    case OpKind::sum_all: {
      if (in_needs(0)) {
        Tensor& gb = gbuf(0);
        const real gv = g.data[0];
        for (auto& e : gb.data) e += gv;
      }
      return;
    }
    case OpKind::matmul: {
      kern::matmul_backward(value(n.in[0]), value(n.in[1]), g,
                            in_needs(0) ? &gbuf(0) : nullptr,
                            in_needs(1) ? &gbuf(1) : nullptr);
      return;
    }
    case OpKind::reshape: {
      if (in_needs(0)) {
        Tensor& gb = gbuf(0);
        for (int64_t i = 0; i < g.numel(); ++i)
          gb.data[size_t(i)] += g.data[size_t(i)];
      }
      return;
    }
    case OpKind::transpose01: {
      if (in_needs(0)) {
        Tensor& gb = gbuf(0);
        const Tensor& v = value(n.in[0]);
        const int64_t a = v.dim(0), b = v.dim(1), rest = v.dim(2) * v.dim(3);
        for (int64_t i = 0; i < a; ++i)
          for (int64_t j = 0; j < b; ++j)
            for (int64_t r = 0; r < rest; ++r)
              gb.data[size_t((i * b + j) * rest + r)] +=
                  g.data[size_t((j * a + i) * rest + r)];
      }
      return;
    }
    case OpKind::channel_slice: {
      if (in_needs(0)) {
        Tensor& gb = gbuf(0);
        const Tensor& v = value(n.in[0]);
        const int64_t n_ = v.dim(0), c = v.dim(1), hw = v.dim(2) * v.dim(3);
        const int c0 = n.attrs.c0, c1 = n.attrs.c1;
        for (int64_t ni = 0; ni < n_; ++ni)
          for (int64_t k = c0; k < c1; ++k) {
            const real* src = g.data.data() + (ni * (c1 - c0) + (k - c0)) * hw;
            real* dst = gb.data.data() + (ni * c + k) * hw;
            for (int64_t i = 0; i < hw; ++i) dst[i] += src[i];
          }
      }
      return;
    }
    case OpKind::leaky_relu: {
      if (in_needs(0)) {
        Tensor& gb = gbuf(0);
        const Tensor& v = value(n.in[0]);
        const real slope = n.attrs.a;
        for (int64_t i = 0; i < g.numel(); ++i)
          gb.data[size_t(i)] +=
              g.data[size_t(i)] * (v.data[size_t(i)] > 0 ? real(1) : slope);
      }
      return;
    }
    case OpKind::conv2d: {
      kern::conv2d_backward(value(n.in[0]), value(n.in[1]), n.attrs.stride,
                            n.attrs.pad, g, in_needs(0) ? &gbuf(0) : nullptr,
                            in_needs(1) ? &gbuf(1) : nullptr,
                            in_needs(2) ? &gbuf(2) : nullptr);
      return;
    }
    case OpKind::conv_transpose2d: {
      kern::tconv2d_backward(value(n.in[0]), value(n.in[1]), n.attrs.stride,
                             n.attrs.pad, g, in_needs(0) ? &gbuf(0) : nullptr,
                             in_needs(1) ? &gbuf(1) : nullptr,
                             in_needs(2) ? &gbuf(2) : nullptr);
      return;
    }
    case OpKind::instance_norm2d: {
      kern::instance_norm_backward(value(n.in[0]), value(n.in[1]), n.saved0,
                                   n.saved1, g,
                                   in_needs(0) ? &gbuf(0) : nullptr,
                                   in_needs(1) ? &gbuf(1) : nullptr,
                                   in_needs(2) ? &gbuf(2) : nullptr);
      return;
    }
    case OpKind::max_pool2d: {
      if (in_needs(0)) kern::max_pool2d_backward(n.saved0, g, gbuf(0));
      return;
    }
    case OpKind::channel_concat: {
      const Tensor& va = value(n.in[0]);
      const Tensor& vb = value(n.in[1]);
      const int64_t n_ = va.dim(0), ca = va.dim(1), cb = vb.dim(1),
                    hw = va.dim(2) * va.dim(3);
      for (int64_t ni = 0; ni < n_; ++ni) {
        if (in_needs(0)) {
          real* dst = gbuf(0).data.data() + ni * ca * hw;
          const real* src = g.data.data() + ni * (ca + cb) * hw;
          for (int64_t i = 0; i < ca * hw; ++i) dst[i] += src[i];
        }
        if (in_needs(1)) {
          real* dst = gbuf(1).data.data() + ni * cb * hw;
          const real* src = g.data.data() + (ni * (ca + cb) + ca) * hw;
          for (int64_t i = 0; i < cb * hw; ++i) dst[i] += src[i];
        }
      }
      return;
    }
    case OpKind::softmax_channel: {
      if (in_needs(0)) kern::softmax_channel_backward(n.out, g, gbuf(0));
      return;
    }
    case OpKind::log_softmax_channel: {
      if (in_needs(0)) kern::log_softmax_channel_backward(n.out, g, gbuf(0));
      return;
    }
  }
}

}  // namespace dgst
