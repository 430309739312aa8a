#include "dgst/unet.hpp"

#include <cmath>

#include "dgst/rng.hpp"

namespace dgst {

const char* to_string(ParamRole r) {
  switch (r) {
    case ParamRole::conv_weight: return "conv-weight";
    case ParamRole::tconv_weight: return "transposed-conv-weight";
    case ParamRole::bias: return "bias";
    case ParamRole::norm_scale: return "norm-scale";
    case ParamRole::norm_shift: return "norm-shift";
    case ParamRole::head_weight: return "head-weight";
    case ParamRole::head_bias: return "head-bias";
    case ParamRole::lora_a: return "lora-a";
    case ParamRole::lora_b: return "lora-b";
    case ParamRole::adapter_weight: return "adapter-weight";
    case ParamRole::adapter_bias: return "adapter-bias";
  }
  return "?";
}

const char* to_string(Region r) {
  switch (r) {
    case Region::encoder: return "encoder";
    case Region::bottleneck: return "bottleneck";
    case Region::decoder: return "decoder";
    case Region::head: return "head";
  }
  return "?";
}

bool is_kernel_role(ParamRole r) {
  return r == ParamRole::conv_weight || r == ParamRole::tconv_weight ||
         r == ParamRole::head_weight;
}

bool is_aux_role(ParamRole r) {
  return r == ParamRole::lora_a || r == ParamRole::lora_b ||
         r == ParamRole::adapter_weight || r == ParamRole::adapter_bias;
}

const ParameterMeta* ParameterRegistry::find(std::string_view name) const {
  for (const auto& p : params)
    if (p.name == name) return &p;
  return nullptr;
}

uint64_t ParameterRegistry::digest() const {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& p : params) {
    h = fnv1a64(p.name, h);
    const int64_t tag[3] = {int64_t(p.role), int64_t(p.region), p.offset};
    h = fnv1a64(tag, sizeof(tag), h);
    h = fnv1a64(p.shape.data(), p.shape.size() * sizeof(int64_t), h);
  }
  return h;
}

std::vector<KernelGroup> partition_kernels(const ParameterRegistry& registry) {
  std::vector<KernelGroup> groups;
  groups.reserve(size_t(registry.total_kernel_groups));
  for (const auto& p : registry.params) {
    if (!is_kernel_role(p.role)) continue;
    const bool transposed = p.role == ParamRole::tconv_weight;
    // conv/head weight: [Co,Ci,kh,kw]; transposed: [Ci,Co,kh,kw]
    const int64_t co = transposed ? p.shape[1] : p.shape[0];
    const int64_t ci = transposed ? p.shape[0] : p.shape[1];
    const int64_t khw = p.shape[2] * p.shape[3];
    for (int64_t oc = 0; oc < co; ++oc) {
      KernelGroup g;
      g.id = p.kernel_group_first + int(oc);
      g.param_id = p.id;
      g.scalar_indices.reserve(size_t(ci * khw));
      if (!transposed) {
        const int64_t base = p.offset + oc * ci * khw;
        for (int64_t i = 0; i < ci * khw; ++i) g.scalar_indices.push_back(base + i);
      } else {
        for (int64_t ic = 0; ic < ci; ++ic) {
          const int64_t base = p.offset + (ic * co + oc) * khw;
          for (int64_t i = 0; i < khw; ++i) g.scalar_indices.push_back(base + i);
        }
      }
      groups.push_back(std::move(g));
    }
  }
  return groups;
}

void validate(const ModelConfig& c) {
  if (c.depth < 2) throw config_error("model: depth must be >= 2");
  if (c.base_width < 2) throw config_error("model: base-width must be >= 2");
  if (c.num_classes < 2) throw config_error("model: num-classes must be >= 2");
  if (c.in_channels < 1) throw config_error("model: in-channels must be >= 1");
}

bool operator==(const ModelConfig& a, const ModelConfig& b) {
  return a.in_channels == b.in_channels && a.num_classes == b.num_classes &&
         a.base_width == b.base_width && a.depth == b.depth &&
         a.instance_norm == b.instance_norm && a.norm_eps == b.norm_eps;
}

namespace {

class Builder {
 public:
  explicit Builder(Model& m) : m_(m) {}

  int add_param(std::string name, ParamRole role, Region region,
                std::vector<int64_t> shape) {
    ParameterMeta meta;
    meta.id = int(m_.registry.params.size());
    meta.name = std::move(name);
    meta.role = role;
    meta.region = region;
    meta.shape = shape;
    meta.numel = shape_numel(shape);
    meta.offset = m_.registry.total_scalars;
    if (is_kernel_role(role)) {
      const bool transposed = role == ParamRole::tconv_weight;
      meta.kernel_group_first = m_.registry.total_kernel_groups;
      meta.kernel_group_count = int(transposed ? shape[1] : shape[0]);
      m_.registry.total_kernel_groups += meta.kernel_group_count;
    }
    m_.registry.total_scalars += meta.numel;
    m_.registry.params.push_back(std::move(meta));
    m_.params.push_back(Tensor::zeros(std::move(shape)));
    return int(m_.params.size()) - 1;
  }

  ConvDef conv(const std::string& prefix, int ci, int co, int k, int stride,
               int pad, bool transposed, ParamRole wrole, ParamRole brole,
               Region region) {
    ConvDef d;
    d.ci = ci;
    d.co = co;
    d.kh = d.kw = k;
    d.stride = stride;
    d.pad = pad;
    d.transposed = transposed;
    std::vector<int64_t> wshape = transposed
                                      ? std::vector<int64_t>{ci, co, k, k}
                                      : std::vector<int64_t>{co, ci, k, k};
    d.w = add_param(prefix + ".weight", wrole, region, std::move(wshape));
    d.b = add_param(prefix + ".bias", brole, region, {co});
    return d;
  }

  UnitDef unit(const std::string& prefix, int ci, int co, Region region) {
    UnitDef u;
    u.conv = conv(prefix + ".conv", ci, co, 3, 1, 1, false,
                  ParamRole::conv_weight, ParamRole::bias, region);
    u.has_norm = m_.config.instance_norm;
    if (u.has_norm) {
      u.norm.scale =
          add_param(prefix + ".norm.scale", ParamRole::norm_scale, region, {co});
      u.norm.shift =
          add_param(prefix + ".norm.shift", ParamRole::norm_shift, region, {co});
    }
    return u;
  }

  BlockDef block(const std::string& prefix, int ci, int co, Region region) {
    BlockDef b;
    b.u1 = unit(prefix + "1", ci, co, region);
    b.u2 = unit(prefix + "2", co, co, region);
    return b;
  }

 private:
  Model& m_;
};

void init_params(Model& m, uint64_t seed) {
  for (const auto& meta : m.registry.params) {
    Tensor& t = m.param(meta.id);
    switch (meta.role) {
      case ParamRole::conv_weight:
      case ParamRole::head_weight: {
        // He fan-in over Cin*kh*kw
        Rng rng(derive_seed(seed, meta.name));
        const real std = real(std::sqrt(
            2.0 / double(meta.shape[1] * meta.shape[2] * meta.shape[3])));
        for (auto& v : t.data) v = real(rng.normal()) * std;
        break;
      }
      case ParamRole::tconv_weight: {
        Rng rng(derive_seed(seed, meta.name));
        const real std = real(std::sqrt(
            2.0 / double(meta.shape[0] * meta.shape[2] * meta.shape[3])));
        for (auto& v : t.data) v = real(rng.normal()) * std;
        break;
      }
      case ParamRole::norm_scale:
        for (auto& v : t.data) v = real(1);
        break;
      default:
        break;  // biases and shifts stay zero
    }
  }
}

NodeId conv_forward(const Model& m, GradientTape& t, const ConvDef& d, NodeId x) {
  NodeId w = t.leaf(&m.param(d.w), d.w);
  if (d.lora_a >= 0) {
    // effective weight = W + reshape(B @ A); zero-init B keeps identity
    NodeId a = t.leaf(&m.param(d.lora_a), d.lora_a);
    NodeId bb = t.leaf(&m.param(d.lora_b), d.lora_b);
    NodeId delta = t.reshape(t.matmul(bb, a), {d.co, d.ci, d.kh, d.kw});
    if (d.transposed) delta = t.transpose01(delta);
    w = t.add(w, delta);
  }
  NodeId bias = t.leaf(&m.param(d.b), d.b);
  return d.transposed ? t.conv_transpose2d(x, w, bias, d.stride, d.pad)
                      : t.conv2d(x, w, bias, d.stride, d.pad);
}

NodeId unit_forward(const Model& m, GradientTape& t, const UnitDef& u, NodeId x) {
  NodeId h = conv_forward(m, t, u.conv, x);
  if (u.has_norm)
    h = t.instance_norm2d(h, t.leaf(&m.param(u.norm.scale), u.norm.scale),
                          t.leaf(&m.param(u.norm.shift), u.norm.shift),
                          m.config.norm_eps);
  return t.leaky_relu(h);
}

NodeId block_forward(const Model& m, GradientTape& t, const BlockDef& b, NodeId x) {
  NodeId h = unit_forward(m, t, b.u2, unit_forward(m, t, b.u1, x));
  if (b.adapter) {
    NodeId a = t.leaky_relu(conv_forward(m, t, b.adapter->down, h));
    h = t.add(h, conv_forward(m, t, b.adapter->up, a));
  }
  return h;
}

}  // namespace

Model build_unet(const ModelConfig& config, uint64_t seed) {
  validate(config);
  Model m;
  m.config = config;
  m.init_seed = seed;
  Builder b(m);

  auto width = [&](int s) { return config.base_width << s; };

  for (int s = 0; s < config.depth; ++s) {
    const int ci = s == 0 ? config.in_channels : width(s - 1);
    m.encoder.push_back(b.block("enc" + std::to_string(s) + ".conv", ci,
                                width(s), Region::encoder));
  }
  m.bottleneck = b.block("bottleneck.conv", width(config.depth - 1),
                         width(config.depth), Region::bottleneck);
  for (int s = config.depth - 1; s >= 0; --s) {
    DecoderStageDef stage;
    const int ci = s == config.depth - 1 ? width(config.depth) : width(s + 1);
    stage.up = b.conv("dec" + std::to_string(s) + ".up", ci, width(s), 2, 2, 0,
                      true, ParamRole::tconv_weight, ParamRole::bias,
                      Region::decoder);
    stage.block = b.block("dec" + std::to_string(s) + ".conv", 2 * width(s),
                          width(s), Region::decoder);
    m.decoder.push_back(stage);
  }
  m.head = b.conv("head", width(0), config.num_classes, 1, 1, 0, false,
                  ParamRole::head_weight, ParamRole::head_bias, Region::head);

  init_params(m, seed);
  return m;
}

NodeId Model::forward(GradientTape& t, NodeId input) const {
  const Tensor& x = t.value(input);
  if (x.rank() != 4 || x.dim(1) != config.in_channels)
    throw shape_error("forward: expected input [N," +
                      std::to_string(config.in_channels) + ",H,W], got " +
                      shape_str(x.shape));
  const int64_t div = int64_t(1) << config.depth;
  if (x.dim(2) % div != 0 || x.dim(3) % div != 0)
    throw shape_error("forward: spatial dims " + shape_str(x.shape) +
                      " must be divisible by 2^depth = " + std::to_string(div));

  std::vector<NodeId> skips;
  NodeId h = input;
  for (const auto& blk : encoder) {
    h = block_forward(*this, t, blk, h);
    skips.push_back(h);
    h = t.max_pool2d(h);
  }
  h = block_forward(*this, t, bottleneck, h);
  for (size_t i = 0; i < decoder.size(); ++i) {
    const auto& stage = decoder[i];
    h = conv_forward(*this, t, stage.up, h);
    h = t.channel_concat(skips[skips.size() - 1 - i], h);
    h = block_forward(*this, t, stage.block, h);
  }
  return conv_forward(*this, t, head, h);
}

Tensor Model::forward(const Tensor& batch) const {
  GradientTape t;
  NodeId out = forward(t, t.leaf(&batch, -1, false));
  return t.value(out);
}

bool Model::params_equal(const Model& other) const {
  if (params.size() != other.params.size()) return false;
  for (size_t i = 0; i < params.size(); ++i)
    if (params[i].data != other.params[i].data) return false;
  return true;
}

}  // namespace dgst
