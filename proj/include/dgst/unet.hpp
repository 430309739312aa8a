#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dgst/tape.hpp"
#include "dgst/tensor.hpp"

namespace dgst {

enum class ParamRole : uint8_t {
  conv_weight,
  tconv_weight,
  bias,
  norm_scale,
  norm_shift,
  head_weight,
  head_bias,
  // auxiliary parameters added by structural baselines
  lora_a,
  lora_b,
  adapter_weight,
  adapter_bias,
};

enum class Region : uint8_t { encoder, bottleneck, decoder, head };

const char* to_string(ParamRole r);
const char* to_string(Region r);

bool is_kernel_role(ParamRole r);  // conv/tconv/head weights form kernel groups
bool is_aux_role(ParamRole r);

struct ParameterMeta {
  int id = -1;
  std::string name;
  ParamRole role{};
  Region region{};
  std::vector<int64_t> shape;
  int64_t numel = 0;
  int64_t offset = 0;  // into the flat scalar index space
  // conv-type weights: one kernel group per output-channel filter
  int kernel_group_first = -1;
  int kernel_group_count = 0;
};

struct ParameterRegistry {
  std::vector<ParameterMeta> params;
  int64_t total_scalars = 0;
  int total_kernel_groups = 0;

  const ParameterMeta* find(std::string_view name) const;
  const ParameterMeta& at(int id) const { return params[size_t(id)]; }
  // Stable structural digest over (name, role, region, shape, offset).
  uint64_t digest() const;
};

// One output-channel filter of a conv or transposed-conv layer; the unit
// within which top-gamma selection happens.
struct KernelGroup {
  int id = -1;
  int param_id = -1;
  std::vector<int64_t> scalar_indices;  // global, ascending
};

std::vector<KernelGroup> partition_kernels(const ParameterRegistry& registry);

struct ModelConfig {
  int in_channels = 1;
  int num_classes = 2;
  int base_width = 8;
  int depth = 3;  // encoder stages; bottleneck sits below them
  bool instance_norm = true;
  real norm_eps = real(1e-5);
};

void validate(const ModelConfig& c);
bool operator==(const ModelConfig& a, const ModelConfig& b);

struct ConvDef {
  int w = -1, b = -1;  // param ids
  int ci = 0, co = 0, kh = 0, kw = 0;
  int stride = 1, pad = 0;
  bool transposed = false;
  int lora_a = -1, lora_b = -1;
};

struct NormDef {
  int scale = -1, shift = -1;
};

struct AdapterDef {
  ConvDef down, up;
};

// conv -> [instance norm] -> leaky relu
struct UnitDef {
  ConvDef conv;
  NormDef norm;
  bool has_norm = false;
};

struct BlockDef {
  UnitDef u1, u2;
  std::optional<AdapterDef> adapter;
};

struct DecoderStageDef {
  ConvDef up;  // 2x2 stride-2 transposed conv
  BlockDef block;
};

// Small 2-D U-Net. Parameters live in a flat id-indexed store; every scalar
// belongs to exactly one ParameterMeta.
struct Model {
  ModelConfig config;
  uint64_t init_seed = 0;
  std::vector<BlockDef> encoder;
  BlockDef bottleneck;
  std::vector<DecoderStageDef> decoder;  // deepest scale first
  ConvDef head;
  ParameterRegistry registry;
  std::vector<Tensor> params;
  std::string provenance = "base";  // "base" | "lora(rank=R)" | "adapter(width=W)"
  int lora_rank = 0;
  int adapter_width = 0;

  NodeId forward(GradientTape& tape, NodeId input) const;
  Tensor forward(const Tensor& batch) const;

  Tensor& param(int id) { return params[size_t(id)]; }
  const Tensor& param(int id) const { return params[size_t(id)]; }
  int64_t total_scalars() const { return registry.total_scalars; }

  bool params_equal(const Model& other) const;
};

Model build_unet(const ModelConfig& config, uint64_t seed);

}  // namespace dgst
