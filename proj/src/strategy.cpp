#include "dgst/strategy.hpp"

#include <algorithm>
#include <cmath>

#include "dgst/rng.hpp"

namespace dgst {

StrategyKind parse_strategy_kind(std::string_view name) {
  if (name == "full") return StrategyKind::full;
  if (name == "from-scratch") return StrategyKind::from_scratch;
  if (name == "linear-prob") return StrategyKind::linear_prob;
  if (name == "bias") return StrategyKind::bias;
  if (name == "bias-norm") return StrategyKind::bias_norm;
  if (name == "affine-in") return StrategyKind::affine_in;
  if (name == "encoder-only") return StrategyKind::encoder_only;
  if (name == "decoder-only") return StrategyKind::decoder_only;
  if (name == "lora") return StrategyKind::lora;
  if (name == "adapter") return StrategyKind::adapter;
  if (name == "drst") return StrategyKind::drst;
  if (name == "sgst") return StrategyKind::sgst;
  if (name == "dgst") return StrategyKind::dgst;
  throw config_error("unknown strategy '" + std::string(name) + "'");
}

const char* to_string(StrategyKind k) {
  switch (k) {
    case StrategyKind::full: return "full";
    case StrategyKind::from_scratch: return "from-scratch";
    case StrategyKind::linear_prob: return "linear-prob";
    case StrategyKind::bias: return "bias";
    case StrategyKind::bias_norm: return "bias-norm";
    case StrategyKind::affine_in: return "affine-in";
    case StrategyKind::encoder_only: return "encoder-only";
    case StrategyKind::decoder_only: return "decoder-only";
    case StrategyKind::lora: return "lora";
    case StrategyKind::adapter: return "adapter";
    case StrategyKind::drst: return "drst";
    case StrategyKind::sgst: return "sgst";
    case StrategyKind::dgst: return "dgst";
  }
  return "?";
}

bool is_gradient_sparsified(StrategyKind k) {
  return k == StrategyKind::dgst || k == StrategyKind::sgst ||
         k == StrategyKind::drst;
}

bool is_injected(StrategyKind k) {
  return k == StrategyKind::lora || k == StrategyKind::adapter;
}

void StrategyConfig::validate() const {
  if (gamma < 1) throw config_error("strategy: gamma must be >= 1");
  if (lora_rank < 1) throw config_error("strategy: lora rank must be >= 1");
  if (adapter_width < 1) throw config_error("strategy: adapter width must be >= 1");
  if (sgst_warmup_iters < 0)
    throw config_error("strategy: sgst warmup iterations must be >= 0");
}

std::string StrategyConfig::label() const {
  std::string s = to_string(kind);
  if (is_gradient_sparsified(kind)) s += "(gamma=" + std::to_string(gamma) + ")";
  if (kind == StrategyKind::lora) s += "(rank=" + std::to_string(lora_rank) + ")";
  if (kind == StrategyKind::adapter)
    s += "(width=" + std::to_string(adapter_width) + ")";
  return s;
}

GradientSnapshot take_snapshot(const GradientTape& tape,
                               const ParameterRegistry& registry,
                               int64_t iteration) {
  GradientSnapshot snap;
  snap.iteration = iteration;
  snap.flat.assign(size_t(registry.total_scalars), real(0));
  for (const auto& meta : registry.params) {
    const Tensor* g = tape.param_grad(meta.id);
    if (g == nullptr) continue;  // off the loss path: zero gradient
    std::copy(g->data.begin(), g->data.end(), snap.flat.begin() + meta.offset);
  }
  return snap;
}

std::vector<int> select_top_gamma(std::span<const real> group_grads, int gamma) {
  const int n = int(group_grads.size());
  if (n == 0) throw config_error("select_top_gamma: empty kernel group");
  const int k = std::min(gamma, n);
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[size_t(i)] = i;
  auto better = [&](int a, int b) {
    const real ma = std::abs(group_grads[size_t(a)]);
    const real mb = std::abs(group_grads[size_t(b)]);
    if (ma != mb) return ma > mb;
    return a < b;  // ties -> lowest scalar index
  };
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);
  idx.resize(size_t(k));
  return idx;
}

void SgstState::accumulate(const GradientSnapshot& snapshot) {
  if (frozen) throw error("sgst: accumulate after freeze");
  if (accum_abs.empty()) accum_abs.assign(snapshot.flat.size(), real(0));
  if (accum_abs.size() != snapshot.flat.size())
    throw shape_error("sgst: snapshot size changed during warmup");
  for (size_t i = 0; i < accum_abs.size(); ++i)
    accum_abs[i] += std::abs(snapshot.flat[i]);
  ++iters_accumulated;
}

Selector::Selector(const ParameterRegistry& registry, StrategyConfig strategy,
                   uint64_t seed)
    : registry_(&registry), strategy_(strategy), seed_(seed) {
  strategy_.validate();
  if (is_gradient_sparsified(strategy_.kind))
    groups_ = partition_kernels(registry);
  else {
    cached_static_ = static_mask();
    has_static_ = true;
  }
}

Bitset Selector::mandatory_bits() const {
  Bitset bits(registry_->total_scalars);
  for (const auto& p : registry_->params) {
    const bool take = p.role == ParamRole::bias || p.role == ParamRole::head_bias ||
                      p.role == ParamRole::norm_scale ||
                      p.role == ParamRole::norm_shift;
    if (!take) continue;
    for (int64_t i = 0; i < p.numel; ++i) bits.set(p.offset + i);
  }
  return bits;
}

Bitset Selector::static_mask() const {
  Bitset bits(registry_->total_scalars);
  auto take_param = [&](const ParameterMeta& p) {
    for (int64_t i = 0; i < p.numel; ++i) bits.set(p.offset + i);
  };
  switch (strategy_.kind) {
    case StrategyKind::full:
    case StrategyKind::from_scratch:
      bits.set_all();
      break;
    case StrategyKind::linear_prob:
      for (const auto& p : registry_->params)
        if (p.role == ParamRole::head_weight || p.role == ParamRole::head_bias)
          take_param(p);
      break;
    case StrategyKind::bias:
      for (const auto& p : registry_->params)
        if (p.role == ParamRole::bias || p.role == ParamRole::head_bias)
          take_param(p);
      break;
    case StrategyKind::bias_norm:
      for (const auto& p : registry_->params)
        if (p.role == ParamRole::bias || p.role == ParamRole::head_bias ||
            p.role == ParamRole::norm_scale || p.role == ParamRole::norm_shift)
          take_param(p);
      break;
    case StrategyKind::affine_in:
      for (const auto& p : registry_->params)
        if (p.role == ParamRole::norm_scale || p.role == ParamRole::norm_shift)
          take_param(p);
      break;
    case StrategyKind::encoder_only:
      // bottleneck counts as encoder here
      for (const auto& p : registry_->params)
        if (p.region == Region::encoder || p.region == Region::bottleneck)
          take_param(p);
      break;
    case StrategyKind::decoder_only:
      for (const auto& p : registry_->params)
        if (p.region == Region::decoder) take_param(p);
      break;
    case StrategyKind::lora:
    case StrategyKind::adapter: {
      bool any = false;
      for (const auto& p : registry_->params)
        if (is_aux_role(p.role)) {
          take_param(p);
          any = true;
        }
      if (!any)
        throw config_error(std::string("strategy '") + to_string(strategy_.kind) +
                           "' requires an injected model");
      break;
    }
    default:
      throw error("static_mask on a gradient strategy");
  }
  return bits;
}

SelectionMask Selector::build(const GradientSnapshot& snapshot,
                              const SgstState* sgst_state) const {
  SelectionMask mask;
  mask.iteration = snapshot.iteration;
  if (has_static_) {
    mask.bits = cached_static_;
    return mask;
  }
  if (strategy_.kind == StrategyKind::sgst) {
    if (sgst_state == nullptr || !sgst_state->frozen)
      throw error("sgst: selection requested before warmup completed");
    mask.bits = sgst_state->mask.bits;
    return mask;
  }
  if (int64_t(snapshot.flat.size()) != registry_->total_scalars)
    throw shape_error("build_selection: snapshot does not cover the registry");

  mask.bits = mandatory_bits();
  if (strategy_.kind == StrategyKind::dgst) {
    std::vector<real> local;
    for (const auto& g : groups_) {
      local.resize(g.scalar_indices.size());
      for (size_t i = 0; i < g.scalar_indices.size(); ++i)
        local[i] = snapshot.flat[size_t(g.scalar_indices[i])];
      for (int li : select_top_gamma(local, strategy_.gamma))
        mask.bits.set(g.scalar_indices[size_t(li)]);
    }
  } else {  // drst: same per-kernel cardinality, counter-seeded random picks
    std::vector<int> pool;
    for (const auto& g : groups_) {
      const int n = int(g.scalar_indices.size());
      const int k = std::min(strategy_.gamma, n);
      Rng rng(derive_seed(seed_, "drst", uint64_t(snapshot.iteration),
                          uint64_t(g.id)));
      pool.resize(size_t(n));
      for (int i = 0; i < n; ++i) pool[size_t(i)] = i;
      for (int i = 0; i < k; ++i) {
        const int64_t j = i + rng.uniform_int(n - i);
        std::swap(pool[size_t(i)], pool[size_t(j)]);
        mask.bits.set(g.scalar_indices[size_t(pool[size_t(i)])]);
      }
    }
  }
  return mask;
}

void Selector::freeze_sgst(SgstState& state) const {
  if (strategy_.kind != StrategyKind::sgst)
    throw error("freeze_sgst: selector strategy is not sgst");
  if (state.iters_accumulated < 1)
    throw error("sgst: freeze requested before any accumulation");
  state.mask.iteration = 0;
  state.mask.bits = mandatory_bits();
  std::vector<real> local;
  for (const auto& g : groups_) {
    local.resize(g.scalar_indices.size());
    for (size_t i = 0; i < g.scalar_indices.size(); ++i)
      local[i] = state.accum_abs[size_t(g.scalar_indices[i])];
    for (int li : select_top_gamma(local, strategy_.gamma))
      state.mask.bits.set(g.scalar_indices[size_t(li)]);
  }
  state.frozen = true;
}

int64_t Selector::param_count() const {
  if (has_static_) return cached_static_.count();
  int64_t n = mandatory_bits().count();
  for (const auto& g : groups_)
    n += std::min<int64_t>(strategy_.gamma, int64_t(g.scalar_indices.size()));
  return n;
}

SelectionMask build_selection(const StrategyConfig& strategy,
                              const ParameterRegistry& registry,
                              const GradientSnapshot& snapshot, uint64_t seed,
                              const SgstState* sgst_state) {
  return Selector(registry, strategy, seed).build(snapshot, sgst_state);
}

int64_t strategy_param_count(const StrategyConfig& strategy,
                             const ParameterRegistry& registry) {
  return Selector(registry, strategy, 0).param_count();
}

namespace {

int append_param(Model& m, std::string name, ParamRole role, Region region,
                 std::vector<int64_t> shape) {
  ParameterMeta meta;
  meta.id = int(m.registry.params.size());
  meta.name = std::move(name);
  meta.role = role;
  meta.region = region;
  meta.shape = shape;
  meta.numel = shape_numel(shape);
  meta.offset = m.registry.total_scalars;
  m.registry.total_scalars += meta.numel;
  m.registry.params.push_back(std::move(meta));
  m.params.push_back(Tensor::zeros(std::move(shape)));
  return int(m.params.size()) - 1;
}

template <class F>
void for_each_block(Model& m, F&& f) {
  for (size_t s = 0; s < m.encoder.size(); ++s)
    f(m.encoder[s], Region::encoder, "enc" + std::to_string(s));
  f(m.bottleneck, Region::bottleneck, std::string("bottleneck"));
  for (size_t i = 0; i < m.decoder.size(); ++i) {
    const int scale = int(m.decoder.size()) - 1 - int(i);
    f(m.decoder[i].block, Region::decoder, "dec" + std::to_string(scale));
  }
}

}  // namespace

Model lora_inject(const Model& base, int rank) {
  if (rank < 1) throw config_error("lora: rank must be >= 1");
  if (base.provenance != "base")
    throw config_error("lora: model already injected (" + base.provenance + ")");
  Model m = base;

  auto inject = [&](ConvDef& d, const std::string& name, Region region) {
    const int64_t fan = int64_t(d.ci) * d.kh * d.kw;
    if (rank > std::min<int64_t>(d.co, fan))
      throw config_error("lora: rank " + std::to_string(rank) +
                         " exceeds min dimension " +
                         std::to_string(std::min<int64_t>(d.co, fan)) + " of " +
                         name);
    d.lora_a = append_param(m, name + ".lora_a", ParamRole::lora_a, region,
                            {rank, fan});
    d.lora_b = append_param(m, name + ".lora_b", ParamRole::lora_b, region,
                            {d.co, rank});
    Rng rng(derive_seed(base.init_seed, name + ".lora_a"));
    Tensor& a = m.param(d.lora_a);
    const real std = real(1.0 / std::sqrt(double(fan)));
    for (auto& v : a.data) v = real(rng.normal()) * std;
    // lora_b stays zero: injected forward equals the base forward
  };

  for (size_t s = 0; s < m.encoder.size(); ++s) {
    auto& blk = m.encoder[s];
    inject(blk.u1.conv, "enc" + std::to_string(s) + ".conv1", Region::encoder);
    inject(blk.u2.conv, "enc" + std::to_string(s) + ".conv2", Region::encoder);
  }
  inject(m.bottleneck.u1.conv, "bottleneck.conv1", Region::bottleneck);
  inject(m.bottleneck.u2.conv, "bottleneck.conv2", Region::bottleneck);
  for (size_t i = 0; i < m.decoder.size(); ++i) {
    const int scale = int(m.decoder.size()) - 1 - int(i);
    auto& stage = m.decoder[i];
    const std::string prefix = "dec" + std::to_string(scale);
    inject(stage.up, prefix + ".up", Region::decoder);
    inject(stage.block.u1.conv, prefix + ".conv1", Region::decoder);
    inject(stage.block.u2.conv, prefix + ".conv2", Region::decoder);
  }
  // head 1x1 conv left alone: its min dimension (num_classes) is below any
  // useful rank and the baseline targets backbone convolutions

  m.provenance = "lora(rank=" + std::to_string(rank) + ")";
  m.lora_rank = rank;
  return m;
}

Model adapter_inject(const Model& base, int width) {
  if (width < 1) throw config_error("adapter: width must be >= 1");
  if (base.provenance != "base")
    throw config_error("adapter: model already injected (" + base.provenance + ")");
  Model m = base;

  for_each_block(m, [&](BlockDef& blk, Region region, const std::string& prefix) {
    const int c = blk.u2.conv.co;
    AdapterDef a;
    a.down.ci = c;
    a.down.co = width;
    a.down.kh = a.down.kw = 1;
    a.down.w = append_param(m, prefix + ".adapter.down.weight",
                            ParamRole::adapter_weight, region, {width, c, 1, 1});
    a.down.b = append_param(m, prefix + ".adapter.down.bias",
                            ParamRole::adapter_bias, region, {width});
    a.up.ci = width;
    a.up.co = c;
    a.up.kh = a.up.kw = 1;
    a.up.w = append_param(m, prefix + ".adapter.up.weight",
                          ParamRole::adapter_weight, region, {c, width, 1, 1});
    a.up.b = append_param(m, prefix + ".adapter.up.bias",
                          ParamRole::adapter_bias, region, {c});

    Rng rng(derive_seed(base.init_seed, prefix + ".adapter.down.weight"));
    Tensor& dw = m.param(a.down.w);
    const real std = real(std::sqrt(2.0 / double(c)));
    for (auto& v : dw.data) v = real(rng.normal()) * std;
    // up conv stays zero: residual branch vanishes at injection time

    blk.adapter = a;
  });

  m.provenance = "adapter(width=" + std::to_string(width) + ")";
  m.adapter_width = width;
  return m;
}

Model adapter_remove(const Model& injected) {
  if (injected.adapter_width == 0)
    throw config_error("adapter_remove: model has no adapters (" +
                       injected.provenance + ")");
  Model m = injected;
  // auxiliary params were appended after the base span; find the cut
  size_t base_count = m.params.size();
  for (size_t i = 0; i < m.registry.params.size(); ++i)
    if (is_aux_role(m.registry.params[i].role)) {
      base_count = i;
      break;
    }
  m.registry.params.resize(base_count);
  m.params.resize(base_count);
  m.registry.total_scalars =
      base_count == 0 ? 0
                      : m.registry.params.back().offset +
                            m.registry.params.back().numel;
  for_each_block(m, [&](BlockDef& blk, Region, const std::string&) {
    blk.adapter.reset();
  });
  m.provenance = "base";
  m.adapter_width = 0;
  return m;
}

}  // namespace dgst
