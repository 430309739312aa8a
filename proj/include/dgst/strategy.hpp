#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dgst/bitset.hpp"
#include "dgst/tape.hpp"
#include "dgst/unet.hpp"

namespace dgst {

enum class StrategyKind : uint8_t {
  full,
  from_scratch,
  linear_prob,
  bias,
  bias_norm,
  affine_in,
  encoder_only,
  decoder_only,
  lora,
  adapter,
  drst,
  sgst,
  dgst,
};

StrategyKind parse_strategy_kind(std::string_view name);
const char* to_string(StrategyKind k);
bool is_gradient_sparsified(StrategyKind k);  // dgst | sgst | drst
bool is_injected(StrategyKind k);             // lora | adapter

struct StrategyConfig {
  StrategyKind kind = StrategyKind::dgst;
  int gamma = 1;              // dgst/sgst/drst
  int lora_rank = 4;          // lora
  int adapter_width = 8;      // adapter
  int sgst_warmup_iters = 0;  // sgst; 0 resolves to one epoch of iterations

  void validate() const;
  std::string label() const;  // "dgst(gamma=1)" etc, for provenance/records
};

// Per-parameter gradients of one iteration, stored over the flat scalar
// index space of the registry.
struct GradientSnapshot {
  int64_t iteration = 0;
  std::vector<real> flat;

  std::span<const real> of(const ParameterMeta& m) const {
    return {flat.data() + m.offset, size_t(m.numel)};
  }
};

GradientSnapshot take_snapshot(const GradientTape& tape,
                               const ParameterRegistry& registry,
                               int64_t iteration);

// The set of scalars updated at one iteration.
struct SelectionMask {
  int64_t iteration = 0;
  Bitset bits;

  int64_t count() const { return bits.count(); }
};

// Indices (into the group) of the min(gamma, size) entries with the largest
// |g|; ties break toward the lowest index.
std::vector<int> select_top_gamma(std::span<const real> group_grads, int gamma);

// Accumulated-|gradient| state for static gradient sparsification.
struct SgstState {
  std::vector<real> accum_abs;
  int64_t iters_accumulated = 0;
  bool frozen = false;
  SelectionMask mask;

  void accumulate(const GradientSnapshot& snapshot);
};

// Builds selection masks for every strategy kind. Kernel groups are computed
// once; static strategies cache their mask.
class Selector {
 public:
  Selector(const ParameterRegistry& registry, StrategyConfig strategy,
           uint64_t seed);

  SelectionMask build(const GradientSnapshot& snapshot,
                      const SgstState* sgst_state = nullptr) const;

  // Scalars updatable per iteration under this strategy.
  int64_t param_count() const;

  const std::vector<KernelGroup>& kernel_groups() const { return groups_; }
  void freeze_sgst(SgstState& state) const;  // ranks by accumulated |g|

 private:
  Bitset mandatory_bits() const;  // bias + norm scalars (gradient strategies)
  Bitset static_mask() const;

  const ParameterRegistry* registry_;
  StrategyConfig strategy_;
  uint64_t seed_;
  std::vector<KernelGroup> groups_;
  Bitset cached_static_;
  bool has_static_ = false;
};

// One-off convenience wrapper over Selector.
SelectionMask build_selection(const StrategyConfig& strategy,
                              const ParameterRegistry& registry,
                              const GradientSnapshot& snapshot, uint64_t seed,
                              const SgstState* sgst_state = nullptr);

int64_t strategy_param_count(const StrategyConfig& strategy,
                             const ParameterRegistry& registry);

// Structural baselines: frozen base plus trainable additions. Both leave the
// forward function bit-identical at injection time.
Model lora_inject(const Model& base, int rank);
Model adapter_inject(const Model& base, int width);
Model adapter_remove(const Model& injected);

}  // namespace dgst
