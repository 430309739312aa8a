#pragma once

#include <functional>
#include <vector>

#include "dgst/metrics.hpp"
#include "dgst/strategy.hpp"
#include "dgst/synth.hpp"
#include "dgst/unet.hpp"

namespace dgst {

struct OptimConfig {
  real lr0 = real(0.001);      // pretraining uses 0.01
  real poly_power = real(0.9);
  int epochs = 50;             // pretraining analog uses 200
  int batch_size = 2;
  real momentum = real(0);     // extension; 0 keeps the literal update rule
  bool augment = true;

  void validate() const;
};

// lr0 * (1 - n/T)^power
real poly_lr(real lr0, int64_t n, int64_t total, real power);

// theta <- theta - lr * g on selected scalars; unselected scalars stay
// bit-identical. NaN gradient on a selected scalar aborts with diagnostics.
void masked_step(Model& model, const GradientSnapshot& grads,
                 const SelectionMask& mask, real lr);

// Momentum variant (extension): buffers accumulate only selected gradients.
void masked_step_momentum(Model& model, const GradientSnapshot& grads,
                          const SelectionMask& mask, real lr, real momentum,
                          std::vector<real>& velocity);

struct IterationStat {
  double loss = 0;
  int64_t selected = 0;
  double seconds = 0;
};

struct TrainStats {
  std::vector<IterationStat> iterations;
  int64_t backward_passes = 0;         // update loop only
  int64_t warmup_backward_passes = 0;  // sgst warmup
  double mean_iter_seconds() const;
  double median_iter_seconds() const;
};

struct TrainHooks {
  // called after each masked step
  std::function<void(int64_t iter, const SelectionMask&, const Model&)>
      after_step;
};

// Deterministic iteration -> sample indices. Each epoch is a seeded shuffle;
// the trailing batch of an epoch may be smaller.
std::vector<int> batch_indices(int64_t iter, int n_samples, int batch_size,
                               uint64_t seed);
int64_t iterations_per_epoch(int n_samples, int batch_size);

// Gradient accumulation pass for static gradient sparsification: runs
// `warmup_iters` forward/backward passes over the same batch schedule the
// update loop would see, without touching parameters, then freezes the
// top-gamma-per-kernel (+bias+norm) mask.
SgstState sgst_warmup(const Model& model, const std::vector<SegSample>& data,
                      int warmup_iters, uint64_t seed,
                      const StrategyConfig& strategy, const OptimConfig& optim,
                      int64_t* backward_passes = nullptr);

// Masked-SGD update loop shared by fine-tuning and pretraining. The model is
// updated in place (it must already be injected for lora/adapter).
TrainStats run_training(Model& model, const std::vector<SegSample>& data,
                        const StrategyConfig& strategy, const OptimConfig& optim,
                        uint64_t seed, const TrainHooks* hooks = nullptr);

// Fine-tunes a copy of `foundation` under `strategy` (handling injection and
// the from-scratch reinitialization) and returns the final model.
Model finetune_loop(const Model& foundation, const StrategyConfig& strategy,
                    const std::vector<SegSample>& shots,
                    const OptimConfig& optim, uint64_t seed,
                    TrainStats* stats_out = nullptr,
                    const TrainHooks* hooks = nullptr);

// Full-parameter training from random init on the source domain.
Model pretrain_loop(const ModelConfig& config,
                    const std::vector<SegSample>& source,
                    const OptimConfig& optim, uint64_t seed,
                    TrainStats* stats_out = nullptr);

}  // namespace dgst
