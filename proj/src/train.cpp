#include "dgst/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

#include "dgst/loss.hpp"

namespace dgst {

void OptimConfig::validate() const {
  if (!(lr0 > 0)) throw config_error("optim: lr0 must be positive");
  if (epochs < 1) throw config_error("optim: epochs must be >= 1");
  if (batch_size < 1) throw config_error("optim: batch size must be >= 1");
  if (momentum < 0 || momentum >= 1)
    throw config_error("optim: momentum must be in [0,1)");
}

real poly_lr(real lr0, int64_t n, int64_t total, real power) {
  if (total == 0) throw config_error("poly_lr: total iterations must be > 0");
  if (n < 0 || n > total)
    throw config_error("poly_lr: iteration " + std::to_string(n) +
                       " outside [0," + std::to_string(total) + "]");
  return lr0 * real(std::pow(1.0 - double(n) / double(total), double(power)));
}

void masked_step(Model& model, const GradientSnapshot& grads,
                 const SelectionMask& mask, real lr) {
  if (int64_t(grads.flat.size()) != model.total_scalars() ||
      mask.bits.size() != model.total_scalars())
    throw shape_error("masked_step: snapshot/mask do not cover the model");
  for (const auto& meta : model.registry.params) {
    Tensor& p = model.param(meta.id);
    mask.bits.for_each_set_in(meta.offset, meta.offset + meta.numel,
                              [&](int64_t g) {
      const real gv = grads.flat[size_t(g)];
      if (!std::isfinite(gv))
        throw numeric_error("masked_step: non-finite gradient on selected "
                            "scalar " + std::to_string(g - meta.offset) +
                            " of parameter '" + meta.name + "' at iteration " +
                            std::to_string(mask.iteration));
      p.data[size_t(g - meta.offset)] -= lr * gv;
    });
  }
}

void masked_step_momentum(Model& model, const GradientSnapshot& grads,
                          const SelectionMask& mask, real lr, real momentum,
                          std::vector<real>& velocity) {
  if (momentum == real(0)) {
    masked_step(model, grads, mask, lr);
    return;
  }
  if (velocity.empty())
    velocity.assign(size_t(model.total_scalars()), real(0));
  for (const auto& meta : model.registry.params) {
    Tensor& p = model.param(meta.id);
    mask.bits.for_each_set_in(meta.offset, meta.offset + meta.numel,
                              [&](int64_t g) {
      const real gv = grads.flat[size_t(g)];
      if (!std::isfinite(gv))
        throw numeric_error("masked_step: non-finite gradient on selected "
                            "scalar of parameter '" + meta.name + "'");
      real& v = velocity[size_t(g)];
      v = momentum * v + gv;  // selected gradients only
      p.data[size_t(g - meta.offset)] -= lr * v;
    });
  }
}

double TrainStats::mean_iter_seconds() const {
  if (iterations.empty()) return 0;
  double s = 0;
  for (const auto& it : iterations) s += it.seconds;
  return s / double(iterations.size());
}

double TrainStats::median_iter_seconds() const {
  if (iterations.empty()) return 0;
  std::vector<double> t;
  t.reserve(iterations.size());
  for (const auto& it : iterations) t.push_back(it.seconds);
  std::sort(t.begin(), t.end());
  const size_t n = t.size();
  return n % 2 ? t[n / 2] : 0.5 * (t[n / 2 - 1] + t[n / 2]);
}

int64_t iterations_per_epoch(int n_samples, int batch_size) {
  return (int64_t(n_samples) + batch_size - 1) / batch_size;
}

std::vector<int> batch_indices(int64_t iter, int n_samples, int batch_size,
                               uint64_t seed) {
  const int64_t ipe = iterations_per_epoch(n_samples, batch_size);
  const int64_t epoch = iter / ipe;
  const int64_t pos = iter % ipe;
  const std::vector<int> perm =
      permutation(n_samples, derive_seed(seed, "order", uint64_t(epoch)));
  const int64_t lo = pos * batch_size;
  const int64_t hi = std::min<int64_t>(n_samples, lo + batch_size);
  return std::vector<int>(perm.begin() + lo, perm.begin() + hi);
}

namespace {

struct BatchTensors {
  Tensor images;
  IntTensor labels;
};

BatchTensors assemble_batch(const std::vector<SegSample>& data,
                            const std::vector<int>& idx, int64_t iter,
                            uint64_t seed, bool do_augment) {
  const int64_t b = int64_t(idx.size());
  const int64_t c = data[0].image.dim(0);
  const int64_t h = data[0].image.dim(1), w = data[0].image.dim(2);
  BatchTensors out;
  out.images = Tensor::zeros({b, c, h, w});
  out.labels = IntTensor::zeros({b, h, w});
  for (int64_t s = 0; s < b; ++s) {
    const SegSample* sample = &data[size_t(idx[size_t(s)])];
    SegSample augmented;
    if (do_augment) {
      Rng rng(derive_seed(seed, "aug", uint64_t(iter), uint64_t(s)));
      augmented = augment(*sample, rng);
      sample = &augmented;
    }
    std::copy(sample->image.data.begin(), sample->image.data.end(),
              out.images.data.begin() + s * c * h * w);
    std::copy(sample->label.data.begin(), sample->label.data.end(),
              out.labels.data.begin() + s * h * w);
  }
  return out;
}

// One forward/backward pass; returns the loss value and fills the snapshot.
double gradient_pass(const Model& model, const BatchTensors& batch,
                     int64_t iter, GradientSnapshot& snap_out) {
  GradientTape tape;
  NodeId x = tape.leaf(&batch.images, -1, false);
  NodeId logits = model.forward(tape, x);
  NodeId loss = ce_dice_loss(tape, logits, batch.labels);
  const double loss_value = double(tape.value(loss).item());
  tape.backward(loss);
  snap_out = take_snapshot(tape, model.registry, iter);
  return loss_value;
}

}  // namespace

SgstState sgst_warmup(const Model& model, const std::vector<SegSample>& data,
                      int warmup_iters, uint64_t seed,
                      const StrategyConfig& strategy, const OptimConfig& optim,
                      int64_t* backward_passes) {
  if (data.empty()) throw config_error("sgst_warmup: empty dataset");
  if (warmup_iters < 1)
    throw config_error("sgst_warmup: warmup iterations must be >= 1");
  Selector selector(model.registry, strategy, seed);
  SgstState state;
  for (int64_t it = 0; it < warmup_iters; ++it) {
    const auto idx = batch_indices(it, int(data.size()), optim.batch_size, seed);
    const BatchTensors batch = assemble_batch(data, idx, it, seed, optim.augment);
    GradientSnapshot snap;
    gradient_pass(model, batch, it, snap);
    if (backward_passes != nullptr) ++*backward_passes;
    state.accumulate(snap);
  }
  selector.freeze_sgst(state);
  return state;
}

TrainStats run_training(Model& model, const std::vector<SegSample>& data,
                        const StrategyConfig& strategy, const OptimConfig& optim,
                        uint64_t seed, const TrainHooks* hooks) {
  if (data.empty()) throw config_error("training: empty dataset");
  optim.validate();
  strategy.validate();

  const int n = int(data.size());
  const int64_t ipe = iterations_per_epoch(n, optim.batch_size);
  const int64_t total = int64_t(optim.epochs) * ipe;

  Selector selector(model.registry, strategy, seed);
  TrainStats stats;
  stats.iterations.reserve(size_t(total));

  // static gradient sparsification: accumulate |g| over the schedule prefix
  // from the pre-trained weights, without updating, then freeze the mask
  SgstState sgst_state;
  if (strategy.kind == StrategyKind::sgst) {
    const int warmup = strategy.sgst_warmup_iters > 0 ? strategy.sgst_warmup_iters
                                                      : int(ipe);  // one epoch
    sgst_state = sgst_warmup(model, data, warmup, seed, strategy, optim,
                             &stats.warmup_backward_passes);
  }

  std::vector<real> velocity;
  for (int64_t it = 0; it < total; ++it) {
    const auto idx = batch_indices(it, n, optim.batch_size, seed);
    const BatchTensors batch = assemble_batch(data, idx, it, seed, optim.augment);

    const auto t0 = std::chrono::steady_clock::now();
    GradientSnapshot snap;
    const double loss_value = gradient_pass(model, batch, it, snap);
    ++stats.backward_passes;
    const SelectionMask mask = selector.build(snap, &sgst_state);
    const real lr = poly_lr(optim.lr0, it, total, optim.poly_power);
    masked_step_momentum(model, snap, mask, lr, optim.momentum, velocity);
    const auto t1 = std::chrono::steady_clock::now();

    IterationStat s;
    s.loss = loss_value;
    s.selected = mask.count();
    s.seconds = std::chrono::duration<double>(t1 - t0).count();
    stats.iterations.push_back(s);
    if (hooks != nullptr && hooks->after_step) hooks->after_step(it, mask, model);
  }
  return stats;
}

Model finetune_loop(const Model& foundation, const StrategyConfig& strategy,
                    const std::vector<SegSample>& shots,
                    const OptimConfig& optim, uint64_t seed,
                    TrainStats* stats_out, const TrainHooks* hooks) {
  if (shots.empty()) throw config_error("finetune: empty few-shot set");
  Model model;
  switch (strategy.kind) {
    case StrategyKind::from_scratch:
      model = build_unet(foundation.config, derive_seed(seed, "scratch-init"));
      break;
    case StrategyKind::lora:
      model = lora_inject(foundation, strategy.lora_rank);
      break;
    case StrategyKind::adapter:
      model = adapter_inject(foundation, strategy.adapter_width);
      break;
    default:
      model = foundation;
      break;
  }
  TrainStats stats = run_training(model, shots, strategy, optim, seed, hooks);
  if (stats_out != nullptr) *stats_out = std::move(stats);
  return model;
}

Model pretrain_loop(const ModelConfig& config,
                    const std::vector<SegSample>& source,
                    const OptimConfig& optim, uint64_t seed,
                    TrainStats* stats_out) {
  if (source.empty()) throw config_error("pretrain: empty source dataset");
  Model model = build_unet(config, seed);
  StrategyConfig full;
  full.kind = StrategyKind::full;
  TrainStats stats = run_training(model, source, full, optim, seed);
  if (stats_out != nullptr) *stats_out = std::move(stats);
  return model;
}

}  // namespace dgst
