#include <cmath>

#include "dgst/loss.hpp"
#include "dgst/train.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace dgst;

TEST_CASE("poly_lr: endpoints, midpoint value, monotonicity, T=0 error") {
  CHECK(poly_lr(real(0.01), 0, 100, real(0.9)) == real(0.01));
  CHECK(poly_lr(real(0.01), 100, 100, real(0.9)) == real(0));
  // lr0 * 0.5^0.9 at the midpoint
  CHECK(double(poly_lr(real(0.001), 50, 100, real(0.9))) ==
        doctest::Approx(5.3589e-4).epsilon(1e-5));
  real prev = poly_lr(real(1), 0, 10, real(0.9));
  for (int n = 1; n <= 10; ++n) {
    const real cur = poly_lr(real(1), n, 10, real(0.9));
    CHECK(cur < prev);
    prev = cur;
  }
  CHECK_THROWS_AS((void)poly_lr(real(0.01), 0, 0, real(0.9)), config_error);
  CHECK_THROWS_AS((void)poly_lr(real(0.01), 11, 10, real(0.9)), config_error);
}

namespace {

Model tiny_model() {
  ModelConfig cfg;
  cfg.base_width = 2;
  cfg.depth = 2;
  return build_unet(cfg, 77);
}

GradientSnapshot snapshot_of(const Model& m, std::vector<real> flat) {
  GradientSnapshot s;
  s.flat = std::move(flat);
  s.flat.resize(size_t(m.registry.total_scalars), real(0));
  return s;
}

std::vector<SegSample> blob_samples(int n, int size, uint64_t seed) {
  return generate_domain(source_domain(), n, seed).samples;
}

}  // namespace

TEST_CASE("masked_step: hand example, empty mask, saturation") {
  Model m = tiny_model();
  const Model before = m;

  SUBCASE("theta=[1,2], g=[.5,.5], mask={0}, lr=.1 -> [0.95, 2]") {
    GradientSnapshot g = snapshot_of(m, {real(0.5), real(0.5)});
    SelectionMask mask;
    mask.bits = Bitset(m.registry.total_scalars);
    mask.bits.set(0);
    m.param(0).data[0] = real(1);
    m.param(0).data[1] = real(2);
    masked_step(m, g, mask, real(0.1));
    CHECK(m.param(0).data[0] == doctest::Approx(0.95));
    CHECK(m.param(0).data[1] == real(2));
  }

  SUBCASE("empty mask leaves parameters bit-identical") {
    GradientSnapshot g = snapshot_of(m, {});
    Rng rng(1);
    for (auto& v : g.flat) v = real(rng.uniform(-1, 1));
    SelectionMask mask;
    mask.bits = Bitset(m.registry.total_scalars);
    masked_step(m, g, mask, real(0.1));
    CHECK(m.params_equal(before));
  }

  SUBCASE("all-true mask equals an unmasked SGD step") {
    GradientSnapshot g = snapshot_of(m, {});
    Rng rng(2);
    for (auto& v : g.flat) v = real(rng.uniform(-1, 1));
    SelectionMask mask;
    mask.bits = Bitset(m.registry.total_scalars, true);
    Model sgd = m;
    masked_step(m, g, mask, real(0.05));
    for (const auto& meta : sgd.registry.params)
      for (int64_t i = 0; i < meta.numel; ++i)
        sgd.param(meta.id).data[size_t(i)] -=
            real(0.05) * g.flat[size_t(meta.offset + i)];
    CHECK(m.params_equal(sgd));
  }

  SUBCASE("NaN gradient on a selected scalar aborts with diagnostics") {
    GradientSnapshot g = snapshot_of(m, {});
    g.flat[3] = std::numeric_limits<real>::quiet_NaN();
    SelectionMask mask;
    mask.bits = Bitset(m.registry.total_scalars);
    mask.bits.set(3);
    CHECK_THROWS_WITH_AS(masked_step(m, g, mask, real(0.1)),
                         doctest::Contains("non-finite"), numeric_error);
    // the same NaN on an unselected scalar is ignored
    mask.bits.set(3, false);
    mask.bits.set(4);
    masked_step(m, g, mask, real(0.1));
  }
}

TEST_CASE("unselected-parameter freeze across real training steps") {
  Model m = tiny_model();
  const auto data = blob_samples(4, 64, 900);

  StrategyConfig s;
  s.kind = StrategyKind::dgst;
  s.gamma = 1;
  OptimConfig o;
  o.epochs = 2;
  o.batch_size = 2;

  std::vector<Tensor> prev;
  for (const auto& t : m.params) prev.push_back(t);
  int64_t checked = 0;
  TrainHooks hooks;
  hooks.after_step = [&](int64_t, const SelectionMask& mask, const Model& model) {
    for (const auto& meta : model.registry.params) {
      const Tensor& now = model.param(meta.id);
      for (int64_t i = 0; i < meta.numel; ++i)
        if (!mask.bits.test(meta.offset + i)) {
          CHECK(now.data[size_t(i)] == prev[size_t(meta.id)].data[size_t(i)]);
          ++checked;
        }
    }
    prev.clear();
    for (const auto& t : model.params) prev.push_back(t);
  };
  run_training(m, data, s, o, 5, &hooks);
  CHECK(checked > 0);
}

TEST_CASE("iteration accounting: 50 epochs x ceil(4/2) = 100 iterations") {
  Model m = tiny_model();
  const auto data = blob_samples(4, 64, 901);
  StrategyConfig s;
  s.kind = StrategyKind::bias;  // cheap strategy keeps this test fast
  OptimConfig o;
  o.epochs = 50;
  o.batch_size = 2;
  const TrainStats stats = run_training(m, data, s, o, 3);
  CHECK(stats.iterations.size() == 100);
  CHECK(stats.backward_passes == 100);  // one backward per iteration
  CHECK(stats.warmup_backward_passes == 0);
}

TEST_CASE("batch schedule: every epoch covers all samples, deterministic") {
  const int n = 5, b = 2;
  const int64_t ipe = iterations_per_epoch(n, b);
  CHECK(ipe == 3);
  for (int64_t epoch = 0; epoch < 3; ++epoch) {
    std::vector<int> seen;
    for (int64_t pos = 0; pos < ipe; ++pos) {
      const auto idx = batch_indices(epoch * ipe + pos, n, b, 42);
      const auto again = batch_indices(epoch * ipe + pos, n, b, 42);
      CHECK(idx == again);
      seen.insert(seen.end(), idx.begin(), idx.end());
    }
    std::sort(seen.begin(), seen.end());
    CHECK(seen == std::vector<int>{0, 1, 2, 3, 4});
  }
}

TEST_CASE("per-iteration updated count equals strategy_param_count") {
  Model m = tiny_model();
  const auto data = blob_samples(4, 64, 902);
  for (StrategyKind k : {StrategyKind::dgst, StrategyKind::drst,
                         StrategyKind::bias_norm, StrategyKind::linear_prob}) {
    Model copy = m;
    StrategyConfig s;
    s.kind = k;
    s.gamma = 2;
    OptimConfig o;
    o.epochs = 2;
    o.batch_size = 2;
    const int64_t want = strategy_param_count(s, copy.registry);
    const TrainStats stats = run_training(copy, data, s, o, 5);
    for (const auto& it : stats.iterations) CHECK(it.selected == want);
  }
}

TEST_CASE("sgst warmup leaves parameters untouched and matches dgst at 1 iter") {
  Model m = tiny_model();
  const auto data = blob_samples(4, 64, 903);
  const Model before = m;
  OptimConfig o;
  o.epochs = 1;
  o.batch_size = 2;

  StrategyConfig sgst_cfg;
  sgst_cfg.kind = StrategyKind::sgst;
  sgst_cfg.gamma = 1;
  int64_t passes = 0;
  const SgstState state = sgst_warmup(m, data, 1, 11, sgst_cfg, o, &passes);
  CHECK(m.params_equal(before));  // warmup never updates
  CHECK(passes == 1);
  CHECK(state.frozen);

  // warmup of length 1 equals the dgst mask for the same first batch
  const auto idx = batch_indices(0, int(data.size()), o.batch_size, 11);
  Tensor images = Tensor::zeros({int64_t(idx.size()), 1, 64, 64});
  IntTensor labels = IntTensor::zeros({int64_t(idx.size()), 64, 64});
  for (size_t s = 0; s < idx.size(); ++s) {
    Rng rng(derive_seed(11, "aug", 0, uint64_t(s)));
    const SegSample aug = augment(data[size_t(idx[s])], rng);
    std::copy(aug.image.data.begin(), aug.image.data.end(),
              images.data.begin() + int64_t(s) * 64 * 64);
    std::copy(aug.label.data.begin(), aug.label.data.end(),
              labels.data.begin() + int64_t(s) * 64 * 64);
  }
  GradientTape t;
  NodeId out = m.forward(t, t.leaf(&images, -1, false));
  t.backward(ce_dice_loss(t, out, labels));
  const GradientSnapshot snap = take_snapshot(t, m.registry, 0);
  StrategyConfig dg;
  dg.kind = StrategyKind::dgst;
  dg.gamma = 1;
  const SelectionMask dgst_mask = build_selection(dg, m.registry, snap, 11);
  CHECK(state.mask.bits == dgst_mask.bits);
}

TEST_CASE("sgst: mask constant across all post-warmup iterations") {
  Model m = tiny_model();
  const auto data = blob_samples(4, 64, 904);
  StrategyConfig s;
  s.kind = StrategyKind::sgst;
  s.gamma = 1;
  OptimConfig o;
  o.epochs = 3;
  o.batch_size = 2;
  std::vector<Bitset> masks;
  TrainHooks hooks;
  hooks.after_step = [&](int64_t, const SelectionMask& mask, const Model&) {
    masks.push_back(mask.bits);
  };
  const TrainStats stats = run_training(m, data, s, o, 6, &hooks);
  CHECK(stats.warmup_backward_passes == 2);  // one epoch of warmup by default
  REQUIRE(masks.size() == 6);
  for (size_t i = 1; i < masks.size(); ++i) CHECK(masks[i] == masks[0]);
}

TEST_CASE("from-scratch uses a fresh init; full keeps the foundation start") {
  const Model foundation = build_unet(ModelConfig{.base_width = 2, .depth = 2}, 7);
  const auto data = blob_samples(2, 64, 905);
  OptimConfig o;
  o.epochs = 1;
  o.batch_size = 2;

  StrategyConfig fs;
  fs.kind = StrategyKind::from_scratch;
  TrainStats st;
  const Model scratch = finetune_loop(foundation, fs, data, o, 9, &st);
  CHECK_FALSE(scratch.params_equal(foundation));
  CHECK(st.iterations.size() == 1);

  // determinism: same seed, same result
  const Model scratch2 = finetune_loop(foundation, fs, data, o, 9);
  CHECK(scratch.params_equal(scratch2));
}

TEST_CASE("training rejects empty datasets and bad configs") {
  Model m = tiny_model();
  StrategyConfig s;
  s.kind = StrategyKind::full;
  OptimConfig o;
  CHECK_THROWS_AS((void)run_training(m, {}, s, o, 1), config_error);
  o.epochs = 0;
  CHECK_THROWS_AS((void)run_training(m, blob_samples(2, 64, 1), s, o, 1),
                  config_error);
  OptimConfig bad_lr;
  bad_lr.lr0 = real(0);
  CHECK_THROWS_AS((void)run_training(m, blob_samples(2, 64, 1), s, bad_lr, 1),
                  config_error);
}

TEST_CASE("momentum extension accumulates only selected gradients") {
  Model m = tiny_model();
  m.param(0).data[0] = real(1);
  m.param(0).data[1] = real(1);
  GradientSnapshot g;
  g.flat.assign(size_t(m.registry.total_scalars), real(0));
  g.flat[0] = real(1);
  g.flat[1] = real(1);
  SelectionMask mask;
  mask.bits = Bitset(m.registry.total_scalars);
  mask.bits.set(0);
  std::vector<real> velocity;
  masked_step_momentum(m, g, mask, real(0.1), real(0.9), velocity);
  masked_step_momentum(m, g, mask, real(0.1), real(0.9), velocity);
  // selected scalar: v1=1, v2=1.9 -> theta = 1 - .1 - .19
  CHECK(m.param(0).data[0] == doctest::Approx(0.71));
  CHECK(m.param(0).data[1] == real(1));  // untouched, no velocity
}
