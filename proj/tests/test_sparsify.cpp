#include <set>

#include "dgst/strategy.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace dgst;

namespace {

// Toy registry: one 3x3 conv layer with 4 kernels over 2 input channels
// (4 groups of 18 scalars) plus 4 biases.
Model toy_model() {
  ModelConfig cfg;
  cfg.in_channels = 2;
  cfg.base_width = 4;
  cfg.depth = 2;
  return build_unet(cfg, 123);
}

GradientSnapshot zero_snapshot(const ParameterRegistry& reg, int64_t iter = 0) {
  GradientSnapshot s;
  s.iteration = iter;
  s.flat.assign(size_t(reg.total_scalars), real(0));
  return s;
}

int64_t count_role(const ParameterRegistry& reg,
                   std::initializer_list<ParamRole> roles) {
  int64_t n = 0;
  for (const auto& p : reg.params)
    for (ParamRole r : roles)
      if (p.role == r) n += p.numel;
  return n;
}

}  // namespace

TEST_CASE("select_top_gamma: magnitude ranking and tie-breaks") {
  std::vector<real> g = {0.1, -0.5, 0.3};
  auto sel = select_top_gamma(std::span<const real>(g.data(), g.size()), 1);
  REQUIRE(sel.size() == 1);
  CHECK(sel[0] == 1);

  // gamma >= group size saturates
  sel = select_top_gamma(std::span<const real>(g.data(), g.size()), 7);
  CHECK(sel.size() == 3);

  // exact-tie magnitudes resolve to the lowest index
  std::vector<real> tie = {0.2, -0.2};
  sel = select_top_gamma(std::span<const real>(tie.data(), tie.size()), 1);
  REQUIRE(sel.size() == 1);
  CHECK(sel[0] == 0);
}

TEST_CASE("build_selection: full mask is all-true") {
  const Model m = toy_model();
  StrategyConfig s;
  s.kind = StrategyKind::full;
  const SelectionMask mask =
      build_selection(s, m.registry, zero_snapshot(m.registry), 0);
  CHECK(mask.count() == m.registry.total_scalars);
}

TEST_CASE("build_selection: per-kind masks select exactly the right roles") {
  const Model m = toy_model();
  const auto snapshot = zero_snapshot(m.registry);
  auto mask_for = [&](StrategyKind k) {
    StrategyConfig s;
    s.kind = k;
    return build_selection(s, m.registry, snapshot, 0);
  };

  CHECK(mask_for(StrategyKind::linear_prob).count() ==
        count_role(m.registry, {ParamRole::head_weight, ParamRole::head_bias}));
  CHECK(mask_for(StrategyKind::bias).count() ==
        count_role(m.registry, {ParamRole::bias, ParamRole::head_bias}));
  CHECK(mask_for(StrategyKind::affine_in).count() ==
        count_role(m.registry, {ParamRole::norm_scale, ParamRole::norm_shift}));
  CHECK(mask_for(StrategyKind::bias_norm).count() ==
        count_role(m.registry, {ParamRole::bias, ParamRole::head_bias,
                                ParamRole::norm_scale, ParamRole::norm_shift}));

  int64_t enc = 0, dec = 0;
  for (const auto& p : m.registry.params) {
    if (p.region == Region::encoder || p.region == Region::bottleneck)
      enc += p.numel;
    if (p.region == Region::decoder) dec += p.numel;
  }
  CHECK(mask_for(StrategyKind::encoder_only).count() == enc);
  CHECK(mask_for(StrategyKind::decoder_only).count() == dec);

  // the per-kind masks select the advertised scalars, not merely the count
  const SelectionMask lp = mask_for(StrategyKind::linear_prob);
  for (const auto& p : m.registry.params) {
    const bool head =
        p.role == ParamRole::head_weight || p.role == ParamRole::head_bias;
    for (int64_t i = 0; i < p.numel; ++i)
      CHECK(lp.bits.test(p.offset + i) == head);
  }
}

TEST_CASE("dgst: toy count 4*2 + biases and the all-zero tie-break case") {
  const Model m = toy_model();
  const auto groups = partition_kernels(m.registry);
  StrategyConfig s;
  s.kind = StrategyKind::dgst;
  s.gamma = 2;

  // expected: sum_k min(gamma,|C_k|) + all bias + norm scalars
  int64_t expected = count_role(m.registry, {ParamRole::bias, ParamRole::head_bias,
                                             ParamRole::norm_scale,
                                             ParamRole::norm_shift});
  for (const auto& g : groups)
    expected += std::min<int64_t>(2, int64_t(g.scalar_indices.size()));

  const SelectionMask mask =
      build_selection(s, m.registry, zero_snapshot(m.registry), 0);
  CHECK(mask.count() == expected);
  CHECK(strategy_param_count(s, m.registry) == expected);

  // all-zero gradients: per kernel the gamma lowest scalar indices win
  for (const auto& g : groups) {
    for (size_t i = 0; i < g.scalar_indices.size(); ++i) {
      const bool want = i < 2;
      CHECK(mask.bits.test(g.scalar_indices[i]) == want);
    }
  }
}

TEST_CASE("dgst: selection follows the gradient magnitudes per kernel") {
  const Model m = toy_model();
  const auto groups = partition_kernels(m.registry);
  GradientSnapshot snap = zero_snapshot(m.registry);
  Rng rng(5);
  for (auto& v : snap.flat) v = real(rng.uniform(-1, 1));

  StrategyConfig s;
  s.kind = StrategyKind::dgst;
  s.gamma = 3;
  const SelectionMask mask = build_selection(s, m.registry, snap, 0);

  for (const auto& g : groups) {
    // reference: sort by |g| descending, index ascending
    std::vector<std::pair<real, int64_t>> ranked;
    for (int64_t idx : g.scalar_indices)
      ranked.emplace_back(-std::abs(snap.flat[size_t(idx)]), idx);
    std::sort(ranked.begin(), ranked.end());
    const size_t take = std::min<size_t>(3, ranked.size());
    std::set<int64_t> want;
    for (size_t i = 0; i < take; ++i) want.insert(ranked[i].second);
    for (int64_t idx : g.scalar_indices)
      CHECK(mask.bits.test(idx) == (want.count(idx) > 0));
  }
}

TEST_CASE("mandatory inclusion: bias and norm scalars always selected") {
  const Model m = toy_model();
  GradientSnapshot snap = zero_snapshot(m.registry);
  Rng rng(6);
  for (auto& v : snap.flat) v = real(rng.uniform(-1, 1));
  for (StrategyKind k : {StrategyKind::dgst, StrategyKind::drst}) {
    StrategyConfig s;
    s.kind = k;
    s.gamma = 1;
    const SelectionMask mask = build_selection(s, m.registry, snap, 17);
    for (const auto& p : m.registry.params) {
      if (p.role != ParamRole::bias && p.role != ParamRole::head_bias &&
          p.role != ParamRole::norm_scale && p.role != ParamRole::norm_shift)
        continue;
      for (int64_t i = 0; i < p.numel; ++i) CHECK(mask.bits.test(p.offset + i));
    }
  }
}

TEST_CASE("drst: same cardinality as dgst, reproducible, iteration-keyed") {
  const Model m = toy_model();
  GradientSnapshot snap = zero_snapshot(m.registry, 4);
  Rng rng(7);
  for (auto& v : snap.flat) v = real(rng.uniform(-1, 1));

  StrategyConfig dg;
  dg.kind = StrategyKind::dgst;
  dg.gamma = 2;
  StrategyConfig dr = dg;
  dr.kind = StrategyKind::drst;

  const SelectionMask a = build_selection(dr, m.registry, snap, 99);
  const SelectionMask b = build_selection(dr, m.registry, snap, 99);
  CHECK(a.bits == b.bits);
  CHECK(a.count() == build_selection(dg, m.registry, snap, 99).count());

  GradientSnapshot snap2 = snap;
  snap2.iteration = 5;
  const SelectionMask c = build_selection(dr, m.registry, snap2, 99);
  CHECK(c.count() == a.count());
  CHECK_FALSE(c.bits == a.bits);  // fresh draws per iteration

  const SelectionMask d = build_selection(dr, m.registry, snap, 100);
  CHECK_FALSE(d.bits == a.bits);  // seed-keyed
}

TEST_CASE("sgst: selection before warmup completes is an error") {
  const Model m = toy_model();
  StrategyConfig s;
  s.kind = StrategyKind::sgst;
  CHECK_THROWS_WITH_AS(
      (void)build_selection(s, m.registry, zero_snapshot(m.registry), 0),
      doctest::Contains("warmup"), error);
  SgstState unfrozen;
  CHECK_THROWS_AS((void)build_selection(s, m.registry, zero_snapshot(m.registry),
                                        0, &unfrozen),
                  error);
}

TEST_CASE("sgst: accumulation ranks by |g1| + |g2|") {
  const Model m = toy_model();
  const auto groups = partition_kernels(m.registry);
  StrategyConfig s;
  s.kind = StrategyKind::sgst;
  s.gamma = 1;
  Selector selector(m.registry, s, 0);

  GradientSnapshot g1 = zero_snapshot(m.registry, 0);
  GradientSnapshot g2 = zero_snapshot(m.registry, 1);
  // hand-set: in group 0, scalar A gets (+0.4, -0.5) -> 0.9 accumulated;
  // scalar B gets (+0.6, 0.0) -> 0.6; A must win despite B's larger |g1| peak
  const int64_t a_idx = groups[0].scalar_indices[3];
  const int64_t b_idx = groups[0].scalar_indices[5];
  g1.flat[size_t(a_idx)] = real(0.4);
  g2.flat[size_t(a_idx)] = real(-0.5);
  g1.flat[size_t(b_idx)] = real(0.6);

  SgstState state;
  state.accumulate(g1);
  state.accumulate(g2);
  CHECK(state.iters_accumulated == 2);
  selector.freeze_sgst(state);
  CHECK(state.frozen);
  CHECK(state.mask.bits.test(a_idx));
  CHECK_FALSE(state.mask.bits.test(b_idx));

  // frozen mask is returned verbatim for any later iteration
  const SelectionMask m1 = selector.build(zero_snapshot(m.registry, 10), &state);
  const SelectionMask m2 = selector.build(zero_snapshot(m.registry, 99), &state);
  CHECK(m1.bits == state.mask.bits);
  CHECK(m2.bits == state.mask.bits);
}

TEST_CASE("lora_inject: identity at init, trainable counting, rank errors") {
  const Model base = build_unet(ModelConfig{}, 31);
  const Model lora = lora_inject(base, 4);

  Rng rng(32);
  for (int rep = 0; rep < 3; ++rep) {
    Tensor x = oracle::random_tensor({1, 1, 16, 16}, rng, 0, 1);
    const Tensor a = base.forward(x);
    const Tensor b = lora.forward(x);
    REQUIRE(a.shape == b.shape);
    CHECK(a.data == b.data);  // bit-identical
  }

  // trainable aux scalars: sum over targeted layers of r*(Cout + Cin*kh*kw)
  int64_t expected = 0;
  for (const auto& p : base.registry.params) {
    if (p.role == ParamRole::conv_weight)
      expected += 4 * (p.shape[0] + p.shape[1] * p.shape[2] * p.shape[3]);
    if (p.role == ParamRole::tconv_weight)
      expected += 4 * (p.shape[1] + p.shape[0] * p.shape[2] * p.shape[3]);
  }
  StrategyConfig s;
  s.kind = StrategyKind::lora;
  s.lora_rank = 4;
  CHECK(strategy_param_count(s, lora.registry) == expected);
  CHECK(lora.registry.total_scalars == base.registry.total_scalars + expected);

  // head (min dimension = num_classes = 2) is not injected
  CHECK(lora.registry.find("head.lora_a") == nullptr);

  // rank larger than a layer's min dimension is rejected
  CHECK_THROWS_WITH_AS((void)lora_inject(base, 9), doctest::Contains("rank"),
                       config_error);
  // double injection is rejected
  CHECK_THROWS_AS((void)lora_inject(lora, 2), config_error);
}

TEST_CASE("lora: gradients flow to A and B; base stays frozen under the mask") {
  const Model base = build_unet(ModelConfig{}, 33);
  Model lora = lora_inject(base, 2);
  Rng rng(34);
  Tensor x = oracle::random_tensor({1, 1, 8, 8}, rng, 0, 1);

  const ParameterMeta* a_meta = lora.registry.find("enc0.conv1.lora_a");
  const ParameterMeta* b_meta = lora.registry.find("enc0.conv1.lora_b");
  const ParameterMeta* w_meta = lora.registry.find("enc0.conv1.conv.weight");
  REQUIRE(a_meta != nullptr);
  REQUIRE(b_meta != nullptr);
  REQUIRE(w_meta != nullptr);

  auto grad_mag = [&](const Model& m, int pid) {
    GradientTape t;
    Rng prng(35);
    NodeId out = m.forward(t, t.leaf(&x, -1, false));
    t.backward(t.sum(t.mul(
        out, t.constant(oracle::random_tensor(t.value(out).shape, prng)))));
    const Tensor* g = t.param_grad(pid);
    if (g == nullptr) return 0.0;
    double mag = 0;
    for (real v : g->data) mag += std::abs(double(v));
    return mag;
  };

  // at injection B = 0, so B receives gradient first; dL/dA = B^T(...) = 0
  CHECK(grad_mag(lora, b_meta->id) > 0);
  CHECK(grad_mag(lora, a_meta->id) == 0.0);
  // once B moves off zero, gradient reaches A as well
  for (auto& v : lora.param(b_meta->id).data) v = real(0.05);
  CHECK(grad_mag(lora, a_meta->id) > 0);

  // the base weight picks up a gradient on the tape, but the lora mask
  // excludes it from updates
  StrategyConfig s;
  s.kind = StrategyKind::lora;
  const SelectionMask mask =
      build_selection(s, lora.registry, zero_snapshot(lora.registry), 0);
  for (int64_t i = 0; i < w_meta->numel; ++i)
    CHECK_FALSE(mask.bits.test(w_meta->offset + i));
  for (int64_t i = 0; i < a_meta->numel; ++i)
    CHECK(mask.bits.test(a_meta->offset + i));
}

TEST_CASE("adapter_inject: identity at init, counting, removal restores base") {
  const Model base = build_unet(ModelConfig{}, 41);
  const int width = 8;
  const Model adapted = adapter_inject(base, width);

  Rng rng(42);
  Tensor x = oracle::random_tensor({1, 1, 16, 16}, rng, 0, 1);
  CHECK(base.forward(x).data == adapted.forward(x).data);

  // per block: C*width + width + width*C + C over 2*depth+1 blocks
  int64_t expected = 0;
  std::vector<int> widths;
  const int bw = base.config.base_width;
  for (int s = 0; s < base.config.depth; ++s) widths.push_back(bw << s);
  widths.push_back(bw << base.config.depth);  // bottleneck
  for (int s = base.config.depth - 1; s >= 0; --s) widths.push_back(bw << s);
  for (int c : widths) expected += int64_t(c) * width + width + int64_t(width) * c + c;

  StrategyConfig s;
  s.kind = StrategyKind::adapter;
  s.adapter_width = width;
  CHECK(strategy_param_count(s, adapted.registry) == expected);

  const Model restored = adapter_remove(adapted);
  CHECK(restored.params_equal(base));
  CHECK(restored.registry.digest() == base.registry.digest());
  CHECK(restored.forward(x).data == base.forward(x).data);
  CHECK_THROWS_AS((void)adapter_remove(base), config_error);
}

TEST_CASE("strategy_param_count: full and linear-prob totals") {
  const Model m = toy_model();
  StrategyConfig s;
  s.kind = StrategyKind::full;
  CHECK(strategy_param_count(s, m.registry) == m.registry.total_scalars);
  s.kind = StrategyKind::linear_prob;
  CHECK(strategy_param_count(s, m.registry) ==
        count_role(m.registry, {ParamRole::head_weight, ParamRole::head_bias}));
}

TEST_CASE("take_snapshot covers the registry and zero-fills off-path params") {
  const Model m = toy_model();
  Rng rng(51);
  Tensor x = oracle::random_tensor({1, 2, 8, 8}, rng, 0, 1);
  GradientTape t;
  // only run the first encoder unit so most parameters stay off-path
  NodeId h = t.conv2d(t.leaf(&x, -1, false),
                      t.leaf(&m.param(m.encoder[0].u1.conv.w), m.encoder[0].u1.conv.w),
                      t.leaf(&m.param(m.encoder[0].u1.conv.b), m.encoder[0].u1.conv.b),
                      1, 1);
  t.backward(t.sum(h));
  const GradientSnapshot snap = take_snapshot(t, m.registry, 3);
  CHECK(snap.iteration == 3);
  CHECK(int64_t(snap.flat.size()) == m.registry.total_scalars);

  const auto& w_meta = m.registry.at(m.encoder[0].u1.conv.w);
  double wmag = 0;
  for (real v : snap.of(w_meta)) wmag += std::abs(double(v));
  CHECK(wmag > 0);
  const ParameterMeta* head = m.registry.find("head.weight");
  REQUIRE(head != nullptr);
  for (real v : snap.of(*head)) CHECK(v == real(0));
}
