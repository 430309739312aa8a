#include <set>

#include "dgst/unet.hpp"
#include "doctest.h"
#include "support/oracles.hpp"

using namespace dgst;

TEST_CASE("build_unet is deterministic: same config+seed -> bit-identical") {
  const Model a = build_unet(ModelConfig{}, 42);
  const Model b = build_unet(ModelConfig{}, 42);
  CHECK(a.params_equal(b));
  CHECK(a.registry.digest() == b.registry.digest());
  const Model c = build_unet(ModelConfig{}, 43);
  CHECK_FALSE(a.params_equal(c));
}

TEST_CASE("registry partitions every trainable scalar exactly once") {
  const Model m = build_unet(ModelConfig{}, 1);
  int64_t total = 0;
  int64_t expect_offset = 0;
  for (const auto& p : m.registry.params) {
    CHECK(p.offset == expect_offset);
    CHECK(p.numel == m.param(p.id).numel());
    expect_offset += p.numel;
    total += p.numel;
  }
  CHECK(total == m.registry.total_scalars);
}

TEST_CASE("every parameter carries a role and a region; norm off drops norm params") {
  const Model m = build_unet(ModelConfig{}, 1);
  bool saw_norm = false;
  for (const auto& p : m.registry.params) {
    CHECK(std::string(to_string(p.role)) != "?");
    CHECK(std::string(to_string(p.region)) != "?");
    saw_norm |= p.role == ParamRole::norm_scale || p.role == ParamRole::norm_shift;
  }
  CHECK(saw_norm);

  ModelConfig no_norm;
  no_norm.instance_norm = false;
  const Model m2 = build_unet(no_norm, 1);
  for (const auto& p : m2.registry.params) {
    CHECK(p.role != ParamRole::norm_scale);
    CHECK(p.role != ParamRole::norm_shift);
  }
}

TEST_CASE("kernel group count equals total output channels over conv-type layers") {
  const ModelConfig cfg;
  const Model m = build_unet(cfg, 7);
  // widths 8,16,32, bottleneck 64; two convs per block; decoder up + 2 convs;
  // head adds num_classes groups
  int64_t expected = 0;
  for (const auto& p : m.registry.params) {
    if (p.role == ParamRole::conv_weight || p.role == ParamRole::head_weight)
      expected += p.shape[0];
    else if (p.role == ParamRole::tconv_weight)
      expected += p.shape[1];
  }
  CHECK(m.registry.total_kernel_groups == expected);

  const auto groups = partition_kernels(m.registry);
  CHECK(int64_t(groups.size()) == expected);

  // groups are disjoint and cover exactly the conv-type weight scalars
  std::set<int64_t> seen;
  for (const auto& g : groups)
    for (int64_t idx : g.scalar_indices) CHECK(seen.insert(idx).second);
  int64_t conv_scalars = 0;
  for (const auto& p : m.registry.params)
    if (is_kernel_role(p.role)) conv_scalars += p.numel;
  CHECK(int64_t(seen.size()) == conv_scalars);

  // within one conv layer every group has size Cin*kh*kw
  for (const auto& g : groups) {
    const auto& p = m.registry.at(g.param_id);
    const bool transposed = p.role == ParamRole::tconv_weight;
    const int64_t ci = transposed ? p.shape[0] : p.shape[1];
    CHECK(int64_t(g.scalar_indices.size()) == ci * p.shape[2] * p.shape[3]);
  }
}

TEST_CASE("toy conv layer: 4 output channels, 2 in, 3x3 -> 4 groups of 18") {
  ModelConfig cfg;
  cfg.in_channels = 2;
  cfg.base_width = 4;
  cfg.depth = 2;
  const Model m = build_unet(cfg, 3);
  const auto groups = partition_kernels(m.registry);
  const ParameterMeta* first = m.registry.find("enc0.conv1.conv.weight");
  REQUIRE(first != nullptr);
  int matched = 0;
  for (const auto& g : groups)
    if (g.param_id == first->id) {
      CHECK(g.scalar_indices.size() == 18);  // 2*3*3
      ++matched;
    }
  CHECK(matched == 4);
}

TEST_CASE("grouped + ungrouped scalars account for every trainable scalar") {
  const Model m = build_unet(ModelConfig{}, 5);
  const auto groups = partition_kernels(m.registry);
  int64_t grouped = 0;
  for (const auto& g : groups) grouped += int64_t(g.scalar_indices.size());
  int64_t ungrouped = 0;
  for (const auto& p : m.registry.params)
    if (!is_kernel_role(p.role)) ungrouped += p.numel;
  CHECK(grouped + ungrouped == m.registry.total_scalars);
}

TEST_CASE("region tagging: encoder/bottleneck/decoder/head prefixes line up") {
  const Model m = build_unet(ModelConfig{}, 5);
  for (const auto& p : m.registry.params) {
    if (p.name.starts_with("enc")) CHECK(p.region == Region::encoder);
    if (p.name.starts_with("bottleneck")) CHECK(p.region == Region::bottleneck);
    if (p.name.starts_with("dec")) CHECK(p.region == Region::decoder);
    if (p.name.starts_with("head")) CHECK(p.region == Region::head);
  }
}

TEST_CASE("forward: output shape and divisibility error") {
  const Model m = build_unet(ModelConfig{}, 2);
  Rng rng(5);
  Tensor x = oracle::random_tensor({2, 1, 16, 16}, rng, 0, 1);
  Tensor y = m.forward(x);
  CHECK(y.shape == std::vector<int64_t>{2, 2, 16, 16});

  Tensor bad = Tensor::zeros({1, 1, 12, 12});  // 12 not divisible by 8
  CHECK_THROWS_AS((void)m.forward(bad), shape_error);
}

TEST_CASE("forward: identical items in a batch give identical logits") {
  const Model m = build_unet(ModelConfig{}, 8);
  Rng rng(6);
  Tensor one = oracle::random_tensor({1, 1, 16, 16}, rng, 0, 1);
  Tensor two = Tensor::zeros({2, 1, 16, 16});
  std::copy(one.data.begin(), one.data.end(), two.data.begin());
  std::copy(one.data.begin(), one.data.end(), two.data.begin() + one.numel());
  Tensor y = m.forward(two);
  const int64_t half = y.numel() / 2;
  for (int64_t i = 0; i < half; ++i)
    CHECK(y.data[size_t(i)] == y.data[size_t(half + i)]);
}

TEST_CASE("forward: zero input with zeroed head gives spatially constant logits") {
  Model m = build_unet(ModelConfig{}, 9);
  for (auto& v : m.param(m.head.w).data) v = 0;
  for (auto& v : m.param(m.head.b).data) v = 0;
  Tensor x = Tensor::zeros({1, 1, 16, 16});
  Tensor y = m.forward(x);
  for (int64_t c = 0; c < y.dim(1); ++c) {
    const real v0 = y.at4(0, c, 0, 0);
    for (int64_t h = 0; h < y.dim(2); ++h)
      for (int64_t w = 0; w < y.dim(3); ++w)
        CHECK(y.at4(0, c, h, w) == doctest::Approx(v0));
  }
}

TEST_CASE("forward: perturbing one encoder weight changes the output") {
  Model m = build_unet(ModelConfig{}, 10);
  Rng rng(11);
  Tensor x = oracle::random_tensor({1, 1, 16, 16}, rng, 0, 1);
  const Tensor before = m.forward(x);
  m.param(m.encoder[0].u1.conv.w).data[0] += real(0.5);
  const Tensor after = m.forward(x);
  double diff = 0;
  for (int64_t i = 0; i < before.numel(); ++i)
    diff = std::max(diff, std::abs(double(before.data[size_t(i)]) -
                                   double(after.data[size_t(i)])));
  CHECK(diff > 1e-8);
}

TEST_CASE("invalid configs are rejected") {
  ModelConfig c;
  c.depth = 1;
  CHECK_THROWS_AS((void)build_unet(c, 0), config_error);
  c = ModelConfig{};
  c.base_width = 1;
  CHECK_THROWS_AS((void)build_unet(c, 0), config_error);
  c = ModelConfig{};
  c.num_classes = 1;
  CHECK_THROWS_AS((void)build_unet(c, 0), config_error);
}
