#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace lisa;

namespace {

std::vector<LayerGroup> scalar_groups(std::vector<std::vector<double>> values) {
  std::vector<LayerGroup> groups;
  for (std::size_t l = 0; l < values.size(); ++l) {
    LayerGroup g;
    g.name = "g" + std::to_string(l);
    const std::size_t n = values[l].size();
    g.params.push_back({"w" + std::to_string(l), Tensor({n}, std::move(values[l]), true), true});
    groups.push_back(std::move(g));
  }
  return groups;
}

void set_grad(LayerGroup& g, const std::vector<double>& grad) {
  auto buf = g.params[0].tensor.grad_buffer();
  std::copy(grad.begin(), grad.end(), buf.begin());
}

std::vector<double> values(const LayerGroup& g) {
  auto d = g.params[0].tensor.data();
  return {d.begin(), d.end()};
}

}  // namespace

TEST(AdamW, SingleStepHandComputation) {
  auto groups = scalar_groups({{1.0}});
  set_grad(groups[0], {1.0});
  AdamW opt({.lr = 0.1, .beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8, .weight_decay = 0.0});
  opt.step(groups);
  const MomentBuffers* st = opt.state_of(groups[0].params[0].tensor);
  ASSERT_NE(st, nullptr);
  EXPECT_NEAR(st->m[0], 0.1, 1e-16);
  EXPECT_NEAR(st->v[0], 0.001, 1e-16);
  EXPECT_EQ(st->step, 1u);
  EXPECT_NEAR(values(groups[0])[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(AdamW, ZeroGradientLeavesParameters) {
  auto groups = scalar_groups({{0.5, -2.0, 3.0}});
  set_grad(groups[0], {0.0, 0.0, 0.0});
  AdamW opt({.lr = 0.1});
  opt.step(groups);
  EXPECT_EQ(values(groups[0]), (std::vector<double>{0.5, -2.0, 3.0}));
}

TEST(AdamW, DecayIsDecoupled) {
  auto groups = scalar_groups({{0.5, -2.0, 3.0}});
  set_grad(groups[0], {0.0, 0.0, 0.0});
  AdamW opt({.lr = 0.1, .weight_decay = 0.01});
  opt.step(groups);
  const double keep = 1.0 - 0.1 * 0.01;
  EXPECT_EQ(values(groups[0]), (std::vector<double>{0.5 * keep, -2.0 * keep, 3.0 * keep}));
}

TEST(AdamW, DecaySkipsVectorsWhenMatricesOnly) {
  auto groups = scalar_groups({{1.0}});
  groups[0].params[0].decay = false;
  set_grad(groups[0], {0.0});
  AdamW opt({.lr = 0.1, .weight_decay = 0.5});
  opt.step(groups);
  EXPECT_EQ(values(groups[0])[0], 1.0);
  AdamW all({.lr = 0.1, .weight_decay = 0.5, .decay_matrices_only = false});
  all.step(groups);
  EXPECT_EQ(values(groups[0])[0], 1.0 * (1.0 - 0.05));
}

TEST(AdamW, MissingGradientIsContractError) {
  auto groups = scalar_groups({{1.0}});
  AdamW opt({});
  EXPECT_THROW(opt.step(groups), ContractError);
}

TEST(AdamW, ConfigValidation) {
  EXPECT_THROW(AdamW({.lr = 0.0}), ConfigError);
  EXPECT_THROW(AdamW({.beta1 = 1.0}), ConfigError);
  EXPECT_THROW(AdamW({.beta2 = -0.1}), ConfigError);
  EXPECT_THROW(AdamW({.eps = 0.0}), ConfigError);
  EXPECT_THROW(AdamW({.weight_decay = -1.0}), ConfigError);
}

TEST(AdamW, StateBytes) {
  auto groups = scalar_groups({std::vector<double>(100, 1.0)});
  set_grad(groups[0], std::vector<double>(100, 0.5));
  AdamW opt({});
  opt.step(groups);
  EXPECT_EQ(opt.state_bytes().moments, 1600u);
  EXPECT_EQ(opt.state_bytes().counters, 8u);
}

TEST(AdamW, FrozenGroupIsUntouched) {
  auto groups = scalar_groups({{1.0, 2.0}, {3.0, 4.0}});
  AdamW opt({.lr = 0.05, .weight_decay = 0.1, .decay_matrices_only = false});
  set_grad(groups[0], {0.3, -0.2});
  set_grad(groups[1], {0.1, 0.1});
  opt.step(groups);
  set_trainable_mask(groups, {0}, MomentPolicy::retain, opt);
  const auto frozen_before = values(groups[1]);
  const MomentBuffers st_before = *opt.state_of(groups[1].params[0].tensor);
  for (int i = 0; i < 5; ++i) {
    set_grad(groups[0], {0.3, -0.2});
    opt.step(groups);
  }
  EXPECT_EQ(values(groups[1]), frozen_before);
  const MomentBuffers& st_after = *opt.state_of(groups[1].params[0].tensor);
  EXPECT_EQ(st_after.m, st_before.m);
  EXPECT_EQ(st_after.v, st_before.v);
  EXPECT_EQ(st_after.step, st_before.step);
  EXPECT_EQ(opt.state_of(groups[0].params[0].tensor)->step, 6u);
}

TEST(AdamW, EmptyMaskIsNoOp) {
  auto groups = scalar_groups({{1.0}, {2.0}});
  AdamW opt({.lr = 0.5, .weight_decay = 0.1, .decay_matrices_only = false});
  set_trainable_mask(groups, {}, MomentPolicy::discard, opt);
  opt.step(groups);
  EXPECT_EQ(values(groups[0])[0], 1.0);
  EXPECT_EQ(values(groups[1])[0], 2.0);
}

TEST(AdamW, DiscardThenReactivateStartsFresh) {
  auto groups = scalar_groups({{1.0}, {2.0}});
  AdamW opt({.lr = 0.1});
  set_grad(groups[0], {1.0});
  set_grad(groups[1], {1.0});
  opt.step(groups);
  set_trainable_mask(groups, {0}, MomentPolicy::discard, opt);
  EXPECT_EQ(opt.state_of(groups[1].params[0].tensor), nullptr);
  EXPECT_EQ(opt.state_bytes().moments, 16u);
  set_trainable_mask(groups, {0, 1}, MomentPolicy::discard, opt);
  set_grad(groups[0], {1.0});
  set_grad(groups[1], {-1.0});
  opt.step(groups);
  const MomentBuffers* st = opt.state_of(groups[1].params[0].tensor);
  ASSERT_NE(st, nullptr);
  EXPECT_EQ(st->step, 1u);
  EXPECT_NEAR(st->m[0], -0.1, 1e-16);
}

TEST(AdamW, RetainFreezeUnfreezeIsInvisible) {
  auto a = scalar_groups({{1.0, -1.0}});
  auto b = scalar_groups({{1.0, -1.0}});
  AdamW oa({.lr = 0.1}), ob({.lr = 0.1});
  for (int i = 0; i < 3; ++i) {
    set_grad(a[0], {0.2 * i, -0.4});
    set_grad(b[0], {0.2 * i, -0.4});
    oa.step(a);
    ob.step(b);
  }
  set_trainable_mask(b, {}, MomentPolicy::retain, ob);
  set_trainable_mask(b, {0}, MomentPolicy::retain, ob);
  set_grad(a[0], {0.7, 0.1});
  set_grad(b[0], {0.7, 0.1});
  oa.step(a);
  ob.step(b);
  EXPECT_EQ(values(a[0]), values(b[0]));
}

TEST(AdamW, MomentBytesScaleWithTrainableCount) {
  // Full model vs E+H+2L: moment bytes follow trainable parameter counts.
  auto model = TransformerModel::build(ModelConfig::desk(16, 16), 0);
  AdamW full({}), masked({});
  auto fill = [&] {
    for (auto& g : model.groups())
      for (auto& p : g.params)
        if (g.trainable) std::fill(p.tensor.grad_buffer().begin(), p.tensor.grad_buffer().end(), 0.01);
  };
  fill();
  full.step(model.groups());
  const std::size_t all_count = trainable_count(model.groups());
  set_trainable_mask(model.groups(), {0, 1, 2, 5}, MomentPolicy::discard, masked);
  fill();
  masked.step(model.groups());
  const std::size_t masked_count = trainable_count(model.groups());
  EXPECT_EQ(full.state_bytes().moments, 16 * all_count);
  EXPECT_EQ(masked.state_bytes().moments, 16 * masked_count);
  EXPECT_DOUBLE_EQ(static_cast<double>(masked.state_bytes().moments) / full.state_bytes().moments,
                   static_cast<double>(masked_count) / all_count);
}

TEST(AdamW, MaskRejectsOutOfRangeLayer) {
  auto groups = scalar_groups({{1.0}});
  AdamW opt({});
  EXPECT_THROW(set_trainable_mask(groups, {3}, MomentPolicy::discard, opt), IndexError);
}

#include "oracles.hpp"

TEST(AdamW, MatchesStraightLineReference) {
  for (double wd : {0.0, 0.01}) {
    const auto trace = oracle::adamw_straight_line(wd);
    EXPECT_LE(oracle::max_abs_diff(trace), 1e-12) << "weight_decay " << wd;
  }
}
