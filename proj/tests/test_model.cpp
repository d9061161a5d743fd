#include <cmath>
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace lisa;

namespace {

TokenBatch random_batch(const ModelConfig& cfg, std::size_t batch, std::size_t seq, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::uniform_int_distribution<std::int32_t> tok(0, static_cast<std::int32_t>(cfg.vocab_size) - 1);
  TokenBatch b{batch, seq, {}, {}};
  for (std::size_t i = 0; i < batch * seq; ++i) {
    b.tokens.push_back(tok(gen));
    b.targets.push_back(tok(gen));
  }
  return b;
}

}  // namespace

TEST(Model, LayerCountIsBlocksPlusTwo) {
  ModelConfig cfg = testutil::tiny_config();
  cfg.num_blocks = 12;
  EXPECT_EQ(TransformerModel::build(cfg, 0).num_layers(), 14u);
}

TEST(Model, InvalidConfigRejected) {
  ModelConfig cfg = testutil::tiny_config();
  cfg.num_heads = 3;  // 8 not divisible by 3
  EXPECT_THROW(TransformerModel::build(cfg, 0), ConfigError);
  cfg = testutil::tiny_config();
  cfg.num_blocks = 0;
  EXPECT_THROW(TransformerModel::build(cfg, 0), ConfigError);
}

TEST(Model, Gpt2SmallParameterCount) {
  // wte + wpe + 12 blocks (2 norms, 4 attention projections and 2 MLP
  // projections, all with biases) + final norm; the head is tied.
  const std::size_t V = 50257, S = 1024, d = 768, h = 3072;
  const std::size_t block = 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
  const std::size_t expected = V * d + S * d + 12 * block + 2 * d;
  EXPECT_EQ(expected, 124439808u);
  EXPECT_EQ(ArchSpec::from_model(ModelConfig::gpt2_small()).total_params(), expected);
}

TEST(Model, SameSeedSameParameters) {
  auto a = TransformerModel::build(testutil::tiny_config(), 42);
  auto b = TransformerModel::build(testutil::tiny_config(), 42);
  auto c = TransformerModel::build(testutil::tiny_config(), 43);
  bool differs = false;
  for (std::size_t l = 0; l < a.num_layers(); ++l)
    for (std::size_t i = 0; i < a.layer_params(l).size(); ++i) {
      auto x = a.layer_params(l)[i].tensor.data();
      auto y = b.layer_params(l)[i].tensor.data();
      auto z = c.layer_params(l)[i].tensor.data();
      EXPECT_TRUE(std::equal(x.begin(), x.end(), y.begin()));
      differs = differs || !std::equal(x.begin(), x.end(), z.begin());
    }
  EXPECT_TRUE(differs);
}

TEST(Model, InitializationConvention) {
  auto m = TransformerModel::build(ModelConfig::desk(64, 16), 1);
  for (const auto& g : m.groups())
    for (const auto& p : g.params) {
      auto d = p.tensor.data();
      if (p.name.ends_with(".gain")) {
        for (double v : d) EXPECT_EQ(v, 1.0);
      } else if (p.tensor.rank() == 1) {
        for (double v : d) EXPECT_EQ(v, 0.0);
      } else {
        double ss = 0.0;
        for (double v : d) ss += v * v;
        EXPECT_NEAR(std::sqrt(ss / d.size()), 0.02, 0.004) << p.name;
      }
    }
}

TEST(Model, GroupsPartitionParameters) {
  for (bool tied : {false, true}) {
    ModelConfig cfg = testutil::tiny_config();
    cfg.tie_embeddings = tied;
    auto m = TransformerModel::build(cfg, 0);
    std::set<const TensorStorage*> seen;
    std::size_t count = 0;
    for (std::size_t l = 0; l < m.num_layers(); ++l)
      for (const auto& p : m.layer_params(l)) {
        EXPECT_TRUE(seen.insert(p.tensor.id()).second) << p.name << " appears twice";
        ++count;
      }
    // Every tensor the forward pass reads is in some group.
    for (auto [layer, lin] : m.linears()) {
      EXPECT_TRUE(seen.count(lin->weight.id())) << lin->name;
      if (lin->bias.defined()) {
        EXPECT_TRUE(seen.count(lin->bias.id()));
      }
    }
    EXPECT_TRUE(seen.count(m.token_embedding().id()));
    EXPECT_TRUE(seen.count(m.position_embedding().id()));
    EXPECT_EQ(seen.size(), count);
  }
}

TEST(Model, LayerParamsByIndex) {
  auto m = TransformerModel::build(testutil::tiny_config(), 0);
  const auto& emb = m.layer_params(0);
  ASSERT_EQ(emb.size(), 2u);
  EXPECT_TRUE(emb[0].tensor.same_storage(m.token_embedding()));
  EXPECT_TRUE(emb[1].tensor.same_storage(m.position_embedding()));
  EXPECT_THROW(m.layer_params(m.num_layers()), IndexError);
}

TEST(Model, TiedHeadBelongsToEmbedding) {
  ModelConfig cfg = testutil::tiny_config();
  cfg.tie_embeddings = true;
  auto m = TransformerModel::build(cfg, 0);
  const auto& head = m.layer_params(m.num_layers() - 1);
  ASSERT_EQ(head.size(), 2u);  // final norm gain and bias only
  for (const auto& p : head) EXPECT_EQ(p.tensor.rank(), 1u);
  EXPECT_TRUE(m.head().weight.same_storage(m.token_embedding()));
}

TEST(Model, LogitShapeAndPurity) {
  const ModelConfig cfg = testutil::tiny_config();
  auto m = TransformerModel::build(cfg, 3);
  const TokenBatch b = random_batch(cfg, 2, 5, 1);
  Tape t1, t2;
  Tensor a = m.forward(t1, b), c = m.forward(t2, b);
  EXPECT_EQ(a.shape(), (Shape{10, cfg.vocab_size}));
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), c.data().begin()));
}

TEST(Model, CausalityBitwise) {
  const ModelConfig cfg = testutil::tiny_config();
  auto m = TransformerModel::build(cfg, 3);
  TokenBatch b = random_batch(cfg, 1, 6, 2);
  Tape t1;
  Tensor before = m.forward(t1, b);
  b.tokens[4] = (b.tokens[4] + 1) % static_cast<std::int32_t>(cfg.vocab_size);
  b.tokens[5] = (b.tokens[5] + 3) % static_cast<std::int32_t>(cfg.vocab_size);
  Tape t2;
  Tensor after = m.forward(t2, b);
  for (std::size_t i = 0; i < 4 * cfg.vocab_size; ++i) EXPECT_EQ(before.data()[i], after.data()[i]);
  bool changed = false;
  for (std::size_t i = 4 * cfg.vocab_size; i < after.numel(); ++i) changed = changed || before.data()[i] != after.data()[i];
  EXPECT_TRUE(changed);
}

TEST(Model, AttentionRowsSumToOne) {
  const ModelConfig cfg = testutil::tiny_config();
  auto m = TransformerModel::build(cfg, 5);
  const TokenBatch b = random_batch(cfg, 2, 6, 3);
  Tape tape;
  ForwardTrace trace;
  m.forward(tape, b, &trace);
  ASSERT_EQ(trace.attention.size(), cfg.num_blocks);
  const std::size_t seq = 6;
  for (const auto& probs : trace.attention) {
    ASSERT_EQ(probs.size() % (seq * seq), 0u);
    for (std::size_t row = 0; row < probs.size() / seq; ++row) {
      double total = 0.0;
      for (std::size_t s = 0; s < seq; ++s) total += probs[row * seq + s];
      EXPECT_NEAR(total, 1.0, 1e-12);
    }
  }
}

TEST(Model, ZeroHeadGivesLogVocabLoss) {
  ModelConfig cfg = testutil::tiny_config(13, 6);
  auto m = TransformerModel::build(cfg, 9);
  auto& head = m.groups().back();
  for (auto& p : head.params)
    if (p.name == "head.proj.weight") std::fill(p.tensor.data().begin(), p.tensor.data().end(), 0.0);
  Tape tape;
  EXPECT_NEAR(m.loss(tape, random_batch(cfg, 3, 6, 4)).item(), std::log(13.0), 1e-12);
}

TEST(Model, OverlongSequenceIsLengthError) {
  const ModelConfig cfg = testutil::tiny_config(8, 4);
  auto m = TransformerModel::build(cfg, 0);
  Tape tape;
  EXPECT_THROW(m.forward(tape, random_batch(cfg, 1, 5, 0)), LengthError);
}

TEST(Model, FullModelGradientMatchesFiniteDifferences) {
  ModelConfig cfg = testutil::tiny_config(7, 5);
  auto m = TransformerModel::build(cfg, 17);
  // Non-trivial norm parameters so their gradients are exercised too.
  std::mt19937_64 gen(5);
  std::normal_distribution<double> n(0.0, 0.1);
  for (auto& g : m.groups())
    for (auto& p : g.params)
      if (p.tensor.rank() == 1) for (double& v : p.tensor.data()) v += n(gen);
  const TokenBatch b = random_batch(cfg, 2, 5, 8);
  std::vector<Tensor> params;
  for (auto& g : m.groups())
    for (auto& p : g.params) params.push_back(p.tensor);
  EXPECT_LT(testutil::max_fd_error(params, [&](Tape& t) { return m.loss(t, b); }), 1e-7);
}

TEST(Model, CloneIsIndependent) {
  auto m = TransformerModel::build(testutil::tiny_config(), 1);
  auto c = m.clone();
  c.groups()[1].params[0].tensor.data()[0] += 1.0;
  EXPECT_NE(c.groups()[1].params[0].tensor.data()[0], m.groups()[1].params[0].tensor.data()[0]);
}
