#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "../support/gradient_suite.hpp"
#include "mmchat/errors.hpp"
#include "mmchat/ops.hpp"
#include "mmchat/stack.hpp"

using namespace mmchat;

namespace {

Tensor random_image(const StackConfig& c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::vector<float> px(3 * c.image_size * c.image_size);
  for (auto& p : px) p = unit(rng);
  return Tensor::from_data({3, c.image_size, c.image_size}, std::move(px));
}

}  // namespace

TEST(Stack, FullPresetShapeContract) {
  const auto config = StackConfig::full();
  const auto stack = Stack::meta(config);
  const auto patches = stack.encode_image(Tensor::meta({3, 448, 448}));
  EXPECT_EQ(patches.shape(), (Shape{784, 1024}));
  const auto tokens = stack.pool_and_project(patches);
  EXPECT_EQ(tokens.shape(), (Shape{128, 5120}));
  const std::vector<TokenId> ids{Vocab::kBos, 5, 6};
  const auto logits = stack.lm_forward(stack.embed_tokens(ids));
  EXPECT_EQ(logits.shape(), (Shape{3, 32000}));
}

TEST(Stack, ToyPresetShapeContract) {
  const auto config = StackConfig::toy();
  const auto stack = Stack::initialize(config, 1);
  const auto patches = stack.encode_image(random_image(config, 2));
  EXPECT_EQ(patches.shape(), (Shape{config.patch_tokens(), config.enc_dim}));
  EXPECT_EQ(stack.pool_and_project(patches).shape(), (Shape{config.pool_latents, config.lm_dim}));
  for (std::size_t n : {1u, 5u, 200u}) {
    EXPECT_EQ(stack.pool_and_project(Tensor::filled({n, config.enc_dim}, 0.3f)).shape(),
              (Shape{config.pool_latents, config.lm_dim}));
  }
}

TEST(Stack, RejectsWrongGeometry) {
  const auto config = StackConfig::toy();
  const auto stack = Stack::initialize(config, 1);
  EXPECT_THROW(stack.encode_image(Tensor::zeros({3, 32, 32})), ShapeError);
  EXPECT_THROW(stack.pool_and_project(Tensor::zeros({0, config.enc_dim})), InputError);
  const std::vector<TokenId> ids(config.ctx_limit + 1, 5);
  EXPECT_THROW(stack.lm_forward(stack.embed_tokens(ids)), ContextLengthError);
}

TEST(Stack, InitializationIsSeededAndLayoutChecked) {
  const auto config = StackConfig::toy();
  const auto a = Stack::initialize(config, 9);
  const auto b = Stack::initialize(config, 9);
  const auto c = Stack::initialize(config, 10);
  const auto& wa = a.weight("lm.l0.attn.wq").data();
  EXPECT_TRUE(std::equal(wa.begin(), wa.end(), b.weight("lm.l0.attn.wq").data().begin()));
  EXPECT_FALSE(std::equal(wa.begin(), wa.end(), c.weight("lm.l0.attn.wq").data().begin()));
  EXPECT_EQ(a.weight("enc.ln_f.g").data()[0], 1.0f);
  EXPECT_EQ(a.weight("proj.mlp.b1").data()[0], 0.0f);
  auto weights = a.weights();
  weights.erase("lm.head");
  EXPECT_THROW(Stack(config, weights), InputError);
  auto tied = config;
  tied.tie_embeddings = true;
  EXPECT_EQ(Stack::initialize(tied, 1).weights().count("lm.head"), 0u);
}

TEST(Stack, PartitionsFollowNamePrefixes) {
  for (const auto& [name, shape] : weight_layout(StackConfig::toy())) {
    EXPECT_NO_THROW(partition_of(name)) << name;
  }
  EXPECT_EQ(partition_of("enc.pos"), Partition::kEncoder);
  EXPECT_EQ(partition_of("proj.latents"), Partition::kProjector);
  EXPECT_EQ(partition_of("lm.head"), Partition::kLm);
  EXPECT_THROW(partition_of("opt.m.lm.head"), InputError);
}

TEST(Stack, AssemblyExpandsEachPlaceholderToKTokens) {
  const auto config = StackConfig::toy();
  const auto stack = Stack::initialize(config, 3);
  const Vocab vocab;
  const std::vector<ChatTurn> turns{{Role::kUser, "compare", 2}, {Role::kAssistant, "same", 0}};
  const auto sample = render_chat(vocab, turns, config.ctx_limit, config.pool_latents);
  ASSERT_EQ(sample.ids[3], Vocab::kNewlineSep);
  const auto img1 = stack.pool_and_project(stack.encode_image(random_image(config, 4)));
  const auto img2 = stack.pool_and_project(stack.encode_image(random_image(config, 5)));
  const auto assembled = stack.assemble_multimodal(sample, {img1, img2});
  const std::size_t k = config.pool_latents;
  ASSERT_EQ(assembled.ids.size(), sample.expanded_length(k));
  EXPECT_EQ(assembled.embeddings.shape(), (Shape{sample.expanded_length(k), config.lm_dim}));
  // BOS USER [K image] SEP [K image] text...
  for (std::size_t i = 0; i < k; ++i) {
    EXPECT_EQ(assembled.image_position[2 + i], 1);
    EXPECT_EQ(assembled.embeddings.at(2 + i, 7), img1.at(i, 7));
    EXPECT_EQ(assembled.embeddings.at(3 + k + i, 7), img2.at(i, 7));
    EXPECT_EQ(assembled.loss_mask[2 + i], 0);
  }
  EXPECT_EQ(assembled.ids[2 + k], Vocab::kNewlineSep);
  EXPECT_THROW(stack.assemble_multimodal(sample, {img1}), PairingError);
}

TEST(Stack, UniformLogitsGiveLogVocabOverAnswerTokens) {
  const auto config = StackConfig::toy();
  auto stack = Stack::initialize(config, 3);
  auto head = stack.weights().at("lm.head").mutable_data();
  std::fill(head.begin(), head.end(), 0.0f);
  const Vocab vocab;
  const std::vector<ChatTurn> turns{{Role::kUser, "what is it", 0},
                                    {Role::kAssistant, "a square", 0}};
  const auto sample = render_chat(vocab, turns, config.ctx_limit, config.pool_latents);
  const auto logits = stack.lm_forward(stack.embed_tokens(sample.ids));
  const auto loss = next_token_loss(logits, std::span<const TokenId>(sample.ids),
                                    std::span<const std::uint8_t>(sample.loss_mask));
  EXPECT_FLOAT_EQ(loss.item(), static_cast<float>(std::log(static_cast<double>(config.vocab_size))));
}

TEST(Stack, InstructionTargetsNeverReachTheLoss) {
  const auto config = StackConfig::toy();
  const auto stack = Stack::initialize(config, 3);
  const Vocab vocab;
  const std::vector<ChatTurn> turns{{Role::kUser, "describe the slide", 0},
                                    {Role::kAssistant, "a red circle", 0}};
  const auto sample = render_chat(vocab, turns, config.ctx_limit, config.pool_latents);
  const auto logits = stack.lm_forward(stack.embed_tokens(sample.ids));
  const float base = next_token_loss(logits, std::span<const TokenId>(sample.ids),
                                     std::span<const std::uint8_t>(sample.loss_mask))
                         .item();
  for (std::size_t t = 0; t < sample.ids.size(); ++t) {
    if (sample.loss_mask[t]) continue;
    auto ids = sample.ids;
    ids[t] = (ids[t] + 17) % static_cast<TokenId>(config.vocab_size);
    const float perturbed = next_token_loss(logits, std::span<const TokenId>(ids),
                                            std::span<const std::uint8_t>(sample.loss_mask))
                                .item();
    EXPECT_EQ(perturbed, base) << "position " << t;
  }
}

TEST(Stack, CachedForwardMatchesFullForward) {
  const auto config = StackConfig::toy();
  const auto stack = Stack::initialize(config, 12);
  const std::vector<TokenId> ids{Vocab::kBos, Vocab::kUser, 'h', 'e', 'l', 'l', 'o', 9, 200};
  const auto full = stack.lm_forward(stack.embed_tokens(ids));
  KvCache<float> cache;
  const std::span<const TokenId> all(ids);
  const auto head = stack.lm_forward_cached(cache, stack.embed_tokens(all.subspan(0, 5)));
  EXPECT_EQ(cache.length, 5u);
  for (std::size_t t = 5; t < ids.size(); ++t) {
    const auto step = stack.lm_forward_cached(cache, stack.embed_tokens(all.subspan(t, 1)));
    for (std::size_t v = 0; v < config.vocab_size; v += 7) {
      EXPECT_NEAR(step.at(0, v), full.at(t, v), 1e-4f);
    }
  }
  for (std::size_t v = 0; v < config.vocab_size; ++v) {
    EXPECT_NEAR(head.at(4, v), full.at(4, v), 1e-5f);
  }
}

TEST(Stack, EndToEndLossMatchesCentralDifferences) {
  const auto report = mmchat::testing::end_to_end_gradient_check();
  EXPECT_GT(report.checked, 100u);
  EXPECT_LT(report.max_rel_error, 1e-3);
}

TEST(Stack, LogitsIgnoreLaterTokensBitwise) {
  const auto config = StackConfig::toy();
  const auto stack = Stack::initialize(config, 21);
  std::vector<TokenId> ids{Vocab::kBos, Vocab::kUser, 40, 41, 42, 43, 44, 45, 46, 47};
  const auto base = stack.lm_forward(stack.embed_tokens(ids));
  for (std::size_t cut = 1; cut < ids.size(); ++cut) {
    auto changed = ids;
    for (std::size_t t = cut; t < ids.size(); ++t) changed[t] = (changed[t] * 7 + 3) % 256;
    const auto other = stack.lm_forward(stack.embed_tokens(changed));
    for (std::size_t t = 0; t < cut; ++t) {
      for (std::size_t v = 0; v < config.vocab_size; ++v) {
        ASSERT_EQ(base.at(t, v), other.at(t, v)) << "cut " << cut << " position " << t;
      }
    }
  }
}

TEST(Stack, SwappingPatchesChangesEncoderOutput) {
  const auto config = StackConfig::toy();
  const auto stack = Stack::initialize(config, 22);
  const auto image = random_image(config, 23);
  auto swapped = image.clone();
  // Swap the top-left and bottom-right patches in every channel.
  auto px = swapped.mutable_data();
  const std::size_t s = config.image_size, p = config.patch_size;
  for (std::size_t ch = 0; ch < 3; ++ch) {
    for (std::size_t y = 0; y < p; ++y) {
      for (std::size_t x = 0; x < p; ++x) {
        std::swap(px[(ch * s + y) * s + x], px[(ch * s + s - p + y) * s + s - p + x]);
      }
    }
  }
  const auto a = stack.encode_image(image);
  const auto b = stack.encode_image(swapped);
  // With learned positions the swapped tokens are not a row permutation of the original.
  const std::size_t last = config.patch_tokens() - 1;
  double diff = 0.0;
  for (std::size_t d = 0; d < config.enc_dim; ++d) diff += std::abs(a.at(0, d) - b.at(last, d));
  EXPECT_GT(diff, 1e-3);
}
