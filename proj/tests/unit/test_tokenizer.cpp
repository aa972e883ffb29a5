#include <gtest/gtest.h>

#include <filesystem>
#include <random>

#include "mmchat/errors.hpp"
#include "mmchat/tokenizer.hpp"

using namespace mmchat;

namespace {

std::vector<std::string> corpus() {
  return {"the red circle sits on a white field", "a blue square sits on a white field",
          "the green triangle is small", "the red square and the red circle"};
}

}  // namespace

TEST(Vocab, ByteRoundTripOverEveryByte) {
  const Vocab vocab;
  std::string all;
  for (int b = 0; b < 256; ++b) all.push_back(static_cast<char>(b));
  const auto ids = vocab.encode(all);
  EXPECT_EQ(ids.size(), 256u);
  EXPECT_EQ(vocab.decode(ids), all);
}

TEST(Vocab, TrainedMergesShortenAndRoundTrip) {
  const auto texts = corpus();
  const auto vocab = Vocab::train(texts, 40);
  EXPECT_GT(vocab.merges().size(), 0u);
  EXPECT_EQ(vocab.size(), Vocab::kFirstMerge + vocab.merges().size());
  for (const auto& t : texts) {
    const auto ids = vocab.encode(t);
    EXPECT_LT(ids.size(), t.size());
    EXPECT_EQ(vocab.decode(ids), t);
  }
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> byte(0, 255);
  for (int trial = 0; trial < 50; ++trial) {
    std::string s;
    for (int i = 0; i < 40; ++i) s.push_back(static_cast<char>(byte(rng)));
    EXPECT_EQ(vocab.decode(vocab.encode(s)), s);
  }
}

TEST(Vocab, RandomUtf8RoundTrips) {
  const auto vocab = Vocab::train(corpus(), 60);
  std::mt19937_64 rng(31);
  auto append_utf8 = [](std::string& s, char32_t c) {
    if (c < 0x80) {
      s += static_cast<char>(c);
    } else if (c < 0x800) {
      s += static_cast<char>(0xC0 | (c >> 6));
      s += static_cast<char>(0x80 | (c & 0x3F));
    } else if (c < 0x10000) {
      s += static_cast<char>(0xE0 | (c >> 12));
      s += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
      s += static_cast<char>(0x80 | (c & 0x3F));
    } else {
      s += static_cast<char>(0xF0 | (c >> 18));
      s += static_cast<char>(0x80 | ((c >> 12) & 0x3F));
      s += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
      s += static_cast<char>(0x80 | (c & 0x3F));
    }
  };
  for (int trial = 0; trial < 1000; ++trial) {
    std::string s;
    const std::size_t len = rng() % 30;
    for (std::size_t i = 0; i < len; ++i) {
      // Mostly ASCII so merges fire, with a spread of wider code points.
      char32_t c = rng() % 4 ? static_cast<char32_t>(0x20 + rng() % 95)
                             : static_cast<char32_t>(0x80 + rng() % 0x10FF80);
      if (c >= 0xD800 && c <= 0xDFFF) c = 0xE9;
      append_utf8(s, c);
    }
    ASSERT_EQ(vocab.decode(vocab.encode(s)), s) << "trial " << trial;
  }
}

TEST(Vocab, TrainingIsDeterministic) {
  const auto texts = corpus();
  EXPECT_EQ(Vocab::train(texts, 30), Vocab::train(texts, 30));
}

TEST(Vocab, FirstMergeIsMostFrequentPair) {
  const std::vector<std::string> texts{"abababcd"};
  const auto vocab = Vocab::train(texts, 1);
  ASSERT_EQ(vocab.merges().size(), 1u);
  EXPECT_EQ(vocab.merges()[0], (Vocab::Merge{'a', 'b'}));
}

TEST(Vocab, SerializeParseRoundTrip) {
  const auto vocab = Vocab::train(corpus(), 25);
  const auto again = Vocab::parse(vocab.serialize());
  EXPECT_EQ(again, vocab);
  EXPECT_EQ(again.encode("the red circle"), vocab.encode("the red circle"));
  EXPECT_THROW(Vocab::parse("not a vocab"), ParseError);
}

TEST(Vocab, SpecialsDecodeLiterallyAndUnknownIdsThrow) {
  const Vocab vocab;
  const std::vector<TokenId> ids{Vocab::kBos, 'h', 'i', Vocab::kEos};
  EXPECT_EQ(vocab.decode(ids), "<|bos|>hi<|eos|>");
  const std::vector<TokenId> bad{static_cast<TokenId>(vocab.size())};
  EXPECT_THROW(vocab.decode(bad), RangeError);
  const auto text_ids = vocab.encode("<|eos|>");
  for (auto id : text_ids) EXPECT_FALSE(Vocab::is_special(id));
}

TEST(ChatTemplate, SingleExchangeLayoutAndMask) {
  const Vocab vocab;
  const std::vector<ChatTurn> turns{{Role::kUser, "q", 1}, {Role::kAssistant, "ab", 0}};
  const auto s = render_chat(vocab, turns, 100, 4);
  const std::vector<TokenId> want{Vocab::kBos, Vocab::kUser, Vocab::kImage, 'q',
                                  Vocab::kAssistant, 'a', 'b', Vocab::kEos};
  EXPECT_EQ(s.ids, want);
  const std::vector<std::uint8_t> mask{0, 0, 0, 0, 0, 1, 1, 1};
  EXPECT_EQ(s.loss_mask, mask);
  EXPECT_EQ(s.image_slots, (std::vector<std::size_t>{2}));
  EXPECT_EQ(s.expanded_length(4), want.size() + 3);
}

TEST(ChatTemplate, MultipleImagesAreSeparatedAndTrailingUserPrompts) {
  const Vocab vocab;
  const std::vector<ChatTurn> turns{{Role::kUser, "x", 3}, {Role::kAssistant, "y", 0},
                                    {Role::kUser, "z", 0}};
  const auto s = render_chat(vocab, turns, 100, 2);
  const std::vector<TokenId> want{Vocab::kBos, Vocab::kUser, Vocab::kImage, Vocab::kNewlineSep,
                                  Vocab::kImage, Vocab::kNewlineSep, Vocab::kImage, 'x',
                                  Vocab::kAssistant, 'y', Vocab::kEos, Vocab::kBos, Vocab::kUser,
                                  'z', Vocab::kAssistant};
  EXPECT_EQ(s.ids, want);
  EXPECT_EQ(s.image_slots, (std::vector<std::size_t>{2, 4, 6}));
  ASSERT_EQ(s.turn_boundaries.size(), 2u);
  EXPECT_EQ(s.turn_boundaries[0], (std::pair<std::size_t, std::size_t>{0, 11}));
  EXPECT_EQ(s.turn_boundaries[1], (std::pair<std::size_t, std::size_t>{11, 15}));
}

TEST(ChatTemplate, RejectsBadInput) {
  const Vocab vocab;
  const std::vector<ChatTurn> assistant_first{{Role::kAssistant, "a", 0}};
  EXPECT_THROW(render_chat(vocab, assistant_first, 100, 1), RoleError);
  const std::vector<ChatTurn> empty_answer{{Role::kUser, "q", 0}, {Role::kAssistant, "", 0}};
  EXPECT_THROW(render_chat(vocab, empty_answer, 100, 1), InputError);
  const std::vector<ChatTurn> assistant_image{{Role::kUser, "q", 0}, {Role::kAssistant, "a", 1}};
  EXPECT_THROW(render_chat(vocab, assistant_image, 100, 1), RoleError);
  // 5 text tokens + one image expanded to 10 tokens = 14 > 12.
  const std::vector<ChatTurn> long_turn{{Role::kUser, "q", 1}};
  EXPECT_NO_THROW(render_chat(vocab, long_turn, 14, 10));
  EXPECT_THROW(render_chat(vocab, long_turn, 13, 10), ContextLengthError);
}
