#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "mmchat/curation.hpp"
#include "mmchat/dataset.hpp"
#include "mmchat/errors.hpp"
#include "mmchat/synth.hpp"

using namespace mmchat;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mmchat_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

InstructionRecord text_record(std::string id, std::string q, std::string a) {
  InstructionRecord r;
  r.id = std::move(id);
  r.category = Category::kTextOnly;
  r.turns.push_back({std::move(q), std::move(a)});
  return r;
}

}  // namespace

TEST(Records, CategoryNamesRoundTrip) {
  for (auto c : kAllCategories) EXPECT_EQ(parse_category(category_name(c)), c);
  EXPECT_THROW(parse_category("captioning"), ParseError);
}

TEST(Records, ValidationEnforcesImagePresence) {
  auto r = text_record("t1", "q", "a");
  EXPECT_NO_THROW(validate_record(r));
  r.images.push_back("images/x.png");
  EXPECT_THROW(validate_record(r), InputError);
  r.category = Category::kMultipleChoice;
  EXPECT_NO_THROW(validate_record(r));
  r.images.clear();
  EXPECT_THROW(validate_record(r), InputError);
  r.category = Category::kGuardrail;
  EXPECT_NO_THROW(validate_record(r));
  r.turns[0].answer.clear();
  EXPECT_THROW(validate_record(r), InputError);
}

TEST(Records, JsonRoundTripAndLineNumbersOnError) {
  InstructionRecord r;
  r.id = "conv-1";
  r.category = Category::kConversation;
  r.images = {"images/a.png"};
  r.turns = {{"Qu'est-ce que c'est? \"quoted\"", "Un cercle rouge. é"}, {"next", "answer"}};
  r.source = "unit";
  EXPECT_EQ(record_from_json(record_to_json(r)), r);

  const auto dir = scratch("records");
  write_records(dir / "r.jsonl", {r, text_record("t", "q", "a")});
  EXPECT_EQ(read_records(dir / "r.jsonl").size(), 2u);
  std::ofstream(dir / "bad.jsonl") << record_to_json(r) << "\n{\"id\": \"x\"}\n";
  try {
    read_records(dir / "bad.jsonl");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos);
  }
}

TEST(Records, ChatTurnsAttachImagesToFirstUserTurn) {
  InstructionRecord r;
  r.id = "c";
  r.category = Category::kConversation;
  r.images = {"a", "b"};
  r.turns = {{"q1", "a1"}, {"q2", "a2"}};
  const auto turns = record_chat_turns(r);
  ASSERT_EQ(turns.size(), 4u);
  EXPECT_EQ(turns[0].image_count, 2u);
  EXPECT_EQ(turns[2].image_count, 0u);
  EXPECT_EQ(turns[3].role, Role::kAssistant);
}

TEST(Curation, CaptionExamples) {
  const auto rules = CurationRules::defaults();
  const auto generic = filter_caption("An H&E image of tumor.", rules);
  EXPECT_FALSE(generic.keep);
  EXPECT_EQ(generic.reason.rfind("generic_caption", 0), 0u) << generic.reason;

  const auto rat = filter_caption(
      "Histology section showing rat kidney cortex with tubular damage after treatment", rules);
  EXPECT_FALSE(rat.keep);
  EXPECT_EQ(rat.reason, "keyword_block animal: rat");

  const auto experimental = filter_caption(
      "Positive control tissue stained for the marker shows strong diffuse membranous staining "
      "across the whole section",
      rules);
  EXPECT_FALSE(experimental.keep);
  EXPECT_EQ(experimental.reason, "keyword_block experimental: positive control");

  const std::string human =
      "Lung biopsy from a 64 year old woman showing invasive adenocarcinoma with acinar growth "
      "and focal micropapillary areas near the pleura";
  EXPECT_GE(word_count(human), 20u);
  EXPECT_TRUE(filter_caption(human, rules).keep);
}

TEST(Curation, WordBoundariesAndCase) {
  const auto rules = CurationRules::defaults();
  const std::string base = "The separate pirate ratio of glands in this human colon biopsy is high today";
  EXPECT_TRUE(filter_caption(base, rules).keep);
  EXPECT_FALSE(filter_caption(base + " in the RAT", rules).keep);
}

TEST(Curation, TwelveWordThresholdIsExclusive) {
  const auto rules = CurationRules::defaults();
  EXPECT_FALSE(filter_caption("one two three four five six seven eight nine ten eleven", rules).keep);
  EXPECT_TRUE(
      filter_caption("one two three four five six seven eight nine ten eleven twelve", rules).keep);
}

TEST(Curation, InstructionExamples) {
  const auto rules = CurationRules::defaults();
  const auto trivial =
      filter_instruction(text_record("a", "At what magnification was the image taken?", "40x"), rules);
  EXPECT_FALSE(trivial.keep);
  EXPECT_EQ(trivial.reason.rfind("trivial_question", 0), 0u);
  const auto failed = filter_instruction(
      text_record("b", "What is the diagnosis?",
                  "Sorry, I cannot answer your request based on the information provided."),
      rules);
  EXPECT_FALSE(failed.keep);
  EXPECT_EQ(failed.reason.rfind("failed_response", 0), 0u);
  EXPECT_TRUE(filter_instruction(text_record("c", format_mcq("Which?", mcq_options(0, 0)), "- red circle"),
                                 rules)
                  .keep);
}

TEST(Curation, ConfigParseRoundTripAndErrors) {
  const auto rules = CurationRules::defaults();
  const auto again = CurationRules::parse(rules.to_text());
  ASSERT_EQ(again.rules().size(), rules.rules().size());
  for (std::size_t i = 0; i < rules.rules().size(); ++i) {
    EXPECT_EQ(again.rules()[i].patterns, rules.rules()[i].patterns);
    EXPECT_EQ(again.rules()[i].threshold, rules.rules()[i].threshold);
  }
  EXPECT_THROW(CurationRules::parse("[keyword_block animal]\n"), ParseError);
  EXPECT_THROW(CurationRules::parse("[colour_rule]\nred\n"), ParseError);
  EXPECT_THROW(CurationRules::parse("rat\n"), ParseError);
  EXPECT_THROW(CurationRules::parse("[generic_caption]\n(unclosed\n"), ParseError);
  const auto custom = CurationRules::parse("[keyword_block lab]\nchinchilla\n");
  EXPECT_FALSE(filter_caption("a chinchilla", custom).keep);
}

TEST(Curation, OutcomeIndependentOfRuleOrder) {
  auto corpus = generate_synthetic_corpus(3, {20, 40, 30, 20, 10, 10}).records;
  std::mt19937_64 rng(4);
  const std::vector<std::string> poison{"rat", "experimental", "magnification", "scale bar"};
  for (std::size_t i = 0; i < corpus.size(); i += 3) {
    auto& t = corpus[i].turns[0];
    switch (i % 4) {
      case 0:
        t.answer = "An H&E image of tumor.";
        break;
      case 1:
        t.answer += " Seen in a " + poison[rng() % 2] + " study.";
        break;
      case 2:
        t.instruction = "What " + poison[2 + rng() % 2] + " is used?";
        break;
      default:
        t.answer = "Sorry, I cannot answer your request based on the information provided.";
        break;
    }
  }
  ASSERT_EQ(corpus.size(), 130u);
  while (corpus.size() < 200) corpus.push_back(corpus[corpus.size() % 130]);

  const auto base_rules = CurationRules::defaults();
  std::vector<bool> baseline;
  for (const auto& r : corpus) baseline.push_back(filter_record(r, base_rules).keep);
  EXPECT_GT(std::count(baseline.begin(), baseline.end(), false), 30);

  std::vector<std::size_t> order(base_rules.rules().size());
  std::iota(order.begin(), order.end(), 0);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    CurationRules shuffled;
    for (auto i : order) {
      const auto& r = base_rules.rules()[i];
      shuffled.add(r.kind, r.label, r.patterns, r.threshold);
    }
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      EXPECT_EQ(filter_record(corpus[i], shuffled).keep, baseline[i]) << corpus[i].id;
    }
  }
}

TEST(Guardrails, ExactRefusalsAndKinds) {
  const std::vector<std::string> prompts{"Describe this histology image of a lung mass"};
  const std::vector<std::string> pool{"images/photo.png"};
  const auto recs = make_guardrails(prompts, pool, 3, 1);
  ASSERT_EQ(recs.size(), 6u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_TRUE(recs[i].images.empty());
    EXPECT_EQ(recs[i].turns[0].answer,
              "Sorry, I cannot assist you since you have not uploaded any image.");
    EXPECT_EQ(recs[i].turns[0].instruction, prompts[0]);
    EXPECT_EQ(recs[3 + i].images, pool);
    EXPECT_EQ(recs[3 + i].turns[0].answer,
              "Sorry I can only assist you with queries related to pathology.");
    EXPECT_NO_THROW(validate_record(recs[i]));
  }
  EXPECT_TRUE(make_guardrails(prompts, {}, 0, 1).empty());
  EXPECT_THROW(make_guardrails(prompts, {}, 2, 1), InputError);
}

TEST(Stats, PublishedCategoryCountsSum) {
  const std::vector<std::size_t> counts{101175, 98821, 29987, 7981, 3040, 16000};
  EXPECT_EQ(std::accumulate(counts.begin(), counts.end(), std::size_t{0}), 257004u);
}

TEST(Stats, EmptyDatasetIsAllZero) {
  const auto s = dataset_stats({}, ".");
  EXPECT_EQ(s.records, 0u);
  EXPECT_EQ(s.turns, 0u);
  EXPECT_EQ(s.unique_images, 0u);
  EXPECT_EQ(s.per_category.size(), 6u);
  for (const auto& [c, n] : s.per_category) EXPECT_EQ(n, 0u);
}

TEST(Synth, CountsMatchConfigAndFilesExist) {
  const SynthSizes sizes{96, 128, 160, 64, 32, 32};
  ASSERT_EQ(sizes.total(), 512u);
  const auto corpus = generate_synthetic_corpus(17, sizes);
  const auto dir = scratch("synth");
  write_corpus(dir, corpus);
  const auto records = read_records(dir / "records.jsonl");
  const auto s = dataset_stats(records, dir);
  EXPECT_EQ(s.records, 512u);
  EXPECT_EQ(s.per_category.at(Category::kConversation), 96u);
  EXPECT_EQ(s.per_category.at(Category::kDescription), 128u);
  EXPECT_EQ(s.per_category.at(Category::kMultipleChoice), 160u);
  EXPECT_EQ(s.per_category.at(Category::kFreeResponse), 64u);
  EXPECT_EQ(s.per_category.at(Category::kTextOnly), 32u);
  EXPECT_EQ(s.per_category.at(Category::kGuardrail), 32u);
  EXPECT_EQ(s.turns, 512u + 96u);
  EXPECT_TRUE(s.dangling.empty());
  EXPECT_EQ(s.unique_images, corpus.images.size());
  EXPECT_GE(s.mean_width, 64.0);
  EXPECT_LE(s.mean_width, 80.0);

  fs::remove(dir / records[0].images[0]);
  const auto broken = dataset_stats(records, dir);
  EXPECT_EQ(broken.dangling, std::vector<std::string>{records[0].images[0]});
}

TEST(Synth, DeterministicBytes) {
  const SynthSizes sizes{8, 8, 8, 8, 4, 4};
  const auto a = scratch("det_a"), b = scratch("det_b");
  write_corpus(a, generate_synthetic_corpus(5, sizes));
  write_corpus(b, generate_synthetic_corpus(5, sizes));
  EXPECT_EQ(slurp(a / "records.jsonl"), slurp(b / "records.jsonl"));
  for (const auto& entry : fs::directory_iterator(a / "images")) {
    EXPECT_EQ(slurp(entry.path()), slurp(b / "images" / entry.path().filename()));
  }
  const auto c = generate_synthetic_corpus(6, sizes);
  EXPECT_NE(record_to_json(c.records[0]), record_to_json(generate_synthetic_corpus(5, sizes).records[0]));
}

TEST(Synth, EveryRecordValidAndSurvivesCuration) {
  const auto corpus = generate_synthetic_corpus(11, {});
  const auto rules = CurationRules::defaults();
  for (const auto& r : corpus.records) {
    EXPECT_NO_THROW(validate_record(r)) << r.id;
    const auto v = filter_record(r, rules);
    EXPECT_TRUE(v.keep) << r.id << " " << v.reason;
  }
}

TEST(Synth, McqRecordsCarryTenOptionsWithKeyOnce) {
  const auto corpus = generate_synthetic_corpus(12, {0, 0, 100, 0, 0, 0});
  for (const auto& r : corpus.records) {
    const auto& t = r.turns[0];
    std::vector<std::string> options;
    std::istringstream in(t.instruction);
    std::string line;
    while (std::getline(in, line)) {
      if (line.size() > 3 && line[1] == '.' && line[2] == ' ') options.push_back(line.substr(3));
    }
    ASSERT_EQ(options.size(), 10u) << r.id;
    ASSERT_EQ(t.answer.rfind("- ", 0), 0u);
    EXPECT_EQ(std::count(options.begin(), options.end(), t.answer.substr(2)), 1);
    EXPECT_EQ(std::set<std::string>(options.begin(), options.end()).size(), 10u);
  }
}

TEST(Bench, ItemsValidDeterministicAndPermuted) {
  const auto bench = generate_synthetic_bench(21, 64);
  ASSERT_EQ(bench.items.size(), 64u);
  std::set<std::vector<std::size_t>> orders;
  for (const auto& item : bench.items) {
    EXPECT_NO_THROW(validate_item(item));
    const auto order = presentation_order(item, 3);
    EXPECT_EQ(order, presentation_order(item, 3));
    auto sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) EXPECT_EQ(sorted[i], i);
    orders.insert(order);
  }
  EXPECT_GT(orders.size(), 50u);
  const auto dir = scratch("bench");
  write_bench(dir, bench);
  EXPECT_EQ(read_items(dir / "bench.jsonl"), bench.items);
  EXPECT_TRUE(fs::exists(dir / bench.items[0].image));
}

TEST(Bench, ValidationRejectsBadOptionSets) {
  BenchmarkItem item;
  item.id = "x";
  item.question = "q";
  item.options = mcq_options(1, 2);
  EXPECT_NO_THROW(validate_item(item));
  item.key = 10;
  EXPECT_THROW(validate_item(item), InputError);
  item.key = 0;
  item.options.pop_back();
  EXPECT_THROW(validate_item(item), InputError);
  item.options.push_back(item.options[0]);
  EXPECT_THROW(validate_item(item), InputError);
}

TEST(Bench, McqFormatting) {
  EXPECT_EQ(format_mcq("Q?", {"x", "y"}), "Q?\nA. x\nB. y\nAnswer with the best option.");
  EXPECT_EQ(format_mcq_answer("red circle"), "- red circle");
}
