#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "../support/oracles.hpp"
#include "mmchat/errors.hpp"
#include "mmchat/eval.hpp"
#include "mmchat/synth.hpp"

using namespace mmchat;
namespace fs = std::filesystem;

namespace {

BenchmarkItem mcq_item(const std::string& id) {
  BenchmarkItem item;
  item.id = id;
  item.question = "Which option best describes this image?";
  item.clinical_context = "Drawn by a student.";
  item.organ = "circle";
  item.options = mcq_options(0, 0);
  item.key = 0;
  return item;
}

std::vector<bool> outcomes(std::size_t correct, std::size_t total) {
  std::vector<bool> v(total, false);
  std::fill(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(correct), true);
  return v;
}

EvalOutcome remote_outcome(bool correct, bool unsuccessful) {
  EvalOutcome o;
  o.item_id = "x";
  o.correct = correct;
  o.unsuccessful = unsuccessful;
  o.attempts = unsuccessful ? 3 : 1;
  return o;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("mmchat_eval_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(Prompt, SettingsAndOptions) {
  const auto item = mcq_item("q1");
  const auto plain = build_prompt(item, Setting::kImageOnly, 1);
  EXPECT_EQ(plain.text.find("Drawn by a student."), std::string::npos);
  EXPECT_EQ(plain.text.rfind(item.question, 0), 0u);
  EXPECT_NE(plain.text.find("\nJ. "), std::string::npos);
  ASSERT_EQ(plain.order.size(), 10u);
  EXPECT_NE(plain.text.find("A. " + item.options[plain.order[0]]), std::string::npos);

  const auto ctx = build_prompt(item, Setting::kWithContext, 1);
  EXPECT_EQ(ctx.text.rfind("Drawn by a student.\n" + item.question, 0), 0u);

  auto open = item;
  open.kind = ItemKind::kOpen;
  EXPECT_EQ(build_prompt(open, Setting::kImageOnly, 1).text, item.question);

  auto bare = item;
  bare.clinical_context.clear();
  EXPECT_THROW(build_prompt(bare, Setting::kWithContext, 1), InputError);
}

TEST(Extract, PublishedFormats) {
  const std::vector<std::string> opts{"Lung adenocarcinoma", "Squamous cell carcinoma",
                                      "Small cell carcinoma"};
  EXPECT_EQ(extract_choice("A", opts), 0u);
  EXPECT_EQ(extract_choice("A. Lung adenocarcinoma", opts), 0u);
  EXPECT_EQ(extract_choice("- Lung adenocarcinoma", opts), 0u);
  EXPECT_EQ(extract_choice("- squamous cell carcinoma.", opts), 1u);
  EXPECT_EQ(extract_choice("It is either A or C", opts), std::nullopt);
  EXPECT_EQ(extract_choice("C. Lung adenocarcinoma", opts), 2u);  // letter wins
  EXPECT_EQ(extract_choice("The answer is small cell carcinoma.", opts), 2u);
  EXPECT_EQ(extract_choice("Lung adenocarcinoma or small cell carcinoma", opts), std::nullopt);
  EXPECT_EQ(extract_choice("(B)", opts), 1u);
  EXPECT_EQ(extract_choice("D", opts), std::nullopt);
  EXPECT_EQ(extract_choice("", opts), std::nullopt);
}

TEST(Extract, PermutationEquivariant) {
  std::mt19937_64 rng(9);
  const auto canonical = mcq_options(2, 5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::size_t> perm(canonical.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<std::string> presented;
    for (auto i : perm) presented.push_back(canonical[i]);
    const std::size_t target = rng() % canonical.size();
    for (const auto& response :
         {"- " + canonical[target], "I think it is the " + canonical[target] + "."}) {
      const auto base = extract_choice(response, canonical);
      const auto permuted = extract_choice(response, presented);
      ASSERT_TRUE(base && permuted);
      EXPECT_EQ(*base, target);
      EXPECT_EQ(perm[*permuted], *base);
    }
  }
}

TEST(Bootstrap, PercentileInterpolation) {
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4}, 0.025), 1.075);
  EXPECT_DOUBLE_EQ(percentile({1, 2, 3, 4}, 0.975), 3.925);
  EXPECT_DOUBLE_EQ(percentile({5}, 0.5), 5.0);
}

TEST(Bootstrap, DeterministicAndDegenerate) {
  const auto v = outcomes(34, 48);
  const auto a = bootstrap_accuracy(v, 42), b = bootstrap_accuracy(v, 42);
  EXPECT_EQ(a.lo, b.lo);
  EXPECT_EQ(a.hi, b.hi);
  const auto all = bootstrap_accuracy(outcomes(23, 23), 7);
  EXPECT_EQ(all.lo, 1.0);
  EXPECT_EQ(all.hi, 1.0);
  EXPECT_THROW(bootstrap_accuracy({}, 1), InputError);
}

TEST(Bootstrap, IntervalBracketsPointEstimate) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 1 + rng() % 120;
    std::vector<bool> v(n);
    const double p = static_cast<double>(rng() % 1000) / 1000.0;
    for (std::size_t i = 0; i < n; ++i) v[i] = static_cast<double>(rng() % 1000) / 1000.0 < p;
    const auto a = bootstrap_accuracy(v, trial);
    EXPECT_LE(a.lo, a.point);
    EXPECT_GE(a.hi, a.point);
  }
}

TEST(Metrics, PublishedRatiosToThreeDecimals) {
  EXPECT_EQ(format3(bootstrap_accuracy(outcomes(34, 48), 1).point), "0.708");
  EXPECT_EQ(format3(bootstrap_accuracy(outcomes(39, 48), 1).point), "0.812");
  EXPECT_EQ(format3(bootstrap_accuracy(outcomes(19, 23), 1).point), "0.826");
  EXPECT_EQ(format3(bootstrap_accuracy(outcomes(20, 23), 1).point), "0.870");
  EXPECT_EQ(format3(bootstrap_accuracy(outcomes(5, 23), 1).point), "0.217");
  EXPECT_EQ(format3(bootstrap_accuracy(outcomes(5, 12), 1).point), "0.417");
  const auto h = head_to_head_counts(66, 15, 34);
  EXPECT_EQ(format3(h.win), "0.574");
  EXPECT_EQ(format3(h.tie), "0.130");
  EXPECT_EQ(format3(h.lose), "0.296");
}

TEST(Metrics, StrataAndOverall) {
  std::vector<EvalOutcome> all;
  for (int i = 0; i < 10; ++i) {
    EvalOutcome o;
    o.item_id = std::to_string(i);
    o.stratum = i < 4 ? "circle" : "square";
    o.correct = i % 2 == 0;
    all.push_back(o);
  }
  const auto acc = accuracy_with_ci(all, 3);
  EXPECT_EQ(acc.at("overall").total, 10u);
  EXPECT_EQ(acc.at("circle").correct, 2u);
  EXPECT_EQ(acc.at("square").total, 6u);
}

TEST(ScoreRemote, AllVersusSuccessfulOnly) {
  std::vector<EvalOutcome> v;
  for (int i = 0; i < 5; ++i) v.push_back(remote_outcome(true, false));
  for (int i = 0; i < 7; ++i) v.push_back(remote_outcome(false, false));
  for (int i = 0; i < 11; ++i) v.push_back(remote_outcome(false, true));
  const auto all = score_remote(v, Restriction::kAll, 1);
  const auto ok = score_remote(v, Restriction::kSuccessfulOnly, 1);
  ASSERT_TRUE(all && ok);
  EXPECT_EQ(format3(all->point), "0.217");
  EXPECT_EQ(format3(ok->point), "0.417");
  EXPECT_EQ(all->total - ok->total, 11u);

  std::vector<EvalOutcome> clean(v.begin(), v.begin() + 12);
  EXPECT_EQ(score_remote(clean, Restriction::kAll, 1)->point,
            score_remote(clean, Restriction::kSuccessfulOnly, 1)->point);
  std::vector<EvalOutcome> failed(v.begin() + 12, v.end());
  EXPECT_EQ(score_remote(failed, Restriction::kAll, 1)->point, 0.0);
  EXPECT_FALSE(score_remote(failed, Restriction::kSuccessfulOnly, 1));
}

TEST(Outcomes, JsonRoundTrip) {
  EvalOutcome o;
  o.item_id = "b1";
  o.model_id = "toy";
  o.setting = Setting::kWithContext;
  o.stratum = "circle";
  o.response = "- red circle";
  o.choice = 3;
  o.correct = true;
  const auto back = outcome_from_json(outcome_to_json(o));
  EXPECT_EQ(back.choice, o.choice);
  EXPECT_EQ(back.setting, o.setting);
  EXPECT_EQ(back.response, o.response);
  auto bad = o;
  bad.unsuccessful = true;
  EXPECT_THROW(outcome_from_json(outcome_to_json(bad)), ParseError);
}

TEST(HeadToHead, SimpleCases) {
  RankedItem a{"a", {{"m1", "", 1, true, false}, {"m2", "", 1, true, false}}};
  RankedItem b{"b", {{"m1", "", 1, true, false}, {"m2", "", 2, true, false}}};
  EXPECT_EQ(head_to_head({a, a}, "m1", "m2").tie, 1.0);
  EXPECT_EQ(head_to_head({b, b, b}, "m1", "m2").win, 1.0);
  EXPECT_EQ(head_to_head({b}, "m2", "m1").lose, 1.0);
  RankedItem missing{"c", {{"m1", "", 1, true, false}, {"m3", "", 2, true, false}}};
  EXPECT_EQ(head_to_head({b, missing}, "m1", "m2").excluded, 1u);
  // An unsuccessful rival counts as last even when a rater ranked it higher.
  RankedItem fail{"d", {{"m1", "", 2, true, false}, {"m2", "", 1, false, true}, {"m3", "", 3, true, false}}};
  EXPECT_EQ(head_to_head({fail}, "m1", "m2").wins, 1u);
  EXPECT_EQ(head_to_head({fail}, "m3", "m2").ties, 1u);
}

TEST(HeadToHead, MatchesBruteForceOnRandomSheets) {
  std::mt19937_64 rng(77);
  const std::vector<std::string> models{"m0", "m1", "m2", "m3"};
  std::vector<RankedItem> items;
  for (int i = 0; i < 200; ++i) {
    RankedItem item{"i" + std::to_string(i), {}};
    for (const auto& m : models) {
      if (rng() % 10 == 0) continue;
      item.responses.push_back({m, "", static_cast<int>(1 + rng() % 4), rng() % 2 == 0, rng() % 8 == 0});
    }
    items.push_back(item);
  }
  for (const auto& s : models) {
    for (const auto& r : models) {
      if (s == r) continue;
      const auto h = head_to_head(items, s, r);
      const auto b = mmchat::testing::brute_force_pairwise(items, s, r);
      EXPECT_EQ(h.wins, b.wins);
      EXPECT_EQ(h.ties, b.ties);
      EXPECT_EQ(h.losses, b.losses);
      EXPECT_NEAR(h.win + h.tie + h.lose, 1.0, 1e-12);
    }
  }
}

TEST(RankSheets, RoundTripRecoversProvenance) {
  const auto dir = scratch("roundtrip");
  std::vector<BenchmarkItem> items;
  ResponseTable table;
  const std::vector<std::string> models{"alpha", "beta", "gamma", "delta"};
  for (int i = 0; i < 6; ++i) {
    BenchmarkItem item;
    item.id = "open-" + std::to_string(i);
    item.kind = ItemKind::kOpen;
    item.question = "What stains help here?\nExplain.";
    items.push_back(item);
    for (const auto& m : models) {
      table[m][item.id] = {m + " answer for " + item.id + "\nsecond line\n=== end ===", m == "delta"};
    }
  }
  export_rank_sheets(items, table, 5, dir);

  std::map<std::pair<std::string, std::string>, int> truth;
  std::mt19937_64 rng(1);
  for (const auto& item : items) {
    const auto path = dir / "sheets" / (item.id + ".txt");
    std::ifstream in(path);
    std::stringstream ss;
    ss << in.rdbuf();
    const std::string text = ss.str();
    for (const auto& m : models) EXPECT_EQ(text.find("\n" + m), std::string::npos);
    std::vector<int> ranks;
    std::vector<bool> labels;
    for (int s = 0; s < 4; ++s) {
      ranks.push_back(1 + static_cast<int>(rng() % 4));
      labels.push_back(rng() % 2 == 0);
    }
    fill_rank_sheet(path, ranks, labels);
    // Recover which model sits in each slot from the sheet text itself.
    std::size_t slot = 0;
    for (std::size_t pos = text.find("| "); pos != std::string::npos; pos = text.find("=== response", pos + 1)) {
      const auto start = text.find("| ", pos);
      if (start == std::string::npos) break;
      const auto model = text.substr(start + 2, text.find(' ', start + 2) - start - 2);
      truth[{item.id, model}] = ranks[slot++];
    }
  }
  const auto ranked = ingest_rank_sheets(dir);
  ASSERT_EQ(ranked.size(), items.size());
  std::size_t checked = 0;
  for (const auto& item : ranked) {
    for (const auto& r : item.responses) {
      EXPECT_EQ(r.text.rfind(r.model + " answer for " + item.item_id, 0), 0u);
      EXPECT_EQ(truth.at({item.item_id, r.model}), r.rank);
      EXPECT_EQ(r.unsuccessful, r.model == "delta");
      ++checked;
    }
  }
  EXPECT_EQ(checked, 24u);
}

TEST(RankSheets, RejectsBadSheets) {
  const auto dir = scratch("bad");
  BenchmarkItem item;
  item.id = "o1";
  item.kind = ItemKind::kOpen;
  item.question = "q";
  ResponseTable table;
  for (const char* m : {"a", "b", "c", "d"}) table[m]["o1"] = {std::string("text ") + m, false};
  export_rank_sheets({item}, table, 1, dir);
  const auto sheet = dir / "sheets" / "o1.txt";
  const auto pristine = [&] {
    std::ifstream in(sheet);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  }();

  fill_rank_sheet(sheet, {1, 2, 5, 3}, {true, true, false, true});
  EXPECT_THROW(ingest_rank_sheets(dir), ParseError);

  std::ofstream(sheet, std::ios::trunc) << pristine;
  EXPECT_THROW(ingest_rank_sheets(dir), ParseError);  // unranked

  std::ofstream(sheet, std::ios::trunc) << pristine;
  fill_rank_sheet(sheet, {1, 2, 3, 4}, {true, true, false, true});
  EXPECT_NO_THROW(ingest_rank_sheets(dir));
  {
    std::ifstream in(sheet);
    std::stringstream ss;
    ss << in.rdbuf();
    std::string text = ss.str();
    text.replace(text.find("| text"), 6, "| TEXT");
    std::ofstream(sheet, std::ios::trunc) << text;
  }
  EXPECT_THROW(ingest_rank_sheets(dir), ParseError);  // key mismatch

  ResponseTable lonely;
  lonely["a"]["o1"] = {"x", false};
  EXPECT_THROW(export_rank_sheets({item}, lonely, 1, scratch("lonely")), InputError);
}

TEST(Taxonomy, PresetTotalsAndValidation) {
  const auto& preset = taxonomy_preset();
  ASSERT_EQ(preset.size(), 4u);
  std::size_t total = 0;
  for (const auto& e : preset) total += e.count;
  EXPECT_EQ(total, 47u + 23u + 26u + 40u);

  // Items labelled so every count matches the preset.
  std::vector<BenchmarkItem> items;
  for (const auto& e : preset) {
    std::size_t most = e.count;
    for (const auto& [sub, n] : e.subcategories) most = std::max(most, n);
    for (std::size_t i = 0; i < most; ++i) {
      BenchmarkItem item;
      item.id = e.category + std::to_string(i);
      item.kind = ItemKind::kOpen;
      item.question = "q";
      if (i < e.count) item.categories.push_back(e.category);
      for (const auto& [sub, n] : e.subcategories) {
        if (i < n) item.subcategories.push_back(e.category + "/" + sub);
      }
      items.push_back(item);
    }
  }
  EXPECT_TRUE(check_taxonomy(taxonomy_counts(items), preset).empty());
  items.pop_back();
  EXPECT_FALSE(check_taxonomy(taxonomy_counts(items), preset).empty());
}
