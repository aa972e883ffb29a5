#pragma once

// Benchmark prompting, answer extraction, bootstrap intervals, remote-query
// scoring, blinded rank sheets and head-to-head aggregation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mmchat/bench_item.hpp"
#include "mmchat/inference.hpp"
#include "mmchat/remote.hpp"

namespace mmchat {

enum class Setting { kImageOnly, kWithContext };

std::string_view setting_name(Setting s);
Setting parse_setting(std::string_view name);

struct BenchPrompt {
  std::string text;
  std::vector<std::size_t> order;  // presented slot -> canonical option index
};

// Context, when used, goes before the question. Multiple-choice items list
// their options A-J in the seeded presentation order. Throws InputError when
// the context setting meets an item without context.
BenchPrompt build_prompt(const BenchmarkItem& item, Setting setting, std::uint64_t seed);

// Presented slot picked by the response, or nullopt when it cannot be decided.
// Priority: bare letter, letter-dot-text, dash-text equal to an option, then
// exactly one option contained in the response. Matching ignores case.
std::optional<std::size_t> extract_choice(const std::string& response,
                                          const std::vector<std::string>& presented);

struct EvalOutcome {
  std::string item_id;
  std::string model_id;
  Setting setting = Setting::kImageOnly;
  std::string stratum;  // organ for the synthetic bench
  std::string response;
  std::optional<std::size_t> choice;  // canonical option index
  bool correct = false;
  std::size_t attempts = 1;
  bool unsuccessful = false;
};

std::string outcome_to_json(const EvalOutcome& o);
EvalOutcome outcome_from_json(const std::string& line);
void write_outcomes(const std::filesystem::path& path, const std::vector<EvalOutcome>& outcomes);
std::vector<EvalOutcome> read_outcomes(const std::filesystem::path& path);

struct Accuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

// 2.5th and 97.5th percentiles (linear interpolation between order
// statistics) of the accuracy over `iterations` seeded resamples with
// replacement. Throws InputError on an empty vector.
Accuracy bootstrap_accuracy(const std::vector<bool>& correct, std::uint64_t seed,
                            std::size_t iterations = 1000);

// Percentile of sorted values with linear interpolation between order statistics.
double percentile(const std::vector<double>& sorted, double q);

// One entry per stratum plus "overall". Strata are keyed by EvalOutcome::stratum.
std::map<std::string, Accuracy> accuracy_with_ci(const std::vector<EvalOutcome>& outcomes,
                                                 std::uint64_t seed);

enum class Restriction { kAll, kSuccessfulOnly };

// kAll scores unsuccessful queries as incorrect; kSuccessfulOnly drops them.
// nullopt when nothing is left to score.
std::optional<Accuracy> score_remote(const std::vector<EvalOutcome>& outcomes,
                                     Restriction restriction, std::uint64_t seed);

// Three decimals, printf rounding.
std::string format3(double value);
std::string format_accuracy(const Accuracy& a);

// Produces one response per item; the local model answers in one attempt, a
// remote endpoint may retry.
using Responder = std::function<RetryOutcome(const BenchmarkItem& item, const ChatRequest& request)>;

Responder local_responder(std::shared_ptr<const ModelBundle> bundle, std::size_t max_new_tokens);
Responder remote_responder(const RemoteEndpoint& endpoint, std::size_t max_new_tokens);

// Loads each item's image from `image_root`, prompts, extracts and scores.
std::vector<EvalOutcome> run_mcq(const std::vector<BenchmarkItem>& items,
                                 const std::filesystem::path& image_root, const Responder& respond,
                                 Setting setting, std::uint64_t seed, const std::string& model_id);

// ---- blinded ranking ----

struct ModelResponse {
  std::string text;
  bool unsuccessful = false;
};

// model id -> item id -> response
using ResponseTable = std::map<std::string, std::map<std::string, ModelResponse>>;

// Writes sheets/<item>.txt with responses in seeded shuffled order and
// provenance removed, plus key.tsv mapping slots back to models. Items with
// fewer than two responding models raise InputError.
void export_rank_sheets(const std::vector<BenchmarkItem>& items, const ResponseTable& responses,
                        std::uint64_t seed, const std::filesystem::path& dir);

// Fills the rank and label lines of a sheet, as a rater would.
void fill_rank_sheet(const std::filesystem::path& sheet, const std::vector<int>& ranks,
                     const std::vector<bool>& correct);

struct RankedResponse {
  std::string model;
  std::string text;
  int rank = 0;  // 1 is best
  bool correct = false;
  bool unsuccessful = false;
};

struct RankedItem {
  std::string item_id;
  std::vector<RankedResponse> responses;
};

// Validates ranks in [1, responses], labels present, and that every sheet slot
// matches the key. Throws ParseError otherwise.
std::vector<RankedItem> ingest_rank_sheets(const std::filesystem::path& dir);

struct HeadToHead {
  std::size_t wins = 0;
  std::size_t ties = 0;
  std::size_t losses = 0;
  std::size_t excluded = 0;
  double win = 0.0;
  double tie = 0.0;
  double lose = 0.0;
};

// Lower rank wins. An unsuccessful response counts as ranked last, tied with
// anything else ranked last. Items missing either model are excluded.
HeadToHead head_to_head(const std::vector<RankedItem>& items, const std::string& subject,
                        const std::string& rival);
// Rates from integer counts.
HeadToHead head_to_head_counts(std::size_t wins, std::size_t ties, std::size_t losses);

// ---- open-question taxonomy ----

struct TaxonomyEntry {
  std::string category;
  std::size_t count = 0;
  std::vector<std::pair<std::string, std::size_t>> subcategories;
};

// Microscopy 47, Diagnosis 23, Clinical 26, Ancillary Testing 40.
const std::vector<TaxonomyEntry>& taxonomy_preset();

// Per-category and per-sub-category counts over open items. Sub-category
// labels are written "Category/Sub-category".
std::map<std::string, std::size_t> taxonomy_counts(const std::vector<BenchmarkItem>& items);
// Human-readable mismatches against the preset; empty when everything agrees.
std::vector<std::string> check_taxonomy(const std::map<std::string, std::size_t>& counts,
                                        const std::vector<TaxonomyEntry>& preset);

}  // namespace mmchat
