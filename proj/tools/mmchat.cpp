// mmchat: data preparation, two-stage training, serving and evaluation.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include "CLI11.hpp"
#include "json.hpp"
#include "mmchat/curation.hpp"
#include "mmchat/dataset.hpp"
#include "mmchat/errors.hpp"
#include "mmchat/eval.hpp"
#include "mmchat/inference.hpp"
#include "mmchat/synth.hpp"
#include "mmchat/trainer.hpp"

using namespace mmchat;
namespace fs = std::filesystem;

namespace {

// ---- data ----

struct SynthArgs {
  std::string out;
  std::uint64_t seed = 1;
  std::size_t bench = 64;
};

void data_synth(const SynthArgs& a) {
  const auto corpus = generate_synthetic_corpus(a.seed, SynthSizes{});
  write_corpus(fs::path(a.out) / "corpus", corpus);
  // Offset seed keeps bench rasters distinct from training rasters.
  write_bench(fs::path(a.out) / "bench", generate_synthetic_bench(a.seed + 1000, a.bench));
  std::printf("wrote %zu records to %s/corpus and %zu items to %s/bench\n", corpus.records.size(),
              a.out.c_str(), a.bench, a.out.c_str());
}

struct FilterArgs {
  std::string in, out, rules, rejects;
};

void data_filter(const FilterArgs& a) {
  const auto rules = a.rules.empty() ? CurationRules::defaults() : CurationRules::load(a.rules);
  std::vector<InstructionRecord> kept;
  std::map<std::string, std::size_t> reasons;
  std::ofstream rejects;
  if (!a.rejects.empty()) rejects.open(a.rejects);
  for (const auto& r : read_records(a.in)) {
    const auto v = filter_record(r, rules);
    if (v.keep) {
      kept.push_back(r);
      continue;
    }
    ++reasons[v.reason.substr(0, v.reason.find(':'))];
    if (rejects) rejects << r.id << '\t' << v.reason << '\n';
  }
  write_records(a.out, kept);
  std::printf("kept %zu records\n", kept.size());
  for (const auto& [rule, n] : reasons) std::printf("  rejected %zu by %s\n", n, rule.c_str());
}

// ---- train ----

struct TrainArgs {
  int stage = 1;
  std::string data, out, init, resume, plan, config, model;
  std::uint64_t seed = 0;
  std::size_t merges = 0;
  std::size_t checkpoint_every = 0;
  bool skip_overflow = false;
  bool train_encoder = false;
};

std::vector<std::string> record_texts(const std::vector<InstructionRecord>& records) {
  std::vector<std::string> texts;
  for (const auto& r : records) {
    for (const auto& t : r.turns) {
      texts.push_back(t.instruction);
      texts.push_back(t.answer);
    }
  }
  return texts;
}

void train(const TrainArgs& a) {
  const fs::path data_dir = a.data;
  const auto records = read_records(data_dir / "records.jsonl");

  // One config file may carry both model.* and train.* keys.
  const KeyValues overrides = a.config.empty() ? KeyValues() : KeyValues::load(a.config);
  TrainPlan plan = TrainPlan::preset(a.plan.empty() ? (a.stage == 1 ? "stage1" : "stage2") : a.plan);
  plan = TrainPlan::read(overrides, plan);
  if (plan.stage != a.stage) throw InputError("plan is for stage " + std::to_string(plan.stage));
  plan.seed = a.seed;
  plan.skip_overflow = a.skip_overflow;
  if (a.train_encoder) plan.trainable.insert(Partition::kEncoder);
  if (a.checkpoint_every) plan.checkpoint_every = a.checkpoint_every;

  ModelBundle bundle;
  if (!a.init.empty()) {
    bundle = load_bundle(a.init);
  } else if (!a.resume.empty()) {
    bundle = load_bundle(a.resume);
  } else {
    if (a.stage == 2) throw InputError("stage 2 starts from a stage-1 checkpoint: pass --init");
    StackConfig config = StackConfig::read(overrides, StackConfig::preset(a.model));
    Vocab vocab;
    if (a.merges) {
      // A learned tokenizer sizes the embedding table.
      vocab = Vocab::train(record_texts(records), a.merges);
      config.vocab_size = vocab.size();
    }
    config.validate();
    bundle = {Stack::initialize(config, a.seed), std::move(vocab)};
  }

  const auto stage_records = select_stage_records(records, a.stage);
  const auto set = prepare_training_set(stage_records, data_dir, bundle.vocab,
                                        bundle.stack.config(), plan.skip_overflow);
  std::printf("stage %d: %zu examples (%zu skipped), %zu steps\n", a.stage, set.examples.size(),
              set.skipped, plan.total_steps(set.examples.size()));
  RunOptions options;
  options.out_dir = a.out;
  if (!a.resume.empty()) options.resume = fs::path(a.resume);
  options.on_step = [](const LossPoint& p) {
    if (p.step % 10 == 0) std::printf("step %zu loss %.4f lr %.3g\n", p.step, p.loss, p.lr);
    std::fflush(stdout);
  };
  const auto result = run_stage(bundle, set, plan, options);
  std::printf("done: %zu/%zu steps, final loss %.4f, checkpoint %s/final.mmf\n", result.steps_done,
              result.total_steps, result.curve.empty() ? 0.0 : result.curve.back().loss,
              a.out.c_str());
}

// ---- serve ----

void serve(const std::string& checkpoint, const std::string& host, int port) {
  auto bundle = std::make_shared<const ModelBundle>(load_bundle(checkpoint));
  ChatServer server(bundle);
  const int bound = server.bind(host, port);
  std::printf("listening on http://%s:%d\n", host.c_str(), bound);
  std::fflush(stdout);
  server.serve();
}

// ---- eval ----

struct ModelArgs {
  std::string checkpoint, remote, token_env;
  std::size_t max_new = 64;
  std::size_t attempts = 3;
};

Responder responder_for(const ModelArgs& m) {
  if (m.checkpoint.empty() == m.remote.empty()) {
    throw InputError("pass exactly one of --checkpoint and --remote");
  }
  if (!m.checkpoint.empty()) {
    return local_responder(std::make_shared<const ModelBundle>(load_bundle(m.checkpoint)), m.max_new);
  }
  RemoteEndpoint endpoint;
  endpoint.url = m.remote;
  endpoint.token_env = m.token_env;
  endpoint.max_attempts = m.attempts;
  return remote_responder(endpoint, m.max_new);
}

struct McqArgs {
  ModelArgs model;
  std::string bench, out, setting = "image_only", model_id = "model";
  std::uint64_t seed = 0;
};

void eval_mcq(const McqArgs& a) {
  const fs::path bench = a.bench;
  const auto items = read_items(bench / "bench.jsonl");
  const auto outcomes = run_mcq(items, bench, responder_for(a.model), parse_setting(a.setting),
                                a.seed, a.model_id);
  write_outcomes(a.out, outcomes);
  std::size_t correct = 0;
  for (const auto& o : outcomes) correct += o.correct;
  std::printf("%zu/%zu correct, outcomes in %s\n", correct, outcomes.size(), a.out.c_str());
}

struct OpenArgs {
  ModelArgs model;
  std::string bench, out, model_id = "model";
};

// One JSON line per response: {model, item, text, unsuccessful}.
void eval_open(const OpenArgs& a) {
  const fs::path bench = a.bench;
  const auto respond = responder_for(a.model);
  std::ofstream out(a.out);
  if (!out) throw IoError("cannot write " + a.out);
  std::size_t n = 0;
  for (const auto& item : read_items(bench / "bench.jsonl")) {
    if (item.kind != ItemKind::kOpen) continue;
    ChatRequest req;
    ChatMessage msg{Role::kUser, build_prompt(item, Setting::kImageOnly, 0).text, {}};
    if (!item.image.empty()) msg.images.push_back(read_png(bench / item.image));
    req.messages.push_back(std::move(msg));
    const auto reply = respond(item, req);
    nlohmann::ordered_json j;
    j["model"] = a.model_id;
    j["item"] = item.id;
    j["text"] = reply.success ? reply.answer : std::string();
    j["unsuccessful"] = !reply.success;
    out << j.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace) << '\n';
    ++n;
  }
  std::printf("%zu responses in %s\n", n, a.out.c_str());
}

struct ReportArgs {
  std::vector<std::string> outcomes;
  std::string restriction = "all";
  std::uint64_t seed = 0;
};

void eval_report(const ReportArgs& a) {
  for (const auto& path : a.outcomes) {
    const auto outcomes = read_outcomes(path);
    std::printf("%s\n", path.c_str());
    for (const auto& [stratum, acc] : accuracy_with_ci(outcomes, a.seed)) {
      std::printf("  %-16s %s  (%zu/%zu)\n", stratum.c_str(), format_accuracy(acc).c_str(),
                  acc.correct, acc.total);
    }
    const auto restriction =
        a.restriction == "all" ? Restriction::kAll
        : a.restriction == "successful_only"
            ? Restriction::kSuccessfulOnly
            : throw InputError("restriction must be all or successful_only");
    if (const auto scored = score_remote(outcomes, restriction, a.seed)) {
      std::printf("  %-16s %s  (%zu/%zu)\n", a.restriction.c_str(), format_accuracy(*scored).c_str(),
                  scored->correct, scored->total);
    } else {
      std::printf("  %-16s no successful responses\n", a.restriction.c_str());
    }
  }
}

struct RankExportArgs {
  std::string bench, out;
  std::vector<std::string> responses;
  std::uint64_t seed = 0;
};

void rank_export(const RankExportArgs& a) {
  ResponseTable table;
  for (const auto& path : a.responses) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        const auto j = nlohmann::json::parse(line);
        table[j.at("model").get<std::string>()][j.at("item").get<std::string>()] = {
            j.at("text").get<std::string>(), j.value("unsuccessful", false)};
      } catch (const nlohmann::json::exception& e) {
        throw ParseError(path + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
  }
  const auto items = read_items(fs::path(a.bench) / "bench.jsonl");
  export_rank_sheets(items, table, a.seed, a.out);
  std::printf("rank sheets in %s/sheets, key in %s/key.tsv\n", a.out.c_str(), a.out.c_str());
}

void rank_ingest(const std::string& dir, const std::string& subject) {
  const auto items = ingest_rank_sheets(dir);
  std::set<std::string> models;
  for (const auto& item : items) {
    for (const auto& r : item.responses) models.insert(r.model);
  }
  if (!models.count(subject)) throw InputError("no responses from '" + subject + "'");
  std::printf("%zu items; %s against:\n", items.size(), subject.c_str());
  for (const auto& rival : models) {
    if (rival == subject) continue;
    const auto h = head_to_head(items, subject, rival);
    std::printf("  %-20s win %s  tie %s  lose %s  (%zu/%zu/%zu, %zu excluded)\n", rival.c_str(),
                format3(h.win).c_str(), format3(h.tie).c_str(), format3(h.lose).c_str(), h.wins,
                h.ties, h.losses, h.excluded);
  }
}

void add_model_options(CLI::App* cmd, ModelArgs& m) {
  cmd->add_option("--checkpoint", m.checkpoint, "local model checkpoint");
  cmd->add_option("--remote", m.remote, "remote chat endpoint, http://host:port/path");
  cmd->add_option("--token-env", m.token_env, "environment variable holding a bearer token");
  cmd->add_option("--max-new-tokens", m.max_new, "decode budget");
  cmd->add_option("--attempts", m.attempts, "remote attempts per question");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"multimodal chat assistant: data, training, serving, evaluation"};
  app.require_subcommand(1);

  auto* data = app.add_subcommand("data", "corpus preparation");
  data->require_subcommand(1);
  SynthArgs synth;
  auto* synth_cmd = data->add_subcommand("synth", "write the synthetic shapes corpus and bench");
  synth_cmd->add_option("--out", synth.out)->required();
  synth_cmd->add_option("--seed", synth.seed);
  synth_cmd->add_option("--bench", synth.bench, "number of bench MCQs");
  std::string stats_records, stats_root;
  auto* stats_cmd = data->add_subcommand("stats", "category counts and image statistics");
  stats_cmd->add_option("--records", stats_records)->required();
  stats_cmd->add_option("--root", stats_root, "image root (default: records directory)");
  FilterArgs filter;
  auto* filter_cmd = data->add_subcommand("filter", "apply curation rules");
  filter_cmd->add_option("--in", filter.in)->required();
  filter_cmd->add_option("--out", filter.out)->required();
  filter_cmd->add_option("--rules", filter.rules, "rule file (default: built-in rules)");
  filter_cmd->add_option("--rejects", filter.rejects, "write rejected ids and reasons here");
  std::string taxonomy_bench;
  auto* taxonomy_cmd = data->add_subcommand("taxonomy", "check open-question category counts");
  taxonomy_cmd->add_option("--bench", taxonomy_bench)->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "run one training stage");
  train_cmd->add_option("--stage", tr.stage)->required()->check(CLI::Range(1, 2));
  train_cmd->add_option("--data", tr.data, "directory with records.jsonl and images")->required();
  train_cmd->add_option("--out", tr.out)->required();
  train_cmd->add_option("--seed", tr.seed);
  train_cmd->add_option("--init", tr.init, "start from this checkpoint");
  train_cmd->add_option("--resume", tr.resume, "continue an interrupted run");
  train_cmd->add_option("--plan", tr.plan, "stage1, stage2, toy_stage1 or toy_stage2");
  tr.model = "toy";
  train_cmd->add_option("--model", tr.model, "toy or full geometry for a fresh model");
  train_cmd->add_option("--config", tr.config, "key=value file with model.* and train.* overrides");
  train_cmd->add_option("--merges", tr.merges, "learn this many BPE merges for a fresh model");
  train_cmd->add_option("--checkpoint-every", tr.checkpoint_every, "optimizer steps");
  train_cmd->add_flag("--train-encoder", tr.train_encoder, "also update the vision encoder");
  train_cmd->add_flag("--skip-overflow", tr.skip_overflow, "drop records over the context limit");

  std::string serve_ckpt, serve_host = "127.0.0.1";
  int serve_port = 8080;
  auto* serve_cmd = app.add_subcommand("serve", "HTTP chat service");
  serve_cmd->add_option("--checkpoint", serve_ckpt)->required();
  serve_cmd->add_option("--host", serve_host);
  serve_cmd->add_option("--port", serve_port);

  auto* eval = app.add_subcommand("eval", "benchmark evaluation");
  eval->require_subcommand(1);
  McqArgs mcq;
  auto* mcq_cmd = eval->add_subcommand("mcq", "multiple-choice accuracy");
  add_model_options(mcq_cmd, mcq.model);
  mcq_cmd->add_option("--bench", mcq.bench)->required();
  mcq_cmd->add_option("--out", mcq.out)->required();
  mcq_cmd->add_option("--setting", mcq.setting, "image_only or with_context");
  mcq_cmd->add_option("--seed", mcq.seed, "option order seed");
  mcq_cmd->add_option("--model-id", mcq.model_id);
  OpenArgs open;
  auto* open_cmd = eval->add_subcommand("open", "collect open-ended responses");
  add_model_options(open_cmd, open.model);
  open_cmd->add_option("--bench", open.bench)->required();
  open_cmd->add_option("--out", open.out)->required();
  open_cmd->add_option("--model-id", open.model_id);
  ReportArgs report;
  auto* report_cmd = eval->add_subcommand("report", "accuracy with bootstrap intervals");
  report_cmd->add_option("--outcomes", report.outcomes)->required();
  report_cmd->add_option("--restriction", report.restriction, "all or successful_only");
  report_cmd->add_option("--seed", report.seed);
  RankExportArgs rx;
  auto* rx_cmd = eval->add_subcommand("rank-export", "blinded rank sheets");
  rx_cmd->add_option("--bench", rx.bench)->required();
  rx_cmd->add_option("--responses", rx.responses)->required();
  rx_cmd->add_option("--out", rx.out)->required();
  rx_cmd->add_option("--seed", rx.seed);
  std::string ri_dir, ri_subject;
  auto* ri_cmd = eval->add_subcommand("rank-ingest", "head-to-head from filled sheets");
  ri_cmd->add_option("--dir", ri_dir)->required();
  ri_cmd->add_option("--subject", ri_subject)->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (synth_cmd->parsed()) data_synth(synth);
    if (stats_cmd->parsed()) {
      const fs::path records = stats_records;
      const fs::path root = stats_root.empty() ? records.parent_path() : fs::path(stats_root);
      std::printf("%s", format_stats(dataset_stats(read_records(records), root)).c_str());
    }
    if (filter_cmd->parsed()) data_filter(filter);
    if (taxonomy_cmd->parsed()) {
      const auto problems = check_taxonomy(taxonomy_counts(read_items(taxonomy_bench)), taxonomy_preset());
      for (const auto& p : problems) std::printf("%s\n", p.c_str());
      std::printf("%s\n", problems.empty() ? "taxonomy counts match" : "taxonomy counts differ");
      return problems.empty() ? 0 : 1;
    }
    if (train_cmd->parsed()) train(tr);
    if (serve_cmd->parsed()) serve(serve_ckpt, serve_host, serve_port);
    if (mcq_cmd->parsed()) eval_mcq(mcq);
    if (open_cmd->parsed()) eval_open(open);
    if (report_cmd->parsed()) eval_report(report);
    if (rx_cmd->parsed()) rank_export(rx);
    if (ri_cmd->parsed()) rank_ingest(ri_dir, ri_subject);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
