#include "mmchat/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "mmchat/errors.hpp"
#include "mmchat/image.hpp"
#include "mmchat/ops.hpp"

namespace mmchat {

TrainPlan TrainPlan::stage1() { return TrainPlan{}; }

TrainPlan TrainPlan::stage2() {
  TrainPlan p;
  p.stage = 2;
  p.trainable = {Partition::kProjector, Partition::kLm};
  p.batch_size = 64;
  p.grad_accumulation = 2;
  p.peak_lr = 2e-5;
  return p;
}

TrainPlan TrainPlan::toy_stage1() {
  TrainPlan p = stage1();
  p.batch_size = 16;
  p.epochs = 4;
  return p;
}

TrainPlan TrainPlan::toy_stage2() {
  TrainPlan p = stage2();
  p.batch_size = 8;
  p.peak_lr = 1e-3;
  p.epochs = 8;
  return p;
}

TrainPlan TrainPlan::preset(const std::string& name) {
  if (name == "stage1") return stage1();
  if (name == "stage2") return stage2();
  if (name == "toy_stage1") return toy_stage1();
  if (name == "toy_stage2") return toy_stage2();
  throw InputError("unknown training preset '" + name + "'");
}

std::size_t TrainPlan::steps_per_epoch(std::size_t records) const {
  const std::size_t eff = effective_batch();
  if (eff == 0) throw InputError("batch size and accumulation must be positive");
  return (records + eff - 1) / eff;
}

void TrainPlan::write(KeyValues& kv) const {
  std::string parts;
  for (auto p : trainable) {
    if (!parts.empty()) parts += ',';
    parts += partition_name(p);
  }
  kv.set("train.stage", static_cast<std::uint64_t>(stage));
  kv.set("train.trainable", parts);
  kv.set("train.batch_size", std::uint64_t{batch_size});
  kv.set("train.grad_accumulation", std::uint64_t{grad_accumulation});
  kv.set("train.peak_lr", peak_lr);
  kv.set("train.warmup_ratio", warmup_ratio);
  kv.set("train.schedule", schedule);
  kv.set("train.beta1", beta1);
  kv.set("train.beta2", beta2);
  kv.set("train.adam_eps", adam_eps);
  kv.set("train.weight_decay", weight_decay);
  kv.set("train.clip_norm", clip_norm);
  kv.set("train.epochs", std::uint64_t{epochs});
  kv.set("train.seed", seed);
  kv.set("train.checkpoint_every", std::uint64_t{checkpoint_every});
  kv.set("train.skip_overflow", skip_overflow);
}

TrainPlan TrainPlan::read(const KeyValues& kv, TrainPlan p) {
  p.stage = static_cast<int>(kv.get_uint_or("train.stage", static_cast<std::uint64_t>(p.stage)));
  if (p.stage != 1 && p.stage != 2) throw InputError("train.stage must be 1 or 2");
  if (kv.contains("train.trainable")) {
    p.trainable.clear();
    std::istringstream in(kv.get("train.trainable"));
    std::string item;
    while (std::getline(in, item, ',')) {
      if (!item.empty()) p.trainable.insert(parse_partition(item));
    }
  }
  p.batch_size = kv.get_uint_or("train.batch_size", p.batch_size);
  p.grad_accumulation = kv.get_uint_or("train.grad_accumulation", p.grad_accumulation);
  p.peak_lr = kv.get_double_or("train.peak_lr", p.peak_lr);
  p.warmup_ratio = kv.get_double_or("train.warmup_ratio", p.warmup_ratio);
  p.schedule = kv.get_or("train.schedule", p.schedule);
  if (p.schedule != "cosine") throw InputError("unsupported schedule '" + p.schedule + "'");
  p.beta1 = kv.get_double_or("train.beta1", p.beta1);
  p.beta2 = kv.get_double_or("train.beta2", p.beta2);
  p.adam_eps = kv.get_double_or("train.adam_eps", p.adam_eps);
  p.weight_decay = kv.get_double_or("train.weight_decay", p.weight_decay);
  p.clip_norm = kv.get_double_or("train.clip_norm", p.clip_norm);
  p.epochs = kv.get_uint_or("train.epochs", p.epochs);
  p.seed = kv.get_uint_or("train.seed", p.seed);
  p.checkpoint_every = kv.get_uint_or("train.checkpoint_every", p.checkpoint_every);
  p.skip_overflow = kv.get_bool_or("train.skip_overflow", p.skip_overflow);
  if (p.batch_size == 0 || p.grad_accumulation == 0) {
    throw InputError("batch size and accumulation must be positive");
  }
  return p;
}

double lr_at(std::size_t step, std::size_t total, const TrainPlan& plan) {
  if (total == 0) throw InputError("lr_at: schedule has zero total steps");
  if (step >= total) return 0.0;
  const auto warmup = static_cast<std::size_t>(
      std::ceil(static_cast<double>(total) * plan.warmup_ratio - 1e-12));
  if (step < warmup) return plan.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  const double progress =
      static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return plan.peak_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

std::vector<InstructionRecord> select_stage_records(const std::vector<InstructionRecord>& records,
                                                    int stage) {
  if (stage == 2) return records;
  std::vector<InstructionRecord> out;
  for (const auto& r : records) {
    if (r.category == Category::kDescription) out.push_back(r);
  }
  return out;
}

TrainingSet prepare_training_set(const std::vector<InstructionRecord>& records,
                                 const std::filesystem::path& image_root, const Vocab& vocab,
                                 const StackConfig& config, bool skip_overflow) {
  TrainingSet set;
  for (const auto& r : records) {
    TrainExample ex;
    ex.id = r.id;
    ex.images = r.images;
    const auto turns = record_chat_turns(r);
    try {
      ex.sample = render_chat(vocab, turns, config.ctx_limit, config.pool_latents);
    } catch (const ContextLengthError& e) {
      if (!skip_overflow) throw ContextLengthError("record '" + r.id + "': " + e.what());
      ++set.skipped;
      continue;
    }
    for (const auto& ref : r.images) {
      if (set.images.pixels.count(ref)) continue;
      set.images.pixels.emplace(ref, preprocess_image(read_png(image_root / ref), config.image_size));
    }
    set.examples.push_back(std::move(ex));
  }
  return set;
}

void cache_encoder_features(const Stack& stack, ImageStore& store) {
  NoGradGuard no_grad;
  store.features.clear();
  for (const auto& [ref, pixels] : store.pixels) {
    store.features.emplace(ref, stack.encode_image(pixels));
  }
}

Tensor example_loss(const Stack& stack, const TrainExample& example, const ImageStore& store) {
  std::vector<Tensor> tokens;
  for (const auto& ref : example.images) {
    auto cached = store.features.find(ref);
    const Tensor features = cached != store.features.end()
                                ? cached->second
                                : stack.encode_image(store.pixels.at(ref));
    tokens.push_back(stack.pool_and_project(features));
  }
  const auto assembled = stack.assemble_multimodal(example.sample, tokens);
  const auto logits = stack.lm_forward(assembled.embeddings);
  return next_token_loss(logits, std::span<const TokenId>(assembled.ids),
                         std::span<const std::uint8_t>(assembled.loss_mask));
}

Tensor instruction_loss(const Stack& stack, const std::vector<const TrainExample*>& batch,
                        const ImageStore& store) {
  if (batch.empty()) throw InputError("instruction_loss: empty batch");
  std::vector<Tensor> losses;
  for (const auto* ex : batch) losses.push_back(ops::reshape(example_loss(stack, *ex, store), {1}));
  return ops::scale(ops::sum(ops::concat(losses, 0)), 1.0 / static_cast<double>(batch.size()));
}

void prepare_partitions(Stack& stack, const TrainPlan& plan) {
  for (auto& [name, w] : stack.weights()) {
    w.set_requires_grad(plan.trains(partition_of(name)));
    w.clear_grad();
  }
}

double clip_grad_norm(Stack& stack, const TrainPlan& plan) {
  double sq = 0.0;
  for (auto& [name, w] : stack.weights()) {
    if (!plan.trains(partition_of(name)) || !w.has_grad()) continue;
    for (float g : w.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > plan.clip_norm) {
    const double factor = plan.clip_norm / norm;
    for (auto& [name, w] : stack.weights()) {
      if (!plan.trains(partition_of(name)) || !w.has_grad()) continue;
      for (float& g : w.mutable_grad()) g = static_cast<float>(g * factor);
    }
  }
  return norm;
}

void adamw_update(Stack& stack, const TrainPlan& plan, AdamState& state, double lr) {
  ++state.step;
  const double c1 = 1.0 - std::pow(plan.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(plan.beta2, static_cast<double>(state.step));
  for (auto& [name, w] : stack.weights()) {
    if (!plan.trains(partition_of(name))) continue;
    auto data = w.mutable_data();
    auto& m = state.m[name];
    auto& v = state.v[name];
    m.resize(data.size(), 0.0f);
    v.resize(data.size(), 0.0f);
    const bool has_grad = w.has_grad();
    const auto grad = has_grad ? w.grad() : std::span<const float>();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double g = has_grad ? grad[i] : 0.0;
      const double mi = plan.beta1 * m[i] + (1.0 - plan.beta1) * g;
      const double vi = plan.beta2 * v[i] + (1.0 - plan.beta2) * g * g;
      m[i] = static_cast<float>(mi);
      v[i] = static_cast<float>(vi);
      const double update = (mi / c1) / (std::sqrt(vi / c2) + plan.adam_eps);
      const double p = data[i];
      data[i] = static_cast<float>(p - lr * (update + plan.weight_decay * p));
    }
  }
}

StepMetrics train_step(Stack& stack,
                       const std::vector<std::vector<const TrainExample*>>& micro_batches,
                       const ImageStore& store, const TrainPlan& plan, AdamState& state,
                       double lr) {
  prepare_partitions(stack, plan);
  std::size_t count = 0;
  for (const auto& mb : micro_batches) count += mb.size();
  if (count == 0) throw InputError("train_step: empty batch");

  StepMetrics metrics;
  metrics.lr = lr;
  double loss_sum = 0.0;
  for (auto mb : micro_batches) {
    std::sort(mb.begin(), mb.end(),
              [](const TrainExample* a, const TrainExample* b) { return a->id < b->id; });
    for (const auto* ex : mb) {
      const auto loss = example_loss(stack, *ex, store);
      const double value = loss.item();
      if (!std::isfinite(value)) {
        throw NonFiniteError("non-finite loss " + std::to_string(value) + " on record '" + ex->id +
                             "' at optimizer step " + std::to_string(state.step));
      }
      loss_sum += value;
      ops::scale(loss, 1.0 / static_cast<double>(count)).backward();
    }
  }
  metrics.loss = loss_sum / static_cast<double>(count);
  metrics.grad_norm = clip_grad_norm(stack, plan);
  adamw_update(stack, plan, state, lr);
  for (auto& [name, w] : stack.weights()) w.clear_grad();
  return metrics;
}

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossPoint>& curve) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "step,loss,lr\n" << std::setprecision(9);
  for (const auto& p : curve) out << p.step << ',' << p.loss << ',' << p.lr << '\n';
}

namespace {

std::string encode_curve(const std::vector<LossPoint>& curve) {
  std::ostringstream out;
  out << std::setprecision(17);
  for (const auto& p : curve) out << p.step << ':' << p.loss << ':' << p.lr << ' ';
  return out.str();
}

std::vector<LossPoint> decode_curve(const std::string& text) {
  std::vector<LossPoint> curve;
  std::istringstream in(text);
  std::string item;
  while (in >> item) {
    LossPoint p;
    char c1 = 0, c2 = 0;
    std::istringstream fields(item);
    if (!(fields >> p.step >> c1 >> p.loss >> c2 >> p.lr) || c1 != ':' || c2 != ':') {
      throw ParseError("bad loss curve entry '" + item + "'");
    }
    curve.push_back(p);
  }
  return curve;
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed * 1000003ull + epoch);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::string step_name(std::size_t step) {
  std::ostringstream s;
  s << "step-" << std::setw(6) << std::setfill('0') << step << ".mmf";
  return s.str();
}

}  // namespace

void save_training_checkpoint(const std::filesystem::path& path, const ModelBundle& bundle,
                              const TrainPlan& plan, const AdamState& state,
                              const std::vector<LossPoint>& curve) {
  auto contents = bundle_contents(bundle);
  plan.write(contents.config);
  contents.config.set("train.steps_done", std::uint64_t{state.step});
  contents.config.set("train.curve", encode_curve(curve));
  for (const auto& [name, m] : state.m) {
    const auto& shape = bundle.stack.weight(name).shape();
    contents.tensors.emplace("opt.m." + name, Tensor::from_data(shape, m));
    contents.tensors.emplace("opt.v." + name, Tensor::from_data(shape, state.v.at(name)));
  }
  write_checkpoint(path, contents);
}

RunResult run_stage(ModelBundle& bundle, const TrainingSet& data, const TrainPlan& plan,
                    const RunOptions& options) {
  if (data.examples.empty()) throw InputError("run_stage: dataset has no usable records");
  Stack& stack = bundle.stack;
  RunResult result;
  result.total_steps = plan.total_steps(data.examples.size());
  const std::size_t per_epoch = plan.steps_per_epoch(data.examples.size());
  AdamState state;

  if (options.resume) {
    const auto contents = read_checkpoint(*options.resume);
    auto restored = bundle_from_contents(contents);
    if (restored.stack.config() != stack.config()) {
      throw InputError("resume checkpoint has a different model geometry");
    }
    bundle = std::move(restored);
    state.step = contents.config.get_uint("train.steps_done");
    result.curve = decode_curve(contents.config.get_or("train.curve", ""));
    for (const auto& [name, t] : contents.tensors) {
      if (name.starts_with("opt.m.")) {
        state.m[name.substr(6)].assign(t.data().begin(), t.data().end());
      } else if (name.starts_with("opt.v.")) {
        state.v[name.substr(6)].assign(t.data().begin(), t.data().end());
      }
    }
  }

  ImageStore store = data.images;
  if (plan.trains(Partition::kEncoder)) {
    store.features.clear();
  } else {
    cache_encoder_features(stack, store);
  }
  if (!options.out_dir.empty()) std::filesystem::create_directories(options.out_dir);

  std::vector<std::size_t> order;
  std::size_t order_epoch = SIZE_MAX;
  const std::size_t eff = plan.effective_batch();
  while (state.step < result.total_steps) {
    if (options.stop_after != 0 && state.step >= options.stop_after) break;
    const std::size_t step = state.step;
    const std::size_t epoch = step / per_epoch;
    if (epoch != order_epoch) {
      order = epoch_order(data.examples.size(), plan.seed, epoch);
      order_epoch = epoch;
    }
    const std::size_t begin = (step % per_epoch) * eff;
    const std::size_t end = std::min(begin + eff, order.size());
    std::vector<std::vector<const TrainExample*>> micro;
    for (std::size_t i = begin; i < end; i += plan.batch_size) {
      std::vector<const TrainExample*> mb;
      for (std::size_t j = i; j < std::min(i + plan.batch_size, end); ++j) {
        mb.push_back(&data.examples[order[j]]);
      }
      micro.push_back(std::move(mb));
    }
    const double lr = lr_at(step, result.total_steps, plan);
    const auto metrics = train_step(stack, micro, store, plan, state, lr);
    const LossPoint point{step, metrics.loss, lr};
    result.curve.push_back(point);
    if (options.on_step) options.on_step(point);
    if (!options.out_dir.empty() && plan.checkpoint_every != 0 &&
        state.step % plan.checkpoint_every == 0 && state.step < result.total_steps) {
      save_training_checkpoint(options.out_dir / step_name(state.step), bundle, plan, state,
                               result.curve);
      write_loss_csv(options.out_dir / "loss.csv", result.curve);
    }
  }
  for (auto& [name, w] : stack.weights()) w.set_requires_grad(false);
  result.steps_done = state.step;
  if (!options.out_dir.empty()) {
    write_loss_csv(options.out_dir / "loss.csv", result.curve);
    const bool finished = state.step >= result.total_steps;
    save_training_checkpoint(options.out_dir / (finished ? "final.mmf" : step_name(state.step)),
                             bundle, plan, state, result.curve);
  }
  return result;
}

}  // namespace mmchat
