#pragma once

// Two-stage optimisation: projector-only caption pretraining, then instruction
// finetuning of projector and language model.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "mmchat/checkpoint.hpp"
#include "mmchat/keyvalue.hpp"
#include "mmchat/records.hpp"
#include "mmchat/stack.hpp"

namespace mmchat {

struct TrainPlan {
  int stage = 1;
  std::set<Partition> trainable{Partition::kProjector};
  std::size_t batch_size = 128;
  std::size_t grad_accumulation = 1;
  double peak_lr = 1e-3;
  double warmup_ratio = 0.03;
  std::string schedule = "cosine";
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  double clip_norm = 1.0;
  std::size_t epochs = 1;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;  // optimizer steps; 0 = final only
  bool skip_overflow = false;        // false: overflowing records are a hard error

  // Batch 128, peak 1e-3, projector only.
  static TrainPlan stage1();
  // Batch 64 x 2 accumulation, peak 2e-5, projector and language model.
  static TrainPlan stage2();
  // Desk-scale variants: same optimizer, clip and schedule shape with smaller
  // batches, a higher stage-2 peak and more epochs.
  static TrainPlan toy_stage1();
  static TrainPlan toy_stage2();
  // "stage1", "stage2", "toy_stage1", "toy_stage2".
  static TrainPlan preset(const std::string& name);

  std::size_t effective_batch() const { return batch_size * grad_accumulation; }
  std::size_t steps_per_epoch(std::size_t records) const;
  std::size_t total_steps(std::size_t records) const { return epochs * steps_per_epoch(records); }
  bool trains(Partition p) const { return trainable.count(p) != 0; }

  // Keys are prefixed with "train.".
  void write(KeyValues& kv) const;
  static TrainPlan read(const KeyValues& kv, TrainPlan base);
};

// Linear warmup 0 -> peak over ceil(total * warmup_ratio) steps, then cosine
// decay to 0 at `total`. Throws InputError when total is 0.
double lr_at(std::size_t step, std::size_t total, const TrainPlan& plan);

// Tokenised record with its image references.
struct TrainExample {
  std::string id;
  TokenizedSample sample;
  std::vector<std::string> images;
};

// Preprocessed images keyed by reference, plus cached encoder outputs when the
// encoder is frozen.
struct ImageStore {
  std::map<std::string, Tensor> pixels;
  std::map<std::string, Tensor> features;
};

struct TrainingSet {
  std::vector<TrainExample> examples;
  ImageStore images;
  std::size_t skipped = 0;
};

// Stage 1 keeps description records only; stage 2 keeps everything.
std::vector<InstructionRecord> select_stage_records(const std::vector<InstructionRecord>& records,
                                                    int stage);

TrainingSet prepare_training_set(const std::vector<InstructionRecord>& records,
                                 const std::filesystem::path& image_root, const Vocab& vocab,
                                 const StackConfig& config, bool skip_overflow);

// Runs the frozen encoder once per image.
void cache_encoder_features(const Stack& stack, ImageStore& store);

// Masked next-token loss of one example; image-free examples never touch the
// vision path.
Tensor example_loss(const Stack& stack, const TrainExample& example, const ImageStore& store);
// Mean of example_loss over `batch`.
Tensor instruction_loss(const Stack& stack, const std::vector<const TrainExample*>& batch,
                        const ImageStore& store);

struct AdamState {
  std::size_t step = 0;
  std::map<std::string, std::vector<float>> m;
  std::map<std::string, std::vector<float>> v;
};

// Scales every trainable gradient by max_norm / norm when norm > max_norm.
// Returns the pre-clip global norm.
double clip_grad_norm(Stack& stack, const TrainPlan& plan);

// One AdamW update with decoupled weight decay on trainable weights only.
void adamw_update(Stack& stack, const TrainPlan& plan, AdamState& state, double lr);

// Marks trainable partitions as requiring gradients and clears stale grads.
void prepare_partitions(Stack& stack, const TrainPlan& plan);

struct StepMetrics {
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
};

// Accumulates gradients over the micro-batches (each reduced in record-id
// order), clips, and applies AdamW. Throws NonFiniteError on a non-finite loss.
StepMetrics train_step(Stack& stack, const std::vector<std::vector<const TrainExample*>>& micro_batches,
                       const ImageStore& store, const TrainPlan& plan, AdamState& state, double lr);

struct LossPoint {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
};

struct RunOptions {
  std::filesystem::path out_dir;  // empty: no files written
  std::optional<std::filesystem::path> resume;
  std::size_t stop_after = 0;  // stop once this many steps are done; 0 = run to the end
  std::function<void(const LossPoint&)> on_step;
};

struct RunResult {
  std::vector<LossPoint> curve;
  std::size_t steps_done = 0;
  std::size_t total_steps = 0;
};

// Trains `bundle` in place. Writes loss.csv, periodic step checkpoints and
// final.mmf under out_dir. Throws InputError on an empty dataset.
RunResult run_stage(ModelBundle& bundle, const TrainingSet& data, const TrainPlan& plan,
                    const RunOptions& options);

void write_loss_csv(const std::filesystem::path& path, const std::vector<LossPoint>& curve);

// Checkpoint with weights, tokenizer, plan, progress and optimizer moments.
void save_training_checkpoint(const std::filesystem::path& path, const ModelBundle& bundle,
                              const TrainPlan& plan, const AdamState& state,
                              const std::vector<LossPoint>& curve);

}  // namespace mmchat
