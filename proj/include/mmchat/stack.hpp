#pragma once

// Vision encoder -> attention-pooling projector -> decoder language model.
//
// Weights live in one name-keyed map. The name prefix decides the partition
// ("enc." encoder, "proj." projector, "lm." language model), which drives the
// freeze logic of the trainer.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mmchat/config.hpp"
#include "mmchat/tensor.hpp"
#include "mmchat/tokenizer.hpp"

namespace mmchat {

enum class Partition { kEncoder, kProjector, kLm };

Partition partition_of(std::string_view weight_name);
std::string_view partition_name(Partition p);
Partition parse_partition(std::string_view name);

template <typename Real>
using WeightMap = std::map<std::string, BasicTensor<Real>>;

// Every weight name with the shape the config implies, in initialisation order.
std::vector<std::pair<std::string, Shape>> weight_layout(const StackConfig& config);

// Text + image sequence ready for the language model.
template <typename Real>
struct AssembledInput {
  BasicTensor<Real> embeddings;            // [T, lm_dim]
  std::vector<TokenId> ids;                // IMAGE id at every image position
  std::vector<std::uint8_t> loss_mask;     // false at every image position
  std::vector<std::uint8_t> image_position;
};

// Per-layer rotated keys and values of the positions decoded so far.
template <typename Real>
struct KvCache {
  std::vector<BasicTensor<Real>> keys;
  std::vector<BasicTensor<Real>> values;
  std::size_t length = 0;
};

template <typename Real>
class BasicStack {
 public:
  BasicStack() = default;
  // Validates that `weights` matches weight_layout(config) exactly.
  BasicStack(StackConfig config, WeightMap<Real> weights);

  // Seeded normal(0, init_std) matrices, unit norm gains, zero biases.
  static BasicStack initialize(const StackConfig& config, std::uint64_t seed);
  // Shape-only weights; forward passes propagate shapes without allocating.
  static BasicStack meta(const StackConfig& config);

  const StackConfig& config() const { return config_; }
  const WeightMap<Real>& weights() const { return weights_; }
  WeightMap<Real>& weights() { return weights_; }
  const BasicTensor<Real>& weight(const std::string& name) const;

  // [3, S, S] -> [N, enc_dim] patch tokens.
  BasicTensor<Real> encode_image(const BasicTensor<Real>& image) const;
  // [N, enc_dim] -> [K, lm_dim] image tokens, K independent of N.
  BasicTensor<Real> pool_and_project(const BasicTensor<Real>& patches) const;
  BasicTensor<Real> embed_tokens(std::span<const TokenId> ids) const;
  // [T, lm_dim] -> [T, vocab] causal logits.
  BasicTensor<Real> lm_forward(const BasicTensor<Real>& embeddings) const;
  // Appends `embeddings` after the cached positions and returns their logits.
  BasicTensor<Real> lm_forward_cached(KvCache<Real>& cache,
                                      const BasicTensor<Real>& embeddings) const;

  // Replaces each IMAGE placeholder by its K image tokens.
  AssembledInput<Real> assemble_multimodal(const TokenizedSample& sample,
                                           const std::vector<BasicTensor<Real>>& images) const;

  BasicStack clone() const;
  template <typename Other>
  BasicStack<Other> cast() const {
    WeightMap<Other> out;
    for (const auto& [name, t] : weights_) out.emplace(name, t.template cast<Other>());
    return BasicStack<Other>(config_, std::move(out));
  }

 private:
  BasicTensor<Real> transformer_block(const BasicTensor<Real>& x, const std::string& prefix,
                                      std::size_t heads, bool causal, bool biased,
                                      KvCache<Real>* cache, std::size_t layer) const;
  BasicTensor<Real> linear(const BasicTensor<Real>& x, const std::string& w,
                           const std::string& b) const;
  BasicTensor<Real> norm(const BasicTensor<Real>& x, const std::string& prefix) const;

  StackConfig config_;
  WeightMap<Real> weights_;
};

using Stack = BasicStack<float>;

// Shifted next-token loss: position t predicts ids[t + 1] when
// loss_mask[t + 1] is set.
template <typename Real>
BasicTensor<Real> next_token_loss(const BasicTensor<Real>& logits, std::span<const TokenId> ids,
                                  std::span<const std::uint8_t> loss_mask);

// Flattens an image tensor [3, S, S] into [N, 3 * p * p] patches, row-major over
// the patch grid, channel-major within a patch.
template <typename Real>
BasicTensor<Real> patchify(const BasicTensor<Real>& image, std::size_t patch_size);

}  // namespace mmchat
