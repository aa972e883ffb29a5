#pragma once

#include <cstddef>
#include <string>

#include "mmchat/keyvalue.hpp"

namespace mmchat {

// Geometry of the encoder -> projector -> language model stack.
struct StackConfig {
  std::size_t image_size = 64;
  std::size_t patch_size = 8;
  std::size_t enc_layers = 4;
  std::size_t enc_heads = 4;
  std::size_t enc_dim = 64;
  std::size_t enc_ffn = 256;
  std::size_t pool_latents = 8;
  std::size_t pool_dim = 64;
  std::size_t pool_heads = 4;
  std::size_t pool_layers = 1;
  std::size_t lm_layers = 4;
  std::size_t lm_heads = 4;
  std::size_t lm_dim = 128;
  std::size_t lm_ffn = 512;
  std::size_t vocab_size = 263;
  std::size_t ctx_limit = 512;
  bool tie_embeddings = false;
  double rope_base = 10000.0;
  double norm_eps = 1e-5;
  double init_std = 0.02;

  // ViT-L/16 at 448 px, 128 latents at width 768, 13B-class decoder.
  static StackConfig full();
  // Desk-scale analogue used by tests and the synthetic corpus.
  static StackConfig toy();
  // "full" or "toy"; anything else raises InputError.
  static StackConfig preset(const std::string& name);

  // Throws InputError on any violated divisibility or positivity constraint.
  void validate() const;

  std::size_t patches_per_side() const { return image_size / patch_size; }
  std::size_t patch_tokens() const { return patches_per_side() * patches_per_side(); }
  std::size_t patch_features() const { return 3 * patch_size * patch_size; }

  // Keys are prefixed with "model.".
  void write(KeyValues& kv) const;
  // Starts from `base` and overrides any "model.*" key present.
  static StackConfig read(const KeyValues& kv, StackConfig base);
  static StackConfig read(const KeyValues& kv);

  friend bool operator==(const StackConfig&, const StackConfig&) = default;
};

}  // namespace mmchat
