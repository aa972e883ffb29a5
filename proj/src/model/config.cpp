#include "mmchat/config.hpp"

#include "mmchat/errors.hpp"

namespace mmchat {

StackConfig StackConfig::full() {
  StackConfig c;
  c.image_size = 448;
  c.patch_size = 16;
  c.enc_layers = 24;
  c.enc_heads = 16;
  c.enc_dim = 1024;
  c.enc_ffn = 4096;
  c.pool_latents = 128;
  c.pool_dim = 768;
  c.pool_heads = 12;
  c.pool_layers = 1;
  c.lm_layers = 40;
  c.lm_heads = 40;
  c.lm_dim = 5120;
  c.lm_ffn = 13824;
  c.vocab_size = 32000;
  c.ctx_limit = 4096;
  return c;
}

StackConfig StackConfig::toy() { return StackConfig{}; }

StackConfig StackConfig::preset(const std::string& name) {
  if (name == "full") return full();
  if (name == "toy") return toy();
  throw InputError("unknown model preset '" + name + "'");
}

void StackConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw InputError("invalid stack config: " + what);
  };
  need(image_size > 0 && patch_size > 0, "image and patch size must be positive");
  need(image_size % patch_size == 0, "image_size must be divisible by patch_size");
  need(enc_heads > 0 && enc_dim % enc_heads == 0, "enc_dim must be divisible by enc_heads");
  need(pool_heads > 0 && pool_dim % pool_heads == 0, "pool_dim must be divisible by pool_heads");
  need(lm_heads > 0 && lm_dim % lm_heads == 0, "lm_dim must be divisible by lm_heads");
  need((lm_dim / lm_heads) % 2 == 0, "lm head width must be even for rotary encoding");
  need(pool_latents > 0 && pool_layers > 0, "pooler needs latents and at least one layer");
  need(enc_ffn > 0 && lm_ffn > 0 && vocab_size > 0 && ctx_limit > 0, "sizes must be positive");
}

void StackConfig::write(KeyValues& kv) const {
  kv.set("model.image_size", std::uint64_t{image_size});
  kv.set("model.patch_size", std::uint64_t{patch_size});
  kv.set("model.enc_layers", std::uint64_t{enc_layers});
  kv.set("model.enc_heads", std::uint64_t{enc_heads});
  kv.set("model.enc_dim", std::uint64_t{enc_dim});
  kv.set("model.enc_ffn", std::uint64_t{enc_ffn});
  kv.set("model.pool_latents", std::uint64_t{pool_latents});
  kv.set("model.pool_dim", std::uint64_t{pool_dim});
  kv.set("model.pool_heads", std::uint64_t{pool_heads});
  kv.set("model.pool_layers", std::uint64_t{pool_layers});
  kv.set("model.lm_layers", std::uint64_t{lm_layers});
  kv.set("model.lm_heads", std::uint64_t{lm_heads});
  kv.set("model.lm_dim", std::uint64_t{lm_dim});
  kv.set("model.lm_ffn", std::uint64_t{lm_ffn});
  kv.set("model.vocab_size", std::uint64_t{vocab_size});
  kv.set("model.ctx_limit", std::uint64_t{ctx_limit});
  kv.set("model.tie_embeddings", tie_embeddings);
  kv.set("model.rope_base", rope_base);
  kv.set("model.norm_eps", norm_eps);
  kv.set("model.init_std", init_std);
}

StackConfig StackConfig::read(const KeyValues& kv, StackConfig c) {
  auto u = [&](const char* key, std::size_t& field) { field = kv.get_uint_or(key, field); };
  u("model.image_size", c.image_size);
  u("model.patch_size", c.patch_size);
  u("model.enc_layers", c.enc_layers);
  u("model.enc_heads", c.enc_heads);
  u("model.enc_dim", c.enc_dim);
  u("model.enc_ffn", c.enc_ffn);
  u("model.pool_latents", c.pool_latents);
  u("model.pool_dim", c.pool_dim);
  u("model.pool_heads", c.pool_heads);
  u("model.pool_layers", c.pool_layers);
  u("model.lm_layers", c.lm_layers);
  u("model.lm_heads", c.lm_heads);
  u("model.lm_dim", c.lm_dim);
  u("model.lm_ffn", c.lm_ffn);
  u("model.vocab_size", c.vocab_size);
  u("model.ctx_limit", c.ctx_limit);
  c.tie_embeddings = kv.get_bool_or("model.tie_embeddings", c.tie_embeddings);
  c.rope_base = kv.get_double_or("model.rope_base", c.rope_base);
  c.norm_eps = kv.get_double_or("model.norm_eps", c.norm_eps);
  c.init_std = kv.get_double_or("model.init_std", c.init_std);
  return c;
}

StackConfig StackConfig::read(const KeyValues& kv) { return read(kv, StackConfig{}); }

}  // namespace mmchat
