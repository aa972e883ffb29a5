#include "mmchat/stack.hpp"

#include <cmath>
#include <random>

#include "mmchat/errors.hpp"
#include "mmchat/ops.hpp"

namespace mmchat {

Partition partition_of(std::string_view name) {
  if (name.starts_with("enc.")) return Partition::kEncoder;
  if (name.starts_with("proj.")) return Partition::kProjector;
  if (name.starts_with("lm.")) return Partition::kLm;
  throw InputError("weight '" + std::string(name) + "' belongs to no partition");
}

std::string_view partition_name(Partition p) {
  switch (p) {
    case Partition::kEncoder:
      return "encoder";
    case Partition::kProjector:
      return "projector";
    case Partition::kLm:
      return "lm";
  }
  return "unknown";
}

Partition parse_partition(std::string_view name) {
  if (name == "encoder") return Partition::kEncoder;
  if (name == "projector") return Partition::kProjector;
  if (name == "lm") return Partition::kLm;
  throw InputError("unknown partition '" + std::string(name) + "'");
}

std::vector<std::pair<std::string, Shape>> weight_layout(const StackConfig& c) {
  c.validate();
  std::vector<std::pair<std::string, Shape>> out;
  auto add = [&](std::string name, Shape shape) { out.emplace_back(std::move(name), std::move(shape)); };
  auto norm = [&](const std::string& p, std::size_t d) {
    add(p + ".g", {d});
    add(p + ".b", {d});
  };
  auto block = [&](const std::string& p, std::size_t d, std::size_t ffn, bool attn_bias) {
    norm(p + ".ln1", d);
    for (const char* m : {"q", "k", "v", "o"}) {
      add(p + ".attn.w" + m, {d, d});
      if (attn_bias) add(p + ".attn.b" + m, {d});
    }
    norm(p + ".ln2", d);
    add(p + ".ffn.w1", {d, ffn});
    add(p + ".ffn.b1", {ffn});
    add(p + ".ffn.w2", {ffn, d});
    add(p + ".ffn.b2", {d});
  };

  add("enc.patch.w", {c.patch_features(), c.enc_dim});
  add("enc.patch.b", {c.enc_dim});
  add("enc.pos", {c.patch_tokens(), c.enc_dim});
  for (std::size_t i = 0; i < c.enc_layers; ++i) {
    block("enc.l" + std::to_string(i), c.enc_dim, c.enc_ffn, true);
  }
  norm("enc.ln_f", c.enc_dim);

  add("proj.latents", {c.pool_latents, c.pool_dim});
  norm("proj.ln_kv", c.enc_dim);
  for (std::size_t i = 0; i < c.pool_layers; ++i) {
    const std::string p = "proj.l" + std::to_string(i);
    norm(p + ".ln_q", c.pool_dim);
    add(p + ".wq", {c.pool_dim, c.pool_dim});
    add(p + ".wk", {c.enc_dim, c.pool_dim});
    add(p + ".wv", {c.enc_dim, c.pool_dim});
    add(p + ".wo", {c.pool_dim, c.pool_dim});
    add(p + ".bo", {c.pool_dim});
  }
  norm("proj.ln_out", c.pool_dim);
  add("proj.mlp.w1", {c.pool_dim, c.lm_dim});
  add("proj.mlp.b1", {c.lm_dim});
  add("proj.mlp.w2", {c.lm_dim, c.lm_dim});
  add("proj.mlp.b2", {c.lm_dim});

  add("lm.tok_emb", {c.vocab_size, c.lm_dim});
  for (std::size_t i = 0; i < c.lm_layers; ++i) {
    block("lm.l" + std::to_string(i), c.lm_dim, c.lm_ffn, false);
  }
  norm("lm.ln_f", c.lm_dim);
  if (!c.tie_embeddings) add("lm.head", {c.lm_dim, c.vocab_size});
  return out;
}

template <typename Real>
BasicStack<Real>::BasicStack(StackConfig config, WeightMap<Real> weights)
    : config_(std::move(config)), weights_(std::move(weights)) {
  const auto layout = weight_layout(config_);
  if (layout.size() != weights_.size()) {
    throw InputError("stack expects " + std::to_string(layout.size()) + " weights, got " +
                     std::to_string(weights_.size()));
  }
  for (const auto& [name, shape] : layout) {
    auto it = weights_.find(name);
    if (it == weights_.end()) throw InputError("stack is missing weight '" + name + "'");
    if (it->second.shape() != shape) {
      throw ShapeError("weight '" + name + "' has shape " + shape_string(it->second.shape()) +
                       ", config implies " + shape_string(shape));
    }
  }
}

namespace {

std::string_view last_component(std::string_view name) {
  const auto dot = name.rfind('.');
  return dot == std::string_view::npos ? name : name.substr(dot + 1);
}

}  // namespace

template <typename Real>
BasicStack<Real> BasicStack<Real>::initialize(const StackConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  WeightMap<Real> weights;
  for (const auto& [name, shape] : weight_layout(config)) {
    const auto leaf = last_component(name);
    auto t = BasicTensor<Real>::zeros(shape);
    auto data = t.mutable_data();
    if (leaf == "g") {
      std::fill(data.begin(), data.end(), Real(1));
    } else if (leaf.front() != 'b') {
      double stddev = config.init_std;
      // Residual output projections shrink with depth.
      if (leaf == "wo" || leaf == "w2") {
        const std::size_t depth = name.starts_with("enc.") ? config.enc_layers
                                  : name.starts_with("lm.") ? config.lm_layers
                                                            : config.pool_layers;
        if (!name.starts_with("proj.mlp")) stddev /= std::sqrt(2.0 * static_cast<double>(depth));
      }
      std::normal_distribution<double> dist(0.0, stddev);
      for (auto& v : data) v = static_cast<Real>(dist(rng));
    }
    weights.emplace(name, std::move(t));
  }
  return BasicStack(config, std::move(weights));
}

template <typename Real>
BasicStack<Real> BasicStack<Real>::meta(const StackConfig& config) {
  WeightMap<Real> weights;
  for (const auto& [name, shape] : weight_layout(config)) {
    weights.emplace(name, BasicTensor<Real>::meta(shape));
  }
  return BasicStack(config, std::move(weights));
}

template <typename Real>
const BasicTensor<Real>& BasicStack<Real>::weight(const std::string& name) const {
  auto it = weights_.find(name);
  if (it == weights_.end()) throw InputError("no weight named '" + name + "'");
  return it->second;
}

template <typename Real>
BasicStack<Real> BasicStack<Real>::clone() const {
  WeightMap<Real> out;
  for (const auto& [name, t] : weights_) out.emplace(name, t.clone());
  return BasicStack(config_, std::move(out));
}

template <typename Real>
BasicTensor<Real> BasicStack<Real>::linear(const BasicTensor<Real>& x, const std::string& w,
                                           const std::string& b) const {
  auto y = ops::matmul(x, weight(w));
  return b.empty() ? y : ops::add_row(y, weight(b));
}

template <typename Real>
BasicTensor<Real> BasicStack<Real>::norm(const BasicTensor<Real>& x,
                                         const std::string& prefix) const {
  return ops::layer_norm(x, weight(prefix + ".g"), weight(prefix + ".b"), config_.norm_eps);
}

template <typename Real>
BasicTensor<Real> BasicStack<Real>::transformer_block(const BasicTensor<Real>& x,
                                                      const std::string& p, std::size_t heads,
                                                      bool causal, bool biased,
                                                      KvCache<Real>* cache,
                                                      std::size_t layer) const {
  const auto h = norm(x, p + ".ln1");
  auto q = linear(h, p + ".attn.wq", biased ? p + ".attn.bq" : "");
  auto k = linear(h, p + ".attn.wk", biased ? p + ".attn.bk" : "");
  auto v = linear(h, p + ".attn.wv", biased ? p + ".attn.bv" : "");
  if (causal) {
    const std::size_t offset = cache ? cache->length : 0;
    q = ops::rope(q, heads, offset, config_.rope_base);
    k = ops::rope(k, heads, offset, config_.rope_base);
  }
  if (cache) {
    if (cache->keys[layer].defined()) {
      k = ops::concat<Real>({cache->keys[layer], k}, 0);
      v = ops::concat<Real>({cache->values[layer], v}, 0);
    }
    cache->keys[layer] = k;
    cache->values[layer] = v;
  }
  const auto attended = ops::attention(q, k, v, heads, causal);
  const auto x1 = ops::add(x, linear(attended, p + ".attn.wo", biased ? p + ".attn.bo" : ""));
  const auto h2 = norm(x1, p + ".ln2");
  const auto ff = linear(ops::gelu(linear(h2, p + ".ffn.w1", p + ".ffn.b1")), p + ".ffn.w2",
                         p + ".ffn.b2");
  return ops::add(x1, ff);
}

template <typename Real>
BasicTensor<Real> patchify(const BasicTensor<Real>& image, std::size_t p) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[0] != 3 || s[1] != s[2] || p == 0 || s[1] % p != 0) {
    throw ShapeError("patchify: image " + shape_string(s) + " does not tile into " +
                     std::to_string(p) + "px patches");
  }
  const std::size_t side = s[1], grid = side / p, features = 3 * p * p;
  if (image.is_meta()) return BasicTensor<Real>::meta({grid * grid, features});
  std::vector<Real> out(grid * grid * features);
  auto in = image.data();
  for (std::size_t gy = 0; gy < grid; ++gy) {
    for (std::size_t gx = 0; gx < grid; ++gx) {
      Real* dst = out.data() + (gy * grid + gx) * features;
      for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t dy = 0; dy < p; ++dy) {
          for (std::size_t dx = 0; dx < p; ++dx) {
            *dst++ = in[(c * side + gy * p + dy) * side + gx * p + dx];
          }
        }
      }
    }
  }
  return BasicTensor<Real>::from_data({grid * grid, features}, std::move(out));
}

template <typename Real>
BasicTensor<Real> BasicStack<Real>::encode_image(const BasicTensor<Real>& image) const {
  const Shape expected{3, config_.image_size, config_.image_size};
  if (image.shape() != expected) {
    throw ShapeError("encode_image: got " + shape_string(image.shape()) + ", config expects " +
                     shape_string(expected));
  }
  auto x = linear(patchify(image, config_.patch_size), "enc.patch.w", "enc.patch.b");
  x = ops::add(x, weight("enc.pos"));
  for (std::size_t i = 0; i < config_.enc_layers; ++i) {
    x = transformer_block(x, "enc.l" + std::to_string(i), config_.enc_heads, false, true, nullptr,
                          i);
  }
  return norm(x, "enc.ln_f");
}

template <typename Real>
BasicTensor<Real> BasicStack<Real>::pool_and_project(const BasicTensor<Real>& patches) const {
  if (patches.rank() != 2 || patches.extent(1) != config_.enc_dim) {
    throw ShapeError("pool_and_project: got " + shape_string(patches.shape()) +
                     ", expected [N, " + std::to_string(config_.enc_dim) + "]");
  }
  if (patches.extent(0) == 0) throw InputError("pool_and_project: no patch tokens");
  const auto kv = norm(patches, "proj.ln_kv");
  auto latents = weight("proj.latents");
  for (std::size_t i = 0; i < config_.pool_layers; ++i) {
    const std::string p = "proj.l" + std::to_string(i);
    const auto q = linear(norm(latents, p + ".ln_q"), p + ".wq", "");
    const auto k = linear(kv, p + ".wk", "");
    const auto v = linear(kv, p + ".wv", "");
    const auto pooled = ops::attention(q, k, v, config_.pool_heads, false);
    latents = ops::add(latents, linear(pooled, p + ".wo", p + ".bo"));
  }
  const auto hidden = ops::gelu(linear(norm(latents, "proj.ln_out"), "proj.mlp.w1", "proj.mlp.b1"));
  return linear(hidden, "proj.mlp.w2", "proj.mlp.b2");
}

template <typename Real>
BasicTensor<Real> BasicStack<Real>::embed_tokens(std::span<const TokenId> ids) const {
  return ops::embed(weight("lm.tok_emb"), ids);
}

template <typename Real>
BasicTensor<Real> BasicStack<Real>::lm_forward(const BasicTensor<Real>& embeddings) const {
  if (embeddings.rank() != 2 || embeddings.extent(1) != config_.lm_dim) {
    throw ShapeError("lm_forward: got " + shape_string(embeddings.shape()) + ", expected [T, " +
                     std::to_string(config_.lm_dim) + "]");
  }
  if (embeddings.extent(0) > config_.ctx_limit) {
    throw ContextLengthError("lm_forward: " + std::to_string(embeddings.extent(0)) +
                             " positions exceed the context limit of " +
                             std::to_string(config_.ctx_limit));
  }
  auto x = embeddings;
  for (std::size_t i = 0; i < config_.lm_layers; ++i) {
    x = transformer_block(x, "lm.l" + std::to_string(i), config_.lm_heads, true, false, nullptr, i);
  }
  x = norm(x, "lm.ln_f");
  if (config_.tie_embeddings) return ops::matmul(x, ops::transpose(weight("lm.tok_emb")));
  return ops::matmul(x, weight("lm.head"));
}

template <typename Real>
BasicTensor<Real> BasicStack<Real>::lm_forward_cached(KvCache<Real>& cache,
                                                      const BasicTensor<Real>& embeddings) const {
  if (embeddings.rank() != 2 || embeddings.extent(1) != config_.lm_dim) {
    throw ShapeError("lm_forward_cached: got " + shape_string(embeddings.shape()));
  }
  if (cache.length + embeddings.extent(0) > config_.ctx_limit) {
    throw ContextLengthError("lm_forward_cached: " +
                             std::to_string(cache.length + embeddings.extent(0)) +
                             " positions exceed the context limit of " +
                             std::to_string(config_.ctx_limit));
  }
  cache.keys.resize(config_.lm_layers);
  cache.values.resize(config_.lm_layers);
  auto x = embeddings;
  for (std::size_t i = 0; i < config_.lm_layers; ++i) {
    x = transformer_block(x, "lm.l" + std::to_string(i), config_.lm_heads, true, false, &cache, i);
  }
  cache.length += embeddings.extent(0);
  x = norm(x, "lm.ln_f");
  if (config_.tie_embeddings) return ops::matmul(x, ops::transpose(weight("lm.tok_emb")));
  return ops::matmul(x, weight("lm.head"));
}

template <typename Real>
AssembledInput<Real> BasicStack<Real>::assemble_multimodal(
    const TokenizedSample& sample, const std::vector<BasicTensor<Real>>& images) const {
  if (images.size() != sample.image_slots.size()) {
    throw PairingError("assemble_multimodal: " + std::to_string(images.size()) +
                       " images for " + std::to_string(sample.image_slots.size()) +
                       " IMAGE placeholders");
  }
  const std::size_t d = config_.lm_dim;
  AssembledInput<Real> out;
  const auto text = embed_tokens(sample.ids);
  if (images.empty()) {
    out.embeddings = text;
    out.ids = sample.ids;
    out.loss_mask = sample.loss_mask;
    out.image_position.assign(sample.ids.size(), 0);
    return out;
  }

  std::vector<BasicTensor<Real>> parts;
  std::size_t prev = 0;
  auto take_text = [&](std::size_t end) {
    if (end > prev) parts.push_back(ops::slice(text, {{prev, end}, {0, d}}));
    for (std::size_t t = prev; t < end; ++t) {
      out.ids.push_back(sample.ids[t]);
      out.loss_mask.push_back(sample.loss_mask[t]);
      out.image_position.push_back(0);
    }
  };
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::size_t slot = sample.image_slots[i];
    if (slot >= sample.ids.size() || sample.ids[slot] != Vocab::kImage) {
      throw PairingError("assemble_multimodal: slot " + std::to_string(slot) +
                         " is not an IMAGE placeholder");
    }
    const auto& img = images[i];
    if (img.rank() != 2 || img.extent(1) != d) {
      throw ShapeError("assemble_multimodal: image tokens " + shape_string(img.shape()) +
                       " do not match model width " + std::to_string(d));
    }
    take_text(slot);
    parts.push_back(img);
    for (std::size_t k = 0; k < img.extent(0); ++k) {
      out.ids.push_back(Vocab::kImage);
      out.loss_mask.push_back(0);
      out.image_position.push_back(1);
    }
    prev = slot + 1;
  }
  take_text(sample.ids.size());
  out.embeddings = ops::concat(parts, 0);
  return out;
}

template <typename Real>
BasicTensor<Real> next_token_loss(const BasicTensor<Real>& logits, std::span<const TokenId> ids,
                                  std::span<const std::uint8_t> loss_mask) {
  const std::size_t t_len = ids.size();
  if (loss_mask.size() != t_len) throw ShapeError("next_token_loss: mask length mismatch");
  std::vector<TokenId> targets(t_len, 0);
  std::vector<std::uint8_t> flags(t_len, 0);
  for (std::size_t t = 0; t + 1 < t_len; ++t) {
    targets[t] = ids[t + 1];
    flags[t] = loss_mask[t + 1];
  }
  return ops::masked_cross_entropy(logits, targets, flags);
}

template class BasicStack<float>;
template class BasicStack<double>;
template BasicTensor<float> next_token_loss(const BasicTensor<float>&, std::span<const TokenId>,
                                            std::span<const std::uint8_t>);
template BasicTensor<double> next_token_loss(const BasicTensor<double>&, std::span<const TokenId>,
                                             std::span<const std::uint8_t>);
template BasicTensor<float> patchify(const BasicTensor<float>&, std::size_t);
template BasicTensor<double> patchify(const BasicTensor<double>&, std::size_t);

}  // namespace mmchat
