#pragma once

// Named gradient checks shared by the unit tests and the acceptance gate.

#include <random>
#include <string>
#include <vector>

#include "finite_diff.hpp"
#include "mmchat/ops.hpp"
#include "mmchat/stack.hpp"
#include "mmchat/tokenizer.hpp"

namespace mmchat::testing {

struct GradCase {
  std::string name;
  std::function<GradReport()> run;
  bool end_to_end = false;
};

inline std::vector<GradCase> op_gradient_cases() {
  using namespace ops;
  std::vector<GradCase> cases;
  auto add_case = [&](std::string name, std::vector<Tensor64> inputs, ScalarFn fn) {
    cases.push_back({std::move(name), [inputs, fn] { return check_gradients(fn, inputs); }});
  };
  std::mt19937_64 rng(7);
  auto r = [&](Shape s, double scale = 1.0) { return random_tensor(std::move(s), rng, scale); };

  add_case("matmul", {r({3, 4}), r({4, 5})},
           [](const auto& in) { return project(matmul(in[0], in[1])); });
  add_case("add", {r({3, 4}), r({3, 4})},
           [](const auto& in) { return project(add(in[0], in[1])); });
  add_case("mul", {r({3, 4}), r({3, 4})},
           [](const auto& in) { return project(mul(in[0], in[1])); });
  add_case("scale", {r({3, 4})}, [](const auto& in) { return project(scale(in[0], -1.7)); });
  add_case("add_row", {r({3, 4}), r({4})},
           [](const auto& in) { return project(add_row(in[0], in[1])); });
  add_case("transpose", {r({3, 5})}, [](const auto& in) { return project(transpose(in[0])); });
  add_case("reshape", {r({3, 4})},
           [](const auto& in) { return project(reshape(in[0], Shape{2, 6})); });
  add_case("softmax_rows", {r({3, 5})},
           [](const auto& in) { return project(softmax(in[0], 1)); });
  add_case("softmax_cols", {r({3, 5})},
           [](const auto& in) { return project(softmax(in[0], 0)); });
  add_case("layer_norm", {r({4, 6}), r({6}), r({6})}, [](const auto& in) {
    return project(layer_norm(in[0], in[1], in[2], 1e-5));
  });
  add_case("gelu", {r({4, 6}, 2.0)}, [](const auto& in) { return project(gelu(in[0])); });
  add_case("embed", {r({7, 4})}, [](const auto& in) {
    const std::vector<std::int32_t> ids{3, 0, 3, 6, 1};
    return project(embed(in[0], std::span<const std::int32_t>(ids)));
  });
  add_case("concat_rows", {r({2, 4}), r({3, 4})},
           [](const auto& in) { return project(concat<double>({in[0], in[1]}, 0)); });
  add_case("concat_cols", {r({3, 2}), r({3, 4})},
           [](const auto& in) { return project(concat<double>({in[0], in[1]}, 1)); });
  add_case("slice", {r({5, 6})},
           [](const auto& in) { return project(slice(in[0], {{1, 4}, {2, 5}})); });
  add_case("rope", {r({5, 8})},
           [](const auto& in) { return project(rope(in[0], 2, 3, 10000.0)); });
  add_case("attention", {r({4, 8}), r({6, 8}), r({6, 8})}, [](const auto& in) {
    return project(attention(in[0], in[1], in[2], 2, false));
  });
  add_case("attention_causal", {r({5, 8}), r({5, 8}), r({5, 8})}, [](const auto& in) {
    return project(attention(in[0], in[1], in[2], 2, true));
  });
  add_case("attention_causal_offset", {r({2, 8}), r({5, 8}), r({5, 8})}, [](const auto& in) {
    return project(attention(in[0], in[1], in[2], 4, true));
  });
  add_case("masked_cross_entropy", {r({5, 7})}, [](const auto& in) {
    const std::vector<std::int32_t> targets{2, 6, 0, 0, 4};
    const std::vector<std::uint8_t> mask{1, 0, 1, 0, 1};
    return masked_cross_entropy(in[0], std::span<const std::int32_t>(targets),
                                std::span<const std::uint8_t>(mask));
  });
  add_case("sum", {r({3, 4})}, [](const auto& in) { return sum(in[0]); });
  return cases;
}

// Image -> encoder -> pooler -> LM -> masked next-token loss at the toy
// geometry, with every weight and the image receiving sampled checks.
inline GradReport end_to_end_gradient_check(std::size_t samples_per_weight = 3) {
  const StackConfig config = StackConfig::toy();
  const auto stack = BasicStack<double>::initialize(config, 11);
  std::vector<std::string> names;
  std::vector<Tensor64> inputs;
  for (const auto& [name, w] : stack.weights()) {
    names.push_back(name);
    auto copy = w.clone();
    copy.set_requires_grad(true);
    inputs.push_back(copy);
  }
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> pixels(3 * config.image_size * config.image_size);
  for (auto& p : pixels) p = unit(rng);
  const auto image = Tensor64::from_data({3, config.image_size, config.image_size}, pixels);

  const Vocab vocab;
  const std::vector<ChatTurn> turns{{Role::kUser, "what shape?", 1},
                                    {Role::kAssistant, "a red circle", 0}};
  const auto sample = render_chat(vocab, turns, config.ctx_limit, config.pool_latents);

  const ScalarFn fn = [&](const std::vector<Tensor64>& in) {
    WeightMap<double> weights;
    for (std::size_t i = 0; i < names.size(); ++i) weights.emplace(names[i], in[i]);
    const BasicStack<double> s(config, std::move(weights));
    const auto tokens = s.pool_and_project(s.encode_image(image));
    const auto assembled = s.assemble_multimodal(sample, {tokens});
    const auto logits = s.lm_forward(assembled.embeddings);
    return next_token_loss(logits, std::span<const TokenId>(assembled.ids),
                           std::span<const std::uint8_t>(assembled.loss_mask));
  };
  return check_gradients(fn, inputs, 1e-5, samples_per_weight);
}

}  // namespace mmchat::testing
