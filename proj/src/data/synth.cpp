#include "mmchat/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>

#include "mmchat/dataset.hpp"
#include "mmchat/errors.hpp"

namespace mmchat {

namespace {

struct Rgb {
  std::uint8_t r, g, b;
};

constexpr std::array<Rgb, 8> kPalette{{{220, 30, 30},
                                       {30, 160, 40},
                                       {30, 60, 220},
                                       {235, 210, 20},
                                       {140, 40, 180},
                                       {250, 140, 0},
                                       {20, 20, 20},
                                       {0, 200, 200}}};

// Per-category seed streams keep categories independent of each other's sizes.
constexpr std::uint64_t kStreamStride = 0x9E3779B97F4A7C15ull;

std::size_t pick(std::mt19937_64& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

template <typename T>
const T& pick(std::mt19937_64& rng, const std::vector<T>& items) {
  return items[pick(rng, items.size())];
}

double sign(double px, double py, double ax, double ay, double bx, double by) {
  return (px - bx) * (ay - by) - (ax - bx) * (py - by);
}

struct Placement {
  double cx, cy;
};

std::string position_phrase(const Placement& p, std::size_t w, std::size_t h) {
  const double fx = p.cx / static_cast<double>(w), fy = p.cy / static_cast<double>(h);
  const std::string v = fy < 0.42 ? "upper" : fy > 0.58 ? "lower" : "";
  const std::string hz = fx < 0.42 ? "left" : fx > 0.58 ? "right" : "";
  if (v.empty() && hz.empty()) return "near the centre of the frame";
  if (v.empty()) return "toward the " + hz + " side of the frame";
  if (hz.empty()) return "toward the " + v + " part of the frame";
  return "toward the " + v + " " + hz + " corner of the frame";
}

Image render_shape_at(std::size_t shape, std::size_t color, std::uint64_t seed, Placement* where) {
  std::mt19937_64 rng(seed);
  const std::size_t w = 64 + pick(rng, 17), h = 64 + pick(rng, 17);
  Image img = Image::filled(w, h, 255, 255, 255);
  const double side = static_cast<double>(std::min(w, h));
  const double radius = side * std::uniform_real_distribution<double>(0.24, 0.34)(rng);
  std::uniform_real_distribution<double> jitter(-0.12, 0.12);
  const double cx = static_cast<double>(w) * (0.5 + jitter(rng));
  const double cy = static_cast<double>(h) * (0.5 + jitter(rng));
  if (where) *where = {cx, cy};
  const Rgb c = kPalette[color];
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double px = static_cast<double>(x) + 0.5, py = static_cast<double>(y) + 0.5;
      bool inside = false;
      if (shape == 0) {
        inside = std::hypot(px - cx, py - cy) <= radius;
      } else if (shape == 1) {
        inside = std::abs(px - cx) <= radius * 0.9 && std::abs(py - cy) <= radius * 0.9;
      } else {
        const double ax = cx, ay = cy - radius;
        const double bx = cx - radius * 0.95, by = cy + radius * 0.75;
        const double qx = cx + radius * 0.95, qy = cy + radius * 0.75;
        const double d1 = sign(px, py, ax, ay, bx, by), d2 = sign(px, py, bx, by, qx, qy),
                     d3 = sign(px, py, qx, qy, ax, ay);
        inside = !((d1 < 0 || d2 < 0 || d3 < 0) && (d1 > 0 || d2 > 0 || d3 > 0));
      }
      if (inside) {
        auto* p = img.pixel(x, y);
        p[0] = c.r;
        p[1] = c.g;
        p[2] = c.b;
      }
    }
  }
  return img;
}

const std::vector<std::string> kImagePrompts{
    "Describe this image.",
    "What is shown in this image?",
    "Please describe the image in detail.",
    "Can you tell me what this image contains?",
};

const std::vector<std::string> kMcqQuestions{
    "Which option best describes this image?",
    "What is shown in this image?",
    "Which of the following matches the image?",
};

const std::vector<std::string> kSideWords{"no", "four", "three"};
const std::vector<std::string> kCornerWords{"no corners", "four corners", "three corners"};

struct Fact {
  std::string question;
  std::string answer;
};

const std::vector<Fact> kFacts{
    {"How many sides does a triangle have?", "A triangle has three sides."},
    {"How many sides does a square have?", "A square has four equal sides."},
    {"Does a circle have corners?", "No, a circle has no corners."},
    {"What is a circle?", "A circle is a round shape where every edge point is the same distance from the centre."},
    {"What is a square?", "A square is a shape with four equal sides and four right angles."},
    {"What is a triangle?", "A triangle is a shape with three straight sides and three corners."},
    {"Which colours appear in the shape images?", "The shapes are red, green, blue, yellow, purple, orange, black or cyan."},
    {"What colour is the background of the shape images?", "The background is always plain white."},
    {"What does orange look like?", "Orange is a warm colour between red and yellow."},
    {"What does cyan look like?", "Cyan is a bright colour between green and blue."},
};

std::string name_of(std::size_t shape, std::size_t color) {
  return color_names()[color] + " " + shape_names()[shape];
}

}  // namespace

const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names{"circle", "square", "triangle"};
  return names;
}

const std::vector<std::string>& color_names() {
  static const std::vector<std::string> names{"red",    "green",  "blue",  "yellow",
                                              "purple", "orange", "black", "cyan"};
  return names;
}

Image render_shape(std::size_t shape, std::size_t color, std::uint64_t seed) {
  if (shape >= shape_names().size() || color >= color_names().size()) {
    throw RangeError("render_shape: unknown shape or colour index");
  }
  return render_shape_at(shape, color, seed, nullptr);
}

Image render_pattern(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t w = 64 + pick(rng, 17), h = 64 + pick(rng, 17);
  const Rgb a = kPalette[pick(rng, kPalette.size())];
  Rgb b = kPalette[pick(rng, kPalette.size())];
  if (a.r == b.r && a.g == b.g && a.b == b.b) b = {255, 255, 255};
  const std::size_t period = 4 + pick(rng, 9);
  const std::size_t style = pick(rng, 3);
  Image img = Image::filled(w, h, 0, 0, 0);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const bool on = style == 0   ? (x / period) % 2 == 0
                      : style == 1 ? (y / period) % 2 == 0
                                   : ((x / period) + (y / period)) % 2 == 0;
      const Rgb c = on ? a : b;
      auto* p = img.pixel(x, y);
      p[0] = c.r;
      p[1] = c.g;
      p[2] = c.b;
    }
  }
  return img;
}

std::vector<std::string> mcq_options(std::size_t shape, std::size_t color) {
  std::vector<std::string> options{name_of(shape, color)};
  for (std::size_t c = 0; c < color_names().size(); ++c) {
    if (c != color) options.push_back(name_of(shape, c));
  }
  for (std::size_t s = 0; s < shape_names().size(); ++s) {
    if (s != shape) options.push_back(name_of(s, color));
  }
  return options;
}

SynthCorpus generate_synthetic_corpus(std::uint64_t seed, const SynthSizes& sizes) {
  SynthCorpus corpus;
  auto stream = [&](std::uint64_t k) { return std::mt19937_64(seed + k * kStreamStride); };
  auto add_image = [&](const std::string& name, Image img) {
    corpus.images.emplace_back(name, std::move(img));
    return "images/" + name;
  };
  auto id = [](const char* prefix, std::size_t i) {
    std::string n = std::to_string(i);
    return std::string(prefix) + "-" + std::string(n.size() < 4 ? 4 - n.size() : 0, '0') + n;
  };
  auto shape_record = [&](std::mt19937_64& rng, const std::string& rid, std::size_t* shape,
                          std::size_t* color, Placement* where, std::size_t* w, std::size_t* h) {
    *shape = pick(rng, shape_names().size());
    *color = pick(rng, color_names().size());
    Image img = render_shape_at(*shape, *color, rng(), where);
    *w = img.width;
    *h = img.height;
    return add_image(rid + ".png", std::move(img));
  };

  {
    auto rng = stream(1);
    for (std::size_t i = 0; i < sizes.description; ++i) {
      std::size_t s, c, w, h;
      Placement where;
      InstructionRecord r;
      r.id = id("desc", i);
      r.category = Category::kDescription;
      r.images.push_back(shape_record(rng, r.id, &s, &c, &where, &w, &h));
      r.turns.push_back({pick(rng, kImagePrompts),
                         "This image shows a single " + name_of(s, c) +
                             " drawn on a plain white background " + position_phrase(where, w, h) +
                             "."});
      r.source = "synthetic:description";
      corpus.records.push_back(std::move(r));
    }
  }
  {
    auto rng = stream(2);
    for (std::size_t i = 0; i < sizes.conversation; ++i) {
      std::size_t s, c, w, h;
      Placement where;
      InstructionRecord r;
      r.id = id("conv", i);
      r.category = Category::kConversation;
      r.images.push_back(shape_record(rng, r.id, &s, &c, &where, &w, &h));
      const Turn shape_turn{"What shape is shown in this image?",
                            "The image shows a " + shape_names()[s] + "."};
      const Turn color_turn{"What colour is it?", "It is " + color_names()[c] + "."};
      const Turn color_first{"What colour is the shape in this image?",
                             "The shape is " + color_names()[c] + "."};
      const Turn shape_second{"And which shape is it?", "It is a " + shape_names()[s] + "."};
      if (pick(rng, 2) == 0) {
        r.turns = {shape_turn, color_turn};
      } else {
        r.turns = {color_first, shape_second};
      }
      r.source = "synthetic:conversation";
      corpus.records.push_back(std::move(r));
    }
  }
  {
    auto rng = stream(3);
    for (std::size_t i = 0; i < sizes.multiple_choice; ++i) {
      std::size_t s, c, w, h;
      Placement where;
      InstructionRecord r;
      r.id = id("mcq", i);
      r.category = Category::kMultipleChoice;
      r.images.push_back(shape_record(rng, r.id, &s, &c, &where, &w, &h));
      auto options = mcq_options(s, c);
      const std::string key = options[0];
      std::shuffle(options.begin(), options.end(), rng);
      r.turns.push_back({format_mcq(pick(rng, kMcqQuestions), options), format_mcq_answer(key)});
      r.source = "synthetic:multiple_choice";
      corpus.records.push_back(std::move(r));
    }
  }
  {
    auto rng = stream(4);
    for (std::size_t i = 0; i < sizes.free_response; ++i) {
      std::size_t s, c, w, h;
      Placement where;
      InstructionRecord r;
      r.id = id("free", i);
      r.category = Category::kFreeResponse;
      r.images.push_back(shape_record(rng, r.id, &s, &c, &where, &w, &h));
      switch (pick(rng, 3)) {
        case 0:
          r.turns.push_back({"How many corners does the shape in this image have?",
                             "It is a " + shape_names()[s] + ", so it has " + kCornerWords[s] + "."});
          break;
        case 1:
          r.turns.push_back({"Where is the shape located in this image?",
                             "The " + name_of(s, c) + " sits " + position_phrase(where, w, h) + "."});
          break;
        default:
          r.turns.push_back({"How many straight sides does this shape have?",
                             "The " + shape_names()[s] + " has " + kSideWords[s] + " straight sides."});
          break;
      }
      r.source = "synthetic:free_response";
      corpus.records.push_back(std::move(r));
    }
  }
  {
    auto rng = stream(5);
    for (std::size_t i = 0; i < sizes.text_only; ++i) {
      const Fact& f = kFacts[pick(rng, kFacts.size())];
      InstructionRecord r;
      r.id = id("text", i);
      r.category = Category::kTextOnly;
      r.turns.push_back({f.question, f.answer});
      r.source = "synthetic:text_only";
      corpus.records.push_back(std::move(r));
    }
  }
  if (sizes.guardrail > 0) {
    auto rng = stream(6);
    const std::size_t per_kind = (sizes.guardrail + 1) / 2;
    std::vector<std::string> pool;
    for (std::size_t i = 0; i < per_kind; ++i) {
      pool.push_back(add_image(id("pattern", i) + ".png", render_pattern(rng())));
    }
    std::vector<std::string> prompts = kImagePrompts;
    prompts.insert(prompts.end(), kMcqQuestions.begin(), kMcqQuestions.end());
    auto guards = make_guardrails(prompts, pool, per_kind, rng(), "guard");
    // Odd totals drop the last wrong-domain record.
    guards.resize(sizes.guardrail);
    for (auto& g : guards) {
      g.source = "synthetic:" + g.source;
      corpus.records.push_back(std::move(g));
    }
    if (sizes.guardrail % 2 == 1) corpus.images.pop_back();
  }
  return corpus;
}

SynthBench generate_synthetic_bench(std::uint64_t seed, std::size_t count) {
  SynthBench bench;
  std::mt19937_64 rng(seed + 97 * kStreamStride);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t shape = pick(rng, shape_names().size());
    const std::size_t color = pick(rng, color_names().size());
    BenchmarkItem item;
    std::string n = std::to_string(i);
    item.id = "bench-" + std::string(n.size() < 3 ? 3 - n.size() : 0, '0') + n;
    Image img = render_shape(shape, color, rng());
    item.clinical_context = "Submitted drawing, about " + std::to_string(img.width) + " by " +
                            std::to_string(img.height) + " pixels, from a shapes worksheet.";
    bench.images.emplace_back(item.id + ".png", std::move(img));
    item.image = "images/" + item.id + ".png";
    item.organ = shape_names()[shape];
    item.question = pick(rng, kMcqQuestions);
    item.kind = ItemKind::kMcq;
    item.options = mcq_options(shape, color);
    item.key = 0;
    bench.items.push_back(std::move(item));
  }
  return bench;
}

namespace {

void write_images(const std::filesystem::path& dir, const NamedImages& images) {
  std::filesystem::create_directories(dir / "images");
  for (const auto& [name, img] : images) write_png(dir / "images" / name, img);
}

}  // namespace

void write_corpus(const std::filesystem::path& dir, const SynthCorpus& corpus) {
  std::filesystem::create_directories(dir);
  write_images(dir, corpus.images);
  write_records(dir / "records.jsonl", corpus.records);
}

void write_bench(const std::filesystem::path& dir, const SynthBench& bench) {
  std::filesystem::create_directories(dir);
  write_images(dir, bench.images);
  write_items(dir / "bench.jsonl", bench.items);
}

}  // namespace mmchat
