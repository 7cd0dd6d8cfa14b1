#include "lincir/synth.hpp"

#include <algorithm>
#include <array>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

namespace lincir {

namespace {

constexpr std::array<const char*, kObjectCount> kObjectNames = {
    "cat", "dog", "car", "ball", "cube", "tree", "house", "fish"};
constexpr std::array<const char*, kColorCount> kColorNames = {"red",    "green", "blue",
                                                              "yellow", "gray",  "black"};
constexpr std::array<const char*, kSizeCount> kSizeNames = {"small", "large"};
constexpr std::array<const char*, kBackgroundCount> kBackgroundNames = {"white", "dark", "grid"};

template <typename E, size_t N>
E parse_enum(const std::string& word, const std::array<const char*, N>& names,
             const char* what) {
  for (size_t i = 0; i < N; ++i)
    if (word == names[i]) return static_cast<E>(i);
  throw Error("synth", std::string("unknown ") + what + ": " + word);
}

using Rgb = std::array<double, 3>;

Rgb object_rgb(ColorKind c) {
  switch (c) {
    case ColorKind::Red: return {0.85, 0.10, 0.10};
    case ColorKind::Green: return {0.10, 0.70, 0.15};
    case ColorKind::Blue: return {0.15, 0.20, 0.85};
    case ColorKind::Yellow: return {0.90, 0.85, 0.10};
    case ColorKind::Gray: return {0.50, 0.50, 0.50};
    case ColorKind::Black: return {0.05, 0.05, 0.05};
  }
  return {0, 0, 0};
}

Rgb background_rgb(BackgroundKind b, int64_t x, int64_t y) {
  switch (b) {
    case BackgroundKind::White: return {0.95, 0.95, 0.95};
    case BackgroundKind::Dark: return {0.30, 0.30, 0.38};
    case BackgroundKind::Grid:
      if (x % 6 == 0 || y % 6 == 0) return {0.62, 0.62, 0.66};
      return {0.95, 0.95, 0.95};
  }
  return {0, 0, 0};
}

// u grows rightward, v grows downward, both in glyph units (1 = half extent).
bool in_triangle(double u, double v, double ax, double ay, double bx, double by, double cx,
                 double cy) {
  auto side = [&](double x0, double y0, double x1, double y1) {
    return (u - x1) * (y0 - y1) - (x0 - x1) * (v - y1);
  };
  const double d1 = side(ax, ay, bx, by);
  const double d2 = side(bx, by, cx, cy);
  const double d3 = side(cx, cy, ax, ay);
  const bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
  const bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
  return !(has_neg && has_pos);
}

bool in_circle(double u, double v, double cx, double cy, double r) {
  return (u - cx) * (u - cx) + (v - cy) * (v - cy) <= r * r;
}

// Shapes are told apart by coarse mass distribution, not fine detail: the
// encoder pools small patches, so the discriminating structure has to span
// several of them even at the small size. Each glyph owns one coarse cue no
// other glyph has: twin top peaks (cat), diagonal two-blob (dog), low slab
// with wheels (car), central hole (ball), solid square (cube), stacked
// wedges (tree), square with a bottom notch under a roof (house), lens with
// a fanned tail (fish). Mirroring is part of training augmentation, so no
// cue may live in left-right placement alone.
bool in_glyph(ObjectKind o, double u, double v) {
  auto ellipse = [&](double cx, double cy, double rx, double ry) {
    const double du = (u - cx) / rx;
    const double dv = (v - cy) / ry;
    return du * du + dv * dv <= 1.0;
  };
  switch (o) {
    case ObjectKind::Cat:
      return in_circle(u, v, 0, 0.40, 0.52) ||
             in_triangle(u, v, -0.10, -0.05, -0.90, -0.05, -0.55, -1.00) ||
             in_triangle(u, v, 0.10, -0.05, 0.90, -0.05, 0.55, -1.00);
    case ObjectKind::Dog:
      return in_circle(u, v, -0.50, -0.45, 0.38) || ellipse(0.15, 0.40, 0.80, 0.42);
    case ObjectKind::Car:
      return (std::abs(u) <= 1.00 && v >= 0.00 && v <= 0.52) ||
             (std::abs(u) <= 0.48 && v >= -0.52 && v < 0.00) ||
             in_circle(u, v, -0.58, 0.70, 0.28) || in_circle(u, v, 0.58, 0.70, 0.28);
    case ObjectKind::Ball:
      return in_circle(u, v, 0, 0, 0.95) && !in_circle(u, v, 0, 0, 0.45);
    case ObjectKind::Cube:
      return std::abs(u) <= 0.80 && std::abs(v) <= 0.80;
    case ObjectKind::Tree:
      return in_triangle(u, v, 0.00, -1.00, -0.55, -0.20, 0.55, -0.20) ||
             in_triangle(u, v, 0.00, -0.50, -0.80, 0.42, 0.80, 0.42) ||
             (std::abs(u) <= 0.15 && v >= 0.42 && v <= 1.00);
    case ObjectKind::House: {
      const bool door = std::abs(u) <= 0.20 && v >= 0.45 && v <= 1.00;
      return !door && ((std::abs(u) <= 0.58 && v >= -0.30 && v <= 1.00) ||
                       in_triangle(u, v, 0.00, -1.00, -0.90, -0.30, 0.90, -0.30));
    }
    case ObjectKind::Fish:
      return ellipse(-0.15, 0.00, 0.62, 0.42) ||
             in_triangle(u, v, 0.35, 0.00, 1.00, -0.58, 1.00, 0.58);
  }
  return false;
}

nlohmann::ordered_json scene_json(const Scene& s) {
  nlohmann::ordered_json j;
  j["object"] = object_name(s.object);
  j["color"] = color_name(s.color);
  j["size"] = size_name(s.size);
  j["background"] = background_name(s.background);
  return j;
}

Scene scene_from_json(const nlohmann::json& j) {
  Scene s;
  s.object = parse_enum<ObjectKind>(j.at("object").get<std::string>(), kObjectNames, "object");
  s.color = parse_enum<ColorKind>(j.at("color").get<std::string>(), kColorNames, "color");
  s.size = parse_enum<SizeKind>(j.at("size").get<std::string>(), kSizeNames, "size");
  s.background = parse_enum<BackgroundKind>(j.at("background").get<std::string>(), kBackgroundNames,
                                            "background");
  return s;
}

std::vector<std::string> read_jsonl_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("synth", "cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(line);
  return lines;
}

void write_text_file(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("synth", "cannot write " + path);
  out << body;
}

struct Mutation {
  Scene result;
  std::string condition;
};

// One attribute flip; size is always carried over unchanged. Background
// flips sometimes phrase keyword-free ("darken it" / "brighten it") so the
// downstream masking path sees conditions without any maskable span.
Mutation sample_mutation(const Scene& ref, Rng& rng) {
  Mutation m;
  m.result = ref;
  const int64_t kind = rng.uniform_int(3);
  std::ostringstream text;
  if (kind == 0) {
    int64_t c = rng.uniform_int(kColorCount - 1);
    if (c >= static_cast<int64_t>(ref.color)) ++c;
    m.result.color = static_cast<ColorKind>(c);
    text << "is " << color_name(m.result.color) << " instead";
  } else if (kind == 1) {
    int64_t o = rng.uniform_int(kObjectCount - 1);
    if (o >= static_cast<int64_t>(ref.object)) ++o;
    m.result.object = static_cast<ObjectKind>(o);
    text << "change the " << object_name(ref.object) << " to a " << object_name(m.result.object);
  } else {
    int64_t b = rng.uniform_int(kBackgroundCount - 1);
    if (b >= static_cast<int64_t>(ref.background)) ++b;
    m.result.background = static_cast<BackgroundKind>(b);
    if (m.result.background == BackgroundKind::Dark && rng.uniform() < 0.5) {
      text << "darken it";
    } else if (m.result.background == BackgroundKind::White &&
               ref.background == BackgroundKind::Dark && rng.uniform() < 0.5) {
      text << "brighten it";
    } else {
      text << "on a " << background_name(m.result.background) << " background";
    }
  }
  m.condition = text.str();
  return m;
}

}  // namespace

const char* object_name(ObjectKind o) { return kObjectNames[static_cast<size_t>(o)]; }
const char* color_name(ColorKind c) { return kColorNames[static_cast<size_t>(c)]; }
const char* size_name(SizeKind s) { return kSizeNames[static_cast<size_t>(s)]; }
const char* background_name(BackgroundKind b) { return kBackgroundNames[static_cast<size_t>(b)]; }

std::string Scene::id() const {
  std::string s = object_name(object);
  s += '_';
  s += color_name(color);
  s += '_';
  s += size_name(size);
  s += '_';
  s += background_name(background);
  return s;
}

std::vector<Scene> all_scenes() {
  std::vector<Scene> scenes;
  scenes.reserve(kObjectCount * kColorCount * kSizeCount * kBackgroundCount);
  for (int o = 0; o < kObjectCount; ++o)
    for (int c = 0; c < kColorCount; ++c)
      for (int s = 0; s < kSizeCount; ++s)
        for (int b = 0; b < kBackgroundCount; ++b)
          scenes.push_back({static_cast<ObjectKind>(o), static_cast<ColorKind>(c),
                            static_cast<SizeKind>(s), static_cast<BackgroundKind>(b)});
  return scenes;
}

Scene scene_from_id(const std::string& id) {
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : id) {
    if (ch == '_') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  parts.push_back(cur);
  if (parts.size() != 4) throw Error("synth", "malformed scene id: " + id);
  Scene s;
  s.object = parse_enum<ObjectKind>(parts[0], kObjectNames, "object");
  s.color = parse_enum<ColorKind>(parts[1], kColorNames, "color");
  s.size = parse_enum<SizeKind>(parts[2], kSizeNames, "size");
  s.background = parse_enum<BackgroundKind>(parts[3], kBackgroundNames, "background");
  return s;
}

Tensor render_scene(const Scene& scene, int64_t side) {
  if (side < 8) throw Error("synth", "render side too small");
  const double center = (side - 1) / 2.0;
  // Small still clears half the raster so shape structure survives patch
  // pooling; large leaves a 2 px margin for translation augmentation.
  const double radius =
      (scene.size == SizeKind::Small ? 7.0 : 9.5) * (static_cast<double>(side) / 24.0);
  const Rgb fg = object_rgb(scene.color);
  TensorBuilder img({side, side, 3});
  double* out = img.data();
  for (int64_t y = 0; y < side; ++y) {
    for (int64_t x = 0; x < side; ++x) {
      const double u = (x - center) / radius;
      const double v = (y - center) / radius;
      const Rgb px = in_glyph(scene.object, u, v) ? fg : background_rgb(scene.background, x, y);
      double* p = out + (y * side + x) * 3;
      p[0] = px[0];
      p[1] = px[1];
      p[2] = px[2];
    }
  }
  return img.build();
}

const std::vector<std::string>& caption_templates() {
  static const std::vector<std::string> templates = {
      "a {size} {color} {object} on a {background} background",
      "the {color} {object} is {size} and sits on a {background} background",
      "there is a {size} {object} colored {color} against a {background} background",
      "a photo of a {size} {color} {object} on a {background} background",
      "one {size} {color} {object} is on the {background} background",
  };
  return templates;
}

std::string caption_for(const Scene& scene, size_t template_idx) {
  const auto& templates = caption_templates();
  if (template_idx >= templates.size()) throw Error("synth", "caption template index out of range");
  std::string text = templates[template_idx];
  auto fill = [&text](const std::string& key, const std::string& value) {
    const auto pos = text.find(key);
    if (pos != std::string::npos) text.replace(pos, key.size(), value);
  };
  fill("{size}", size_name(scene.size));
  fill("{color}", color_name(scene.color));
  fill("{object}", object_name(scene.object));
  fill("{background}", background_name(scene.background));
  return text;
}

std::string caption_for(const Scene& scene, Rng& rng) {
  return caption_for(scene, static_cast<size_t>(rng.uniform_int(
                                static_cast<int64_t>(caption_templates().size()))));
}

Scene apply_condition(const Scene& reference, const std::string& condition) {
  Scene out = reference;
  std::vector<std::string> words;
  std::string cur;
  for (char ch : condition + " ") {
    if (ch == ' ') {
      if (!cur.empty()) words.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (condition == "darken it") {
    out.background = BackgroundKind::Dark;
    return out;
  }
  if (condition == "brighten it") {
    out.background = BackgroundKind::White;
    return out;
  }
  if (!words.empty() && words.front() == "is" && words.back() == "instead" && words.size() == 3) {
    out.color = parse_enum<ColorKind>(words[1], kColorNames, "color");
    return out;
  }
  if (words.size() == 6 && words[0] == "change" && words[1] == "the" && words[3] == "to") {
    out.object = parse_enum<ObjectKind>(words[5], kObjectNames, "object");
    return out;
  }
  if (words.size() == 4 && words[0] == "on" && words.back() == "background") {
    out.background = parse_enum<BackgroundKind>(words[2], kBackgroundNames, "background");
    return out;
  }
  throw Error("synth", "unparseable condition: " + condition);
}

std::vector<std::string> scenes_matching_attributes(const Scene& proto) {
  std::vector<std::string> ids;
  for (const Scene& s : all_scenes())
    if (s.object == proto.object && s.color == proto.color && s.background == proto.background)
      ids.push_back(s.id());
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<double> attribute_match_scores(const Scene& proto, const std::vector<Scene>& gallery) {
  std::vector<double> scores;
  scores.reserve(gallery.size());
  for (const Scene& s : gallery) {
    double m = 0.0;
    if (s.object == proto.object) m += 1.0;
    if (s.color == proto.color) m += 1.0;
    if (s.background == proto.background) m += 1.0;
    scores.push_back(m);
  }
  return scores;
}

SynthBenchmark build_cir_benchmark(uint64_t split_seed) {
  Rng rng(split_seed);
  SynthBenchmark bench;
  bench.gallery = all_scenes();

  std::vector<int> order(bench.gallery.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const size_t n_train = 216;
  std::vector<int> train_idx(order.begin(), order.begin() + n_train);
  std::vector<int> holdout_idx(order.begin() + n_train, order.end());
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(holdout_idx.begin(), holdout_idx.end());
  std::set<int> train_set(train_idx.begin(), train_idx.end());
  for (int i : train_idx) bench.train_scenes.push_back(bench.gallery[i]);
  for (int i : holdout_idx) bench.holdout_scenes.push_back(bench.gallery[i]);

  const int64_t n_templates = static_cast<int64_t>(caption_templates().size());
  for (const Scene& s : bench.train_scenes) {
    const int64_t t1 = rng.uniform_int(n_templates);
    const int64_t t2 = (t1 + 1 + rng.uniform_int(n_templates - 1)) % n_templates;
    bench.train_corpus.push_back(caption_for(s, static_cast<size_t>(t1)));
    bench.train_corpus.push_back(caption_for(s, static_cast<size_t>(t2)));
  }
  // Keyword-free lines: the masking step skips them, so downstream skip
  // accounting is exercised by every real run.
  bench.train_corpus.push_back("please darken it");
  bench.train_corpus.push_back("it is as it is");
  bench.train_corpus.push_back("look at it");
  bench.train_corpus.push_back("see what it is");

  for (const Scene& s : bench.train_scenes) bench.pretrain_examples.push_back({s, caption_for(s, rng)});
  auto scene_index = [&bench](const Scene& s) {
    for (size_t i = 0; i < bench.gallery.size(); ++i)
      if (bench.gallery[i] == s) return static_cast<int>(i);
    throw Error("synth", "scene not in gallery: " + s.id());
  };
  for (const Scene& s : bench.train_scenes) {
    for (int rep = 0; rep < 2; ++rep) {
      // modification pairs teach the encoder the condition grammar; targets
      // stay inside the train split so the holdout gate measures unseen scenes
      Mutation m = sample_mutation(s, rng);
      for (int tries = 0; tries < 32 && train_set.count(scene_index(m.result)) == 0; ++tries)
        m = sample_mutation(s, rng);
      if (train_set.count(scene_index(m.result)) == 0) continue;
      std::string text = "a photo of a ";
      text += color_name(s.color);
      text += ' ';
      text += object_name(s.object);
      text += " that ";
      text += m.condition;
      bench.pretrain_examples.push_back({m.result, text});
    }
  }

  for (const Scene& s : bench.holdout_scenes) bench.holdout_examples.push_back({s, caption_for(s, rng)});

  char buf[32];
  for (size_t i = 0; i < bench.holdout_scenes.size(); ++i) {
    const Scene& ref = bench.holdout_scenes[i];
    const Mutation dev_m = sample_mutation(ref, rng);
    Mutation test_m = sample_mutation(ref, rng);
    while (test_m.condition == dev_m.condition) test_m = sample_mutation(ref, rng);

    std::snprintf(buf, sizeof buf, "dev_%03zu", i);
    bench.dev.push_back(
        {buf, ref.id(), dev_m.condition, scenes_matching_attributes(dev_m.result)});
    std::snprintf(buf, sizeof buf, "test_%03zu", i);
    bench.test.push_back(
        {buf, ref.id(), test_m.condition, scenes_matching_attributes(test_m.result)});
  }
  return bench;
}

std::vector<std::string> SynthBenchmark::vocab_texts() const {
  std::vector<std::string> texts = train_corpus;
  for (const auto& p : pretrain_examples) texts.push_back(p.text);
  for (const auto& p : holdout_examples) texts.push_back(p.text);
  for (const auto& r : dev) texts.push_back(r.condition);
  for (const auto& r : test) texts.push_back(r.condition);
  // closed-world coverage regardless of which mutations were sampled
  texts.push_back("cat dog car ball cube tree house fish");
  texts.push_back("red green blue yellow gray black small large");
  texts.push_back("white dark grid background");
  texts.push_back("is instead change to on a the darken brighten it photo of that");
  return texts;
}

void write_benchmark_jsonl(const std::string& path, const std::vector<BenchmarkRecord>& records) {
  std::string body;
  for (const auto& r : records) {
    nlohmann::ordered_json j;
    j["query_id"] = r.query_id;
    j["reference_id"] = r.reference_id;
    j["condition"] = r.condition;
    j["targets"] = r.targets;
    body += j.dump();
    body += '\n';
  }
  write_text_file(path, body);
}

std::vector<BenchmarkRecord> read_benchmark_jsonl(const std::string& path) {
  std::vector<BenchmarkRecord> records;
  for (const std::string& line : read_jsonl_lines(path)) {
    const auto j = nlohmann::json::parse(line);
    BenchmarkRecord r;
    r.query_id = j.at("query_id").get<std::string>();
    r.reference_id = j.at("reference_id").get<std::string>();
    r.condition = j.at("condition").get<std::string>();
    r.targets = j.at("targets").get<std::vector<std::string>>();
    records.push_back(std::move(r));
  }
  return records;
}

void write_gallery_jsonl(const std::string& path, const std::vector<Scene>& scenes) {
  std::string body;
  for (const Scene& s : scenes) {
    nlohmann::ordered_json j;
    j["item_id"] = s.id();
    j["scene"] = scene_json(s);
    body += j.dump();
    body += '\n';
  }
  write_text_file(path, body);
}

std::vector<Scene> read_gallery_jsonl(const std::string& path) {
  std::vector<Scene> scenes;
  for (const std::string& line : read_jsonl_lines(path)) {
    const auto j = nlohmann::json::parse(line);
    Scene s = scene_from_json(j.at("scene"));
    if (j.at("item_id").get<std::string>() != s.id())
      throw Error("synth", "gallery item_id does not match its scene: " + line);
    scenes.push_back(s);
  }
  return scenes;
}

void write_pairs_jsonl(const std::string& path, const std::vector<PretrainExample>& pairs) {
  std::string body;
  for (const auto& p : pairs) {
    nlohmann::ordered_json j;
    j["scene"] = scene_json(p.scene);
    j["text"] = p.text;
    body += j.dump();
    body += '\n';
  }
  write_text_file(path, body);
}

std::vector<PretrainExample> read_pairs_jsonl(const std::string& path) {
  std::vector<PretrainExample> pairs;
  for (const std::string& line : read_jsonl_lines(path)) {
    const auto j = nlohmann::json::parse(line);
    pairs.push_back({scene_from_json(j.at("scene")), j.at("text").get<std::string>()});
  }
  return pairs;
}

}  // namespace lincir
