#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lincir/rng.hpp"
#include "lincir/tensor.hpp"

namespace lincir {

// Closed attribute world: 8 * 6 * 2 * 3 = 288 scenes. Every retrieval truth
// set is computable by exhaustive enumeration, so the benchmark needs no
// annotation and every metric has a brute-force oracle.
enum class ObjectKind { Cat, Dog, Car, Ball, Cube, Tree, House, Fish };
enum class ColorKind { Red, Green, Blue, Yellow, Gray, Black };
enum class SizeKind { Small, Large };
enum class BackgroundKind { White, Dark, Grid };

inline constexpr int kObjectCount = 8;
inline constexpr int kColorCount = 6;
inline constexpr int kSizeCount = 2;
inline constexpr int kBackgroundCount = 3;

const char* object_name(ObjectKind o);
const char* color_name(ColorKind c);
const char* size_name(SizeKind s);
const char* background_name(BackgroundKind b);

struct Scene {
  ObjectKind object = ObjectKind::Cat;
  ColorKind color = ColorKind::Red;
  SizeKind size = SizeKind::Small;
  BackgroundKind background = BackgroundKind::White;

  // "cat_red_small_white"; unique per scene and stable across runs.
  std::string id() const;
  bool operator==(const Scene&) const = default;
};

// Fixed enumeration order: object, then color, then size, then background.
std::vector<Scene> all_scenes();
Scene scene_from_id(const std::string& id);

// Deterministic raster, values in [0,1]: background fill, then a fixed
// per-object glyph in the scene color, scaled by the size attribute.
Tensor render_scene(const Scene& scene, int64_t side = 24);

// Paraphrase set; index 0 is the canonical "a {size} {color} {object} on a
// {background} background". Every template yields >= 2 keyword spans under
// the shipped lexicon.
const std::vector<std::string>& caption_templates();
std::string caption_for(const Scene& scene, size_t template_idx);
std::string caption_for(const Scene& scene, Rng& rng);

struct BenchmarkRecord {
  std::string query_id;
  std::string reference_id;
  std::string condition;
  std::vector<std::string> targets;  // sorted scene ids, never contains reference_id
  bool operator==(const BenchmarkRecord&) const = default;
};

// Image is the render of `scene`; text is a caption or a modification
// sentence shaped like the inference prompt.
struct PretrainExample {
  Scene scene;
  std::string text;
  bool operator==(const PretrainExample&) const = default;
};

struct SynthBenchmark {
  std::vector<Scene> train_scenes;    // 216, disjoint from holdout
  std::vector<Scene> holdout_scenes;  // 72, references for dev/test queries
  // Projection-training captions: two paraphrases per train scene plus a few
  // keyword-free lines that exercise the skip path.
  std::vector<std::string> train_corpus;
  std::vector<PretrainExample> pretrain_examples;  // caption + modification pairs
  std::vector<PretrainExample> holdout_examples;   // held-out caption pairs
  std::vector<BenchmarkRecord> dev;                // 72 queries, 2 positives each
  std::vector<BenchmarkRecord> test;               // 72 queries, 2 positives each
  std::vector<Scene> gallery;                      // all 288 scenes

  // Every text line the world can produce, for vocabulary building.
  std::vector<std::string> vocab_texts() const;
};

SynthBenchmark build_cir_benchmark(uint64_t split_seed);

// Parses a condition sentence back into the mutated attribute tuple. The
// returned scene's size is the reference's and carries no meaning: truth
// sets leave size free.
Scene apply_condition(const Scene& reference, const std::string& condition);

// All scene ids matching (object, color, background) of the prototype, any
// size; sorted ascending.
std::vector<std::string> scenes_matching_attributes(const Scene& proto);

// Attribute-match count (0..3, size ignored) per gallery scene; the
// upper-bound oracle retriever ranks by this.
std::vector<double> attribute_match_scores(const Scene& proto, const std::vector<Scene>& gallery);

// JSON Lines files.
void write_benchmark_jsonl(const std::string& path, const std::vector<BenchmarkRecord>& records);
std::vector<BenchmarkRecord> read_benchmark_jsonl(const std::string& path);
void write_gallery_jsonl(const std::string& path, const std::vector<Scene>& scenes);
std::vector<Scene> read_gallery_jsonl(const std::string& path);
void write_pairs_jsonl(const std::string& path, const std::vector<PretrainExample>& pairs);
std::vector<PretrainExample> read_pairs_jsonl(const std::string& path);

}  // namespace lincir
