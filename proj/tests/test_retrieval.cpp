#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "lincir/lncr.hpp"
#include "lincir/retrieval.hpp"
#include "lincir/synth.hpp"
#include "test_util.hpp"

using namespace lincir;
using namespace lincir::testutil;

namespace {

std::string tmp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "lincir_retrieval_tests";
  std::filesystem::create_directories(dir);
  return (dir / name).string();
}

Tensor unit_axis(int64_t d, int64_t axis) {
  std::vector<double> v(d, 0.0);
  v[axis] = 1.0;
  return Tensor({d}, std::move(v));
}

GalleryIndex random_index(int64_t n, int64_t d, uint64_t seed) {
  Rng rng(seed);
  Tensor rows = random_tensor({n, d}, rng);
  std::vector<std::string> ids;
  char buf[16];
  for (int64_t i = 0; i < n; ++i) {
    std::snprintf(buf, sizeof buf, "it_%02d", static_cast<int>(i));
    ids.push_back(buf);
  }
  return GalleryIndex(std::move(ids), rows);
}

struct EncoderFixture {
  Vocabulary vocab;
  DualEncoder enc;
  ProjectionModule phi;

  static EncoderFixture make() {
    SynthBenchmark bench = build_cir_benchmark(42);
    Vocabulary vocab = Vocabulary::from_corpus(bench.vocab_texts());
    EncoderConfig cfg;
    cfg.vocab_size = vocab.size();
    DualEncoder enc = DualEncoder::init(cfg, 1);
    enc.frozen = true;
    ProjectionModule phi = ProjectionModule::init(cfg.d_joint, cfg.d_text, 0.0, 2);
    return {std::move(vocab), std::move(enc), std::move(phi)};
  }
};

// independent AP for the oracle comparison
double brute_ap(const RankedResult& r, const std::set<std::string>& truth, int64_t k) {
  double ap = 0.0;
  int hits = 0;
  for (int64_t i = 0; i < std::min<int64_t>(k, r.items.size()); ++i) {
    bool rel = truth.count(r.items[i].item_id) > 0;
    if (rel) {
      ++hits;
      ap += static_cast<double>(hits) / static_cast<double>(i + 1);
    }
  }
  return ap / static_cast<double>(std::min<int64_t>(k, truth.size()));
}

}  // namespace

TEST_CASE("rank puts an exact gallery row first with score one") {
  GalleryIndex index = random_index(10, 8, 3);
  std::vector<double> row(index.latents().data() + 4 * 8, index.latents().data() + 5 * 8);
  Tensor query({8}, std::move(row));
  RankedResult r = rank("q", query, index);
  REQUIRE(r.items.size() == 10);
  CHECK(r.items[0].item_id == "it_04");
  CHECK(r.items[0].score == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("orthogonal query ties resolve by ascending id") {
  std::vector<std::string> ids = {"b", "a", "d", "c"};
  TensorBuilder rows({4, 8});
  for (int64_t i = 0; i < 4; ++i) rows.data()[i * 8 + i] = 1.0;
  GalleryIndex index(ids, rows.build());
  RankedResult r = rank("q", unit_axis(8, 7), index);
  REQUIRE(r.items.size() == 4);
  for (const auto& item : r.items) CHECK(item.score == 0.0);
  CHECK(r.items[0].item_id == "a");
  CHECK(r.items[1].item_id == "b");
  CHECK(r.items[2].item_id == "c");
  CHECK(r.items[3].item_id == "d");
}

TEST_CASE("rank agrees with a brute-force sort oracle") {
  for (uint64_t seed : {5u, 6u, 7u, 8u, 9u}) {
    CAPTURE(seed);
    GalleryIndex index = random_index(10, 6, seed);
    Rng rng(seed + 100);
    Tensor query = random_tensor({6}, rng);
    RankedResult r = rank("q", query, index);

    const Tensor qn = l2_normalized(query);
    std::vector<std::pair<double, std::string>> expected;
    for (int64_t i = 0; i < index.size(); ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < 6; ++j)
        dot += index.latents().data()[i * 6 + j] * qn.data()[j];
      expected.push_back({dot, index.ids()[i]});
    }
    std::sort(expected.begin(), expected.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    REQUIRE(r.items.size() == expected.size());
    for (size_t i = 0; i < expected.size(); ++i) {
      CHECK(r.items[i].item_id == expected[i].second);
      CHECK(r.items[i].score == doctest::Approx(expected[i].first).epsilon(1e-12));
    }
  }
}

TEST_CASE("rank is invariant to positive query rescaling and honors exclusion") {
  GalleryIndex index = random_index(12, 8, 11);
  Rng rng(12);
  Tensor query = random_tensor({8}, rng);
  RankedResult base = rank("q", query, index);
  for (double scale : {1e-3, 2.0, 1e3}) {
    std::vector<double> v(query.data(), query.data() + 8);
    for (double& x : v) x *= scale;
    RankedResult scaled = rank("q", Tensor({8}, std::move(v)), index);
    REQUIRE(scaled.items.size() == base.items.size());
    for (size_t i = 0; i < base.items.size(); ++i)
      CHECK(scaled.items[i].item_id == base.items[i].item_id);
  }

  RankedResult excl = rank("q", query, index, std::string("it_03"));
  CHECK(excl.items.size() == 11);
  for (const auto& item : excl.items) CHECK(item.item_id != "it_03");
}

TEST_CASE("index construction rejects malformed inputs") {
  CHECK_THROWS_AS(GalleryIndex({"a", "a"}, Tensor::full({2, 4}, 1.0)), Error);
  CHECK_THROWS_AS(GalleryIndex({"a", "b"}, Tensor::zeros({2, 4})), Error);
  CHECK_THROWS_AS(GalleryIndex({"a"}, Tensor::full({2, 4}, 1.0)), Error);
  CHECK_THROWS_AS(GalleryIndex({}, Tensor::zeros({0, 4})), Error);
  GalleryIndex index = random_index(4, 8, 1);
  Rng rng(2);
  CHECK_THROWS_AS(rank("q", random_tensor({6}, rng), index), Error);
  CHECK_THROWS_AS(rank("q", Tensor::zeros({8}), index), Error);
}

TEST_CASE("recall_at_k hand cases") {
  std::vector<RankedResult> results(1);
  results[0].query_id = "q";
  results[0].items = {{"a", 0.9}, {"b", 0.8}, {"c", 0.7}};
  TruthMap truths;

  truths["q"] = {"a"};
  CHECK(recall_at_k(results, truths, 1) == 1.0);

  truths["q"] = {"c"};
  CHECK(recall_at_k(results, truths, 2) == 0.0);
  CHECK(recall_at_k(results, truths, 3) == 1.0);

  CHECK_THROWS_AS(recall_at_k(results, truths, 0), Error);
  truths.erase("q");
  CHECK_THROWS_AS(recall_at_k(results, truths, 1), Error);
  truths["q"] = {};
  CHECK_THROWS_AS(recall_at_k(results, truths, 1), Error);
  CHECK_THROWS_AS(recall_at_k({}, truths, 1), Error);
}

TEST_CASE("map_at_k worked example and edges") {
  std::vector<RankedResult> results(1);
  results[0].query_id = "q";
  results[0].items = {{"a", 0.9}, {"b", 0.8}, {"c", 0.7}, {"d", 0.6}, {"e", 0.5}};
  TruthMap truths;

  // positives at ranks 1 and 3, |GT|=2, k=5 -> (1/2)(1/1 + 2/3)
  truths["q"] = {"a", "c"};
  CHECK(map_at_k(results, truths, 5) == doctest::Approx(5.0 / 6.0).epsilon(1e-9));

  truths["q"] = {"a", "b"};
  CHECK(map_at_k(results, truths, 5) == 1.0);

  truths["q"] = {"e"};
  CHECK(map_at_k(results, truths, 3) == 0.0);

  CHECK_THROWS_AS(map_at_k(results, truths, 0), Error);
}

TEST_CASE("metrics agree with brute-force oracles on random multi-positive rankings") {
  Rng rng(99);
  std::vector<RankedResult> results;
  TruthMap truths;
  const int64_t n_items = 30;
  std::vector<std::string> ids;
  char buf[16];
  for (int64_t i = 0; i < n_items; ++i) {
    std::snprintf(buf, sizeof buf, "it_%02d", static_cast<int>(i));
    ids.push_back(buf);
  }
  for (int q = 0; q < 200; ++q) {
    std::snprintf(buf, sizeof buf, "q_%03d", q);
    std::vector<double> scores(n_items);
    for (double& s : scores) s = rng.gaussian();
    results.push_back(rank_scores(buf, ids, scores));
    std::set<std::string> truth;
    const int64_t n_truth = 1 + rng.uniform_int(3);
    while (static_cast<int64_t>(truth.size()) < n_truth)
      truth.insert(ids[rng.uniform_int(n_items)]);
    truths[buf] = truth;
  }

  for (int64_t k : {1, 5, 10}) {
    CAPTURE(k);
    int hits = 0;
    double ap_sum = 0.0;
    for (const auto& r : results) {
      const auto& truth = truths[r.query_id];
      bool hit = false;
      for (int64_t i = 0; i < std::min<int64_t>(k, r.items.size()); ++i)
        hit = hit || truth.count(r.items[i].item_id) > 0;
      hits += hit ? 1 : 0;
      ap_sum += brute_ap(r, truth, k);
    }
    CHECK(std::abs(recall_at_k(results, truths, k) - hits / 200.0) <= 1e-12);
    CHECK(std::abs(map_at_k(results, truths, k) - ap_sum / 200.0) <= 1e-12);
  }

  // recall non-decreasing in k; map within [0,1]
  double prev = 0.0;
  for (int64_t k = 1; k <= n_items; ++k) {
    const double rec = recall_at_k(results, truths, k);
    CHECK(rec >= prev);
    prev = rec;
    const double m = map_at_k(results, truths, k);
    CHECK(m >= 0.0);
    CHECK(m <= 1.0);
  }

  // single-truth benchmark: map@1 == recall@1 exactly
  TruthMap single;
  for (auto& [q, t] : truths) single[q] = {*t.begin()};
  CHECK(map_at_k(results, single, 1) == recall_at_k(results, single, 1));
}

TEST_CASE("modality gap hand geometry") {
  std::vector<Tensor> a = {unit_axis(4, 0)};
  std::vector<Tensor> b = {unit_axis(4, 1)};
  CHECK(modality_gap(a, b) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
  CHECK(modality_gap(a, a) == 0.0);
  CHECK_THROWS_AS(modality_gap({}, a), Error);
  CHECK_THROWS_AS(modality_gap(a, {}), Error);

  // scaling any latent does not move the gap: centroids use normalized vectors
  std::vector<Tensor> scaled = {Tensor::full({4}, 0.0)};
  std::vector<double> v(4, 0.0);
  v[0] = 17.0;
  scaled[0] = Tensor({4}, std::move(v));
  CHECK(modality_gap(scaled, b) == doctest::Approx(std::sqrt(2.0)).epsilon(1e-12));
}

TEST_CASE("modality gap is invariant under a common rotation") {
  const int64_t d = 8;
  Rng rng(5);
  // random orthogonal matrix by Gram-Schmidt on gaussian rows
  std::vector<std::vector<double>> q;
  for (int64_t i = 0; i < d; ++i) {
    std::vector<double> row(d);
    for (double& x : row) x = rng.gaussian();
    for (const auto& prev : q) {
      double dot = 0.0;
      for (int64_t j = 0; j < d; ++j) dot += row[j] * prev[j];
      for (int64_t j = 0; j < d; ++j) row[j] -= dot * prev[j];
    }
    double norm = l2_norm(row.data(), d);
    for (double& x : row) x /= norm;
    q.push_back(row);
  }
  auto rotate = [&q, d](const Tensor& t) {
    std::vector<double> out(d, 0.0);
    for (int64_t i = 0; i < d; ++i)
      for (int64_t j = 0; j < d; ++j) out[i] += q[i][j] * t.data()[j];
    return Tensor({d}, std::move(out));
  };

  std::vector<Tensor> texts, images, texts_rot, images_rot;
  for (int i = 0; i < 6; ++i) texts.push_back(random_tensor({d}, rng));
  for (int i = 0; i < 9; ++i) images.push_back(random_tensor({d}, rng));
  for (const auto& t : texts) texts_rot.push_back(rotate(t));
  for (const auto& t : images) images_rot.push_back(rotate(t));

  CHECK(std::abs(modality_gap(texts, images) - modality_gap(texts_rot, images_rot)) <= 1e-9);
}

TEST_CASE("prompt template validation and fill") {
  PromptTemplate t = PromptTemplate::parse("a photo of [$] that [cond]");
  CHECK(t.fill("is red instead") == "a photo of [$] that is red instead");

  CHECK_THROWS_AS(PromptTemplate::parse("a photo that [cond]"), Error);
  CHECK_THROWS_AS(PromptTemplate::parse("a photo of [$]"), Error);
  CHECK_THROWS_AS(PromptTemplate::parse("[$] and [$] that [cond]"), Error);
  CHECK_THROWS_AS(PromptTemplate::parse("[$] that [cond] or [cond]"), Error);
}

TEST_CASE("composed queries are unit, deterministic, and condition-sensitive") {
  EncoderFixture fx = EncoderFixture::make();
  PromptTemplate tmpl = PromptTemplate::parse("a photo of [$] that [cond]");
  Tensor image = render_scene(scene_from_id("cat_red_small_white"));

  Tensor q1 = compose_query(fx.enc, fx.vocab, fx.phi, image, "is blue instead", tmpl);
  CHECK(std::abs(l2_norm(q1.data(), q1.numel()) - 1.0) <= 1e-12);

  Tensor q2 = compose_query(fx.enc, fx.vocab, fx.phi, image, "is blue instead", tmpl);
  bool identical = true;
  for (int64_t j = 0; j < q1.numel(); ++j) identical = identical && q1.data()[j] == q2.data()[j];
  CHECK(identical);

  Tensor q3 = compose_query(fx.enc, fx.vocab, fx.phi, image, "is green instead", tmpl);
  double cos = 0.0;
  for (int64_t j = 0; j < q1.numel(); ++j) cos += q1.data()[j] * q3.data()[j];
  CHECK(cos < 1.0 - 1e-9);

  // a different reference image moves the query too
  Tensor other = render_scene(scene_from_id("dog_gray_large_dark"));
  Tensor q4 = compose_query(fx.enc, fx.vocab, fx.phi, other, "is blue instead", tmpl);
  cos = 0.0;
  for (int64_t j = 0; j < q1.numel(); ++j) cos += q1.data()[j] * q4.data()[j];
  CHECK(cos < 1.0 - 1e-9);

  std::string long_cond = "is blue instead";
  for (int i = 0; i < 30; ++i) long_cond += " and more";
  CHECK_THROWS_AS(compose_query(fx.enc, fx.vocab, fx.phi, image, long_cond, tmpl), Error);
  CHECK_THROWS_AS(compose_query(fx.enc, fx.vocab, fx.phi, image, "has [$] inside", tmpl), Error);
}

TEST_CASE("baseline queries are unit and deterministic") {
  EncoderFixture fx = EncoderFixture::make();
  Tensor image = render_scene(scene_from_id("ball_green_large_grid"));

  Tensor t1 = text_only_query(fx.enc, fx.vocab, "is red instead");
  Tensor t2 = text_only_query(fx.enc, fx.vocab, "is red instead");
  Tensor i1 = image_only_query(fx.enc, image);
  CHECK(std::abs(l2_norm(t1.data(), t1.numel()) - 1.0) <= 1e-12);
  CHECK(std::abs(l2_norm(i1.data(), i1.numel()) - 1.0) <= 1e-12);
  for (int64_t j = 0; j < t1.numel(); ++j) CHECK(t1.data()[j] == t2.data()[j]);
}

TEST_CASE("gallery index round trips through its container") {
  GalleryIndex index = random_index(6, 8, 21);
  const std::string path = tmp_path("index.lncr");
  save_gallery_index(path, index);
  GalleryIndex back = load_gallery_index(path);
  CHECK(back.ids() == index.ids());
  REQUIRE(back.latents().same_shape(index.latents()));
  for (int64_t i = 0; i < back.latents().numel(); ++i)
    CHECK(back.latents().data()[i] ==
          doctest::Approx(index.latents().data()[i]).epsilon(1e-6));

  Rng rng(3);
  Tensor query = random_tensor({8}, rng);
  RankedResult a = rank("q", query, index);
  RankedResult b = rank("q", query, back);
  for (size_t i = 0; i < a.items.size(); ++i) CHECK(a.items[i].item_id == b.items[i].item_id);

  const std::string other = tmp_path("not_index.lncr");
  nlohmann::ordered_json cfg;
  cfg["format"] = "projection";
  LncrWriter w(cfg);
  w.write(other);
  CHECK_THROWS_AS(load_gallery_index(other), CorruptFileError);
  std::remove(path.c_str());
  std::remove(other.c_str());
}
