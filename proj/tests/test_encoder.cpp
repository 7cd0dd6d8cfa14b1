#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <fstream>

#include "doctest.h"
#include "lincir/encoder.hpp"
#include "lincir/lncr.hpp"
#include "test_util.hpp"

using namespace lincir;
using namespace lincir::testutil;

namespace {

EncoderConfig tiny_config(int64_t vocab_size) {
  EncoderConfig c;
  c.d_text = 16;
  c.n_layers_text = 1;
  c.n_heads = 2;
  c.max_seq_len = 16;
  c.d_image = 16;
  c.n_layers_image = 1;
  c.image_side = 8;
  c.patch_size = 4;
  c.d_joint = 16;
  c.vocab_size = vocab_size;
  return c;
}

Vocabulary demo_vocab() {
  return Vocabulary::from_corpus({"gray cat sleeps on a pillow", "a red dog runs"});
}

TokenSequence seq_with_spans(const Vocabulary& vocab, const std::string& caption,
                             std::vector<TokenSpan> spans) {
  TokenSequence s = tokenize(caption, vocab, 16);
  s.spans = std::move(spans);
  return s;
}

Tensor demo_image(const EncoderConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(cfg.image_side * cfg.image_side * 3);
  for (double& x : v) x = rng.uniform();
  return Tensor({cfg.image_side, cfg.image_side, 3}, std::move(v));
}

}  // namespace

TEST_CASE("config validation rejects bad geometry") {
  Vocabulary vocab = demo_vocab();
  EncoderConfig c = tiny_config(vocab.size());
  CHECK_NOTHROW(c.validate());
  EncoderConfig bad = c;
  bad.n_heads = 3;  // does not divide 16
  CHECK_THROWS_AS(bad.validate(), Error);
  bad = c;
  bad.patch_size = 3;
  CHECK_THROWS_AS(bad.validate(), Error);
  EncoderConfig round = EncoderConfig::from_json(c.to_json());
  CHECK(round.to_json() == c.to_json());
}

TEST_CASE("text encoding is deterministic with the right shape") {
  Vocabulary vocab = demo_vocab();
  DualEncoder enc = DualEncoder::init(tiny_config(vocab.size()), 7);
  TokenSequence seq = tokenize("gray cat sleeps on a pillow", vocab, 16);
  Tensor a = encode_text(enc, seq);
  Tensor b = encode_text(enc, seq);
  REQUIRE(a.shape() == std::vector<int64_t>{16});
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("injecting a span's own embedding row reproduces the plain encoding") {
  Vocabulary vocab = demo_vocab();
  DualEncoder enc = DualEncoder::init(tiny_config(vocab.size()), 7);
  // Single-word span: replacing it with exactly its embedding row must be
  // a no-op for the whole network.
  TokenSequence seq = seq_with_spans(vocab, "gray cat sleeps on a pillow", {{1, 2}});
  const int32_t token = seq.ids[1];
  std::vector<double> row(enc.config.d_text);
  for (int64_t j = 0; j < enc.config.d_text; ++j)
    row[j] = enc.token_embedding.at(token, j);
  Tensor plain = encode_text(enc, tokenize("gray cat sleeps on a pillow", vocab, 16));
  Tensor injected = encode_text(enc, seq, {{0, Tensor({enc.config.d_text}, row)}});
  for (int64_t i = 0; i < plain.numel(); ++i) CHECK(plain[i] == injected[i]);
}

TEST_CASE("span replacement shortens the sequence and changes the latent") {
  Vocabulary vocab = demo_vocab();
  DualEncoder enc = DualEncoder::init(tiny_config(vocab.size()), 7);
  // "gray cat" and "a pillow" spans -> 8 ids collapse to 6 rows.
  TokenSequence seq = seq_with_spans(vocab, "gray cat sleeps on a pillow", {{1, 3}, {5, 7}});
  Tape tape;
  Binding bind = Binding::frozen(tape);
  Rng rng(3);
  InjectionMap inj{{0, tape.constant(random_tensor({16}, rng, 0.1))},
                   {1, tape.constant(random_tensor({16}, rng, 0.1))}};
  NodeId h = text_hidden_states_node(tape, bind, enc, seq, inj);
  CHECK(tape.value(h).shape() == std::vector<int64_t>{6, 16});

  Tensor plain = encode_text(enc, tokenize("gray cat sleeps on a pillow", vocab, 16));
  NodeId pooled = encode_text_node(tape, bind, enc, seq, inj);
  bool differs = false;
  for (int64_t i = 0; i < plain.numel(); ++i)
    differs = differs || plain[i] != tape.value(pooled)[i];
  CHECK(differs);
}

TEST_CASE("causal attention leaves prefix hidden states unchanged") {
  Vocabulary vocab = demo_vocab();
  DualEncoder enc = DualEncoder::init(tiny_config(vocab.size()), 7);
  Tape tape;
  Binding bind = Binding::frozen(tape);
  NodeId short_h = text_hidden_states_node(tape, bind, enc, tokenize("gray cat sleeps", vocab, 16));
  NodeId long_h =
      text_hidden_states_node(tape, bind, enc, tokenize("gray cat sleeps on a pillow", vocab, 16));
  const Tensor& hs = tape.value(short_h);
  const Tensor& hl = tape.value(long_h);
  // Shared prefix: [BOS] + the three common words.
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 16; ++j) CHECK(hs.at(i, j) == hl.at(i, j));
}

TEST_CASE("gradient flows to the injected row but never to frozen weights") {
  Vocabulary vocab = demo_vocab();
  DualEncoder enc = DualEncoder::init(tiny_config(vocab.size()), 7);
  enc.frozen = true;
  TokenSequence seq = seq_with_spans(vocab, "gray cat sleeps on a pillow", {{1, 3}});
  Rng rng(5);
  Tensor row0 = random_tensor({16}, rng, 0.1);
  Tensor target = random_tensor({16}, rng);

  auto build = [&](Tape& t, const std::vector<NodeId>& in) {
    Binding bind = Binding::frozen(t);
    return t.mse(encode_text_node(t, bind, enc, seq, {{0, in[0]}}), t.constant(target));
  };
  check_grads("injected_row", build, {row0}, 1e-4);

  Tape tape;
  NodeId row = tape.leaf(row0);
  Binding bind = Binding::frozen(tape);
  NodeId loss = tape.mse(encode_text_node(tape, bind, enc, seq, {{0, row}}), tape.constant(target));
  GradMap grads = tape.backward(loss);
  CHECK(grads.size() == 1);
  CHECK(grads.contains(row));
}

TEST_CASE("encoder injection errors are structured") {
  Vocabulary vocab = demo_vocab();
  DualEncoder enc = DualEncoder::init(tiny_config(vocab.size()), 7);
  TokenSequence seq = seq_with_spans(vocab, "gray cat sleeps", {{1, 2}});
  Tape tape;
  Binding bind = Binding::frozen(tape);
  Rng rng(1);
  SUBCASE("span index out of range") {
    InjectionMap inj{{3, tape.constant(random_tensor({16}, rng))}};
    CHECK_THROWS_AS(encode_text_node(tape, bind, enc, seq, inj), Error);
  }
  SUBCASE("row width mismatch") {
    InjectionMap inj{{0, tape.constant(random_tensor({8}, rng))}};
    CHECK_THROWS_AS(encode_text_node(tape, bind, enc, seq, inj), Error);
  }
}

TEST_CASE("image patches land in the right rows") {
  EncoderConfig cfg = tiny_config(kFirstWordToken);
  // Mark one pixel per patch and look for it in the flattened rows.
  TensorBuilder img({8, 8, 3});
  img[((0 * 8) + 0) * 3 + 0] = 1.0;            // patch 0, first element
  img[((4 * 8) + 4) * 3 + 2] = 2.0;            // patch 3 (py=1, px=1), first pixel, chan 2
  Tensor patches = image_to_patches(cfg, img.build());
  REQUIRE(patches.shape() == std::vector<int64_t>{4, 48});
  CHECK(patches.at(0, 0) == 1.0);
  CHECK(patches.at(3, 2) == 2.0);
  CHECK_THROWS_AS(image_to_patches(cfg, Tensor::zeros({8, 8, 1})), Error);
}

TEST_CASE("image encoding is deterministic with the right shape") {
  Vocabulary vocab = demo_vocab();
  DualEncoder enc = DualEncoder::init(tiny_config(vocab.size()), 7);
  Tensor img = demo_image(enc.config, 4);
  Tensor a = encode_image(enc, img);
  Tensor b = encode_image(enc, img);
  REQUIRE(a.shape() == std::vector<int64_t>{16});
  for (int64_t i = 0; i < a.numel(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("frozen encoders refuse trainable bindings and pretraining") {
  Vocabulary vocab = demo_vocab();
  DualEncoder enc = DualEncoder::init(tiny_config(vocab.size()), 7);
  enc.frozen = true;
  CHECK_THROWS_AS(enc.trainable_params(), Error);
  std::vector<PretrainPair> pairs;
  for (uint64_t s = 0; s < 4; ++s)
    pairs.push_back({demo_image(enc.config, s), tokenize("a red dog runs", vocab, 16)});
  PretrainConfig pc;
  pc.steps = 1;
  pc.batch = 2;
  CHECK_THROWS_AS(pretrain_contrastive(enc, pairs, pc), Error);
}

TEST_CASE("contrastive loss at initialization is close to ln(batch)") {
  // Random weights rank nothing, so the batch softmax should be near
  // uniform and the symmetric loss near ln(B).
  std::vector<std::string> captions;
  for (int i = 0; i < 16; ++i)
    captions.push_back("object number " + std::to_string(i) + " on a plain background");
  Vocabulary vocab = Vocabulary::from_corpus(captions);
  EncoderConfig cfg;  // full desk-size geometry
  cfg.vocab_size = vocab.size();
  DualEncoder enc = DualEncoder::init(cfg, 11);

  const int64_t b = 16;
  Tape tape;
  Binding bind = Binding::frozen(tape);
  std::vector<NodeId> zt, zi;
  for (int64_t i = 0; i < b; ++i) {
    zt.push_back(encode_text_node(tape, bind, enc, tokenize(captions[i], vocab, cfg.max_seq_len)));
    zi.push_back(encode_image_node(tape, bind, enc, demo_image(cfg, 100 + i)));
  }
  NodeId logits = tape.mul_scalar(
      tape.matmul_nt(tape.l2_normalize_rows(tape.concat_rows(zi)),
                     tape.l2_normalize_rows(tape.concat_rows(zt))),
      tape.constant(Tensor::scalar(1.0 / 0.07)));
  const double loss = tape.value(tape.symmetric_diag_cross_entropy(logits)).item();
  const double expect = std::log(static_cast<double>(b));
  CHECK(std::abs(loss - expect) <= 0.10 * expect);
}

TEST_CASE("pretraining runs deterministically and moves the loss") {
  Vocabulary vocab = demo_vocab();
  DualEncoder base = DualEncoder::init(tiny_config(vocab.size()), 21);
  std::vector<PretrainPair> pairs;
  std::vector<std::string> captions{"gray cat sleeps on a pillow", "a red dog runs",
                                    "a red dog sleeps", "gray cat runs on a pillow",
                                    "a pillow on a dog", "gray dog sleeps"};
  for (size_t i = 0; i < captions.size(); ++i)
    pairs.push_back({demo_image(base.config, i), tokenize(captions[i], vocab, 16)});

  PretrainConfig pc;
  pc.steps = 6;
  pc.batch = 4;
  pc.seed = 5;

  DualEncoder e1 = base;
  DualEncoder e2 = base;
  PretrainResult r1 = pretrain_contrastive(e1, pairs, pc);
  PretrainResult r2 = pretrain_contrastive(e2, pairs, pc);
  REQUIRE(r1.loss_history.size() == 6);
  CHECK(r1.loss_history == r2.loss_history);
  for (double l : r1.loss_history) CHECK(std::isfinite(l));
  CHECK(r1.final_temperature > 0.0);
  // Both encoders took identical steps.
  for (int64_t i = 0; i < 16; ++i) CHECK(e1.text_out[i] == e2.text_out[i]);
}

TEST_CASE("checkpoint round trip preserves weights at f32 and freezes") {
  Vocabulary vocab = demo_vocab();
  DualEncoder enc = DualEncoder::init(tiny_config(vocab.size()), 13);
  enc.frozen = true;
  const std::string p1 = "/tmp/lincir_test_encoder_a.lncr";
  const std::string p2 = "/tmp/lincir_test_encoder_b.lncr";
  save_dual_encoder(p1, enc, vocab);
  LoadedEncoder loaded = load_dual_encoder(p1);
  CHECK(loaded.encoder.frozen);
  CHECK(loaded.vocab.size() == vocab.size());
  CHECK(loaded.encoder.config.to_json() == enc.config.to_json());
  for (int64_t i = 0; i < enc.text_out.numel(); ++i)
    CHECK(loaded.encoder.text_out[i] == static_cast<double>(static_cast<float>(enc.text_out[i])));
  save_dual_encoder(p2, loaded.encoder, loaded.vocab);
  // Save -> load -> save is byte identical.
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);
}
