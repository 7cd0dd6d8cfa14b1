#include "lincir/encoder.hpp"

#include <algorithm>
#include <cmath>

#include "lincir/lncr.hpp"

namespace lincir {

void EncoderConfig::validate() const {
  if (d_text <= 0 || d_image <= 0 || d_joint <= 0)
    throw Error("encoder", "dimensions must be positive");
  if (n_layers_text <= 0 || n_layers_image <= 0 || n_heads <= 0)
    throw Error("encoder", "layer and head counts must be positive");
  if (d_text % n_heads != 0 || d_image % n_heads != 0)
    throw Error("encoder", "head count must divide both widths");
  if (max_seq_len < 3) throw Error("encoder", "max_seq_len must fit [BOS] w [EOS]");
  if (patch_size <= 0 || image_side % patch_size != 0)
    throw Error("encoder", "patch size must tile the image");
  if (vocab_size < kFirstWordToken) throw Error("encoder", "vocab_size below reserved range");
}

nlohmann::ordered_json EncoderConfig::to_json() const {
  nlohmann::ordered_json j;
  j["d_text"] = d_text;
  j["n_layers_text"] = n_layers_text;
  j["n_heads"] = n_heads;
  j["max_seq_len"] = max_seq_len;
  j["d_image"] = d_image;
  j["n_layers_image"] = n_layers_image;
  j["image_side"] = image_side;
  j["patch_size"] = patch_size;
  j["d_joint"] = d_joint;
  j["vocab_size"] = vocab_size;
  return j;
}

EncoderConfig EncoderConfig::from_json(const nlohmann::ordered_json& j) {
  EncoderConfig c;
  c.d_text = j.at("d_text").get<int64_t>();
  c.n_layers_text = j.at("n_layers_text").get<int64_t>();
  c.n_heads = j.at("n_heads").get<int64_t>();
  c.max_seq_len = j.at("max_seq_len").get<int64_t>();
  c.d_image = j.at("d_image").get<int64_t>();
  c.n_layers_image = j.at("n_layers_image").get<int64_t>();
  c.image_side = j.at("image_side").get<int64_t>();
  c.patch_size = j.at("patch_size").get<int64_t>();
  c.d_joint = j.at("d_joint").get<int64_t>();
  c.vocab_size = j.at("vocab_size").get<int64_t>();
  c.validate();
  return c;
}

namespace {

Tensor randn(std::vector<int64_t> shape, double std, Rng& rng) {
  std::vector<double> v(Tensor::count(shape));
  for (double& x : v) x = std * rng.gaussian();
  return Tensor(std::move(shape), std::move(v));
}

AttentionBlockParams init_block(int64_t d, Rng& rng) {
  AttentionBlockParams b;
  const double ws = 1.0 / std::sqrt(static_cast<double>(d));
  b.ln1_gamma = Tensor::full({d}, 1.0);
  b.ln1_beta = Tensor::zeros({d});
  b.wq = randn({d, d}, ws, rng);
  b.bq = Tensor::zeros({d});
  b.wk = randn({d, d}, ws, rng);
  b.bk = Tensor::zeros({d});
  b.wv = randn({d, d}, ws, rng);
  b.bv = Tensor::zeros({d});
  b.wo = randn({d, d}, ws, rng);
  b.bo = Tensor::zeros({d});
  b.ln2_gamma = Tensor::full({d}, 1.0);
  b.ln2_beta = Tensor::zeros({d});
  b.w_up = randn({d, 4 * d}, ws, rng);
  b.b_up = Tensor::zeros({4 * d});
  b.w_down = randn({4 * d, d}, 0.5 * ws, rng);
  b.b_down = Tensor::zeros({d});
  return b;
}

void collect_block(ParamSet& ps, const std::string& prefix, AttentionBlockParams& b) {
  ps.add(prefix + ".ln1.gamma", &b.ln1_gamma);
  ps.add(prefix + ".ln1.beta", &b.ln1_beta);
  ps.add(prefix + ".attn.wq", &b.wq);
  ps.add(prefix + ".attn.bq", &b.bq);
  ps.add(prefix + ".attn.wk", &b.wk);
  ps.add(prefix + ".attn.bk", &b.bk);
  ps.add(prefix + ".attn.wv", &b.wv);
  ps.add(prefix + ".attn.bv", &b.bv);
  ps.add(prefix + ".attn.wo", &b.wo);
  ps.add(prefix + ".attn.bo", &b.bo);
  ps.add(prefix + ".ln2.gamma", &b.ln2_gamma);
  ps.add(prefix + ".ln2.beta", &b.ln2_beta);
  ps.add(prefix + ".mlp.w_up", &b.w_up);
  ps.add(prefix + ".mlp.b_up", &b.b_up);
  ps.add(prefix + ".mlp.w_down", &b.w_down);
  ps.add(prefix + ".mlp.b_down", &b.b_down);
}

// Pre-LN block: x + attn(ln1(x)), then h + mlp(ln2(h)).
NodeId block_node(Tape& t, Binding& bind, const AttentionBlockParams& p, NodeId x,
                  int64_t n_heads, bool causal) {
  const int64_t d = t.value(x).dim(1);
  const int64_t dh = d / n_heads;
  NodeId ln1 = t.layer_norm(x, bind(p.ln1_gamma), bind(p.ln1_beta));
  NodeId q = t.add_rowvec(t.matmul(ln1, bind(p.wq)), bind(p.bq));
  NodeId k = t.add_rowvec(t.matmul(ln1, bind(p.wk)), bind(p.bk));
  NodeId v = t.add_rowvec(t.matmul(ln1, bind(p.wv)), bind(p.bv));
  std::vector<NodeId> heads;
  heads.reserve(n_heads);
  for (int64_t h = 0; h < n_heads; ++h) {
    NodeId qh = t.slice_cols(q, h * dh, (h + 1) * dh);
    NodeId kh = t.slice_cols(k, h * dh, (h + 1) * dh);
    NodeId vh = t.slice_cols(v, h * dh, (h + 1) * dh);
    heads.push_back(t.softmax_attention(qh, kh, vh, causal));
  }
  NodeId att = t.concat_cols(heads);
  NodeId attn_out = t.add_rowvec(t.matmul(att, bind(p.wo)), bind(p.bo));
  NodeId h1 = t.add(x, attn_out);
  NodeId ln2 = t.layer_norm(h1, bind(p.ln2_gamma), bind(p.ln2_beta));
  NodeId up = t.gelu(t.add_rowvec(t.matmul(ln2, bind(p.w_up)), bind(p.b_up)));
  NodeId mlp = t.add_rowvec(t.matmul(up, bind(p.w_down)), bind(p.b_down));
  return t.add(h1, mlp);
}

}  // namespace

DualEncoder DualEncoder::init(const EncoderConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  DualEncoder e;
  e.config = cfg;
  e.token_embedding = randn({cfg.vocab_size, cfg.d_text}, 0.02, rng);
  e.text_pos = randn({cfg.max_seq_len, cfg.d_text}, 0.01, rng);
  for (int64_t i = 0; i < cfg.n_layers_text; ++i) e.text_blocks.push_back(init_block(cfg.d_text, rng));
  e.text_ln_gamma = Tensor::full({cfg.d_text}, 1.0);
  e.text_ln_beta = Tensor::zeros({cfg.d_text});
  e.text_out = randn({cfg.d_text, cfg.d_joint}, 1.0 / std::sqrt(static_cast<double>(cfg.d_text)), rng);
  e.patch_proj = randn({cfg.patch_dim(), cfg.d_image},
                       1.0 / std::sqrt(static_cast<double>(cfg.patch_dim())), rng);
  e.patch_bias = Tensor::zeros({cfg.d_image});
  e.image_pos = randn({cfg.n_patches(), cfg.d_image}, 0.01, rng);
  for (int64_t i = 0; i < cfg.n_layers_image; ++i) e.image_blocks.push_back(init_block(cfg.d_image, rng));
  e.image_ln_gamma = Tensor::full({cfg.d_image}, 1.0);
  e.image_ln_beta = Tensor::zeros({cfg.d_image});
  e.image_out = randn({cfg.d_image, cfg.d_joint}, 1.0 / std::sqrt(static_cast<double>(cfg.d_image)), rng);
  return e;
}

ParamSet DualEncoder::named_tensors() {
  ParamSet ps;
  ps.add("text.token_embedding", &token_embedding);
  ps.add("text.pos", &text_pos);
  for (size_t i = 0; i < text_blocks.size(); ++i)
    collect_block(ps, "text.block" + std::to_string(i), text_blocks[i]);
  ps.add("text.ln_f.gamma", &text_ln_gamma);
  ps.add("text.ln_f.beta", &text_ln_beta);
  ps.add("text.out", &text_out);
  ps.add("image.patch_proj", &patch_proj);
  ps.add("image.patch_bias", &patch_bias);
  ps.add("image.pos", &image_pos);
  for (size_t i = 0; i < image_blocks.size(); ++i)
    collect_block(ps, "image.block" + std::to_string(i), image_blocks[i]);
  ps.add("image.ln_f.gamma", &image_ln_gamma);
  ps.add("image.ln_f.beta", &image_ln_beta);
  ps.add("image.out", &image_out);
  return ps;
}

ParamSet DualEncoder::trainable_params() {
  if (frozen)
    throw Error("encoder", "encoder is frozen; its weights cannot enter a trainable binding");
  return named_tensors();
}

NodeId text_hidden_states_node(Tape& tape, Binding& bind, const DualEncoder& enc,
                               const TokenSequence& seq, const InjectionMap& injected) {
  const EncoderConfig& cfg = enc.config;
  if (seq.ids.size() < 2 || seq.ids.front() != kBosToken || seq.ids.back() != kEosToken)
    throw Error("encoder", "token sequence must be [BOS] ... [EOS]");
  for (const auto& [idx, node] : injected) {
    if (idx < 0 || idx >= static_cast<int>(seq.spans.size()))
      throw Error("encoder", "injected span index out of range: " + std::to_string(idx));
    const Tensor& row = tape.value(node);
    if (row.rank() != 1 || row.dim(0) != cfg.d_text)
      throw Error("encoder", "injected row width mismatch: expected [" +
                                 std::to_string(cfg.d_text) + "], got " + row.shape_string());
  }

  // Assemble embedding rows: contiguous token runs become one lookup node,
  // injected spans contribute their row directly.
  std::vector<NodeId> parts;
  std::vector<int64_t> pending;
  auto flush = [&] {
    if (!pending.empty()) {
      parts.push_back(tape.gather_rows(bind(enc.token_embedding), pending));
      pending.clear();
    }
  };
  int64_t effective_len = 0;
  size_t span_idx = 0;
  for (int64_t i = 0; i < seq.length();) {
    if (span_idx < seq.spans.size() && seq.spans[span_idx].begin == i) {
      auto inj = injected.find(static_cast<int>(span_idx));
      if (inj != injected.end()) {
        flush();
        parts.push_back(inj->second);
        ++effective_len;
      } else {
        for (int32_t j = seq.spans[span_idx].begin; j < seq.spans[span_idx].end; ++j)
          pending.push_back(seq.ids[j]);
        effective_len += seq.spans[span_idx].end - seq.spans[span_idx].begin;
      }
      i = seq.spans[span_idx].end;
      ++span_idx;
    } else {
      pending.push_back(seq.ids[i]);
      ++effective_len;
      ++i;
    }
  }
  flush();
  if (effective_len > cfg.max_seq_len)
    throw Error("encoder", "sequence exceeds max length after span replacement");

  NodeId x = tape.concat_rows(parts);
  NodeId pos = tape.slice_rows(bind(enc.text_pos), 0, effective_len);
  x = tape.add(x, pos);
  for (const AttentionBlockParams& blk : enc.text_blocks)
    x = block_node(tape, bind, blk, x, cfg.n_heads, /*causal=*/true);
  return tape.layer_norm(x, bind(enc.text_ln_gamma), bind(enc.text_ln_beta));
}

NodeId encode_text_node(Tape& tape, Binding& bind, const DualEncoder& enc,
                        const TokenSequence& seq, const InjectionMap& injected) {
  NodeId h = text_hidden_states_node(tape, bind, enc, seq, injected);
  NodeId eos = tape.select_row(h, tape.value(h).dim(0) - 1);
  return tape.vecmat(eos, bind(enc.text_out));
}

Tensor image_to_patches(const EncoderConfig& cfg, const Tensor& image) {
  if (image.shape() != std::vector<int64_t>{cfg.image_side, cfg.image_side, 3})
    throw Error("encoder", "image shape mismatch: got " + image.shape_string());
  const int64_t ps = cfg.patch_size, per_side = cfg.patches_per_side();
  TensorBuilder out({cfg.n_patches(), cfg.patch_dim()});
  int64_t row = 0;
  for (int64_t py = 0; py < per_side; ++py) {
    for (int64_t px = 0; px < per_side; ++px) {
      int64_t col = 0;
      for (int64_t y = 0; y < ps; ++y)
        for (int64_t x = 0; x < ps; ++x)
          for (int64_t c = 0; c < 3; ++c)
            out.at(row, col++) = image[((py * ps + y) * cfg.image_side + (px * ps + x)) * 3 + c];
      ++row;
    }
  }
  return out.build();
}

NodeId encode_image_node(Tape& tape, Binding& bind, const DualEncoder& enc, const Tensor& image) {
  const EncoderConfig& cfg = enc.config;
  NodeId patches = tape.constant(image_to_patches(cfg, image));
  NodeId x = tape.add_rowvec(tape.matmul(patches, bind(enc.patch_proj)), bind(enc.patch_bias));
  x = tape.add(x, bind(enc.image_pos));
  for (const AttentionBlockParams& blk : enc.image_blocks)
    x = block_node(tape, bind, blk, x, cfg.n_heads, /*causal=*/false);
  x = tape.layer_norm(x, bind(enc.image_ln_gamma), bind(enc.image_ln_beta));
  return tape.vecmat(tape.mean_rows(x), bind(enc.image_out));
}

Tensor encode_text(const DualEncoder& enc, const TokenSequence& seq,
                   const std::map<int, Tensor>& injected) {
  Tape tape;
  Binding bind = Binding::frozen(tape);
  InjectionMap nodes;
  for (const auto& [idx, row] : injected) nodes[idx] = tape.constant(row);
  return tape.value(encode_text_node(tape, bind, enc, seq, nodes));
}

Tensor encode_image(const DualEncoder& enc, const Tensor& image) {
  Tape tape;
  Binding bind = Binding::frozen(tape);
  return tape.value(encode_image_node(tape, bind, enc, image));
}

PretrainResult pretrain_contrastive(DualEncoder& enc, const std::vector<PretrainPair>& pairs,
                                    const PretrainConfig& cfg) {
  if (pairs.empty()) throw Error("encoder", "no pretraining pairs");
  if (cfg.batch < 2) throw Error("encoder", "contrastive batch needs at least 2 pairs");
  if (cfg.batch > static_cast<int64_t>(pairs.size()))
    throw Error("encoder", "batch exceeds pair count");

  Tensor log_scale = Tensor::scalar(std::log(1.0 / cfg.init_temperature));
  ParamSet ps = enc.trainable_params();
  ps.add("logit_scale", &log_scale);
  AdamW opt({cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay}, ps);

  Rng rng(cfg.seed);
  std::vector<int64_t> order(pairs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);

  // Cyclic roll keeps pixel values exact and needs no fill rule; glyphs stay
  // clear of the border at the default shift budget. One pass applies roll,
  // mirror, brightness and pixel noise together. Rng draws happen in a fixed
  // order per member regardless of which augmentations are enabled.
  auto augment = [&cfg](const Tensor& img, Rng& rng) {
    const int64_t span = 2 * cfg.aug_max_shift + 1;
    const int64_t dx = cfg.aug_max_shift > 0 ? rng.uniform_int(span) - cfg.aug_max_shift : 0;
    const int64_t dy = cfg.aug_max_shift > 0 ? rng.uniform_int(span) - cfg.aug_max_shift : 0;
    const bool flip = cfg.aug_flip && rng.uniform_int(2) == 1;
    const double bright =
        cfg.aug_brightness > 0 ? rng.uniform(1.0 - cfg.aug_brightness, 1.0 + cfg.aug_brightness)
                               : 1.0;
    const int64_t side = img.shape()[0];
    const int64_t ch = img.shape()[2];
    TensorBuilder out(img.shape());
    for (int64_t y = 0; y < side; ++y) {
      const int64_t sy = ((y - dy) % side + side) % side;
      for (int64_t x = 0; x < side; ++x) {
        int64_t sx = ((x - dx) % side + side) % side;
        if (flip) sx = side - 1 - sx;
        for (int64_t c = 0; c < ch; ++c) {
          double v = img[(sy * side + sx) * ch + c] * bright;
          if (cfg.aug_pixel_noise > 0) v += cfg.aug_pixel_noise * rng.gaussian();
          out.data()[(y * side + x) * ch + c] = std::clamp(v, 0.0, 1.0);
        }
      }
    }
    return out.build();
  };
  const bool any_aug = cfg.aug_max_shift > 0 || cfg.aug_flip || cfg.aug_brightness > 0 ||
                       cfg.aug_pixel_noise > 0;

  // Warmup then cosine decay. Some caption/condition texts match several
  // images equally well, so the loss has an irreducible floor; without decay
  // the iterate orbits the optimum instead of settling once the temperature
  // sharpens.
  const int64_t warmup = std::min<int64_t>(cfg.steps / 20 + 1, 100);
  auto lr_at = [&](int64_t step) {
    if (step < warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double progress = static_cast<double>(step - warmup) /
                            static_cast<double>(std::max<int64_t>(1, cfg.steps - warmup));
    return 0.5 * cfg.lr * (1.0 + std::cos(3.14159265358979323846 * progress));
  };

  PretrainResult result;
  for (int64_t step = 0; step < cfg.steps; ++step) {
    opt.set_lr(lr_at(step));
    // Distinct members per batch; duplicates would put the same item on
    // both sides of the diagonal and poison the objective.
    for (int64_t i = 0; i < cfg.batch; ++i) {
      const int64_t j = i + rng.uniform_int(static_cast<int64_t>(order.size()) - i);
      std::swap(order[i], order[j]);
    }
    Tape tape;
    Binding bind = Binding::trainable(tape, ps);
    std::vector<NodeId> text_rows, image_rows;
    for (int64_t i = 0; i < cfg.batch; ++i) {
      const PretrainPair& p = pairs[order[i]];
      text_rows.push_back(encode_text_node(tape, bind, enc, p.caption));
      image_rows.push_back(
          encode_image_node(tape, bind, enc, any_aug ? augment(p.image, rng) : p.image));
    }
    NodeId zt = tape.l2_normalize_rows(tape.concat_rows(text_rows));
    NodeId zi = tape.l2_normalize_rows(tape.concat_rows(image_rows));
    NodeId logits = tape.mul_scalar(tape.matmul_nt(zi, zt), tape.exp(bind(log_scale)));
    NodeId loss = tape.symmetric_diag_cross_entropy(logits);
    result.loss_history.push_back(tape.value(loss).item());

    GradMap grads = tape.backward(loss);
    std::vector<Tensor> g = collect_grads(grads, bind, ps);
    opt.step(ps, g);
    if (std::exp(log_scale.item()) > cfg.max_logit_scale)
      log_scale = Tensor::scalar(std::log(cfg.max_logit_scale));
  }
  result.final_temperature = 1.0 / std::exp(log_scale.item());
  return result;
}

void save_dual_encoder(const std::string& path, const DualEncoder& enc, const Vocabulary& vocab) {
  if (vocab.size() != enc.config.vocab_size)
    throw Error("encoder", "vocabulary size does not match encoder config");
  nlohmann::ordered_json cfg;
  cfg["format"] = "dual-encoder";
  cfg["version"] = 1;
  cfg["frozen"] = enc.frozen;
  cfg["config"] = enc.config.to_json();
  LncrWriter w(cfg);
  w.add_string_list("vocab", vocab.words());
  ParamSet ps = const_cast<DualEncoder&>(enc).named_tensors();
  for (size_t i = 0; i < ps.size(); ++i) w.add_tensor(ps.names[i], *ps.tensors[i]);
  w.write(path);
}

LoadedEncoder load_dual_encoder(const std::string& path) {
  LncrContents c = lncr_read(path);
  if (!c.config.contains("format") || c.config["format"] != "dual-encoder")
    throw CorruptFileError("not a dual-encoder checkpoint: " + path);
  LoadedEncoder out{DualEncoder::init(EncoderConfig::from_json(c.config.at("config")), 0),
                    Vocabulary(c.string_list("vocab"))};
  ParamSet ps = out.encoder.named_tensors();
  for (size_t i = 0; i < ps.size(); ++i) {
    const Tensor& t = c.tensor(ps.names[i]);
    if (!t.same_shape(*ps.tensors[i]))
      throw Error("encoder", "checkpoint shape mismatch for " + ps.names[i]);
    *ps.tensors[i] = t;
  }
  if (out.encoder.config.vocab_size != out.vocab.size())
    throw Error("encoder", "checkpoint vocabulary size mismatch");
  out.encoder.frozen = true;
  return out;
}

}  // namespace lincir
