#include "lincir/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <utility>

#include "lincir/optim.hpp"
#include "lincir/tensor.hpp"

namespace lincir {

SupervisionMode parse_supervision(const std::string& text) {
  if (text == "text-anchored") return SupervisionMode::TextAnchored;
  if (text == "image-anchored") return SupervisionMode::ImageAnchored;
  if (text == "pic2word") return SupervisionMode::Pic2Word;
  throw Error("trainer", "unknown supervision mode: " + text);
}

const char* supervision_name(SupervisionMode mode) {
  switch (mode) {
    case SupervisionMode::TextAnchored: return "text-anchored";
    case SupervisionMode::ImageAnchored: return "image-anchored";
    case SupervisionMode::Pic2Word: return "pic2word";
  }
  throw Error("trainer", "invalid supervision mode value");
}

PreparedCorpus prepare_corpus(const std::vector<std::string>& lines,
                              const std::vector<Tensor>& images, const Vocabulary& vocab,
                              const PosLexicon& lexicon, const DualEncoder& enc,
                              const TrainConfig& cfg, uint64_t prep_seed) {
  if (cfg.supervision == SupervisionMode::Pic2Word)
    throw Error("trainer", "pic2word supervision is not implemented");
  const bool image_anchored = cfg.supervision == SupervisionMode::ImageAnchored;
  if (image_anchored && images.size() != lines.size())
    throw Error("trainer", "image-anchored supervision needs one paired image per caption");

  PreparedCorpus out;
  Rng rng(prep_seed);
  for (size_t i = 0; i < lines.size(); ++i) {
    TokenSequence seq = tokenize(lines[i], vocab, enc.config.max_seq_len);
    std::vector<PosTag> tags = tag_words(seq, lexicon);
    PreparedCaption cap;
    try {
      cap.seq = extract_keyword_spans(seq, tags, cfg.mask_policy, rng);
    } catch (const NoKeywordsError&) {
      ++out.skipped;
      continue;
    }
    cap.target = encode_text(enc, cap.seq);
    cap.anchor = image_anchored ? encode_image(enc, images[i]) : cap.target;
    out.captions.push_back(std::move(cap));
    ++out.used;
  }
  return out;
}

SmpStepResult smp_step(const std::vector<const PreparedCaption*>& batch, const DualEncoder& enc,
                       const ProjectionModule& phi, const NoiseSpec& noise, Rng& rng) {
  if (batch.empty()) throw Error("trainer", "empty batch");

  Tape tape;
  ProjectionModule& phi_mut = const_cast<ProjectionModule&>(phi);
  ParamSet phi_params = phi_mut.params();
  Binding phi_bind = Binding::trainable(tape, phi_params);
  Binding enc_bind = Binding::frozen(tape);

  const bool use_dropout = phi.dropout > 0.0;
  NodeId loss_sum = -1;
  for (const PreparedCaption* cap : batch) {
    Tensor n = sample_noise(noise, cap->anchor.numel(), rng);
    TensorBuilder noisy(cap->anchor.shape());
    for (int64_t j = 0; j < cap->anchor.numel(); ++j)
      noisy.data()[j] = cap->anchor.data()[j] + n.data()[j];

    DropoutMasks masks;
    if (use_dropout) masks = sample_dropout_masks(phi, rng);
    NodeId e_hat = projection_forward_node(tape, phi_bind, phi, tape.constant(noisy.build()),
                                           use_dropout ? &masks : nullptr);

    InjectionMap injected;
    for (size_t s = 0; s < cap->seq.spans.size(); ++s) injected[static_cast<int>(s)] = e_hat;
    NodeId z_hat = encode_text_node(tape, enc_bind, enc, cap->seq, injected);
    NodeId l = tape.mse(z_hat, tape.constant(cap->target));
    loss_sum = loss_sum < 0 ? l : tape.add(loss_sum, l);
  }
  NodeId loss = tape.scale(loss_sum, 1.0 / static_cast<double>(batch.size()));

  GradMap grads = tape.backward(loss);
  SmpStepResult out;
  out.loss = tape.value(loss).data()[0];
  out.grads = collect_grads(grads, phi_bind, phi_params);
  return out;
}

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& rows) {
  std::vector<std::string> lines;
  lines.reserve(rows.size() + 1);
  lines.emplace_back("step,loss,val_score");
  char buf[96];
  for (const HistoryRow& r : rows) {
    std::snprintf(buf, sizeof(buf), "%lld,%.17g,%.17g", static_cast<long long>(r.step), r.loss,
                  r.val_score);
    lines.emplace_back(buf);
  }
  write_lines(path, lines);
}

TrainResult train(const PreparedCorpus& corpus, const DualEncoder& enc, const TrainConfig& cfg,
                  const ValidationFn& validate) {
  if (cfg.supervision == SupervisionMode::Pic2Word)
    throw Error("trainer", "pic2word supervision is not implemented");
  if (corpus.captions.empty()) throw Error("trainer", "no usable captions in corpus");
  if (!enc.frozen) throw Error("trainer", "encoders must be frozen for projection training");
  if (cfg.batch <= 0) throw Error("trainer", "batch must be positive");
  if (cfg.eval_every <= 0) throw Error("trainer", "eval_every must be positive");
  if (!validate) throw Error("trainer", "validation callback is required");

  Rng rng(cfg.seed);
  const uint64_t phi_seed = rng.fork(0x70686921).next_u64();

  TrainResult out;
  out.phi = ProjectionModule::init(enc.config.d_joint, enc.config.d_text, cfg.dropout, phi_seed);
  if (cfg.max_steps == 0) return out;

  ProjectionModule best = out.phi;
  out.best_score = validate(out.phi);
  out.best_step = 0;
  out.history.push_back({0, std::nan(""), out.best_score});

  ParamSet params = out.phi.params();
  AdamWConfig opt_cfg;
  opt_cfg.lr = cfg.lr;
  opt_cfg.weight_decay = cfg.weight_decay;
  AdamW opt(opt_cfg, params);

  std::vector<size_t> order(corpus.captions.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  const size_t batch_size =
      std::min<size_t>(static_cast<size_t>(cfg.batch), corpus.captions.size());

  double window_loss = 0.0;
  int64_t window_steps = 0;
  int64_t stale_evals = 0;
  for (int64_t step = 1; step <= cfg.max_steps; ++step) {
    std::vector<const PreparedCaption*> batch(batch_size);
    for (size_t i = 0; i < batch_size; ++i) {
      const size_t j = i + static_cast<size_t>(rng.uniform_int(
                               static_cast<int64_t>(order.size() - i)));
      std::swap(order[i], order[j]);
      batch[i] = &corpus.captions[order[i]];
    }

    SmpStepResult r = smp_step(batch, enc, out.phi, cfg.noise, rng);
    opt.step(params, r.grads);
    window_loss += r.loss;
    ++window_steps;

    if (step % cfg.eval_every == 0 || step == cfg.max_steps) {
      const double score = validate(out.phi);
      out.history.push_back({step, window_loss / static_cast<double>(window_steps), score});
      window_loss = 0.0;
      window_steps = 0;
      if (score > out.best_score) {
        out.best_score = score;
        out.best_step = step;
        best = out.phi;
        stale_evals = 0;
      } else if (++stale_evals >= cfg.patience) {
        break;
      }
    }
  }
  out.phi = best;
  return out;
}

}  // namespace lincir
