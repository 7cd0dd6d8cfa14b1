#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "lincir/encoder.hpp"
#include "lincir/noise.hpp"
#include "lincir/projection.hpp"
#include "lincir/text.hpp"

namespace lincir {

// What feeds the projection input path. The target is always the clean
// caption latent; ImageAnchored swaps only the input side to the paired
// image's latent. Pic2Word is a recognized label that refuses to run.
enum class SupervisionMode { TextAnchored, ImageAnchored, Pic2Word };

SupervisionMode parse_supervision(const std::string& text);
const char* supervision_name(SupervisionMode mode);

struct TrainConfig {
  int64_t max_steps = 2000;
  int64_t batch = 64;
  double lr = 1e-4;
  double weight_decay = 0.01;
  double dropout = 0.5;
  MaskPolicy mask_policy;
  NoiseSpec noise;
  SupervisionMode supervision = SupervisionMode::TextAnchored;
  int64_t eval_every = 100;
  int64_t patience = 5;
  uint64_t seed = 0;
};

// A caption fixed at preparation time: tokenized, tagged, spans chosen, and
// both latents precomputed with the frozen encoders.
struct PreparedCaption {
  TokenSequence seq;  // spans filled per the masking policy
  Tensor target;      // clean caption latent z_c
  Tensor anchor;      // projection input latent: z_c, or the paired image's z_i
};

struct PreparedCorpus {
  std::vector<PreparedCaption> captions;
  int64_t used = 0;
  int64_t skipped = 0;  // captions without a maskable span under the policy
};

// Runs the masking policy once per caption; captions the policy cannot mask
// are counted and dropped, so used + skipped always equals lines.size().
// `images` must align with `lines` for ImageAnchored and is ignored
// otherwise.
PreparedCorpus prepare_corpus(const std::vector<std::string>& lines,
                              const std::vector<Tensor>& images, const Vocabulary& vocab,
                              const PosLexicon& lexicon, const DualEncoder& enc,
                              const TrainConfig& cfg, uint64_t prep_seed);

struct SmpStepResult {
  double loss = 0.0;
  std::vector<Tensor> grads;  // aligned with phi.params() order
};

// One batch of self-masked reconstruction: per caption, project
// anchor + fresh noise into the token space, splice the result into every
// span, re-encode, and take the mean MSE against the clean latent. Only phi
// receives gradients; the clean latent is a constant. Nothing on this path
// is normalized. Per caption the rng draws noise first, then dropout masks.
SmpStepResult smp_step(const std::vector<const PreparedCaption*>& batch, const DualEncoder& enc,
                       const ProjectionModule& phi, const NoiseSpec& noise, Rng& rng);

struct HistoryRow {
  int64_t step = 0;
  double loss = 0.0;  // mean over the window since the previous row; NaN at step 0
  double val_score = 0.0;
};

void write_history_csv(const std::string& path, const std::vector<HistoryRow>& rows);

struct TrainResult {
  ProjectionModule phi;  // best-scoring snapshot
  double best_score = 0.0;
  int64_t best_step = -1;
  std::vector<HistoryRow> history;
};

using ValidationFn = std::function<double(const ProjectionModule&)>;

// AdamW over phi with periodic validation; keeps the best snapshot and
// stops early after `patience` evaluations without strict improvement.
TrainResult train(const PreparedCorpus& corpus, const DualEncoder& enc, const TrainConfig& cfg,
                  const ValidationFn& validate);

}  // namespace lincir
