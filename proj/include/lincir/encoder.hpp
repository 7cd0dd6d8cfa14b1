#pragma once

#include <map>

#include "json.hpp"
#include "lincir/optim.hpp"
#include "lincir/rng.hpp"
#include "lincir/tape.hpp"
#include "lincir/text.hpp"

namespace lincir {

struct EncoderConfig {
  int64_t d_text = 64;
  int64_t n_layers_text = 2;
  int64_t n_heads = 4;
  int64_t max_seq_len = 32;
  int64_t d_image = 64;
  int64_t n_layers_image = 2;
  int64_t image_side = 24;
  int64_t patch_size = 8;
  int64_t d_joint = 64;
  int64_t vocab_size = 0;

  int64_t patches_per_side() const { return image_side / patch_size; }
  int64_t n_patches() const { return patches_per_side() * patches_per_side(); }
  int64_t patch_dim() const { return patch_size * patch_size * 3; }

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static EncoderConfig from_json(const nlohmann::ordered_json& j);
};

// One pre-LN transformer block: attention and MLP sublayers, each behind a
// residual connection.
struct AttentionBlockParams {
  Tensor ln1_gamma, ln1_beta;
  Tensor wq, bq, wk, bk, wv, bv;
  Tensor wo, bo;
  Tensor ln2_gamma, ln2_beta;
  Tensor w_up, b_up;
  Tensor w_down, b_down;
};

// Frozen-by-default pair of encoders into a shared joint space. The text
// side is a causal transformer pooled at [EOS]; the image side embeds
// non-overlapping patches and mean-pools.
struct DualEncoder {
  EncoderConfig config;

  Tensor token_embedding;  // [vocab_size, d_text]
  Tensor text_pos;         // [max_seq_len, d_text]
  std::vector<AttentionBlockParams> text_blocks;
  Tensor text_ln_gamma, text_ln_beta;
  Tensor text_out;  // [d_text, d_joint]

  Tensor patch_proj;  // [patch_dim, d_image]
  Tensor patch_bias;  // [d_image]
  Tensor image_pos;   // [n_patches, d_image]
  std::vector<AttentionBlockParams> image_blocks;
  Tensor image_ln_gamma, image_ln_beta;
  Tensor image_out;  // [d_image, d_joint]

  bool frozen = false;

  static DualEncoder init(const EncoderConfig& cfg, uint64_t seed);

  // Stable-order registry for the optimizer; refuses to hand out frozen
  // weights so no training path can touch them.
  ParamSet trainable_params();
  // Same ordering without the freeze guard, for serialization.
  ParamSet named_tensors();
};

// Spans are replaced by externally supplied [d_text] rows: span index ->
// node. Spans without an entry keep their original token rows.
using InjectionMap = std::map<int, NodeId>;

// Hidden states after the final layer norm, one row per effective position.
// Span replacement shortens the sequence, so rows correspond to: [BOS],
// then words with each injected span collapsed to one row, then [EOS].
NodeId text_hidden_states_node(Tape& tape, Binding& bind, const DualEncoder& enc,
                               const TokenSequence& seq, const InjectionMap& injected = {});

// Pooled [d_joint] latents, not normalized.
NodeId encode_text_node(Tape& tape, Binding& bind, const DualEncoder& enc,
                        const TokenSequence& seq, const InjectionMap& injected = {});
NodeId encode_image_node(Tape& tape, Binding& bind, const DualEncoder& enc,
                         const Tensor& image);

// Frozen-inference conveniences on a throwaway tape.
Tensor encode_text(const DualEncoder& enc, const TokenSequence& seq,
                   const std::map<int, Tensor>& injected = {});
Tensor encode_image(const DualEncoder& enc, const Tensor& image);

// [image_side, image_side, 3] -> [n_patches, patch_dim], row-major patches.
Tensor image_to_patches(const EncoderConfig& cfg, const Tensor& image);

struct PretrainPair {
  Tensor image;
  TokenSequence caption;
};

struct PretrainConfig {
  int64_t steps = 3000;
  int64_t batch = 64;
  double lr = 3e-4;
  double weight_decay = 0.01;
  uint64_t seed = 42;
  double init_temperature = 0.07;
  double max_logit_scale = 100.0;
  // Per-draw image augmentation. Translation, mirroring, brightness and pixel
  // noise each break a different memorization shortcut; none of them moves an
  // image across a caption boundary (no glyph or palette here encodes
  // orientation, and the jitter is too small to cross color classes).
  int64_t aug_max_shift = 2;     // cyclic translation, pixels per axis; 0 disables
  bool aug_flip = true;          // horizontal mirror with probability 1/2
  double aug_brightness = 0.12;  // shared scale factor in [1-b, 1+b]; 0 disables
  double aug_pixel_noise = 0.02; // iid gaussian, clamped to [0, 1]; 0 disables
};

struct PretrainResult {
  std::vector<double> loss_history;  // one entry per step
  double final_temperature = 0.0;
};

// Symmetric InfoNCE over in-batch pairs with a learnable temperature.
// Trains the encoders in place; the caller decides when to freeze.
PretrainResult pretrain_contrastive(DualEncoder& enc, const std::vector<PretrainPair>& pairs,
                                    const PretrainConfig& cfg);

// Checkpointing. The vocabulary travels with the encoder so token ids can
// never drift from the embedding table.
void save_dual_encoder(const std::string& path, const DualEncoder& enc, const Vocabulary& vocab);
struct LoadedEncoder {
  DualEncoder encoder;
  Vocabulary vocab;
};
LoadedEncoder load_dual_encoder(const std::string& path);

}  // namespace lincir
