#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "lincir/encoder.hpp"
#include "lincir/projection.hpp"
#include "lincir/tensor.hpp"
#include "lincir/text.hpp"

namespace lincir {

// Rank-1 input scaled to unit norm; zero vectors have no direction.
Tensor l2_normalized(const Tensor& v);

// Immutable retrieval database: unique ids over rows that the constructor
// scales to unit norm, so every stored score is a cosine.
class GalleryIndex {
 public:
  GalleryIndex(std::vector<std::string> ids, const Tensor& latents);

  int64_t size() const { return static_cast<int64_t>(ids_.size()); }
  int64_t dim() const { return latents_.dim(1); }
  const std::vector<std::string>& ids() const { return ids_; }
  const Tensor& latents() const { return latents_; }

 private:
  std::vector<std::string> ids_;
  Tensor latents_;
};

void save_gallery_index(const std::string& path, const GalleryIndex& index);
GalleryIndex load_gallery_index(const std::string& path);

struct RankedItem {
  std::string item_id;
  double score = 0.0;
};

struct RankedResult {
  std::string query_id;
  std::vector<RankedItem> items;  // scores non-increasing, ties by ascending id
};

// Shared ordering contract for cosine and oracle scorers: descending score,
// ties broken by ascending item id, `exclude` dropped from the candidates.
RankedResult rank_scores(const std::string& query_id, const std::vector<std::string>& ids,
                         const std::vector<double>& scores,
                         const std::optional<std::string>& exclude = std::nullopt);

RankedResult rank(const std::string& query_id, const Tensor& query, const GalleryIndex& index,
                  const std::optional<std::string>& exclude = std::nullopt);

using TruthMap = std::map<std::string, std::set<std::string>>;

// Fraction of queries with at least one truth in the top k.
double recall_at_k(const std::vector<RankedResult>& results, const TruthMap& truths, int64_t k);

// Mean over queries of AP@K = (1/min(k,|GT|)) * sum_r Precision@r * rel(r).
double map_at_k(const std::vector<RankedResult>& results, const TruthMap& truths, int64_t k);

// Distance between the centroids of the two normalized latent sets.
double modality_gap(const std::vector<Tensor>& text_latents,
                    const std::vector<Tensor>& image_latents);

// Inference prompt with exactly one "[$]" slot and one "[cond]" hole.
struct PromptTemplate {
  std::string text;

  static PromptTemplate parse(const std::string& text);
  std::string fill(const std::string& condition) const;
};

// Composed query: the reference image's latent is projected into the token
// embedding space and spliced into the prompt at "[$]"; no noise is added
// at inference. Output is unit-norm.
Tensor compose_query(const DualEncoder& enc, const Vocabulary& vocab, const ProjectionModule& phi,
                     const Tensor& ref_image, const std::string& condition,
                     const PromptTemplate& tmpl);

// Baselines: one modality of the composed query each.
Tensor text_only_query(const DualEncoder& enc, const Vocabulary& vocab,
                       const std::string& condition);
Tensor image_only_query(const DualEncoder& enc, const Tensor& image);

}  // namespace lincir
