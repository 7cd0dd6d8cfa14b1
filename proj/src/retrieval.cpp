#include "lincir/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "lincir/lncr.hpp"

namespace lincir {

Tensor l2_normalized(const Tensor& v) {
  if (v.rank() != 1) throw Error("retrieval", "normalize needs a rank-1 tensor");
  const double norm = l2_norm(v.data(), v.numel());
  if (norm < 1e-12) throw Error("retrieval", "cannot normalize a zero vector");
  std::vector<double> out(v.data(), v.data() + v.numel());
  for (double& x : out) x /= norm;
  return Tensor(v.shape(), std::move(out));
}

GalleryIndex::GalleryIndex(std::vector<std::string> ids, const Tensor& latents)
    : ids_(std::move(ids)) {
  if (latents.rank() != 2) throw Error("retrieval", "index latents must be [N, d]");
  const int64_t n = latents.dim(0);
  const int64_t d = latents.dim(1);
  if (static_cast<int64_t>(ids_.size()) != n)
    throw Error("retrieval", "index has " + std::to_string(ids_.size()) + " ids for " +
                                 std::to_string(n) + " rows");
  if (n == 0) throw Error("retrieval", "index must not be empty");
  std::set<std::string> seen;
  for (const auto& id : ids_)
    if (!seen.insert(id).second) throw Error("retrieval", "duplicate item id: " + id);

  TensorBuilder rows({n, d});
  for (int64_t i = 0; i < n; ++i) {
    const double* src = latents.data() + i * d;
    const double norm = l2_norm(src, d);
    if (norm < 1e-12) throw Error("retrieval", "zero-norm latent for item " + ids_[i]);
    for (int64_t j = 0; j < d; ++j) rows.data()[i * d + j] = src[j] / norm;
  }
  latents_ = rows.build();
}

void save_gallery_index(const std::string& path, const GalleryIndex& index) {
  nlohmann::ordered_json cfg;
  cfg["format"] = "gallery-index";
  cfg["version"] = 1;
  cfg["size"] = index.size();
  cfg["dim"] = index.dim();
  LncrWriter w(cfg);
  w.add_tensor("latents", index.latents());
  w.add_string_list("item_ids", index.ids());
  w.write(path);
}

GalleryIndex load_gallery_index(const std::string& path) {
  LncrContents c = lncr_read(path);
  if (!c.config.contains("format") || c.config["format"] != "gallery-index")
    throw CorruptFileError("not a gallery index: " + path);
  return GalleryIndex(c.string_list("item_ids"), c.tensor("latents"));
}

RankedResult rank_scores(const std::string& query_id, const std::vector<std::string>& ids,
                         const std::vector<double>& scores,
                         const std::optional<std::string>& exclude) {
  if (ids.empty()) throw Error("retrieval", "cannot rank an empty candidate set");
  if (ids.size() != scores.size())
    throw Error("retrieval", "candidate ids and scores disagree in length");
  std::vector<size_t> order;
  order.reserve(ids.size());
  for (size_t i = 0; i < ids.size(); ++i)
    if (!exclude || ids[i] != *exclude) order.push_back(i);
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
  RankedResult result;
  result.query_id = query_id;
  result.items.reserve(order.size());
  for (size_t i : order) result.items.push_back({ids[i], scores[i]});
  return result;
}

RankedResult rank(const std::string& query_id, const Tensor& query, const GalleryIndex& index,
                  const std::optional<std::string>& exclude) {
  const Tensor q = l2_normalized(query);
  if (q.dim(0) != index.dim()) throw Error("retrieval", "query width does not match the index");
  const int64_t n = index.size();
  const int64_t d = index.dim();
  std::vector<double> scores(n, 0.0);
  const double* rows = index.latents().data();
  for (int64_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (int64_t j = 0; j < d; ++j) dot += rows[i * d + j] * q.data()[j];
    scores[i] = dot;
  }
  return rank_scores(query_id, index.ids(), scores, exclude);
}

namespace {

const std::set<std::string>& truths_for(const TruthMap& truths, const std::string& query_id) {
  auto it = truths.find(query_id);
  if (it == truths.end()) throw Error("retrieval", "no truth set for query " + query_id);
  if (it->second.empty()) throw Error("retrieval", "empty truth set for query " + query_id);
  return it->second;
}

}  // namespace

double recall_at_k(const std::vector<RankedResult>& results, const TruthMap& truths, int64_t k) {
  if (k < 1) throw Error("retrieval", "k must be at least 1");
  if (results.empty()) throw Error("retrieval", "no results to score");
  int64_t hits = 0;
  for (const RankedResult& r : results) {
    const auto& truth = truths_for(truths, r.query_id);
    const int64_t depth = std::min<int64_t>(k, static_cast<int64_t>(r.items.size()));
    for (int64_t i = 0; i < depth; ++i) {
      if (truth.count(r.items[i].item_id)) {
        ++hits;
        break;
      }
    }
  }
  return static_cast<double>(hits) / static_cast<double>(results.size());
}

double map_at_k(const std::vector<RankedResult>& results, const TruthMap& truths, int64_t k) {
  if (k < 1) throw Error("retrieval", "k must be at least 1");
  if (results.empty()) throw Error("retrieval", "no results to score");
  double sum_ap = 0.0;
  for (const RankedResult& r : results) {
    const auto& truth = truths_for(truths, r.query_id);
    const int64_t depth = std::min<int64_t>(k, static_cast<int64_t>(r.items.size()));
    const double denom = static_cast<double>(std::min<int64_t>(k, truth.size()));
    double cum_hits = 0.0;
    double ap = 0.0;
    for (int64_t i = 0; i < depth; ++i) {
      if (truth.count(r.items[i].item_id)) {
        cum_hits += 1.0;
        ap += cum_hits / static_cast<double>(i + 1);
      }
    }
    sum_ap += ap / denom;
  }
  return sum_ap / static_cast<double>(results.size());
}

double modality_gap(const std::vector<Tensor>& text_latents,
                    const std::vector<Tensor>& image_latents) {
  if (text_latents.empty() || image_latents.empty())
    throw Error("retrieval", "modality gap needs both latent sets non-empty");
  auto centroid = [](const std::vector<Tensor>& latents) {
    const Tensor first = l2_normalized(latents.front());
    std::vector<double> acc(first.data(), first.data() + first.numel());
    for (size_t i = 1; i < latents.size(); ++i) {
      const Tensor u = l2_normalized(latents[i]);
      if (u.numel() != static_cast<int64_t>(acc.size()))
        throw Error("retrieval", "latent widths disagree");
      for (size_t j = 0; j < acc.size(); ++j) acc[j] += u.data()[j];
    }
    for (double& x : acc) x /= static_cast<double>(latents.size());
    return acc;
  };
  const auto ct = centroid(text_latents);
  const auto ci = centroid(image_latents);
  if (ct.size() != ci.size()) throw Error("retrieval", "latent widths disagree across modalities");
  double sq = 0.0;
  for (size_t j = 0; j < ct.size(); ++j) sq += (ci[j] - ct[j]) * (ci[j] - ct[j]);
  return std::sqrt(sq);
}

PromptTemplate PromptTemplate::parse(const std::string& text) {
  auto count = [&text](const std::string& needle) {
    size_t n = 0, pos = 0;
    while ((pos = text.find(needle, pos)) != std::string::npos) {
      ++n;
      pos += needle.size();
    }
    return n;
  };
  if (count("[$]") != 1)
    throw Error("retrieval", "template needs exactly one [$] slot: " + text);
  if (count("[cond]") != 1)
    throw Error("retrieval", "template needs exactly one [cond] hole: " + text);
  return PromptTemplate{text};
}

std::string PromptTemplate::fill(const std::string& condition) const {
  std::string out = text;
  const size_t pos = out.find("[cond]");
  out.replace(pos, 6, condition);
  return out;
}

Tensor compose_query(const DualEncoder& enc, const Vocabulary& vocab, const ProjectionModule& phi,
                     const Tensor& ref_image, const std::string& condition,
                     const PromptTemplate& tmpl) {
  const std::string prompt = tmpl.fill(condition);
  if (static_cast<int64_t>(split_words(prompt).size()) + 2 > enc.config.max_seq_len)
    throw Error("retrieval", "prompt exceeds the sequence budget: " + prompt);

  const Tensor z_i = encode_image(enc, ref_image);
  const Tensor e_hat = phi.apply(z_i);

  TokenSequence seq = tokenize(prompt, vocab, enc.config.max_seq_len);
  int slot_word = -1;
  int slot_count = 0;
  for (size_t w = 0; w < seq.words.size(); ++w) {
    if (seq.ids[w + 1] == kSlotToken) {
      slot_word = static_cast<int>(w);
      ++slot_count;
    }
  }
  if (slot_count != 1)
    throw Error("retrieval", "prompt must contain exactly one [$] after substitution: " + prompt);
  seq.spans = {{slot_word, slot_word + 1}};
  return l2_normalized(encode_text(enc, seq, {{0, e_hat}}));
}

Tensor text_only_query(const DualEncoder& enc, const Vocabulary& vocab,
                       const std::string& condition) {
  TokenSequence seq = tokenize(condition, vocab, enc.config.max_seq_len);
  return l2_normalized(encode_text(enc, seq));
}

Tensor image_only_query(const DualEncoder& enc, const Tensor& image) {
  return l2_normalized(encode_image(enc, image));
}

}  // namespace lincir
