#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "lincir/rng.hpp"
#include "lincir/tensor.hpp"

namespace lincir {

// Reserved token ids, fixed across every vocabulary.
enum ReservedToken : int32_t {
  kPadToken = 0,
  kBosToken = 1,
  kEosToken = 2,
  kUnkToken = 3,
  kSlotToken = 4,  // the "[$]" placeholder a projected embedding replaces
  kFirstWordToken = 5,
};

// Word ids are dense from kFirstWordToken in insertion order.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(const std::vector<std::string>& words);
  static Vocabulary from_corpus(const std::vector<std::string>& captions);

  int32_t lookup(const std::string& word) const;
  const std::string& token_string(int32_t id) const;
  int32_t size() const { return kFirstWordToken + static_cast<int32_t>(words_.size()); }
  const std::vector<std::string>& words() const { return words_; }

  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, int32_t> index_;
};

enum class PosTag { Det, Adj, Noun, Verb, Adv, Adp, Other };

const char* pos_tag_name(PosTag t);

// Word -> tag map with suffix fallbacks. Lookup order: exact entry, longest
// matching suffix rule, then Noun. Nouns are the safe default: an unknown
// content word should stay maskable.
class PosLexicon {
 public:
  PosTag tag(const std::string& word) const;
  size_t entry_count() const { return words_.size(); }

  // TSV lines "word<TAB>TAG"; entries starting with '-' are suffix rules;
  // '#' starts a comment.
  static PosLexicon load(const std::string& path);

 private:
  std::unordered_map<std::string, PosTag> words_;
  std::vector<std::pair<std::string, PosTag>> suffixes_;
};

// Half-open range over TokenSequence::ids.
struct TokenSpan {
  int32_t begin = 0;
  int32_t end = 0;
  bool operator==(const TokenSpan&) const = default;
};

struct TokenSequence {
  std::vector<int32_t> ids;        // [BOS] word ids [EOS]
  std::vector<std::string> words;  // surface forms; words[i] <-> ids[i+1]
  std::vector<TokenSpan> spans;    // sorted, disjoint, word positions only

  int64_t word_count() const { return static_cast<int64_t>(words.size()); }
  int64_t length() const { return static_cast<int64_t>(ids.size()); }
};

// Lowercases, splits on non-alphanumeric characters, keeps the literal
// "[$]" marker as a single token, truncates to max_len total ids.
TokenSequence tokenize(const std::string& caption, const Vocabulary& vocab, int64_t max_len);

// One tag per surface word; reserved tokens such as "[$]" tag as Other.
std::vector<PosTag> tag_words(const TokenSequence& seq, const PosLexicon& lexicon);

struct MaskPolicy {
  enum class Kind { AllKeywords, RandomToken, AllNouns, NKeywords, NonKeywords };
  Kind kind = Kind::AllKeywords;
  int n = 1;  // span budget for NKeywords

  static MaskPolicy parse(const std::string& text);
  std::string name() const;
};

class NoKeywordsError : public Error {
 public:
  explicit NoKeywordsError(const std::string& caption)
      : Error("text", "no keyword spans in caption: " + caption) {}
};

// Fills `spans` according to the policy. Keyword spans are maximal runs of
// adjective/noun words, grown left over an immediately preceding determiner.
// Throws NoKeywordsError when the policy yields nothing to mask.
TokenSequence extract_keyword_spans(const TokenSequence& seq, const std::vector<PosTag>& tags,
                                    const MaskPolicy& policy, Rng& rng);

// Surface words with every span collapsed to "[$]".
std::string masked_surface(const TokenSequence& seq);

// Surface words of each span, space-joined.
std::vector<std::string> span_texts(const TokenSequence& seq);

// Whole-word split shared by tokenize and vocabulary building.
std::vector<std::string> split_words(const std::string& caption);

// Non-empty lines of a text file, one caption per line.
std::vector<std::string> read_lines(const std::string& path);
void write_lines(const std::string& path, const std::vector<std::string>& lines);

}  // namespace lincir
