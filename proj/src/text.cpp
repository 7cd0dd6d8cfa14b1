#include "lincir/text.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

namespace lincir {

namespace {

const std::string kReservedStrings[kFirstWordToken] = {"[PAD]", "[BOS]", "[EOS]", "[UNK]", "[$]"};

bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) != 0 || c == '\'';
}

}  // namespace

std::vector<std::string> split_words(const std::string& caption) {
  std::vector<std::string> out;
  std::string cur;
  for (size_t i = 0; i < caption.size();) {
    if (caption.compare(i, 3, "[$]") == 0) {
      if (!cur.empty()) out.push_back(std::exchange(cur, {}));
      out.emplace_back("[$]");
      i += 3;
      continue;
    }
    const char c = caption[i];
    if (is_word_char(c)) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else if (!cur.empty()) {
      out.push_back(std::exchange(cur, {}));
    }
    ++i;
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocabulary::Vocabulary(const std::vector<std::string>& words) {
  for (const std::string& w : words) {
    if (w.empty()) throw Error("text", "empty vocabulary entry");
    if (index_.count(w)) throw Error("text", "duplicate vocabulary entry: " + w);
    index_[w] = kFirstWordToken + static_cast<int32_t>(words_.size());
    words_.push_back(w);
  }
}

Vocabulary Vocabulary::from_corpus(const std::vector<std::string>& captions) {
  std::set<std::string> seen;
  for (const std::string& c : captions)
    for (std::string& w : split_words(c))
      if (w != "[$]") seen.insert(std::move(w));
  return Vocabulary(std::vector<std::string>(seen.begin(), seen.end()));
}

int32_t Vocabulary::lookup(const std::string& word) const {
  if (word == "[$]") return kSlotToken;
  auto it = index_.find(word);
  return it == index_.end() ? kUnkToken : it->second;
}

const std::string& Vocabulary::token_string(int32_t id) const {
  if (id >= 0 && id < kFirstWordToken) return kReservedStrings[id];
  const int32_t i = id - kFirstWordToken;
  if (i < 0 || i >= static_cast<int32_t>(words_.size()))
    throw Error("text", "token id out of range: " + std::to_string(id));
  return words_[i];
}

void Vocabulary::save(const std::string& path) const { write_lines(path, words_); }

Vocabulary Vocabulary::load(const std::string& path) { return Vocabulary(read_lines(path)); }

const char* pos_tag_name(PosTag t) {
  switch (t) {
    case PosTag::Det: return "DET";
    case PosTag::Adj: return "ADJ";
    case PosTag::Noun: return "NOUN";
    case PosTag::Verb: return "VERB";
    case PosTag::Adv: return "ADV";
    case PosTag::Adp: return "ADP";
    case PosTag::Other: return "OTHER";
  }
  return "OTHER";
}

namespace {

PosTag parse_tag(const std::string& s, const std::string& where) {
  if (s == "DET") return PosTag::Det;
  if (s == "ADJ") return PosTag::Adj;
  if (s == "NOUN") return PosTag::Noun;
  if (s == "VERB") return PosTag::Verb;
  if (s == "ADV") return PosTag::Adv;
  if (s == "ADP") return PosTag::Adp;
  if (s == "OTHER") return PosTag::Other;
  throw Error("text", "unknown tag '" + s + "' in " + where);
}

}  // namespace

PosLexicon PosLexicon::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("text", "cannot open lexicon " + path);
  PosLexicon lex;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw Error("text", "lexicon line " + std::to_string(lineno) + " has no tab");
    const std::string word = line.substr(0, tab);
    const PosTag tag = parse_tag(line.substr(tab + 1), path + ":" + std::to_string(lineno));
    if (word.empty()) throw Error("text", "empty lexicon entry at line " + std::to_string(lineno));
    if (word[0] == '-') {
      lex.suffixes_.emplace_back(word.substr(1), tag);
    } else {
      if (lex.words_.count(word))
        throw Error("text", "duplicate lexicon entry: " + word);
      lex.words_[word] = tag;
    }
  }
  return lex;
}

PosTag PosLexicon::tag(const std::string& word) const {
  auto it = words_.find(word);
  if (it != words_.end()) return it->second;
  size_t best_len = 0;
  PosTag best = PosTag::Noun;
  for (const auto& [suffix, tag] : suffixes_) {
    // A suffix rule needs at least one stem character in front of it.
    if (suffix.size() <= best_len || word.size() <= suffix.size()) continue;
    if (word.compare(word.size() - suffix.size(), suffix.size(), suffix) == 0) {
      best_len = suffix.size();
      best = tag;
    }
  }
  return best;
}

TokenSequence tokenize(const std::string& caption, const Vocabulary& vocab, int64_t max_len) {
  if (max_len < 2) throw Error("text", "max_len must admit [BOS] and [EOS]");
  TokenSequence seq;
  seq.words = split_words(caption);
  if (static_cast<int64_t>(seq.words.size()) > max_len - 2)
    seq.words.resize(max_len - 2);
  seq.ids.reserve(seq.words.size() + 2);
  seq.ids.push_back(kBosToken);
  for (const std::string& w : seq.words) seq.ids.push_back(vocab.lookup(w));
  seq.ids.push_back(kEosToken);
  return seq;
}

std::vector<PosTag> tag_words(const TokenSequence& seq, const PosLexicon& lexicon) {
  std::vector<PosTag> tags;
  tags.reserve(seq.words.size());
  for (size_t i = 0; i < seq.words.size(); ++i) {
    if (seq.ids[i + 1] < kFirstWordToken && seq.ids[i + 1] != kUnkToken)
      tags.push_back(PosTag::Other);  // "[$]" and friends are never keywords
    else
      tags.push_back(lexicon.tag(seq.words[i]));
  }
  return tags;
}

MaskPolicy MaskPolicy::parse(const std::string& text) {
  MaskPolicy p;
  if (text == "all-keyword") {
    p.kind = Kind::AllKeywords;
  } else if (text == "random-token") {
    p.kind = Kind::RandomToken;
  } else if (text == "all-noun") {
    p.kind = Kind::AllNouns;
  } else if (text == "non-keyword" || text == "all-non-keyword") {
    p.kind = Kind::NonKeywords;
  } else if (text.size() > 8 && text.substr(text.size() - 8) == "-keyword" &&
             text.find_first_not_of("0123456789") == text.size() - 8) {
    p.kind = Kind::NKeywords;
    p.n = std::stoi(text.substr(0, text.size() - 8));
    if (p.n < 1) throw Error("text", "keyword budget must be positive: " + text);
  } else {
    throw Error("text", "unknown mask policy: " + text);
  }
  return p;
}

std::string MaskPolicy::name() const {
  switch (kind) {
    case Kind::AllKeywords: return "all-keyword";
    case Kind::RandomToken: return "random-token";
    case Kind::AllNouns: return "all-noun";
    case Kind::NonKeywords: return "non-keyword";
    case Kind::NKeywords: return std::to_string(n) + "-keyword";
  }
  return "all-keyword";
}

namespace {

bool word_is_special(const TokenSequence& seq, int64_t w) {
  const int32_t id = seq.ids[w + 1];
  return id < kFirstWordToken && id != kUnkToken;
}

// Maximal Adj/Noun runs over word positions, each grown left over a single
// immediately preceding determiner. Returned in id coordinates.
std::vector<TokenSpan> keyword_runs(const TokenSequence& seq, const std::vector<PosTag>& tags,
                                    bool nouns_only) {
  std::vector<TokenSpan> spans;
  const int64_t n = seq.word_count();
  auto in_run = [&](int64_t w) {
    if (word_is_special(seq, w)) return false;
    return nouns_only ? tags[w] == PosTag::Noun
                      : (tags[w] == PosTag::Adj || tags[w] == PosTag::Noun);
  };
  int64_t w = 0;
  while (w < n) {
    if (!in_run(w)) {
      ++w;
      continue;
    }
    int64_t begin = w;
    while (w < n && in_run(w)) ++w;
    if (!nouns_only && begin > 0 && tags[begin - 1] == PosTag::Det &&
        !word_is_special(seq, begin - 1))
      --begin;
    spans.push_back({static_cast<int32_t>(begin + 1), static_cast<int32_t>(w + 1)});
  }
  return spans;
}

}  // namespace

TokenSequence extract_keyword_spans(const TokenSequence& seq, const std::vector<PosTag>& tags,
                                    const MaskPolicy& policy, Rng& rng) {
  if (tags.size() != seq.words.size())
    throw Error("text", "tag count does not match word count");
  TokenSequence out = seq;
  out.spans.clear();
  const std::string surface = masked_surface(seq);

  switch (policy.kind) {
    case MaskPolicy::Kind::AllKeywords:
      out.spans = keyword_runs(seq, tags, false);
      break;
    case MaskPolicy::Kind::AllNouns:
      out.spans = keyword_runs(seq, tags, true);
      break;
    case MaskPolicy::Kind::NKeywords: {
      std::vector<TokenSpan> all = keyword_runs(seq, tags, false);
      if (!all.empty()) {
        std::vector<size_t> pick(all.size());
        for (size_t i = 0; i < pick.size(); ++i) pick[i] = i;
        rng.shuffle(pick);
        pick.resize(std::min<size_t>(policy.n, pick.size()));
        std::sort(pick.begin(), pick.end());
        for (size_t i : pick) out.spans.push_back(all[i]);
      }
      break;
    }
    case MaskPolicy::Kind::RandomToken: {
      std::vector<int64_t> candidates;
      for (int64_t w = 0; w < seq.word_count(); ++w)
        if (!word_is_special(seq, w)) candidates.push_back(w);
      if (!candidates.empty()) {
        const int64_t w = candidates[rng.uniform_int(candidates.size())];
        out.spans.push_back({static_cast<int32_t>(w + 1), static_cast<int32_t>(w + 2)});
      }
      break;
    }
    case MaskPolicy::Kind::NonKeywords: {
      std::vector<TokenSpan> kw = keyword_runs(seq, tags, false);
      std::vector<char> covered(seq.word_count(), 0);
      for (const TokenSpan& s : kw)
        for (int32_t i = s.begin; i < s.end; ++i) covered[i - 1] = 1;
      int64_t w = 0;
      while (w < seq.word_count()) {
        if (covered[w] || word_is_special(seq, w)) {
          ++w;
          continue;
        }
        const int64_t begin = w;
        while (w < seq.word_count() && !covered[w] && !word_is_special(seq, w)) ++w;
        out.spans.push_back({static_cast<int32_t>(begin + 1), static_cast<int32_t>(w + 1)});
      }
      break;
    }
  }
  if (out.spans.empty()) throw NoKeywordsError(surface);
  return out;
}

std::string masked_surface(const TokenSequence& seq) {
  std::string out;
  size_t span = 0;
  for (int64_t w = 0; w < seq.word_count();) {
    if (!out.empty()) out += ' ';
    if (span < seq.spans.size() && seq.spans[span].begin == w + 1) {
      out += "[$]";
      w = seq.spans[span].end - 1;
      ++span;
    } else {
      out += seq.words[w];
      ++w;
    }
  }
  return out;
}

std::vector<std::string> span_texts(const TokenSequence& seq) {
  std::vector<std::string> out;
  for (const TokenSpan& s : seq.spans) {
    std::string text;
    for (int32_t i = s.begin; i < s.end; ++i) {
      if (!text.empty()) text += ' ';
      text += seq.words[i - 1];
    }
    out.push_back(std::move(text));
  }
  return out;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error("text", "cannot open " + path);
  std::vector<std::string> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("text", "cannot open " + path + " for writing");
  for (const std::string& l : lines) f << l << '\n';
  if (!f) throw Error("text", "write failed for " + path);
}

}  // namespace lincir
