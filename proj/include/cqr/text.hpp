#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

namespace cqr::text {

// Special token spellings, recognized verbatim by the tokenizer.
inline constexpr const char* kPad = "[PAD]";
inline constexpr const char* kCls = "[CLS]";
inline constexpr const char* kSep = "[SEP]";
inline constexpr const char* kBos = "[BOS]";
inline constexpr const char* kEos = "[EOS]";
inline constexpr const char* kUnk = "[UNK]";

namespace utf8 {

// Decodes UTF-8 into Unicode scalar values. Malformed bytes decode as
// their Latin-1 value so every byte maps to exactly one scalar.
std::vector<char32_t> decode(std::string_view s);

std::string encode(const std::vector<char32_t>& scalars);

size_t scalar_length(std::string_view s);

// Substring addressed in Unicode scalars, [begin, end).
std::string substr_scalars(std::string_view s, size_t begin, size_t end);

}  // namespace utf8

// One surface token with its [begin, end) extent in Unicode scalars.
struct Token {
  std::string surface;
  size_t begin = 0;
  size_t end = 0;
  bool is_word = false;
  bool is_special = false;
};

// Splits text into word tokens (alphanumeric runs, apostrophes kept when
// flanked by alphanumerics, non-ASCII scalars count as word characters)
// and single-scalar punctuation tokens. Special token spellings such as
// "[SEP]" are matched verbatim as single tokens.
std::vector<Token> tokenize(std::string_view s);

// Lowercased token surfaces in order: the normalization shared by the
// neural tokenizer and the text metrics.
std::vector<std::string> word_tokens(std::string_view s);

std::string ascii_lower(std::string_view s);

class Vocabulary {
 public:
  static constexpr int kPadId = 0;
  static constexpr int kClsId = 1;
  static constexpr int kSepId = 2;
  static constexpr int kBosId = 3;
  static constexpr int kEosId = 4;
  static constexpr int kUnkId = 5;
  static constexpr size_t kNumSpecials = 6;

  // Keeps the most frequent word-level tokens, ties broken
  // lexicographically; specials always occupy ids 0..5.
  static Vocabulary build(const std::vector<std::string>& corpus, size_t max_size);

  static Vocabulary from_tokens(std::vector<std::string> tokens);

  int id(const std::string& token) const;
  bool contains(const std::string& token) const;
  const std::string& token(int id) const;
  size_t size() const { return tokens_.size(); }

  // FNV-1a over the newline-joined token list; stored in checkpoints.
  uint64_t hash() const;

  // JSON array of tokens in id order.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
};

struct TokenSequence {
  std::vector<int> ids;

  size_t size() const { return ids.size(); }
  bool empty() const { return ids.empty(); }
};

// Encodes normalized tokens to ids; unknown tokens become [UNK]. When
// max_len > 0 the tail is truncated to fit.
TokenSequence encode(std::string_view text, const Vocabulary& vocab, size_t max_len = 0);

// Ids plus per-token [begin, end) scalar offsets into the original text.
struct EncodedText {
  std::vector<int> ids;
  std::vector<std::pair<size_t, size_t>> offsets;
};

EncodedText encode_with_offsets(std::string_view text, const Vocabulary& vocab);

// Space-joined tokens; drops [PAD]/[BOS]/[EOS], keeps [SEP] literally.
// Throws on out-of-range ids.
std::string decode(const TokenSequence& seq, const Vocabulary& vocab);

// Porter's stemming algorithm (the 1980 rule set).
std::string porter_stem(std::string_view word);

// Lowercasing, punctuation-stripping, stopword-filtering term extractor
// for the retrieval index and keyword baselines.
class Analyzer {
 public:
  Analyzer() = default;
  Analyzer(std::unordered_set<std::string> stopwords, bool stem)
      : stopwords_(std::move(stopwords)), stem_(stem) {}

  static Analyzer with_default_stopwords(bool stem = false);
  static Analyzer from_stopword_file(const std::string& path, bool stem = false);

  std::vector<std::string> analyze(std::string_view text) const;

  bool stemming() const { return stem_; }
  const std::unordered_set<std::string>& stopwords() const { return stopwords_; }

 private:
  std::unordered_set<std::string> stopwords_;
  bool stem_ = false;
};

// The compiled-in copy of data/stopwords.txt.
const std::vector<std::string>& default_stopwords();

}  // namespace cqr::text
