#include "cqr/text.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>

#include "cqr/common.hpp"
#include "json.hpp"

namespace cqr::text {

namespace utf8 {

std::vector<char32_t> decode(std::string_view s) {
  std::vector<char32_t> out;
  out.reserve(s.size());
  size_t i = 0;
  while (i < s.size()) {
    unsigned char c = static_cast<unsigned char>(s[i]);
    size_t len = 0;
    char32_t cp = 0;
    if (c < 0x80) {
      len = 1;
      cp = c;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
      cp = c & 0x1F;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
      cp = c & 0x0F;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
      cp = c & 0x07;
    }
    bool ok = len > 0 && i + len <= s.size();
    for (size_t k = 1; ok && k < len; ++k) {
      unsigned char cont = static_cast<unsigned char>(s[i + k]);
      if ((cont & 0xC0) != 0x80) {
        ok = false;
      } else {
        cp = (cp << 6) | (cont & 0x3F);
      }
    }
    if (ok) {
      out.push_back(cp);
      i += len;
    } else {
      // Malformed byte: keep its Latin-1 value so offsets stay total.
      out.push_back(c);
      i += 1;
    }
  }
  return out;
}

std::string encode(const std::vector<char32_t>& scalars) {
  std::string out;
  out.reserve(scalars.size());
  for (char32_t cp : scalars) {
    if (cp < 0x80) {
      out.push_back(static_cast<char>(cp));
    } else if (cp < 0x800) {
      out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else if (cp < 0x10000) {
      out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    } else {
      out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
      out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
    }
  }
  return out;
}

size_t scalar_length(std::string_view s) { return decode(s).size(); }

std::string substr_scalars(std::string_view s, size_t begin, size_t end) {
  std::vector<char32_t> scalars = decode(s);
  if (begin > scalars.size() || end > scalars.size() || begin > end) {
    throw InternalError("scalar substring out of range");
  }
  return encode(std::vector<char32_t>(scalars.begin() + static_cast<ptrdiff_t>(begin),
                                      scalars.begin() + static_cast<ptrdiff_t>(end)));
}

}  // namespace utf8

namespace {

bool is_space(char32_t c) {
  return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\f' || c == U'\v';
}

bool is_word_char(char32_t c) {
  if (c >= 0x80) {
    return true;
  }
  return (c >= U'a' && c <= U'z') || (c >= U'A' && c <= U'Z') || (c >= U'0' && c <= U'9');
}

char32_t lower(char32_t c) {
  if (c >= U'A' && c <= U'Z') {
    return c - U'A' + U'a';
  }
  return c;
}

const std::array<const char*, 6>& special_spellings() {
  static const std::array<const char*, 6> specials = {kPad, kCls, kSep, kBos, kEos, kUnk};
  return specials;
}

// Length of the special-token spelling starting at scalars[i], or 0.
size_t match_special(const std::vector<char32_t>& scalars, size_t i) {
  for (const char* spelling : special_spellings()) {
    size_t len = std::char_traits<char>::length(spelling);
    if (i + len > scalars.size()) {
      continue;
    }
    bool match = true;
    for (size_t k = 0; k < len; ++k) {
      if (scalars[i + k] != static_cast<char32_t>(spelling[k])) {
        match = false;
        break;
      }
    }
    if (match) {
      return len;
    }
  }
  return 0;
}

}  // namespace

std::vector<Token> tokenize(std::string_view s) {
  std::vector<char32_t> scalars = utf8::decode(s);
  std::vector<Token> out;
  size_t i = 0;
  while (i < scalars.size()) {
    char32_t c = scalars[i];
    if (is_space(c)) {
      ++i;
      continue;
    }
    if (c == U'[') {
      size_t len = match_special(scalars, i);
      if (len > 0) {
        Token t;
        t.begin = i;
        t.end = i + len;
        t.is_special = true;
        t.surface = utf8::encode(
            std::vector<char32_t>(scalars.begin() + static_cast<ptrdiff_t>(i),
                                  scalars.begin() + static_cast<ptrdiff_t>(i + len)));
        out.push_back(std::move(t));
        i += len;
        continue;
      }
    }
    if (is_word_char(c)) {
      size_t j = i;
      std::vector<char32_t> word;
      while (j < scalars.size()) {
        if (is_word_char(scalars[j])) {
          word.push_back(lower(scalars[j]));
          ++j;
        } else if (scalars[j] == U'\'' && j > i && j + 1 < scalars.size() &&
                   is_word_char(scalars[j + 1])) {
          word.push_back(scalars[j]);
          ++j;
        } else {
          break;
        }
      }
      Token t;
      t.begin = i;
      t.end = j;
      t.is_word = true;
      t.surface = utf8::encode(word);
      out.push_back(std::move(t));
      i = j;
      continue;
    }
    Token t;
    t.begin = i;
    t.end = i + 1;
    t.surface = utf8::encode({c});
    out.push_back(std::move(t));
    ++i;
  }
  return out;
}

std::vector<std::string> word_tokens(std::string_view s) {
  std::vector<std::string> out;
  for (Token& t : tokenize(s)) {
    out.push_back(std::move(t.surface));
  }
  return out;
}

std::string ascii_lower(std::string_view s) {
  std::string out(s);
  for (char& c : out) {
    if (c >= 'A' && c <= 'Z') {
      c = static_cast<char>(c - 'A' + 'a');
    }
  }
  return out;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, size_t max_size) {
  if (max_size <= kNumSpecials) {
    throw std::invalid_argument("vocabulary max_size must exceed the special token count");
  }
  std::unordered_map<std::string, int64_t> counts;
  for (const std::string& doc : corpus) {
    for (Token& t : tokenize(doc)) {
      if (t.is_special) {
        continue;
      }
      counts[t.surface] += 1;
    }
  }
  std::vector<std::pair<std::string, int64_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) {
      return a.second > b.second;
    }
    return a.first < b.first;
  });
  std::vector<std::string> tokens;
  for (const char* spelling : special_spellings()) {
    tokens.emplace_back(spelling);
  }
  for (const auto& [token, count] : ranked) {
    (void)count;
    if (tokens.size() >= max_size) {
      break;
    }
    tokens.push_back(token);
  }
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  if (tokens.size() < kNumSpecials) {
    throw DataError("vocabulary misses special tokens");
  }
  const auto& specials = special_spellings();
  for (size_t i = 0; i < specials.size(); ++i) {
    if (tokens[i] != specials[i]) {
      throw DataError("vocabulary id " + std::to_string(i) + " must be " + specials[i]);
    }
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  v.ids_.reserve(v.tokens_.size());
  for (size_t i = 0; i < v.tokens_.size(); ++i) {
    auto [it, inserted] = v.ids_.emplace(v.tokens_[i], static_cast<int>(i));
    if (!inserted) {
      throw DataError("duplicate vocabulary token: " + v.tokens_[i]);
    }
  }
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnkId : it->second;
}

bool Vocabulary::contains(const std::string& token) const { return ids_.count(token) > 0; }

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<size_t>(id) >= tokens_.size()) {
    throw std::out_of_range("token id " + std::to_string(id) + " out of range for |V|=" +
                            std::to_string(tokens_.size()));
  }
  return tokens_[static_cast<size_t>(id)];
}

uint64_t Vocabulary::hash() const {
  uint64_t h = 1469598103934665603ULL;
  auto mix = [&h](unsigned char byte) {
    h ^= byte;
    h *= 1099511628211ULL;
  };
  for (const std::string& t : tokens_) {
    for (char c : t) {
      mix(static_cast<unsigned char>(c));
    }
    mix('\n');
  }
  return h;
}

void Vocabulary::save(const std::string& path) const {
  nlohmann::json j = tokens_;
  atomic_write_file(path, j.dump(2) + "\n");
}

Vocabulary Vocabulary::load(const std::string& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("vocabulary " + path + ": " + e.what());
  }
  if (!j.is_array()) {
    throw DataError("vocabulary " + path + ": expected a JSON array of tokens");
  }
  std::vector<std::string> tokens;
  tokens.reserve(j.size());
  for (const auto& item : j) {
    if (!item.is_string()) {
      throw DataError("vocabulary " + path + ": non-string entry");
    }
    tokens.push_back(item.get<std::string>());
  }
  return from_tokens(std::move(tokens));
}

TokenSequence encode(std::string_view text, const Vocabulary& vocab, size_t max_len) {
  TokenSequence seq;
  for (const std::string& t : word_tokens(text)) {
    seq.ids.push_back(vocab.id(t));
  }
  if (max_len > 0 && seq.ids.size() > max_len) {
    seq.ids.resize(max_len);
  }
  return seq;
}

EncodedText encode_with_offsets(std::string_view text, const Vocabulary& vocab) {
  EncodedText out;
  for (const Token& t : tokenize(text)) {
    out.ids.push_back(vocab.id(t.surface));
    out.offsets.emplace_back(t.begin, t.end);
  }
  return out;
}

std::string decode(const TokenSequence& seq, const Vocabulary& vocab) {
  std::string out;
  for (int id : seq.ids) {
    const std::string& t = vocab.token(id);
    if (t == kPad || t == kBos || t == kEos) {
      continue;
    }
    if (!out.empty()) {
      out.push_back(' ');
    }
    out += t;
  }
  return out;
}

namespace {

// Helpers for the Porter rules; operate on lowercase a-z words.
class PorterWord {
 public:
  explicit PorterWord(std::string w) : w_(std::move(w)) {}

  const std::string& str() const { return w_; }

  bool is_consonant(size_t i) const {
    char c = w_[i];
    if (c == 'a' || c == 'e' || c == 'i' || c == 'o' || c == 'u') {
      return false;
    }
    if (c == 'y') {
      return i == 0 ? true : !is_consonant(i - 1);
    }
    return true;
  }

  // Number of VC sequences in the stem w_[0..len).
  int measure(size_t len) const {
    int m = 0;
    size_t i = 0;
    while (i < len && is_consonant(i)) {
      ++i;
    }
    while (i < len) {
      while (i < len && !is_consonant(i)) {
        ++i;
      }
      if (i < len) {
        ++m;
      }
      while (i < len && is_consonant(i)) {
        ++i;
      }
    }
    return m;
  }

  bool has_vowel(size_t len) const {
    for (size_t i = 0; i < len; ++i) {
      if (!is_consonant(i)) {
        return true;
      }
    }
    return false;
  }

  bool double_consonant(size_t len) const {
    return len >= 2 && w_[len - 1] == w_[len - 2] && is_consonant(len - 1);
  }

  // *o: stem ends consonant-vowel-consonant, last not w, x or y.
  bool cvc(size_t len) const {
    if (len < 3) {
      return false;
    }
    if (!is_consonant(len - 3) || is_consonant(len - 2) || !is_consonant(len - 1)) {
      return false;
    }
    char c = w_[len - 1];
    return c != 'w' && c != 'x' && c != 'y';
  }

  bool ends(const char* suffix) const {
    size_t n = std::char_traits<char>::length(suffix);
    return w_.size() >= n && w_.compare(w_.size() - n, n, suffix) == 0;
  }

  size_t stem_len(const char* suffix) const {
    return w_.size() - std::char_traits<char>::length(suffix);
  }

  void set_suffix(const char* suffix, size_t stem) {
    w_.resize(stem);
    w_ += suffix;
  }

  // Replace `suffix` with `repl` when measure(stem) > min_measure.
  bool replace(const char* suffix, const char* repl, int min_measure) {
    if (!ends(suffix)) {
      return false;
    }
    size_t stem = stem_len(suffix);
    if (measure(stem) > min_measure) {
      set_suffix(repl, stem);
    }
    return true;
  }

  std::string w_;
};

}  // namespace

std::string porter_stem(std::string_view word) {
  if (word.size() <= 2) {
    return std::string(word);
  }
  for (char c : word) {
    if (c < 'a' || c > 'z') {
      return std::string(word);
    }
  }
  PorterWord w{std::string(word)};

  // Step 1a
  if (w.ends("sses")) {
    w.set_suffix("ss", w.stem_len("sses"));
  } else if (w.ends("ies")) {
    w.set_suffix("i", w.stem_len("ies"));
  } else if (!w.ends("ss") && w.ends("s")) {
    w.set_suffix("", w.stem_len("s"));
  }

  // Step 1b
  bool cleanup = false;
  if (w.ends("eed")) {
    if (w.measure(w.stem_len("eed")) > 0) {
      w.set_suffix("ee", w.stem_len("eed"));
    }
  } else if (w.ends("ed") && w.has_vowel(w.stem_len("ed"))) {
    w.set_suffix("", w.stem_len("ed"));
    cleanup = true;
  } else if (w.ends("ing") && w.has_vowel(w.stem_len("ing"))) {
    w.set_suffix("", w.stem_len("ing"));
    cleanup = true;
  }
  if (cleanup) {
    if (w.ends("at") || w.ends("bl") || w.ends("iz")) {
      w.w_ += "e";
    } else if (w.double_consonant(w.str().size())) {
      char last = w.str().back();
      if (last != 'l' && last != 's' && last != 'z') {
        w.w_.pop_back();
      }
    } else if (w.measure(w.str().size()) == 1 && w.cvc(w.str().size())) {
      w.w_ += "e";
    }
  }

  // Step 1c
  if (w.ends("y") && w.has_vowel(w.stem_len("y"))) {
    w.w_.back() = 'i';
  }

  // Step 2
  static const std::pair<const char*, const char*> step2[] = {
      {"ational", "ate"}, {"tional", "tion"}, {"enci", "ence"}, {"anci", "ance"},
      {"izer", "ize"},    {"abli", "able"},   {"alli", "al"},   {"entli", "ent"},
      {"eli", "e"},       {"ousli", "ous"},   {"ization", "ize"}, {"ation", "ate"},
      {"ator", "ate"},    {"alism", "al"},    {"iveness", "ive"}, {"fulness", "ful"},
      {"ousness", "ous"}, {"aliti", "al"},    {"iviti", "ive"},  {"biliti", "ble"}};
  for (const auto& [suffix, repl] : step2) {
    if (w.replace(suffix, repl, 0)) {
      break;
    }
  }

  // Step 3
  static const std::pair<const char*, const char*> step3[] = {
      {"icate", "ic"}, {"ative", ""}, {"alize", "al"}, {"iciti", "ic"},
      {"ical", "ic"},  {"ful", ""},   {"ness", ""}};
  for (const auto& [suffix, repl] : step3) {
    if (w.replace(suffix, repl, 0)) {
      break;
    }
  }

  // Step 4
  static const char* step4[] = {"al",  "ance", "ence", "er",  "ic",  "able", "ible",
                                "ant", "ement", "ment", "ent", "ion", "ou",   "ism",
                                "ate", "iti",   "ous",  "ive", "ize"};
  for (const char* suffix : step4) {
    if (!w.ends(suffix)) {
      continue;
    }
    size_t stem = w.stem_len(suffix);
    if (std::string_view(suffix) == "ion" && !(stem > 0 && (w.str()[stem - 1] == 's' ||
                                                            w.str()[stem - 1] == 't'))) {
      break;
    }
    if (w.measure(stem) > 1) {
      w.set_suffix("", stem);
    }
    break;
  }

  // Step 5a
  if (w.ends("e")) {
    size_t stem = w.stem_len("e");
    int m = w.measure(stem);
    if (m > 1 || (m == 1 && !w.cvc(stem))) {
      w.set_suffix("", stem);
    }
  }
  // Step 5b
  if (w.measure(w.str().size()) > 1 && w.double_consonant(w.str().size()) &&
      w.str().back() == 'l') {
    w.w_.pop_back();
  }

  return w.str();
}

Analyzer Analyzer::with_default_stopwords(bool stem) {
  const std::vector<std::string>& words = default_stopwords();
  return Analyzer(std::unordered_set<std::string>(words.begin(), words.end()), stem);
}

Analyzer Analyzer::from_stopword_file(const std::string& path, bool stem) {
  std::istringstream in(read_file(path));
  std::unordered_set<std::string> words;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') {
      line.pop_back();
    }
    if (!line.empty() && line[0] != '#') {
      words.insert(ascii_lower(line));
    }
  }
  return Analyzer(std::move(words), stem);
}

std::vector<std::string> Analyzer::analyze(std::string_view text) const {
  std::vector<std::string> out;
  for (Token& t : tokenize(text)) {
    if (!t.is_word || stopwords_.count(t.surface) > 0) {
      continue;
    }
    out.push_back(stem_ ? porter_stem(t.surface) : std::move(t.surface));
  }
  return out;
}

const std::vector<std::string>& default_stopwords() {
  // Mirrors data/stopwords.txt; a unit test keeps the two in sync.
  static const std::vector<std::string> words = {
      "i",       "me",      "my",      "myself",  "we",         "our",     "ours",
      "ourselves", "you",   "your",    "yours",   "yourself",   "yourselves", "he",
      "him",     "his",     "himself", "she",     "her",        "hers",    "herself",
      "it",      "its",     "itself",  "they",    "them",       "their",   "theirs",
      "themselves", "what", "which",   "who",     "whom",       "this",    "that",
      "these",   "those",   "am",      "is",      "are",        "was",     "were",
      "be",      "been",    "being",   "have",    "has",        "had",     "having",
      "do",      "does",    "did",     "doing",   "a",          "an",      "the",
      "and",     "but",     "if",      "or",      "because",    "as",      "until",
      "while",   "of",      "at",      "by",      "for",        "with",    "about",
      "against", "between", "into",    "through", "during",     "before",  "after",
      "above",   "below",   "to",      "from",    "up",         "down",    "in",
      "out",     "on",      "off",     "over",    "under",      "again",   "further",
      "then",    "once",    "here",    "there",   "when",       "where",   "why",
      "how",     "all",     "any",     "both",    "each",       "few",     "more",
      "most",    "other",   "some",    "such",    "no",         "nor",     "not",
      "only",    "own",     "same",    "so",      "than",       "too",     "very",
      "s",       "t",       "can",     "will",    "just",       "don",     "should",
      "now"};
  return words;
}

}  // namespace cqr::text
