#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cqr::data {

/// Gold answer location inside a passage, in Unicode scalar offsets.
struct AnswerSpan {
  std::string passage_id;
  long start = 0;
  long end = 0;  // exclusive

  bool operator==(const AnswerSpan&) const = default;
};

struct Turn {
  int turn_id = 0;
  std::string original_question;
  std::optional<std::string> human_rewrite;
  std::optional<std::string> gold_answer_text;
  std::optional<AnswerSpan> gold_answer_span;
  bool is_answerable = true;

  // The answer shown to the user at this turn, usable as dialogue history.
  // Mirrors gold_answer_text; not serialized on its own.
  const std::optional<std::string>& answer_given_in_dialogue() const { return gold_answer_text; }

  bool operator==(const Turn&) const = default;
};

struct Dialogue {
  std::string topic_id;
  std::vector<Turn> turns;

  bool operator==(const Dialogue&) const = default;
};

struct Passage {
  std::string passage_id;
  std::string text;

  bool operator==(const Passage&) const = default;
};

/// query_id -> passage_id -> relevance grade in 0..4.
using Qrels = std::map<std::string, std::map<std::string, int>>;

struct RankedList {
  std::string query_id;
  struct Entry {
    std::string passage_id;
    int rank = 0;  // 1-based
    double score = 0.0;

    bool operator==(const Entry&) const = default;
  };
  std::vector<Entry> entries;
  std::string tag;

  bool operator==(const RankedList&) const = default;
};

// One JSON schema serves both rewrite-annotated (CANARD-style) and
// question-only (CAsT-style) dialogue files.
enum class DialogueFormat { kCanardJson, kCastJson };

std::vector<Dialogue> load_dialogues(const std::string& path,
                                     DialogueFormat format = DialogueFormat::kCanardJson);
void write_dialogues(const std::vector<Dialogue>& dialogues, const std::string& path);

/// Streams `passage_id<TAB>text` lines; constant memory in collection size.
void scan_collection(const std::string& path, const std::function<void(const Passage&)>& fn);
std::vector<Passage> load_collection(const std::string& path);
void write_collection(const std::vector<Passage>& passages, const std::string& path);

Qrels load_qrels(const std::string& path);
void write_qrels(const Qrels& qrels, const std::string& path);

std::vector<RankedList> read_run(const std::string& path);
void write_run(const std::vector<RankedList>& run, const std::string& path);

void validate_dialogue(const Dialogue& dialogue, const std::string& origin);
void validate_ranked_list(const RankedList& list, const std::string& origin);

}  // namespace cqr::data
