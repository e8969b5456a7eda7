#include "cqr/data.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

#include "cqr/common.hpp"

namespace cqr::data {
namespace {

using ordered_json = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& origin, const std::string& what) {
  throw DataError(origin + ": " + what);
}

std::string record_origin(const std::string& path, size_t topic_index, int turn_index = -1) {
  std::string origin = path + ", topic " + std::to_string(topic_index);
  if (turn_index >= 0) origin += ", turn " + std::to_string(turn_index);
  return origin;
}

const ordered_json& require_field(const ordered_json& obj, const char* key,
                                  const std::string& origin) {
  auto it = obj.find(key);
  if (it == obj.end()) fail(origin, std::string("missing field \"") + key + "\"");
  return *it;
}

Turn parse_turn(const ordered_json& j, const std::string& origin) {
  if (!j.is_object()) fail(origin, "turn is not an object");
  Turn turn;
  turn.turn_id = require_field(j, "turn_id", origin).get<int>();
  turn.original_question = require_field(j, "question", origin).get<std::string>();
  if (auto it = j.find("rewrite"); it != j.end()) turn.human_rewrite = it->get<std::string>();
  if (auto it = j.find("answer_text"); it != j.end()) turn.gold_answer_text = it->get<std::string>();
  if (auto it = j.find("answer_span"); it != j.end()) {
    AnswerSpan span;
    span.passage_id = require_field(*it, "passage_id", origin).get<std::string>();
    span.start = require_field(*it, "start", origin).get<long>();
    span.end = require_field(*it, "end", origin).get<long>();
    turn.gold_answer_span = span;
  }
  if (auto it = j.find("answerable"); it != j.end()) turn.is_answerable = it->get<bool>();
  return turn;
}

ordered_json turn_to_json(const Turn& turn) {
  ordered_json j;
  j["turn_id"] = turn.turn_id;
  j["question"] = turn.original_question;
  if (turn.human_rewrite) j["rewrite"] = *turn.human_rewrite;
  if (turn.gold_answer_text) j["answer_text"] = *turn.gold_answer_text;
  if (turn.gold_answer_span) {
    ordered_json span;
    span["passage_id"] = turn.gold_answer_span->passage_id;
    span["start"] = turn.gold_answer_span->start;
    span["end"] = turn.gold_answer_span->end;
    j["answer_span"] = span;
  }
  if (!turn.is_answerable) j["answerable"] = false;
  return j;
}

// Splits a whitespace-separated line; empty between runs of spaces/tabs.
std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::istringstream in(line);
  std::string field;
  while (in >> field) fields.push_back(field);
  return fields;
}

std::ifstream open_for_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  return in;
}

}  // namespace

void validate_dialogue(const Dialogue& dialogue, const std::string& origin) {
  if (dialogue.topic_id.empty()) fail(origin, "empty topic_id");
  for (size_t i = 0; i < dialogue.turns.size(); ++i) {
    const Turn& turn = dialogue.turns[i];
    if (turn.turn_id != static_cast<int>(i))
      fail(origin, "turn_id " + std::to_string(turn.turn_id) + " at position " + std::to_string(i) +
                       " (expected 0-based contiguous ids)");
    if (turn.gold_answer_span) {
      if (turn.gold_answer_span->start < 0 || turn.gold_answer_span->end < turn.gold_answer_span->start)
        fail(origin, "answer_span with start " + std::to_string(turn.gold_answer_span->start) +
                         ", end " + std::to_string(turn.gold_answer_span->end));
      if (!turn.is_answerable) fail(origin, "unanswerable turn carries an answer_span");
    }
  }
}

std::vector<Dialogue> load_dialogues(const std::string& path, DialogueFormat) {
  auto in = open_for_read(path);
  ordered_json root;
  try {
    root = ordered_json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(path + ": " + e.what());
  }
  if (!root.is_array()) throw DataError(path + ": top-level value must be an array of topics");

  std::vector<Dialogue> dialogues;
  dialogues.reserve(root.size());
  for (size_t ti = 0; ti < root.size(); ++ti) {
    const auto& jt = root[ti];
    std::string origin = record_origin(path, ti);
    if (!jt.is_object()) fail(origin, "topic is not an object");
    Dialogue dialogue;
    dialogue.topic_id = require_field(jt, "topic_id", origin).get<std::string>();
    const auto& turns = require_field(jt, "turns", origin);
    if (!turns.is_array()) fail(origin, "\"turns\" is not an array");
    for (size_t ri = 0; ri < turns.size(); ++ri) {
      dialogue.turns.push_back(parse_turn(turns[ri], record_origin(path, ti, static_cast<int>(ri))));
    }
    validate_dialogue(dialogue, origin);
    dialogues.push_back(std::move(dialogue));
  }
  return dialogues;
}

void write_dialogues(const std::vector<Dialogue>& dialogues, const std::string& path) {
  ordered_json root = ordered_json::array();
  for (size_t i = 0; i < dialogues.size(); ++i) {
    validate_dialogue(dialogues[i], record_origin(path, i));
    ordered_json jt;
    jt["topic_id"] = dialogues[i].topic_id;
    jt["turns"] = ordered_json::array();
    for (const Turn& turn : dialogues[i].turns) jt["turns"].push_back(turn_to_json(turn));
    root.push_back(std::move(jt));
  }
  atomic_write_file(path, root.dump(2) + "\n");
}

void scan_collection(const std::string& path, const std::function<void(const Passage&)>& fn) {
  auto in = open_for_read(path);
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() && in.peek() == EOF) break;  // trailing newline
    size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw DataError(path + ", line " + std::to_string(line_no) + ": no TAB separator");
    Passage passage{line.substr(0, tab), line.substr(tab + 1)};
    if (passage.passage_id.empty() ||
        passage.passage_id.find_first_of(" \t") != std::string::npos)
      throw DataError(path + ", line " + std::to_string(line_no) + ": bad passage_id");
    fn(passage);
  }
}

std::vector<Passage> load_collection(const std::string& path) {
  std::vector<Passage> passages;
  scan_collection(path, [&](const Passage& p) { passages.push_back(p); });
  return passages;
}

void write_collection(const std::vector<Passage>& passages, const std::string& path) {
  std::string out;
  for (const Passage& p : passages) {
    if (p.passage_id.find_first_of(" \t") != std::string::npos || p.passage_id.empty())
      throw DataError(path + ": passage_id \"" + p.passage_id + "\" contains whitespace");
    if (p.text.find('\n') != std::string::npos)
      throw DataError(path + ": passage " + p.passage_id + " text contains a newline");
    out += p.passage_id;
    out += '\t';
    out += p.text;
    out += '\n';
  }
  atomic_write_file(path, out);
}

Qrels load_qrels(const std::string& path) {
  auto in = open_for_read(path);
  Qrels qrels;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto fields = split_fields(line);
    if (fields.empty()) continue;
    std::string origin = path + ", line " + std::to_string(line_no);
    if (fields.size() != 4) fail(origin, "expected `query_id 0 passage_id grade`");
    int grade = 0;
    try {
      size_t used = 0;
      grade = std::stoi(fields[3], &used);
      if (used != fields[3].size()) throw std::invalid_argument(fields[3]);
    } catch (const std::exception&) {
      fail(origin, "non-numeric grade \"" + fields[3] + "\"");
    }
    if (grade < 0 || grade > 4) fail(origin, "grade " + std::to_string(grade) + " outside 0..4");
    auto [it, inserted] = qrels[fields[0]].emplace(fields[2], grade);
    if (!inserted && it->second != grade)
      fail(origin, "conflicting grades for (" + fields[0] + ", " + fields[2] + ")");
  }
  return qrels;
}

void write_qrels(const Qrels& qrels, const std::string& path) {
  std::string out;
  for (const auto& [qid, judged] : qrels) {
    for (const auto& [pid, grade] : judged) {
      out += qid + " 0 " + pid + " " + std::to_string(grade) + "\n";
    }
  }
  atomic_write_file(path, out);
}

void validate_ranked_list(const RankedList& list, const std::string& origin) {
  std::map<std::string, int> seen;
  for (size_t i = 0; i < list.entries.size(); ++i) {
    const auto& e = list.entries[i];
    if (e.rank != static_cast<int>(i) + 1)
      fail(origin, "query " + list.query_id + ": rank " + std::to_string(e.rank) +
                       " at position " + std::to_string(i) + " (ranks must be contiguous from 1)");
    if (i > 0 && e.score > list.entries[i - 1].score)
      fail(origin, "query " + list.query_id + ": score increases at rank " + std::to_string(e.rank));
    if (!seen.emplace(e.passage_id, e.rank).second)
      fail(origin, "query " + list.query_id + ": duplicate passage " + e.passage_id);
  }
}

std::vector<RankedList> read_run(const std::string& path) {
  auto in = open_for_read(path);
  std::vector<RankedList> run;
  std::map<std::string, size_t> list_index;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    auto fields = split_fields(line);
    if (fields.empty()) continue;
    std::string origin = path + ", line " + std::to_string(line_no);
    if (fields.size() != 6) fail(origin, "expected `query_id Q0 passage_id rank score tag`");
    if (fields[1] != "Q0") fail(origin, "second field must be Q0");
    RankedList::Entry entry;
    entry.passage_id = fields[2];
    try {
      size_t used = 0;
      entry.rank = std::stoi(fields[3], &used);
      if (used != fields[3].size()) throw std::invalid_argument(fields[3]);
      entry.score = std::stod(fields[4], &used);
      if (used != fields[4].size()) throw std::invalid_argument(fields[4]);
    } catch (const std::exception&) {
      fail(origin, "non-numeric rank or score");
    }
    auto it = list_index.find(fields[0]);
    if (it == list_index.end()) {
      list_index.emplace(fields[0], run.size());
      run.push_back(RankedList{fields[0], {}, fields[5]});
      it = list_index.find(fields[0]);
    } else if (it->second != run.size() - 1) {
      fail(origin, "entries for query " + fields[0] + " are not consecutive");
    }
    if (run[it->second].tag != fields[5]) fail(origin, "tag changes within query " + fields[0]);
    run[it->second].entries.push_back(entry);
  }
  for (const auto& list : run) validate_ranked_list(list, path);
  return run;
}

void write_run(const std::vector<RankedList>& run, const std::string& path) {
  std::string out;
  for (const auto& list : run) {
    validate_ranked_list(list, path);
    for (const auto& e : list.entries) {
      out += list.query_id + " Q0 " + e.passage_id + " " + std::to_string(e.rank) + " " +
             format_real(e.score) + " " + list.tag + "\n";
    }
  }
  atomic_write_file(path, out);
}

}  // namespace cqr::data
