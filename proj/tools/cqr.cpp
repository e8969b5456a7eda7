#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "cqr/breakdown.hpp"
#include "cqr/common.hpp"
#include "cqr/data.hpp"
#include "cqr/metrics.hpp"
#include "cqr/reader.hpp"
#include "cqr/retrieval.hpp"
#include "cqr/rewriter.hpp"
#include "cqr/text.hpp"
#include "cqr/transformer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;
using namespace cqr;

namespace {

// ---------------------------------------------------------------------------
// config file + shared helpers

std::string find_config_flag(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg == "--config" && i + 1 < argc) return argv[i + 1];
    if (arg.rfind("--config=", 0) == 0) return arg.substr(9);
  }
  return "";
}

json load_config_json(const std::string& path) {
  json parsed = json::parse(read_file(path), nullptr, false);
  if (parsed.is_discarded() || !parsed.is_object())
    throw DataError("config " + path + ": expected a JSON object");
  return parsed;
}

/// Seeds `value` from the config file; a flag given on the command line
/// overwrites it afterwards, so flags win.
template <typename T>
void cfg_default(const json& cfg, const std::string& key, T& value) {
  if (!cfg.contains(key)) return;
  try {
    value = cfg.at(key).get<T>();
  } catch (const json::exception&) {
    throw DataError("config key '" + key + "' has the wrong type");
  }
}

void require_input(const std::string& path, const std::string& what) {
  if (path.empty()) throw DataError(what + ": no path given");
  if (!fs::exists(path)) throw DataError(what + " not found at " + path);
}

void require_artifact(const std::string& path, const std::string& what,
                      const std::string& producer) {
  if (path.empty())
    throw DataError(what + ": no path given; produce one with the `" + producer +
                    "` subcommand");
  if (!fs::exists(path))
    throw DataError(what + " not found at " + path + "; produce it with the `" + producer +
                    "` subcommand");
}

void require_index_dir(const std::string& dir) {
  if (dir.empty() || !fs::exists(fs::path(dir) / "meta.json"))
    throw DataError("no index at " + (dir.empty() ? std::string("(unset)") : dir) +
                    "; produce it with the `index` subcommand");
}

std::string vocab_sidecar(const std::string& checkpoint) { return checkpoint + ".vocab.json"; }

std::string make_query_id(const std::string& topic_id, int turn_id) {
  return topic_id + "_" + std::to_string(turn_id);
}

breakdown::QuestionKey parse_query_id(const std::string& query_id) {
  auto pos = query_id.rfind('_');
  if (pos == std::string::npos || pos == 0 || pos + 1 == query_id.size())
    throw DataError("query id '" + query_id + "' is not of the form topic_turn");
  try {
    size_t used = 0;
    int turn = std::stoi(query_id.substr(pos + 1), &used);
    if (used != query_id.size() - pos - 1) throw std::invalid_argument(query_id);
    return {query_id.substr(0, pos), turn};
  } catch (const std::exception&) {
    throw DataError("query id '" + query_id + "' has a non-numeric turn");
  }
}

struct HyperOpts {
  int layers = 2;
  int heads = 2;
  int model_dim = 32;
  int ffn_dim = 64;
  int max_seq_len = 96;
};

void add_hyper_options(CLI::App* cmd, const json& cfg, HyperOpts& h) {
  cfg_default(cfg, "layers", h.layers);
  cfg_default(cfg, "heads", h.heads);
  cfg_default(cfg, "model_dim", h.model_dim);
  cfg_default(cfg, "ffn_dim", h.ffn_dim);
  cfg_default(cfg, "max_seq_len", h.max_seq_len);
  cmd->add_option("--layers", h.layers, "transformer layers");
  cmd->add_option("--heads", h.heads, "attention heads");
  cmd->add_option("--model-dim", h.model_dim, "hidden width");
  cmd->add_option("--ffn-dim", h.ffn_dim, "feed-forward width");
  cmd->add_option("--max-seq-len", h.max_seq_len, "position budget");
}

nn::TransformerConfig to_transformer(const HyperOpts& h, bool causal) {
  nn::TransformerConfig config;
  config.num_layers = h.layers;
  config.num_heads = h.heads;
  config.model_dim = h.model_dim;
  config.feed_forward_dim = h.ffn_dim;
  config.max_seq_len = h.max_seq_len;
  config.causal = causal;
  return config;
}

void add_retrieval_options(CLI::App* cmd, const json& cfg, retrieval::RetrievalConfig& rc) {
  cfg_default(cfg, "k1", rc.k1);
  cfg_default(cfg, "b", rc.b);
  cfg_default(cfg, "top_k", rc.top_k);
  cmd->add_option("--k1", rc.k1, "BM25 term-frequency saturation");
  cmd->add_option("--b", rc.b, "BM25 length normalization");
  cmd->add_option("--top-k", rc.top_k, "candidates per query");
}

void add_metric_options(CLI::App* cmd, const json& cfg, metrics::RetrievalMetricsConfig& mc) {
  cfg_default(cfg, "cutoff_grade", mc.cutoff_grade);
  cfg_default(cfg, "depth", mc.depth);
  cfg_default(cfg, "ndcg_k", mc.ndcg_k);
  cfg_default(cfg, "ndcg_binarize", mc.ndcg_binarize);
  cmd->add_option("--cutoff-grade", mc.cutoff_grade, "grade treated as relevant for MAP/MRR/P@1");
  cmd->add_option("--depth", mc.depth, "evaluation depth");
  cmd->add_option("--ndcg-k", mc.ndcg_k, "NDCG rank cutoff");
  cmd->add_flag("--ndcg-binarize,!--no-ndcg-binarize", mc.ndcg_binarize,
                "binarize gains at the cutoff grade instead of graded gains");
}

std::map<std::pair<std::string, int>, std::string> rewrites_by_key(
    const std::vector<rewrite::RewriteRecord>& records) {
  std::map<std::pair<std::string, int>, std::string> map;
  for (const auto& r : records) map[{r.topic_id, r.turn_id}] = r.rewrite;
  return map;
}

std::map<breakdown::QuestionKey, bool> copies_by_key(
    const std::vector<rewrite::RewriteRecord>& records) {
  std::map<breakdown::QuestionKey, bool> map;
  for (const auto& r : records) map[{r.topic_id, r.turn_id}] = r.was_copied;
  return map;
}

/// (topic_id, turn_id) -> (dialogue, positional turn index).
using TurnLookup = std::map<std::pair<std::string, int>, std::pair<const data::Dialogue*, int>>;

TurnLookup turn_lookup(const std::vector<data::Dialogue>& dialogues) {
  TurnLookup map;
  for (const auto& d : dialogues)
    for (int t = 0; t < static_cast<int>(d.turns.size()); ++t)
      map[{d.topic_id, d.turns[t].turn_id}] = {&d, t};
  return map;
}

/// Appends an empty result list for every judged query missing from the run,
/// so unretrieved questions count as zeros instead of disappearing.
void pad_run_with_qrels(std::vector<data::RankedList>& run, const data::Qrels& qrels) {
  std::set<std::string> present;
  for (const auto& list : run) present.insert(list.query_id);
  std::string tag = run.empty() ? std::string("none") : run.front().tag;
  for (const auto& [query_id, judgments] : qrels) {
    (void)judgments;
    if (!present.count(query_id)) run.push_back({query_id, {}, tag});
  }
}

void write_report(const std::string& path, const ordered_json& report) {
  atomic_write_file(path, report.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// index

struct IndexOpts {
  std::string collection, index_dir;
  bool stem = false;
};

void run_index(const IndexOpts& o) {
  require_input(o.collection, "collection");
  auto analyzer = text::Analyzer::with_default_stopwords(o.stem);
  auto index = retrieval::InvertedIndex::build_from_file(o.collection, analyzer);
  index.save(o.index_dir);
  std::cout << "indexed " << index.collection_size() << " passages into " << o.index_dir
            << " (avgdl " << format_real(index.avgdl(), 3) << ")\n";
}

// ---------------------------------------------------------------------------
// train-qr

struct TrainQrOpts {
  std::string dialogues, out;
  HyperOpts hyper;
  int vocab_size = 2000;
  int mixture_components = 2;
  int window = 5;
  bool include_answers = false;
  int max_rewrite_len = 24;
  int steps = 300;
  double lr = 3e-3;
  double target_loss = 0.0;
  uint64_t seed = 13;
};

void run_train_qr(const TrainQrOpts& o) {
  require_input(o.dialogues, "dialogue file");
  if (o.out.empty()) throw DataError("train-qr: no --out checkpoint path");
  auto dialogues = data::load_dialogues(o.dialogues);

  std::vector<std::string> corpus;
  for (const auto& d : dialogues)
    for (const auto& turn : d.turns) {
      corpus.push_back(turn.original_question);
      if (turn.human_rewrite) corpus.push_back(*turn.human_rewrite);
      if (o.include_answers && turn.gold_answer_text) corpus.push_back(*turn.gold_answer_text);
    }
  auto vocab = text::Vocabulary::build(corpus, o.vocab_size);

  rewrite::RewriterConfig config;
  config.transformer = to_transformer(o.hyper, true);
  config.mixture_components = o.mixture_components;
  config.window = o.window;
  config.include_answers = o.include_answers;
  config.max_rewrite_len = o.max_rewrite_len;
  config.validate();
  rewrite::RewriterModel model(vocab, config, o.seed);

  // Teacher forcing against the gold rewrite; prior gold rewrites (or the
  // original questions where annotation is missing) serve as history.
  std::vector<std::pair<text::TokenSequence, text::TokenSequence>> batch;
  int budget = config.transformer.max_seq_len - config.max_rewrite_len;
  for (const auto& d : dialogues) {
    std::vector<std::string> history;
    for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
      const auto& turn = d.turns[t];
      if (t > 0) {
        const auto& prev = d.turns[t - 1];
        history.push_back(prev.human_rewrite ? *prev.human_rewrite : prev.original_question);
      }
      if (!turn.human_rewrite) continue;
      auto context = rewrite::assemble_context(d, t, history, vocab, config.window,
                                               config.include_answers, budget);
      auto target = text::encode(*turn.human_rewrite, vocab,
                                 static_cast<size_t>(config.max_rewrite_len) - 1);
      target.ids.push_back(text::Vocabulary::kEosId);
      batch.emplace_back(std::move(context), std::move(target));
    }
  }
  if (batch.empty()) throw DataError("no turns with human rewrites in " + o.dialogues);

  double loss = 0.0;
  int steps_run = 0;
  for (int s = 0; s < o.steps; ++s) {
    loss = model.train_step(batch, o.lr);
    ++steps_run;
    if (o.target_loss > 0.0 && loss < o.target_loss) break;
  }
  model.save(o.out);
  model.vocab().save(vocab_sidecar(o.out));
  std::cout << "trained rewriter on " << batch.size() << " examples for " << steps_run
            << " steps (final loss " << format_real(loss, 4) << "); checkpoint " << o.out << "\n";
}

// ---------------------------------------------------------------------------
// rewrite

struct RewriteOpts {
  std::string dialogues, out;
  std::string variant = "human";
  std::string index_dir, checkpoint;
  std::string history = "recursive";
  int k = 3;
  double idf_threshold = 0.0001;
};

void run_rewrite(const RewriteOpts& o) {
  require_input(o.dialogues, "dialogue file");
  if (o.out.empty()) throw DataError("rewrite: no --out path");
  auto dialogues = data::load_dialogues(o.dialogues);
  std::vector<rewrite::RewriteRecord> records;

  if (o.variant == "transformer") {
    require_artifact(o.checkpoint, "rewriter checkpoint", "train-qr");
    require_artifact(vocab_sidecar(o.checkpoint), "rewriter vocabulary", "train-qr");
    auto vocab = text::Vocabulary::load(vocab_sidecar(o.checkpoint));
    auto model = rewrite::RewriterModel::load(o.checkpoint, vocab);
    rewrite::HistoryMode mode;
    if (o.history == "recursive")
      mode = rewrite::HistoryMode::kRecursive;
    else if (o.history == "gold")
      mode = rewrite::HistoryMode::kGoldHistory;
    else
      throw DataError("unknown history mode '" + o.history + "' (recursive|gold)");
    for (const auto& d : dialogues) {
      auto results = model.rewrite_dialogue(d, mode);
      for (size_t t = 0; t < d.turns.size(); ++t)
        records.push_back({d.topic_id, d.turns[t].turn_id, results[t].rewritten_question,
                           results[t].was_copied});
    }
  } else {
    std::optional<retrieval::InvertedIndex> index;
    if (o.variant == "kdt-star") {
      require_index_dir(o.index_dir);
      index = retrieval::InvertedIndex::load(o.index_dir);
    }
    for (const auto& d : dialogues)
      for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
        const auto& turn = d.turns[t];
        std::string text;
        bool copied = false;
        if (o.variant == "original") {
          text = rewrite::baseline_original(turn);
          copied = true;
        } else if (o.variant == "kdt") {
          text = rewrite::baseline_kdt(d, t, o.k);
          copied = rewrite::is_copy(text, turn.original_question);
        } else if (o.variant == "kdt-star") {
          auto idf = [&index](const std::string& term) { return index->idf(term); };
          text = rewrite::baseline_kdt_star(d, t, o.k, idf, index->analyzer(), o.idf_threshold);
          copied = rewrite::is_copy(text, turn.original_question);
        } else if (o.variant == "human") {
          if (!turn.human_rewrite)
            throw DataError("dialogue " + d.topic_id + " turn " + std::to_string(turn.turn_id) +
                            " has no human rewrite");
          text = *turn.human_rewrite;
          copied = rewrite::is_copy(text, turn.original_question);
        } else {
          throw DataError("unknown rewrite variant '" + o.variant +
                          "' (original|kdt|kdt-star|transformer|human)");
        }
        records.push_back({d.topic_id, turn.turn_id, text, copied});
      }
  }

  rewrite::write_rewrite_file(records, o.out);
  std::cout << "wrote " << records.size() << " " << o.variant << " rewrites to " << o.out << "\n";
}

// ---------------------------------------------------------------------------
// retrieve

struct RetrieveOpts {
  std::string index_dir, rewrites, run;
  std::string tag = "bm25";
  retrieval::RetrievalConfig rc;
};

void run_retrieve(const RetrieveOpts& o) {
  require_index_dir(o.index_dir);
  require_artifact(o.rewrites, "rewrite file", "rewrite");
  if (o.run.empty()) throw DataError("retrieve: no --run output path");
  o.rc.validate();
  auto index = retrieval::InvertedIndex::load(o.index_dir);
  auto records = rewrite::load_rewrite_file(o.rewrites);
  std::vector<data::RankedList> run;
  int empty = 0;
  for (const auto& r : records) {
    auto list = index.retrieve(r.rewrite, o.rc, make_query_id(r.topic_id, r.turn_id), o.tag);
    if (list.entries.empty()) ++empty;
    run.push_back(std::move(list));
  }
  data::write_run(run, o.run);
  std::cout << "retrieved for " << run.size() << " queries (" << empty
            << " without a scoring passage); run " << o.run << "\n";
}

// ---------------------------------------------------------------------------
// rerank

struct RerankOpts {
  std::string index_dir, rewrites, run_in, run_out, checkpoint;
  std::string tag = "reranker";
};

void run_rerank(const RerankOpts& o) {
  require_index_dir(o.index_dir);
  require_artifact(o.rewrites, "rewrite file", "rewrite");
  require_artifact(o.run_in, "run file", "retrieve");
  require_artifact(o.checkpoint, "reranker checkpoint", "train-reranker");
  require_artifact(vocab_sidecar(o.checkpoint), "reranker vocabulary", "train-reranker");
  if (o.run_out.empty()) throw DataError("rerank: no --run-out path");

  auto index = retrieval::InvertedIndex::load(o.index_dir);
  auto questions = rewrites_by_key(rewrite::load_rewrite_file(o.rewrites));
  auto vocab = text::Vocabulary::load(vocab_sidecar(o.checkpoint));
  auto model = retrieval::CrossEncoderModel::load(o.checkpoint, vocab);
  auto scorer = model.as_scorer();

  auto run = data::read_run(o.run_in);
  std::vector<data::RankedList> out;
  for (const auto& list : run) {
    auto key = parse_query_id(list.query_id);
    auto it = questions.find(key);
    if (it == questions.end())
      throw DataError("run query " + list.query_id +
                      " has no rewrite; regenerate with the `rewrite` subcommand");
    out.push_back(retrieval::rerank(it->second, list, scorer, index, o.tag));
  }
  data::write_run(out, o.run_out);
  std::cout << "reranked " << out.size() << " queries; run " << o.run_out << "\n";
}

// ---------------------------------------------------------------------------
// train-reranker

struct TrainRerankerOpts {
  std::string rewrites, qrels, index_dir, collection, out;
  HyperOpts hyper{1, 2, 16, 32, 64};
  int vocab_size = 2000;
  int negatives = 4;
  int relevance_cutoff = 2;
  int steps = 200;
  double lr = 1e-2;
  uint64_t seed = 17;
  retrieval::RetrievalConfig rc;
};

void run_train_reranker(const TrainRerankerOpts& o) {
  require_index_dir(o.index_dir);
  require_artifact(o.rewrites, "rewrite file", "rewrite");
  require_input(o.qrels, "qrels file");
  require_input(o.collection, "collection");
  if (o.out.empty()) throw DataError("train-reranker: no --out checkpoint path");
  o.rc.validate();

  auto index = retrieval::InvertedIndex::load(o.index_dir);
  auto qrels = data::load_qrels(o.qrels);
  auto records = rewrite::load_rewrite_file(o.rewrites);

  std::vector<std::string> corpus;
  data::scan_collection(o.collection, [&corpus](const data::Passage& p) { corpus.push_back(p.text); });
  for (const auto& r : records) corpus.push_back(r.rewrite);
  auto vocab = text::Vocabulary::build(corpus, o.vocab_size);

  retrieval::CrossEncoderConfig config;
  config.transformer = to_transformer(o.hyper, false);
  config.validate();
  retrieval::CrossEncoderModel model(vocab, config, o.seed);

  std::vector<retrieval::CrossEncoderModel::Example> examples;
  int unjudged = 0;
  for (const auto& r : records) {
    auto query_id = make_query_id(r.topic_id, r.turn_id);
    if (!qrels.count(query_id)) {
      ++unjudged;
      continue;
    }
    auto batch = retrieval::build_reranker_examples(r.rewrite, query_id, qrels, index, o.rc,
                                                    o.negatives, o.relevance_cutoff);
    examples.insert(examples.end(), batch.begin(), batch.end());
  }
  if (examples.empty()) throw DataError("no judged queries yield training pairs");

  double loss = retrieval::train_reranker(model, examples, o.steps, o.lr);
  model.save(o.out);
  model.vocab().save(vocab_sidecar(o.out));
  std::cout << "trained reranker on " << examples.size() << " pairs (" << unjudged
            << " unjudged queries skipped; final loss " << format_real(loss, 4)
            << "); checkpoint " << o.out << "\n";
}

// ---------------------------------------------------------------------------
// train-reader

struct TrainReaderOpts {
  std::string dialogues, index_dir, collection, rewrites, out;
  std::string qa_input_mode = "human";
  HyperOpts hyper{1, 2, 16, 32, 64};
  int k = 3;
  int vocab_size = 2000;
  int max_span_len = 30;
  int steps = 200;
  double lr = 5e-3;
  uint64_t seed = 19;
  retrieval::RetrievalConfig rc;
};

void run_train_reader(const TrainReaderOpts& o) {
  require_input(o.dialogues, "dialogue file");
  require_input(o.collection, "collection");
  require_index_dir(o.index_dir);
  if (o.out.empty()) throw DataError("train-reader: no --out checkpoint path");
  o.rc.validate();

  auto mode = reader::parse_qa_input_mode(o.qa_input_mode);
  std::map<std::pair<std::string, int>, std::string> rewrites;
  if (mode == reader::QaInputMode::kRewrite) {
    require_artifact(o.rewrites, "rewrite file", "rewrite");
    rewrites = rewrites_by_key(rewrite::load_rewrite_file(o.rewrites));
  }
  auto index = retrieval::InvertedIndex::load(o.index_dir);
  auto dialogues = data::load_dialogues(o.dialogues);

  // Answerable turns read their gold passage; unanswerable turns read the
  // top retrieved passage and train the No-Answer decision.
  std::vector<reader::ReaderExample> dataset;
  std::vector<std::string> corpus;
  data::scan_collection(o.collection, [&corpus](const data::Passage& p) { corpus.push_back(p.text); });
  int skipped = 0;
  for (const auto& d : dialogues)
    for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
      const auto& turn = d.turns[t];
      auto question = reader::reader_question(d, t, mode, o.k, &rewrites);
      corpus.push_back(question);
      if (turn.is_answerable) {
        if (!turn.gold_answer_span) {
          ++skipped;
          continue;
        }
        const auto& span = *turn.gold_answer_span;
        if (!index.contains(span.passage_id))
          throw DataError("gold passage " + span.passage_id +
                          " is not in the index; rebuild it with the `index` subcommand");
        dataset.push_back({question, index.passage_text(span.passage_id), true,
                           static_cast<size_t>(span.start), static_cast<size_t>(span.end)});
      } else {
        auto list = index.retrieve(question, o.rc, make_query_id(d.topic_id, turn.turn_id));
        if (list.entries.empty()) {
          ++skipped;
          continue;
        }
        dataset.push_back({question, index.passage_text(list.entries.front().passage_id), false,
                           0, 0});
      }
    }
  if (dataset.empty()) throw DataError("no usable reader examples in " + o.dialogues);

  auto vocab = text::Vocabulary::build(corpus, o.vocab_size);
  reader::ReaderConfig config;
  config.transformer = to_transformer(o.hyper, false);
  config.max_span_len = o.max_span_len;
  config.validate();
  reader::ReaderModel model(vocab, config, o.seed);

  auto stats = reader::train_reader(model, dataset, o.steps, o.lr);
  model.save(o.out);
  model.vocab().save(vocab_sidecar(o.out));
  std::cout << "trained reader on " << stats.used << " of " << dataset.size() << " examples ("
            << skipped << " turns skipped, " << stats.skipped
            << " unalignable; final loss " << format_real(stats.loss, 4) << "); checkpoint "
            << o.out << "\n";
}

// ---------------------------------------------------------------------------
// read

struct ReadOpts {
  std::string index_dir, run, checkpoint, dialogues, rewrites, out;
  std::string qa_input_mode = "human";
  int k = 3;
};

void run_read(const ReadOpts& o) {
  require_index_dir(o.index_dir);
  require_artifact(o.run, "run file", "retrieve");
  require_artifact(o.checkpoint, "reader checkpoint", "train-reader");
  require_artifact(vocab_sidecar(o.checkpoint), "reader vocabulary", "train-reader");
  require_input(o.dialogues, "dialogue file");
  if (o.out.empty()) throw DataError("read: no --out path");

  auto mode = reader::parse_qa_input_mode(o.qa_input_mode);
  std::map<std::pair<std::string, int>, std::string> rewrites;
  if (mode == reader::QaInputMode::kRewrite) {
    require_artifact(o.rewrites, "rewrite file", "rewrite");
    rewrites = rewrites_by_key(rewrite::load_rewrite_file(o.rewrites));
  }

  auto index = retrieval::InvertedIndex::load(o.index_dir);
  auto dialogues = data::load_dialogues(o.dialogues);
  std::map<std::string, const data::RankedList*> lists;
  auto run = data::read_run(o.run);
  for (const auto& list : run) lists[list.query_id] = &list;

  auto vocab = text::Vocabulary::load(vocab_sidecar(o.checkpoint));
  auto model = reader::ReaderModel::load(o.checkpoint, vocab);

  std::vector<reader::ReaderPrediction> predictions;
  int unretrieved = 0;
  for (const auto& d : dialogues)
    for (int t = 0; t < static_cast<int>(d.turns.size()); ++t) {
      const auto& turn = d.turns[t];
      auto question = reader::reader_question(d, t, mode, o.k, &rewrites);
      auto it = lists.find(make_query_id(d.topic_id, turn.turn_id));
      if (it == lists.end() || it->second->entries.empty()) {
        // Nothing retrieved for this question: there is no passage to read.
        predictions.push_back({d.topic_id, turn.turn_id, reader::to_string(mode), std::nullopt,
                               0.0});
        ++unretrieved;
        continue;
      }
      const auto& passage_id = it->second->entries.front().passage_id;
      if (!index.contains(passage_id))
        throw DataError("run passage " + passage_id +
                        " is not in the index; rebuild it with the `index` subcommand");
      auto prediction = model.predict(model.build_input(question, index.passage_text(passage_id)));
      predictions.push_back({d.topic_id, turn.turn_id, reader::to_string(mode),
                             prediction.is_no_answer
                                 ? std::nullopt
                                 : std::optional<std::string>(prediction.answer_text),
                             prediction.score});
    }
  reader::write_predictions(predictions, o.out);
  std::cout << "read answers for " << predictions.size() << " questions (" << unretrieved
            << " without a retrieved passage); predictions " << o.out << "\n";
}

// ---------------------------------------------------------------------------
// eval-qr

struct EvalQrOpts {
  std::string rewrites, dialogues, out;
  bool embed = true;
};

void run_eval_qr(const EvalQrOpts& o) {
  require_artifact(o.rewrites, "rewrite file", "rewrite");
  require_input(o.dialogues, "dialogue file");
  if (o.out.empty()) throw DataError("eval-qr: no --out path");
  auto records = rewrite::load_rewrite_file(o.rewrites);
  auto dialogues = data::load_dialogues(o.dialogues);
  auto turns = turn_lookup(dialogues);

  std::vector<std::pair<std::string, std::string>> pairs;
  int skipped = 0;
  for (const auto& r : records) {
    auto it = turns.find({r.topic_id, r.turn_id});
    if (it == turns.end())
      throw DataError("rewrite for unknown question " + make_query_id(r.topic_id, r.turn_id));
    const auto& turn = it->second.first->turns[it->second.second];
    if (!turn.human_rewrite) {
      ++skipped;
      continue;
    }
    pairs.emplace_back(r.rewrite, *turn.human_rewrite);
  }
  if (pairs.empty()) throw DataError("no rewrites with reference annotations in " + o.rewrites);

  metrics::RewriteEvalSummary summary;
  if (o.embed) {
    std::vector<std::string> corpus;
    for (const auto& [candidate, reference] : pairs) {
      corpus.push_back(candidate);
      corpus.push_back(reference);
    }
    auto vocab = text::Vocabulary::build(corpus, 50000);
    auto embedder = metrics::count_embedder(vocab);
    summary = metrics::evaluate_rewrites(pairs, &embedder);
  } else {
    summary = metrics::evaluate_rewrites(pairs);
  }

  ordered_json report;
  report["rouge1_recall"] = summary.rouge1_recall;
  report["exact_match"] = summary.exact_match;
  if (summary.similarity)
    report["similarity"] = *summary.similarity;
  else
    report["similarity"] = nullptr;
  report["count"] = summary.count;
  report["skipped"] = skipped;
  write_report(o.out, report);
  std::cout << "rewrite quality over " << summary.count << " questions: ROUGE-1 recall "
            << format_real(summary.rouge1_recall, 4) << ", exact match "
            << format_real(summary.exact_match, 4) << "; report " << o.out << "\n";
}

// ---------------------------------------------------------------------------
// eval-retrieval

struct EvalRetrievalOpts {
  std::string run, qrels, out, pr_out;
  metrics::RetrievalMetricsConfig mc;
  bool complete = true;
};

metrics::RetrievalEval run_eval_retrieval(const EvalRetrievalOpts& o) {
  require_artifact(o.run, "run file", "retrieve");
  require_input(o.qrels, "qrels file");
  if (o.out.empty()) throw DataError("eval-retrieval: no --out path");
  o.mc.validate();
  auto run = data::read_run(o.run);
  auto qrels = data::load_qrels(o.qrels);
  if (o.complete) pad_run_with_qrels(run, qrels);
  auto eval = metrics::evaluate_run(run, qrels, o.mc);
  atomic_write_file(o.out, metrics::retrieval_report_json(eval) + "\n");
  if (!o.pr_out.empty())
    atomic_write_file(o.pr_out, metrics::pr_points_csv(metrics::pr_curve(run, qrels, o.mc)));
  std::cout << "retrieval over " << eval.evaluated << " queries: MAP "
            << format_real(eval.map, 4) << ", MRR " << format_real(eval.mrr, 4) << ", NDCG@"
            << o.mc.ndcg_k << " " << format_real(eval.ndcg3, 4) << ", P@1 "
            << format_real(eval.p1, 4) << "; report " << o.out << "\n";
  return eval;
}

// ---------------------------------------------------------------------------
// eval-extractive

struct EvalExtractiveOpts {
  std::string predictions, dialogues, out;
};

metrics::ExtractiveEval run_eval_extractive(const EvalExtractiveOpts& o) {
  require_artifact(o.predictions, "prediction file", "read");
  require_input(o.dialogues, "dialogue file");
  if (o.out.empty()) throw DataError("eval-extractive: no --out path");
  auto predictions = reader::load_predictions(o.predictions);
  auto dialogues = data::load_dialogues(o.dialogues);
  auto turns = turn_lookup(dialogues);

  std::vector<metrics::AnswerPair> pairs;
  int skipped = 0;
  for (const auto& p : predictions) {
    auto it = turns.find({p.topic_id, p.turn_id});
    if (it == turns.end())
      throw DataError("prediction for unknown question " + make_query_id(p.topic_id, p.turn_id));
    const auto& turn = it->second.first->turns[it->second.second];
    std::optional<std::string> gold;
    if (turn.is_answerable) {
      if (!turn.gold_answer_text) {
        ++skipped;
        continue;
      }
      gold = *turn.gold_answer_text;
    }
    pairs.push_back({p.answer, gold});
  }
  if (pairs.empty()) throw DataError("no predictions with gold annotations in " + o.predictions);
  auto eval = metrics::evaluate_extractive(pairs);

  ordered_json report;
  report["em"] = eval.em;
  report["f1"] = eval.f1;
  if (eval.na_acc)
    report["na_accuracy"] = *eval.na_acc;
  else
    report["na_accuracy"] = nullptr;
  report["total"] = eval.total;
  report["na_total"] = eval.na_total;
  report["skipped"] = skipped;
  write_report(o.out, report);
  std::cout << "extractive over " << eval.total << " questions: EM " << format_real(eval.em, 4)
            << ", F1 " << format_real(eval.f1, 4) << "; report " << o.out << "\n";
  return eval;
}

// ---------------------------------------------------------------------------
// breakdown

struct BreakdownOpts {
  std::string original, qr, human;
  std::string qrels, dialogues, copies;
  std::string metric = "p1";
  std::vector<std::string> thresholds;
  std::string out, csv_out;
  metrics::RetrievalMetricsConfig mc;
  bool complete = true;
};

std::map<breakdown::QuestionKey, double> run_metric_map(const std::string& run_path,
                                                        const data::Qrels& qrels,
                                                        const std::string& metric,
                                                        const metrics::RetrievalMetricsConfig& mc,
                                                        bool complete) {
  auto run = data::read_run(run_path);
  if (complete) pad_run_with_qrels(run, qrels);
  auto eval = metrics::evaluate_run(run, qrels, mc);
  std::map<breakdown::QuestionKey, double> map;
  for (const auto& q : eval.per_query) {
    std::optional<double> value;
    if (metric == "p1")
      value = q.p1;
    else if (metric == "rr")
      value = q.rr;
    else if (metric == "ap")
      value = q.ap;
    else if (metric == "ndcg")
      value = q.ndcg;
    if (!value) continue;  // excluded by the qrels, identically for every variant
    map[parse_query_id(q.query_id)] = *value;
  }
  return map;
}

std::map<breakdown::QuestionKey, double> prediction_metric_map(const std::string& predictions_path,
                                                               const TurnLookup& turns,
                                                               const std::string& metric) {
  std::map<breakdown::QuestionKey, double> map;
  for (const auto& p : reader::load_predictions(predictions_path)) {
    auto it = turns.find({p.topic_id, p.turn_id});
    if (it == turns.end())
      throw DataError("prediction for unknown question " + make_query_id(p.topic_id, p.turn_id));
    const auto& turn = it->second.first->turns[it->second.second];
    std::optional<std::string> gold;
    if (turn.is_answerable) {
      if (!turn.gold_answer_text) continue;  // unannotated, skipped for every variant alike
      gold = *turn.gold_answer_text;
    }
    double value = metric == "em" ? metrics::answer_em(p.answer, gold)
                                  : metrics::answer_f1(p.answer, gold);
    map[{p.topic_id, p.turn_id}] = value;
  }
  return map;
}

std::string default_threshold(const std::string& metric) {
  if (metric == "p1") return "P@1>=1";
  if (metric == "rr") return "RR>=1";
  if (metric == "ap") return "AP>0";
  if (metric == "ndcg") return "NDCG@3>0";
  if (metric == "em") return "EM>=1";
  return "F1>0";
}

void run_breakdown_cmd(const BreakdownOpts& o) {
  bool extractive = o.metric == "em" || o.metric == "f1";
  if (!extractive && o.metric != "p1" && o.metric != "rr" && o.metric != "ap" &&
      o.metric != "ndcg")
    throw DataError("unknown breakdown metric '" + o.metric + "' (p1|rr|ap|ndcg|em|f1)");

  std::map<breakdown::QuestionKey, double> original, qr, human;
  if (extractive) {
    require_input(o.dialogues, "dialogue file");
    require_artifact(o.original, "original prediction file", "read");
    require_artifact(o.qr, "rewrite prediction file", "read");
    require_artifact(o.human, "human prediction file", "read");
    auto dialogues = data::load_dialogues(o.dialogues);
    auto turns = turn_lookup(dialogues);
    original = prediction_metric_map(o.original, turns, o.metric);
    qr = prediction_metric_map(o.qr, turns, o.metric);
    human = prediction_metric_map(o.human, turns, o.metric);
  } else {
    require_input(o.qrels, "qrels file");
    require_artifact(o.original, "original run file", "retrieve");
    require_artifact(o.qr, "rewrite run file", "retrieve");
    require_artifact(o.human, "human run file", "retrieve");
    o.mc.validate();
    auto qrels = data::load_qrels(o.qrels);
    original = run_metric_map(o.original, qrels, o.metric, o.mc, o.complete);
    qr = run_metric_map(o.qr, qrels, o.metric, o.mc, o.complete);
    human = run_metric_map(o.human, qrels, o.metric, o.mc, o.complete);
  }

  std::vector<breakdown::ThresholdSpec> specs;
  if (o.thresholds.empty())
    specs.push_back(breakdown::parse_threshold_spec(default_threshold(o.metric)));
  else
    for (const auto& spec : o.thresholds) specs.push_back(breakdown::parse_threshold_spec(spec));

  std::map<breakdown::QuestionKey, bool> copies;
  if (!o.copies.empty()) {
    require_artifact(o.copies, "rewrite file", "rewrite");
    copies = copies_by_key(rewrite::load_rewrite_file(o.copies));
  }

  auto table = breakdown::run_breakdown(original, qr, human, copies, specs);
  auto text = breakdown::render_text(table);
  std::cout << text;
  if (!o.out.empty()) atomic_write_file(o.out, text);
  if (!o.csv_out.empty()) atomic_write_file(o.csv_out, breakdown::render_csv(table));
}

// ---------------------------------------------------------------------------
// synth

struct SynthOpts {
  std::string out_dir;
  int passages = 200;
  int num_dialogues = 20;
  int turns = 5;
  int na_turns = 1;
  double train_fraction = 0.8;
  uint64_t seed = 7;
};

const std::vector<std::string>& synth_categories() {
  static const std::vector<std::string> pool = {"relic",  "statue", "archive", "engine",
                                                "garden", "bridge", "market",  "temple"};
  return pool;
}

const std::vector<std::string>& synth_places() {
  static const std::vector<std::string> pool = {"north",   "harbor", "valley",
                                                "plateau", "island", "quarter"};
  return pool;
}

const std::vector<std::string>& synth_qualities() {
  static const std::vector<std::string> pool = {"rare", "old", "famous", "large", "quiet", "busy"};
  return pool;
}

const std::vector<std::string>& synth_anaphora() {
  static const std::vector<std::string> pool = {"what about it", "why is that", "and then",
                                                "what of it", "how about that"};
  return pool;
}

/// Pronounceable word unique to `i`, disjoint from the shared pools.
std::string synth_entity(int i) {
  static const std::vector<std::string> syllables = {"ka", "lo", "mi", "ru", "ve", "zo",
                                                     "ti", "ba", "ne", "du", "fo", "gi"};
  std::string word;
  int n = i;
  for (int s = 0; s < 3; ++s) {
    word += syllables[n % static_cast<int>(syllables.size())];
    n /= static_cast<int>(syllables.size());
  }
  return word;
}

template <typename T>
const T& pick(const std::vector<T>& pool, std::mt19937_64& rng) {
  return pool[rng() % pool.size()];
}

/// Fisher-Yates with the modulo draw so shuffles are identical across
/// standard libraries.
template <typename T>
void stable_seeded_shuffle(std::vector<T>& items, std::mt19937_64& rng) {
  for (size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng() % i]);
}

void run_synth(const SynthOpts& o) {
  if (o.out_dir.empty()) throw DataError("synth: no --out-dir");
  if (o.num_dialogues < 1 || o.turns < 1 || o.na_turns < 0 || o.na_turns >= o.turns)
    throw DataError("synth: need turns > na-turns >= 0 and at least one dialogue");
  if (o.train_fraction <= 0.0 || o.train_fraction > 1.0)
    throw DataError("synth: train fraction must be in (0, 1]");
  int answerable = o.turns - o.na_turns;
  int gold_count = o.num_dialogues * answerable;
  if (o.passages < gold_count)
    throw DataError("synth: need at least " + std::to_string(gold_count) + " passages");

  std::mt19937_64 rng(o.seed);
  fs::create_directories(o.out_dir);

  // One uniquely-keyed gold passage per answerable turn, the rest filler
  // built from the shared pools so only the key is discriminative.
  std::vector<data::Passage> passages;
  std::vector<std::string> answers(gold_count), places(gold_count);
  for (int i = 0; i < gold_count; ++i) {
    auto entity = synth_entity(i);
    const auto& category = pick(synth_categories(), rng);
    const auto& place = pick(synth_places(), rng);
    const auto& quality = pick(synth_qualities(), rng);
    std::string text = entity + " is a " + category + " from the " + place + " . the " +
                       quality + " " + entity + " draws visitors every season .";
    passages.push_back({"p" + std::to_string(i), text});
    answers[i] = category;
    places[i] = place;
  }
  for (int i = 0; i < o.passages - gold_count; ++i) {
    const auto& category = pick(synth_categories(), rng);
    const auto& place = pick(synth_places(), rng);
    const auto& quality = pick(synth_qualities(), rng);
    std::string text = "the " + category + " near the " + place + " is " + quality +
                       " . many call the " + place + " " + quality + " .";
    passages.push_back({"f" + std::to_string(i), text});
  }
  stable_seeded_shuffle(passages, rng);

  std::vector<data::Dialogue> dialogues;
  data::Qrels qrels;
  for (int d = 0; d < o.num_dialogues; ++d) {
    data::Dialogue dialogue;
    dialogue.topic_id = "t" + std::to_string(d);
    for (int a = 0; a < answerable; ++a) {
      int gold = d * answerable + a;
      auto entity = synth_entity(gold);
      // The place word pulls same-place passages into the candidate pool (so
      // reranker training sees negatives); the entity term is still the only
      // discriminative key, so the gold passage stays at rank one.
      auto question = "what is " + entity + " from the " + places[gold];
      data::Turn turn;
      turn.turn_id = a;
      turn.original_question = a == 0 ? question : pick(synth_anaphora(), rng);
      turn.human_rewrite = question;
      turn.is_answerable = true;
      turn.gold_answer_text = answers[gold];
      // "<entity> is a <category> ..." puts the answer right after "is a ".
      long start = static_cast<long>(entity.size() + 6);
      turn.gold_answer_span = data::AnswerSpan{"p" + std::to_string(gold), start,
                                               start + static_cast<long>(answers[gold].size())};
      dialogue.turns.push_back(std::move(turn));
      qrels[make_query_id(dialogue.topic_id, a)]["p" + std::to_string(gold)] = 2;
    }
    for (int j = 0; j < o.na_turns; ++j) {
      data::Turn turn;
      turn.turn_id = answerable + j;
      turn.original_question = pick(synth_anaphora(), rng);
      turn.human_rewrite = "is there a " + pick(synth_categories(), rng) + " near the " +
                           pick(synth_places(), rng);
      turn.is_answerable = false;
      dialogue.turns.push_back(std::move(turn));
    }
    dialogues.push_back(std::move(dialogue));
  }

  int train_count = std::max(1, static_cast<int>(std::lround(o.train_fraction * o.num_dialogues)));
  train_count = std::min(train_count, o.num_dialogues);
  std::vector<data::Dialogue> train(dialogues.begin(), dialogues.begin() + train_count);

  auto path = [&](const char* name) { return (fs::path(o.out_dir) / name).string(); };
  data::write_collection(passages, path("collection.tsv"));
  data::write_dialogues(dialogues, path("dialogues.json"));
  data::write_dialogues(train, path("dialogues_train.json"));
  data::write_qrels(qrels, path("qrels.txt"));
  std::cout << "synthesized " << passages.size() << " passages, " << dialogues.size()
            << " dialogues (" << train_count << " for training), " << qrels.size()
            << " judged questions in " << o.out_dir << "\n";
}

// ---------------------------------------------------------------------------
// pipeline

struct PipelineOpts {
  std::string collection, dialogues, qrels, index_dir, out_dir;
  std::string variant = "human";
  std::string rewriter_checkpoint, reranker_checkpoint, reader_checkpoint;
  std::string history = "recursive";
  int k = 3;
  bool stem = false;
  retrieval::RetrievalConfig rc;
  metrics::RetrievalMetricsConfig mc;
};

void run_pipeline(const PipelineOpts& o) {
  require_input(o.collection, "collection");
  require_input(o.dialogues, "dialogue file");
  require_input(o.qrels, "qrels file");
  if (o.out_dir.empty()) throw DataError("pipeline: no --out-dir");
  if (o.index_dir.empty()) throw DataError("pipeline: no --index-dir");
  fs::create_directories(o.out_dir);

  if (!fs::exists(fs::path(o.index_dir) / "meta.json"))
    run_index({o.collection, o.index_dir, o.stem});

  std::vector<std::string> variants = {"original"};
  if (o.variant != "original" && o.variant != "human") variants.push_back(o.variant);
  variants.push_back("human");

  auto out = [&](const std::string& name) { return (fs::path(o.out_dir) / name).string(); };
  std::map<std::string, std::string> rewrite_files, final_runs, prediction_files;
  std::map<std::string, metrics::RetrievalEval> retrieval_evals;

  for (const auto& v : variants) {
    auto rewrites = out("rewrites_" + v + ".jsonl");
    RewriteOpts ro;
    ro.dialogues = o.dialogues;
    ro.out = rewrites;
    ro.variant = v;
    ro.index_dir = o.index_dir;
    ro.checkpoint = o.rewriter_checkpoint;
    ro.history = o.history;
    ro.k = o.k;
    run_rewrite(ro);
    rewrite_files[v] = rewrites;

    auto run_path = out("run_" + v + ".txt");
    run_retrieve({o.index_dir, rewrites, run_path, "bm25", o.rc});
    if (!o.reranker_checkpoint.empty()) {
      auto reranked = out("run_" + v + "_reranked.txt");
      run_rerank({o.index_dir, rewrites, run_path, reranked, o.reranker_checkpoint, "reranker"});
      run_path = reranked;
    }
    final_runs[v] = run_path;

    retrieval_evals[v] = run_eval_retrieval({run_path, o.qrels,
                                             out("retrieval_eval_" + v + ".json"),
                                             out("pr_" + v + ".csv"), o.mc, true});

    if (!o.reader_checkpoint.empty()) {
      std::string mode = v == "original" ? "original" : v == "human" ? "human" : "rewrite";
      auto predictions = out("predictions_" + v + ".jsonl");
      run_read({o.index_dir, run_path, o.reader_checkpoint, o.dialogues, rewrites, predictions,
                mode, o.k});
      prediction_files[v] = predictions;
      run_eval_extractive({predictions, o.dialogues, out("extractive_eval_" + v + ".json")});
    }
  }

  run_eval_qr({rewrite_files.at(o.variant), o.dialogues,
               out("rewrite_eval_" + o.variant + ".json"), true});

  BreakdownOpts bo;
  bo.original = final_runs.at("original");
  bo.qr = final_runs.at(o.variant);
  bo.human = final_runs.at("human");
  bo.qrels = o.qrels;
  bo.copies = rewrite_files.at(o.variant);
  bo.metric = "p1";
  bo.out = out("breakdown.txt");
  bo.csv_out = out("breakdown.csv");
  bo.mc = o.mc;
  run_breakdown_cmd(bo);

  if (!o.reader_checkpoint.empty()) {
    BreakdownOpts eb;
    eb.original = prediction_files.at("original");
    eb.qr = prediction_files.at(o.variant);
    eb.human = prediction_files.at("human");
    eb.dialogues = o.dialogues;
    eb.copies = rewrite_files.at(o.variant);
    eb.metric = "f1";
    eb.out = out("breakdown_extractive.txt");
    eb.csv_out = out("breakdown_extractive.csv");
    run_breakdown_cmd(eb);
  }

  std::cout << "pipeline summary (MRR):";
  for (const auto& v : variants)
    std::cout << " " << v << "=" << format_real(retrieval_evals.at(v).mrr, 4);
  std::cout << "\n";
}

}  // namespace

// ---------------------------------------------------------------------------

int main(int argc, char** argv) {
  CLI::App app{"question rewriting, passage retrieval, span reading, and evaluation toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "JSON file of per-flag defaults; explicit flags win");
  int threads = 1;
  app.add_option("--threads", threads, "worker cap (stages currently run single-threaded)")
      ->check(CLI::PositiveNumber);

  json cfg = json::object();
  try {
    auto found = find_config_flag(argc, argv);
    if (!found.empty()) cfg = load_config_json(found);
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }

  auto sub = [&](const char* name, const char* help) {
    auto* cmd = app.add_subcommand(name, help);
    cmd->fallthrough();
    return cmd;
  };

  IndexOpts index_opts;
  {
    auto* cmd = sub("index", "build and persist the inverted index for a passage collection");
    cfg_default(cfg, "collection", index_opts.collection);
    cfg_default(cfg, "index_dir", index_opts.index_dir);
    cfg_default(cfg, "stem", index_opts.stem);
    cmd->add_option("--collection", index_opts.collection, "passage TSV (id<TAB>text)");
    cmd->add_option("--index-dir", index_opts.index_dir, "output directory");
    cmd->add_flag("--stem,!--no-stem", index_opts.stem, "stem index terms");
    cmd->callback([&index_opts] { run_index(index_opts); });
  }

  TrainQrOpts train_qr_opts;
  {
    auto* cmd = sub("train-qr", "train the question rewriter on annotated dialogues");
    cfg_default(cfg, "dialogues", train_qr_opts.dialogues);
    cfg_default(cfg, "rewriter_checkpoint", train_qr_opts.out);
    cfg_default(cfg, "vocab_size", train_qr_opts.vocab_size);
    cfg_default(cfg, "mixture_components", train_qr_opts.mixture_components);
    cfg_default(cfg, "window", train_qr_opts.window);
    cfg_default(cfg, "include_answers", train_qr_opts.include_answers);
    cfg_default(cfg, "max_rewrite_len", train_qr_opts.max_rewrite_len);
    cfg_default(cfg, "steps", train_qr_opts.steps);
    cfg_default(cfg, "lr", train_qr_opts.lr);
    cfg_default(cfg, "target_loss", train_qr_opts.target_loss);
    cfg_default(cfg, "seed", train_qr_opts.seed);
    cmd->add_option("--dialogues", train_qr_opts.dialogues, "dialogue JSON with human rewrites");
    cmd->add_option("--out", train_qr_opts.out, "checkpoint path");
    cmd->add_option("--vocab-size", train_qr_opts.vocab_size, "vocabulary cap");
    cmd->add_option("--mixture-components", train_qr_opts.mixture_components,
                    "softmax mixture size");
    cmd->add_option("--window", train_qr_opts.window, "history turns in the context");
    cmd->add_flag("--include-answers,!--no-include-answers", train_qr_opts.include_answers,
                  "interleave answers into the context");
    cmd->add_option("--max-rewrite-len", train_qr_opts.max_rewrite_len, "decode budget");
    cmd->add_option("--steps", train_qr_opts.steps, "optimizer steps");
    cmd->add_option("--lr", train_qr_opts.lr, "learning rate");
    cmd->add_option("--target-loss", train_qr_opts.target_loss,
                    "stop early below this loss (0 = run all steps)");
    cmd->add_option("--seed", train_qr_opts.seed, "parameter init seed");
    add_hyper_options(cmd, cfg, train_qr_opts.hyper);
    cmd->callback([&train_qr_opts] { run_train_qr(train_qr_opts); });
  }

  RewriteOpts rewrite_opts;
  {
    auto* cmd = sub("rewrite", "produce a rewrite file for one input variant");
    cfg_default(cfg, "dialogues", rewrite_opts.dialogues);
    cfg_default(cfg, "index_dir", rewrite_opts.index_dir);
    cfg_default(cfg, "rewriter_checkpoint", rewrite_opts.checkpoint);
    cfg_default(cfg, "history", rewrite_opts.history);
    cfg_default(cfg, "k", rewrite_opts.k);
    cfg_default(cfg, "idf_threshold", rewrite_opts.idf_threshold);
    cmd->add_option("--dialogues", rewrite_opts.dialogues, "dialogue JSON");
    cmd->add_option("--out", rewrite_opts.out, "rewrite JSONL output");
    cmd->add_option("--qr", rewrite_opts.variant, "input variant")
        ->check(CLI::IsMember({"original", "kdt", "kdt-star", "transformer", "human"}));
    cmd->add_option("--index-dir", rewrite_opts.index_dir, "index for kdt-star idf");
    cmd->add_option("--checkpoint", rewrite_opts.checkpoint, "rewriter checkpoint");
    cmd->add_option("--history", rewrite_opts.history, "transformer history source")
        ->check(CLI::IsMember({"recursive", "gold"}));
    cmd->add_option("--k", rewrite_opts.k, "history turns for the kdt variants");
    cmd->add_option("--idf-threshold", rewrite_opts.idf_threshold, "kdt-star keyword cutoff");
    cmd->callback([&rewrite_opts] { run_rewrite(rewrite_opts); });
  }

  RetrieveOpts retrieve_opts;
  {
    auto* cmd = sub("retrieve", "first-phase candidate retrieval for a rewrite file");
    cfg_default(cfg, "index_dir", retrieve_opts.index_dir);
    cfg_default(cfg, "tag", retrieve_opts.tag);
    cmd->add_option("--index-dir", retrieve_opts.index_dir, "index directory");
    cmd->add_option("--rewrites", retrieve_opts.rewrites, "rewrite JSONL");
    cmd->add_option("--run", retrieve_opts.run, "output run file");
    cmd->add_option("--tag", retrieve_opts.tag, "run tag");
    add_retrieval_options(cmd, cfg, retrieve_opts.rc);
    cmd->callback([&retrieve_opts] { run_retrieve(retrieve_opts); });
  }

  RerankOpts rerank_opts;
  {
    auto* cmd = sub("rerank", "second-phase rescoring of a candidate run");
    cfg_default(cfg, "index_dir", rerank_opts.index_dir);
    cfg_default(cfg, "reranker_checkpoint", rerank_opts.checkpoint);
    cmd->add_option("--index-dir", rerank_opts.index_dir, "index directory");
    cmd->add_option("--rewrites", rerank_opts.rewrites, "rewrite JSONL (question text)");
    cmd->add_option("--run-in", rerank_opts.run_in, "candidate run file");
    cmd->add_option("--run-out", rerank_opts.run_out, "output run file");
    cmd->add_option("--checkpoint", rerank_opts.checkpoint, "reranker checkpoint");
    cmd->add_option("--tag", rerank_opts.tag, "run tag");
    cmd->callback([&rerank_opts] { run_rerank(rerank_opts); });
  }

  TrainRerankerOpts train_reranker_opts;
  {
    auto* cmd = sub("train-reranker", "train the cross-encoder on qrels-labeled pairs");
    cfg_default(cfg, "qrels", train_reranker_opts.qrels);
    cfg_default(cfg, "index_dir", train_reranker_opts.index_dir);
    cfg_default(cfg, "collection", train_reranker_opts.collection);
    cfg_default(cfg, "reranker_checkpoint", train_reranker_opts.out);
    cfg_default(cfg, "vocab_size", train_reranker_opts.vocab_size);
    cfg_default(cfg, "negatives", train_reranker_opts.negatives);
    cfg_default(cfg, "relevance_cutoff", train_reranker_opts.relevance_cutoff);
    cfg_default(cfg, "steps", train_reranker_opts.steps);
    cfg_default(cfg, "lr", train_reranker_opts.lr);
    cfg_default(cfg, "seed", train_reranker_opts.seed);
    cmd->add_option("--rewrites", train_reranker_opts.rewrites, "rewrite JSONL (question text)");
    cmd->add_option("--qrels", train_reranker_opts.qrels, "relevance judgments");
    cmd->add_option("--index-dir", train_reranker_opts.index_dir, "index directory");
    cmd->add_option("--collection", train_reranker_opts.collection, "passage TSV for the vocabulary");
    cmd->add_option("--out", train_reranker_opts.out, "checkpoint path");
    cmd->add_option("--vocab-size", train_reranker_opts.vocab_size, "vocabulary cap");
    cmd->add_option("--negatives", train_reranker_opts.negatives, "negatives per query");
    cmd->add_option("--relevance-cutoff", train_reranker_opts.relevance_cutoff,
                    "grade treated as relevant");
    cmd->add_option("--steps", train_reranker_opts.steps, "optimizer steps");
    cmd->add_option("--lr", train_reranker_opts.lr, "learning rate");
    cmd->add_option("--seed", train_reranker_opts.seed, "parameter init seed");
    add_retrieval_options(cmd, cfg, train_reranker_opts.rc);
    add_hyper_options(cmd, cfg, train_reranker_opts.hyper);
    cmd->callback([&train_reranker_opts] { run_train_reranker(train_reranker_opts); });
  }

  TrainReaderOpts train_reader_opts;
  {
    auto* cmd = sub("train-reader", "train the extractive span reader");
    cfg_default(cfg, "dialogues", train_reader_opts.dialogues);
    cfg_default(cfg, "index_dir", train_reader_opts.index_dir);
    cfg_default(cfg, "collection", train_reader_opts.collection);
    cfg_default(cfg, "reader_checkpoint", train_reader_opts.out);
    cfg_default(cfg, "qa_input_mode", train_reader_opts.qa_input_mode);
    cfg_default(cfg, "k", train_reader_opts.k);
    cfg_default(cfg, "vocab_size", train_reader_opts.vocab_size);
    cfg_default(cfg, "max_span_len", train_reader_opts.max_span_len);
    cfg_default(cfg, "steps", train_reader_opts.steps);
    cfg_default(cfg, "lr", train_reader_opts.lr);
    cfg_default(cfg, "seed", train_reader_opts.seed);
    cmd->add_option("--dialogues", train_reader_opts.dialogues, "dialogue JSON");
    cmd->add_option("--index-dir", train_reader_opts.index_dir, "index directory");
    cmd->add_option("--collection", train_reader_opts.collection, "passage TSV for the vocabulary");
    cmd->add_option("--rewrites", train_reader_opts.rewrites, "rewrite JSONL for --qa-input-mode rewrite");
    cmd->add_option("--out", train_reader_opts.out, "checkpoint path");
    cmd->add_option("--qa-input-mode", train_reader_opts.qa_input_mode, "question form")
        ->check(CLI::IsMember({"original", "original-kdt", "rewrite", "human"}));
    cmd->add_option("--k", train_reader_opts.k, "history turns for original-kdt");
    cmd->add_option("--vocab-size", train_reader_opts.vocab_size, "vocabulary cap");
    cmd->add_option("--max-span-len", train_reader_opts.max_span_len, "answer length cap");
    cmd->add_option("--steps", train_reader_opts.steps, "optimizer steps");
    cmd->add_option("--lr", train_reader_opts.lr, "learning rate");
    cmd->add_option("--seed", train_reader_opts.seed, "parameter init seed");
    add_retrieval_options(cmd, cfg, train_reader_opts.rc);
    add_hyper_options(cmd, cfg, train_reader_opts.hyper);
    cmd->callback([&train_reader_opts] { run_train_reader(train_reader_opts); });
  }

  ReadOpts read_opts;
  {
    auto* cmd = sub("read", "predict answer spans from the top retrieved passages");
    cfg_default(cfg, "index_dir", read_opts.index_dir);
    cfg_default(cfg, "dialogues", read_opts.dialogues);
    cfg_default(cfg, "reader_checkpoint", read_opts.checkpoint);
    cfg_default(cfg, "qa_input_mode", read_opts.qa_input_mode);
    cfg_default(cfg, "k", read_opts.k);
    cmd->add_option("--index-dir", read_opts.index_dir, "index directory");
    cmd->add_option("--run", read_opts.run, "run file supplying the top passage");
    cmd->add_option("--checkpoint", read_opts.checkpoint, "reader checkpoint");
    cmd->add_option("--dialogues", read_opts.dialogues, "dialogue JSON");
    cmd->add_option("--rewrites", read_opts.rewrites, "rewrite JSONL for --qa-input-mode rewrite");
    cmd->add_option("--out", read_opts.out, "prediction JSONL output");
    cmd->add_option("--qa-input-mode", read_opts.qa_input_mode, "question form")
        ->check(CLI::IsMember({"original", "original-kdt", "rewrite", "human"}));
    cmd->add_option("--k", read_opts.k, "history turns for original-kdt");
    cmd->callback([&read_opts] { run_read(read_opts); });
  }

  EvalQrOpts eval_qr_opts;
  {
    auto* cmd = sub("eval-qr", "score a rewrite file against the human annotations");
    cfg_default(cfg, "dialogues", eval_qr_opts.dialogues);
    cfg_default(cfg, "embed", eval_qr_opts.embed);
    cmd->add_option("--rewrites", eval_qr_opts.rewrites, "rewrite JSONL");
    cmd->add_option("--dialogues", eval_qr_opts.dialogues, "dialogue JSON with references");
    cmd->add_option("--out", eval_qr_opts.out, "report JSON output");
    cmd->add_flag("--embed,!--no-embed", eval_qr_opts.embed, "include embedding cosine similarity");
    cmd->callback([&eval_qr_opts] { run_eval_qr(eval_qr_opts); });
  }

  EvalRetrievalOpts eval_retrieval_opts;
  {
    auto* cmd = sub("eval-retrieval", "score a run file against qrels");
    cfg_default(cfg, "qrels", eval_retrieval_opts.qrels);
    cfg_default(cfg, "complete", eval_retrieval_opts.complete);
    cmd->add_option("--run", eval_retrieval_opts.run, "run file");
    cmd->add_option("--qrels", eval_retrieval_opts.qrels, "relevance judgments");
    cmd->add_option("--out", eval_retrieval_opts.out, "report JSON output");
    cmd->add_option("--pr-out", eval_retrieval_opts.pr_out, "11-point PR curve CSV output");
    cmd->add_flag("--complete,!--no-complete", eval_retrieval_opts.complete,
                  "count judged queries missing from the run as zeros");
    add_metric_options(cmd, cfg, eval_retrieval_opts.mc);
    cmd->callback([&eval_retrieval_opts] { run_eval_retrieval(eval_retrieval_opts); });
  }

  EvalExtractiveOpts eval_extractive_opts;
  {
    auto* cmd = sub("eval-extractive", "score a prediction file against the gold answers");
    cfg_default(cfg, "dialogues", eval_extractive_opts.dialogues);
    cmd->add_option("--predictions", eval_extractive_opts.predictions, "prediction JSONL");
    cmd->add_option("--dialogues", eval_extractive_opts.dialogues, "dialogue JSON with answers");
    cmd->add_option("--out", eval_extractive_opts.out, "report JSON output");
    cmd->callback([&eval_extractive_opts] { run_eval_extractive(eval_extractive_opts); });
  }

  BreakdownOpts breakdown_opts;
  {
    auto* cmd = sub("breakdown",
                    "bucket questions by success under the original, rewritten, and human inputs");
    cfg_default(cfg, "qrels", breakdown_opts.qrels);
    cfg_default(cfg, "dialogues", breakdown_opts.dialogues);
    cfg_default(cfg, "complete", breakdown_opts.complete);
    cmd->add_option("--original", breakdown_opts.original,
                    "run (or prediction, for em/f1) file for the original questions");
    cmd->add_option("--qr", breakdown_opts.qr, "run or prediction file for the model rewrites");
    cmd->add_option("--human", breakdown_opts.human, "run or prediction file for the human rewrites");
    cmd->add_option("--qrels", breakdown_opts.qrels, "relevance judgments (retrieval metrics)");
    cmd->add_option("--dialogues", breakdown_opts.dialogues, "dialogue JSON (em/f1 metrics)");
    cmd->add_option("--copies", breakdown_opts.copies, "rewrite JSONL supplying was_copied flags");
    cmd->add_option("--metric", breakdown_opts.metric, "per-question metric")
        ->check(CLI::IsMember({"p1", "rr", "ap", "ndcg", "em", "f1"}));
    cmd->add_option("--thresholds", breakdown_opts.thresholds,
                    "success predicates such as P@1>=1 (repeatable)")
        ->delimiter(',');
    cmd->add_option("--out", breakdown_opts.out, "text table output");
    cmd->add_option("--csv-out", breakdown_opts.csv_out, "CSV table output");
    cmd->add_flag("--complete,!--no-complete", breakdown_opts.complete,
                  "count judged queries missing from a run as zeros");
    add_metric_options(cmd, cfg, breakdown_opts.mc);
    cmd->callback([&breakdown_opts] { run_breakdown_cmd(breakdown_opts); });
  }

  PipelineOpts pipeline_opts;
  {
    auto* cmd = sub("pipeline", "rewrite, retrieve, rerank, read, evaluate, and break down");
    cfg_default(cfg, "collection", pipeline_opts.collection);
    cfg_default(cfg, "dialogues", pipeline_opts.dialogues);
    cfg_default(cfg, "qrels", pipeline_opts.qrels);
    cfg_default(cfg, "index_dir", pipeline_opts.index_dir);
    cfg_default(cfg, "out_dir", pipeline_opts.out_dir);
    cfg_default(cfg, "rewriter_checkpoint", pipeline_opts.rewriter_checkpoint);
    cfg_default(cfg, "reranker_checkpoint", pipeline_opts.reranker_checkpoint);
    cfg_default(cfg, "reader_checkpoint", pipeline_opts.reader_checkpoint);
    cfg_default(cfg, "history", pipeline_opts.history);
    cfg_default(cfg, "k", pipeline_opts.k);
    cfg_default(cfg, "stem", pipeline_opts.stem);
    cmd->add_option("--collection", pipeline_opts.collection, "passage TSV");
    cmd->add_option("--dialogues", pipeline_opts.dialogues, "dialogue JSON");
    cmd->add_option("--qrels", pipeline_opts.qrels, "relevance judgments");
    cmd->add_option("--index-dir", pipeline_opts.index_dir, "index directory (built when missing)");
    cmd->add_option("--out-dir", pipeline_opts.out_dir, "artifact directory");
    cmd->add_option("--qr", pipeline_opts.variant, "question variant to compare against original and human")
        ->check(CLI::IsMember({"original", "kdt", "kdt-star", "transformer", "human"}));
    cmd->add_option("--rewriter-checkpoint", pipeline_opts.rewriter_checkpoint,
                    "needed for --qr transformer");
    cmd->add_option("--reranker-checkpoint", pipeline_opts.reranker_checkpoint,
                    "enables the rerank stage");
    cmd->add_option("--reader-checkpoint", pipeline_opts.reader_checkpoint,
                    "enables the read stage");
    cmd->add_option("--history", pipeline_opts.history, "transformer history source")
        ->check(CLI::IsMember({"recursive", "gold"}));
    cmd->add_option("--k", pipeline_opts.k, "history turns for the kdt variants");
    cmd->add_flag("--stem,!--no-stem", pipeline_opts.stem, "stem index terms when building");
    add_retrieval_options(cmd, cfg, pipeline_opts.rc);
    add_metric_options(cmd, cfg, pipeline_opts.mc);
    cmd->callback([&pipeline_opts] { run_pipeline(pipeline_opts); });
  }

  SynthOpts synth_opts;
  {
    auto* cmd = sub("synth", "generate a synthetic corpus whose rewrites key their gold passages");
    cfg_default(cfg, "out_dir", synth_opts.out_dir);
    cfg_default(cfg, "seed", synth_opts.seed);
    cmd->add_option("--out-dir", synth_opts.out_dir, "output directory");
    cmd->add_option("--passages", synth_opts.passages, "collection size");
    cmd->add_option("--num-dialogues", synth_opts.num_dialogues, "dialogue count");
    cmd->add_option("--turns", synth_opts.turns, "turns per dialogue");
    cmd->add_option("--na-turns", synth_opts.na_turns, "unanswerable turns per dialogue");
    cmd->add_option("--train-fraction", synth_opts.train_fraction,
                    "share of dialogues in dialogues_train.json");
    cmd->add_option("--seed", synth_opts.seed, "generator seed");
    cmd->callback([&synth_opts] { run_synth(synth_opts); });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const InternalError& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return 3;
  }
  return 0;
}
