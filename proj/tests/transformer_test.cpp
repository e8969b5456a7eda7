#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <random>

#include "cqr/common.hpp"
#include "cqr/tensor.hpp"
#include "cqr/transformer.hpp"

using namespace cqr;
using namespace cqr::nn;

namespace {

TransformerConfig tiny_config(bool causal) {
  TransformerConfig c;
  c.num_layers = 2;
  c.num_heads = 2;
  c.model_dim = 16;
  c.max_seq_len = 32;
  c.feed_forward_dim = 32;
  c.causal = causal;
  return c;
}

ParameterStore make_store_with_vocab(uint64_t seed, int vocab, int dim) {
  ParameterStore store(seed);
  store.get_or_create("wte", vocab, dim, ParameterStore::Init::kNormal);
  return store;
}

// Cross-entropy of next-token prediction over the whole sequence.
TensorPtr lm_loss(ParameterStore& store, const TransformerConfig& config,
                  const std::vector<int>& ids) {
  auto out = decoder_forward(std::vector<int>(ids.begin(), ids.end() - 1), store, config);
  auto logits = matmul(out.hidden, transpose(store.at("wte")));
  std::vector<int> targets(ids.begin() + 1, ids.end());
  auto picked = gather_cols(softmax_rows(logits), targets);
  return masked_mean(scale(log_elem(picked), -1.0), std::vector<double>(targets.size(), 1.0));
}

}  // namespace

TEST_CASE("config invariants are enforced") {
  TransformerConfig c = tiny_config(true);
  c.model_dim = 15;
  CHECK_THROWS_AS(c.validate(), InternalError);
  c = tiny_config(true);
  c.num_layers = 0;
  CHECK_THROWS_AS(c.validate(), InternalError);
  c = tiny_config(true);
  c.gate_attention_layer = 2;
  CHECK_THROWS_AS(c.validate(), InternalError);
  CHECK_NOTHROW(tiny_config(true).validate());
}

TEST_CASE("decoder output shapes and length guard") {
  auto config = tiny_config(true);
  auto store = make_store_with_vocab(1, 20, config.model_dim);
  auto one = decoder_forward({7}, store, config);
  CHECK(one.hidden->rows == 1);
  CHECK(one.hidden->cols == config.model_dim);
  CHECK(one.gate_input->rows == 1);
  CHECK(one.gate_input->cols == config.model_dim);

  std::vector<int> too_long(config.max_seq_len + 1, 1);
  CHECK_THROWS_AS(decoder_forward(too_long, store, config), InternalError);
  CHECK_THROWS_AS(decoder_forward({}, store, config), InternalError);

  auto not_causal = tiny_config(false);
  CHECK_THROWS_AS(decoder_forward({1}, store, not_causal), InternalError);
  CHECK_THROWS_AS(encoder_forward({1}, store, config), InternalError);
}

TEST_CASE("decoder positions are bitwise invariant to future tokens") {
  auto config = tiny_config(true);
  auto store = make_store_with_vocab(2, 20, config.model_dim);
  std::vector<int> ids = {3, 9, 14, 6, 11, 2};
  auto base = decoder_forward(ids, store, config);
  std::mt19937 rng(7);
  for (int t = 0; t + 1 < static_cast<int>(ids.size()); ++t) {
    auto changed = ids;
    for (size_t u = t + 1; u < ids.size(); ++u) changed[u] = 1 + static_cast<int>(rng() % 19);
    auto out = decoder_forward(changed, store, config);
    for (int pos = 0; pos <= t; ++pos)
      for (int j = 0; j < config.model_dim; ++j) {
        REQUIRE(out.hidden->at(pos, j) == base.hidden->at(pos, j));
        REQUIRE(out.gate_input->at(pos, j) == base.gate_input->at(pos, j));
      }
  }
}

TEST_CASE("gate input is the head-0 slice, other columns zero") {
  auto config = tiny_config(true);
  auto store = make_store_with_vocab(3, 20, config.model_dim);
  auto out = decoder_forward({4, 8, 15}, store, config);
  int hd = config.head_dim();
  bool any_nonzero = false;
  for (int i = 0; i < out.gate_input->rows; ++i) {
    for (int j = 0; j < hd; ++j) any_nonzero |= out.gate_input->at(i, j) != 0.0;
    for (int j = hd; j < config.model_dim; ++j) REQUIRE(out.gate_input->at(i, j) == 0.0);
  }
  CHECK(any_nonzero);
}

TEST_CASE("embeddings are token plus position rows") {
  auto config = tiny_config(true);
  auto store = make_store_with_vocab(4, 20, config.model_dim);
  auto wte = store.at("wte");
  std::fill(wte->v.begin(), wte->v.end(), 0.0);
  auto out = decoder_forward({0, 0, 0}, store, config);  // all [PAD]
  auto wpe = store.at("wpe");
  for (int t = 0; t < 3; ++t)
    for (int j = 0; j < config.model_dim; ++j)
      CHECK(out.embeddings->at(t, j) == wpe->at(t, j));
}

TEST_CASE("encoder ignores appended pad tokens") {
  auto config = tiny_config(false);
  auto store = make_store_with_vocab(5, 20, config.model_dim);
  std::vector<int> ids = {6, 13, 2, 9};
  auto base = encoder_forward(ids, store, config);
  auto padded_ids = ids;
  padded_ids.insert(padded_ids.end(), {0, 0, 0});
  auto padded = encoder_forward(padded_ids, store, config);
  for (size_t t = 0; t < ids.size(); ++t)
    for (int j = 0; j < config.model_dim; ++j)
      REQUIRE(padded->at(static_cast<int>(t), j) == base->at(static_cast<int>(t), j));
}

TEST_CASE("encoder with zeroed position table is permutation-equivariant") {
  auto config = tiny_config(false);
  auto store = make_store_with_vocab(6, 20, config.model_dim);
  // touch the model once so wpe exists, then silence it
  encoder_forward({1}, store, config);
  auto wpe = store.at("wpe");
  std::fill(wpe->v.begin(), wpe->v.end(), 0.0);

  std::vector<int> ids = {6, 13, 2, 9, 17};
  auto base = encoder_forward(ids, store, config);
  auto swapped_ids = ids;
  std::swap(swapped_ids[1], swapped_ids[3]);
  auto swapped = encoder_forward(swapped_ids, store, config);
  std::vector<int> where = {0, 3, 2, 1, 4};  // output row of each original position
  for (size_t t = 0; t < ids.size(); ++t)
    for (int j = 0; j < config.model_dim; ++j)
      REQUIRE(swapped->at(where[t], j) ==
              doctest::Approx(base->at(static_cast<int>(t), j)).epsilon(1e-9));
}

TEST_CASE("analytic gradients match finite differences on the full decoder") {
  auto config = tiny_config(true);
  auto store = make_store_with_vocab(7, 12, config.model_dim);
  std::vector<int> ids = {3, 7, 1, 9, 4, 2};
  auto loss_fn = [&] { return lm_loss(store, config, ids); };
  double err = gradient_check(store, loss_fn, 1e-5, 4);
  CHECK(err < 1e-4);
}

TEST_CASE("analytic gradients match finite differences on the encoder") {
  auto config = tiny_config(false);
  auto store = make_store_with_vocab(8, 12, config.model_dim);
  std::vector<int> ids = {3, 7, 1, 9};
  std::mt19937 rng(9);
  std::vector<double> weights(ids.size() * config.model_dim);
  for (auto& x : weights) x = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
  auto loss_fn = [&] {
    auto t = encoder_forward(ids, store, config);
    return masked_mean(mul_elem(t, t), weights);
  };
  double err = gradient_check(store, loss_fn, 1e-5, 4);
  CHECK(err < 1e-4);
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
  ParameterStore store(10);
  auto w = store.get_or_create("w", 2, 2, ParameterStore::Init::kNormal);
  auto before = w->v;
  store.zero_grad();
  store.optimize_step(0.1);
  CHECK(w->v == before);
  CHECK(store.step() == 1);
}

TEST_CASE("adam descends on a quadratic") {
  ParameterStore store(11);
  auto w = store.get_or_create("w", 1, 1, ParameterStore::Init::kZero);
  w->v[0] = 1.0;
  for (int i = 0; i < 50; ++i) {
    store.zero_grad();
    auto loss = mul_elem(w, w);
    backward(loss);
    store.optimize_step(0.1);
  }
  CHECK(std::abs(w->v[0]) < 1.0);
}

TEST_CASE("adam rejects non-finite gradients by name") {
  ParameterStore store(12);
  auto w = store.get_or_create("bad_param", 1, 1, ParameterStore::Init::kZero);
  w->g[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_WITH_AS(store.optimize_step(0.1), doctest::Contains("bad_param"), InternalError);
}

TEST_CASE("training is deterministic for a fixed seed") {
  auto run = [](uint64_t seed) {
    auto config = tiny_config(true);
    auto store = make_store_with_vocab(seed, 12, config.model_dim);
    std::vector<int> ids = {3, 7, 1, 9, 4, 2};
    for (int step = 0; step < 5; ++step) {
      store.zero_grad();
      auto out = decoder_forward(std::vector<int>(ids.begin(), ids.end() - 1), store, config);
      auto logits = matmul(out.hidden, transpose(store.at("wte")));
      std::vector<int> targets(ids.begin() + 1, ids.end());
      auto picked = gather_cols(softmax_rows(logits), targets);
      auto loss = masked_mean(scale(log_elem(picked), -1.0),
                              std::vector<double>(targets.size(), 1.0));
      backward(loss);
      store.optimize_step(1e-3);
    }
    return store;
  };
  auto s1 = run(99);
  auto s2 = run(99);
  auto s3 = run(100);
  for (const auto& [name, p] : s1.parameters())
    REQUIRE(p->v == s2.at(name)->v);  // bitwise
  bool differs = false;
  for (const auto& [name, p] : s1.parameters()) differs |= p->v != s3.at(name)->v;
  CHECK(differs);
}

TEST_CASE("loss is non-increasing when overfitting a fixed batch") {
  auto config = tiny_config(true);
  auto store = make_store_with_vocab(13, 12, config.model_dim);
  std::vector<int> ids = {3, 7, 1, 9, 4, 2, 5};
  double first = 0.0, last = 0.0;
  for (int step = 0; step < 100; ++step) {
    store.zero_grad();
    auto loss = lm_loss(store, config, ids);
    if (step == 0) first = loss->v[0];
    last = loss->v[0];
    backward(loss);
    store.optimize_step(1e-3);
  }
  CHECK(last < first);
}

TEST_CASE("checkpoint round-trips tensors, config and metadata") {
  auto config = tiny_config(true);
  auto store = make_store_with_vocab(14, 12, config.model_dim);
  decoder_forward({1, 2, 3}, store, config);  // materialize every parameter
  store.set_step(41);

  CheckpointHeader header;
  header.config = config;
  header.vocab_hash = 0xabcdef1234567890ull;
  header.step = store.step();
  header.module_tag = "rewriter";
  header.extra = "{\"mixture_components\":2}";

  auto path = (std::filesystem::temp_directory_path() / "cqr_ckpt_test.bin").string();
  save_checkpoint(store, header, path);

  ParameterStore loaded(0);
  auto got = load_checkpoint(loaded, path);
  CHECK(got.config == config);
  CHECK(got.vocab_hash == header.vocab_hash);
  CHECK(got.step == 41);
  CHECK(got.module_tag == "rewriter");
  CHECK(got.extra == header.extra);
  CHECK(loaded.step() == 41);
  REQUIRE(loaded.parameters().size() == store.parameters().size());
  for (const auto& [name, p] : store.parameters()) REQUIRE(loaded.at(name)->v == p->v);

  SUBCASE("loaded model reproduces the saved model's outputs bitwise") {
    auto a = decoder_forward({5, 9, 2, 7}, store, config);
    auto b = decoder_forward({5, 9, 2, 7}, loaded, config);
    REQUIRE(a.hidden->v == b.hidden->v);
  }
  SUBCASE("corrupt magic is a data error") {
    auto text = read_file(path);
    text[0] = 'X';
    atomic_write_file(path, text);
    ParameterStore fresh(0);
    CHECK_THROWS_AS(load_checkpoint(fresh, path), DataError);
  }
  SUBCASE("truncated file is a data error") {
    auto text = read_file(path);
    atomic_write_file(path, text.substr(0, text.size() / 2));
    ParameterStore fresh(0);
    CHECK_THROWS_AS(load_checkpoint(fresh, path), DataError);
  }
  SUBCASE("shape conflicts with the architecture are caught on use") {
    ParameterStore fresh(0);
    load_checkpoint(fresh, path);
    auto wider = config;
    wider.model_dim = 32;
    wider.num_heads = 4;
    CHECK_THROWS_AS(decoder_forward({1, 2}, fresh, wider), InternalError);
  }
  std::filesystem::remove(path);
}

TEST_CASE("distinct seeds give distinct initializations") {
  ParameterStore a(1), b(2);
  auto wa = a.get_or_create("w", 4, 4, ParameterStore::Init::kNormal);
  auto wb = b.get_or_create("w", 4, 4, ParameterStore::Init::kNormal);
  CHECK(wa->v != wb->v);
  // biases start at zero
  auto za = a.get_or_create("z", 1, 4, ParameterStore::Init::kZero);
  CHECK(za->v == std::vector<double>(4, 0.0));
}
