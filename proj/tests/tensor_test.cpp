#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "cqr/common.hpp"
#include "cqr/tensor.hpp"
#include "cqr/transformer.hpp"

using namespace cqr;
using namespace cqr::nn;

namespace {

std::vector<double> ones(size_t n) { return std::vector<double>(n, 1.0); }

}  // namespace

TEST_CASE("matmul and matmul_nt compute the expected products") {
  auto a = from_values(2, 3, {1, 2, 3, 4, 5, 6});
  auto b = from_values(3, 2, {7, 8, 9, 10, 11, 12});
  auto ab = matmul(a, b);
  CHECK(ab->v == std::vector<double>{58, 64, 139, 154});

  auto c = from_values(2, 3, {1, 0, 1, 0, 1, 0});
  auto ant = matmul_nt(a, c);
  CHECK(ant->v == std::vector<double>{4, 2, 10, 5});

  CHECK_THROWS_AS(matmul(a, c), InternalError);
}

TEST_CASE("elementwise and broadcast ops") {
  auto a = from_values(2, 2, {1, 2, 3, 4});
  CHECK(add(a, a)->v == std::vector<double>{2, 4, 6, 8});
  CHECK(sub(a, a)->v == std::vector<double>{0, 0, 0, 0});
  CHECK(mul_elem(a, a)->v == std::vector<double>{1, 4, 9, 16});
  CHECK(scale(a, -2.0)->v == std::vector<double>{-2, -4, -6, -8});
  auto row = from_values(1, 2, {10, 20});
  CHECK(add_rowvec(a, row)->v == std::vector<double>{11, 22, 13, 24});
  CHECK(mul_rowvec(a, row)->v == std::vector<double>{10, 40, 30, 80});
  auto col = from_values(2, 1, {2, 3});
  CHECK(mul_colvec(a, col)->v == std::vector<double>{2, 4, 9, 12});
  CHECK(transpose(a)->v == std::vector<double>{1, 3, 2, 4});
}

TEST_CASE("shape surgery ops") {
  auto a = from_values(2, 3, {1, 2, 3, 4, 5, 6});
  CHECK(slice_cols(a, 1, 3)->v == std::vector<double>{2, 3, 5, 6});
  CHECK(slice_rows(a, 1, 2)->v == std::vector<double>{4, 5, 6});
  auto b = from_values(2, 1, {9, 9});
  auto cat = concat_cols({a, b});
  CHECK(cat->cols == 4);
  CHECK(cat->v == std::vector<double>{1, 2, 3, 9, 4, 5, 6, 9});
  auto pad = zero_pad_cols(b, 3, 1);
  CHECK(pad->v == std::vector<double>{0, 9, 0, 0, 9, 0});
  auto g = gather_cols(a, {2, 0});
  CHECK(g->v == std::vector<double>{3, 4});
}

TEST_CASE("gelu matches the exact erf form") {
  auto x = from_values(1, 3, {0.0, 1.0, -1.0});
  auto y = gelu(x);
  CHECK(y->v[0] == doctest::Approx(0.0));
  CHECK(y->v[1] == doctest::Approx(0.8413447460685429).epsilon(1e-12));
  CHECK(y->v[2] == doctest::Approx(-0.15865525393145707).epsilon(1e-12));
}

TEST_CASE("softmax rows are non-negative and sum to one") {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> dist(-8.0, 8.0);
  auto a = make_tensor(6, 9);
  for (auto& x : a->v) x = dist(rng);
  auto p = softmax_rows(a);
  for (int i = 0; i < p->rows; ++i) {
    double sum = 0.0;
    for (int j = 0; j < p->cols; ++j) {
      CHECK(p->at(i, j) >= 0.0);
      sum += p->at(i, j);
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("masked softmax zeroes forbidden cells and fully masked rows") {
  auto a = from_values(2, 3, {1, 2, 3, 1, 1, 1});
  std::vector<double> mask = {1, 1, 0, 0, 0, 0};
  auto p = masked_softmax_rows(a, mask);
  CHECK(p->at(0, 2) == 0.0);
  CHECK(p->at(0, 0) + p->at(0, 1) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(p->at(0, 1) / p->at(0, 0) == doctest::Approx(std::exp(1.0)).epsilon(1e-12));
  CHECK(p->at(1, 0) == 0.0);
  CHECK(p->at(1, 1) == 0.0);
  CHECK(p->at(1, 2) == 0.0);
}

TEST_CASE("layer norm rows have mean 0 and variance 1 before affine") {
  std::mt19937 rng(5);
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  auto a = make_tensor(8, 32);
  for (auto& x : a->v) x = dist(rng);
  // also a small-variance row, the regime where a sloppy epsilon shows up
  for (int j = 0; j < 32; ++j) a->at(7, j) = 5.0 + 0.02 * dist(rng);
  auto y = layer_norm_rows(a);
  for (int i = 0; i < y->rows; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < y->cols; ++j) mean += y->at(i, j);
    mean /= y->cols;
    for (int j = 0; j < y->cols; ++j) var += (y->at(i, j) - mean) * (y->at(i, j) - mean);
    var /= y->cols;
    CHECK(std::abs(mean) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("bce with logits is stable and correct") {
  auto z = from_values(1, 1, {0.0});
  CHECK(bce_with_logits(z, 1.0)->v[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  auto big = from_values(1, 1, {100.0});
  CHECK(bce_with_logits(big, 0.0)->v[0] == doctest::Approx(100.0).epsilon(1e-9));
  auto neg = from_values(1, 1, {-100.0});
  CHECK(bce_with_logits(neg, 1.0)->v[0] == doctest::Approx(100.0).epsilon(1e-9));
  CHECK(std::isfinite(bce_with_logits(big, 1.0)->v[0]));
}

TEST_CASE("backward of a parameter sum is all ones") {
  ParameterStore store(1);
  auto w = store.get_or_create("w", 3, 4, ParameterStore::Init::kNormal);
  auto unused = store.get_or_create("unused", 2, 2, ParameterStore::Init::kNormal);
  store.zero_grad();
  auto loss = sum_all(w);
  backward(loss);
  CHECK(w->g == ones(12));
  CHECK(unused->g == std::vector<double>(4, 0.0));
}

TEST_CASE("backward without a recorded graph is an error") {
  auto leaf = make_tensor(1, 1);
  CHECK_THROWS_AS(backward(leaf), InternalError);
  auto matrix = make_tensor(2, 2);
  CHECK_THROWS_AS(backward(matrix), InternalError);
}

TEST_CASE("gradients accumulate through shared subexpressions") {
  ParameterStore store(2);
  auto w = store.get_or_create("w", 1, 1, ParameterStore::Init::kZero);
  w->v[0] = 3.0;
  store.zero_grad();
  // loss = w*w, via two uses of the same node
  auto loss = mul_elem(w, w);
  backward(loss);
  CHECK(w->g[0] == doctest::Approx(6.0));
}

TEST_CASE("finite differences agree for composed elementwise ops") {
  ParameterStore store(7);
  auto w = store.get_or_create("w", 4, 5, ParameterStore::Init::kNormal);
  for (auto& x : w->v) x = x * 10 + 0.3;  // move away from the tiny-init regime
  std::mt19937 rng(11);
  std::vector<double> weights(20);
  for (auto& x : weights) x = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
  auto loss_fn = [&] {
    auto y = gelu(scale(w, 0.7));
    return masked_mean(mul_elem(y, y), weights);
  };
  CHECK(gradient_check(store, loss_fn, 1e-5, 20) < 1e-4);
}

TEST_CASE("finite differences agree for an attention-style fragment") {
  ParameterStore store(13);
  auto q = store.get_or_create("q", 5, 4, ParameterStore::Init::kNormal);
  auto k = store.get_or_create("k", 5, 4, ParameterStore::Init::kNormal);
  auto v = store.get_or_create("v", 5, 4, ParameterStore::Init::kNormal);
  for (auto* t : {&q, &k, &v})
    for (auto& x : (*t)->v) x *= 20;  // O(0.4) entries: realistic activations
  std::vector<double> causal(25, 0.0);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j <= i; ++j) causal[size_t(i) * 5 + j] = 1.0;
  std::mt19937 rng(17);
  std::vector<double> weights(20);
  for (auto& x : weights) x = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
  auto loss_fn = [&] {
    auto scores = scale(matmul_nt(q, k), 0.5);
    auto att = matmul(masked_softmax_rows(scores, causal), v);
    return masked_mean(mul_elem(att, att), weights);
  };
  CHECK(gradient_check(store, loss_fn, 1e-5, 16) < 1e-4);
}

TEST_CASE("finite differences agree for a layer-norm fragment") {
  ParameterStore store(19);
  auto w = store.get_or_create("w", 6, 8, ParameterStore::Init::kNormal);
  for (auto& x : w->v) x = x * 30 + 0.1;
  std::mt19937 rng(23);
  std::vector<double> weights(48);
  for (auto& x : weights) x = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
  auto loss_fn = [&] { return masked_mean(layer_norm_rows(w), weights); };
  CHECK(gradient_check(store, loss_fn, 1e-5, 24) < 1e-4);
}

TEST_CASE("embedding lookup gradient is exact") {
  ParameterStore store(29);
  auto table = store.get_or_create("emb", 7, 3, ParameterStore::Init::kNormal);
  std::vector<int> ids = {2, 5, 2, 0};  // repeated id exercises scatter-add
  std::mt19937 rng(31);
  std::vector<double> weights(12);
  for (auto& x : weights) x = std::uniform_real_distribution<double>(0.1, 1.0)(rng);
  auto loss_fn = [&] { return masked_mean(embedding_rows(table, ids), weights); };
  CHECK(gradient_check(store, loss_fn, 1e-5, 21) < 1e-7);  // linear in the table
}

TEST_CASE("finite differences agree through softmax, log and gather") {
  ParameterStore store(37);
  auto logits = store.get_or_create("logits", 4, 6, ParameterStore::Init::kNormal);
  for (auto& x : logits->v) x *= 50;
  std::vector<int> targets = {1, 0, 5, 3};
  std::vector<double> row_mask = {1, 1, 0, 1};  // one position excluded from the loss
  auto loss_fn = [&] {
    auto picked = gather_cols(softmax_rows(logits), targets);
    return masked_mean(scale(log_elem(picked), -1.0), row_mask);
  };
  CHECK(gradient_check(store, loss_fn, 1e-5, 24) < 1e-4);
}

TEST_CASE("finite differences agree for bce on a logit produced upstream") {
  ParameterStore store(41);
  auto w = store.get_or_create("w", 1, 5, ParameterStore::Init::kNormal);
  auto x = from_values(5, 1, {0.3, -0.2, 0.8, 0.1, -0.5});
  auto loss_fn = [&] { return bce_with_logits(matmul(w, x), 1.0); };
  CHECK(gradient_check(store, loss_fn, 1e-5, 5) < 1e-4);
}
