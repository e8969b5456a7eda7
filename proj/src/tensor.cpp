#include "cqr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "cqr/common.hpp"

namespace cqr::nn {
namespace {

void check_same_shape(const TensorPtr& a, const TensorPtr& b, const char* op) {
  if (a->rows != b->rows || a->cols != b->cols)
    throw InternalError(std::string(op) + ": shape mismatch " + std::to_string(a->rows) + "x" +
                        std::to_string(a->cols) + " vs " + std::to_string(b->rows) + "x" +
                        std::to_string(b->cols));
}

TensorPtr make_node(int rows, int cols, std::vector<TensorPtr> parents) {
  auto t = std::make_shared<Tensor>(rows, cols);
  t->parents = std::move(parents);
  return t;
}

}  // namespace

TensorPtr make_tensor(int rows, int cols, double fill) {
  auto t = std::make_shared<Tensor>(rows, cols);
  std::fill(t->v.begin(), t->v.end(), fill);
  return t;
}

TensorPtr from_values(int rows, int cols, std::vector<double> values) {
  if (values.size() != size_t(rows) * cols)
    throw InternalError("from_values: " + std::to_string(values.size()) + " values for " +
                        std::to_string(rows) + "x" + std::to_string(cols));
  auto t = std::make_shared<Tensor>(rows, cols);
  t->v = std::move(values);
  return t;
}

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b) {
  if (a->cols != b->rows) throw InternalError("matmul: inner dims disagree");
  auto out = make_node(a->rows, b->cols, {a, b});
  Tensor *pa = a.get(), *pb = b.get(), *po = out.get();
  // ikj order keeps the inner loop contiguous for both inputs
  for (int i = 0; i < pa->rows; ++i)
    for (int k = 0; k < pa->cols; ++k) {
      double aik = pa->at(i, k);
      for (int j = 0; j < pb->cols; ++j) po->at(i, j) += aik * pb->at(k, j);
    }
  out->backprop = [pa, pb, po] {
    for (int i = 0; i < pa->rows; ++i)
      for (int j = 0; j < po->cols; ++j) {
        double go = po->grad_at(i, j);
        if (go == 0.0) continue;
        for (int k = 0; k < pa->cols; ++k) {
          pa->grad_at(i, k) += go * pb->at(k, j);
          pb->grad_at(k, j) += go * pa->at(i, k);
        }
      }
  };
  return out;
}

TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b) {
  if (a->cols != b->cols) throw InternalError("matmul_nt: inner dims disagree");
  auto out = make_node(a->rows, b->rows, {a, b});
  Tensor *pa = a.get(), *pb = b.get(), *po = out.get();
  for (int i = 0; i < pa->rows; ++i)
    for (int j = 0; j < pb->rows; ++j) {
      double acc = 0.0;
      for (int k = 0; k < pa->cols; ++k) acc += pa->at(i, k) * pb->at(j, k);
      po->at(i, j) = acc;
    }
  out->backprop = [pa, pb, po] {
    for (int i = 0; i < pa->rows; ++i)
      for (int j = 0; j < pb->rows; ++j) {
        double go = po->grad_at(i, j);
        if (go == 0.0) continue;
        for (int k = 0; k < pa->cols; ++k) {
          pa->grad_at(i, k) += go * pb->at(j, k);
          pb->grad_at(j, k) += go * pa->at(i, k);
        }
      }
  };
  return out;
}

TensorPtr add(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "add");
  auto out = make_node(a->rows, a->cols, {a, b});
  for (size_t i = 0; i < out->size(); ++i) out->v[i] = a->v[i] + b->v[i];
  Tensor *pa = a.get(), *pb = b.get(), *po = out.get();
  out->backprop = [pa, pb, po] {
    for (size_t i = 0; i < po->size(); ++i) {
      pa->g[i] += po->g[i];
      pb->g[i] += po->g[i];
    }
  };
  return out;
}

TensorPtr sub(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "sub");
  auto out = make_node(a->rows, a->cols, {a, b});
  for (size_t i = 0; i < out->size(); ++i) out->v[i] = a->v[i] - b->v[i];
  Tensor *pa = a.get(), *pb = b.get(), *po = out.get();
  out->backprop = [pa, pb, po] {
    for (size_t i = 0; i < po->size(); ++i) {
      pa->g[i] += po->g[i];
      pb->g[i] -= po->g[i];
    }
  };
  return out;
}

TensorPtr add_rowvec(const TensorPtr& a, const TensorPtr& row) {
  if (row->rows != 1 || row->cols != a->cols) throw InternalError("add_rowvec: bad row shape");
  auto out = make_node(a->rows, a->cols, {a, row});
  for (int i = 0; i < a->rows; ++i)
    for (int j = 0; j < a->cols; ++j) out->at(i, j) = a->at(i, j) + row->v[j];
  Tensor *pa = a.get(), *pr = row.get(), *po = out.get();
  out->backprop = [pa, pr, po] {
    for (int i = 0; i < po->rows; ++i)
      for (int j = 0; j < po->cols; ++j) {
        pa->grad_at(i, j) += po->grad_at(i, j);
        pr->g[j] += po->grad_at(i, j);
      }
  };
  return out;
}

TensorPtr mul_rowvec(const TensorPtr& a, const TensorPtr& row) {
  if (row->rows != 1 || row->cols != a->cols) throw InternalError("mul_rowvec: bad row shape");
  auto out = make_node(a->rows, a->cols, {a, row});
  for (int i = 0; i < a->rows; ++i)
    for (int j = 0; j < a->cols; ++j) out->at(i, j) = a->at(i, j) * row->v[j];
  Tensor *pa = a.get(), *pr = row.get(), *po = out.get();
  out->backprop = [pa, pr, po] {
    for (int i = 0; i < po->rows; ++i)
      for (int j = 0; j < po->cols; ++j) {
        pa->grad_at(i, j) += po->grad_at(i, j) * pr->v[j];
        pr->g[j] += po->grad_at(i, j) * pa->at(i, j);
      }
  };
  return out;
}

TensorPtr mul_colvec(const TensorPtr& a, const TensorPtr& col) {
  if (col->cols != 1 || col->rows != a->rows) throw InternalError("mul_colvec: bad col shape");
  auto out = make_node(a->rows, a->cols, {a, col});
  for (int i = 0; i < a->rows; ++i)
    for (int j = 0; j < a->cols; ++j) out->at(i, j) = a->at(i, j) * col->v[i];
  Tensor *pa = a.get(), *pc = col.get(), *po = out.get();
  out->backprop = [pa, pc, po] {
    for (int i = 0; i < po->rows; ++i)
      for (int j = 0; j < po->cols; ++j) {
        pa->grad_at(i, j) += po->grad_at(i, j) * pc->v[i];
        pc->g[i] += po->grad_at(i, j) * pa->at(i, j);
      }
  };
  return out;
}

TensorPtr mul_elem(const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "mul_elem");
  auto out = make_node(a->rows, a->cols, {a, b});
  for (size_t i = 0; i < out->size(); ++i) out->v[i] = a->v[i] * b->v[i];
  Tensor *pa = a.get(), *pb = b.get(), *po = out.get();
  out->backprop = [pa, pb, po] {
    for (size_t i = 0; i < po->size(); ++i) {
      pa->g[i] += po->g[i] * pb->v[i];
      pb->g[i] += po->g[i] * pa->v[i];
    }
  };
  return out;
}

TensorPtr scale(const TensorPtr& a, double s) {
  auto out = make_node(a->rows, a->cols, {a});
  for (size_t i = 0; i < out->size(); ++i) out->v[i] = a->v[i] * s;
  Tensor *pa = a.get(), *po = out.get();
  out->backprop = [pa, po, s] {
    for (size_t i = 0; i < po->size(); ++i) pa->g[i] += po->g[i] * s;
  };
  return out;
}

TensorPtr transpose(const TensorPtr& a) {
  auto out = make_node(a->cols, a->rows, {a});
  for (int i = 0; i < a->rows; ++i)
    for (int j = 0; j < a->cols; ++j) out->at(j, i) = a->at(i, j);
  Tensor *pa = a.get(), *po = out.get();
  out->backprop = [pa, po] {
    for (int i = 0; i < pa->rows; ++i)
      for (int j = 0; j < pa->cols; ++j) pa->grad_at(i, j) += po->grad_at(j, i);
  };
  return out;
}

TensorPtr concat_cols(const std::vector<TensorPtr>& parts) {
  if (parts.empty()) throw InternalError("concat_cols: no parts");
  int total = 0;
  for (const auto& p : parts) {
    if (p->rows != parts[0]->rows) throw InternalError("concat_cols: row mismatch");
    total += p->cols;
  }
  auto out = make_node(parts[0]->rows, total, parts);
  int off = 0;
  for (const auto& p : parts) {
    for (int i = 0; i < p->rows; ++i)
      for (int j = 0; j < p->cols; ++j) out->at(i, off + j) = p->at(i, j);
    off += p->cols;
  }
  Tensor* po = out.get();
  std::vector<Tensor*> raw;
  for (const auto& p : parts) raw.push_back(p.get());
  out->backprop = [raw, po] {
    int off2 = 0;
    for (Tensor* p : raw) {
      for (int i = 0; i < p->rows; ++i)
        for (int j = 0; j < p->cols; ++j) p->grad_at(i, j) += po->grad_at(i, off2 + j);
      off2 += p->cols;
    }
  };
  return out;
}

TensorPtr slice_cols(const TensorPtr& a, int c0, int c1) {
  if (c0 < 0 || c1 > a->cols || c0 >= c1) throw InternalError("slice_cols: bad range");
  auto out = make_node(a->rows, c1 - c0, {a});
  for (int i = 0; i < a->rows; ++i)
    for (int j = c0; j < c1; ++j) out->at(i, j - c0) = a->at(i, j);
  Tensor *pa = a.get(), *po = out.get();
  out->backprop = [pa, po, c0] {
    for (int i = 0; i < po->rows; ++i)
      for (int j = 0; j < po->cols; ++j) pa->grad_at(i, c0 + j) += po->grad_at(i, j);
  };
  return out;
}

TensorPtr slice_rows(const TensorPtr& a, int r0, int r1) {
  if (r0 < 0 || r1 > a->rows || r0 >= r1) throw InternalError("slice_rows: bad range");
  auto out = make_node(r1 - r0, a->cols, {a});
  for (int i = r0; i < r1; ++i)
    for (int j = 0; j < a->cols; ++j) out->at(i - r0, j) = a->at(i, j);
  Tensor *pa = a.get(), *po = out.get();
  out->backprop = [pa, po, r0] {
    for (int i = 0; i < po->rows; ++i)
      for (int j = 0; j < po->cols; ++j) pa->grad_at(r0 + i, j) += po->grad_at(i, j);
  };
  return out;
}

TensorPtr zero_pad_cols(const TensorPtr& a, int total_cols, int offset) {
  if (offset < 0 || offset + a->cols > total_cols) throw InternalError("zero_pad_cols: bad offset");
  auto out = make_node(a->rows, total_cols, {a});
  for (int i = 0; i < a->rows; ++i)
    for (int j = 0; j < a->cols; ++j) out->at(i, offset + j) = a->at(i, j);
  Tensor *pa = a.get(), *po = out.get();
  out->backprop = [pa, po, offset] {
    for (int i = 0; i < pa->rows; ++i)
      for (int j = 0; j < pa->cols; ++j) pa->grad_at(i, j) += po->grad_at(i, offset + j);
  };
  return out;
}

TensorPtr gelu(const TensorPtr& a) {
  auto out = make_node(a->rows, a->cols, {a});
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  for (size_t i = 0; i < out->size(); ++i)
    out->v[i] = 0.5 * a->v[i] * (1.0 + std::erf(a->v[i] * inv_sqrt2));
  Tensor *pa = a.get(), *po = out.get();
  out->backprop = [pa, po] {
    constexpr double inv_sqrt_2pi = 0.3989422804014326779;
    for (size_t i = 0; i < po->size(); ++i) {
      double x = pa->v[i];
      double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
      double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
      pa->g[i] += po->g[i] * (cdf + x * pdf);
    }
  };
  return out;
}

TensorPtr log_elem(const TensorPtr& a) {
  auto out = make_node(a->rows, a->cols, {a});
  for (size_t i = 0; i < out->size(); ++i) out->v[i] = std::log(a->v[i]);
  Tensor *pa = a.get(), *po = out.get();
  out->backprop = [pa, po] {
    for (size_t i = 0; i < po->size(); ++i) pa->g[i] += po->g[i] / pa->v[i];
  };
  return out;
}

TensorPtr sum_all(const TensorPtr& a) {
  auto out = make_node(1, 1, {a});
  double acc = 0.0;
  for (double x : a->v) acc += x;
  out->v[0] = acc;
  Tensor *pa = a.get(), *po = out.get();
  out->backprop = [pa, po] {
    for (size_t i = 0; i < pa->size(); ++i) pa->g[i] += po->g[0];
  };
  return out;
}

TensorPtr masked_softmax_rows(const TensorPtr& a, const std::vector<double>& mask) {
  if (mask.size() != a->size()) throw InternalError("masked_softmax_rows: mask size mismatch");
  auto out = make_node(a->rows, a->cols, {a});
  for (int i = 0; i < a->rows; ++i) {
    double best = -1e300;
    bool any = false;
    for (int j = 0; j < a->cols; ++j)
      if (mask[size_t(i) * a->cols + j] != 0.0) {
        any = true;
        best = std::max(best, a->at(i, j));
      }
    if (!any) continue;  // fully masked row stays all-zero
    double denom = 0.0;
    for (int j = 0; j < a->cols; ++j)
      if (mask[size_t(i) * a->cols + j] != 0.0) {
        out->at(i, j) = std::exp(a->at(i, j) - best);
        denom += out->at(i, j);
      }
    for (int j = 0; j < a->cols; ++j) out->at(i, j) /= denom;
  }
  Tensor *pa = a.get(), *po = out.get();
  out->backprop = [pa, po] {
    // d(softmax)/dx: p * (g - sum(g*p)) per row; masked cells hold p=0
    for (int i = 0; i < po->rows; ++i) {
      double dot = 0.0;
      for (int j = 0; j < po->cols; ++j) dot += po->grad_at(i, j) * po->at(i, j);
      for (int j = 0; j < po->cols; ++j)
        pa->grad_at(i, j) += po->at(i, j) * (po->grad_at(i, j) - dot);
    }
  };
  return out;
}

TensorPtr softmax_rows(const TensorPtr& a) {
  return masked_softmax_rows(a, std::vector<double>(a->size(), 1.0));
}

TensorPtr layer_norm_rows(const TensorPtr& a) {
  constexpr double eps = 1e-8;
  auto out = make_node(a->rows, a->cols, {a});
  std::vector<double> inv_std(a->rows), means(a->rows);
  for (int i = 0; i < a->rows; ++i) {
    double mean = 0.0;
    for (int j = 0; j < a->cols; ++j) mean += a->at(i, j);
    mean /= a->cols;
    double var = 0.0;
    for (int j = 0; j < a->cols; ++j) {
      double c = a->at(i, j) - mean;
      var += c * c;
    }
    var /= a->cols;
    means[i] = mean;
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < a->cols; ++j) out->at(i, j) = (a->at(i, j) - mean) * inv_std[i];
  }
  Tensor *pa = a.get(), *po = out.get();
  out->backprop = [pa, po, inv_std = std::move(inv_std)] {
    int d = po->cols;
    for (int i = 0; i < po->rows; ++i) {
      double gsum = 0.0, gdot = 0.0;
      for (int j = 0; j < d; ++j) {
        gsum += po->grad_at(i, j);
        gdot += po->grad_at(i, j) * po->at(i, j);
      }
      for (int j = 0; j < d; ++j) {
        double y = po->at(i, j);
        pa->grad_at(i, j) += inv_std[i] * (po->grad_at(i, j) - gsum / d - y * gdot / d);
      }
    }
  };
  return out;
}

TensorPtr embedding_rows(const TensorPtr& table, const std::vector<int>& ids) {
  auto out = make_node(static_cast<int>(ids.size()), table->cols, {table});
  for (size_t t = 0; t < ids.size(); ++t) {
    if (ids[t] < 0 || ids[t] >= table->rows)
      throw InternalError("embedding_rows: id " + std::to_string(ids[t]) + " outside table of " +
                          std::to_string(table->rows));
    for (int j = 0; j < table->cols; ++j) out->at(static_cast<int>(t), j) = table->at(ids[t], j);
  }
  Tensor *pt = table.get(), *po = out.get();
  out->backprop = [pt, po, ids] {
    for (size_t t = 0; t < ids.size(); ++t)
      for (int j = 0; j < pt->cols; ++j)
        pt->grad_at(ids[t], j) += po->grad_at(static_cast<int>(t), j);
  };
  return out;
}

TensorPtr gather_cols(const TensorPtr& a, const std::vector<int>& idx) {
  if (idx.size() != size_t(a->rows)) throw InternalError("gather_cols: index count mismatch");
  auto out = make_node(a->rows, 1, {a});
  for (int i = 0; i < a->rows; ++i) {
    if (idx[i] < 0 || idx[i] >= a->cols) throw InternalError("gather_cols: index out of range");
    out->v[i] = a->at(i, idx[i]);
  }
  Tensor *pa = a.get(), *po = out.get();
  out->backprop = [pa, po, idx] {
    for (int i = 0; i < pa->rows; ++i) pa->grad_at(i, idx[i]) += po->g[i];
  };
  return out;
}

TensorPtr masked_mean(const TensorPtr& a, const std::vector<double>& weights) {
  if (weights.size() != a->size()) throw InternalError("masked_mean: weight size mismatch");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (wsum <= 0.0) throw InternalError("masked_mean: no active entries");
  auto out = make_node(1, 1, {a});
  double acc = 0.0;
  for (size_t i = 0; i < a->size(); ++i) acc += weights[i] * a->v[i];
  out->v[0] = acc / wsum;
  Tensor *pa = a.get(), *po = out.get();
  out->backprop = [pa, po, weights, wsum] {
    for (size_t i = 0; i < pa->size(); ++i) pa->g[i] += po->g[0] * weights[i] / wsum;
  };
  return out;
}

TensorPtr bce_with_logits(const TensorPtr& logit, double target) {
  if (logit->rows != 1 || logit->cols != 1) throw InternalError("bce_with_logits: logit not 1x1");
  auto out = make_node(1, 1, {logit});
  double z = logit->v[0];
  // max(z,0) - z*y + log(1+exp(-|z|)) is stable for both signs
  out->v[0] = std::max(z, 0.0) - z * target + std::log1p(std::exp(-std::abs(z)));
  Tensor *pl = logit.get(), *po = out.get();
  out->backprop = [pl, po, target] {
    double sig = 1.0 / (1.0 + std::exp(-pl->v[0]));
    pl->g[0] += po->g[0] * (sig - target);
  };
  return out;
}

void backward(const TensorPtr& loss) {
  if (loss->rows != 1 || loss->cols != 1) throw InternalError("backward: loss must be 1x1");
  if (loss->parents.empty() && !loss->backprop)
    throw InternalError("backward: no recorded computation behind the loss");

  // Iterative post-order DFS; reverse gives topological order from the loss.
  std::vector<Tensor*> order;
  std::unordered_set<Tensor*> visited;
  std::vector<std::pair<Tensor*, size_t>> stack{{loss.get(), 0}};
  visited.insert(loss.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Tensor* parent = node->parents[next++].get();
      if (visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss->g[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backprop) (*it)->backprop();
}

}  // namespace cqr::nn
