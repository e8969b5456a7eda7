#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace cqr::nn {

// Reverse-mode autodiff node. Every tensor is a dense row-major matrix of
// doubles; scalars are 1x1. Ops record parent links plus a closure that
// accumulates into the parents' gradient buffers.
struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> v;
  std::vector<double> g;
  std::vector<std::shared_ptr<Tensor>> parents;
  std::function<void()> backprop;
  std::string name;
  bool is_param = false;

  Tensor(int r, int c) : rows(r), cols(c), v(size_t(r) * c, 0.0), g(size_t(r) * c, 0.0) {}

  double& at(int i, int j) { return v[size_t(i) * cols + j]; }
  double at(int i, int j) const { return v[size_t(i) * cols + j]; }
  double& grad_at(int i, int j) { return g[size_t(i) * cols + j]; }
  size_t size() const { return v.size(); }
  void zero_grad() { std::fill(g.begin(), g.end(), 0.0); }
};

using TensorPtr = std::shared_ptr<Tensor>;

TensorPtr make_tensor(int rows, int cols, double fill = 0.0);
TensorPtr from_values(int rows, int cols, std::vector<double> values);

TensorPtr matmul(const TensorPtr& a, const TensorPtr& b);
/// a times b-transposed; b stays (cols_out x inner) in memory.
TensorPtr matmul_nt(const TensorPtr& a, const TensorPtr& b);
TensorPtr add(const TensorPtr& a, const TensorPtr& b);
TensorPtr sub(const TensorPtr& a, const TensorPtr& b);
TensorPtr add_rowvec(const TensorPtr& a, const TensorPtr& row);
TensorPtr mul_rowvec(const TensorPtr& a, const TensorPtr& row);
/// Scales row i of a by col->v[i]; col is rows x 1.
TensorPtr mul_colvec(const TensorPtr& a, const TensorPtr& col);
TensorPtr mul_elem(const TensorPtr& a, const TensorPtr& b);
TensorPtr scale(const TensorPtr& a, double s);
TensorPtr transpose(const TensorPtr& a);
TensorPtr concat_cols(const std::vector<TensorPtr>& parts);
TensorPtr slice_cols(const TensorPtr& a, int c0, int c1);
TensorPtr slice_rows(const TensorPtr& a, int r0, int r1);
/// Embeds a into an all-zero rows x total_cols matrix starting at column offset.
TensorPtr zero_pad_cols(const TensorPtr& a, int total_cols, int offset);
TensorPtr gelu(const TensorPtr& a);
TensorPtr log_elem(const TensorPtr& a);
TensorPtr sum_all(const TensorPtr& a);

/// Row-wise softmax. mask has one entry per cell (1 = attend, 0 = forbid);
/// fully masked rows produce all-zero output rows.
TensorPtr masked_softmax_rows(const TensorPtr& a, const std::vector<double>& mask);
TensorPtr softmax_rows(const TensorPtr& a);

/// Per-row (x - mean) / sqrt(var + 1e-8), no affine part.
TensorPtr layer_norm_rows(const TensorPtr& a);

/// Gathers table rows by id: output row t is table row ids[t].
TensorPtr embedding_rows(const TensorPtr& table, const std::vector<int>& ids);
/// out[t] = a[t, idx[t]], as a rows x 1 column.
TensorPtr gather_cols(const TensorPtr& a, const std::vector<int>& idx);
/// Weighted mean over all cells: sum(w*a) / sum(w). Returns 1x1.
TensorPtr masked_mean(const TensorPtr& a, const std::vector<double>& weights);
/// Numerically stable binary cross-entropy on a single logit. Returns 1x1.
TensorPtr bce_with_logits(const TensorPtr& logit, double target);

/// Seeds d(loss)/d(loss)=1 and runs the recorded closures in reverse
/// topological order, accumulating into .g of every reachable tensor.
void backward(const TensorPtr& loss);

}  // namespace cqr::nn
