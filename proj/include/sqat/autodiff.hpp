#pragma once

#include <functional>
#include <vector>

#include <Eigen/Core>

#include "sqat/seq_model.hpp"

namespace sqat::ad {

using Mat = Eigen::MatrixXd;

// Reverse-mode tape over dense matrices. One tape holds one forward pass;
// backward() may be called repeatedly with fresh seeds (adjoints are reset
// each time), which is how per-logit gradients share a single forward.
class Tape {
 public:
  // Leaves. Params and inputs receive adjoints; constants do not.
  int input(Mat value) { return leaf(std::move(value), true); }
  int param(Mat value) { return leaf(std::move(value), true); }
  int constant(Mat value) { return leaf(std::move(value), false); }

  int affine(int a, double scale, double shift);
  int add(int a, int b);
  int add_row_broadcast(int a, int row);  // row is 1 x n
  int matmul(int a, int b);               // A * B
  int matmul_nt(int a, int b);            // A * B^T
  int slice_cols(int a, int start, int len);
  int concat_cols(const std::vector<int>& parts);
  int layer_norm(int a, int gamma, int beta);  // rowwise, eps 1e-5
  int gelu(int a);
  int softmax_rows(int a);         // full rows
  int softmax_causal(int a);       // row r attends to columns 0..r
  int rows_from_table(int table, std::vector<int> ids);
  // Image (H x W) -> patch matrix (W/patch_w rows, H*patch_w cols); patch p
  // holds columns [p*patch_w, (p+1)*patch_w) stacked column-by-column.
  int patchify(int image, int patch_w);
  int pick_sum(int logits, std::vector<LogitPick> picks);    // 1x1 scalar
  int ce_sum(int logits, std::vector<int> targets);          // 1x1 scalar

  const Mat& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
  const Mat& adjoint(int id) const { return nodes_[static_cast<size_t>(id)].adjoint; }
  double scalar(int id) const { return value(id)(0, 0); }

  // Reverse sweep from a scalar node (seed 1) or from an explicit seed.
  void backward(int output);
  void backward_seed(int output, const Mat& seed);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat adjoint;
    std::function<void(Tape&, int)> back;  // pulls own adjoint, pushes to deps
    bool requires_grad = false;
    bool touched = false;  // adjoint received this sweep
  };

  int leaf(Mat value, bool requires_grad);
  int make(Mat value, bool requires_grad, std::function<void(Tape&, int)> back);
  Mat& grad_buffer(int id);
  void accumulate(int id, const Mat& g);
  bool needs(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

  std::vector<Node> nodes_;
};

}  // namespace sqat::ad
