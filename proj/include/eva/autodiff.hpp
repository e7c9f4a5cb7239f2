#pragma once

#include <functional>
#include <span>
#include <vector>

#include "eva/tensor.hpp"

namespace eva::ad {

using Mat = Matrix<double>;

class Tape;

/// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Mat& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
};

/// Reverse-mode tape over row-major double matrices. Nodes are appended in
/// evaluation order, so a reverse sweep visits every consumer before its
/// inputs.
class Tape {
 public:
  /// Leaf whose gradient is tracked.
  Var variable(Mat value);
  /// Leaf without a gradient.
  Var constant(Mat value);

  /// Appends an op node. `back` reads grad(self) and accumulates into its
  /// inputs through accumulate().
  Var push(Mat value, bool needs_grad, std::function<void(Tape&, int self)> back);

  const Mat& value(int id) const { return nodes_[id].value; }
  bool needs_grad(int id) const { return nodes_[id].needs_grad; }
  /// Gradient of the last backward() root; zero-shaped nodes read as zeros.
  const Mat& grad(int id) const { return nodes_[id].grad; }
  void accumulate(int id, const Mat& g);
  Mat& grad_buffer(int id);

  /// Seeds d root = 1 (root must be 1 x 1) and sweeps the tape.
  void backward(Var root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool needs_grad = false;
    std::function<void(Tape&, int)> back;
  };
  std::vector<Node> nodes_;
};

// ---- elementwise and linear ---------------------------------------------------

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
/// a + row, with row 1 x C broadcast down the rows of a.
Var add_row(Var a, Var row);
/// a * row, broadcast as in add_row.
Var mul_row(Var a, Var row);
Var scale(Var a, double c);
Var neg(Var a);
Var tanh(Var a);
Var exp(Var a);
Var sigmoid(Var a);
Var silu(Var a);
/// max(a, 0)^2
Var relu_sq(Var a);

// ---- structural -----------------------------------------------------------------

/// Rows shifted down by one with a zero first row.
Var token_shift(Var a);
/// Rows of `table` selected by `index`.
Var gather_rows(Var table, std::span<const int> index);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, Eigen::Index first, Eigen::Index count);
/// Entry (0, i) of a row vector as a 1 x 1 node.
Var element(Var a, Eigen::Index i);
Var sum(Var a);

// ---- normalization ------------------------------------------------------------------

/// Row-wise normalization with learnable 1 x C scale and offset.
Var layer_norm(Var x, Var scale, Var offset, double eps = 1e-5);
/// Normalizes each of `groups` contiguous column segments per row; no affine.
Var group_norm(Var x, int groups, double eps = 1e-5);

// ---- losses -------------------------------------------------------------------------

/// mean((a - target)^2) over all entries.
Var mse(Var a, const Mat& target);
/// sum_k exp(-s_k) L_k + s_k for 1 x 1 losses L_k and a 1 x K row s.
Var uncertainty_total(std::span<const Var> losses, Var log_vars);

// ---- convolution ---------------------------------------------------------------------
// Images are batched as rows; each row holds a channel-major C x H x W image.

/// Stride-1 convolution, square kernel `k`, zero padding `pad`. weight is
/// Cout x (Cin*k*k), bias 1 x Cout.
Var conv2d(Var x, Var weight, Var bias, int in_channels, int height, int width, int k, int pad);
/// Transposed convolution, kernel 4, stride 2, padding 1 (2x upsampling).
/// weight is Cin x (Cout*16), bias 1 x Cout.
Var conv_transpose2x(Var x, Var weight, Var bias, int in_channels, int height, int width);

// ---- recurrences ----------------------------------------------------------------------

/// Multi-head token mixing from a zero state: rows of r, k, v, w (T x D)
/// and bonus u (1 x D). y_i = (S_{i-1} + diag(u) k_i v_i^T) r_i per head.
Var wkv(Var r, Var k, Var v, Var w, Var u, int n_head);

/// States of S_i = diag(w_i) S_{i-1} + k_i v_i^T from a zero state at the
/// given prefix lengths, keeping the first `keep_heads` heads. Output row j
/// is the flattened state after checkpoints[j] rows.
Var state_snapshots(Var k, Var v, Var w, int n_head, int keep_heads, std::span<const int> checkpoints);

}  // namespace eva::ad
