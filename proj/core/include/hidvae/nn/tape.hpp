#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "hidvae/common.hpp"

namespace hidvae::nn {

// Handle into a Tape node.
struct Var {
  int i = -1;
  bool valid() const { return i >= 0; }
};

// Reverse-mode autodiff over dense Eigen matrices. One tape per training
// step; nodes are appended in evaluation order and backward() sweeps them
// in reverse. Everything is double precision and single-threaded.
class Tape {
 public:
  Var input(Mat v, bool needs_grad = false);
  Var constant(Mat v) { return input(std::move(v), false); }
  Var scalar(double v);

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);  // elementwise
  Var scale(Var a, double s);
  Var matmul(Var a, Var b);     // A * B
  Var matmul_nt(Var a, Var b);  // A * B^T
  Var add_rowvec(Var a, Var bias);  // bias is 1 x C, broadcast over rows

  Var relu(Var a);
  Var gelu(Var a);
  Var tanh(Var a);
  Var row_softmax(Var a);
  Var layer_norm(Var a, Var gain, Var bias, double eps = 1e-5);
  Var l2_normalize_rows(Var a, double eps = 1e-8);

  Var gather_rows(Var table, std::vector<int> rows);
  Var concat_cols(Var a, Var b);
  Var slice_cols(Var a, int from, int n);

  Var sum_sq_rows(Var a);  // B x 1 of squared row norms
  Var mean_all(Var a);     // 1 x 1
  Var sum_all(Var a);      // 1 x 1

  Var stop_gradient(Var a);
  // Forward takes `value`'s data, backward routes the gradient to `carrier`.
  Var straight_through(Var value, Var carrier);

  // Inverted-scale dropout. When inactive this is the identity.
  Var dropout(Var a, double rate, Rng& rng, bool active);

  // Per-row softmax cross-entropy with optional focal weighting
  // (1 - p_true)^gamma and an optional allowed column range per row
  // ([from, to) logits participate; others are treated as -inf).
  // labels < 0 produce a zero-loss row. Returns B x 1.
  Var softmax_cross_entropy_rows(Var logits, std::vector<int> labels,
                                 double focal_gamma = 0.0,
                                 std::vector<std::pair<int, int>> ranges = {});

  // Mean over pairs of max(0, u_i . u_j - margin); rows of `unit_rows` are
  // expected to be L2-normalized already. Empty pair set yields 0.
  Var pair_dot_hinge(Var unit_rows, std::vector<std::pair<int, int>> pairs,
                     double margin);

  // Scaled dot-product attention over `batch` packed sequences.
  // q is (batch*tq) x dh, k and v are (batch*tkv) x dh. kv_len[b] keys are
  // visible per sequence; query rows at or beyond q_len[b] output zero.
  // causal requires tq == tkv and masks j > i.
  Var attention(Var q, Var k, Var v, int batch, int tq, int tkv,
                std::vector<int> q_len, std::vector<int> kv_len, bool causal);

  void backward(Var loss);

  const Mat& val(Var v) const { return nodes_[static_cast<size_t>(v.i)].val; }
  const Mat& grad(Var v) const;
  bool needs_grad(Var v) const { return nodes_[static_cast<size_t>(v.i)].needs_grad; }
  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat val;
    Mat grad;
    bool needs_grad = false;
    std::function<void(Tape&)> back;
  };

  std::vector<Node> nodes_;

  Var push(Mat val, bool needs_grad, std::function<void(Tape&)> back);
  Mat& grad_ref(int i);
  void accum(int i, const Mat& g);
};

}  // namespace hidvae::nn
