#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "capt/mat.hpp"

namespace capt {

// Handle to a node on a Tape.
struct Val {
    int i = -1;
    bool valid() const { return i >= 0; }
};

// Reverse-mode autodiff tape. A forward pass appends nodes; backward()
// walks them in reverse and accumulates gradients. Every node's gradient
// is tracked (frozen weights are just leaves whose gradient the caller
// never reads). Evaluation order is fixed, so results are bit-stable.
class Tape {
  public:
    Val leaf(Mat value);

    const Mat& value(Val v) const { return nodes_[v.i].value; }
    const Mat& grad(Val v) const { return nodes_[v.i].grad; }
    size_t size() const { return nodes_.size(); }

    // Seeds d(root)/d(root) = 1 and backpropagates. root must be 1x1.
    void backward(Val root);

    Val add(Val a, Val b);
    Val sub(Val a, Val b);
    Val scale(Val a, double s);
    Val neg(Val a) { return scale(a, -1.0); }
    Val hadamard(Val a, Val b);
    Val matmul(Val a, Val b);
    // a * b^T
    Val matmul_nt(Val a, Val b);
    // Adds a 1xC bias row to every row of a.
    Val add_rowvec(Val a, Val row);
    Val relu(Val a);
    // x * sigmoid(1.702 x), the activation used by the text/vision blocks.
    Val gelu_quick(Val a);
    Val layernorm_rows(Val a, Val gain, Val bias, double eps = 1e-5);
    Val softmax_rows(Val a);
    Val concat_rows(const std::vector<Val>& parts);
    Val slice_rows(Val a, int begin, int count);
    Val concat_cols(const std::vector<Val>& parts);
    Val slice_cols(Val a, int begin, int count);
    // Repeats a 1xD row `count` times.
    Val broadcast_row(Val row, int count);
    // Packs C 1x1 scalars into a 1xC row.
    Val stack_scalars(const std::vector<Val>& scalars);
    // 1x1 element extraction.
    Val pick(Val a, int r, int c);
    Val log(Val a);
    // sum over entries of |x|^p, p in {1, 2}; returns 1x1.
    Val sum_abs_pow(Val a, int p);
    // Cosine similarity of two vectors (any shape, flattened); returns 1x1.
    Val cosine(Val a, Val b);

  private:
    struct Node {
        Mat value;
        Mat grad;
        std::function<void()> back;  // empty for leaves
    };

    Val push(Mat value, std::function<void()> back);
    Mat& grad_mut(Val v) { return nodes_[v.i].grad; }

    // deque keeps references returned by value()/grad() stable while new
    // nodes are appended mid-expression.
    std::deque<Node> nodes_;
};

}  // namespace capt
