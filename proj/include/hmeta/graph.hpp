#pragma once

#include <cstdint>
#include <vector>

#include "hmeta/params.hpp"
#include "hmeta/tensor.hpp"

namespace hmeta {

/// Handle to a node in a Graph. Only valid for the graph that produced it.
struct Val {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Reverse-mode tape. Nodes are appended in execution order, which is a
/// topological order by construction; backward walks the tape once in
/// reverse. Graphs are cheap to build and are discarded after use.
class Graph {
 public:
  // Inputs.
  Val leaf(Parameter& p);
  Val constant(Tensor t);

  // Elementwise / scalar.
  Val add(Val a, Val b);
  Val sub(Val a, Val b);
  Val mul(Val a, Val b);
  Val neg(Val a);
  Val scale(Val a, double c);
  Val add_scalar(Val a, double c);
  Val vmin(Val a, Val b);
  Val clamp(Val a, double lo, double hi);
  Val gelu(Val a);
  Val tanh(Val a);
  Val sigmoid(Val a);
  Val exp(Val a);

  // Linear algebra.
  Val matmul(Val a, Val b);
  /// Batched [B,m,k] x [B,k,n] -> [B,m,n].
  Val bmm_nn(Val a, Val b);
  /// Batched [B,m,k] x [B,n,k]^T -> [B,m,n].
  Val bmm_nt(Val a, Val b);
  /// [R,d] + [d] broadcast over rows.
  Val add_bias(Val x, Val b);
  /// [d] -> [rows,d], every row a copy.
  Val broadcast_row(Val v, std::int64_t rows);

  // Shape plumbing (copies; tensors have no views).
  Val reshape(Val a, std::vector<std::int64_t> shape);
  /// [N,T,H*hd] -> [N*H,T,hd], heads become extra batch entries.
  Val split_heads(Val x, std::int64_t heads);
  /// Inverse of split_heads: [N*H,T,hd] -> [N,T,H*hd].
  Val merge_heads(Val x, std::int64_t heads);
  Val concat_last(Val a, Val b);
  Val concat_rows(Val a, Val b);
  /// [N,T,d] -> [N,d], slice at final time index.
  Val take_last(Val x);
  /// [N,T,d] -> [N,d], slice at each row's last mask-valid index.
  Val take_last_valid(Val x, Val mask);

  // Attention / encoder pieces.
  /// Adds a fixed sinusoidal table to x [N,T,d]; each row's positions start
  /// at its first mask-valid index, so left padding does not shift phases.
  Val add_positional(Val x, Val mask, const Tensor& table);
  /// Softmax over the last axis of scores [B,T,S] with key mask [Bm,S],
  /// B a multiple of Bm (heads share their sequence's mask). Masked keys
  /// get exactly zero weight.
  Val softmax_masked(Val scores, Val mask);
  Val layer_norm(Val x, Val gain, Val bias);

  // Reductions.
  Val sum_last(Val a);
  Val mean_all(Val a);
  Val sum_all(Val a);

  const Tensor& value(Val v) const { return nodes_[v.id].value; }
  const std::vector<std::int64_t>& shape(Val v) const {
    return nodes_[v.id].value.shape();
  }
  /// Gradient w.r.t. a node, valid after backward; null if none flowed.
  const Tensor* grad(Val v) const;

  /// Accumulates dloss/dparam into each reachable Parameter::grad. The loss
  /// must be scalar. Repeated calls on the same tape replay identically.
  void backward(Val loss);

  std::size_t node_count() const { return nodes_.size(); }

 private:
  enum class Op : std::uint8_t {
    kLeaf, kConstant,
    kAdd, kSub, kMul, kNeg, kScale, kAddScalar, kMin, kClamp,
    kGelu, kTanh, kSigmoid, kExp,
    kMatmul, kBmmNN, kBmmNT, kAddBias, kBroadcastRow,
    kReshape, kSplitHeads, kMergeHeads, kConcatLast, kConcatRows, kTakeLast,
    kTakeLastValid,
    kAddPositional, kSoftmaxMasked, kLayerNorm,
    kSumLast, kMeanAll, kSumAll,
  };

  struct Node {
    Op op;
    bool needs_grad = false;
    int in0 = -1, in1 = -1, in2 = -1;
    Tensor value;
    Tensor grad;           // lazily allocated during backward
    Parameter* param = nullptr;
    double a0 = 0.0, a1 = 0.0;
    std::int64_t i0 = 0;
    Tensor aux;            // op scratch saved for backward
  };

  int push(Node n);
  Node& at(Val v);
  Tensor& grad_buf(int id);
  void accumulate(int id, const Tensor& g);

  std::vector<Node> nodes_;
};

}  // namespace hmeta
