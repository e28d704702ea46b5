#pragma once

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "cfl/param_set.hpp"
#include "cfl/tensor.hpp"

namespace cfl::ag {

// Reverse-mode autodiff over a fixed op set: conv2d, bias add, relu, dense,
// global average pooling, channel scatter/gather, elementwise arithmetic,
// sigmoid/log, scalar blends, softmax cross-entropy and mean-squared error.
// Graphs are DAGs of shared_ptr nodes; backward() walks them once.

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
  Tensor value;
  Tensor grad;  // allocated on demand during backward
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backprop;  // pushes this node's grad into inputs
  const char* op = "leaf";

  bool has_grad = false;
  void accumulate(const Tensor& g);
};

NodePtr constant(Tensor v);
NodePtr leaf(Tensor v);  // participates in gradients

// Cross-correlation with zero padding k/2. input [N,Cin,H,W], weight
// [Cout,Cin,k,k], k odd, stride >= 1. Output spatial dim is ceil(H/stride).
NodePtr conv2d(const NodePtr& input, const NodePtr& weight, int stride);

NodePtr bias_add(const NodePtr& x, const NodePtr& b);  // [N,C,H,W]+[C] or [N,C]+[C]
NodePtr relu(const NodePtr& x);
NodePtr sigmoid(const NodePtr& x);
NodePtr log_scalar(const NodePtr& x);  // natural log of a scalar node
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);  // elementwise
NodePtr scale(const NodePtr& x, double c);
NodePtr add_scalars(const std::vector<NodePtr>& xs);

// p*a + (1-p)*b with p a scalar node; the soft-gating primitive.
NodePtr blend(const NodePtr& p, const NodePtr& a, const NodePtr& b);

NodePtr global_avg_pool(const NodePtr& x);  // [N,C,H,W] -> [N,C]
NodePtr dense(const NodePtr& x, const NodePtr& w, const NodePtr& b);  // [N,F]x[O,F]+[O] -> [N,O]

// Scatter channel dim 1 of [N,C,...] into `width` slots at `idx`; zeros
// elsewhere. gather is the exact inverse on those slots.
NodePtr scatter_channels(const NodePtr& x, const std::vector<int>& idx, int width);
NodePtr gather_channels(const NodePtr& x, const std::vector<int>& idx);

NodePtr pick(const NodePtr& x, std::size_t flat_index);  // scalar element
NodePtr mean_all(const NodePtr& x);
NodePtr mean_rows(const NodePtr& x);  // [N,C] -> [1,C]

// Numerically stable mean softmax cross-entropy; labels are class indices.
NodePtr softmax_xent_mean(const NodePtr& logits, const std::vector<int>& labels);
NodePtr mse_mean(const NodePtr& pred, const Tensor& target);

// Stops gradient flow; value passes through.
NodePtr detach(const NodePtr& x);

// Backpropagate from a scalar loss node, filling .grad on reachable nodes.
void backward(const NodePtr& loss);

// Row-wise softmax of a [N,C] tensor (forward-only helper, no node).
Tensor softmax_rows(const Tensor& logits);
int argmax_row(const Tensor& t, int row);

// Exact reverse-mode derivatives of a scalar loss built from the ops above.
// loss_fn receives one leaf node per parameter; the result has the same key
// set as `params` (zero tensors for parameters the loss never touched).
ParamSet grad_of(const std::function<NodePtr(const std::map<std::string, NodePtr>&)>& loss_fn,
                 const ParamSet& params);

}  // namespace cfl::ag
