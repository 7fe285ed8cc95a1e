#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "condacl/tensor.hpp"

namespace condacl {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the reverse-mode tape. Values are computed eagerly at
/// construction; backward_fn reads this node's grad and accumulates into the
/// parents' grads.
struct Node {
  Tensor value;
  Tensor grad;  // allocated only when requires_grad
  std::vector<NodePtr> parents;
  std::function<void(Node&)> backward_fn;  // empty for leaves
  bool requires_grad = false;
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.numel() != value.numel()) grad = Tensor(value.shape());
  }
};

NodePtr constant(Tensor v);
NodePtr leaf(Tensor v, bool requires_grad = true);

/// Escape hatch for fused ops defined in other modules.
NodePtr make_op(const char* name, Tensor value, std::vector<NodePtr> parents,
                std::function<void(Node&)> backward_fn);

// Elementwise kinds accept equal shapes or a scalar (numel 1) on either side.
NodePtr add(const NodePtr& a, const NodePtr& b);
NodePtr sub(const NodePtr& a, const NodePtr& b);
NodePtr mul(const NodePtr& a, const NodePtr& b);
NodePtr scalar_mul(const NodePtr& a, double c);
NodePtr matmul(const NodePtr& a, const NodePtr& b);
NodePtr concat(const NodePtr& a, const NodePtr& b, int axis);
NodePtr slice(const NodePtr& a, int axis, int64_t start, int64_t len);
NodePtr reshape(const NodePtr& a, std::vector<int64_t> shape);

NodePtr sum_all(const NodePtr& a);
NodePtr mean_all(const NodePtr& a);
/// Reduces the given axis; the result drops that axis (a rank-1 input yields
/// a scalar). Computed with max subtraction.
NodePtr logsumexp(const NodePtr& a, int axis);

/// Cross-correlation with zero padding. x: N×C×H×W, w: O×C×kh×kw (kh, kw odd),
/// bias: O (may be null). Output extents must divide exactly.
NodePtr conv2d(const NodePtr& x, const NodePtr& w, const NodePtr& bias, int stride, int pad);

NodePtr avgpool2(const NodePtr& x);
NodePtr nearest_upsample2(const NodePtr& x);

NodePtr relu(const NodePtr& a);
NodePtr leaky_relu(const NodePtr& a, double slope = 0.2);
NodePtr tanh_op(const NodePtr& a);
NodePtr sigmoid(const NodePtr& a);
NodePtr exp_op(const NodePtr& a);
NodePtr log_op(const NodePtr& a);

/// Per-pixel softmax over the channel axis of an N×C×H×W tensor.
NodePtr softmax_channels(const NodePtr& logits);

/// log|det M| of a square matrix via LU with partial pivoting.
/// Throws SingularMix when |det M| <= 1e-8. Gradient is inv(M)^T.
NodePtr logdet(const NodePtr& m);

/// Reverse-mode sweep from a scalar loss. Interior grads are reset per call;
/// leaf (parameter) grads accumulate across calls.
void backward(const NodePtr& loss);

}  // namespace condacl
