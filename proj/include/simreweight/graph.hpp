#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "simreweight/errors.hpp"
#include "simreweight/tensor.hpp"

namespace simreweight::ad {

// Node kinds. Every differentiable op's vector-Jacobian product is itself
// expressible with ops from this set, so gradient graphs emitted by
// backward_graph() can be differentiated again (needed to push gradients
// through unrolled inner-loop updates).
enum class Op : uint8_t {
  Leaf,
  Constant,
  Add,        // elementwise, same shape
  Sub,
  Mul,
  Scale,      // x * c
  AddScalar,  // x + c
  MatMul,     // 2-D
  Transpose,  // 2-D
  Sigmoid,
  Relu,
  Step,     // 1 if x > 0 else 0; gradient does not flow through
  Exp,
  Sqrt,
  Recip,
  Abs,      // subgradient at 0 is 0 (via Sign)
  Sign,     // -1/0/+1; gradient does not flow through
  Gather,   // out[j] = map[j] < 0 ? 0 : in[map[j]]
  Scatter,  // out[map[i]] += in[i]; adjoint pair of Gather
  RowMax,   // [m x n] -> [m x 1]; detached (used for softmax shift)
  TopKMask, // [m x 1] -> 0/1 mask of the k largest entries; detached
};

struct NodeRef {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

struct Node {
  Op op = Op::Leaf;
  std::array<int32_t, 2> in{{-1, -1}};
  std::vector<int64_t> shape;
  double c = 0.0;       // Scale/AddScalar constant, TopKMask k
  int32_t aux = -1;     // constant slot or index-map slot
  bool needs_grad = false;
};

// Append-only computation graph. Nodes are topologically ordered by
// construction (inputs always precede users). Immutable values; thread-safe
// to share once built, with per-thread Workspaces for evaluation.
class Graph {
 public:
  NodeRef leaf(std::vector<int64_t> shape);
  NodeRef constant(Tensor t);

  NodeRef add(NodeRef a, NodeRef b);
  NodeRef sub(NodeRef a, NodeRef b);
  NodeRef mul(NodeRef a, NodeRef b);
  NodeRef scale(NodeRef a, double c);
  NodeRef add_scalar(NodeRef a, double c);
  NodeRef matmul(NodeRef a, NodeRef b);
  NodeRef transpose(NodeRef a);
  NodeRef sigmoid(NodeRef a);
  NodeRef relu(NodeRef a);
  NodeRef step(NodeRef a);
  NodeRef exp(NodeRef a);
  NodeRef sqrt(NodeRef a);
  NodeRef recip(NodeRef a);
  NodeRef abs(NodeRef a);
  NodeRef sign(NodeRef a);
  // `map` has one entry per output element (source flat index or -1 for 0).
  NodeRef gather(NodeRef a, std::vector<int32_t> map, std::vector<int64_t> out_shape);
  // `map` has one entry per input element (destination flat index or -1 to drop).
  NodeRef scatter(NodeRef a, std::vector<int32_t> map, std::vector<int64_t> out_shape);
  NodeRef row_max(NodeRef a);
  NodeRef topk_mask(NodeRef a, int64_t k);

  const Node& node(NodeRef r) const { return nodes_[static_cast<size_t>(r.id)]; }
  const Node& node(int32_t id) const { return nodes_[static_cast<size_t>(id)]; }
  int32_t size() const { return static_cast<int32_t>(nodes_.size()); }
  const Tensor& constant_value(int32_t slot) const { return constants_[static_cast<size_t>(slot)]; }
  const std::vector<int32_t>& index_map(int32_t slot) const { return maps_[static_cast<size_t>(slot)]; }
  const std::vector<int32_t>& leaves() const { return leaves_; }

 private:
  NodeRef push(Node n);
  NodeRef unary(Op op, NodeRef a, double c = 0.0);
  void check(NodeRef r) const;

  std::vector<Node> nodes_;
  std::vector<Tensor> constants_;
  std::vector<std::vector<int32_t>> maps_;
  std::vector<int32_t> leaves_;
};

enum class FiniteCheck { None, Output, All };

// Per-evaluation state: node values and adjoints, reused across calls so the
// hot loops stay allocation-free. One Workspace per thread.
class Workspace {
 public:
  void bind(const Graph& g, NodeRef leaf, const Tensor& t);
  void bind_inplace(const Graph& g, NodeRef leaf, const std::vector<double>& data);
  const Tensor& value(NodeRef r) const { return values_[static_cast<size_t>(r.id)]; }
  const Tensor& grad(NodeRef r) const { return adjoints_[static_cast<size_t>(r.id)]; }
  bool has_grad(NodeRef r) const;

  friend void eval(const Graph&, Workspace&, NodeRef, FiniteCheck);
  friend void backward(const Graph&, Workspace&, NodeRef, double, FiniteCheck);

 private:
  void prepare(const Graph& g);
  std::vector<Tensor> values_;
  std::vector<Tensor> adjoints_;
  std::vector<uint8_t> bound_;
  std::vector<uint8_t> const_ready_;
  std::vector<uint8_t> grad_live_;
  int32_t known_nodes_ = 0;
};

// Evaluates every node up to and including `output`. All leaves feeding it
// must be bound. NaN/Inf raises NonFiniteValue per the check mode.
void eval(const Graph& g, Workspace& ws, NodeRef output, FiniteCheck check = FiniteCheck::All);

// Reverse-mode pass; requires a prior eval() on the same workspace. `output`
// must be scalar (numel 1). Seeds the output adjoint with `seed`.
void backward(const Graph& g, Workspace& ws, NodeRef output, double seed = 1.0,
              FiniteCheck check = FiniteCheck::None);

struct GradientMap {
  std::vector<std::pair<int32_t, Tensor>> grads;  // (leaf id, gradient)
  const Tensor* find(NodeRef leaf) const;
};

using Bindings = std::vector<std::pair<NodeRef, Tensor>>;

// One-shot conveniences used by tests and small callers.
Tensor eval(const Graph& g, const Bindings& bindings, NodeRef output,
            FiniteCheck check = FiniteCheck::All);
GradientMap backward(const Graph& g, const Bindings& bindings, NodeRef output);

// Emits gradient nodes of `output` w.r.t. each target leaf into the same
// graph and returns them (invalid NodeRef when a target is unreachable).
// The emitted subgraph uses only differentiable ops, so it can be evaluated
// and differentiated again with the numeric backward().
std::vector<NodeRef> backward_graph(Graph& g, NodeRef output, const std::vector<NodeRef>& targets);

}  // namespace simreweight::ad
