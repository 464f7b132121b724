#include "simreweight/graph.hpp"

#include <algorithm>
#include <cmath>

namespace simreweight::ad {

namespace {

void require(bool ok, const char* msg) {
  if (!ok) throw ShapeMismatch(msg);
}

bool is_2d(const std::vector<int64_t>& s) { return s.size() == 2; }

}  // namespace

NodeRef Graph::push(Node n) {
  nodes_.push_back(std::move(n));
  return NodeRef{static_cast<int32_t>(nodes_.size() - 1)};
}

void Graph::check(NodeRef r) const {
  if (!r.valid() || r.id >= size()) throw Error("graph: reference to unknown node");
}

NodeRef Graph::leaf(std::vector<int64_t> shape) {
  Node n;
  n.op = Op::Leaf;
  n.shape = std::move(shape);
  n.needs_grad = true;
  NodeRef r = push(std::move(n));
  leaves_.push_back(r.id);
  return r;
}

NodeRef Graph::constant(Tensor t) {
  Node n;
  n.op = Op::Constant;
  n.shape = t.shape;
  n.aux = static_cast<int32_t>(constants_.size());
  constants_.push_back(std::move(t));
  return push(std::move(n));
}

NodeRef Graph::unary(Op op, NodeRef a, double c) {
  check(a);
  Node n;
  n.op = op;
  n.in[0] = a.id;
  n.shape = node(a).shape;
  n.c = c;
  bool detached = (op == Op::Step || op == Op::Sign || op == Op::RowMax || op == Op::TopKMask);
  n.needs_grad = !detached && node(a).needs_grad;
  return push(std::move(n));
}

NodeRef Graph::add(NodeRef a, NodeRef b) {
  check(a);
  check(b);
  require(node(a).shape == node(b).shape, "add: shape mismatch");
  Node n;
  n.op = Op::Add;
  n.in = {a.id, b.id};
  n.shape = node(a).shape;
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n));
}

NodeRef Graph::sub(NodeRef a, NodeRef b) {
  check(a);
  check(b);
  require(node(a).shape == node(b).shape, "sub: shape mismatch");
  Node n;
  n.op = Op::Sub;
  n.in = {a.id, b.id};
  n.shape = node(a).shape;
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n));
}

NodeRef Graph::mul(NodeRef a, NodeRef b) {
  check(a);
  check(b);
  require(node(a).shape == node(b).shape, "mul: shape mismatch");
  Node n;
  n.op = Op::Mul;
  n.in = {a.id, b.id};
  n.shape = node(a).shape;
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n));
}

NodeRef Graph::scale(NodeRef a, double c) { return unary(Op::Scale, a, c); }
NodeRef Graph::add_scalar(NodeRef a, double c) { return unary(Op::AddScalar, a, c); }

NodeRef Graph::matmul(NodeRef a, NodeRef b) {
  check(a);
  check(b);
  const auto& sa = node(a).shape;
  const auto& sb = node(b).shape;
  require(is_2d(sa) && is_2d(sb), "matmul: operands must be 2-D");
  require(sa[1] == sb[0], "matmul: inner dimensions differ");
  Node n;
  n.op = Op::MatMul;
  n.in = {a.id, b.id};
  n.shape = {sa[0], sb[1]};
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n));
}

NodeRef Graph::transpose(NodeRef a) {
  check(a);
  const auto& s = node(a).shape;
  require(is_2d(s), "transpose: operand must be 2-D");
  Node n;
  n.op = Op::Transpose;
  n.in[0] = a.id;
  n.shape = {s[1], s[0]};
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

NodeRef Graph::sigmoid(NodeRef a) { return unary(Op::Sigmoid, a); }
NodeRef Graph::relu(NodeRef a) { return unary(Op::Relu, a); }
NodeRef Graph::step(NodeRef a) { return unary(Op::Step, a); }
NodeRef Graph::exp(NodeRef a) { return unary(Op::Exp, a); }
NodeRef Graph::sqrt(NodeRef a) { return unary(Op::Sqrt, a); }
NodeRef Graph::recip(NodeRef a) { return unary(Op::Recip, a); }
NodeRef Graph::abs(NodeRef a) { return unary(Op::Abs, a); }
NodeRef Graph::sign(NodeRef a) { return unary(Op::Sign, a); }

NodeRef Graph::gather(NodeRef a, std::vector<int32_t> map, std::vector<int64_t> out_shape) {
  check(a);
  require(static_cast<int64_t>(map.size()) == Tensor::count(out_shape),
          "gather: map size must equal output numel");
  int64_t in_n = Tensor::count(node(a).shape);
  for (int32_t m : map) require(m < in_n, "gather: map index out of range");
  Node n;
  n.op = Op::Gather;
  n.in[0] = a.id;
  n.shape = std::move(out_shape);
  n.aux = static_cast<int32_t>(maps_.size());
  maps_.push_back(std::move(map));
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

NodeRef Graph::scatter(NodeRef a, std::vector<int32_t> map, std::vector<int64_t> out_shape) {
  check(a);
  require(static_cast<int64_t>(map.size()) == Tensor::count(node(a).shape),
          "scatter: map size must equal input numel");
  int64_t out_n = Tensor::count(out_shape);
  for (int32_t m : map) require(m < out_n, "scatter: map index out of range");
  Node n;
  n.op = Op::Scatter;
  n.in[0] = a.id;
  n.shape = std::move(out_shape);
  n.aux = static_cast<int32_t>(maps_.size());
  maps_.push_back(std::move(map));
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n));
}

NodeRef Graph::row_max(NodeRef a) {
  check(a);
  const auto& s = node(a).shape;
  require(is_2d(s), "row_max: operand must be 2-D");
  Node n;
  n.op = Op::RowMax;
  n.in[0] = a.id;
  n.shape = {s[0], 1};
  n.needs_grad = false;
  return push(std::move(n));
}

NodeRef Graph::topk_mask(NodeRef a, int64_t k) {
  check(a);
  const auto& s = node(a).shape;
  require(is_2d(s) && s[1] == 1, "topk_mask: operand must be a column vector");
  Node n;
  n.op = Op::TopKMask;
  n.in[0] = a.id;
  n.shape = s;
  n.c = static_cast<double>(k);
  n.needs_grad = false;
  return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Evaluation

void Workspace::prepare(const Graph& g) {
  size_t n = static_cast<size_t>(g.size());
  if (values_.size() < n) {
    values_.resize(n);
    adjoints_.resize(n);
    bound_.resize(n, 0);
    const_ready_.resize(n, 0);
    grad_live_.resize(n, 0);
  }
  known_nodes_ = g.size();
}

void Workspace::bind(const Graph& g, NodeRef leaf, const Tensor& t) {
  prepare(g);
  const Node& n = g.node(leaf);
  if (n.op != Op::Leaf) throw Error("bind: node is not a leaf");
  if (n.shape != t.shape)
    throw ShapeMismatch("bind: tensor shape " + shape_str(t.shape) + " does not match leaf " +
                        shape_str(n.shape));
  values_[static_cast<size_t>(leaf.id)] = t;
  bound_[static_cast<size_t>(leaf.id)] = 1;
}

void Workspace::bind_inplace(const Graph& g, NodeRef leaf, const std::vector<double>& data) {
  prepare(g);
  const Node& n = g.node(leaf);
  if (n.op != Op::Leaf) throw Error("bind: node is not a leaf");
  if (Tensor::count(n.shape) != static_cast<int64_t>(data.size()))
    throw ShapeMismatch("bind: data size does not match leaf shape");
  Tensor& v = values_[static_cast<size_t>(leaf.id)];
  v.shape = n.shape;
  v.data = data;
  bound_[static_cast<size_t>(leaf.id)] = 1;
}

bool Workspace::has_grad(NodeRef r) const {
  size_t i = static_cast<size_t>(r.id);
  return i < grad_live_.size() && grad_live_[i];
}

namespace {

void ensure_shape(Tensor& t, const std::vector<int64_t>& shape) {
  if (t.shape != shape) {
    t.shape = shape;
    t.data.assign(static_cast<size_t>(Tensor::count(shape)), 0.0);
  }
}

void matmul_nn(const Tensor& a, const Tensor& b, Tensor& out, bool accumulate) {
  int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  if (!accumulate) std::fill(out.data.begin(), out.data.end(), 0.0);
  const double* A = a.data.data();
  const double* B = b.data.data();
  double* C = out.data.data();
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t p = 0; p < k; ++p) {
      double av = A[i * k + p];
      if (av == 0.0) continue;
      const double* brow = B + p * n;
      double* crow = C + i * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C += A * B^T with A [m x k], B [n x k]
void matmul_nt_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  int64_t m = a.shape[0], k = a.shape[1], n = b.shape[0];
  const double* A = a.data.data();
  const double* B = b.data.data();
  double* C = out.data.data();
  for (int64_t i = 0; i < m; ++i) {
    const double* arow = A + i * k;
    for (int64_t j = 0; j < n; ++j) {
      const double* brow = B + j * k;
      double acc = 0.0;
      for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      C[i * n + j] += acc;
    }
  }
}

// C += A^T * B with A [m x k], B [m x n], C [k x n]
void matmul_tn_acc(const Tensor& a, const Tensor& b, Tensor& out) {
  int64_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
  const double* A = a.data.data();
  const double* B = b.data.data();
  double* C = out.data.data();
  for (int64_t i = 0; i < m; ++i) {
    const double* brow = B + i * n;
    for (int64_t p = 0; p < k; ++p) {
      double av = A[i * k + p];
      if (av == 0.0) continue;
      double* crow = C + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

void check_finite(const Tensor& t, const char* what) {
  if (!t.all_finite()) throw NonFiniteValue(std::string("non-finite value in ") + what);
}

}  // namespace

void eval(const Graph& g, Workspace& ws, NodeRef output, FiniteCheck check) {
  if (!output.valid() || output.id >= g.size()) throw Error("eval: unknown output node");
  ws.prepare(g);
  const int32_t last = output.id;
  for (int32_t id = 0; id <= last; ++id) {
    const Node& n = g.node(id);
    Tensor& out = ws.values_[static_cast<size_t>(id)];
    switch (n.op) {
      case Op::Leaf:
        if (!ws.bound_[static_cast<size_t>(id)]) throw Error("eval: unbound leaf");
        break;
      case Op::Constant:
        if (!ws.const_ready_[static_cast<size_t>(id)]) {
          out = g.constant_value(n.aux);
          ws.const_ready_[static_cast<size_t>(id)] = 1;
        }
        break;
      case Op::Add: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        const Tensor& b = ws.values_[static_cast<size_t>(n.in[1])];
        ensure_shape(out, n.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + b.data[i];
        break;
      }
      case Op::Sub: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        const Tensor& b = ws.values_[static_cast<size_t>(n.in[1])];
        ensure_shape(out, n.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] - b.data[i];
        break;
      }
      case Op::Mul: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        const Tensor& b = ws.values_[static_cast<size_t>(n.in[1])];
        ensure_shape(out, n.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * b.data[i];
        break;
      }
      case Op::Scale: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] * n.c;
        break;
      }
      case Op::AddScalar: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] + n.c;
        break;
      }
      case Op::MatMul: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        const Tensor& b = ws.values_[static_cast<size_t>(n.in[1])];
        ensure_shape(out, n.shape);
        matmul_nn(a, b, out, false);
        break;
      }
      case Op::Transpose: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        int64_t m = a.shape[0], c = a.shape[1];
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < c; ++j) out.data[static_cast<size_t>(j * m + i)] = a.data[static_cast<size_t>(i * c + j)];
        break;
      }
      case Op::Sigmoid: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = 1.0 / (1.0 + std::exp(-a.data[i]));
        break;
      }
      case Op::Relu: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] > 0.0 ? a.data[i] : 0.0;
        break;
      }
      case Op::Step: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = a.data[i] > 0.0 ? 1.0 : 0.0;
        break;
      }
      case Op::Exp: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::exp(a.data[i]);
        break;
      }
      case Op::Sqrt: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::sqrt(a.data[i]);
        break;
      }
      case Op::Recip: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = 1.0 / a.data[i];
        break;
      }
      case Op::Abs: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = std::fabs(a.data[i]);
        break;
      }
      case Op::Sign: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        for (size_t i = 0; i < out.data.size(); ++i)
          out.data[i] = a.data[i] > 0.0 ? 1.0 : (a.data[i] < 0.0 ? -1.0 : 0.0);
        break;
      }
      case Op::Gather: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        const auto& map = g.index_map(n.aux);
        for (size_t j = 0; j < map.size(); ++j)
          out.data[j] = map[j] < 0 ? 0.0 : a.data[static_cast<size_t>(map[j])];
        break;
      }
      case Op::Scatter: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        std::fill(out.data.begin(), out.data.end(), 0.0);
        const auto& map = g.index_map(n.aux);
        for (size_t i = 0; i < map.size(); ++i)
          if (map[i] >= 0) out.data[static_cast<size_t>(map[i])] += a.data[i];
        break;
      }
      case Op::RowMax: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        int64_t m = a.shape[0], c = a.shape[1];
        for (int64_t i = 0; i < m; ++i) {
          double mx = a.data[static_cast<size_t>(i * c)];
          for (int64_t j = 1; j < c; ++j) mx = std::max(mx, a.data[static_cast<size_t>(i * c + j)]);
          out.data[static_cast<size_t>(i)] = mx;
        }
        break;
      }
      case Op::TopKMask: {
        const Tensor& a = ws.values_[static_cast<size_t>(n.in[0])];
        ensure_shape(out, n.shape);
        int64_t m = a.shape[0];
        int64_t k = static_cast<int64_t>(n.c);
        std::fill(out.data.begin(), out.data.end(), 0.0);
        if (k >= m) {
          std::fill(out.data.begin(), out.data.end(), 1.0);
          break;
        }
        // Stable selection: ties resolved toward the lower index.
        std::vector<int64_t> idx(static_cast<size_t>(m));
        for (int64_t i = 0; i < m; ++i) idx[static_cast<size_t>(i)] = i;
        std::stable_sort(idx.begin(), idx.end(), [&](int64_t x, int64_t y) {
          return a.data[static_cast<size_t>(x)] > a.data[static_cast<size_t>(y)];
        });
        for (int64_t i = 0; i < k; ++i) out.data[static_cast<size_t>(idx[static_cast<size_t>(i)])] = 1.0;
        break;
      }
    }
    if (check == FiniteCheck::All) check_finite(ws.values_[static_cast<size_t>(id)], "eval");
  }
  if (check == FiniteCheck::Output) check_finite(ws.values_[static_cast<size_t>(last)], "eval output");
}

// ---------------------------------------------------------------------------
// Numeric reverse pass

void backward(const Graph& g, Workspace& ws, NodeRef output, double seed, FiniteCheck check) {
  if (!output.valid() || output.id >= g.size()) throw Error("backward: unknown output node");
  const Node& on = g.node(output);
  if (Tensor::count(on.shape) != 1) throw NonScalarOutput("backward: output must be scalar");
  ws.prepare(g);

  const int32_t last = output.id;
  std::fill(ws.grad_live_.begin(), ws.grad_live_.begin() + last + 1, 0);

  auto adj = [&](int32_t id) -> Tensor& { return ws.adjoints_[static_cast<size_t>(id)]; };
  auto val = [&](int32_t id) -> const Tensor& { return ws.values_[static_cast<size_t>(id)]; };
  auto touch = [&](int32_t id) -> Tensor& {
    Tensor& t = adj(id);
    if (!ws.grad_live_[static_cast<size_t>(id)]) {
      ensure_shape(t, g.node(id).shape);
      std::fill(t.data.begin(), t.data.end(), 0.0);
      ws.grad_live_[static_cast<size_t>(id)] = 1;
    }
    return t;
  };

  {
    Tensor& t = touch(last);
    t.data[0] = seed;
  }

  for (int32_t id = last; id >= 0; --id) {
    const Node& n = g.node(id);
    if (!n.needs_grad || !ws.grad_live_[static_cast<size_t>(id)]) continue;
    const Tensor& go = adj(id);
    const int32_t a = n.in[0];
    const int32_t b = n.in[1];
    switch (n.op) {
      case Op::Leaf:
      case Op::Constant:
        break;
      case Op::Add: {
        if (g.node(a).needs_grad) {
          Tensor& ga = touch(a);
          for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
        }
        if (g.node(b).needs_grad) {
          Tensor& gb = touch(b);
          for (size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i];
        }
        break;
      }
      case Op::Sub: {
        if (g.node(a).needs_grad) {
          Tensor& ga = touch(a);
          for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
        }
        if (g.node(b).needs_grad) {
          Tensor& gb = touch(b);
          for (size_t i = 0; i < go.data.size(); ++i) gb.data[i] -= go.data[i];
        }
        break;
      }
      case Op::Mul: {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        if (g.node(a).needs_grad) {
          Tensor& ga = touch(a);
          for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * bv.data[i];
        }
        if (g.node(b).needs_grad) {
          Tensor& gb = touch(b);
          for (size_t i = 0; i < go.data.size(); ++i) gb.data[i] += go.data[i] * av.data[i];
        }
        break;
      }
      case Op::Scale: {
        Tensor& ga = touch(a);
        for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * n.c;
        break;
      }
      case Op::AddScalar: {
        Tensor& ga = touch(a);
        for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i];
        break;
      }
      case Op::MatMul: {
        const Tensor& av = val(a);
        const Tensor& bv = val(b);
        if (g.node(a).needs_grad) matmul_nt_acc(go, bv, touch(a));
        if (g.node(b).needs_grad) matmul_tn_acc(av, go, touch(b));
        break;
      }
      case Op::Transpose: {
        Tensor& ga = touch(a);
        int64_t m = n.shape[0], c = n.shape[1];  // go is [m x c], ga is [c x m]
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < c; ++j)
            ga.data[static_cast<size_t>(j * m + i)] += go.data[static_cast<size_t>(i * c + j)];
        break;
      }
      case Op::Sigmoid: {
        const Tensor& s = val(id);
        Tensor& ga = touch(a);
        for (size_t i = 0; i < go.data.size(); ++i)
          ga.data[i] += go.data[i] * s.data[i] * (1.0 - s.data[i]);
        break;
      }
      case Op::Relu: {
        const Tensor& av = val(a);
        Tensor& ga = touch(a);
        for (size_t i = 0; i < go.data.size(); ++i)
          if (av.data[i] > 0.0) ga.data[i] += go.data[i];
        break;
      }
      case Op::Exp: {
        const Tensor& e = val(id);
        Tensor& ga = touch(a);
        for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * e.data[i];
        break;
      }
      case Op::Sqrt: {
        const Tensor& s = val(id);
        Tensor& ga = touch(a);
        for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] += go.data[i] * 0.5 / s.data[i];
        break;
      }
      case Op::Recip: {
        const Tensor& r = val(id);
        Tensor& ga = touch(a);
        for (size_t i = 0; i < go.data.size(); ++i) ga.data[i] -= go.data[i] * r.data[i] * r.data[i];
        break;
      }
      case Op::Abs: {
        const Tensor& av = val(a);
        Tensor& ga = touch(a);
        for (size_t i = 0; i < go.data.size(); ++i) {
          double s = av.data[i] > 0.0 ? 1.0 : (av.data[i] < 0.0 ? -1.0 : 0.0);
          ga.data[i] += go.data[i] * s;
        }
        break;
      }
      case Op::Gather: {
        Tensor& ga = touch(a);
        const auto& map = g.index_map(n.aux);
        for (size_t j = 0; j < map.size(); ++j)
          if (map[j] >= 0) ga.data[static_cast<size_t>(map[j])] += go.data[j];
        break;
      }
      case Op::Scatter: {
        Tensor& ga = touch(a);
        const auto& map = g.index_map(n.aux);
        for (size_t i = 0; i < map.size(); ++i)
          if (map[i] >= 0) ga.data[i] += go.data[static_cast<size_t>(map[i])];
        break;
      }
      case Op::Step:
      case Op::Sign:
      case Op::RowMax:
      case Op::TopKMask:
        break;
    }
  }
  if (check != FiniteCheck::None) {
    for (int32_t lid : g.leaves()) {
      if (lid <= last && ws.grad_live_[static_cast<size_t>(lid)])
        if (!ws.adjoints_[static_cast<size_t>(lid)].all_finite())
          throw NonFiniteGradient("non-finite gradient at leaf");
    }
  }
}

// ---------------------------------------------------------------------------
// Conveniences

const Tensor* GradientMap::find(NodeRef leaf) const {
  for (const auto& [id, t] : grads)
    if (id == leaf.id) return &t;
  return nullptr;
}

Tensor eval(const Graph& g, const Bindings& bindings, NodeRef output, FiniteCheck check) {
  Workspace ws;
  for (const auto& [l, t] : bindings) ws.bind(g, l, t);
  eval(g, ws, output, check);
  return ws.value(output);
}

GradientMap backward(const Graph& g, const Bindings& bindings, NodeRef output) {
  Workspace ws;
  for (const auto& [l, t] : bindings) ws.bind(g, l, t);
  eval(g, ws, output, FiniteCheck::All);
  backward(g, ws, output, 1.0, FiniteCheck::Output);
  GradientMap gm;
  for (int32_t lid : g.leaves()) {
    if (lid <= output.id && ws.has_grad(NodeRef{lid}))
      gm.grads.emplace_back(lid, ws.grad(NodeRef{lid}));
  }
  return gm;
}

// ---------------------------------------------------------------------------
// Symbolic reverse pass (gradients as graph nodes)

std::vector<NodeRef> backward_graph(Graph& g, NodeRef output, const std::vector<NodeRef>& targets) {
  const Node& on = g.node(output);
  if (Tensor::count(on.shape) != 1) throw NonScalarOutput("backward_graph: output must be scalar");
  const int32_t last = output.id;

  // Only emit gradients along paths that reach a target leaf.
  std::vector<uint8_t> relevant(static_cast<size_t>(last) + 1, 0);
  for (NodeRef t : targets)
    if (t.valid() && t.id <= last) relevant[static_cast<size_t>(t.id)] = 1;
  for (int32_t id = 0; id <= last; ++id) {
    const Node& n = g.node(id);
    if (relevant[static_cast<size_t>(id)] || !n.needs_grad) continue;
    bool detached = (n.op == Op::Step || n.op == Op::Sign || n.op == Op::RowMax || n.op == Op::TopKMask);
    if (detached) continue;
    for (int32_t in : n.in)
      if (in >= 0 && relevant[static_cast<size_t>(in)]) relevant[static_cast<size_t>(id)] = 1;
  }

  // Adjoint node per graph node; -1 until some gradient flows in.
  std::vector<int32_t> adj(static_cast<size_t>(last) + 1, -1);
  auto accumulate = [&](int32_t id, NodeRef grad) {
    if (adj[static_cast<size_t>(id)] < 0)
      adj[static_cast<size_t>(id)] = grad.id;
    else
      adj[static_cast<size_t>(id)] = g.add(NodeRef{adj[static_cast<size_t>(id)]}, grad).id;
  };

  if (relevant[static_cast<size_t>(last)])
    accumulate(last, g.constant(Tensor::full(on.shape, 1.0)));

  for (int32_t id = last; id >= 0; --id) {
    const Node n = g.node(id);  // copy: g grows during the sweep
    if (!relevant[static_cast<size_t>(id)] || adj[static_cast<size_t>(id)] < 0) continue;
    NodeRef go{adj[static_cast<size_t>(id)]};
    NodeRef self{id};
    NodeRef a{n.in[0]};
    NodeRef b{n.in[1]};
    auto flows = [&](NodeRef r) { return r.valid() && relevant[static_cast<size_t>(r.id)]; };
    switch (n.op) {
      case Op::Leaf:
      case Op::Constant:
        break;
      case Op::Add:
        if (flows(a)) accumulate(a.id, go);
        if (flows(b)) accumulate(b.id, go);
        break;
      case Op::Sub:
        if (flows(a)) accumulate(a.id, go);
        if (flows(b)) accumulate(b.id, g.scale(go, -1.0));
        break;
      case Op::Mul:
        if (flows(a)) accumulate(a.id, g.mul(go, b));
        if (flows(b)) accumulate(b.id, g.mul(go, a));
        break;
      case Op::Scale:
        if (flows(a)) accumulate(a.id, g.scale(go, n.c));
        break;
      case Op::AddScalar:
        if (flows(a)) accumulate(a.id, go);
        break;
      case Op::MatMul:
        if (flows(a)) accumulate(a.id, g.matmul(go, g.transpose(b)));
        if (flows(b)) accumulate(b.id, g.matmul(g.transpose(a), go));
        break;
      case Op::Transpose:
        if (flows(a)) accumulate(a.id, g.transpose(go));
        break;
      case Op::Sigmoid:
        if (flows(a)) accumulate(a.id, g.mul(go, g.sub(self, g.mul(self, self))));
        break;
      case Op::Relu:
        if (flows(a)) accumulate(a.id, g.mul(go, g.step(a)));
        break;
      case Op::Exp:
        if (flows(a)) accumulate(a.id, g.mul(go, self));
        break;
      case Op::Sqrt:
        if (flows(a)) accumulate(a.id, g.scale(g.mul(go, g.recip(self)), 0.5));
        break;
      case Op::Recip:
        if (flows(a)) accumulate(a.id, g.scale(g.mul(go, g.mul(self, self)), -1.0));
        break;
      case Op::Abs:
        if (flows(a)) accumulate(a.id, g.mul(go, g.sign(a)));
        break;
      case Op::Gather:
        if (flows(a)) accumulate(a.id, g.scatter(go, g.index_map(n.aux), g.node(a).shape));
        break;
      case Op::Scatter:
        if (flows(a)) accumulate(a.id, g.gather(go, g.index_map(n.aux), g.node(a).shape));
        break;
      case Op::Step:
      case Op::Sign:
      case Op::RowMax:
      case Op::TopKMask:
        break;
    }
  }

  std::vector<NodeRef> out;
  out.reserve(targets.size());
  for (NodeRef t : targets) {
    int32_t gid = (t.id <= last) ? adj[static_cast<size_t>(t.id)] : -1;
    out.push_back(NodeRef{gid});
  }
  return out;
}

}  // namespace simreweight::ad
