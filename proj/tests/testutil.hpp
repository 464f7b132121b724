#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "simreweight/dataset.hpp"
#include "simreweight/graph.hpp"
#include "simreweight/model.hpp"
#include "simreweight/rng.hpp"
#include "simreweight/simulator.hpp"

namespace testutil {

using simreweight::ad::Bindings;
using simreweight::ad::FiniteCheck;
using simreweight::ad::Graph;
using simreweight::ad::NodeRef;
using simreweight::ad::Tensor;
using simreweight::ad::Workspace;

inline Tensor random_tensor(std::vector<int64_t> shape, simreweight::rng::Sequence& rng,
                            double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.uniform(lo, hi);
  return t;
}

inline double rel_err(double a, double b) {
  double denom = std::max(std::max(std::fabs(a), std::fabs(b)), 1e-6);
  return std::fabs(a - b) / denom;
}

// Central finite differences against the numeric reverse pass, over every
// entry of every listed leaf. Returns the max relative error.
inline double fd_check(const Graph& g, const Bindings& binds, NodeRef out,
                       const std::vector<NodeRef>& leaves, double step = 1e-5) {
  Workspace ws;
  for (const auto& [l, t] : binds) ws.bind(g, l, t);
  eval(g, ws, out, FiniteCheck::All);
  backward(g, ws, out, 1.0, FiniteCheck::Output);

  double worst = 0.0;
  for (NodeRef leaf : leaves) {
    const Tensor* base = nullptr;
    for (const auto& [l, t] : binds)
      if (l.id == leaf.id) base = &t;
    if (!base) continue;
    Tensor grad = ws.has_grad(leaf) ? ws.grad(leaf) : Tensor::zeros(base->shape);
    for (size_t i = 0; i < base->data.size(); ++i) {
      Tensor hi = *base;
      Tensor lo = *base;
      hi.data[i] += step;
      lo.data[i] -= step;
      Workspace w2;
      for (const auto& [l, t] : binds) w2.bind(g, l, l.id == leaf.id ? hi : t);
      eval(g, w2, out, FiniteCheck::None);
      double f_hi = w2.value(out).data[0];
      for (const auto& [l, t] : binds) w2.bind(g, l, l.id == leaf.id ? lo : t);
      eval(g, w2, out, FiniteCheck::None);
      double f_lo = w2.value(out).data[0];
      double fd = (f_hi - f_lo) / (2.0 * step);
      worst = std::max(worst, rel_err(grad.data[i], fd));
    }
  }
  return worst;
}

}  // namespace testutil
