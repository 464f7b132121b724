#include "simreweight/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "simreweight/nn.hpp"
#include "simreweight/rng.hpp"

namespace simreweight::gradcheck {

using ad::Bindings;
using ad::FiniteCheck;
using ad::Graph;
using ad::NodeRef;
using ad::Tensor;
using ad::Workspace;
namespace nn = ad::nn;

namespace {

constexpr double kStep = 1e-5;

Tensor rand_tensor(std::vector<int64_t> shape, rng::Sequence& r, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = r.uniform(lo, hi);
  return t;
}

double rel_err(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-6});
  return std::fabs(a - b) / denom;
}

double fd_vs_backward(const Graph& g, const Bindings& binds, NodeRef out,
                      const std::vector<NodeRef>& leaves) {
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
      Tensor hi = *base, lo = *base;
      hi.data[i] += kStep;
      lo.data[i] -= kStep;
      Workspace w2;
      for (const auto& [l, t] : binds) w2.bind(g, l, l.id == leaf.id ? hi : t);
      eval(g, w2, out, FiniteCheck::None);
      double f_hi = w2.value(out).data[0];
      for (const auto& [l, t] : binds) w2.bind(g, l, l.id == leaf.id ? lo : t);
      eval(g, w2, out, FiniteCheck::None);
      double f_lo = w2.value(out).data[0];
      worst = std::max(worst, rel_err(grad.data[i], (f_hi - f_lo) / (2.0 * kStep)));
    }
  }
  return worst;
}

}  // namespace

double check_primitives(int n_seeds) {
  double worst = 0.0;
  for (int s = 0; s < n_seeds; ++s) {
    rng::Sequence r(static_cast<uint64_t>(1000 + s));
    {  // matmul / add / mul
      Graph g;
      NodeRef a = g.leaf({3, 4}), b = g.leaf({4, 3}), c = g.leaf({3, 3});
      NodeRef y = nn::sum_all(g, g.mul(g.add(g.matmul(a, b), c), c));
      Bindings binds{{a, rand_tensor({3, 4}, r)}, {b, rand_tensor({4, 3}, r)}, {c, rand_tensor({3, 3}, r)}};
      worst = std::max(worst, fd_vs_backward(g, binds, y, {a, b, c}));
    }
    {  // sigmoid / relu / softmax
      Graph g;
      NodeRef x = g.leaf({2, 5});
      NodeRef y = nn::sum_all(g, g.mul(nn::softmax_rows(g, x), g.relu(g.sigmoid(x))));
      Bindings binds{{x, rand_tensor({2, 5}, r)}};
      worst = std::max(worst, fd_vs_backward(g, binds, y, {x}));
    }
    {  // layer norm
      Graph g;
      NodeRef x = g.leaf({3, 6}), ga = g.leaf({1, 6}), be = g.leaf({1, 6});
      NodeRef y = nn::sum_all(g, nn::layer_norm_rows(g, x, ga, be));
      Bindings binds{{x, rand_tensor({3, 6}, r)}, {ga, rand_tensor({1, 6}, r, 0.5, 1.5)}, {be, rand_tensor({1, 6}, r)}};
      worst = std::max(worst, fd_vs_backward(g, binds, y, {x, ga, be}));
    }
    {  // conv2d
      Graph g;
      NodeRef x = g.leaf({9, 2}), k = g.leaf({18, 3}), b = g.leaf({1, 3});
      NodeRef y = nn::sum_all(g, g.sigmoid(nn::conv2d_same(g, x, 3, 3, 3, 3, k, b)));
      Bindings binds{{x, rand_tensor({9, 2}, r)}, {k, rand_tensor({18, 3}, r)}, {b, rand_tensor({1, 3}, r)}};
      worst = std::max(worst, fd_vs_backward(g, binds, y, {x, k, b}));
    }
    {  // reductions + concatenation
      Graph g;
      NodeRef a = g.leaf({2, 3}), b = g.leaf({2, 3});
      NodeRef cat = nn::concat_rows(g, {a, b});
      NodeRef y = g.add(nn::mean_all(g, g.mul(cat, cat)), nn::sum_all(g, nn::concat_cols(g, {a, b})));
      Bindings binds{{a, rand_tensor({2, 3}, r)}, {b, rand_tensor({2, 3}, r)}};
      worst = std::max(worst, fd_vs_backward(g, binds, y, {a, b}));
    }
    {  // masked attention
      Graph g;
      NodeRef q = g.leaf({4, 4}), k = g.leaf({4, 4}), v = g.leaf({4, 4});
      NodeRef mask = g.constant(nn::causal_mask(4));
      NodeRef y = nn::mean_all(g, nn::attention(g, q, k, v, mask));
      Bindings binds{{q, rand_tensor({4, 4}, r)}, {k, rand_tensor({4, 4}, r)}, {v, rand_tensor({4, 4}, r)}};
      worst = std::max(worst, fd_vs_backward(g, binds, y, {q, k, v}));
    }
  }
  return worst;
}

model::ModelConfig small_check_config() {
  model::ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_enc_layers = 1;
  c.n_dec_layers = 1;
  c.cnn_channels = 4;
  c.cnn_kernel = 3;
  c.mlp_hidden = 16;
  c.dropout_rate = 0.0;
  c.L_in = 8;
  c.L_token = 4;
  c.L_out = 3;
  c.patch_rows = 3;
  c.patch_cols = 3;
  c.hours_per_day = 24;
  return c;
}

double check_model(const model::ModelConfig& cfg, int n_seeds, int n_coords) {
  model::Forecaster f(cfg);
  double worst = 0.0;
  for (int s = 0; s < n_seeds; ++s) {
    rng::Sequence r(static_cast<uint64_t>(7000 + s));
    // Random normalized-space sample with valid markers.
    data::WindowSample w;
    w.source = "sim";
    w.sample_id = s;
    const int P = static_cast<int>(cfg.patch_cells());
    for (int t = 0; t < 3; ++t) {
      auto& tw = w.tasks[static_cast<size_t>(t)];
      tw.input.resize(static_cast<size_t>(cfg.L_in * P));
      for (double& v : tw.input) v = r.uniform(-1.0, 1.0);
      tw.token.assign(tw.input.end() - static_cast<long>(cfg.L_token * P), tw.input.end());
      tw.target.resize(static_cast<size_t>(cfg.L_out));
      for (double& v : tw.target) v = r.uniform(-1.0, 1.0);
    }
    int start = static_cast<int>(r.index(1000));
    for (int t = 0; t < cfg.L_in; ++t) {
      w.enc_hour.push_back((start + t) % static_cast<int>(cfg.hours_per_day));
      w.enc_dow.push_back(((start + t) / static_cast<int>(cfg.hours_per_day)) % 7);
    }
    for (int t = 0; t < cfg.dec_len(); ++t) {
      int abs_t = start + static_cast<int>(cfg.L_in - cfg.L_token) + t;
      w.dec_hour.push_back(abs_t % static_cast<int>(cfg.hours_per_day));
      w.dec_dow.push_back((abs_t / static_cast<int>(cfg.hours_per_day)) % 7);
    }

    model::ParamVector pv = f.init_params(static_cast<uint64_t>(97 + s));
    model::BoundSample bs = f.prepare(w);

    Workspace ws;
    f.bind_params(ws, pv);
    f.bind_sample(ws, bs);
    f.bind_dropout_identity(ws);
    eval(f.graph(), ws, f.scalar_loss(), FiniteCheck::All);
    backward(f.graph(), ws, f.scalar_loss(), 1.0, FiniteCheck::Output);

    std::vector<double> grad(static_cast<size_t>(f.param_count()), 0.0);
    const auto& index = f.param_index();
    const auto& leaves = f.param_leaves();
    for (size_t p = 0; p < index.size(); ++p) {
      if (!ws.has_grad(leaves[p])) continue;
      const auto& gt = ws.grad(leaves[p]).data;
      std::copy(gt.begin(), gt.end(), grad.begin() + index[p].offset);
    }

    auto loss_at = [&](const std::vector<double>& flat) {
      Workspace w2;
      f.bind_params(w2, flat);
      f.bind_sample(w2, bs);
      f.bind_dropout_identity(w2);
      eval(f.graph(), w2, f.scalar_loss(), FiniteCheck::None);
      return w2.value(f.scalar_loss()).data[0];
    };

    for (int c = 0; c < n_coords; ++c) {
      size_t j = r.index(pv.flat.size());
      std::vector<double> flat = pv.flat;
      flat[j] += kStep;
      double f_hi = loss_at(flat);
      flat[j] -= 2.0 * kStep;
      double f_lo = loss_at(flat);
      worst = std::max(worst, rel_err(grad[j], (f_hi - f_lo) / (2.0 * kStep)));
    }
  }
  return worst;
}

}  // namespace simreweight::gradcheck
