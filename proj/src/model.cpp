#include "simreweight/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "simreweight/errors.hpp"
#include "simreweight/nn.hpp"

namespace simreweight::model {

using ad::Graph;
using ad::NodeRef;
using ad::Tensor;
using ad::Workspace;
namespace nn = ad::nn;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little, "checkpoint payload assumes little-endian");

void ModelConfig::validate() const {
  if (d_model <= 0 || n_heads <= 0 || n_enc_layers <= 0 || n_dec_layers <= 0 || cnn_channels <= 0 ||
      cnn_kernel <= 0 || mlp_hidden <= 0 || L_in <= 0 || L_token <= 0 || L_out <= 0 ||
      patch_rows <= 0 || patch_cols <= 0 || hours_per_day <= 0)
    throw ConfigError("model: all dimensions must be positive");
  if (d_model % n_heads != 0) throw ConfigError("model: d_model must be divisible by n_heads");
  if (cnn_channels % n_heads != 0)
    throw ConfigError("model: cnn_channels must be divisible by n_heads");
  if (L_token > L_in) throw ConfigError("model: L_token must not exceed L_in");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) throw ConfigError("model: dropout_rate in [0,1)");
  if (cnn_kernel % 2 == 0) throw ConfigError("model: cnn_kernel must be odd");
  if (single_task < -1 || single_task > 2) throw ConfigError("model: single_task out of range");
  if (probsparse_topu < 0) throw ConfigError("model: probsparse_topu must be >= 0");
}

const ParamInfo* ParamVector::find(const std::string& name) const {
  for (const auto& p : index)
    if (p.name == name) return &p;
  return nullptr;
}

void ParamVector::validate() const {
  int64_t offset = 0;
  for (const auto& p : index) {
    if (p.offset != offset) throw ConfigError("param index: offsets must partition the flat vector");
    offset += p.numel();
  }
  if (offset != static_cast<int64_t>(flat.size()))
    throw ConfigError("param index: total size mismatch");
}

// ---------------------------------------------------------------------------

struct Forecaster::Build {
  std::array<NodeRef, 3> enc_values{}, dec_values{}, targets{};
  NodeRef enc_hour{}, enc_dow{}, dec_hour{}, dec_dow{};
  std::vector<std::pair<NodeRef, std::vector<int64_t>>> dropout;
  std::array<NodeRef, 3> pred{}, task_loss{}, h_enc{}, h_s{}, h_tilde{};
  NodeRef scalar_loss{}, tw{}, weighted_total{}, last_pred{};
};

namespace {

struct ParamFactory {
  Graph& g;
  std::vector<NodeRef>& out;
  std::vector<ParamInfo>* index;
  std::vector<double>* fans;
  std::vector<int>* kinds;
  int64_t offset = 0;

  NodeRef make(const std::string& name, std::vector<int64_t> shape, int kind, double fan) {
    NodeRef r = g.leaf(shape);
    out.push_back(r);
    if (index) {
      index->push_back({name, offset, shape});
      fans->push_back(fan);
      kinds->push_back(kind);
    }
    offset += Tensor::count(shape);
    return r;
  }
  NodeRef lin(const std::string& name, int64_t in, int64_t out_dim) {
    return make(name, {in, out_dim}, 0, static_cast<double>(in));
  }
  NodeRef bias(const std::string& name, int64_t out_dim, int64_t fan) {
    return make(name, {1, out_dim}, 0, static_cast<double>(fan));
  }
  NodeRef embed(const std::string& name, int64_t rows, int64_t cols) {
    return make(name, {rows, cols}, 1, 0.0);
  }
  NodeRef ln_gamma(const std::string& name, int64_t d) { return make(name, {1, d}, 2, 0.0); }
  NodeRef ln_beta(const std::string& name, int64_t d) { return make(name, {1, d}, 3, 0.0); }

  nn::AttentionParams attn(const std::string& prefix, int64_t d) {
    nn::AttentionParams p;
    p.wq = lin(prefix + ".wq", d, d);
    p.bq = bias(prefix + ".bq", d, d);
    p.wk = lin(prefix + ".wk", d, d);
    p.bk = bias(prefix + ".bk", d, d);
    p.wv = lin(prefix + ".wv", d, d);
    p.bv = bias(prefix + ".bv", d, d);
    p.wo = lin(prefix + ".wo", d, d);
    p.bo = bias(prefix + ".bo", d, d);
    return p;
  }
};

}  // namespace

void Forecaster::construct(Graph& g, std::vector<NodeRef>& params_out, Build& b,
                           bool record_index) const {
  const ModelConfig& c = cfg_;
  const int64_t d = c.d_model;
  const int64_t P = c.patch_cells();
  const int64_t L_dec = c.dec_len();

  ParamFactory pf{g,
                  params_out,
                  record_index ? const_cast<std::vector<ParamInfo>*>(&index_) : nullptr,
                  record_index ? const_cast<std::vector<double>*>(&init_fan_) : nullptr,
                  record_index ? const_cast<std::vector<int>*>(&init_kind_) : nullptr};

  auto dropmask = [&](std::vector<int64_t> shape) {
    NodeRef m = g.leaf(shape);
    b.dropout.emplace_back(m, shape);
    return m;
  };
  auto dropped = [&](NodeRef x) { return g.mul(x, dropmask(g.node(x).shape)); };

  // Shared input leaves: temporal markers as one-hot matrices.
  b.enc_hour = g.leaf({c.L_in, c.hours_per_day});
  b.enc_dow = g.leaf({c.L_in, 7});
  b.dec_hour = g.leaf({L_dec, c.hours_per_day});
  b.dec_dow = g.leaf({L_dec, 7});
  for (int t = 0; t < 3; ++t) {
    if (!c.task_active(t)) continue;
    b.enc_values[static_cast<size_t>(t)] = g.leaf({c.L_in, P});
    b.dec_values[static_cast<size_t>(t)] = g.leaf({L_dec, P});
  }

  NodeRef pos_enc = g.constant(nn::sinusoidal_positions(c.L_in, d));
  NodeRef pos_dec = g.constant(nn::sinusoidal_positions(L_dec, d));
  NodeRef causal = g.constant(nn::causal_mask(L_dec));

  auto encoder_stack = [&](const std::string& prefix, NodeRef x) {
    for (int64_t l = 0; l < c.n_enc_layers; ++l) {
      std::string lp = prefix + "." + std::to_string(l);
      nn::AttentionParams ap = pf.attn(lp + ".self", d);
      NodeRef a = nn::multihead_attention(g, x, x, ap, c.n_heads);
      x = nn::layer_norm_rows(g, g.add(x, dropped(a)), pf.ln_gamma(lp + ".ln1.g", d),
                              pf.ln_beta(lp + ".ln1.b", d));
      NodeRef m = nn::linear(g, g.relu(nn::linear(g, x, pf.lin(lp + ".mlp.w1", d, c.mlp_hidden),
                                                  pf.bias(lp + ".mlp.b1", c.mlp_hidden, d))),
                             pf.lin(lp + ".mlp.w2", c.mlp_hidden, d), pf.bias(lp + ".mlp.b2", d, c.mlp_hidden));
      x = nn::layer_norm_rows(g, g.add(x, dropped(m)), pf.ln_gamma(lp + ".ln2.g", d),
                              pf.ln_beta(lp + ".ln2.b", d));
    }
    return x;
  };

  // Per-task temporal and spatial representations.
  for (int t = 0; t < 3; ++t) {
    if (!c.task_active(t)) continue;
    std::string tn = sim::kTaskNames[static_cast<size_t>(t)];
    NodeRef vals = b.enc_values[static_cast<size_t>(t)];

    NodeRef r = nn::linear(g, vals, pf.lin(tn + ".enc_embed.value", P, d));
    r = g.add(r, g.matmul(b.enc_hour, pf.embed(tn + ".enc_embed.hour", c.hours_per_day, d)));
    r = g.add(r, g.matmul(b.enc_dow, pf.embed(tn + ".enc_embed.dow", 7, d)));
    r = g.add(r, pos_enc);
    r = dropped(r);
    b.h_enc[static_cast<size_t>(t)] = encoder_stack(tn + ".enc", r);

    if (c.use_spatial) {
      // Grid view: cells as rows, the time window as channels.
      NodeRef grid = g.transpose(vals);
      NodeRef conv = nn::conv2d_same(
          g, grid, c.patch_rows, c.patch_cols, c.cnn_kernel, c.cnn_kernel,
          pf.lin(tn + ".spatial.conv.k", c.cnn_kernel * c.cnn_kernel * c.L_in, c.cnn_channels),
          pf.bias(tn + ".spatial.conv.b", c.cnn_channels, c.cnn_kernel * c.cnn_kernel * c.L_in));
      conv = g.relu(conv);
      nn::AttentionParams sp = pf.attn(tn + ".spatial.attn", c.cnn_channels);
      NodeRef att = nn::multihead_attention(g, conv, conv, sp, c.n_heads);
      NodeRef pooled = nn::mean_rows(g, att);
      NodeRef hs = nn::linear(g, pooled, pf.lin(tn + ".spatial.out.w", c.cnn_channels, d),
                              pf.bias(tn + ".spatial.out.b", d, c.cnn_channels));
      b.h_s[static_cast<size_t>(t)] = dropped(hs);
    }
  }

  // Cross-task interaction over task tokens, or the raw token stack when
  // the interaction module is ablated.
  std::array<NodeRef, 3> memory{};
  if (c.use_interaction && c.single_task < 0) {
    std::array<NodeRef, 3> pools{};
    for (int t = 0; t < 3; ++t)
      pools[static_cast<size_t>(t)] = nn::mean_rows(g, b.h_enc[static_cast<size_t>(t)]);
    NodeRef hs_hat{}, ht_hat{};
    if (c.use_spatial) {
      NodeRef hs_cat = nn::concat_rows(g, {b.h_s[0], b.h_s[1], b.h_s[2]});
      nn::AttentionParams ap = pf.attn("inter.spatial", d);
      NodeRef a = nn::multihead_attention(g, hs_cat, hs_cat, ap, c.n_heads);
      hs_hat = nn::layer_norm_rows(g, g.add(hs_cat, a), pf.ln_gamma("inter.spatial.ln.g", d),
                                   pf.ln_beta("inter.spatial.ln.b", d));
    }
    NodeRef ht_cat = nn::concat_rows(g, {pools[0], pools[1], pools[2]});
    nn::AttentionParams ap = pf.attn("inter.temporal", d);
    NodeRef a = nn::multihead_attention(g, ht_cat, ht_cat, ap, c.n_heads);
    ht_hat = nn::layer_norm_rows(g, g.add(ht_cat, a), pf.ln_gamma("inter.temporal.ln.g", d),
                                 pf.ln_beta("inter.temporal.ln.b", d));
    const int64_t z_dim = c.use_spatial ? 2 * d : d;
    for (int t = 0; t < 3; ++t) {
      std::string tn = sim::kTaskNames[static_cast<size_t>(t)];
      NodeRef zt = c.use_spatial
                       ? nn::concat_cols(g, {nn::slice_rows(g, hs_hat, t, t + 1),
                                             nn::slice_rows(g, ht_hat, t, t + 1)})
                       : nn::slice_rows(g, ht_hat, t, t + 1);
      NodeRef h1 = g.relu(nn::linear(g, zt, pf.lin("inter." + tn + ".mlp.w1", z_dim, c.mlp_hidden),
                                     pf.bias("inter." + tn + ".mlp.b1", c.mlp_hidden, z_dim)));
      NodeRef ht = nn::linear(g, h1, pf.lin("inter." + tn + ".mlp.w2", c.mlp_hidden, d),
                              pf.bias("inter." + tn + ".mlp.b2", d, c.mlp_hidden));
      b.h_tilde[static_cast<size_t>(t)] = dropped(ht);
      memory[static_cast<size_t>(t)] = b.h_tilde[static_cast<size_t>(t)];
    }
  } else {
    for (int t = 0; t < 3; ++t) {
      if (!c.task_active(t)) continue;
      NodeRef pool = nn::mean_rows(g, b.h_enc[static_cast<size_t>(t)]);
      memory[static_cast<size_t>(t)] =
          c.use_spatial ? nn::concat_rows(g, {b.h_s[static_cast<size_t>(t)], pool}) : pool;
    }
  }

  // Task-specific decoders.
  for (int t = 0; t < 3; ++t) {
    if (!c.task_active(t)) continue;
    std::string tn = sim::kTaskNames[static_cast<size_t>(t)];
    NodeRef x = nn::linear(g, b.dec_values[static_cast<size_t>(t)],
                           pf.lin(tn + ".dec_embed.value", P, d));
    x = g.add(x, g.matmul(b.dec_hour, pf.embed(tn + ".dec_embed.hour", c.hours_per_day, d)));
    x = g.add(x, g.matmul(b.dec_dow, pf.embed(tn + ".dec_embed.dow", 7, d)));
    x = g.add(x, pos_dec);
    x = dropped(x);
    for (int64_t l = 0; l < c.n_dec_layers; ++l) {
      std::string lp = tn + ".dec." + std::to_string(l);
      nn::AttentionParams sp = pf.attn(lp + ".self", d);
      NodeRef a = nn::multihead_attention(g, x, x, sp, c.n_heads, causal);
      x = nn::layer_norm_rows(g, g.add(x, dropped(a)), pf.ln_gamma(lp + ".ln1.g", d),
                              pf.ln_beta(lp + ".ln1.b", d));
      nn::AttentionParams cp = pf.attn(lp + ".cross", d);
      NodeRef ca = nn::multihead_attention(g, x, memory[static_cast<size_t>(t)], cp, c.n_heads,
                                           NodeRef{}, c.probsparse_topu);
      x = nn::layer_norm_rows(g, g.add(x, dropped(ca)), pf.ln_gamma(lp + ".ln2.g", d),
                              pf.ln_beta(lp + ".ln2.b", d));
      NodeRef m = nn::linear(g, g.relu(nn::linear(g, x, pf.lin(lp + ".mlp.w1", d, c.mlp_hidden),
                                                  pf.bias(lp + ".mlp.b1", c.mlp_hidden, d))),
                             pf.lin(lp + ".mlp.w2", c.mlp_hidden, d),
                             pf.bias(lp + ".mlp.b2", d, c.mlp_hidden));
      x = nn::layer_norm_rows(g, g.add(x, dropped(m)), pf.ln_gamma(lp + ".ln3.g", d),
                              pf.ln_beta(lp + ".ln3.b", d));
    }
    NodeRef y_full = nn::linear(g, x, pf.lin(tn + ".head.w", d, 1), pf.bias(tn + ".head.b", 1, d));
    b.pred[static_cast<size_t>(t)] = nn::slice_rows(g, y_full, c.L_token, L_dec);
    b.last_pred = b.pred[static_cast<size_t>(t)];
  }

  // Targets and losses come after every prediction node so predictions can
  // be evaluated without binding targets.
  int n_active = 0;
  NodeRef loss_sum{};
  for (int t = 0; t < 3; ++t) {
    if (!c.task_active(t)) continue;
    b.targets[static_cast<size_t>(t)] = g.leaf({c.L_out, 1});
    NodeRef l = nn::mse(g, b.pred[static_cast<size_t>(t)], b.targets[static_cast<size_t>(t)]);
    b.task_loss[static_cast<size_t>(t)] = l;
    loss_sum = loss_sum.valid() ? g.add(loss_sum, l) : l;
    ++n_active;
  }
  b.scalar_loss = g.scale(loss_sum, 1.0 / static_cast<double>(n_active));

  b.tw = g.leaf({1, 3});
  if (c.single_task >= 0) {
    b.weighted_total = b.task_loss[static_cast<size_t>(c.single_task)];
  } else {
    NodeRef total{};
    for (int t = 0; t < 3; ++t) {
      NodeRef wt = nn::reshape(g, nn::slice_cols(g, b.tw, t, t + 1), {1});
      NodeRef term = g.mul(wt, b.task_loss[static_cast<size_t>(t)]);
      total = total.valid() ? g.add(total, term) : term;
    }
    b.weighted_total = total;
  }
}

Forecaster::Forecaster(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  Build b;
  construct(graph_, param_leaves_, b, true);
  int64_t offset = 0;
  for (const auto& p : index_) offset += p.numel();
  total_params_ = offset;
  enc_values_leaf_ = b.enc_values;
  dec_values_leaf_ = b.dec_values;
  target_leaf_ = b.targets;
  enc_hour_leaf_ = b.enc_hour;
  enc_dow_leaf_ = b.enc_dow;
  dec_hour_leaf_ = b.dec_hour;
  dec_dow_leaf_ = b.dec_dow;
  dropout_leaves_ = b.dropout;
  pred_ = b.pred;
  task_loss_ = b.task_loss;
  h_enc_ = b.h_enc;
  h_s_ = b.h_s;
  h_tilde_ = b.h_tilde;
  scalar_loss_ = b.scalar_loss;
  tw_leaf_ = b.tw;
  weighted_total_ = b.weighted_total;
  last_pred_ = b.last_pred;
}

Forecaster::~Forecaster() { delete hvp_; }

const Forecaster::HvpGraph& Forecaster::hvp() const {
  if (!hvp_) {
    auto* h = new HvpGraph();
    Build b;
    std::vector<NodeRef> params;
    construct(h->g, params, b, false);
    h->param_leaves = params;
    h->enc_values = b.enc_values;
    h->dec_values = b.dec_values;
    h->targets = b.targets;
    h->enc_hour = b.enc_hour;
    h->enc_dow = b.enc_dow;
    h->dec_hour = b.dec_hour;
    h->dec_dow = b.dec_dow;
    h->dropout_leaves = b.dropout;
    h->loss = b.scalar_loss;
    auto grads = ad::backward_graph(h->g, b.scalar_loss, params);
    NodeRef dot{};
    h->lambda_leaves.reserve(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      if (!grads[i].valid()) throw Error("hvp: parameter unreachable from the loss");
      NodeRef lam = h->g.leaf(h->g.node(params[i]).shape);
      h->lambda_leaves.push_back(lam);
      NodeRef term = nn::dot_all(h->g, grads[i], lam);
      dot = dot.valid() ? h->g.add(dot, term) : term;
    }
    h->dot = dot;
    hvp_ = h;
  }
  return *hvp_;
}

ParamVector Forecaster::init_params(uint64_t seed) const {
  ParamVector pv;
  pv.index = index_;
  pv.flat.assign(static_cast<size_t>(total_params_), 0.0);
  rng::Sequence r(seed);
  for (size_t i = 0; i < index_.size(); ++i) {
    const auto& p = index_[i];
    double* dst = pv.flat.data() + p.offset;
    int64_t n = p.numel();
    switch (init_kind_[i]) {
      case 0: {
        double bound = 1.0 / std::sqrt(init_fan_[i]);
        for (int64_t j = 0; j < n; ++j) dst[j] = r.uniform(-bound, bound);
        break;
      }
      case 1:
        for (int64_t j = 0; j < n; ++j) dst[j] = r.normal(0.0, 0.02);
        break;
      case 2:
        for (int64_t j = 0; j < n; ++j) dst[j] = 1.0;
        break;
      default:
        break;  // already zero
    }
  }
  pv.validate();
  return pv;
}

void Forecaster::bind_params(Workspace& ws, const ParamVector& pv) const {
  bind_params(ws, pv.flat);
}

void Forecaster::bind_params(Workspace& ws, const std::vector<double>& flat) const {
  if (static_cast<int64_t>(flat.size()) != total_params_)
    throw ShapeMismatch("bind_params: flat size mismatch");
  for (size_t i = 0; i < index_.size(); ++i) {
    const auto& p = index_[i];
    Tensor t(p.shape, std::vector<double>(flat.begin() + p.offset,
                                          flat.begin() + p.offset + p.numel()));
    ws.bind(graph_, param_leaves_[i], t);
  }
}

BoundSample Forecaster::prepare(const data::WindowSample& s) const {
  const ModelConfig& c = cfg_;
  const int64_t P = c.patch_cells();
  const int64_t L_dec = c.dec_len();
  if (static_cast<int64_t>(s.enc_hour.size()) != c.L_in)
    throw ShapeMismatch("prepare: sample window length does not match model L_in");
  BoundSample bs;
  auto onehot = [](const std::vector<int>& vals, int64_t width) {
    Tensor t = Tensor::zeros({static_cast<int64_t>(vals.size()), width});
    for (size_t i = 0; i < vals.size(); ++i) {
      if (vals[i] < 0 || vals[i] >= width)
        throw ConfigError("prepare: temporal marker outside embedding table");
      t.data[i * static_cast<size_t>(width) + static_cast<size_t>(vals[i])] = 1.0;
    }
    return t;
  };
  bs.enc_hour = onehot(s.enc_hour, c.hours_per_day);
  bs.enc_dow = onehot(s.enc_dow, 7);
  bs.dec_hour = onehot(s.dec_hour, c.hours_per_day);
  bs.dec_dow = onehot(s.dec_dow, 7);
  for (int t = 0; t < 3; ++t) {
    if (!c.task_active(t)) continue;
    const auto& tw = s.tasks[static_cast<size_t>(t)];
    if (static_cast<int64_t>(tw.input.size()) != c.L_in * P)
      throw ShapeMismatch("prepare: input window size mismatch");
    bs.enc_values[static_cast<size_t>(t)] = Tensor({c.L_in, P}, tw.input);
    Tensor dec = Tensor::zeros({L_dec, P});
    std::copy(tw.token.begin(), tw.token.end(), dec.data.begin());
    bs.dec_values[static_cast<size_t>(t)] = std::move(dec);
    bs.targets[static_cast<size_t>(t)] = Tensor({c.L_out, 1}, tw.target);
  }
  return bs;
}

void Forecaster::bind_inputs_only(Workspace& ws, const BoundSample& bs) const {
  ws.bind(graph_, enc_hour_leaf_, bs.enc_hour);
  ws.bind(graph_, enc_dow_leaf_, bs.enc_dow);
  ws.bind(graph_, dec_hour_leaf_, bs.dec_hour);
  ws.bind(graph_, dec_dow_leaf_, bs.dec_dow);
  for (int t = 0; t < 3; ++t) {
    if (!cfg_.task_active(t)) continue;
    ws.bind(graph_, enc_values_leaf_[static_cast<size_t>(t)], bs.enc_values[static_cast<size_t>(t)]);
    ws.bind(graph_, dec_values_leaf_[static_cast<size_t>(t)], bs.dec_values[static_cast<size_t>(t)]);
  }
}

void Forecaster::bind_sample(Workspace& ws, const BoundSample& bs) const {
  bind_inputs_only(ws, bs);
  for (int t = 0; t < 3; ++t) {
    if (!cfg_.task_active(t)) continue;
    ws.bind(graph_, target_leaf_[static_cast<size_t>(t)], bs.targets[static_cast<size_t>(t)]);
  }
}

void Forecaster::bind_dropout_identity(Workspace& ws) const {
  for (const auto& [leaf, shape] : dropout_leaves_) ws.bind(graph_, leaf, Tensor::full(shape, 1.0));
}

void Forecaster::bind_dropout_random(Workspace& ws, rng::Sequence& rng) const {
  const double p = cfg_.dropout_rate;
  if (p <= 0.0) {
    bind_dropout_identity(ws);
    return;
  }
  const double keep = 1.0 - p;
  for (const auto& [leaf, shape] : dropout_leaves_) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) v = rng.uniform() < keep ? 1.0 / keep : 0.0;
    ws.bind(graph_, leaf, t);
  }
}

void Forecaster::bind_task_weights(Workspace& ws, const std::array<double, 3>& tw) const {
  ws.bind(graph_, tw_leaf_, Tensor::row({tw[0], tw[1], tw[2]}));
}

std::array<double, 3> Forecaster::task_losses(Workspace& ws) const {
  std::array<double, 3> out{0.0, 0.0, 0.0};
  for (int t = 0; t < 3; ++t)
    if (cfg_.task_active(t)) out[static_cast<size_t>(t)] = ws.value(task_loss(t)).data[0];
  return out;
}

std::array<Forecaster::TaskState, 3> Forecaster::forward_states(
    const ParamVector& pv, const data::WindowSample& s) const {
  Workspace ws;
  bind_params(ws, pv);
  bind_sample(ws, prepare(s));
  bind_dropout_identity(ws);
  eval(graph_, ws, scalar_loss_, ad::FiniteCheck::Output);
  std::array<TaskState, 3> out;
  for (int t = 0; t < 3; ++t) {
    if (!cfg_.task_active(t)) continue;
    TaskState& st = out[static_cast<size_t>(t)];
    st.h_enc = ws.value(h_enc_[static_cast<size_t>(t)]);
    if (cfg_.use_spatial) st.h_s = ws.value(h_s_[static_cast<size_t>(t)]);
    if (h_tilde_[static_cast<size_t>(t)].valid())
      st.h_tilde = ws.value(h_tilde_[static_cast<size_t>(t)]);
    st.y = ws.value(pred_[static_cast<size_t>(t)]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint I/O

static json config_json(const ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"n_heads", c.n_heads},
              {"n_enc_layers", c.n_enc_layers},
              {"n_dec_layers", c.n_dec_layers},
              {"cnn_channels", c.cnn_channels},
              {"cnn_kernel", c.cnn_kernel},
              {"mlp_hidden", c.mlp_hidden},
              {"dropout_rate", c.dropout_rate},
              {"L_in", c.L_in},
              {"L_token", c.L_token},
              {"L_out", c.L_out},
              {"patch_rows", c.patch_rows},
              {"patch_cols", c.patch_cols},
              {"hours_per_day", c.hours_per_day},
              {"probsparse_topu", c.probsparse_topu},
              {"use_interaction", c.use_interaction},
              {"use_spatial", c.use_spatial},
              {"single_task", c.single_task}};
}

static ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int64_t>();
  c.n_heads = j.at("n_heads").get<int64_t>();
  c.n_enc_layers = j.at("n_enc_layers").get<int64_t>();
  c.n_dec_layers = j.at("n_dec_layers").get<int64_t>();
  c.cnn_channels = j.at("cnn_channels").get<int64_t>();
  c.cnn_kernel = j.at("cnn_kernel").get<int64_t>();
  c.mlp_hidden = j.at("mlp_hidden").get<int64_t>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.L_in = j.at("L_in").get<int64_t>();
  c.L_token = j.at("L_token").get<int64_t>();
  c.L_out = j.at("L_out").get<int64_t>();
  c.patch_rows = j.at("patch_rows").get<int64_t>();
  c.patch_cols = j.at("patch_cols").get<int64_t>();
  c.hours_per_day = j.at("hours_per_day").get<int64_t>();
  c.probsparse_topu = j.at("probsparse_topu").get<int64_t>();
  c.use_interaction = j.at("use_interaction").get<bool>();
  c.use_spatial = j.at("use_spatial").get<bool>();
  c.single_task = j.at("single_task").get<int>();
  return c;
}

std::string model_config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(); }

ModelConfig model_config_from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("model config: unparseable JSON");
  try {
    return config_from(j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
}

static constexpr char kCkptMagic[] = "SRWCKPT1\n";

void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamVector& pv) {
  pv.validate();
  json h;
  h["config"] = config_json(cfg);
  h["count"] = pv.flat.size();
  json idx = json::array();
  for (const auto& p : pv.index) idx.push_back({{"name", p.name}, {"offset", p.offset}, {"shape", p.shape}});
  h["index"] = idx;
  std::string header = h.dump();

  std::filesystem::path tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(kCkptMagic, static_cast<std::streamsize>(sizeof(kCkptMagic) - 1));
    uint64_t len = header.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(header.data(), static_cast<std::streamsize>(header.size()));
    f.write(reinterpret_cast<const char*>(pv.flat.data()),
            static_cast<std::streamsize>(pv.flat.size() * sizeof(double)));
    if (!f) throw IoError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint: " + path);
  char magic[sizeof(kCkptMagic) - 1];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
    throw IoError("bad checkpoint magic in " + path);
  uint64_t len = 0;
  f.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!f || len > (1u << 26)) throw IoError("bad checkpoint header in " + path);
  std::string header(len, '\0');
  f.read(header.data(), static_cast<std::streamsize>(len));
  json h = json::parse(header, nullptr, false);
  if (h.is_discarded()) throw IoError("unparseable checkpoint header in " + path);

  Checkpoint ck;
  try {
    ck.config = config_from(h.at("config"));
    size_t count = h.at("count").get<size_t>();
    for (const auto& e : h.at("index")) {
      ParamInfo p;
      p.name = e.at("name").get<std::string>();
      p.offset = e.at("offset").get<int64_t>();
      p.shape = e.at("shape").get<std::vector<int64_t>>();
      ck.params.index.push_back(std::move(p));
    }
    ck.params.flat.resize(count);
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint header field error: ") + e.what());
  }
  f.read(reinterpret_cast<char*>(ck.params.flat.data()),
         static_cast<std::streamsize>(ck.params.flat.size() * sizeof(double)));
  if (!f) throw IoError("truncated checkpoint payload in " + path);
  ck.params.validate();
  return ck;
}

}  // namespace simreweight::model
