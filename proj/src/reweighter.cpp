#include "simreweight/reweighter.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "simreweight/errors.hpp"
#include "simreweight/log.hpp"
#include "simreweight/nn.hpp"

namespace simreweight::bilevel {

using ad::FiniteCheck;
using ad::Workspace;

namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

void check_finite_vec(const std::vector<double>& v, const char* what) {
  for (double x : v)
    if (!std::isfinite(x)) throw NonFiniteGradient(std::string("non-finite ") + what);
}

}  // namespace

void ReweightConfig::validate() const {
  if (K < 1) throw ConfigError("reweight: K must be >= 1");
  if (eta <= 0 || eps <= 0 || eta_w <= 0 || eta_phi <= 0 || eta_mu <= 0)
    throw ConfigError("reweight: learning rates and eps must be positive");
  if (T1 < 0 || delta <= 0 || T_max <= 0 || T1 > T_max)
    throw ConfigError("reweight: need 0 <= T1 <= T_max and delta > 0");
  if (mu_init <= 0 || inactive_tol < 0 || h_every <= 0 || conv_tol <= 0)
    throw ConfigError("reweight: mu_init, h_every, conv_tol must be positive");
}

// ---------------------------------------------------------------------------
// Forecaster-backed oracle

struct ForecasterOracle::Impl {
  const model::Forecaster& f;
  Workspace loss_ws;
  Workspace hvp_ws;
  std::vector<double> phi;
  bool hvp_params_fresh = false;
  bool hvp_ready = false;

  explicit Impl(const model::Forecaster& fc) : f(fc) {}

  void bind_hvp_sample(const model::BoundSample& bs) {
    const auto& h = f.hvp();
    hvp_ws.bind(h.g, h.enc_hour, bs.enc_hour);
    hvp_ws.bind(h.g, h.enc_dow, bs.enc_dow);
    hvp_ws.bind(h.g, h.dec_hour, bs.dec_hour);
    hvp_ws.bind(h.g, h.dec_dow, bs.dec_dow);
    for (int t = 0; t < 3; ++t) {
      if (!f.config().task_active(t)) continue;
      hvp_ws.bind(h.g, h.enc_values[static_cast<size_t>(t)], bs.enc_values[static_cast<size_t>(t)]);
      hvp_ws.bind(h.g, h.dec_values[static_cast<size_t>(t)], bs.dec_values[static_cast<size_t>(t)]);
      hvp_ws.bind(h.g, h.targets[static_cast<size_t>(t)], bs.targets[static_cast<size_t>(t)]);
    }
  }

  void ensure_hvp_state() {
    const auto& h = f.hvp();
    if (!hvp_ready) {
      for (const auto& [leaf, shape] : h.dropout_leaves)
        hvp_ws.bind(h.g, leaf, ad::Tensor::full(shape, 1.0));
      hvp_ready = true;
    }
    if (!hvp_params_fresh) {
      const auto& index = f.param_index();
      for (size_t i = 0; i < index.size(); ++i) {
        ad::Tensor t(index[i].shape,
                     std::vector<double>(phi.begin() + index[i].offset,
                                         phi.begin() + index[i].offset + index[i].numel()));
        hvp_ws.bind(h.g, h.param_leaves[i], t);
      }
      hvp_params_fresh = true;
    }
  }
};

ForecasterOracle::ForecasterOracle(const model::Forecaster& f, const data::DatasetBundle& bundle)
    : impl_(std::make_unique<Impl>(f)) {
  if (bundle.sim.empty() || bundle.val.empty())
    throw ConfigError("reweight: bundle needs nonempty sim and val splits");
  train_.reserve(bundle.sim.size());
  for (const auto& s : bundle.sim) train_.push_back(f.prepare(s));
  val_.reserve(bundle.val.size());
  for (const auto& s : bundle.val) val_.push_back(f.prepare(s));
  f.bind_dropout_identity(impl_->loss_ws);
}

ForecasterOracle::~ForecasterOracle() = default;

int64_t ForecasterOracle::param_count() const { return impl_->f.param_count(); }

void ForecasterOracle::set_params(const std::vector<double>& phi) {
  impl_->phi = phi;
  impl_->f.bind_params(impl_->loss_ws, phi);
  impl_->hvp_params_fresh = false;
}

double ForecasterOracle::train_loss(int i) {
  const auto& f = impl_->f;
  f.bind_sample(impl_->loss_ws, train_[static_cast<size_t>(i)]);
  eval(f.graph(), impl_->loss_ws, f.scalar_loss(), FiniteCheck::Output);
  return impl_->loss_ws.value(f.scalar_loss()).data[0];
}

double ForecasterOracle::val_loss(int j) {
  const auto& f = impl_->f;
  f.bind_sample(impl_->loss_ws, val_[static_cast<size_t>(j)]);
  eval(f.graph(), impl_->loss_ws, f.scalar_loss(), FiniteCheck::Output);
  return impl_->loss_ws.value(f.scalar_loss()).data[0];
}

namespace {

void accumulate_param_grads(const model::Forecaster& f, const std::vector<ad::NodeRef>& leaves,
                            Workspace& ws, std::vector<double>& acc) {
  const auto& index = f.param_index();
  for (size_t p = 0; p < index.size(); ++p) {
    if (!ws.has_grad(leaves[p])) continue;
    const auto& gt = ws.grad(leaves[p]).data;
    double* dst = acc.data() + index[p].offset;
    for (size_t j = 0; j < gt.size(); ++j) dst[j] += gt[j];
  }
}

}  // namespace

void ForecasterOracle::add_train_grad(int i, double coef, std::vector<double>& acc) {
  const auto& f = impl_->f;
  f.bind_sample(impl_->loss_ws, train_[static_cast<size_t>(i)]);
  eval(f.graph(), impl_->loss_ws, f.scalar_loss(), FiniteCheck::Output);
  backward(f.graph(), impl_->loss_ws, f.scalar_loss(), coef, FiniteCheck::None);
  accumulate_param_grads(f, f.param_leaves(), impl_->loss_ws, acc);
}

void ForecasterOracle::add_val_grad(int j, double coef, std::vector<double>& acc) {
  const auto& f = impl_->f;
  f.bind_sample(impl_->loss_ws, val_[static_cast<size_t>(j)]);
  eval(f.graph(), impl_->loss_ws, f.scalar_loss(), FiniteCheck::Output);
  backward(f.graph(), impl_->loss_ws, f.scalar_loss(), coef, FiniteCheck::None);
  accumulate_param_grads(f, f.param_leaves(), impl_->loss_ws, acc);
}

void ForecasterOracle::set_hvp_direction(const std::vector<double>& v) {
  const auto& f = impl_->f;
  const auto& h = f.hvp();
  impl_->ensure_hvp_state();
  const auto& index = f.param_index();
  for (size_t i = 0; i < index.size(); ++i) {
    ad::Tensor t(index[i].shape,
                 std::vector<double>(v.begin() + index[i].offset,
                                     v.begin() + index[i].offset + index[i].numel()));
    impl_->hvp_ws.bind(h.g, h.lambda_leaves[i], t);
  }
}

double ForecasterOracle::add_train_hvp(int i, double coef, std::vector<double>& acc) {
  const auto& f = impl_->f;
  const auto& h = f.hvp();
  impl_->ensure_hvp_state();
  impl_->bind_hvp_sample(train_[static_cast<size_t>(i)]);
  eval(h.g, impl_->hvp_ws, h.dot, FiniteCheck::Output);
  double d = impl_->hvp_ws.value(h.dot).data[0];
  backward(h.g, impl_->hvp_ws, h.dot, coef, FiniteCheck::None);
  const auto& index = f.param_index();
  for (size_t p = 0; p < index.size(); ++p) {
    if (!impl_->hvp_ws.has_grad(h.param_leaves[p])) continue;
    const auto& gt = impl_->hvp_ws.grad(h.param_leaves[p]).data;
    double* dst = acc.data() + index[p].offset;
    for (size_t j = 0; j < gt.size(); ++j) dst[j] += gt[j];
  }
  return d;
}

// ---------------------------------------------------------------------------
// Bilevel pieces

double inner_loss_g(SampleLossOracle& o, const std::vector<double>& w,
                    const std::vector<double>& phi) {
  if (static_cast<int>(w.size()) != o.n_train())
    throw ConfigError("inner_loss_g: weight count must match |D_s|");
  o.set_params(phi);
  double acc = 0.0;
  for (int i = 0; i < o.n_train(); ++i) acc += sigmoid(w[static_cast<size_t>(i)]) * o.train_loss(i);
  return acc / static_cast<double>(o.n_train());
}

double outer_loss_G(SampleLossOracle& o, const std::vector<double>& phi) {
  o.set_params(phi);
  double acc = 0.0;
  for (int j = 0; j < o.n_val(); ++j) acc += o.val_loss(j);
  return acc / static_cast<double>(o.n_val());
}

double outer_grad_G(SampleLossOracle& o, const std::vector<double>& phi,
                    std::vector<double>& grad) {
  o.set_params(phi);
  grad.assign(static_cast<size_t>(o.param_count()), 0.0);
  double inv = 1.0 / static_cast<double>(o.n_val());
  double acc = 0.0;
  for (int j = 0; j < o.n_val(); ++j) {
    acc += o.val_loss(j);
    o.add_val_grad(j, inv, grad);
  }
  check_finite_vec(grad, "validation gradient");
  return acc * inv;
}

KStepTrace k_step_inner(SampleLossOracle& o, const std::vector<double>& w,
                        const std::vector<double>& phi0, const ReweightConfig& cfg) {
  KStepTrace trace;
  trace.phis.reserve(static_cast<size_t>(cfg.K) + 1);
  trace.phis.push_back(phi0);
  const double inv_n = 1.0 / static_cast<double>(o.n_train());
  std::vector<double> grad(phi0.size());
  for (int k = 0; k < cfg.K; ++k) {
    const auto& cur = trace.phis.back();
    o.set_params(cur);
    std::fill(grad.begin(), grad.end(), 0.0);
    for (int i = 0; i < o.n_train(); ++i)
      o.add_train_grad(i, sigmoid(w[static_cast<size_t>(i)]) * inv_n, grad);
    check_finite_vec(grad, "inner gradient");
    std::vector<double> next(cur.size());
    for (size_t j = 0; j < cur.size(); ++j) next[j] = cur[j] - cfg.eta * grad[j];
    trace.phis.push_back(std::move(next));
  }
  return trace;
}

double constraint_h(const KStepTrace& trace, const std::vector<double>& phi) {
  const auto& psi = trace.phis.back();
  double acc = 0.0;
  for (size_t j = 0; j < phi.size(); ++j) acc += std::fabs(phi[j] - psi[j]);
  return acc / static_cast<double>(phi.size());
}

void hypergrad_h(SampleLossOracle& o, const std::vector<double>& w, const KStepTrace& trace,
                 const std::vector<double>& phi, const ReweightConfig& cfg,
                 std::vector<double>& dh_dw, std::vector<double>& dh_dphi) {
  const int n = o.n_train();
  const size_t m = phi.size();
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_m = 1.0 / static_cast<double>(m);
  const auto& psi = trace.phis.back();

  // Subgradient of the normalized l1 residual; 0 at exact zeros.
  std::vector<double> sgn(m);
  for (size_t j = 0; j < m; ++j) {
    double d = phi[j] - psi[j];
    sgn[j] = d > 0.0 ? inv_m : (d < 0.0 ? -inv_m : 0.0);
  }

  // Reverse sweep over the unrolled iterates: lambda_k = dh/dphi_k.
  std::vector<double> lambda(m);
  for (size_t j = 0; j < m; ++j) lambda[j] = -sgn[j];
  dh_dw.assign(static_cast<size_t>(n), 0.0);
  std::vector<double> lambda_next(m);
  for (int k = cfg.K - 1; k >= 0; --k) {
    o.set_params(trace.phis[static_cast<size_t>(k)]);
    o.set_hvp_direction(lambda);
    lambda_next = lambda;
    for (int i = 0; i < n; ++i) {
      double sw = sigmoid(w[static_cast<size_t>(i)]);
      double di = o.add_train_hvp(i, -cfg.eta * sw * inv_n, lambda_next);
      dh_dw[static_cast<size_t>(i)] += -cfg.eta * inv_n * sw * (1.0 - sw) * di;
    }
    lambda.swap(lambda_next);
  }

  dh_dphi.assign(m, 0.0);
  for (size_t j = 0; j < m; ++j) dh_dphi[j] = sgn[j] + (cfg.warm_start ? lambda[j] : 0.0);
  check_finite_vec(dh_dw, "constraint gradient (w)");
  check_finite_vec(dh_dphi, "constraint gradient (phi)");
}

double plane_value(const CuttingPlane& p, const std::vector<double>& w,
                   const std::vector<double>& phi) {
  return dot(p.a, w) + dot(p.b, phi) + p.c;
}

double lagrangian_Lq(SampleLossOracle& o, const std::vector<double>& w,
                     const std::vector<double>& phi, const Polyhedron& poly) {
  double acc = outer_loss_G(o, phi);
  for (const auto& p : poly.planes) acc += p.mu * plane_value(p, w, phi);
  return acc;
}

double penalty_Lhat(SampleLossOracle& o, const std::vector<double>& w,
                    const std::vector<double>& phi, const Polyhedron& poly) {
  double acc = outer_loss_G(o, phi);
  for (const auto& p : poly.planes) {
    double v = std::max(0.0, plane_value(p, w, phi));
    acc += p.mu * v * v;
  }
  return acc;
}

void phase1_step(SampleLossOracle& o, State& s, const ReweightConfig& cfg) {
  std::vector<double> gradG;
  outer_grad_G(o, s.phi, gradG);
  std::vector<double> dw(s.w.size(), 0.0);
  std::vector<double> values(s.poly.planes.size());
  for (size_t l = 0; l < s.poly.planes.size(); ++l) {
    const auto& p = s.poly.planes[l];
    values[l] = plane_value(p, s.w, s.phi);
    for (size_t i = 0; i < dw.size(); ++i) dw[i] += p.mu * p.a[i];
    for (size_t j = 0; j < gradG.size(); ++j) gradG[j] += p.mu * p.b[j];
  }
  for (size_t i = 0; i < s.w.size(); ++i) s.w[i] -= cfg.eta_w * dw[i];
  for (size_t j = 0; j < s.phi.size(); ++j) s.phi[j] -= cfg.eta_phi * gradG[j];
  // Projected multiplier ascent; the gradient of L_q in mu_l is the plane value.
  for (size_t l = 0; l < s.poly.planes.size(); ++l)
    s.poly.planes[l].mu = std::max(0.0, s.poly.planes[l].mu + cfg.eta_mu * values[l]);
}

void phase2_step(SampleLossOracle& o, State& s, const ReweightConfig& cfg) {
  std::vector<double> gradG;
  outer_grad_G(o, s.phi, gradG);
  std::vector<double> dw(s.w.size(), 0.0);
  for (const auto& p : s.poly.planes) {
    double v = plane_value(p, s.w, s.phi);
    if (v <= 0.0) continue;
    double f = 2.0 * p.mu * v;
    for (size_t i = 0; i < dw.size(); ++i) dw[i] += f * p.a[i];
    for (size_t j = 0; j < gradG.size(); ++j) gradG[j] += f * p.b[j];
  }
  for (size_t i = 0; i < s.w.size(); ++i) s.w[i] -= cfg.eta_w * dw[i];
  for (size_t j = 0; j < s.phi.size(); ++j) s.phi[j] -= cfg.eta_phi * gradG[j];
}

int manage_polyhedron(SampleLossOracle& o, State& s, const ReweightConfig& cfg,
                      std::vector<PlaneEvent>* events) {
  // Drop inactive planes first.
  auto& planes = s.poly.planes;
  for (auto it = planes.begin(); it != planes.end();) {
    if (it->mu <= cfg.inactive_tol) {
      if (events) events->push_back({s.iter, it->id, false, 0.0});
      it = planes.erase(it);
    } else {
      ++it;
    }
  }

  const std::vector<double>& anchor = cfg.warm_start ? s.phi : s.anchor;
  KStepTrace trace = k_step_inner(o, s.w, anchor, cfg);
  double h = constraint_h(trace, s.phi);
  if (!(h > cfg.eps)) return -1;

  CuttingPlane p;
  hypergrad_h(o, s.w, trace, s.phi, cfg, p.a, p.b);
  double offset = cfg.plane_offset_paper ? h : h - cfg.eps;
  p.c = offset - dot(p.a, s.w) - dot(p.b, s.phi);
  p.mu = cfg.mu_init;
  p.id = s.poly.next_id++;
  double residual = plane_value(p, s.w, s.phi) - offset;
  if (events) events->push_back({s.iter, p.id, true, residual});
  planes.push_back(std::move(p));
  return planes.back().id;
}

RunResult run(SampleLossOracle& o, std::vector<double> w0, std::vector<double> phi0,
              const ReweightConfig& cfg) {
  cfg.validate();
  if (static_cast<int>(w0.size()) != o.n_train())
    throw ConfigError("run: |w| must equal |D_s|");
  State s;
  s.w = std::move(w0);
  s.phi = std::move(phi0);
  s.anchor = s.phi;

  RunResult out;
  double last_h = 0.0;
  bool have_h = false;
  std::vector<double> prev_w, prev_phi;
  for (int t = 0; t < cfg.T_max; ++t) {
    s.iter = t;
    int phase = t < cfg.T1 ? 1 : 2;

    double G = outer_loss_G(o, s.phi);
    double g = inner_loss_g(o, s.w, s.phi);
    if (!std::isfinite(G) || !std::isfinite(g))
      throw DivergedError("reweight: non-finite objective");
    if (t % cfg.h_every == 0 || !have_h) {
      const std::vector<double>& anchor = cfg.warm_start ? s.phi : s.anchor;
      last_h = constraint_h(k_step_inner(o, s.w, anchor, cfg), s.phi);
      have_h = true;
    }
    double max_mu = 0.0;
    for (const auto& p : s.poly.planes) max_mu = std::max(max_mu, p.mu);
    out.history.push_back({t, phase, G, g, last_h, static_cast<int>(s.poly.planes.size()), max_mu});

    prev_w = s.w;
    prev_phi = s.phi;
    if (phase == 1) {
      phase1_step(o, s, cfg);
      if ((t + 1) % cfg.delta == 0) manage_polyhedron(o, s, cfg, &out.events);
    } else {
      phase2_step(o, s, cfg);
    }

    double dphi = 0.0, dw = 0.0;
    for (size_t j = 0; j < s.phi.size(); ++j) dphi = std::max(dphi, std::fabs(s.phi[j] - prev_phi[j]));
    for (size_t i = 0; i < s.w.size(); ++i) dw = std::max(dw, std::fabs(s.w[i] - prev_w[i]));
    if (!std::isfinite(dphi) || !std::isfinite(dw))
      throw DivergedError("reweight: non-finite iterate");
    out.iters = t + 1;
    if (phase == 2 && dphi < cfg.conv_tol && dw < cfg.conv_tol) {
      out.converged = true;
      break;
    }
  }

  out.final_G = outer_loss_G(o, s.phi);
  out.w = std::move(s.w);
  out.phi = std::move(s.phi);
  return out;
}

std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "iter,phase,G,g,h,n_planes,max_mu\n";
  char buf[200];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%d,%.17g,%.17g,%.17g,%d,%.17g\n", r.iter, r.phase, r.G, r.g,
                  r.h, r.n_planes, r.max_mu);
    out += buf;
  }
  return out;
}

std::string weights_csv(const std::vector<int>& sample_ids, const std::vector<double>& w) {
  std::string out = "sample_id,raw_w,sigmoid_w\n";
  char buf[120];
  for (size_t i = 0; i < w.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g\n", sample_ids[i], w[i], sigmoid(w[i]));
    out += buf;
  }
  return out;
}

}  // namespace simreweight::bilevel
