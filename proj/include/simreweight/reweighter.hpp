#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "simreweight/dataset.hpp"
#include "simreweight/model.hpp"

namespace simreweight::bilevel {

// What the bilevel optimizer needs from a model: per-sample scalar losses on
// the weighted (train) and validation sets, their parameter gradients, and
// Hessian-vector products for differentiating through the unrolled inner
// loop. Implementations keep their own evaluation state; calls are
// single-threaded per oracle.
class SampleLossOracle {
 public:
  virtual ~SampleLossOracle() = default;
  virtual int64_t param_count() const = 0;
  virtual int n_train() const = 0;
  virtual int n_val() const = 0;
  virtual void set_params(const std::vector<double>& phi) = 0;
  virtual double train_loss(int i) = 0;
  virtual double val_loss(int j) = 0;
  // acc += coef * grad_phi(loss_i)
  virtual void add_train_grad(int i, double coef, std::vector<double>& acc) = 0;
  virtual void add_val_grad(int j, double coef, std::vector<double>& acc) = 0;
  // Direction for subsequent Hessian-vector products.
  virtual void set_hvp_direction(const std::vector<double>& v) = 0;
  // acc += coef * H_i(phi) * v; returns <grad_i(phi), v>.
  virtual double add_train_hvp(int i, double coef, std::vector<double>& acc) = 0;
};

// Oracle over the forecaster: D_s = bundle.sim, D_v = bundle.val, per-sample
// loss = mean task MSE.
class ForecasterOracle : public SampleLossOracle {
 public:
  ForecasterOracle(const model::Forecaster& f, const data::DatasetBundle& bundle);
  ~ForecasterOracle() override;
  int64_t param_count() const override;
  int n_train() const override { return static_cast<int>(train_.size()); }
  int n_val() const override { return static_cast<int>(val_.size()); }
  void set_params(const std::vector<double>& phi) override;
  double train_loss(int i) override;
  double val_loss(int j) override;
  void add_train_grad(int i, double coef, std::vector<double>& acc) override;
  void add_val_grad(int j, double coef, std::vector<double>& acc) override;
  void set_hvp_direction(const std::vector<double>& v) override;
  double add_train_hvp(int i, double coef, std::vector<double>& acc) override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  std::vector<model::BoundSample> train_, val_;
};

struct ReweightConfig {
  int K = 3;            // inner gradient steps
  double eta = 0.05;    // inner learning rate
  double eps = 0.01;    // constraint tolerance (per-parameter normalized)
  double eta_w = 0.05;
  double eta_phi = 0.01;
  double eta_mu = 0.1;
  int T1 = 300;         // phase switch
  int delta = 25;       // polyhedron management interval
  int T_max = 600;
  double mu_init = 1.0;
  double inactive_tol = 1e-8;
  bool warm_start = true;          // inner anchor: current phi vs the run's initial phi
  bool plane_offset_paper = false; // literal linearization offset (no eps shift)
  int h_every = 1;                 // history cadence for the constraint value
  double conv_tol = 1e-6;
  void validate() const;
};

struct CuttingPlane {
  std::vector<double> a;  // over w-space
  std::vector<double> b;  // over phi-space
  double c = 0.0;
  double mu = 0.0;
  int id = 0;
};

struct Polyhedron {
  std::vector<CuttingPlane> planes;
  int next_id = 0;
};

struct KStepTrace {
  std::vector<std::vector<double>> phis;  // K+1 iterates, phis[0] = anchor
};

struct HistoryRow {
  int iter = 0;
  int phase = 1;
  double G = 0.0, g = 0.0, h = 0.0;
  int n_planes = 0;
  double max_mu = 0.0;
};

struct PlaneEvent {
  int iter = 0;
  int plane_id = 0;
  bool inserted = false;
  double tangency_residual = 0.0;  // inserted planes only
};

struct State {
  std::vector<double> w, phi;
  Polyhedron poly;
  std::vector<double> anchor;  // inner-loop start when warm_start is off
  int iter = 0;
};

struct RunResult {
  std::vector<double> w, phi;
  std::vector<HistoryRow> history;
  std::vector<PlaneEvent> events;
  bool converged = false;
  int iters = 0;
  double final_G = 0.0;
};

// (1/n) sum_i sigmoid(w_i) * loss_i(phi)
double inner_loss_g(SampleLossOracle& o, const std::vector<double>& w,
                    const std::vector<double>& phi);
// Unweighted mean validation loss.
double outer_loss_G(SampleLossOracle& o, const std::vector<double>& phi);
// Returns G and writes its parameter gradient.
double outer_grad_G(SampleLossOracle& o, const std::vector<double>& phi, std::vector<double>& grad);

// K steps of gradient descent on g from phi0; the trace retains every
// iterate so the reverse sweep can differentiate through all K steps.
KStepTrace k_step_inner(SampleLossOracle& o, const std::vector<double>& w,
                        const std::vector<double>& phi0, const ReweightConfig& cfg);

// h = |phi - psi(w)|_1 / dim(phi)
double constraint_h(const KStepTrace& trace, const std::vector<double>& phi);

// Exact reverse-mode through the unrolled inner loop:
// dh_dw via per-step Hessian-vector products, dh_dphi including the
// warm-start path when the anchor is the current phi.
void hypergrad_h(SampleLossOracle& o, const std::vector<double>& w, const KStepTrace& trace,
                 const std::vector<double>& phi, const ReweightConfig& cfg,
                 std::vector<double>& dh_dw, std::vector<double>& dh_dphi);

double plane_value(const CuttingPlane& p, const std::vector<double>& w,
                   const std::vector<double>& phi);
// G + sum_l mu_l * (a_l' w + b_l' phi + c_l)
double lagrangian_Lq(SampleLossOracle& o, const std::vector<double>& w,
                     const std::vector<double>& phi, const Polyhedron& poly);
// G + sum_l mu_l * max(0, a_l' w + b_l' phi + c_l)^2
double penalty_Lhat(SampleLossOracle& o, const std::vector<double>& w,
                    const std::vector<double>& phi, const Polyhedron& poly);

void phase1_step(SampleLossOracle& o, State& s, const ReweightConfig& cfg);
void phase2_step(SampleLossOracle& o, State& s, const ReweightConfig& cfg);
// Drops inactive planes, inserts a linearization of the violated constraint;
// returns the new plane id or -1.
int manage_polyhedron(SampleLossOracle& o, State& s, const ReweightConfig& cfg,
                      std::vector<PlaneEvent>* events);

RunResult run(SampleLossOracle& o, std::vector<double> w0, std::vector<double> phi0,
              const ReweightConfig& cfg);

std::string history_csv(const std::vector<HistoryRow>& rows);
std::string weights_csv(const std::vector<int>& sample_ids, const std::vector<double>& w);

}  // namespace simreweight::bilevel
