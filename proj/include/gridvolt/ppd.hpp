#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "gridvolt/feeder.hpp"

namespace gridvolt {

// One static instance of the gamma-weighted voltage-mismatch program:
// minimize 1/2||v - mu||^2 + gamma/2 ||X(q+w) - mu||_B^2
// subject to B v = q + w and q in [q_lo, q_hi].
struct HvcProblem {
  std::shared_ptr<const BbusMatrix> b;
  Vec w;
  Vec mu;
  double gamma = 0.5;
  Vec q_lo, q_hi;

  int size() const { return b ? b->size() : 0; }
  void validate() const;
};

struct ControlConfig {
  double alpha = 0.0;
  double beta = 0.0;
  double theta = 0.0;  // proximal coefficient on the v-update, 0 disables
  double tol = 1e-8;
  long max_iters = 200000;
  double divergence_norm = 1e6;
  long trace_every = 1;  // 0 disables the per-iteration trace
};

struct PpdState {
  Vec v;       // primal voltage estimate
  Vec q;       // VAR setting, always box-feasible after the first update
  Vec lambda;  // dual multipliers
  Vec v_meas;  // voltage profile consistent with q (static mode: X(q+w))
  long k = 0;
};

struct KktResiduals {
  double r_v = 0, r_q = 0, r_lambda = 0;
  double max() const { return std::max(r_v, std::max(r_q, r_lambda)); }
};

// Certified step-size bounds for the quadratic pair, from the extreme
// singular values of B: alpha < 2/[gamma(1/L + 1/eta)],
// beta < 2/[L^2 + (L + eta)/gamma].
std::pair<double, double> stepsize_bounds(double eta_tilde, double l_tilde, double gamma);

// General-form rule for eta-strongly-convex g with L-Lipschitz gradient and
// c-strongly-convex f: alpha < 2/(eta+L),
// beta < 2*c*eta*L / [eta*L*sigma_max + c*(eta+L)].
std::pair<double, double> stepsize_bounds_general(double eta, double l, double c,
                                                  double sigma_max);

// gamma * (X(q+w) - mu); the part of the q-gradient a bus can read off its
// own voltage measurement.
Vec grad_g(const Vec& q, const HvcProblem& p);

Vec project_box(const Vec& x, const Vec& lo, const Vec& hi);

// Per-bus update kernels. The online simulator runs the same expressions on
// cached neighbor values, so the synchronous case reproduces the static
// iterates bit for bit.
inline double clamp_box(double x, double lo, double hi) {
  return x < lo ? lo : (x > hi ? hi : x);
}
inline double v_update(double mu, double b_lambda) { return mu - b_lambda; }
inline double v_update_prox(double mu, double theta, double v_prev, double b_lambda) {
  return (mu + 2.0 * theta * v_prev - b_lambda) / (1.0 + 2.0 * theta);
}
inline double q_update(double q, double alpha, double gamma, double v_meas, double mu,
                       double lambda, double lo, double hi) {
  return clamp_box(q - alpha * (gamma * (v_meas - mu) - lambda), lo, hi);
}
inline double lambda_update(double lambda, double beta, double b_v, double b_v_meas) {
  return lambda + beta * (b_v - b_v_meas);
}

// lambda^0 = 0, q^0 clamped to the box, measurement solved from the model.
PpdState make_initial_state(const HvcProblem& p, const Vec& q0);

// One (S1)-(S3) iteration. v_meas is the voltage profile used by the
// q-update; pass state.v_meas in static mode. The dual step uses the
// equality residual evaluated through the model-consistent profile of the
// new q, which equals B v - q - w up to solver rounding.
PpdState ppd_step(const PpdState& state, const HvcProblem& p, const ControlConfig& cfg,
                  const Vec& v_meas);

KktResiduals kkt_residuals(const PpdState& state, const HvcProblem& p);

enum class SolveStatus { converged, max_iters, diverged };

struct IterRecord {
  long k;
  double mismatch;  // ||v_meas - mu||_2
  double r_v, r_q, r_lambda;
};

struct SolveResult {
  PpdState state;
  SolveStatus status = SolveStatus::max_iters;
  long iterations = 0;
  KktResiduals final_residuals;
  double final_mismatch = 0.0;  // ||v_meas - mu||_2 at the returned state
  std::vector<IterRecord> trace;
};

using IterObserver = std::function<void(const PpdState&, const KktResiduals&)>;

// Run the PPD iteration with exact linear measurements until every KKT
// residual drops below cfg.tol, divergence is detected, or max_iters. q0 is
// the latest VAR output setting (clamped to the box); when the budget runs
// out the iterate with the smallest maximum residual is returned.
SolveResult solve_static(const HvcProblem& p, const ControlConfig& cfg,
                         const IterObserver& observer = {}, const Vec& q0 = Vec());

struct QpSolution {
  Vec v, q;
  double kkt_residual = 0.0;
  long iters = 0;
};

// Independent oracle for the same problem reduced to q alone, solved by
// accelerated projected gradient with restarts. Shares no code with the PPD
// iteration beyond the linear solve.
QpSolution reference_qp_solve(const HvcProblem& p, double tol = 1e-11, long max_iters = 2000000);

}  // namespace gridvolt
