#include "gridvolt/ppd.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace gridvolt {

void HvcProblem::validate() const {
  if (!b) throw std::invalid_argument("hvc problem: missing Bbus matrix");
  const int n = b->size();
  if (w.size() != n || mu.size() != n || q_lo.size() != n || q_hi.size() != n) {
    throw std::invalid_argument("hvc problem: dimension mismatch");
  }
  if (!(gamma >= 0.0)) throw std::invalid_argument("hvc problem: gamma must be nonnegative");
  for (int j = 0; j < n; ++j) {
    if (!(q_lo[j] <= q_hi[j])) {
      throw std::invalid_argument("hvc problem: q_lo > q_hi at bus index " + std::to_string(j));
    }
  }
  if (!w.allFinite() || !mu.allFinite()) throw std::invalid_argument("hvc problem: non-finite data");
}

std::pair<double, double> stepsize_bounds(double eta_tilde, double l_tilde, double gamma) {
  if (!(eta_tilde > 0) || !(l_tilde > 0) || !(gamma > 0)) {
    throw std::invalid_argument("stepsize_bounds: inputs must be positive");
  }
  const double alpha_max = 2.0 / (gamma * (1.0 / l_tilde + 1.0 / eta_tilde));
  const double beta_max = 2.0 / (l_tilde * l_tilde + (l_tilde + eta_tilde) / gamma);
  return {alpha_max, beta_max};
}

std::pair<double, double> stepsize_bounds_general(double eta, double l, double c,
                                                  double sigma_max) {
  if (!(eta > 0) || !(l > 0) || !(c > 0) || !(sigma_max > 0)) {
    throw std::invalid_argument("stepsize_bounds_general: inputs must be positive");
  }
  const double alpha_max = 2.0 / (eta + l);
  const double beta_max = 2.0 * c * eta * l / (eta * l * sigma_max + c * (eta + l));
  return {alpha_max, beta_max};
}

Vec grad_g(const Vec& q, const HvcProblem& p) {
  return p.gamma * (p.b->solve(q + p.w) - p.mu);
}

Vec project_box(const Vec& x, const Vec& lo, const Vec& hi) {
  Vec out(x.size());
  for (int j = 0; j < x.size(); ++j) out[j] = clamp_box(x[j], lo[j], hi[j]);
  return out;
}

PpdState make_initial_state(const HvcProblem& p, const Vec& q0) {
  p.validate();
  if (q0.size() != p.size()) throw std::invalid_argument("initial q: dimension mismatch");
  PpdState s;
  s.q = project_box(q0, p.q_lo, p.q_hi);
  s.lambda = Vec::Zero(p.size());
  s.v_meas = p.b->solve(s.q + p.w);
  s.v = s.v_meas;
  s.k = 0;
  return s;
}

PpdState ppd_step(const PpdState& state, const HvcProblem& p, const ControlConfig& cfg,
                  const Vec& v_meas) {
  const int n = p.size();
  const BbusMatrix& b = *p.b;

  PpdState next;
  next.v.resize(n);
  next.q.resize(n);
  next.lambda.resize(n);

  // (S1) exact minimization over v, optionally with the proximal term
  for (int j = 0; j < n; ++j) {
    const double bl = b.row_dot(j, [&](int i) { return state.lambda[i]; });
    next.v[j] = cfg.theta > 0.0 ? v_update_prox(p.mu[j], cfg.theta, state.v[j], bl)
                                : v_update(p.mu[j], bl);
  }

  // (S2) projected gradient step on q from the measured profile
  for (int j = 0; j < n; ++j) {
    next.q[j] = q_update(state.q[j], cfg.alpha, p.gamma, v_meas[j], p.mu[j], state.lambda[j],
                         p.q_lo[j], p.q_hi[j]);
  }

  // (S3) dual ascent on the equality residual, through the model-consistent
  // profile of the new q (so the online w feedback reduces to this exactly)
  next.v_meas = b.solve(next.q + p.w);
  for (int j = 0; j < n; ++j) {
    const double bv = b.row_dot(j, [&](int i) { return next.v[i]; });
    const double bvm = b.row_dot(j, [&](int i) { return next.v_meas[i]; });
    next.lambda[j] = lambda_update(state.lambda[j], cfg.beta, bv, bvm);
  }

  next.k = state.k + 1;
  if (!next.v.allFinite() || !next.q.allFinite() || !next.lambda.allFinite()) {
    throw std::runtime_error("ppd_step: non-finite iterate (reduce step sizes)");
  }
  return next;
}

KktResiduals kkt_residuals(const PpdState& state, const HvcProblem& p) {
  const BbusMatrix& b = *p.b;
  KktResiduals r;
  r.r_v = (state.v - p.mu + b.apply(state.lambda)).norm();
  const Vec g = grad_g(state.q, p);
  r.r_q = (state.q - project_box(state.q - (g - state.lambda), p.q_lo, p.q_hi)).norm();
  r.r_lambda = (b.apply(state.v) - state.q - p.w).norm();
  return r;
}

SolveResult solve_static(const HvcProblem& p, const ControlConfig& cfg,
                         const IterObserver& observer, const Vec& q0) {
  p.validate();
  if (!(cfg.alpha > 0) || !(cfg.beta > 0)) {
    throw std::invalid_argument("solve_static: step sizes must be positive");
  }
  if (cfg.theta < 0) throw std::invalid_argument("solve_static: theta must be nonnegative");
  if (!(cfg.tol > 0)) throw std::invalid_argument("solve_static: tol must be positive");

  SolveResult res;
  PpdState state = make_initial_state(p, q0.size() == 0 ? Vec(Vec::Zero(p.size())) : q0);

  auto residuals_of = [&](const PpdState& s) {
    KktResiduals r;
    r.r_v = (s.v - p.mu + p.b->apply(s.lambda)).norm();
    // reuse the measurement already consistent with s.q; grad_g would redo the solve
    const Vec g = p.gamma * (s.v_meas - p.mu);
    r.r_q = (s.q - project_box(s.q - (g - s.lambda), p.q_lo, p.q_hi)).norm();
    r.r_lambda = (p.b->apply(s.v) - s.q - p.w).norm();
    return r;
  };

  const double inf = cfg.divergence_norm;
  PpdState best_state;
  KktResiduals best_res;
  double best_max = std::numeric_limits<double>::infinity();
  for (long k = 0; k <= cfg.max_iters; ++k) {
    const KktResiduals r = residuals_of(state);
    if (cfg.trace_every > 0 && k % cfg.trace_every == 0) {
      res.trace.push_back({state.k, (state.v_meas - p.mu).norm(), r.r_v, r.r_q, r.r_lambda});
    }
    if (observer) observer(state, r);
    if (r.max() < best_max) {
      best_max = r.max();
      best_state = state;
      best_res = r;
    }

    const bool stop = r.max() < cfg.tol || k == cfg.max_iters;
    if (stop && cfg.trace_every > 0 && k % cfg.trace_every != 0) {
      res.trace.push_back({state.k, (state.v_meas - p.mu).norm(), r.r_v, r.r_q, r.r_lambda});
    }
    if (r.max() < cfg.tol) {
      res.final_mismatch = (state.v_meas - p.mu).norm();
      res.state = std::move(state);
      res.status = SolveStatus::converged;
      res.iterations = k;
      res.final_residuals = r;
      return res;
    }
    if (k == cfg.max_iters) {
      // out of budget: hand back the best iterate seen, flagged non-converged
      res.final_mismatch = (best_state.v_meas - p.mu).norm();
      res.state = std::move(best_state);
      res.status = SolveStatus::max_iters;
      res.iterations = k;
      res.final_residuals = best_res;
      return res;
    }

    state = ppd_step(state, p, cfg, state.v_meas);
    if (state.v.cwiseAbs().maxCoeff() > inf || state.q.cwiseAbs().maxCoeff() > inf ||
        state.lambda.cwiseAbs().maxCoeff() > inf) {
      const KktResiduals rd = residuals_of(state);
      res.final_mismatch = (state.v_meas - p.mu).norm();
      res.state = std::move(state);
      res.status = SolveStatus::diverged;
      res.iterations = k + 1;
      res.final_residuals = rd;
      return res;
    }
  }
  return res;  // unreachable
}

QpSolution reference_qp_solve(const HvcProblem& p, double tol, long max_iters) {
  p.validate();
  const BbusMatrix& b = *p.b;
  const int n = p.size();

  // Reduced objective F(q) = 1/2 q'Hq + lin'q + const with H = X^2 + gamma X;
  // accelerated projected gradient with monotone restarts, then an
  // active-set polish for a high-accuracy point.
  const Eigen::MatrixXd x_mat = b.solve_dense(Eigen::MatrixXd::Identity(n, n));
  Eigen::MatrixXd hess = x_mat * x_mat + p.gamma * x_mat;
  hess = 0.5 * (hess + hess.transpose().eval());
  const Vec lin = (x_mat + p.gamma * Eigen::MatrixXd::Identity(n, n)) * (x_mat * p.w - p.mu);

  const double eta = b.eta_tilde();
  const double lip = 1.0 / (eta * eta) + p.gamma / eta;
  const double step = 1.0 / lip;

  auto value = [&](const Vec& q) { return 0.5 * q.dot(hess * q) + lin.dot(q); };
  auto gradient = [&](const Vec& q) { return Vec(hess * q + lin); };
  auto pg_residual = [&](const Vec& q) {
    return (q - project_box(q - gradient(q), p.q_lo, p.q_hi)).norm();
  };

  Vec x = project_box(Vec::Zero(n), p.q_lo, p.q_hi);
  Vec y = x;
  double fx = value(x);
  double t = 1.0;
  long it = 0;

  for (; it < max_iters; ++it) {
    Vec g = gradient(y);
    Vec x_new = project_box(y - step * g, p.q_lo, p.q_hi);
    double f_new = value(x_new);
    if (f_new > fx) {  // monotone restart: fall back to a plain step from x
      y = x;
      t = 1.0;
      g = gradient(y);
      x_new = project_box(y - step * g, p.q_lo, p.q_hi);
      f_new = value(x_new);
    }
    const double t_new = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = x_new + ((t - 1.0) / t_new) * (x_new - x);
    x = x_new;
    fx = f_new;
    t = t_new;

    if (it % 8 == 0 && pg_residual(x) < tol) {
      ++it;
      break;
    }
  }

  // Polish: freeze the bounds the iterate sits on, solve the free block
  // exactly, keep the result only if it passes the KKT sign checks.
  {
    const double edge = 1e-7 * std::max(1.0, x.cwiseAbs().maxCoeff());
    std::vector<int> kind(n, 0), free_idx;  // 0 free, 1 at lower, 2 at upper
    for (int j = 0; j < n; ++j) {
      if (x[j] <= p.q_lo[j] + edge) kind[j] = 1;
      else if (x[j] >= p.q_hi[j] - edge) kind[j] = 2;
      else free_idx.push_back(j);
    }
    Vec polished(n);
    for (int j = 0; j < n; ++j) {
      polished[j] = kind[j] == 1 ? p.q_lo[j] : (kind[j] == 2 ? p.q_hi[j] : 0.0);
    }
    const int nf = static_cast<int>(free_idx.size());
    bool ok = true;
    if (nf > 0) {
      Eigen::MatrixXd hff(nf, nf);
      Vec rhs(nf);
      for (int a = 0; a < nf; ++a) {
        for (int c = 0; c < nf; ++c) hff(a, c) = hess(free_idx[a], free_idx[c]);
        double acc = lin[free_idx[a]];
        for (int j = 0; j < n; ++j) {
          if (kind[j] != 0) acc += hess(free_idx[a], j) * polished[j];
        }
        rhs[a] = -acc;
      }
      const Vec qf = Eigen::LDLT<Eigen::MatrixXd>(hff).solve(rhs);
      for (int a = 0; a < nf; ++a) polished[free_idx[a]] = qf[a];
    }
    const Vec g = gradient(polished);
    const double sign_tol = 1e-11 * std::max(1.0, g.cwiseAbs().maxCoeff());
    for (int j = 0; j < n && ok; ++j) {
      if (kind[j] == 0) ok = polished[j] >= p.q_lo[j] && polished[j] <= p.q_hi[j];
      else if (kind[j] == 1) ok = g[j] >= -sign_tol;
      else ok = g[j] <= sign_tol;
    }
    if (ok && pg_residual(polished) <= pg_residual(x)) x = polished;
  }

  QpSolution sol;
  sol.q = x;
  sol.v = b.solve(x + p.w);
  sol.kkt_residual = pg_residual(x);
  sol.iters = it;
  return sol;
}

}  // namespace gridvolt
