#include "gridvolt/flow.hpp"

#include <cmath>
#include <stdexcept>

namespace gridvolt {

Vec lindistflow_voltage(const BbusMatrix& b, const Vec& q, const Vec& w) {
  if (q.size() != b.size() || w.size() != b.size()) {
    throw std::invalid_argument("lindistflow_voltage: dimension mismatch");
  }
  Vec rhs = q + w;
  Vec v = b.solve(rhs);
  const double resid = (b.apply(v) - rhs).cwiseAbs().maxCoeff();
  if (!(resid < 1e-10)) {
    throw std::runtime_error("lindistflow_voltage: solve residual " + std::to_string(resid));
  }
  return v;
}

Vec build_operating_vector(const FeederModel& model, const Vec& p, double v0) {
  model.require_radial("build_operating_vector");
  const int n = model.n_controlled();
  if (p.size() != n) throw std::invalid_argument("build_operating_vector: dimension mismatch");

  // Lossless downstream active flow on the line feeding each bus:
  // P(parent->j) = -sum of p over the subtree rooted at j.
  Vec flow_into = Vec::Zero(model.n_buses());
  const auto& order = model.bfs_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const int j = *it;
    if (j == 0) continue;
    double f = -p[j - 1];
    for (int c : model.children(j)) f += flow_into[c];
    flow_into[j] = f;
  }

  Vec w(n);
  for (int j = 1; j <= n; ++j) {
    const Line& lj = model.line_to_parent(j);
    double wj = -(lj.r / lj.x) * flow_into[j];
    if (model.parent(j) == 0) wj += v0 / lj.x;
    for (int c : model.children(j)) {
      const Line& lc = model.line_to_parent(c);
      wj += (lc.r / lc.x) * flow_into[c];
    }
    w[j - 1] = wj;
  }
  return w;
}

AcSolution ac_power_flow(const FeederModel& model, const Injection& inj, double v0, int max_sweeps,
                         double tol) {
  model.require_radial("ac_power_flow");
  const int n = model.n_controlled();
  if (inj.p.size() != n || inj.q.size() != n) {
    throw std::invalid_argument("ac_power_flow: dimension mismatch");
  }

  using cplx = std::complex<double>;
  const int nb = model.n_buses();
  std::vector<cplx> s(nb, cplx(0, 0)), z(nb), volt(nb, cplx(v0, 0)), branch(nb, cplx(0, 0));
  for (int j = 1; j < nb; ++j) {
    s[j] = cplx(inj.p[j - 1], inj.q[j - 1]);
    const Line& l = model.line_to_parent(j);
    z[j] = cplx(l.r, l.x);
  }
  volt[0] = cplx(v0, 0);

  const auto& order = model.bfs_order();
  bool converged = false;
  int sweep = 0;
  for (; sweep < max_sweeps; ++sweep) {
    // backward: aggregate branch currents from the leaves
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      const int j = *it;
      if (j == 0) continue;
      if (std::abs(volt[j]) < 0.3) {
        throw std::runtime_error("ac_power_flow: voltage collapsed below 0.3 pu");
      }
      cplx cur = -std::conj(s[j] / volt[j]);
      for (int c : model.children(j)) cur += branch[c];
      branch[j] = cur;
    }
    // forward: propagate voltage drops from the root
    double max_dv = 0.0;
    for (int j : order) {
      if (j == 0) continue;
      const cplx vnew = volt[model.parent(j)] - z[j] * branch[j];
      max_dv = std::max(max_dv, std::abs(vnew - volt[j]));
      volt[j] = vnew;
    }
    if (max_dv < tol) {
      converged = true;
      ++sweep;
      break;
    }
  }
  if (!converged) {
    throw std::runtime_error("ac_power_flow: no convergence in " + std::to_string(max_sweeps) +
                             " sweeps (infeasible operating point?)");
  }

  for (int j = 1; j < nb; ++j) {
    const double mag = std::abs(volt[j]);
    if (mag <= 0.3 || mag >= 2.0) {
      throw std::runtime_error("ac_power_flow: voltage " + std::to_string(mag) +
                               " pu outside the (0.3, 2) sanity band");
    }
  }

  // Fixed-point verification: implied injection at every bus from the final
  // voltages must match the requested one.
  double max_resid = 0.0;
  std::vector<std::vector<int>> adj(nb);
  for (int j = 1; j < nb; ++j) {
    adj[j].push_back(model.parent(j));
    adj[model.parent(j)].push_back(j);
  }
  auto line_z = [&](int a, int b) { return model.parent(a) == b ? z[a] : z[b]; };
  cplx s_root(0, 0);
  for (int j = 0; j < nb; ++j) {
    cplx out(0, 0);
    for (int i : adj[j]) out += (volt[j] - volt[i]) / line_z(j, i);
    const cplx implied = volt[j] * std::conj(out);
    if (j == 0) {
      s_root = implied;
    } else {
      max_resid = std::max(max_resid, std::abs(implied - s[j]));
    }
  }
  if (!(max_resid < 1e-10)) {
    throw std::runtime_error("ac_power_flow: power balance residual " +
                             std::to_string(max_resid));
  }

  // Root balance: injected power equals losses minus the bus injections.
  cplx total(0, 0);
  for (int j = 1; j < nb; ++j) total += s[j];
  cplx losses(0, 0);
  for (int j = 1; j < nb; ++j) losses += z[j] * std::norm(branch[j]);
  const double root_resid = std::abs(s_root - (losses - total));

  AcSolution sol;
  sol.v_mag.resize(n);
  for (int j = 1; j < nb; ++j) sol.v_mag[j - 1] = std::abs(volt[j]);
  sol.s_root = s_root;
  sol.max_balance_residual = max_resid;
  sol.root_balance_residual = root_resid;
  sol.sweeps = sweep;
  return sol;
}

}  // namespace gridvolt
