#pragma once

// Test-only helpers: independent oracles and random instance generators.
// These deliberately avoid the library code paths they are used to check.

#include <Eigen/LU>

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

#include "gridvolt/feeder.hpp"
#include "gridvolt/flow.hpp"
#include "gridvolt/ppd.hpp"
#include "gridvolt/rng.hpp"

namespace gvtest {

using gridvolt::Vec;

// Direct recursive LinDistFlow evaluation v_j = v_parent - (r P + x Q) with
// lossless downstream flow aggregation; no Bbus matrix involved.
inline Vec recursive_lindistflow(const gridvolt::FeederModel& m, const Vec& p, const Vec& q,
                                 double v0) {
  const int nb = m.n_buses();
  Vec pflow = Vec::Zero(nb), qflow = Vec::Zero(nb);
  const auto& order = m.bfs_order();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const int j = *it;
    if (j == 0) continue;
    pflow[j] = -p[j - 1];
    qflow[j] = -q[j - 1];
    for (int c : m.children(j)) {
      pflow[j] += pflow[c];
      qflow[j] += qflow[c];
    }
  }
  Vec v = Vec::Zero(nb);
  v[0] = v0;
  for (int j : order) {
    if (j == 0) continue;
    const gridvolt::Line& l = m.line_to_parent(j);
    v[j] = v[m.parent(j)] - (l.r * pflow[j] + l.x * qflow[j]);
  }
  return v.tail(nb - 1);
}

// Central finite differences of g(q) = (gamma/2)||X(q+w) - mu||_B^2.
inline Vec fd_grad_g(const gridvolt::HvcProblem& p, const Vec& q, double h = 1e-6) {
  auto g = [&](const Vec& qq) {
    const Vec e = p.b->solve(qq + p.w) - p.mu;
    return 0.5 * p.gamma * e.dot(p.b->dense() * e);
  };
  Vec out(q.size());
  for (int i = 0; i < q.size(); ++i) {
    Vec hi = q, lo = q;
    hi[i] += h;
    lo[i] -= h;
    out[i] = (g(hi) - g(lo)) / (2.0 * h);
  }
  return out;
}

// Exhaustive active-set enumeration for the reduced box QP, N <= 12.
// Minimizes F(q) = 1/2||X(q+w)-mu||^2 + gamma/2||X(q+w)-mu||_B^2 by trying
// every {free, lower, upper} pattern and checking the KKT signs.
inline Vec enumerate_box_qp(const gridvolt::HvcProblem& p) {
  const int n = p.size();
  if (n > 12) throw std::invalid_argument("enumerate_box_qp: too large");
  const Eigen::MatrixXd x = p.b->dense().inverse();
  const Eigen::MatrixXd hess = x * x + p.gamma * x;
  const Vec lin = (x + p.gamma * Eigen::MatrixXd::Identity(n, n)) * (x * p.w - p.mu);

  long total = 1;
  for (int i = 0; i < n; ++i) total *= 3;

  double best_val = std::numeric_limits<double>::infinity();
  Vec best;
  for (long code = 0; code < total; ++code) {
    long c = code;
    std::vector<int> kind(n);  // 0 free, 1 lower, 2 upper
    for (int i = 0; i < n; ++i) {
      kind[i] = static_cast<int>(c % 3);
      c /= 3;
    }
    std::vector<int> free_idx;
    Vec q(n);
    for (int i = 0; i < n; ++i) {
      if (kind[i] == 0) free_idx.push_back(i);
      else q[i] = kind[i] == 1 ? p.q_lo[i] : p.q_hi[i];
    }
    const int nf = static_cast<int>(free_idx.size());
    if (nf > 0) {
      Eigen::MatrixXd hff(nf, nf);
      Vec rhs(nf);
      for (int a = 0; a < nf; ++a) {
        for (int b = 0; b < nf; ++b) hff(a, b) = hess(free_idx[a], free_idx[b]);
        double acc = lin[free_idx[a]];
        for (int i = 0; i < n; ++i) {
          if (kind[i] != 0) acc += hess(free_idx[a], i) * q[i];
        }
        rhs[a] = -acc;
      }
      const Vec qf = hff.ldlt().solve(rhs);
      for (int a = 0; a < nf; ++a) q[free_idx[a]] = qf[a];
    }

    const Vec grad = hess * q + lin;
    bool ok = true;
    const double tol = 1e-9;
    for (int i = 0; i < n && ok; ++i) {
      if (kind[i] == 0) ok = q[i] >= p.q_lo[i] - tol && q[i] <= p.q_hi[i] + tol;
      else if (kind[i] == 1) ok = grad[i] >= -tol;
      else ok = grad[i] <= tol;
    }
    if (!ok) continue;
    const double val = 0.5 * q.dot(hess * q) + lin.dot(q);
    if (val < best_val) {
      best_val = val;
      best = q;
    }
  }
  if (best.size() == 0) throw std::runtime_error("enumerate_box_qp: no feasible pattern");
  return best;
}

// Random recursive tree feeder: parent of bus j drawn uniformly among
// 0..j-1, shallow with high probability.
inline gridvolt::FeederModel random_feeder(gridvolt::Rng& rng, int n_min = 2, int n_max = 20) {
  const int nb = rng.uniform_int(n_min, n_max) + 1;
  gridvolt::FeederSpec spec;
  spec.v0_pu = 1.0;
  for (int i = 0; i < nb; ++i) spec.bus_ids.push_back(i);
  for (int j = 1; j < nb; ++j) {
    gridvolt::LineSpec ls;
    ls.from = j == 1 ? 0 : rng.uniform_int(0, j - 1);
    ls.to = j;
    ls.x_pu = rng.uniform(0.02, 0.08);
    ls.r_pu = *ls.x_pu * rng.uniform(0.3, 0.8);
    spec.lines.push_back(ls);
  }
  return gridvolt::build_feeder(spec);
}

struct RandomProblem {
  gridvolt::FeederModel feeder;
  gridvolt::HvcProblem problem;
};

// Loaded feeder with boxes scaled so that some constraints bind at the
// unconstrained optimum q = B mu - w.
inline RandomProblem random_problem(gridvolt::Rng& rng, int n_min = 2, int n_max = 20,
                                    double gamma = -1.0) {
  RandomProblem rp;
  rp.feeder = random_feeder(rng, n_min, n_max);
  const int n = rp.feeder.n_controlled();
  auto b = std::make_shared<gridvolt::BbusMatrix>(gridvolt::build_bbus(rp.feeder));

  Vec p_load(n), q_load(n);
  for (int j = 0; j < n; ++j) {
    p_load[j] = -rng.uniform(0.05, 0.3);
    q_load[j] = -rng.uniform(0.0, 0.1);
  }
  gridvolt::HvcProblem& p = rp.problem;
  p.b = b;
  p.mu = Vec::Constant(n, 1.0);
  p.w = gridvolt::build_operating_vector(rp.feeder, p_load, rp.feeder.v0()) + q_load;
  p.gamma = gamma > 0 ? gamma : rng.uniform(0.2, 1.0);

  const Vec q_star = b->apply(p.mu) - p.w;  // unconstrained optimum
  p.q_lo.resize(n);
  p.q_hi.resize(n);
  for (int j = 0; j < n; ++j) {
    const double scale = std::max(0.05, std::abs(q_star[j]));
    const double hi =
        rng.bernoulli(0.5) ? rng.uniform(0.2, 0.8) * scale : rng.uniform(1.2, 2.0) * scale;
    p.q_hi[j] = hi;
    p.q_lo[j] = -hi;
  }
  return rp;
}

}  // namespace gvtest
