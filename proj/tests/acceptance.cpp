// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// gated criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "gridvolt/flow.hpp"
#include "gridvolt/ppd.hpp"
#include "gridvolt/scenario.hpp"
#include "gridvolt/sim.hpp"

#include "support.hpp"

using namespace gridvolt;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  bool gate = true;  // false: recorded note, never fails the suite
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---- 21-bus chain fixture: (0.233 + j0.366) ohm segments, 1 MVA / 12.47 kV
// bases, 70 kW + 20 kVAR loads, 70 kVA +/- 50% inverter ratings (seeded).

struct Fixture21 {
  FeederModel feeder;
  std::shared_ptr<BbusMatrix> b;
  HvcProblem problem;
  Vec ratings_kva;
};

Fixture21 make_fixture21(double gamma, bool wide_box) {
  Fixture21 f;
  const Bases bases{1e6, 12470.0};
  f.feeder = build_feeder(make_chain_spec(21, 0.233, 0.366, bases));
  f.b = std::make_shared<BbusMatrix>(build_bbus(f.feeder));
  const int n = 20;

  Rng rng(21);
  f.ratings_kva.resize(n);
  for (int j = 0; j < n; ++j) f.ratings_kva[j] = 70.0 * (1.0 + 0.5 * rng.uniform(-1.0, 1.0));

  f.problem.b = f.b;
  f.problem.mu = Vec::Constant(n, 1.0);
  f.problem.gamma = gamma;
  const Vec p_load = Vec::Constant(n, -0.07);
  const Vec q_load_inj = Vec::Constant(n, -0.02);
  f.problem.w = build_operating_vector(f.feeder, p_load, 1.0) + q_load_inj;
  f.problem.q_lo.resize(n);
  f.problem.q_hi.resize(n);
  for (int j = 0; j < n; ++j) {
    const double cap = wide_box ? 10.0 : f.ratings_kva[j] * 1000.0 / bases.s_base_va;
    f.problem.q_lo[j] = -cap;
    f.problem.q_hi[j] = cap;
  }
  return f;
}

// ---- criteria -------------------------------------------------------------

Outcome criterion1_and_4(double& lyapunov_worst) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(101);
  double worst_dq = 0.0, worst_kkt = 0.0;
  lyapunov_worst = 0.0;
  const int n_feeders = 50;

  for (int i = 0; i < n_feeders; ++i) {
    const auto rp = gvtest::random_problem(rng, 2, 20);
    const auto [am, bm] =
        stepsize_bounds(rp.problem.b->eta_tilde(), rp.problem.b->l_tilde(), rp.problem.gamma);
    ControlConfig cfg;
    cfg.alpha = 0.5 * am;
    cfg.beta = 0.5 * bm;
    cfg.tol = 1e-10;
    cfg.max_iters = 8000000;
    cfg.trace_every = 0;

    const QpSolution ref = reference_qp_solve(rp.problem);
    const Vec lambda_star = rp.problem.b->solve(rp.problem.mu - ref.v);
    const double ratio = cfg.alpha / cfg.beta;

    double prev = std::numeric_limits<double>::infinity();
    const SolveResult res =
        solve_static(rp.problem, cfg, [&](const PpdState& s, const KktResiduals&) {
          const double lyap =
              (s.q - ref.q).squaredNorm() + ratio * (s.lambda - lambda_star).squaredNorm();
          if (lyap > prev) lyapunov_worst = std::max(lyapunov_worst, lyap - prev);
          prev = lyap;
        });
    if (res.status != SolveStatus::converged) {
      return {false, true, "instance " + std::to_string(i) + " did not converge"};
    }
    worst_dq = std::max(worst_dq, (res.state.q - ref.q).cwiseAbs().maxCoeff());
    worst_kkt = std::max(worst_kkt, res.final_residuals.max());
  }
  const double dt = seconds_since(t0);
  std::ostringstream os;
  os << n_feeders << " feeders, max|dq|=" << worst_dq << " (limit 1e-6), max KKT=" << worst_kkt
     << " (limit 1e-8), " << dt << " s (limit 60)";
  return {worst_dq <= 1e-6 && worst_kkt <= 1e-8 && dt <= 60.0, true, os.str()};
}

Outcome criterion2() {
  Rng rng(102);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double eta = rng.uniform(0.05, 20.0);
    const double l = eta + rng.uniform(1e-6, 50.0);
    const double gamma = rng.uniform(0.05, 5.0);
    const auto [a1, b1] = stepsize_bounds(eta, l, gamma);
    const auto [a2, b2] = stepsize_bounds_general(gamma / l, gamma / eta, 1.0, l * l);
    worst = std::max(worst, std::abs(a1 - a2) / std::max(1.0, std::abs(a1)));
    worst = std::max(worst, std::abs(b1 - b2) / std::max(1.0, std::abs(b1)));
  }
  std::ostringstream os;
  os << "1000 triples, worst relative gap " << worst << " (limit 1e-12)";
  return {worst <= 1e-12, true, os.str()};
}

Outcome criterion3() {
  Rng rng(103);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const auto rp = gvtest::random_problem(rng, 2, 20);
    Vec q(rp.problem.size());
    for (int j = 0; j < q.size(); ++j) q[j] = rng.uniform(-0.3, 0.3);
    const Vec g = grad_g(q, rp.problem);
    const Vec fd = gvtest::fd_grad_g(rp.problem, q);
    worst = std::max(worst, (g - fd).norm() / std::max(1e-8, fd.norm()));
  }
  std::ostringstream os;
  os << "100 instances, worst relative error " << worst << " (limit 1e-6)";
  return {worst <= 1e-6, true, os.str()};
}

Outcome criterion5() {
  const std::vector<double> gammas = {0.017, 0.1, 0.5, 1.0, 5.0};
  std::vector<double> mm;
  for (double g : gammas) {
    const Fixture21 f = make_fixture21(g, false);
    const QpSolution sol = reference_qp_solve(f.problem);
    mm.push_back((sol.v - f.problem.mu).norm());
  }
  bool monotone = true;
  for (std::size_t i = 1; i < mm.size(); ++i) monotone = monotone && mm[i] >= mm[i - 1] - 1e-12;

  double worst_free = 0.0;
  for (double g : gammas) {
    const Fixture21 f = make_fixture21(g, true);
    const QpSolution sol = reference_qp_solve(f.problem);
    worst_free = std::max(worst_free, (sol.v - f.problem.mu).norm());
  }
  std::ostringstream os;
  os << "mismatch over gamma {";
  for (std::size_t i = 0; i < mm.size(); ++i) os << (i ? ", " : "") << mm[i];
  os << "} " << (monotone ? "non-decreasing" : "NOT monotone") << "; wide-box worst "
     << worst_free << " (limit 1e-8)";
  return {monotone && worst_free <= 1e-8, true, os.str()};
}

Outcome criterion6() {
  const Fixture21 f = make_fixture21(0.5, false);
  const auto [am, bm] = stepsize_bounds(f.b->eta_tilde(), f.b->l_tilde(), f.problem.gamma);
  ControlConfig ctrl;
  ctrl.alpha = 0.5 * am;
  ctrl.beta = 0.5 * bm;
  const long rounds = 1000;

  std::vector<PpdState> static_states;
  static_states.reserve(rounds + 1);
  ControlConfig solver_cfg = ctrl;
  solver_cfg.tol = 1e-300;
  solver_cfg.max_iters = rounds;
  solver_cfg.trace_every = 0;
  solve_static(f.problem, solver_cfg,
               [&](const PpdState& s, const KktResiduals&) { static_states.push_back(s); });

  SimConfig cfg;
  cfg.ctrl = ctrl;
  cfg.gamma = f.problem.gamma;
  cfg.mu = f.problem.mu;
  CommModel comm;
  comm.activation_prob = 1.0;
  HvcSimulator sim(f.b, cfg, comm, std::make_unique<LinearPlant>(f.b, f.problem.w));
  sim.set_limits(f.problem.q_lo, f.problem.q_hi);
  sim.initialize(Vec::Zero(f.problem.size()));

  double worst = std::max((sim.v_meas() - static_states[0].v_meas).cwiseAbs().maxCoeff(),
                          (sim.q() - static_states[0].q).cwiseAbs().maxCoeff());
  for (long k = 1; k <= rounds; ++k) {
    sim.run_round();
    const PpdState& s = static_states[k];
    worst = std::max({worst, (sim.v() - s.v).cwiseAbs().maxCoeff(),
                      (sim.q() - s.q).cwiseAbs().maxCoeff(),
                      (sim.lambda() - s.lambda).cwiseAbs().maxCoeff(),
                      (sim.v_meas() - s.v_meas).cwiseAbs().maxCoeff()});
  }
  std::ostringstream os;
  os << rounds << " rounds, max abs deviation " << worst << " (limit 0)";
  return {worst == 0.0, true, os.str()};
}

Outcome criterion7() {
  const Fixture21 f = make_fixture21(0.5, false);
  const int n = f.problem.size();
  const Vec v_lin = f.b->solve(f.problem.w);  // q = 0
  Injection inj;
  inj.p = Vec::Constant(n, -0.07);
  inj.q = Vec::Constant(n, -0.02);
  const AcSolution ac = ac_power_flow(f.feeder, inj, 1.0);
  const double gap = (ac.v_mag - v_lin).cwiseAbs().maxCoeff();
  const double balance = std::max(ac.max_balance_residual, ac.root_balance_residual);
  std::ostringstream os;
  os << "max|v_ac - v_lin| = " << gap << " (limit 0.01), balance residual " << balance
     << " (limit 1e-9)";
  return {gap <= 0.01 && balance <= 1e-9, true, os.str()};
}

long rounds_to_tolerance(const std::vector<double>& trace, double mm_star, double tol) {
  long k = static_cast<long>(trace.size());
  for (long i = static_cast<long>(trace.size()) - 1; i >= 0; --i) {
    if (std::abs(trace[i] - mm_star) <= tol) k = i;
    else break;
  }
  return k == static_cast<long>(trace.size()) ? -1 : k + 1;
}

Outcome criterion8() {
  const auto t0 = std::chrono::steady_clock::now();

  // 10-bus hub-and-spoke fixture with capped hubs (scenarios/activation10.json)
  FeederSpec spec;
  for (int i = 0; i < 10; ++i) spec.bus_ids.push_back(i);
  const int edges[9][2] = {{0, 1}, {1, 2}, {1, 3}, {0, 4}, {4, 5}, {4, 6}, {0, 7}, {7, 8}, {7, 9}};
  for (const auto& e : edges) {
    LineSpec l;
    l.from = e[0];
    l.to = e[1];
    l.r_pu = 0.02;
    l.x_pu = 0.05;
    spec.lines.push_back(l);
  }
  const FeederModel m = build_feeder(spec);
  auto b = std::make_shared<BbusMatrix>(build_bbus(m));
  const int n = 9;

  HvcProblem prob;
  prob.b = b;
  prob.mu = Vec::Constant(n, 1.0);
  prob.gamma = 0.05;
  prob.w = build_operating_vector(m, Vec::Constant(n, -0.05), 1.0) + Vec::Constant(n, -0.015);
  prob.q_lo = Vec::Constant(n, -0.3);
  prob.q_hi = Vec::Constant(n, 0.3);
  for (int j : {0, 3, 6}) {
    prob.q_hi[j] = 0.015;
    prob.q_lo[j] = -0.015;
  }
  const double alpha = 0.05, beta = 2e-4;

  const QpSolution ref = reference_qp_solve(prob);
  const double mm_star = (ref.v - prob.mu).norm();
  const double tol = 1e-5;

  auto trial = [&](double rate, std::uint64_t seed, long budget) {
    SimConfig cfg;
    cfg.ctrl.alpha = alpha;
    cfg.ctrl.beta = beta;
    cfg.gamma = prob.gamma;
    cfg.mu = prob.mu;
    CommModel comm;
    comm.activation_prob = rate;
    comm.seed = seed;
    HvcSimulator sim(b, cfg, comm, std::make_unique<LinearPlant>(b, prob.w));
    sim.set_limits(prob.q_lo, prob.q_hi);
    sim.initialize(Vec::Zero(n));
    std::vector<double> tr;
    tr.reserve(budget);
    for (long k = 0; k < budget; ++k) {
      sim.run_round();
      tr.push_back(sim.mismatch());
    }
    return tr;
  };

  const long sync = rounds_to_tolerance(trial(1.0, 1, 400000), mm_star, tol);
  if (sync < 0) return {false, true, "synchronous run did not reach tolerance"};

  const std::vector<double> rates = {0.1, 0.25, 0.5, 1.0};
  std::vector<long> medians;
  std::ostringstream os;
  os << "sync=" << sync << ", medians over 20 seeds {";
  bool all_within = true;
  for (double rate : rates) {
    std::vector<long> rr;
    for (int s = 0; s < 20; ++s) {
      long r = rounds_to_tolerance(trial(rate, 1000 + s, 12 * sync), mm_star, tol);
      rr.push_back(r < 0 ? 1000000000L : r);
    }
    std::sort(rr.begin(), rr.end());
    medians.push_back(rr[rr.size() / 2]);
    os << (rate == rates.front() ? "" : ", ") << rate << ": " << medians.back();
    all_within = all_within && medians.back() <= 10 * sync;
  }
  os << "}";
  bool monotone = true;
  for (std::size_t i = 1; i < medians.size(); ++i) {
    monotone = monotone && medians[i] <= medians[i - 1];
  }
  const double dt = seconds_since(t0);
  os << (monotone ? ", non-increasing" : ", NOT monotone") << ", within 10x sync: "
     << (all_within ? "yes" : "NO") << ", " << dt << " s (limit 300)";
  return {monotone && all_within && dt <= 300.0, true, os.str()};
}

Scenario make_daily_scenario(Strategy strategy) {
  Scenario sc;
  const Bases bases{1e6, 12470.0};
  sc.feeder = build_feeder(make_chain_spec(21, 0.233, 0.366, bases));
  sc.bbus = std::make_shared<BbusMatrix>(build_bbus(sc.feeder));
  const int n = 20;
  sc.mu = Vec::Constant(n, 1.0);
  sc.gamma = 0.5;
  const auto [am, bm] = stepsize_bounds(sc.bbus->eta_tilde(), sc.bbus->l_tilde(), sc.gamma);
  sc.alpha = 0.5 * am;
  sc.beta = 0.5 * bm;
  sc.alpha_bound = am;
  sc.beta_bound = bm;
  sc.strategy = strategy;
  sc.plant = PlantKind::ac;
  sc.rounds_per_timestep = 30;
  sc.timesteps = 1440;
  SyntheticProfileConfig pc;
  pc.homes_per_bus = 20.0;
  sc.profiles = generate_daily_profiles(n, pc, 2026);
  sc.ratings_kva = Vec::Constant(n, 70.0);
  sc.initial_q = Vec::Zero(n);
  sc.seed = 2026;
  sc.comm.activation_prob = 1.0;
  sc.comm.outages.push_back(OutageWindow{28800, 43200, {}});  // final third of the day
  sc.comm.seed = sc.seed;
  return sc;
}

Outcome criterion9() {
  const auto t0 = std::chrono::steady_clock::now();
  const SimulationResult hvc = run_scenario(make_daily_scenario(Strategy::hvc));
  const SimulationResult dist = run_scenario(make_daily_scenario(Strategy::distributed_only));
  const SimulationResult none = run_scenario(make_daily_scenario(Strategy::no_control));

  double sum_hvc = 0, sum_dist = 0, sum_none = 0;
  int counted = 0;
  for (int t = 960; t < 1440; ++t) {
    if (hvc.timesteps[t].headroom_total <= 0.0) continue;  // VAR-exhausted timesteps excluded
    sum_hvc += hvc.timesteps[t].mean_mismatch;
    sum_dist += dist.timesteps[t].mean_mismatch;
    sum_none += none.timesteps[t].mean_mismatch;
    ++counted;
  }
  const double m_hvc = sum_hvc / counted, m_dist = sum_dist / counted,
               m_none = sum_none / counted;
  const double dt = seconds_since(t0);
  std::ostringstream os;
  os << "outage-window time-averaged mismatch: hvc=" << m_hvc << " distributed=" << m_dist
     << " none=" << m_none << " over " << counted << " timesteps, " << dt << " s (limit 600)";
  return {m_hvc <= m_dist && m_dist <= m_none && dt <= 600.0, true, os.str()};
}

Outcome criterion10() {
  const Fixture21 f = make_fixture21(0.5, false);
  const auto [am, bm] = stepsize_bounds(f.b->eta_tilde(), f.b->l_tilde(), f.problem.gamma);
  ControlConfig cfg;
  cfg.alpha = 5.0 * am;
  cfg.beta = 0.5 * bm;
  cfg.tol = 1e-8;
  cfg.max_iters = 200000;
  cfg.trace_every = 0;
  const SolveResult res = solve_static(f.problem, cfg);
  std::ostringstream os;
  os << "alpha at 5x bound: ";
  switch (res.status) {
    case SolveStatus::diverged:
      os << "divergence flag triggered after " << res.iterations << " iterations";
      break;
    case SolveStatus::max_iters:
      os << "bounded oscillation, non-converged flag after " << res.iterations
         << " iterations (VAR box keeps iterates bounded; residual " << res.final_residuals.max()
         << ")";
      break;
    case SolveStatus::converged:
      os << "unexpectedly converged (Theorem bound is sufficient, not necessary)";
      break;
  }
  return {res.status != SolveStatus::converged, false, os.str()};
}

Outcome criterion11() {
  Scenario sc = make_daily_scenario(Strategy::hvc);
  sc.timesteps = 60;
  {
    SyntheticProfileConfig pc;
    pc.homes_per_bus = 20.0;
    pc.timesteps = 60;
    sc.profiles = generate_daily_profiles(20, pc, 7);
  }
  sc.comm.outages.clear();
  sc.comm.activation_prob = 0.7;
  sc.meas_noise_std = 1e-4;
  sc.record_per_bus = true;

  const fs::path dir = fs::temp_directory_path() / "gv_acceptance_det";
  fs::remove_all(dir);
  const SimulationResult a = run_scenario(sc);
  const SimulationResult b = run_scenario(sc);
  write_results(a, "{}", (dir / "a").string());
  write_results(b, "{}", (dir / "b").string());

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  const bool trace_eq = slurp(dir / "a" / "trace.csv") == slurp(dir / "b" / "trace.csv");
  const bool summary_eq = slurp(dir / "a" / "summary.json") == slurp(dir / "b" / "summary.json");
  std::ostringstream os;
  os << "repeated seeded run: trace " << (trace_eq ? "byte-identical" : "DIFFERS") << ", summary "
     << (summary_eq ? "byte-identical" : "DIFFERS");
  return {trace_eq && summary_eq, true, os.str()};
}

}  // namespace

int main() {
  struct Row {
    std::string name;
    Outcome out;
  };
  std::vector<Row> rows;

  double lyapunov_worst = 0.0;
  rows.push_back({"1. oracle equivalence", criterion1_and_4(lyapunov_worst)});
  rows.push_back({"2. step-size certification", criterion2()});
  rows.push_back({"3. gradient correctness", criterion3()});
  {
    std::ostringstream os;
    os << "worst Lyapunov increase " << lyapunov_worst << " (slack 1e-12), over every solve in #1";
    rows.push_back({"4. Lyapunov monotonicity", {lyapunov_worst <= 1e-12, true, os.str()}});
  }
  rows.push_back({"5. gamma tradeoff", criterion5()});
  rows.push_back({"6. synchronous reduction", criterion6()});
  rows.push_back({"7. model-gap bound", criterion7()});
  rows.push_back({"8. activation sweep", criterion8()});
  rows.push_back({"9. outage fallback", criterion9()});
  rows.push_back({"10. step-size violation note", criterion10()});
  rows.push_back({"11. determinism", criterion11()});

  int failed = 0;
  for (const Row& r : rows) {
    const char* tag = !r.out.gate ? "note" : (r.out.pass ? "PASS" : "FAIL");
    std::printf("[%s] %s: %s\n", tag, r.name.c_str(), r.out.detail.c_str());
    if (r.out.gate && !r.out.pass) ++failed;
  }
  std::printf("%d/%zu gated criteria passed\n", static_cast<int>(rows.size()) - 1 - failed,
              rows.size() - 1);
  return failed == 0 ? 0 : 1;
}
