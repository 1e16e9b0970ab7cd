// gridvolt: feeder voltage-control experiments from scenario files.
#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gridvolt/scenario.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace gridvolt;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitNotConverged = 2;
constexpr int kExitInputError = 3;
constexpr int kExitNumerical = 4;

struct Overrides {
  double gamma = -1, alpha = -1, beta = -1, activation = -1, tol = -1;
  long max_iters = -1;
  long long seed = -1;
  std::string strategy;
};

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

// Overrides are applied to the raw document so step-size resolution and
// seed-dependent profile generation see the final values.
Scenario load_scenario(const std::string& path, const Overrides& ov) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open scenario " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  json doc;
  try {
    doc = json::parse(ss.str());
  } catch (const json::exception& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
  if (ov.gamma >= 0) doc["gamma"] = ov.gamma;
  if (ov.alpha >= 0) doc["alpha"] = ov.alpha;
  if (ov.beta >= 0) doc["beta"] = ov.beta;
  if (ov.tol >= 0) doc["tol"] = ov.tol;
  if (ov.max_iters >= 0) doc["max_iters"] = ov.max_iters;
  if (ov.seed >= 0) doc["seed"] = static_cast<std::uint64_t>(ov.seed);
  if (!ov.strategy.empty()) doc["strategy"] = ov.strategy;
  if (ov.activation >= 0) {
    if (!doc.contains("comm")) doc["comm"] = json::object();
    doc["comm"]["activation_prob"] = ov.activation;
  }
  return scenario_from_json_text(doc.dump(), fs::path(path).parent_path().string(), path);
}

int worker_count(std::size_t tasks) {
  unsigned n = std::thread::hardware_concurrency();
  if (n == 0) n = 1;
  if (const char* env = std::getenv("GRIDVOLT_THREADS")) {
    const long v = std::atol(env);
    if (v >= 1) n = static_cast<unsigned>(v);
  }
  return static_cast<int>(std::min<std::size_t>(n, tasks));
}

void run_parallel(std::size_t n_tasks, const std::function<void(std::size_t)>& task) {
  const int workers = worker_count(n_tasks);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n_tasks; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next.fetch_add(1); i < n_tasks; i = next.fetch_add(1)) task(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

int cmd_solve_static(const std::string& scenario_path, const Overrides& ov,
                     const std::string& out_dir) {
  Scenario sc = load_scenario(scenario_path, ov);
  if (sc.alpha_exceeds_bound) {
    std::cout << "warning: alpha " << fmt(sc.alpha) << " exceeds the certified bound "
              << fmt(sc.alpha_bound) << "\n";
  }
  if (sc.beta_exceeds_bound) {
    std::cout << "warning: beta " << fmt(sc.beta) << " exceeds the certified bound "
              << fmt(sc.beta_bound) << "\n";
  }
  const HvcProblem p = static_problem_at(sc, 0);
  ControlConfig cfg;
  cfg.alpha = sc.alpha;
  cfg.beta = sc.beta;
  cfg.theta = sc.theta;
  cfg.tol = sc.tol;
  cfg.max_iters = sc.max_iters;
  cfg.trace_every = std::max(1L, sc.max_iters / 100000);

  const SolveResult res = solve_static(p, cfg, {}, sc.initial_q);
  if (!out_dir.empty()) write_solve_results(res, sc.config_echo, out_dir, sc.round_seconds);

  std::cout << "status: "
            << (res.status == SolveStatus::converged  ? "converged"
                : res.status == SolveStatus::diverged ? "diverged"
                                                      : "max_iters")
            << "\niterations: " << res.iterations << "\nmismatch: " << fmt(res.final_mismatch)
            << "\nresiduals: r_v=" << fmt(res.final_residuals.r_v)
            << " r_q=" << fmt(res.final_residuals.r_q)
            << " r_lambda=" << fmt(res.final_residuals.r_lambda) << "\n";
  if (res.status == SolveStatus::converged) return kExitOk;
  return res.status == SolveStatus::diverged ? kExitNumerical : kExitNotConverged;
}

int cmd_sweep_gamma(const std::string& scenario_path, const Overrides& ov,
                    std::vector<double> gammas, const std::string& out_dir) {
  if (gammas.empty()) gammas = {0.017, 0.1, 0.5, 1.0, 5.0};
  std::vector<double> mismatch(gammas.size());
  std::vector<Scenario> scenarios;
  scenarios.reserve(gammas.size());
  for (double g : gammas) {
    Overrides o = ov;
    o.gamma = g;
    o.alpha = 1.0;  // steps are irrelevant to the reference solve, and
    o.beta = 1.0;   // gamma = 0 has no certified bounds to auto-resolve
    scenarios.push_back(load_scenario(scenario_path, o));
  }
  run_parallel(gammas.size(), [&](std::size_t i) {
    const HvcProblem p = static_problem_at(scenarios[i], 0);
    const QpSolution sol = reference_qp_solve(p);
    mismatch[i] = (sol.v - p.mu).norm();
  });

  std::ostringstream csv;
  csv << "gamma,mismatch_norm\n";
  for (std::size_t i = 0; i < gammas.size(); ++i) {
    csv << fmt(gammas[i]) << ',' << fmt(mismatch[i]) << '\n';
    std::cout << "gamma=" << fmt(gammas[i]) << " mismatch=" << fmt(mismatch[i]) << "\n";
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "sweep_gamma.csv", std::ios::binary);
    out << csv.str();
    if (!out) throw std::runtime_error("cannot write sweep_gamma.csv");
  }
  return kExitOk;
}

// Rounds until the mismatch stays within tol of the reference optimum, -1 if
// that never happens within the budget.
long rounds_to_tolerance(const std::vector<double>& trace, double mm_star, double tol) {
  long k = static_cast<long>(trace.size());
  for (long i = static_cast<long>(trace.size()) - 1; i >= 0; --i) {
    if (std::abs(trace[i] - mm_star) <= tol) k = i;
    else break;
  }
  return k == static_cast<long>(trace.size()) ? -1 : k + 1;  // 1-based round count
}

std::vector<double> activation_trial(const Scenario& base, double rate, std::uint64_t seed,
                                     long budget) {
  Scenario sc = base;
  sc.comm.activation_prob = rate;
  sc.seed = seed;
  sc.comm.seed = seed;

  SimConfig cfg;
  cfg.ctrl.alpha = sc.alpha;
  cfg.ctrl.beta = sc.beta;
  cfg.ctrl.theta = sc.theta;
  cfg.gamma = sc.gamma;
  cfg.mu = sc.mu;
  cfg.strategy = Strategy::hvc;
  cfg.meas_noise_std = sc.meas_noise_std;

  const TimestepInputs in = assemble_timestep(sc, 0);
  std::unique_ptr<Plant> plant;
  if (sc.plant == PlantKind::linear) {
    plant = std::make_unique<LinearPlant>(sc.bbus, in.w_lin);
  } else {
    plant = std::make_unique<AcPlant>(sc.feeder);
  }
  HvcSimulator sim(sc.bbus, cfg, sc.comm, std::move(plant));
  sim.plant().set_operating_point(in.p_net, in.q_load, in.w_lin);
  sim.set_limits(in.q_lo, in.q_hi);
  sim.initialize(sc.initial_q);

  std::vector<double> trace;
  trace.reserve(budget);
  for (long k = 0; k < budget; ++k) {
    sim.run_round();
    trace.push_back(sim.mismatch());
  }
  return trace;
}

int cmd_sweep_activation(const std::string& scenario_path, const Overrides& ov,
                         std::vector<double> rates, int n_seeds, double tol,
                         const std::string& out_dir) {
  if (rates.empty()) rates = {0.1, 0.25, 0.5, 1.0};
  std::sort(rates.begin(), rates.end());
  const Scenario base = load_scenario(scenario_path, ov);

  const HvcProblem p0 = static_problem_at(base, 0);
  const QpSolution ref = reference_qp_solve(p0);
  const double mm_star = (ref.v - p0.mu).norm();

  const std::vector<double> sync = activation_trial(base, 1.0, base.seed, base.max_iters);
  const long sync_rounds = rounds_to_tolerance(sync, mm_star, tol);
  if (sync_rounds < 0) {
    std::cerr << "synchronous run did not reach tolerance within " << base.max_iters
              << " rounds\n";
    return kExitNotConverged;
  }
  const long budget = 12 * sync_rounds;

  struct Trial {
    double rate;
    std::uint64_t seed;
    long rounds = -1;
  };
  std::vector<Trial> trials;
  for (double r : rates) {
    for (int s = 0; s < n_seeds; ++s) {
      trials.push_back(Trial{r, base.seed + 1000 * static_cast<std::uint64_t>(s) + 1, -1});
    }
  }
  run_parallel(trials.size(), [&](std::size_t i) {
    const std::vector<double> tr = activation_trial(base, trials[i].rate, trials[i].seed, budget);
    trials[i].rounds = rounds_to_tolerance(tr, mm_star, tol);
  });

  std::ostringstream csv;
  csv << "rate,median_rounds,min_rounds,max_rounds,n_converged,n_seeds,sync_rounds\n";
  for (double r : rates) {
    std::vector<long> conv;
    for (const Trial& t : trials) {
      if (t.rate == r && t.rounds >= 0) conv.push_back(t.rounds);
    }
    std::sort(conv.begin(), conv.end());
    const long med = conv.empty() ? -1 : conv[conv.size() / 2];
    const long lo = conv.empty() ? -1 : conv.front();
    const long hi = conv.empty() ? -1 : conv.back();
    csv << fmt(r) << ',' << med << ',' << lo << ',' << hi << ',' << conv.size() << ','
        << n_seeds << ',' << sync_rounds << '\n';
    std::cout << "rate=" << fmt(r) << " median_rounds=" << med << " converged=" << conv.size()
              << "/" << n_seeds << "\n";
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream out(fs::path(out_dir) / "sweep_activation.csv", std::ios::binary);
    out << csv.str();
    if (!out) throw std::runtime_error("cannot write sweep_activation.csv");
  }
  return kExitOk;
}

int cmd_simulate(const std::string& scenario_path, const Overrides& ov,
                 const std::string& strategy_arg, bool validate, const std::string& out_dir) {
  Overrides o = ov;
  const bool compare = strategy_arg == "compare";
  if (!compare && !strategy_arg.empty()) o.strategy = strategy_arg;
  const Scenario sc = load_scenario(scenario_path, o);

  RunOptions opt;
  opt.validate_lindistflow = validate;

  auto report_gaps = [&](const SimulationResult& res, const std::string& label) {
    if (!validate) return;
    double worst = 0.0;
    for (std::size_t t = 0; t < res.lin_gaps.size(); ++t) {
      std::cout << label << "t=" << t << " max|v_ac - v_lin|=" << fmt(res.lin_gaps[t]) << "\n";
      worst = std::max(worst, res.lin_gaps[t]);
    }
    std::cout << label << "worst linear-model gap: " << fmt(worst) << "\n";
  };

  if (!compare) {
    const SimulationResult res = run_scenario(sc, opt);
    if (!out_dir.empty()) write_results(res, sc.config_echo, out_dir);
    report_gaps(res, "");
    std::cout << "rounds: " << res.rounds.size()
              << "\nfinal mismatch: " << fmt(res.rounds.back().mismatch) << "\n";
    return kExitOk;
  }

  const std::vector<std::pair<std::string, Strategy>> runs = {
      {"hvc", Strategy::hvc},
      {"distributed", Strategy::distributed_only},
      {"none", Strategy::no_control}};
  std::vector<SimulationResult> results(runs.size());
  run_parallel(runs.size(), [&](std::size_t i) { results[i] = run_scenario(sc, runs[i].second, opt); });

  std::ostringstream csv;
  csv << "t,mismatch_hvc,mismatch_distributed,mismatch_none,headroom_total\n";
  for (int t = 0; t < sc.timesteps; ++t) {
    csv << t;
    for (const SimulationResult& r : results) csv << ',' << fmt(r.timesteps[t].mean_mismatch);
    csv << ',' << fmt(results[0].timesteps[t].headroom_total) << '\n';
  }
  for (std::size_t i = 0; i < runs.size(); ++i) {
    if (!out_dir.empty()) {
      write_results(results[i], sc.config_echo, (fs::path(out_dir) / runs[i].first).string());
    }
    report_gaps(results[i], runs[i].first + ": ");
    std::cout << runs[i].first << " final mismatch: " << fmt(results[i].rounds.back().mismatch)
              << "\n";
  }
  if (!out_dir.empty()) {
    std::ofstream out(fs::path(out_dir) / "comparison.csv", std::ios::binary);
    out << csv.str();
    if (!out) throw std::runtime_error("cannot write comparison.csv");
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hybrid volt/VAR control experiments on radial feeders"};
  app.require_subcommand(1);

  std::string scenario_path, out_dir, strategy;
  Overrides ov;
  bool validate = false;
  std::vector<double> gammas, rates;
  int n_seeds = 20;
  double act_tol = 1e-5;

  auto add_common = [&](CLI::App* cmd, bool with_steps = true) {
    cmd->add_option("--scenario", scenario_path, "scenario JSON file")->required();
    cmd->add_option("--out", out_dir, "output directory");
    cmd->add_option("--seed", ov.seed, "seed override");
    if (with_steps) {
      cmd->add_option("--gamma", ov.gamma, "importance factor override");
      cmd->add_option("--alpha", ov.alpha, "primal step override");
      cmd->add_option("--beta", ov.beta, "dual step override");
      cmd->add_option("--tol", ov.tol, "tolerance override");
      cmd->add_option("--max-iters", ov.max_iters, "iteration budget override");
      cmd->add_option("--activation", ov.activation, "activation probability override");
    }
  };

  CLI::App* solve = app.add_subcommand("solve-static", "run the PPD solver on timestep 0");
  add_common(solve);

  CLI::App* sg = app.add_subcommand("sweep-gamma", "reference optimum per importance factor");
  add_common(sg);
  sg->add_option("--gammas", gammas, "gamma grid")->delimiter(',');

  CLI::App* sa = app.add_subcommand("sweep-activation", "rounds-to-tolerance per activation rate");
  add_common(sa);
  sa->add_option("--rates", rates, "activation rates")->delimiter(',');
  sa->add_option("--seeds", n_seeds, "seeds per rate");
  sa->add_option("--act-tol", act_tol, "mismatch tolerance for convergence");

  CLI::App* sim = app.add_subcommand("simulate", "online A-HVC simulation over the profiles");
  add_common(sim);
  sim->add_option("--strategy", strategy, "hvc|distributed|none|compare");
  sim->add_flag("--validate-lindistflow", validate, "print per-timestep max|v_ac - v_lin|");

  CLI11_PARSE(app, argc, argv);

  try {
    if (solve->parsed()) return cmd_solve_static(scenario_path, ov, out_dir);
    if (sg->parsed()) return cmd_sweep_gamma(scenario_path, ov, gammas, out_dir);
    if (sa->parsed()) return cmd_sweep_activation(scenario_path, ov, rates, n_seeds, act_tol, out_dir);
    if (sim->parsed()) return cmd_simulate(scenario_path, ov, strategy, validate, out_dir);
  } catch (const std::invalid_argument& e) {
    std::cerr << "input error: " << e.what() << "\n";
    return kExitInputError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumerical;
  }
  return kExitInputError;
}
