#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gridvolt/feeder.hpp"
#include "gridvolt/ppd.hpp"
#include "gridvolt/sim.hpp"

namespace gridvolt {

struct ProfileRecord {
  double p_load_kw = 0.0;
  double q_load_kvar = 0.0;
  double p_gen_kw = 0.0;
};

// Dense per-timestep, per-bus series; bus ids 1..N (root carries no load).
class ProfileSeries {
 public:
  ProfileSeries() = default;
  ProfileSeries(int n_buses, int timesteps)
      : n_(n_buses), t_(timesteps), rows_(static_cast<std::size_t>(n_buses) * timesteps) {}

  static ProfileSeries constant(int n_buses, int timesteps, const ProfileRecord& rec);

  int n_buses() const { return n_; }
  int timesteps() const { return t_; }
  ProfileRecord& at(int t, int bus_id) { return rows_[index(t, bus_id)]; }
  const ProfileRecord& at(int t, int bus_id) const { return rows_[index(t, bus_id)]; }

 private:
  std::size_t index(int t, int bus_id) const;
  int n_ = 0, t_ = 0;
  std::vector<ProfileRecord> rows_;
};

// CSV with header t,bus,p_load_kw,q_load_kvar,p_gen_kw; every (t, bus) cell
// must be present exactly once.
ProfileSeries load_profiles(const std::string& path);
void write_profiles(const ProfileSeries& series, const std::string& path);

// Daily residential shape: midday solar bell, morning and evening load
// humps, per-bus multiplicative noise.
struct SyntheticProfileConfig {
  int timesteps = 1440;
  double minutes_per_step = 1.0;
  double homes_per_bus = 1.0;
  double solar_peak_kw = 3.5;  // per home
  double solar_start_h = 6.0;
  double solar_end_h = 18.0;
  double load_base_kw = 0.25;
  double load_morning_peak_kw = 0.35;
  double load_morning_h = 7.5;
  double load_morning_width_h = 1.5;
  double load_evening_peak_kw = 2.5;
  double load_evening_h = 19.0;
  double load_evening_width_h = 3.0;
  double power_factor = 0.95;
  double noise_std = 0.05;
};

ProfileSeries generate_daily_profiles(int n_buses, const SyntheticProfileConfig& cfg,
                                      std::uint64_t seed);

enum class PlantKind { ac, linear };

// Parsed and resolved experiment description. "auto" step sizes resolve to
// 50% of the certified bounds computed from the feeder spectrum.
struct Scenario {
  FeederModel feeder;
  std::shared_ptr<const BbusMatrix> bbus;

  Vec mu;
  double gamma = 0.5;
  double alpha = 0.0, beta = 0.0;
  bool alpha_auto = true, beta_auto = true;
  double alpha_bound = 0.0, beta_bound = 0.0;
  bool alpha_exceeds_bound = false, beta_exceeds_bound = false;
  double theta = 0.0;
  double tol = 1e-8;
  long max_iters = 200000;

  CommModel comm;
  Strategy strategy = Strategy::hvc;
  PlantKind plant = PlantKind::ac;
  int rounds_per_timestep = 30;
  int timesteps = 1;
  double round_seconds = 2.0;

  ProfileSeries profiles;
  Vec ratings_kva;   // empty when a direct box override is used
  Vec q_box_pu;      // symmetric box override, empty when ratings apply
  Vec initial_q;
  double meas_noise_std = 0.0;
  bool record_per_bus = false;
  std::uint64_t seed = 0;

  std::string config_echo;  // resolved configuration as compact JSON
};

Scenario parse_scenario(const std::string& path);
Scenario scenario_from_json_text(const std::string& text, const std::string& base_dir,
                                 const std::string& origin);

// Writes the resolved scenario as dir/scenario.json plus dir/profiles.csv;
// parsing the emitted file reproduces the scenario.
void write_scenario(const Scenario& sc, const std::string& dir);

// Per-unit inputs for one timestep.
struct TimestepInputs {
  Vec p_net, q_load, w_lin, q_lo, q_hi;
};

TimestepInputs assemble_timestep(const Scenario& sc, int t);
HvcProblem static_problem_at(const Scenario& sc, int t);

struct RunOptions {
  bool validate_lindistflow = false;
};

SimulationResult run_scenario(const Scenario& sc, const RunOptions& opt = {});
SimulationResult run_scenario(const Scenario& sc, Strategy strategy, const RunOptions& opt = {});

// trace.csv + summary.json, byte-stable given identical inputs.
void write_results(const SimulationResult& result, const std::string& config_echo,
                   const std::string& dir);
void write_solve_results(const SolveResult& result, const std::string& config_echo,
                         const std::string& dir, double round_seconds = 2.0);

}  // namespace gridvolt
