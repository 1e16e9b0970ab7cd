#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "gridvolt/feeder.hpp"
#include "gridvolt/flow.hpp"
#include "gridvolt/ppd.hpp"
#include "gridvolt/rng.hpp"

namespace gridvolt {

// Rounds in [start, end); empty bus list means every bus is affected.
struct OutageWindow {
  long start = 0;
  long end = 0;
  std::vector<int> buses;
};

// A message drawn as delayed is dropped for the round (delay treated as link
// failure); with queue=true it is instead delivered after its delay and
// discarded once older than max_rounds.
struct DelayModel {
  double prob = 0.0;
  int max_rounds = 0;
  bool queue = false;
};

struct CommModel {
  double activation_prob = 1.0;
  std::vector<OutageWindow> outages;
  DelayModel delay;
  std::uint64_t seed = 0;
};

enum class Strategy { hvc, distributed_only, no_control };

// Symmetric VAR capability left by the inverter rating at the given active
// generation, converted to per-unit.
std::pair<double, double> var_limits_update(double rating_kva, double p_gen_kw,
                                            double s_base_va);

// Independent Bernoulli activation per bus, drawn in bus-id order.
std::vector<char> activation_draw(Rng& rng, double prob, int n_buses);

// Physical plant abstraction: applies the controller VAR and reports the
// measured voltage profile.
class Plant {
 public:
  virtual ~Plant() = default;
  virtual const Vec& apply_control(const Vec& q_ctrl) = 0;
  virtual const Vec& measurement() const = 0;
  virtual void set_operating_point(const Vec& p_net, const Vec& q_load, const Vec& w_lin) = 0;
  virtual bool is_linear() const = 0;
};

// LinDistFlow plant: v = X(q + w).
class LinearPlant : public Plant {
 public:
  LinearPlant(std::shared_ptr<const BbusMatrix> b, Vec w);
  const Vec& apply_control(const Vec& q_ctrl) override;
  const Vec& measurement() const override { return v_; }
  void set_operating_point(const Vec&, const Vec&, const Vec& w_lin) override { w_ = w_lin; }
  bool is_linear() const override { return true; }
  const Vec& w() const { return w_; }

 private:
  std::shared_ptr<const BbusMatrix> b_;
  Vec w_;
  Vec v_;
};

// Exact AC plant backed by the backward-forward sweep oracle.
class AcPlant : public Plant {
 public:
  AcPlant(FeederModel model);
  const Vec& apply_control(const Vec& q_ctrl) override;
  const Vec& measurement() const override { return v_; }
  void set_operating_point(const Vec& p_net, const Vec& q_load, const Vec&) override;
  bool is_linear() const override { return false; }
  const AcSolution& last_solution() const { return last_; }
  const FeederModel& model() const { return model_; }

 private:
  FeederModel model_;
  Vec p_net_, q_load_;
  Vec v_;
  AcSolution last_;
};

struct SimConfig {
  ControlConfig ctrl;  // alpha, beta, theta
  double gamma = 0.5;
  Vec mu;
  Strategy strategy = Strategy::hvc;
  int rounds_per_timestep = 30;
  double round_seconds = 2.0;
  double meas_noise_std = 0.0;
  bool record_per_bus = false;
};

struct RoundRecord {
  long round;
  double time_s;
  double mismatch;  // ||v_meas - mu||_2 after the round's plant resolve
};

struct TimestepRecord {
  int t;
  double mean_mismatch;
  double final_mismatch;
  double headroom_total;  // sum over buses of (q_hi - q_lo)
};

struct SimulationResult {
  std::vector<RoundRecord> rounds;
  std::vector<TimestepRecord> timesteps;
  std::vector<Vec> v_hist, q_hist, lambda_hist, vmeas_hist;  // per-bus when enabled
  std::vector<double> lin_gaps;  // per-timestep max|v_ac - v_lin|, when requested
  Vec final_v, final_q, final_lambda, final_vmeas;
  KktResiduals final_residuals;
  std::uint64_t seed = 0;
};

// Deterministic sequential round loop over per-bus agents with two-phase
// message exchange, Bernoulli activation, freezing of (v, w, lambda) at
// inactive buses and the always-on local q-update.
class HvcSimulator {
 public:
  HvcSimulator(std::shared_ptr<const BbusMatrix> b, SimConfig cfg, CommModel comm,
               std::unique_ptr<Plant> plant);

  // Box limits for the current timestep; re-clamps the applied VAR.
  void set_limits(Vec lo, Vec hi);

  // Applies q0 (clamped), measures, and seeds every neighbor cache as if a
  // synchronized exchange happened at commissioning time.
  void initialize(const Vec& q0);

  void run_round();

  long round() const { return round_; }
  double mismatch() const;
  const Vec& v() const { return v_; }
  const Vec& q() const { return q_; }
  const Vec& lambda() const { return lam_; }
  const Vec& w() const { return w_; }
  const Vec& v_meas() const { return vmeas_; }
  const Vec& q_lo() const { return lo_; }
  const Vec& q_hi() const { return hi_; }
  Plant& plant() { return *plant_; }
  const SimConfig& config() const { return cfg_; }

 private:
  struct NeighborSlot {
    int bus;  // matrix index of the neighbor
    double lambda = 0, v = 0, v_meas = 0;
    long stamp = -1;
  };
  struct PendingMessage {
    long deliver_round;
    int to;
    int slot;
    bool phase2;  // false: lambda payload, true: (v, v_meas) payload
    double lambda, v, v_meas;
    long stamp;
  };

  bool in_outage(int bus_index) const;
  double row_dot_cached(int j, double own, double NeighborSlot::*field) const;
  void deliver_pending();
  // One RNG draw per directed message; returns the assigned delay in rounds.
  int draw_delay();

  std::shared_ptr<const BbusMatrix> b_;
  SimConfig cfg_;
  CommModel comm_;
  std::unique_ptr<Plant> plant_;
  Rng rng_;

  Vec v_, q_, lam_, w_, vmeas_;
  Vec lo_, hi_;
  std::vector<std::vector<NeighborSlot>> nbrs_;
  std::vector<PendingMessage> pending_;
  std::vector<char> effective_;
  long round_ = 0;
  bool initialized_ = false;
};

}  // namespace gridvolt
