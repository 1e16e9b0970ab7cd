#pragma once

#include <complex>

#include "gridvolt/feeder.hpp"

namespace gridvolt {

// Per-unit net injections at the non-root buses (negative = consumption).
struct Injection {
  Vec p;
  Vec q;
};

// Voltage profile from solving B v = q + w. Residual checked to 1e-10.
Vec lindistflow_voltage(const BbusMatrix& b, const Vec& q, const Vec& w);

// Operating-condition vector w such that B v = q + w reproduces the
// LinDistFlow voltages under active injections p and zero controllable VAR:
// the substation boundary term plus r/x-weighted lossless downstream flows.
Vec build_operating_vector(const FeederModel& model, const Vec& p, double v0);

struct AcSolution {
  Vec v_mag;                     // non-root voltage magnitudes
  std::complex<double> s_root;   // complex power injected at the substation
  double max_balance_residual;   // worst per-bus complex power balance error
  double root_balance_residual;  // |s_root - (losses - sum of injections)|
  int sweeps;
};

// Exact AC power flow for radial feeders by backward-forward sweep.
// Throws std::runtime_error on non-convergence within the sweep budget.
AcSolution ac_power_flow(const FeederModel& model, const Injection& inj, double v0,
                         int max_sweeps = 200, double tol = 1e-12);

}  // namespace gridvolt
