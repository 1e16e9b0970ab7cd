#include "gridvolt/sim.hpp"

#include <cmath>
#include <stdexcept>

namespace gridvolt {

std::pair<double, double> var_limits_update(double rating_kva, double p_gen_kw,
                                            double s_base_va) {
  if (rating_kva < 0) throw std::invalid_argument("var_limits_update: negative rating");
  if (p_gen_kw < 0) throw std::invalid_argument("var_limits_update: negative generation");
  if (p_gen_kw > rating_kva) {
    throw std::invalid_argument("var_limits_update: generation exceeds inverter rating");
  }
  const double head_kvar =
      std::sqrt(std::max(0.0, rating_kva * rating_kva - p_gen_kw * p_gen_kw));
  const double head_pu = head_kvar * 1000.0 / s_base_va;
  return {-head_pu, head_pu};
}

std::vector<char> activation_draw(Rng& rng, double prob, int n_buses) {
  if (prob < 0.0 || prob > 1.0) throw std::invalid_argument("activation probability not in [0,1]");
  std::vector<char> active(n_buses);
  for (int j = 0; j < n_buses; ++j) active[j] = rng.bernoulli(prob) ? 1 : 0;
  return active;
}

LinearPlant::LinearPlant(std::shared_ptr<const BbusMatrix> b, Vec w)
    : b_(std::move(b)), w_(std::move(w)) {
  if (w_.size() != b_->size()) throw std::invalid_argument("linear plant: dimension mismatch");
}

const Vec& LinearPlant::apply_control(const Vec& q_ctrl) {
  v_ = b_->solve(q_ctrl + w_);
  return v_;
}

AcPlant::AcPlant(FeederModel model) : model_(std::move(model)) {
  model_.require_radial("ac plant");
  const int n = model_.n_controlled();
  p_net_ = Vec::Zero(n);
  q_load_ = Vec::Zero(n);
}

void AcPlant::set_operating_point(const Vec& p_net, const Vec& q_load, const Vec&) {
  p_net_ = p_net;
  q_load_ = q_load;
}

const Vec& AcPlant::apply_control(const Vec& q_ctrl) {
  Injection inj;
  inj.p = p_net_;
  inj.q = q_ctrl - q_load_;
  last_ = ac_power_flow(model_, inj, model_.v0());
  v_ = last_.v_mag;
  return v_;
}

HvcSimulator::HvcSimulator(std::shared_ptr<const BbusMatrix> b, SimConfig cfg, CommModel comm,
                           std::unique_ptr<Plant> plant)
    : b_(std::move(b)),
      cfg_(std::move(cfg)),
      comm_(std::move(comm)),
      plant_(std::move(plant)),
      rng_(comm_.seed) {
  const int n = b_->size();
  if (cfg_.mu.size() != n) throw std::invalid_argument("simulator: mu dimension mismatch");
  if (!(cfg_.ctrl.alpha > 0) || !(cfg_.ctrl.beta > 0)) {
    throw std::invalid_argument("simulator: step sizes must be positive");
  }
  if (cfg_.ctrl.theta < 0) throw std::invalid_argument("simulator: theta must be nonnegative");
  lo_ = Vec::Constant(n, -1e30);
  hi_ = Vec::Constant(n, 1e30);
  nbrs_.resize(n);
  for (int j = 0; j < n; ++j) {
    for (const auto& [i, coeff] : b_->row(j)) {
      (void)coeff;
      if (i != j) nbrs_[j].push_back(NeighborSlot{i});
    }
  }
}

void HvcSimulator::set_limits(Vec lo, Vec hi) {
  const int n = b_->size();
  if (lo.size() != n || hi.size() != n) throw std::invalid_argument("set_limits: dimension");
  for (int j = 0; j < n; ++j) {
    if (!(lo[j] <= hi[j])) throw std::invalid_argument("set_limits: lo > hi");
  }
  lo_ = std::move(lo);
  hi_ = std::move(hi);
  if (initialized_) {
    // inverters cannot hold a setting outside their physical capability
    for (int j = 0; j < n; ++j) q_[j] = clamp_box(q_[j], lo_[j], hi_[j]);
  }
}

void HvcSimulator::initialize(const Vec& q0) {
  const int n = b_->size();
  if (q0.size() != n) throw std::invalid_argument("initialize: dimension mismatch");
  q_.resize(n);
  for (int j = 0; j < n; ++j) q_[j] = clamp_box(q0[j], lo_[j], hi_[j]);
  if (cfg_.strategy == Strategy::no_control) q_ = Vec::Zero(n);
  lam_ = Vec::Zero(n);
  vmeas_ = plant_->apply_control(q_);
  v_ = vmeas_;
  w_.resize(n);
  for (int j = 0; j < n; ++j) {
    w_[j] = b_->row_dot(j, [&](int i) { return vmeas_[i]; }) - q_[j];
  }
  for (int j = 0; j < n; ++j) {
    for (NeighborSlot& s : nbrs_[j]) {
      s.lambda = 0.0;
      s.v = v_[s.bus];
      s.v_meas = vmeas_[s.bus];
      s.stamp = -1;
    }
  }
  pending_.clear();
  round_ = 0;
  initialized_ = true;
}

bool HvcSimulator::in_outage(int bus_index) const {
  const int bus_id = b_->bus_ids()[bus_index];
  for (const OutageWindow& ow : comm_.outages) {
    if (round_ < ow.start || round_ >= ow.end) continue;
    if (ow.buses.empty()) return true;
    for (int id : ow.buses) {
      if (id == bus_id) return true;
    }
  }
  return false;
}

double HvcSimulator::row_dot_cached(int j, double own, double NeighborSlot::*field) const {
  double acc = 0.0;
  std::size_t s = 0;
  for (const auto& [i, coeff] : b_->row(j)) {
    const double value = i == j ? own : nbrs_[j][s++].*field;
    acc += coeff * value;
  }
  return acc;
}

int HvcSimulator::draw_delay() {
  if (comm_.delay.prob <= 0.0 || comm_.delay.max_rounds <= 0) return 0;
  if (!rng_.bernoulli(comm_.delay.prob)) return 0;
  return comm_.delay.max_rounds == 1 ? 1 : rng_.uniform_int(1, comm_.delay.max_rounds);
}

void HvcSimulator::deliver_pending() {
  if (pending_.empty()) return;
  std::vector<PendingMessage> keep;
  keep.reserve(pending_.size());
  for (const PendingMessage& m : pending_) {
    if (m.deliver_round > round_) {
      keep.push_back(m);
      continue;
    }
    NeighborSlot& slot = nbrs_[m.to][m.slot];
    const bool fresh = m.stamp > slot.stamp;
    const bool in_bound = m.stamp >= round_ - comm_.delay.max_rounds;
    if (fresh && in_bound) {
      if (m.phase2) {
        slot.v = m.v;
        slot.v_meas = m.v_meas;
      } else {
        slot.lambda = m.lambda;
      }
      slot.stamp = m.stamp;
    }
  }
  pending_ = std::move(keep);
}

void HvcSimulator::run_round() {
  if (!initialized_) throw std::logic_error("simulator: run_round before initialize");
  const int n = b_->size();
  const ControlConfig& c = cfg_.ctrl;

  deliver_pending();

  // activation draws in bus-id order, then outage demotion
  const std::vector<char> bern = activation_draw(rng_, comm_.activation_prob, n);
  effective_.assign(n, 0);
  for (int j = 0; j < n; ++j) effective_[j] = bern[j] && !in_outage(j) ? 1 : 0;

  // Phase 1: active buses broadcast lambda over usable links
  for (int j = 0; j < n; ++j) {
    if (!effective_[j]) continue;
    for (std::size_t s = 0; s < nbrs_[j].size(); ++s) {
      NeighborSlot& slot = nbrs_[j][s];
      if (!effective_[slot.bus]) continue;
      const int d = draw_delay();
      if (d == 0) {
        slot.lambda = lam_[slot.bus];
        slot.stamp = round_;
      } else if (comm_.delay.queue) {
        pending_.push_back(PendingMessage{round_ + d, j, static_cast<int>(s), false,
                                          lam_[slot.bus], 0.0, 0.0, round_});
      }
    }
  }

  // (AS1) primal voltage estimate at active buses, frozen elsewhere
  Vec v_next = v_;
  for (int j = 0; j < n; ++j) {
    if (!effective_[j]) continue;
    const double bl = row_dot_cached(j, lam_[j], &NeighborSlot::lambda);
    v_next[j] = c.theta > 0.0 ? v_update_prox(cfg_.mu[j], c.theta, v_[j], bl)
                              : v_update(cfg_.mu[j], bl);
  }
  v_ = v_next;

  // (AS2) local VAR update from the bus's own measurement
  Vec q_next(n);
  for (int j = 0; j < n; ++j) {
    switch (cfg_.strategy) {
      case Strategy::hvc:
        q_next[j] = q_update(q_[j], c.alpha, cfg_.gamma, vmeas_[j], cfg_.mu[j], lam_[j], lo_[j],
                             hi_[j]);
        break;
      case Strategy::distributed_only:
        q_next[j] = effective_[j] ? q_update(q_[j], c.alpha, cfg_.gamma, vmeas_[j], cfg_.mu[j],
                                             lam_[j], lo_[j], hi_[j])
                                  : q_[j];
        break;
      case Strategy::no_control:
        q_next[j] = 0.0;
        break;
    }
  }
  q_ = q_next;

  // plant resolve and fresh local measurements
  vmeas_ = plant_->apply_control(q_);
  if (cfg_.meas_noise_std > 0.0) {
    for (int j = 0; j < n; ++j) vmeas_[j] += rng_.normal(0.0, cfg_.meas_noise_std);
  }

  // Phase 2: active buses broadcast (v, v_meas) over usable links
  for (int j = 0; j < n; ++j) {
    if (!effective_[j]) continue;
    for (std::size_t s = 0; s < nbrs_[j].size(); ++s) {
      NeighborSlot& slot = nbrs_[j][s];
      if (!effective_[slot.bus]) continue;
      const int d = draw_delay();
      if (d == 0) {
        slot.v = v_[slot.bus];
        slot.v_meas = vmeas_[slot.bus];
        slot.stamp = round_;
      } else if (comm_.delay.queue) {
        pending_.push_back(PendingMessage{round_ + d, j, static_cast<int>(s), true, 0.0,
                                          v_[slot.bus], vmeas_[slot.bus], round_});
      }
    }
  }

  // feedback w from neighboring measurements, then (AS3); both frozen at
  // inactive buses
  for (int j = 0; j < n; ++j) {
    if (!effective_[j]) continue;
    const double s_meas = row_dot_cached(j, vmeas_[j], &NeighborSlot::v_meas);
    const double s_v = row_dot_cached(j, v_[j], &NeighborSlot::v);
    w_[j] = s_meas - q_[j];
    lam_[j] = lambda_update(lam_[j], c.beta, s_v, s_meas);
  }

  if (!v_.allFinite() || !q_.allFinite() || !lam_.allFinite() || !vmeas_.allFinite()) {
    throw std::runtime_error("simulator: non-finite agent state (instability)");
  }
  ++round_;
}

double HvcSimulator::mismatch() const { return (vmeas_ - cfg_.mu).norm(); }

}  // namespace gridvolt
