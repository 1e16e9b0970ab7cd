#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>

#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace gridvolt {

using Vec = Eigen::VectorXd;

struct Bases {
  double s_base_va = 1e6;
  double v_base_v = 12470.0;
  double z_base_ohm() const { return v_base_v * v_base_v / s_base_va; }
};

// Raw line description as read from input; impedance either in ohms
// (converted through the bases) or directly in per-unit.
struct LineSpec {
  int from = -1;
  int to = -1;
  std::optional<double> r_ohm, x_ohm;
  std::optional<double> r_pu, x_pu;
};

struct FeederSpec {
  std::vector<int> bus_ids;  // must be 0..N, 0 is the substation
  std::vector<LineSpec> lines;
  double v0_pu = 1.0;
  std::optional<Bases> bases;
};

struct Line {
  int from, to;  // bus ids
  double r, x;   // per-unit
};

// Validated radial (or, for the linear path only, meshed) feeder.
// Bus 0 is always the substation/reference.
class FeederModel {
 public:
  int n_buses() const { return n_buses_; }
  int n_controlled() const { return n_buses_ - 1; }
  const std::vector<Line>& lines() const { return lines_; }
  double v0() const { return v0_; }
  const Bases& bases() const { return bases_; }
  bool is_radial() const { return is_radial_; }

  // Tree accessors, valid only when is_radial().
  int parent(int bus) const { return parent_[bus]; }
  const std::vector<int>& children(int bus) const { return children_[bus]; }
  const Line& line_to_parent(int bus) const { return lines_[line_to_parent_[bus]]; }
  // Buses ordered root first, every parent before its children.
  const std::vector<int>& bfs_order() const { return bfs_order_; }

  void require_radial(const char* op) const;

 private:
  friend FeederModel build_feeder(const FeederSpec& spec);

  int n_buses_ = 0;
  std::vector<Line> lines_;
  double v0_ = 1.0;
  Bases bases_;
  bool is_radial_ = false;
  std::vector<int> parent_, line_to_parent_, bfs_order_;
  std::vector<std::vector<int>> children_;
};

FeederModel build_feeder(const FeederSpec& spec);

// JSON document I/O; schema documented in docs/formats.md.
FeederModel load_feeder(const std::string& path);
FeederSpec feeder_spec_from_json_text(const std::string& text, const std::string& origin);

// Uniform chain feeder 0-1-...-(n_buses-1) with identical segments in ohms.
FeederSpec make_chain_spec(int n_buses, double r_ohm, double x_ohm, const Bases& bases,
                           double v0_pu = 1.0);

// Reduced weighted graph Laplacian of the feeder (root row/column removed),
// with line weights 1/x. Symmetric positive definite by construction.
class BbusMatrix {
 public:
  int size() const { return n_; }
  const Eigen::MatrixXd& dense() const { return b_; }
  double entry(int i, int j) const { return b_(i, j); }
  // Extreme singular values (equal to the extreme eigenvalues for SPD B).
  double eta_tilde() const { return eta_tilde_; }
  double l_tilde() const { return l_tilde_; }
  // Original bus id for each matrix index.
  const std::vector<int>& bus_ids() const { return bus_ids_; }
  // Matrix index for a bus id, -1 if the bus is not represented.
  int index_of(int bus_id) const;

  // Nonzero entries of row j as (index, value), ascending index, diagonal
  // included. All per-bus sums in the solver and the simulator go through
  // this row structure so both paths share one arithmetic order.
  const std::vector<std::pair<int, double>>& row(int j) const { return rows_[j]; }

  template <class ValueOf>
  double row_dot(int j, ValueOf&& value_of) const {
    double acc = 0.0;
    for (const auto& [i, coeff] : rows_[j]) acc += coeff * value_of(i);
    return acc;
  }

  // B * x through the shared row structure.
  Vec apply(const Vec& x) const;

  // X * rhs with X = B^{-1}, via the cached factorization.
  Vec solve(const Vec& rhs) const;
  Eigen::MatrixXd solve_dense(const Eigen::MatrixXd& rhs) const;

  // Materialized inverse; verifies ||X*B - I||_max < 1e-10.
  Eigen::MatrixXd inverse() const;

  static BbusMatrix from_dense(Eigen::MatrixXd b, std::vector<int> bus_ids);

 private:
  int n_ = 0;
  Eigen::MatrixXd b_;
  std::vector<std::vector<std::pair<int, double>>> rows_;
  std::vector<int> bus_ids_;
  Eigen::LDLT<Eigen::MatrixXd> ldlt_;
  double eta_tilde_ = 0.0, l_tilde_ = 0.0;
};

BbusMatrix build_bbus(const FeederModel& model);

// Schur-complement elimination of all buses not in keep_ids (original ids).
BbusMatrix kron_reduce(const BbusMatrix& b, const std::vector<int>& keep_ids);

}  // namespace gridvolt
