#include "gridvolt/feeder.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace gridvolt {

namespace {

using json = nlohmann::json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("feeder: " + msg); }

}  // namespace

void FeederModel::require_radial(const char* op) const {
  if (!is_radial_) {
    throw std::invalid_argument(std::string(op) + ": feeder is not a tree rooted at bus 0");
  }
}

FeederModel build_feeder(const FeederSpec& spec) {
  const int n = static_cast<int>(spec.bus_ids.size());
  if (n < 2) fail("need at least the substation and one controllable bus");

  std::vector<int> ids = spec.bus_ids;
  std::sort(ids.begin(), ids.end());
  for (int i = 0; i < n; ++i) {
    if (ids[i] != i) fail("bus ids must be 0..N with no gaps (missing or duplicate id)");
  }

  if (!(spec.v0_pu > 0.0) || !std::isfinite(spec.v0_pu)) fail("v0_pu must be positive");
  if (spec.bases) {
    if (!(spec.bases->s_base_va > 0.0) || !(spec.bases->v_base_v > 0.0)) {
      fail("bases must be positive");
    }
  }

  FeederModel m;
  m.n_buses_ = n;
  m.v0_ = spec.v0_pu;
  if (spec.bases) m.bases_ = *spec.bases;

  std::set<std::pair<int, int>> seen;
  for (const LineSpec& ls : spec.lines) {
    if (ls.from < 0 || ls.from >= n || ls.to < 0 || ls.to >= n) fail("line endpoint out of range");
    if (ls.from == ls.to) fail("line connects a bus to itself");
    auto key = std::minmax(ls.from, ls.to);
    if (!seen.insert(key).second) {
      std::ostringstream os;
      os << "duplicate line between buses " << key.first << " and " << key.second;
      fail(os.str());
    }

    const bool ohm = ls.r_ohm.has_value() || ls.x_ohm.has_value();
    const bool pu = ls.r_pu.has_value() || ls.x_pu.has_value();
    if (ohm && pu) fail("line mixes ohm and per-unit impedance");
    if (!ohm && !pu) fail("line missing impedance");

    double r, x;
    if (ohm) {
      if (!ls.r_ohm || !ls.x_ohm) fail("line needs both r_ohm and x_ohm");
      if (!spec.bases) fail("ohm line impedance requires bases");
      const double zb = spec.bases->z_base_ohm();
      r = *ls.r_ohm / zb;
      x = *ls.x_ohm / zb;
    } else {
      if (!ls.r_pu || !ls.x_pu) fail("line needs both r_pu and x_pu");
      r = *ls.r_pu;
      x = *ls.x_pu;
    }
    if (!(x > 0.0) || !std::isfinite(x)) {
      std::ostringstream os;
      os << "line (" << ls.from << "," << ls.to << ") has nonpositive reactance";
      fail(os.str());
    }
    if (r < 0.0 || !std::isfinite(r)) fail("negative line resistance");
    m.lines_.push_back(Line{ls.from, ls.to, r, x});
  }

  // connectivity via BFS from the root
  std::vector<std::vector<int>> adj_line(n);
  for (int li = 0; li < static_cast<int>(m.lines_.size()); ++li) {
    adj_line[m.lines_[li].from].push_back(li);
    adj_line[m.lines_[li].to].push_back(li);
  }
  std::vector<int> parent(n, -2), line_to_parent(n, -1), order;
  parent[0] = -1;
  std::queue<int> q;
  q.push(0);
  while (!q.empty()) {
    const int u = q.front();
    q.pop();
    order.push_back(u);
    for (int li : adj_line[u]) {
      const Line& l = m.lines_[li];
      const int v = l.from == u ? l.to : l.from;
      if (parent[v] == -2) {
        parent[v] = u;
        line_to_parent[v] = li;
        q.push(v);
      }
    }
  }
  if (static_cast<int>(order.size()) != n) fail("graph is not connected");

  m.is_radial_ = static_cast<int>(m.lines_.size()) == n - 1;
  if (m.is_radial_) {
    m.parent_ = parent;
    m.line_to_parent_ = line_to_parent;
    m.bfs_order_ = order;
    m.children_.assign(n, {});
    for (int v = 1; v < n; ++v) m.children_[parent[v]].push_back(v);
  }
  return m;
}

FeederSpec make_chain_spec(int n_buses, double r_ohm, double x_ohm, const Bases& bases,
                           double v0_pu) {
  FeederSpec spec;
  spec.v0_pu = v0_pu;
  spec.bases = bases;
  for (int i = 0; i < n_buses; ++i) spec.bus_ids.push_back(i);
  for (int i = 1; i < n_buses; ++i) {
    LineSpec ls;
    ls.from = i - 1;
    ls.to = i;
    ls.r_ohm = r_ohm;
    ls.x_ohm = x_ohm;
    spec.lines.push_back(ls);
  }
  return spec;
}

FeederSpec feeder_spec_from_json_text(const std::string& text, const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument("feeder: cannot parse " + origin + ": " + e.what());
  }
  FeederSpec spec;
  try {
    if (!doc.contains("buses") || !doc.contains("lines")) {
      fail(origin + ": missing buses or lines");
    }
    for (const auto& b : doc.at("buses")) spec.bus_ids.push_back(b.at("id").get<int>());
    for (const auto& l : doc.at("lines")) {
      LineSpec ls;
      ls.from = l.at("from").get<int>();
      ls.to = l.at("to").get<int>();
      if (l.contains("r_ohm")) ls.r_ohm = l.at("r_ohm").get<double>();
      if (l.contains("x_ohm")) ls.x_ohm = l.at("x_ohm").get<double>();
      if (l.contains("r_pu")) ls.r_pu = l.at("r_pu").get<double>();
      if (l.contains("x_pu")) ls.x_pu = l.at("x_pu").get<double>();
      spec.lines.push_back(ls);
    }
    spec.v0_pu = doc.value("v0_pu", 1.0);
    if (doc.contains("bases")) {
      Bases b;
      b.s_base_va = doc.at("bases").at("s_base_va").get<double>();
      b.v_base_v = doc.at("bases").at("v_base_v").get<double>();
      spec.bases = b;
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument("feeder: bad field in " + origin + ": " + e.what());
  }
  return spec;
}

FeederModel load_feeder(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("feeder: cannot open file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return build_feeder(feeder_spec_from_json_text(ss.str(), path));
}

int BbusMatrix::index_of(int bus_id) const {
  for (int i = 0; i < n_; ++i) {
    if (bus_ids_[i] == bus_id) return i;
  }
  return -1;
}

Vec BbusMatrix::apply(const Vec& x) const {
  Vec out(n_);
  for (int j = 0; j < n_; ++j) out[j] = row_dot(j, [&](int i) { return x[i]; });
  return out;
}

Vec BbusMatrix::solve(const Vec& rhs) const { return ldlt_.solve(rhs); }

Eigen::MatrixXd BbusMatrix::solve_dense(const Eigen::MatrixXd& rhs) const {
  return ldlt_.solve(rhs);
}

Eigen::MatrixXd BbusMatrix::inverse() const {
  Eigen::MatrixXd x = ldlt_.solve(Eigen::MatrixXd::Identity(n_, n_));
  const double err = (x * b_ - Eigen::MatrixXd::Identity(n_, n_)).cwiseAbs().maxCoeff();
  if (err >= 1e-10) {
    throw std::runtime_error("bbus: inverse check failed, ||XB - I||_max = " + std::to_string(err));
  }
  return x;
}

BbusMatrix BbusMatrix::from_dense(Eigen::MatrixXd b, std::vector<int> bus_ids) {
  const int n = static_cast<int>(b.rows());
  if (b.cols() != n || n == 0) throw std::invalid_argument("bbus: matrix must be square");
  if (static_cast<int>(bus_ids.size()) != n) {
    throw std::invalid_argument("bbus: bus id list does not match matrix size");
  }

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(b);
  if (eig.info() != Eigen::Success) {
    throw std::runtime_error("bbus: eigendecomposition failed (ill-conditioned feeder?)");
  }
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (!(lo > 0.0)) {
    throw std::runtime_error("bbus: matrix is not positive definite (min eigenvalue " +
                             std::to_string(lo) + ")");
  }

  BbusMatrix out;
  out.n_ = n;
  out.b_ = std::move(b);
  out.bus_ids_ = std::move(bus_ids);
  out.eta_tilde_ = lo;
  out.l_tilde_ = hi;

  // Nonzeros with a relative threshold so Kron fill-in noise does not create
  // phantom neighbors; diagonal always kept.
  const double thresh = 1e-12 * out.b_.cwiseAbs().maxCoeff();
  out.rows_.assign(n, {});
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      const double e = out.b_(j, i);
      if (i == j || std::abs(e) > thresh) out.rows_[j].emplace_back(i, e);
    }
  }

  out.ldlt_.compute(out.b_);
  if (out.ldlt_.info() != Eigen::Success) {
    throw std::runtime_error("bbus: factorization failed");
  }
  return out;
}

BbusMatrix build_bbus(const FeederModel& model) {
  const int n = model.n_controlled();
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(n, n);
  for (const Line& l : model.lines()) {
    const double wgt = 1.0 / l.x;
    const int i = l.from - 1;  // index -1 marks the removed root column
    const int j = l.to - 1;
    if (i >= 0) b(i, i) += wgt;
    if (j >= 0) b(j, j) += wgt;
    if (i >= 0 && j >= 0) {
      b(i, j) -= wgt;
      b(j, i) -= wgt;
    }
  }
  std::vector<int> ids(n);
  for (int k = 0; k < n; ++k) ids[k] = k + 1;
  return BbusMatrix::from_dense(std::move(b), std::move(ids));
}

BbusMatrix kron_reduce(const BbusMatrix& b, const std::vector<int>& keep_ids) {
  if (keep_ids.empty()) throw std::invalid_argument("kron_reduce: keep set is empty");

  std::vector<int> keep_idx;
  std::set<int> keep_set;
  for (int id : keep_ids) {
    const int idx = b.index_of(id);
    if (idx < 0) throw std::invalid_argument("kron_reduce: bus id not in matrix");
    if (!keep_set.insert(id).second) throw std::invalid_argument("kron_reduce: duplicate keep id");
    keep_idx.push_back(idx);
  }
  std::sort(keep_idx.begin(), keep_idx.end());
  std::vector<int> elim_idx;
  for (int i = 0; i < b.size(); ++i) {
    if (!std::binary_search(keep_idx.begin(), keep_idx.end(), i)) elim_idx.push_back(i);
  }

  const int nk = static_cast<int>(keep_idx.size());
  const int ne = static_cast<int>(elim_idx.size());
  std::vector<int> ids(nk);
  for (int a = 0; a < nk; ++a) ids[a] = b.bus_ids()[keep_idx[a]];

  if (ne == 0) return BbusMatrix::from_dense(b.dense(), ids);

  Eigen::MatrixXd bkk(nk, nk), bke(nk, ne), bee(ne, ne);
  for (int a = 0; a < nk; ++a) {
    for (int c = 0; c < nk; ++c) bkk(a, c) = b.entry(keep_idx[a], keep_idx[c]);
    for (int c = 0; c < ne; ++c) bke(a, c) = b.entry(keep_idx[a], elim_idx[c]);
  }
  for (int a = 0; a < ne; ++a) {
    for (int c = 0; c < ne; ++c) bee(a, c) = b.entry(elim_idx[a], elim_idx[c]);
  }

  Eigen::LLT<Eigen::MatrixXd> llt(bee);
  if (llt.info() != Eigen::Success) {
    throw std::runtime_error("kron_reduce: singular eliminated block (corrupted matrix)");
  }
  Eigen::MatrixXd reduced = bkk - bke * llt.solve(bke.transpose());
  reduced = 0.5 * (reduced + reduced.transpose().eval());  // symmetrize rounding noise
  return BbusMatrix::from_dense(std::move(reduced), std::move(ids));
}

}  // namespace gridvolt
