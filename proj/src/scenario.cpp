#include "gridvolt/scenario.hpp"

#include "gridvolt/flow.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace gridvolt {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("scenario: " + msg); }

double finite_or_fail(double x, const std::string& field) {
  if (!std::isfinite(x)) fail("field '" + field + "' is not finite");
  return x;
}

std::string fmt_double(double x) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", x);
  return buf;
}

constexpr double kUnlimitedBox = 1e9;

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
  if (!out) throw std::runtime_error("write failed for " + path);
}

}  // namespace

std::size_t ProfileSeries::index(int t, int bus_id) const {
  if (t < 0 || t >= t_ || bus_id < 1 || bus_id > n_) {
    throw std::out_of_range("profile series: t=" + std::to_string(t) +
                            " bus=" + std::to_string(bus_id));
  }
  return static_cast<std::size_t>(t) * n_ + (bus_id - 1);
}

ProfileSeries ProfileSeries::constant(int n_buses, int timesteps, const ProfileRecord& rec) {
  ProfileSeries s(n_buses, timesteps);
  for (auto& r : s.rows_) r = rec;
  return s;
}

ProfileSeries load_profiles(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open profiles file " + path);

  std::string header;
  if (!std::getline(in, header)) fail(path + ": empty file");
  if (header.back() == '\r') header.pop_back();
  if (header != "t,bus,p_load_kw,q_load_kvar,p_gen_kw") {
    fail(path + ": unexpected header '" + header + "'");
  }

  struct Row {
    int t, bus;
    ProfileRecord rec;
  };
  std::vector<Row> rows;
  int max_t = -1, max_bus = 0;
  std::string line;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    Row r;
    char extra;
    if (std::sscanf(line.c_str(), "%d,%d,%lf,%lf,%lf%c", &r.t, &r.bus, &r.rec.p_load_kw,
                    &r.rec.q_load_kvar, &r.rec.p_gen_kw, &extra) != 5) {
      fail(path + ":" + std::to_string(line_no) + ": malformed row '" + line + "'");
    }
    if (!std::isfinite(r.rec.p_load_kw) || !std::isfinite(r.rec.q_load_kvar) ||
        !std::isfinite(r.rec.p_gen_kw)) {
      fail(path + ":" + std::to_string(line_no) + ": non-finite value");
    }
    if (r.t < 0 || r.bus < 1) fail(path + ":" + std::to_string(line_no) + ": bad t or bus");
    max_t = std::max(max_t, r.t);
    max_bus = std::max(max_bus, r.bus);
    rows.push_back(r);
  }
  if (rows.empty()) fail(path + ": no data rows");

  ProfileSeries s(max_bus, max_t + 1);
  std::vector<char> seen(static_cast<std::size_t>(max_bus) * (max_t + 1), 0);
  for (const Row& r : rows) {
    const std::size_t idx = static_cast<std::size_t>(r.t) * max_bus + (r.bus - 1);
    if (seen[idx]) {
      fail(path + ": duplicate cell t=" + std::to_string(r.t) + " bus=" + std::to_string(r.bus));
    }
    seen[idx] = 1;
    s.at(r.t, r.bus) = r.rec;
  }
  for (int t = 0; t <= max_t; ++t) {
    for (int b = 1; b <= max_bus; ++b) {
      if (!seen[static_cast<std::size_t>(t) * max_bus + (b - 1)]) {
        fail(path + ": missing cell t=" + std::to_string(t) + " bus=" + std::to_string(b));
      }
    }
  }
  return s;
}

void write_profiles(const ProfileSeries& series, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write profiles file " + path);
  out << "t,bus,p_load_kw,q_load_kvar,p_gen_kw\n";
  for (int t = 0; t < series.timesteps(); ++t) {
    for (int b = 1; b <= series.n_buses(); ++b) {
      const ProfileRecord& r = series.at(t, b);
      out << t << ',' << b << ',' << fmt_double(r.p_load_kw) << ',' << fmt_double(r.q_load_kvar)
          << ',' << fmt_double(r.p_gen_kw) << '\n';
    }
  }
  if (!out) fail("write failed for " + path);
}

ProfileSeries generate_daily_profiles(int n_buses, const SyntheticProfileConfig& cfg,
                                      std::uint64_t seed) {
  if (n_buses < 1 || cfg.timesteps < 1) fail("synthetic profiles: bad dimensions");
  Rng rng(seed);
  ProfileSeries s(n_buses, cfg.timesteps);
  const double tan_phi =
      std::tan(std::acos(std::min(1.0, std::max(0.1, cfg.power_factor))));
  for (int t = 0; t < cfg.timesteps; ++t) {
    const double hour = t * cfg.minutes_per_step / 60.0;
    double solar = 0.0;
    if (hour >= cfg.solar_start_h && hour <= cfg.solar_end_h) {
      const double phase = (hour - cfg.solar_start_h) / (cfg.solar_end_h - cfg.solar_start_h);
      solar = cfg.solar_peak_kw * std::sin(3.14159265358979323846 * phase);
    }
    const double morning = cfg.load_morning_peak_kw *
                           std::exp(-0.5 * std::pow((hour - cfg.load_morning_h) /
                                                    cfg.load_morning_width_h, 2));
    const double evening = cfg.load_evening_peak_kw *
                           std::exp(-0.5 * std::pow((hour - cfg.load_evening_h) /
                                                    cfg.load_evening_width_h, 2));
    const double load = cfg.load_base_kw + morning + evening;
    for (int b = 1; b <= n_buses; ++b) {
      const double nl = 1.0 + cfg.noise_std * rng.normal();
      const double ns = 1.0 + cfg.noise_std * rng.normal();
      ProfileRecord& r = s.at(t, b);
      r.p_load_kw = cfg.homes_per_bus * std::max(0.0, load * nl);
      r.q_load_kvar = r.p_load_kw * tan_phi;
      r.p_gen_kw = cfg.homes_per_bus * std::max(0.0, solar * ns);
    }
  }
  return s;
}

namespace {

Vec vec_from_json(const json& v, int n, const std::string& field) {
  Vec out(n);
  if (v.is_number()) {
    out.setConstant(finite_or_fail(v.get<double>(), field));
  } else if (v.is_array()) {
    if (static_cast<int>(v.size()) != n) {
      fail("field '" + field + "' must have " + std::to_string(n) + " entries");
    }
    for (int j = 0; j < n; ++j) out[j] = finite_or_fail(v[j].get<double>(), field);
  } else {
    fail("field '" + field + "' must be a number or array");
  }
  return out;
}

SyntheticProfileConfig synth_from_json(const json& j) {
  SyntheticProfileConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    const auto num = [&](double& dst) { dst = finite_or_fail(it.value().get<double>(), k); };
    if (k == "timesteps") c.timesteps = it.value().get<int>();
    else if (k == "minutes_per_step") num(c.minutes_per_step);
    else if (k == "homes_per_bus") num(c.homes_per_bus);
    else if (k == "solar_peak_kw") num(c.solar_peak_kw);
    else if (k == "solar_start_h") num(c.solar_start_h);
    else if (k == "solar_end_h") num(c.solar_end_h);
    else if (k == "load_base_kw") num(c.load_base_kw);
    else if (k == "load_morning_peak_kw") num(c.load_morning_peak_kw);
    else if (k == "load_morning_h") num(c.load_morning_h);
    else if (k == "load_morning_width_h") num(c.load_morning_width_h);
    else if (k == "load_evening_peak_kw") num(c.load_evening_peak_kw);
    else if (k == "load_evening_h") num(c.load_evening_h);
    else if (k == "load_evening_width_h") num(c.load_evening_width_h);
    else if (k == "power_factor") num(c.power_factor);
    else if (k == "noise_std") num(c.noise_std);
    else fail("unknown synthetic profile field '" + k + "'");
  }
  if (c.timesteps < 1) fail("synthetic profiles need timesteps >= 1");
  return c;
}

}  // namespace

Scenario scenario_from_json_text(const std::string& text, const std::string& base_dir,
                                 const std::string& origin) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    fail("cannot parse " + origin + ": " + e.what());
  }
  if (!doc.is_object()) fail(origin + ": top level must be an object");

  static const std::vector<std::string> known = {
      "schema_version", "feeder", "mu", "gamma", "alpha", "beta", "theta", "tol", "max_iters",
      "strategy", "plant", "comm", "timing", "profiles", "ratings_kva", "q_box_pu", "initial_q",
      "meas_noise_std", "record_per_bus", "seed"};
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end()) {
      fail(origin + ": unknown field '" + it.key() + "'");
    }
  }
  if (doc.value("schema_version", 1) != 1) fail("unsupported schema_version");

  Scenario sc;
  try {
    // feeder: path or inline object
    if (!doc.contains("feeder")) fail(origin + ": missing feeder");
    if (doc.at("feeder").is_string()) {
      const fs::path p = fs::path(base_dir) / doc.at("feeder").get<std::string>();
      if (!fs::exists(p)) fail("feeder file not found: " + p.string());
      sc.feeder = load_feeder(p.string());
    } else {
      sc.feeder = build_feeder(
          feeder_spec_from_json_text(doc.at("feeder").dump(), origin + "#feeder"));
    }
    sc.feeder.require_radial("scenario");
    sc.bbus = std::make_shared<BbusMatrix>(build_bbus(sc.feeder));
    const int n = sc.bbus->size();

    sc.mu = doc.contains("mu") ? vec_from_json(doc.at("mu"), n, "mu") : Vec::Constant(n, 1.0);
    sc.gamma = finite_or_fail(doc.value("gamma", 0.5), "gamma");
    if (sc.gamma < 0) fail("gamma must be nonnegative");
    sc.theta = finite_or_fail(doc.value("theta", 0.0), "theta");
    if (sc.theta < 0) fail("theta must be nonnegative");
    sc.tol = finite_or_fail(doc.value("tol", 1e-8), "tol");
    if (!(sc.tol > 0)) fail("tol must be positive");
    sc.max_iters = doc.value("max_iters", 200000L);
    if (sc.max_iters < 1) fail("max_iters must be >= 1");

    const auto [a_bound, b_bound] =
        sc.gamma > 0 ? stepsize_bounds(sc.bbus->eta_tilde(), sc.bbus->l_tilde(), sc.gamma)
                     : std::make_pair(0.0, 0.0);
    sc.alpha_bound = a_bound;
    sc.beta_bound = b_bound;
    auto resolve_step = [&](const char* name, double bound, bool& is_auto, bool& exceeds) {
      if (!doc.contains(name) || (doc.at(name).is_string() && doc.at(name) == "auto")) {
        if (!(bound > 0)) fail(std::string(name) + " cannot be auto with gamma = 0");
        is_auto = true;
        exceeds = false;
        return 0.5 * bound;
      }
      const double v = finite_or_fail(doc.at(name).get<double>(), name);
      if (!(v > 0)) fail(std::string(name) + " must be positive");
      is_auto = false;
      exceeds = bound > 0 && v >= bound;
      return v;
    };
    sc.alpha = resolve_step("alpha", a_bound, sc.alpha_auto, sc.alpha_exceeds_bound);
    sc.beta = resolve_step("beta", b_bound, sc.beta_auto, sc.beta_exceeds_bound);

    const std::string strat = doc.value("strategy", std::string("hvc"));
    if (strat == "hvc") sc.strategy = Strategy::hvc;
    else if (strat == "distributed") sc.strategy = Strategy::distributed_only;
    else if (strat == "none") sc.strategy = Strategy::no_control;
    else fail("unknown strategy '" + strat + "' (expected hvc|distributed|none)");

    const std::string plant = doc.value("plant", std::string("ac"));
    if (plant == "ac") sc.plant = PlantKind::ac;
    else if (plant == "linear") sc.plant = PlantKind::linear;
    else fail("unknown plant '" + plant + "' (expected ac|linear)");

    if (doc.contains("comm")) {
      const json& c = doc.at("comm");
      sc.comm.activation_prob = finite_or_fail(c.value("activation_prob", 1.0), "activation_prob");
      if (sc.comm.activation_prob < 0 || sc.comm.activation_prob > 1) {
        fail("activation_prob must be in [0,1]");
      }
      if (c.contains("outages")) {
        for (const json& o : c.at("outages")) {
          OutageWindow w;
          w.start = o.at("start").get<long>();
          w.end = o.at("end").get<long>();
          if (w.start < 0 || w.end < w.start) fail("outage window must satisfy 0 <= start <= end");
          if (o.contains("buses") && !(o.at("buses").is_string() && o.at("buses") == "all")) {
            for (const json& b : o.at("buses")) {
              const int id = b.get<int>();
              if (id < 1 || id > n) fail("outage bus id out of range");
              w.buses.push_back(id);
            }
          }
          sc.comm.outages.push_back(std::move(w));
        }
      }
      if (c.contains("delay")) {
        const json& d = c.at("delay");
        sc.comm.delay.prob = finite_or_fail(d.value("prob", 0.0), "delay.prob");
        sc.comm.delay.max_rounds = d.value("max_rounds", 0);
        sc.comm.delay.queue = d.value("queue", false);
        if (sc.comm.delay.prob < 0 || sc.comm.delay.prob > 1) fail("delay.prob must be in [0,1]");
        if (sc.comm.delay.max_rounds < 0) fail("delay.max_rounds must be >= 0");
      }
    }

    sc.rounds_per_timestep = 30;
    sc.timesteps = 0;
    if (doc.contains("timing")) {
      const json& t = doc.at("timing");
      sc.rounds_per_timestep = t.value("rounds_per_timestep", 30);
      sc.timesteps = t.value("timesteps", 0);
      sc.round_seconds = finite_or_fail(t.value("round_seconds", 2.0), "round_seconds");
      if (sc.rounds_per_timestep < 1) fail("rounds_per_timestep must be >= 1");
      if (!(sc.round_seconds > 0)) fail("round_seconds must be positive");
    }

    if (doc.contains("profiles") && !doc.at("profiles").is_null()) {
      const json& p = doc.at("profiles");
      if (p.is_string()) {
        const fs::path path = fs::path(base_dir) / p.get<std::string>();
        if (!fs::exists(path)) fail("profiles file not found: " + path.string());
        sc.profiles = load_profiles(path.string());
      } else if (p.is_object() && p.contains("constant")) {
        ProfileRecord rec;
        const json& c = p.at("constant");
        rec.p_load_kw = finite_or_fail(c.value("p_load_kw", 0.0), "p_load_kw");
        rec.q_load_kvar = finite_or_fail(c.value("q_load_kvar", 0.0), "q_load_kvar");
        rec.p_gen_kw = finite_or_fail(c.value("p_gen_kw", 0.0), "p_gen_kw");
        const int steps = sc.timesteps > 0 ? sc.timesteps : 1;
        sc.profiles = ProfileSeries::constant(n, steps, rec);
      } else if (p.is_object() && p.contains("synthetic")) {
        SyntheticProfileConfig c = synth_from_json(p.at("synthetic"));
        sc.profiles = generate_daily_profiles(n, c, doc.value("seed", 0ULL));
      } else {
        fail("profiles must be a file path or {constant:...} or {synthetic:...}");
      }
      if (sc.profiles.n_buses() != n) {
        fail("profiles cover " + std::to_string(sc.profiles.n_buses()) + " buses, feeder has " +
             std::to_string(n));
      }
    } else {
      const int steps = sc.timesteps > 0 ? sc.timesteps : 1;
      sc.profiles = ProfileSeries::constant(n, steps, ProfileRecord{});
    }
    if (sc.timesteps == 0) {
      sc.timesteps = sc.profiles.timesteps();
    } else if (sc.timesteps != sc.profiles.timesteps()) {
      fail("timing.timesteps = " + std::to_string(sc.timesteps) + " but profiles have " +
           std::to_string(sc.profiles.timesteps()));
    }

    const bool has_ratings = doc.contains("ratings_kva");
    const bool has_box = doc.contains("q_box_pu");
    if (has_ratings && has_box) fail("give either ratings_kva or q_box_pu, not both");
    if (has_ratings) {
      sc.ratings_kva = vec_from_json(doc.at("ratings_kva"), n, "ratings_kva");
      for (int j = 0; j < n; ++j) {
        if (sc.ratings_kva[j] < 0) fail("ratings_kva must be nonnegative");
      }
    }
    if (has_box) {
      sc.q_box_pu = vec_from_json(doc.at("q_box_pu"), n, "q_box_pu");
      for (int j = 0; j < n; ++j) {
        if (sc.q_box_pu[j] < 0) fail("q_box_pu must be nonnegative");
      }
    }

    sc.initial_q = doc.contains("initial_q") ? vec_from_json(doc.at("initial_q"), n, "initial_q")
                                             : Vec::Zero(n);
    sc.meas_noise_std = finite_or_fail(doc.value("meas_noise_std", 0.0), "meas_noise_std");
    if (sc.meas_noise_std < 0) fail("meas_noise_std must be nonnegative");
    sc.record_per_bus = doc.value("record_per_bus", false);
    sc.seed = doc.value("seed", 0ULL);
    sc.comm.seed = sc.seed;
  } catch (const json::exception& e) {
    fail(origin + ": " + e.what());
  }

  // resolved configuration echo for summaries
  ojson echo;
  echo["schema_version"] = 1;
  echo["origin"] = origin;
  echo["n_buses"] = sc.feeder.n_buses();
  echo["mu_first"] = sc.mu[0];
  echo["gamma"] = sc.gamma;
  echo["alpha"] = sc.alpha;
  echo["beta"] = sc.beta;
  echo["alpha_bound"] = sc.alpha_bound;
  echo["beta_bound"] = sc.beta_bound;
  echo["alpha_auto"] = sc.alpha_auto;
  echo["beta_auto"] = sc.beta_auto;
  echo["alpha_exceeds_bound"] = sc.alpha_exceeds_bound;
  echo["beta_exceeds_bound"] = sc.beta_exceeds_bound;
  echo["theta"] = sc.theta;
  echo["tol"] = sc.tol;
  echo["max_iters"] = sc.max_iters;
  echo["strategy"] = sc.strategy == Strategy::hvc ? "hvc"
                     : sc.strategy == Strategy::distributed_only ? "distributed"
                                                                 : "none";
  echo["plant"] = sc.plant == PlantKind::ac ? "ac" : "linear";
  echo["activation_prob"] = sc.comm.activation_prob;
  echo["outages"] = ojson::array();
  for (const OutageWindow& w : sc.comm.outages) {
    ojson o;
    o["start"] = w.start;
    o["end"] = w.end;
    if (w.buses.empty()) o["buses"] = "all";
    else o["buses"] = w.buses;
    echo["outages"].push_back(o);
  }
  echo["timesteps"] = sc.timesteps;
  echo["rounds_per_timestep"] = sc.rounds_per_timestep;
  echo["round_seconds"] = sc.round_seconds;
  echo["meas_noise_std"] = sc.meas_noise_std;
  echo["seed"] = sc.seed;
  sc.config_echo = echo.dump();
  return sc;
}

Scenario parse_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return scenario_from_json_text(ss.str(), fs::path(path).parent_path().string(), path);
}

void write_scenario(const Scenario& sc, const std::string& dir) {
  fs::create_directories(dir);
  write_profiles(sc.profiles, (fs::path(dir) / "profiles.csv").string());

  ojson doc;
  doc["schema_version"] = 1;
  ojson feeder;
  feeder["buses"] = ojson::array();
  for (int i = 0; i < sc.feeder.n_buses(); ++i) feeder["buses"].push_back({{"id", i}});
  feeder["lines"] = ojson::array();
  for (const Line& l : sc.feeder.lines()) {
    ojson line;
    line["from"] = l.from;
    line["to"] = l.to;
    line["r_pu"] = l.r;
    line["x_pu"] = l.x;
    feeder["lines"].push_back(line);
  }
  feeder["v0_pu"] = sc.feeder.v0();
  feeder["bases"] = {{"s_base_va", sc.feeder.bases().s_base_va},
                     {"v_base_v", sc.feeder.bases().v_base_v}};
  doc["feeder"] = feeder;

  auto vec_field = [](const Vec& v) {
    ojson a = ojson::array();
    for (int j = 0; j < v.size(); ++j) a.push_back(v[j]);
    return a;
  };
  doc["mu"] = vec_field(sc.mu);
  doc["gamma"] = sc.gamma;
  doc["alpha"] = sc.alpha;
  doc["beta"] = sc.beta;
  doc["theta"] = sc.theta;
  doc["tol"] = sc.tol;
  doc["max_iters"] = sc.max_iters;
  doc["strategy"] = sc.strategy == Strategy::hvc ? "hvc"
                    : sc.strategy == Strategy::distributed_only ? "distributed"
                                                                : "none";
  doc["plant"] = sc.plant == PlantKind::ac ? "ac" : "linear";
  ojson comm;
  comm["activation_prob"] = sc.comm.activation_prob;
  if (!sc.comm.outages.empty()) {
    comm["outages"] = ojson::array();
    for (const OutageWindow& w : sc.comm.outages) {
      ojson o;
      o["start"] = w.start;
      o["end"] = w.end;
      if (w.buses.empty()) o["buses"] = "all";
      else o["buses"] = w.buses;
      comm["outages"].push_back(o);
    }
  }
  if (sc.comm.delay.prob > 0.0) {
    comm["delay"] = {{"prob", sc.comm.delay.prob},
                     {"max_rounds", sc.comm.delay.max_rounds},
                     {"queue", sc.comm.delay.queue}};
  }
  doc["comm"] = comm;
  doc["timing"] = {{"rounds_per_timestep", sc.rounds_per_timestep},
                   {"timesteps", sc.timesteps},
                   {"round_seconds", sc.round_seconds}};
  doc["profiles"] = "profiles.csv";
  if (sc.ratings_kva.size() > 0) doc["ratings_kva"] = vec_field(sc.ratings_kva);
  if (sc.q_box_pu.size() > 0) doc["q_box_pu"] = vec_field(sc.q_box_pu);
  doc["initial_q"] = vec_field(sc.initial_q);
  doc["meas_noise_std"] = sc.meas_noise_std;
  doc["record_per_bus"] = sc.record_per_bus;
  doc["seed"] = sc.seed;

  write_text_file((fs::path(dir) / "scenario.json").string(), doc.dump(2) + "\n");
}

TimestepInputs assemble_timestep(const Scenario& sc, int t) {
  const int n = sc.bbus->size();
  const double s_base = sc.feeder.bases().s_base_va;
  TimestepInputs in;
  in.p_net.resize(n);
  in.q_load.resize(n);
  in.q_lo.resize(n);
  in.q_hi.resize(n);
  for (int j = 1; j <= n; ++j) {
    const ProfileRecord& rec = sc.profiles.at(t, j);
    double p_gen = rec.p_gen_kw;
    if (sc.ratings_kva.size() > 0) {
      p_gen = std::min(p_gen, sc.ratings_kva[j - 1]);  // inverter curtails at rating
    }
    in.p_net[j - 1] = (p_gen - rec.p_load_kw) * 1000.0 / s_base;
    in.q_load[j - 1] = rec.q_load_kvar * 1000.0 / s_base;
    if (sc.q_box_pu.size() > 0) {
      in.q_lo[j - 1] = -sc.q_box_pu[j - 1];
      in.q_hi[j - 1] = sc.q_box_pu[j - 1];
    } else if (sc.ratings_kva.size() > 0) {
      const auto [lo, hi] = var_limits_update(sc.ratings_kva[j - 1], p_gen, s_base);
      in.q_lo[j - 1] = lo;
      in.q_hi[j - 1] = hi;
    } else {
      in.q_lo[j - 1] = -kUnlimitedBox;
      in.q_hi[j - 1] = kUnlimitedBox;
    }
  }
  in.w_lin = build_operating_vector(sc.feeder, in.p_net, sc.feeder.v0()) - in.q_load;
  return in;
}

HvcProblem static_problem_at(const Scenario& sc, int t) {
  const TimestepInputs in = assemble_timestep(sc, t);
  HvcProblem p;
  p.b = sc.bbus;
  p.w = in.w_lin;
  p.mu = sc.mu;
  p.gamma = sc.gamma;
  p.q_lo = in.q_lo;
  p.q_hi = in.q_hi;
  return p;
}

SimulationResult run_scenario(const Scenario& sc, const RunOptions& opt) {
  return run_scenario(sc, sc.strategy, opt);
}

SimulationResult run_scenario(const Scenario& sc, Strategy strategy, const RunOptions& opt) {
  SimConfig cfg;
  cfg.ctrl.alpha = sc.alpha;
  cfg.ctrl.beta = sc.beta;
  cfg.ctrl.theta = sc.theta;
  cfg.gamma = sc.gamma;
  cfg.mu = sc.mu;
  cfg.strategy = strategy;
  cfg.rounds_per_timestep = sc.rounds_per_timestep;
  cfg.round_seconds = sc.round_seconds;
  cfg.meas_noise_std = sc.meas_noise_std;
  cfg.record_per_bus = sc.record_per_bus;

  CommModel comm = sc.comm;
  comm.seed = sc.seed;

  std::unique_ptr<Plant> plant;
  const TimestepInputs first = assemble_timestep(sc, 0);
  if (sc.plant == PlantKind::linear) {
    plant = std::make_unique<LinearPlant>(sc.bbus, first.w_lin);
  } else {
    plant = std::make_unique<AcPlant>(sc.feeder);
  }

  HvcSimulator sim(sc.bbus, cfg, comm, std::move(plant));

  SimulationResult res;
  res.seed = sc.seed;

  for (int t = 0; t < sc.timesteps; ++t) {
    const TimestepInputs in = t == 0 ? first : assemble_timestep(sc, t);
    sim.plant().set_operating_point(in.p_net, in.q_load, in.w_lin);
    sim.set_limits(in.q_lo, in.q_hi);
    if (t == 0) sim.initialize(sc.initial_q);

    double sum_mismatch = 0.0;
    for (int r = 0; r < sc.rounds_per_timestep; ++r) {
      sim.run_round();
      const long k = sim.round() - 1;
      const double mm = sim.mismatch();
      sum_mismatch += mm;
      res.rounds.push_back(RoundRecord{k, (k + 1) * sc.round_seconds, mm});
      if (cfg.record_per_bus) {
        res.v_hist.push_back(sim.v());
        res.q_hist.push_back(sim.q());
        res.lambda_hist.push_back(sim.lambda());
        res.vmeas_hist.push_back(sim.v_meas());
      }
    }
    TimestepRecord tr;
    tr.t = t;
    tr.mean_mismatch = sum_mismatch / sc.rounds_per_timestep;
    tr.final_mismatch = res.rounds.back().mismatch;
    tr.headroom_total = (in.q_hi - in.q_lo).sum();
    res.timesteps.push_back(tr);

    if (opt.validate_lindistflow) {
      const Vec v_lin = sc.bbus->solve(sim.q() + in.w_lin);
      res.lin_gaps.push_back((sim.v_meas() - v_lin).cwiseAbs().maxCoeff());
    }
  }

  res.final_v = sim.v();
  res.final_q = sim.q();
  res.final_lambda = sim.lambda();
  res.final_vmeas = sim.v_meas();

  PpdState fin;
  fin.v = res.final_v;
  fin.q = res.final_q;
  fin.lambda = res.final_lambda;
  fin.v_meas = res.final_vmeas;
  res.final_residuals = kkt_residuals(fin, static_problem_at(sc, sc.timesteps - 1));
  return res;
}

namespace {

ojson residuals_json(const KktResiduals& r) {
  ojson j;
  j["r_v"] = r.r_v;
  j["r_q"] = r.r_q;
  j["r_lambda"] = r.r_lambda;
  return j;
}

ojson vec_json(const Vec& v) {
  ojson a = ojson::array();
  for (int j = 0; j < v.size(); ++j) a.push_back(v[j]);
  return a;
}

ojson parse_echo(const std::string& echo) {
  if (echo.empty()) return ojson::object();
  return ojson::parse(echo);
}

}  // namespace

void write_results(const SimulationResult& result, const std::string& config_echo,
                   const std::string& dir) {
  fs::create_directories(dir);

  std::ostringstream csv;
  csv << "round,time_s,mismatch_norm";
  const bool per_bus = !result.q_hist.empty();
  const int n = per_bus ? static_cast<int>(result.q_hist.front().size()) : 0;
  if (per_bus) {
    for (int j = 1; j <= n; ++j) csv << ",v_" << j;
    for (int j = 1; j <= n; ++j) csv << ",q_" << j;
    for (int j = 1; j <= n; ++j) csv << ",lambda_" << j;
  }
  csv << '\n';
  for (std::size_t i = 0; i < result.rounds.size(); ++i) {
    const RoundRecord& r = result.rounds[i];
    csv << r.round << ',' << fmt_double(r.time_s) << ',' << fmt_double(r.mismatch);
    if (per_bus) {
      for (int j = 0; j < n; ++j) csv << ',' << fmt_double(result.vmeas_hist[i][j]);
      for (int j = 0; j < n; ++j) csv << ',' << fmt_double(result.q_hist[i][j]);
      for (int j = 0; j < n; ++j) csv << ',' << fmt_double(result.lambda_hist[i][j]);
    }
    csv << '\n';
  }
  write_text_file((fs::path(dir) / "trace.csv").string(), csv.str());

  ojson summary;
  summary["schema_version"] = 1;
  summary["kind"] = "simulation";
  summary["seed"] = result.seed;
  summary["config"] = parse_echo(config_echo);
  ojson fin;
  fin["mismatch"] = result.rounds.empty() ? 0.0 : result.rounds.back().mismatch;
  fin["residuals"] = residuals_json(result.final_residuals);
  fin["q"] = vec_json(result.final_q);
  fin["lambda"] = vec_json(result.final_lambda);
  fin["v_meas"] = vec_json(result.final_vmeas);
  summary["final"] = fin;
  ojson steps = ojson::array();
  for (std::size_t i = 0; i < result.timesteps.size(); ++i) {
    const TimestepRecord& t = result.timesteps[i];
    ojson o;
    o["t"] = t.t;
    o["mean_mismatch"] = t.mean_mismatch;
    o["final_mismatch"] = t.final_mismatch;
    o["headroom_total"] = t.headroom_total;
    if (i < result.lin_gaps.size()) o["lin_gap"] = result.lin_gaps[i];
    steps.push_back(o);
  }
  summary["timesteps"] = steps;
  write_text_file((fs::path(dir) / "summary.json").string(), summary.dump(2) + "\n");
}

void write_solve_results(const SolveResult& result, const std::string& config_echo,
                         const std::string& dir, double round_seconds) {
  fs::create_directories(dir);

  std::ostringstream csv;
  csv << "round,time_s,mismatch_norm,r_v,r_q,r_lambda\n";
  for (const IterRecord& r : result.trace) {
    csv << r.k << ',' << fmt_double(round_seconds * r.k) << ',' << fmt_double(r.mismatch) << ','
        << fmt_double(r.r_v) << ',' << fmt_double(r.r_q) << ',' << fmt_double(r.r_lambda) << '\n';
  }
  write_text_file((fs::path(dir) / "trace.csv").string(), csv.str());

  ojson summary;
  summary["schema_version"] = 1;
  summary["kind"] = "solve_static";
  summary["status"] = result.status == SolveStatus::converged  ? "converged"
                      : result.status == SolveStatus::diverged ? "diverged"
                                                               : "max_iters";
  summary["iterations"] = result.iterations;
  summary["config"] = parse_echo(config_echo);
  ojson fin;
  fin["residuals"] = residuals_json(result.final_residuals);
  fin["mismatch"] = result.final_mismatch;
  fin["q"] = vec_json(result.state.q);
  fin["v"] = vec_json(result.state.v);
  fin["lambda"] = vec_json(result.state.lambda);
  summary["final"] = fin;
  write_text_file((fs::path(dir) / "summary.json").string(), summary.dump(2) + "\n");
}

}  // namespace gridvolt
