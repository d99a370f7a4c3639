#pragma once

// Data ingestion, run configuration and structured record output.
//
// Panel interchange format (CSV): header `activity,t,<var1>,...,<varP>`,
// rows sorted by (activity, t), empty fields meaning missing cells. Values
// are written with 17 significant digits so a write/read round trip is
// bit-exact. Result records are line-delimited JSON carrying the config hash
// and seed.

#include <cinttypes>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cpdet/model.hpp"
#include "cpdet/onlineem.hpp"

namespace cpdet::io {

using nlohmann::json;

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016" PRIx64, v);
  return buf;
}

// ---------------------------------------------------------------------------
// CSV panel format

struct CsvError : std::runtime_error {
  explicit CsvError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  fields.push_back(cur);
  return fields;
}

inline double parse_double(const std::string& s, int line_no) {
  std::size_t pos = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &pos);
  } catch (const std::exception&) {
    throw CsvError("line " + std::to_string(line_no) + ": non-numeric cell '" + s + "'");
  }
  if (pos != s.size()) throw CsvError("line " + std::to_string(line_no) + ": non-numeric cell '" + s + "'");
  return v;
}

inline long parse_int(const std::string& s, int line_no) {
  std::size_t pos = 0;
  long v = 0;
  try {
    v = std::stol(s, &pos);
  } catch (const std::exception&) {
    throw CsvError("line " + std::to_string(line_no) + ": non-integer cell '" + s + "'");
  }
  if (pos != s.size()) throw CsvError("line " + std::to_string(line_no) + ": non-integer cell '" + s + "'");
  return v;
}

}  // namespace detail

struct IngestedPanel {
  ActivityPanel panel;
  std::vector<std::string> var_names;
  std::vector<std::string> activity_labels;  // original labels, in order
};

inline IngestedPanel ingest_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw CsvError("empty input");
  auto header = detail::split_csv_line(line);
  if (header.size() < 3 || header[0] != "activity" || header[1] != "t")
    throw CsvError("header must be 'activity,t,<var1>,...,<varP>'");
  const int P = static_cast<int>(header.size()) - 2;

  struct Row {
    int activity;  // zero-based re-index
    long t;
    std::vector<std::optional<double>> cells;
  };
  std::vector<Row> rows;
  std::vector<std::string> labels;
  std::map<std::string, int> label_index;
  std::map<std::pair<int, long>, int> seen;  // (activity, t) -> line number
  long max_t = 0;

  int line_no = 1;
  int last_activity = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = detail::split_csv_line(line);
    if (static_cast<int>(fields.size()) != P + 2)
      throw CsvError("line " + std::to_string(line_no) + ": expected " + std::to_string(P + 2) +
                     " fields, got " + std::to_string(fields.size()));
    const std::string& label = fields[0];
    int act;
    auto it = label_index.find(label);
    if (it == label_index.end()) {
      act = static_cast<int>(labels.size());
      label_index.emplace(label, act);
      labels.push_back(label);
    } else {
      act = it->second;
    }
    if (act < last_activity)
      throw CsvError("line " + std::to_string(line_no) + ": rows are not sorted by activity");
    const long t = detail::parse_int(fields[1], line_no);
    if (t < 1) throw CsvError("line " + std::to_string(line_no) + ": time index must be >= 1");
    if (act == last_activity && !rows.empty() && rows.back().activity == act && t < rows.back().t)
      throw CsvError("line " + std::to_string(line_no) + ": rows are not sorted by t within activity");
    auto [pos, inserted] = seen.emplace(std::make_pair(act, t), line_no);
    if (!inserted)
      throw CsvError("line " + std::to_string(line_no) + ": duplicate (activity, t) = (" + label +
                     ", " + std::to_string(t) + "), first seen on line " + std::to_string(pos->second));
    Row row;
    row.activity = act;
    row.t = t;
    for (int p = 0; p < P; ++p) {
      const std::string& cell = fields[static_cast<std::size_t>(p + 2)];
      if (cell.empty())
        row.cells.emplace_back(std::nullopt);
      else
        row.cells.emplace_back(detail::parse_double(cell, line_no));
    }
    rows.push_back(std::move(row));
    last_activity = act;
    max_t = std::max(max_t, t);
  }
  if (rows.empty()) throw CsvError("no data rows");

  IngestedPanel out;
  out.var_names.assign(header.begin() + 2, header.end());
  out.activity_labels = labels;
  out.panel = ActivityPanel(static_cast<int>(labels.size()), static_cast<int>(max_t), P);
  for (const auto& row : rows)
    for (int p = 0; p < P; ++p)
      if (row.cells[static_cast<std::size_t>(p)])
        out.panel.set(row.activity + 1, static_cast<int>(row.t), p + 1, *row.cells[static_cast<std::size_t>(p)]);
  return out;
}

inline IngestedPanel ingest_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CsvError("cannot open '" + path + "'");
  return ingest_csv(in);
}

inline void write_csv(std::ostream& out, const ActivityPanel& panel,
                      const std::vector<std::string>& var_names = {}) {
  out << "activity,t";
  for (int p = 1; p <= panel.P(); ++p) {
    if (static_cast<int>(var_names.size()) >= p)
      out << ',' << var_names[static_cast<std::size_t>(p - 1)];
    else
      out << ",v" << p;
  }
  out << '\n';
  char buf[40];
  for (int n = 1; n <= panel.N(); ++n)
    for (int t = 1; t <= panel.T(); ++t) {
      out << n << ',' << t;
      for (int p = 1; p <= panel.P(); ++p) {
        out << ',';
        if (panel.observed(n, t, p)) {
          std::snprintf(buf, sizeof(buf), "%.17g", panel.value(n, t, p));
          out << buf;
        }
      }
      out << '\n';
    }
}

inline void write_csv(const std::string& path, const ActivityPanel& panel,
                      const std::vector<std::string>& var_names = {}) {
  std::ofstream out(path);
  if (!out) throw CsvError("cannot open '" + path + "' for writing");
  write_csv(out, panel, var_names);
}

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  std::string family = "sim";
  int P = 2;
  double lambda = 0.5;
  json theta;  // family-specific; defaults filled by make_theta
  json custom_model;  // design matrices for the custom family

  int B = 1000;
  int kstar = 0;
  double delta = 0.5;
  GammaSchedule gamma;
  int n_min = 10;
  int passes = 1;
  int d_max = 0;  // 0 = unbounded
  bool systematic_resampling = false;
  std::uint64_t seed = 1;

  std::string input;
  std::string output = "-";
  std::string truth_output;

  // simulate / evaluate
  int sim_N = 200;
  int sim_T = 120;
  int sim_S = 10;
  double missing_rate = 0.0;
  std::vector<double> deltas{0.3, 0.5, 0.7, 0.9};
  int replications = 5;
  bool within = false;             // also evaluate mid-activity detection
  std::vector<int> within_t_cuts;  // empty with within=true: T/3 and 2T/3

  int activity = 0;  // monitor target

  [[nodiscard]] json to_json() const {
    json j;
    j["family"] = family;
    j["P"] = P;
    j["lambda"] = lambda;
    if (!theta.is_null()) j["theta"] = theta;
    if (!custom_model.is_null()) j["custom_model"] = custom_model;
    j["B"] = B;
    j["kstar"] = kstar;
    j["delta"] = delta;
    j["gamma"] = {{"kappa", gamma.kappa}, {"c", gamma.c}};
    j["n_min"] = n_min;
    j["passes"] = passes;
    j["d_max"] = d_max;
    j["systematic_resampling"] = systematic_resampling;
    j["seed"] = seed;
    j["input"] = input;
    j["output"] = output;
    j["truth_output"] = truth_output;
    j["sim"] = {{"N", sim_N}, {"T", sim_T}, {"S", sim_S}, {"missing_rate", missing_rate}};
    j["deltas"] = deltas;
    j["replications"] = replications;
    j["within"] = within;
    j["within_t_cuts"] = within_t_cuts;
    j["activity"] = activity;
    return j;
  }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    c.family = j.value("family", c.family);
    c.P = j.value("P", c.P);
    c.lambda = j.value("lambda", c.lambda);
    if (j.contains("theta")) c.theta = j.at("theta");
    if (j.contains("custom_model")) c.custom_model = j.at("custom_model");
    c.B = j.value("B", c.B);
    c.kstar = j.value("kstar", c.kstar);
    c.delta = j.value("delta", c.delta);
    if (j.contains("gamma")) {
      c.gamma.kappa = j.at("gamma").value("kappa", c.gamma.kappa);
      c.gamma.c = j.at("gamma").value("c", c.gamma.c);
    }
    c.n_min = j.value("n_min", c.n_min);
    c.passes = j.value("passes", c.passes);
    c.d_max = j.value("d_max", c.d_max);
    c.systematic_resampling = j.value("systematic_resampling", c.systematic_resampling);
    c.seed = j.value("seed", c.seed);
    c.input = j.value("input", c.input);
    c.output = j.value("output", c.output);
    c.truth_output = j.value("truth_output", c.truth_output);
    if (j.contains("sim")) {
      const auto& s = j.at("sim");
      c.sim_N = s.value("N", c.sim_N);
      c.sim_T = s.value("T", c.sim_T);
      c.sim_S = s.value("S", c.sim_S);
      c.missing_rate = s.value("missing_rate", c.missing_rate);
    }
    if (j.contains("deltas")) c.deltas = j.at("deltas").get<std::vector<double>>();
    c.replications = j.value("replications", c.replications);
    c.within = j.value("within", c.within);
    if (j.contains("within_t_cuts")) c.within_t_cuts = j.at("within_t_cuts").get<std::vector<int>>();
    c.activity = j.value("activity", c.activity);
    return c;
  }

  static RunConfig load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config '" + path + "'");
    json j;
    in >> j;
    return from_json(j);
  }

  [[nodiscard]] std::string hash() const { return hex64(fnv1a(to_json().dump())); }
};

namespace detail {

inline MatrixXd matrix_from_json(const json& j) {
  const auto rows = j.size();
  if (rows == 0) throw std::runtime_error("config: empty matrix");
  const auto cols = j.at(0).size();
  MatrixXd m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r) {
    if (j.at(r).size() != cols) throw std::runtime_error("config: ragged matrix");
    for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = j.at(r).at(c).get<double>();
  }
  return m;
}

inline VectorXd vector_from_json(const json& j) {
  VectorXd v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Eigen::Index>(i)) = j.at(i).get<double>();
  return v;
}

inline json matrix_to_json(const MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

inline Theta make_theta(const RunConfig& c) {
  if (c.family == "sim") {
    const json t = c.theta.is_null() ? json::object() : c.theta;
    return Theta::sim(t.value("sigma_eps2", 1.0), t.value("sigma_alpha2", 0.05),
                      t.value("sigma_d2", 5.0), t.value("rho", 0.8), c.P);
  }
  if (c.family == "warmup") {
    const json t = c.theta.is_null() ? json::object() : c.theta;
    MatrixXd sigma = t.contains("Sigma") ? detail::matrix_from_json(t.at("Sigma"))
                                         : MatrixXd(2.0 * MatrixXd::Identity(2, 2));
    MatrixXd psi = t.contains("Psi") ? detail::matrix_from_json(t.at("Psi"))
                                     : MatrixXd(0.1 * MatrixXd::Identity(3, 3));
    MatrixXd delta = t.contains("Delta") ? detail::matrix_from_json(t.at("Delta"))
                                         : MatrixXd(1.0 * MatrixXd::Identity(2, 2));
    return Theta::warmup(std::move(sigma), std::move(psi), std::move(delta), t.value("rho_sp", 0.5));
  }
  if (c.family == "custom") {
    if (c.theta.is_null() || !c.theta.contains("Sigma") || !c.theta.contains("Psi") ||
        !c.theta.contains("Delta"))
      throw std::runtime_error("config: custom family requires theta.Sigma/Psi/Delta");
    return Theta::custom(detail::matrix_from_json(c.theta.at("Sigma")),
                         detail::matrix_from_json(c.theta.at("Psi")),
                         detail::matrix_from_json(c.theta.at("Delta")));
  }
  throw std::runtime_error("config: unknown family '" + c.family + "'");
}

inline ModelSpec make_model_spec(const RunConfig& c) {
  if (c.family == "sim") return ModelSpec::sim(c.P, c.lambda);
  if (c.family == "warmup") return ModelSpec::warmup(c.lambda);
  if (c.family == "custom") {
    if (c.custom_model.is_null()) throw std::runtime_error("config: custom family requires custom_model");
    const json& m = c.custom_model;
    ModelSpec s;
    s.family = Family::Custom;
    s.Z_S = detail::matrix_from_json(m.at("Z_S"));
    s.Z_A = detail::matrix_from_json(m.at("Z_A"));
    s.T_S = detail::matrix_from_json(m.at("T_S"));
    s.T_A = detail::matrix_from_json(m.at("T_A"));
    s.P = static_cast<int>(s.Z_S.rows());
    s.M = static_cast<int>(s.Z_S.cols());
    s.K = static_cast<int>(s.Z_A.cols());
    s.lambda = c.lambda;
    s.a1_S = m.contains("a1_S") ? detail::vector_from_json(m.at("a1_S")) : VectorXd::Zero(s.M).eval();
    s.a1_A = m.contains("a1_A") ? detail::vector_from_json(m.at("a1_A")) : VectorXd::Zero(s.K).eval();
    s.P1_S = m.contains("P1_S") ? detail::matrix_from_json(m.at("P1_S"))
                                : MatrixXd(ModelSpec::kDiffuseVariance * MatrixXd::Identity(s.M, s.M));
    s.P1_A = m.contains("P1_A") ? detail::matrix_from_json(m.at("P1_A"))
                                : MatrixXd(ModelSpec::kDiffuseVariance * MatrixXd::Identity(s.K, s.K));
    return s;
  }
  throw std::runtime_error("config: unknown family '" + c.family + "'");
}

inline json theta_to_json(const Theta& th) {
  json j;
  j["family"] = family_name(th.family);
  if (th.family == Family::Sim) {
    j["sigma_eps2"] = th.sigma_eps2();
    j["sigma_alpha2"] = th.sigma_alpha2();
    j["sigma_d2"] = th.sigma_d2();
    j["rho"] = th.rho();
  } else if (th.family == Family::Warmup) {
    j["Sigma"] = detail::matrix_to_json(th.Sigma);
    j["Psi"] = detail::matrix_to_json(th.Psi);
    j["Delta"] = detail::matrix_to_json(th.Delta);
    j["rho_sp"] = th.rho_sp();
  } else {
    j["Sigma"] = detail::matrix_to_json(th.Sigma);
    j["Psi"] = detail::matrix_to_json(th.Psi);
    j["Delta"] = detail::matrix_to_json(th.Delta);
  }
  return j;
}

// Writer for line-delimited result records; stamps every record with the
// config hash and seed.
class RecordWriter {
 public:
  RecordWriter(std::ostream& out, std::string config_hash, std::uint64_t seed)
      : out_(out), hash_(std::move(config_hash)), seed_(seed) {}

  void write(json record) {
    record["config_hash"] = hash_;
    record["seed"] = seed_;
    out_ << record.dump() << '\n';
  }

 private:
  std::ostream& out_;
  std::string hash_;
  std::uint64_t seed_;
};

}  // namespace cpdet::io
