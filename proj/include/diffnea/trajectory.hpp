#pragma once

// Time-indexed joint data and its CSV form.
//
// A record's qdd is the acceleration realized under its tau, i.e. the
// target that a forward-dynamics model should predict from (q, qd, tau).

#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "diffnea/io.hpp"

namespace diffnea {

struct Record {
  double t = 0.0;
  std::vector<double> q, qd, qdd, tau;
};

struct Trajectory {
  std::size_t n_dof = 0;
  std::vector<Record> records;

  std::size_t size() const { return records.size(); }
  bool empty() const { return records.empty(); }
};

inline std::string csv_header(std::size_t n_dof) {
  std::string h = "t";
  for (const char* stem : {"q", "qd", "qdd", "tau"}) {
    for (std::size_t j = 0; j < n_dof; ++j) h += "," + std::string(stem) + std::to_string(j);
  }
  return h;
}

inline std::string to_csv(const Trajectory& traj) {
  std::string out = csv_header(traj.n_dof) + "\n";
  out.reserve(traj.size() * (1 + 4 * traj.n_dof) * 24);
  for (const auto& r : traj.records) {
    out += format_double(r.t);
    for (const auto* v : {&r.q, &r.qd, &r.qdd, &r.tau}) {
      if (v->size() != traj.n_dof) throw std::invalid_argument("to_csv: record width differs from n_dof");
      for (double x : *v) {
        out += ',';
        out += format_double(x);
      }
    }
    out += '\n';
  }
  return out;
}

inline Trajectory parse_csv(const std::string& text) {
  const auto lines = split(text, '\n');
  if (lines.empty() || lines[0].empty()) throw std::invalid_argument("dataset CSV is empty");
  std::string header = lines[0];
  if (!header.empty() && header.back() == '\r') header.pop_back();
  const std::size_t cols = split(header, ',').size();
  if (cols < 1 || (cols - 1) % 4 != 0) throw std::invalid_argument("dataset CSV header has " + std::to_string(cols) + " columns");
  Trajectory traj;
  traj.n_dof = (cols - 1) / 4;
  if (header != csv_header(traj.n_dof)) throw std::invalid_argument("dataset CSV header is not '" + csv_header(traj.n_dof) + "'");
  const std::size_t n = traj.n_dof;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty() || lines[i] == "\r") continue;
    const auto f = split(lines[i], ',');
    if (f.size() != cols) {
      throw std::invalid_argument("dataset CSV line " + std::to_string(i + 1) + " has " + std::to_string(f.size()) +
                                  " fields, expected " + std::to_string(cols));
    }
    Record r;
    r.t = parse_double(f[0]);
    for (auto* v : {&r.q, &r.qd, &r.qdd, &r.tau}) v->resize(n);
    for (std::size_t j = 0; j < n; ++j) {
      r.q[j] = parse_double(f[1 + j]);
      r.qd[j] = parse_double(f[1 + n + j]);
      r.qdd[j] = parse_double(f[1 + 2 * n + j]);
      r.tau[j] = parse_double(f[1 + 3 * n + j]);
    }
    traj.records.push_back(std::move(r));
  }
  return traj;
}

inline Trajectory load_csv(const std::filesystem::path& path) { return parse_csv(read_file(path)); }

// Contiguous slice [begin, begin + count).
inline std::span<const Record> slice(const Trajectory& traj, std::size_t begin, std::size_t count) {
  return std::span<const Record>(traj.records).subspan(begin, count);
}

}  // namespace diffnea
