#pragma once

// Tracking-based evaluation of learned models and the comparison table.

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffnea/learn.hpp"
#include "diffnea/metrics.hpp"
#include "diffnea/simgen.hpp"

namespace diffnea {

// ---- held-out references ------------------------------------------------------

// Minimum-jerk blend from 0 to 1 over s in [0, 1]: value, first and second derivative.
inline std::array<double, 3> min_jerk(double s) {
  const double s2 = s * s, s3 = s2 * s;
  return {10 * s3 - 15 * s3 * s + 6 * s3 * s2, 30 * s2 - 60 * s3 + 30 * s2 * s2, 60 * s - 180 * s2 + 120 * s3};
}

struct HeldoutSpec {
  double duration = 20.0;       // s
  double rate = 250.0;          // Hz
  double segment = 2.0;         // s per point-to-point move
  double sine_fraction = 0.3;   // upper bound of the sine amplitude, of half range
  double move_fraction = 0.25;  // bound of the point-to-point offsets, of half range
};

inline void to_json(nlohmann::json& j, const HeldoutSpec& h) {
  j = nlohmann::json{{"duration", h.duration},
                     {"rate", h.rate},
                     {"segment", h.segment},
                     {"sine_fraction", h.sine_fraction},
                     {"move_fraction", h.move_fraction}};
}

// Sine with periods, phases and amplitudes unlike the training set, plus a
// chain of minimum-jerk point-to-point moves. Fully determined by the seed.
inline ReferenceFn heldout_reference(std::vector<JointLimits> limits, std::uint64_t seed, const HeldoutSpec& spec = {}) {
  const std::size_t n = limits.size();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  struct Joint {
    double mid, half, amp, omega, phase;
    std::vector<double> waypoints;
  };
  const std::size_t segments = static_cast<std::size_t>(std::ceil(spec.duration / spec.segment)) + 1;
  std::vector<Joint> joints(n);
  for (std::size_t j = 0; j < n; ++j) {
    auto& jt = joints[j];
    jt.mid = (limits[j].upper + limits[j].lower) / 2.0;
    jt.half = (limits[j].upper - limits[j].lower) / 2.0;
    jt.amp = spec.sine_fraction * (0.5 + 0.5 * unit(rng)) * jt.half;
    jt.omega = 2.0 * std::numbers::pi / (3.0 + 6.0 * unit(rng));  // periods in [3, 9) s
    jt.phase = 2.0 * std::numbers::pi * unit(rng);
    jt.waypoints.push_back(0.0);
    for (std::size_t k = 1; k <= segments; ++k) {
      jt.waypoints.push_back(spec.move_fraction * (2.0 * unit(rng) - 1.0) * jt.half);
    }
  }
  const double seg = spec.segment;
  return [joints = std::move(joints), seg](double t) {
    const std::size_t n = joints.size();
    JointTarget r{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
    const std::size_t k = std::min(static_cast<std::size_t>(std::max(0.0, t) / seg), joints.front().waypoints.size() - 2);
    const double s = std::clamp(t / seg - static_cast<double>(k), 0.0, 1.0);
    const auto b = min_jerk(s);
    for (std::size_t j = 0; j < n; ++j) {
      const auto& jt = joints[j];
      const double a = jt.waypoints[k], d = jt.waypoints[k + 1] - a;
      const double arg = jt.omega * t + jt.phase;
      r.q[j] = jt.mid + jt.amp * (std::sin(arg) - std::sin(jt.phase)) + a + d * b[0];
      r.qd[j] = jt.amp * jt.omega * std::cos(arg) + d * b[1] / seg;
      r.qdd[j] = -jt.amp * jt.omega * jt.omega * std::sin(arg) + d * b[2] / (seg * seg);
    }
    return r;
  };
}

// ---- tracking -----------------------------------------------------------------

struct TrackingResult {
  std::vector<double> q_nmse, qd_nmse;
  double q_nmse_mean = 0.0;
  double qd_nmse_mean = 0.0;
  // mean |feedback torque| / mean |applied torque|, over all joints and steps
  double feedback_fraction = 0.0;
  bool unstable = false;
  std::string diagnostic;
  std::size_t steps = 0;
};

inline nlohmann::ordered_json to_json(const TrackingResult& r) {
  nlohmann::ordered_json j;
  j["q_nmse"] = r.q_nmse;
  j["qd_nmse"] = r.qd_nmse;
  j["q_nmse_mean"] = r.q_nmse_mean;
  j["qd_nmse_mean"] = r.qd_nmse_mean;
  j["feedback_fraction"] = r.feedback_fraction;
  j["unstable"] = r.unstable;
  j["diagnostic"] = r.diagnostic;
  j["steps"] = r.steps;
  return j;
}

// Computed-torque control with the learned model as feed-forward; the plant
// uses the true inertias.
inline TrackingResult track_trajectory(const RobotModel& model, std::span<const LinkInertia<double>> true_inertias,
                                       std::span<const LinkInertia<double>> learned_inertias,
                                       const ReferenceFn& reference, double duration, double rate,
                                       const PdGains& gains) {
  const auto plant = rigid_bodies(true_inertias);
  const auto ff = rigid_bodies(learned_inertias);
  const ClosedLoopLog log = run_closed_loop(model, plant, ff, reference, duration, rate, gains);
  TrackingResult out;
  out.unstable = log.diverged;
  out.diagnostic = log.diagnostic;
  out.steps = log.traj.size();
  if (out.steps < 2) {
    out.unstable = true;
    out.q_nmse.assign(model.n_dof(), std::numeric_limits<double>::infinity());
    out.qd_nmse = out.q_nmse;
    out.q_nmse_mean = out.qd_nmse_mean = std::numeric_limits<double>::infinity();
    return out;
  }
  std::vector<std::vector<double>> q, qd;
  q.reserve(out.steps);
  qd.reserve(out.steps);
  double fb = 0.0, total = 0.0;
  for (std::size_t k = 0; k < out.steps; ++k) {
    const auto& r = log.traj.records[k];
    q.push_back(r.q);
    qd.push_back(r.qd);
    for (std::size_t j = 0; j < r.tau.size(); ++j) {
      fb += std::abs(log.tau_fb[k][j]);
      total += std::abs(r.tau[j]);
    }
  }
  out.q_nmse = nmse_per_channel(q, log.q_des);
  out.qd_nmse = nmse_per_channel(qd, log.qd_des);
  for (double v : out.q_nmse) out.q_nmse_mean += v;
  for (double v : out.qd_nmse) out.qd_nmse_mean += v;
  out.q_nmse_mean /= static_cast<double>(out.q_nmse.size());
  out.qd_nmse_mean /= static_cast<double>(out.qd_nmse.size());
  out.feedback_fraction = total > 0.0 ? fb / total : 0.0;
  return out;
}

// ---- comparison table ---------------------------------------------------------

struct SeedOutcome {
  std::uint64_t seed = 0;
  std::optional<std::size_t> epochs_to_converge;
  TrackingResult sine;
  TrackingResult heldout;
  double consistent_fraction = 1.0;
};

struct ReportRow {
  std::string label;  // "GroundTruth" or a kind label
  bool trained = true;
  std::vector<SeedOutcome> seeds;
};

inline constexpr const char* kGroundTruthLabel = "GroundTruth";

// Six significant digits; used by both table formats so they agree exactly.
inline std::string report_number(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x, std::chars_format::general, 6);
  return std::string(buf, ptr);
}

struct Stats {
  double mean = 0.0, std = 0.0, median = 0.0;
  std::size_t count = 0;
};

inline Stats stats_of(std::vector<double> v) {
  Stats s;
  s.count = v.size();
  if (v.empty()) {
    s.mean = s.std = s.median = std::numeric_limits<double>::quiet_NaN();
    return s;
  }
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  for (double x : v) s.std += (x - s.mean) * (x - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(v.size()));
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  s.median = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  return s;
}

inline int row_rank(const std::string& label) {
  if (label == kGroundTruthLabel) return 0;
  for (std::size_t i = 0; i < kAllKinds.size(); ++i)
    if (label == kind_label(kAllKinds[i])) return static_cast<int>(i) + 1;
  return 100;
}

struct CompareTable {
  std::string csv;
  std::string markdown;
};

inline CompareTable compare_report(std::vector<ReportRow> rows) {
  if (rows.empty()) throw std::invalid_argument("compare_report: no rows");
  std::stable_sort(rows.begin(), rows.end(),
                   [](const ReportRow& a, const ReportRow& b) { return row_rank(a.label) < row_rank(b.label); });
  struct Column {
    std::string name;
    std::function<std::optional<double>(const SeedOutcome&)> get;
  };
  const std::vector<Column> metrics{
      {"sine_q_nmse", [](const SeedOutcome& s) { return std::optional(s.sine.q_nmse_mean); }},
      {"sine_qd_nmse", [](const SeedOutcome& s) { return std::optional(s.sine.qd_nmse_mean); }},
      {"heldout_q_nmse", [](const SeedOutcome& s) { return std::optional(s.heldout.q_nmse_mean); }},
      {"heldout_qd_nmse", [](const SeedOutcome& s) { return std::optional(s.heldout.qd_nmse_mean); }},
      {"sine_feedback_fraction", [](const SeedOutcome& s) { return std::optional(s.sine.feedback_fraction); }},
      {"consistent_fraction", [](const SeedOutcome& s) { return std::optional(s.consistent_fraction); }},
  };

  std::string csv = "kind,seeds,epochs_mean,epochs_std,epochs_median,converged";
  std::string md = "| kind | epochs to converge |";
  std::string rule = "|---|---|";
  for (const auto& c : metrics) {
    csv += "," + c.name + "_mean," + c.name + "_std";
    md += " " + c.name + " |";
    rule += "---|";
  }
  csv += ",unstable\n";
  md += " unstable |\n" + rule + "---|\n";

  for (const auto& row : rows) {
    std::vector<double> epochs;
    std::size_t unstable = 0;
    for (const auto& s : row.seeds) {
      if (s.epochs_to_converge) epochs.push_back(static_cast<double>(*s.epochs_to_converge));
      unstable += (s.sine.unstable || s.heldout.unstable) ? 1 : 0;
    }
    const Stats e = stats_of(epochs);
    const std::string n = std::to_string(row.seeds.size());
    csv += row.label + "," + n;
    if (!row.trained || epochs.empty()) {
      csv += ",N/A,N/A,N/A," + std::to_string(epochs.size());
      md += "| " + row.label + " | N/A |";
    } else {
      csv += "," + report_number(e.mean) + "," + report_number(e.std) + "," + report_number(e.median) + "," +
             std::to_string(epochs.size());
      md += "| " + row.label + " | " + report_number(e.mean) + " ± " + report_number(e.std) + " (median " +
            report_number(e.median) + ", " + std::to_string(epochs.size()) + "/" + n + " converged) |";
    }
    for (const auto& c : metrics) {
      std::vector<double> v;
      for (const auto& s : row.seeds)
        if (auto x = c.get(s)) v.push_back(*x);
      const Stats st = stats_of(v);
      csv += "," + report_number(st.mean) + "," + report_number(st.std);
      md += " " + report_number(st.mean) + " ± " + report_number(st.std) + " |";
    }
    csv += "," + std::to_string(unstable) + "\n";
    md += " " + std::to_string(unstable) + " |\n";
  }
  return {csv, md};
}

// Per-epoch curves of several runs in one file, ready for log-scale plotting.
inline std::string training_curves_csv(const std::vector<std::pair<std::string, TrainReport>>& runs) {
  std::size_t n = 0;
  for (const auto& [label, r] : runs)
    if (!r.nmse_per_joint_history.empty()) n = std::max(n, r.nmse_per_joint_history.front().size());
  std::string out = "kind,seed,epoch,loss,nmse_mean,nmse_max";
  for (std::size_t j = 0; j < n; ++j) out += ",nmse" + std::to_string(j);
  out += ",consistent_fraction\n";
  for (const auto& [label, r] : runs) {
    for (std::size_t e = 0; e < r.loss_history.size(); ++e) {
      const auto& v = r.nmse_per_joint_history[e];
      double mean = 0.0;
      for (double x : v) mean += x;
      mean /= static_cast<double>(v.size());
      out += label + "," + std::to_string(r.config.seed) + "," + std::to_string(e) + "," +
             format_double(r.loss_history[e]) + "," + format_double(mean) + "," +
             format_double(*std::max_element(v.begin(), v.end()));
      for (double x : v) out += "," + format_double(x);
      out += "," + format_double(r.consistency_history[e]) + "\n";
    }
  }
  return out;
}

inline std::string online_curves_csv(const std::vector<std::pair<std::string, OnlineReport>>& runs) {
  std::size_t n = 0;
  for (const auto& [label, r] : runs)
    if (!r.nmse_per_joint.empty()) n = std::max(n, r.nmse_per_joint.front().size());
  std::string out = "kind,seed,step,nmse_mean";
  for (std::size_t j = 0; j < n; ++j) out += ",nmse" + std::to_string(j);
  out += ",consistent_fraction\n";
  for (const auto& [label, r] : runs) {
    for (std::size_t s = 0; s < r.nmse_mean.size(); ++s) {
      out += label + "," + std::to_string(r.config.seed) + "," + std::to_string(s + 1) + "," +
             format_double(r.nmse_mean[s]);
      for (double x : r.nmse_per_joint[s]) out += "," + format_double(x);
      out += "," + format_double(r.consistency[s]) + "\n";
    }
  }
  return out;
}

// Fraction of steps, after the first `skip` fraction of the pass, at which
// curve `a` lies strictly below curve `b`.
inline double fraction_below(std::span<const double> a, std::span<const double> b, double skip = 0.1) {
  if (a.size() != b.size() || a.empty()) throw std::invalid_argument("fraction_below: curves differ in length");
  const std::size_t start = static_cast<std::size_t>(std::ceil(skip * static_cast<double>(a.size())));
  if (start >= a.size()) return 1.0;
  std::size_t below = 0;
  for (std::size_t i = start; i < a.size(); ++i) below += a[i] < b[i] ? 1 : 0;
  return static_cast<double>(below) / static_cast<double>(a.size() - start);
}

}  // namespace diffnea
