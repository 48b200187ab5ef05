#pragma once

// Training data from closed-loop tracking of per-joint sine references.

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffnea/dynamics.hpp"
#include "diffnea/model.hpp"
#include "diffnea/trajectory.hpp"

namespace diffnea {

struct SineSpec {
  std::vector<double> periods;              // s, per joint
  std::vector<double> amplitude_fractions;  // of half the joint range
  double duration = 240.0;                  // s
  double rate = 250.0;                      // Hz

  // The 7-joint periods and amplitudes used for the arm experiments,
  // truncated for smaller chains.
  static SineSpec standard(std::size_t n_dof) {
    static const std::vector<double> periods{23.0, 19.0, 17.0, 13.0, 11.0, 7.0, 5.0};
    static const std::vector<double> fractions{0.7, 0.5, 0.5, 0.5, 0.65, 0.65, 0.7};
    if (n_dof > periods.size()) throw std::invalid_argument("no standard sine spec for more than 7 joints");
    SineSpec s;
    s.periods.assign(periods.begin(), periods.begin() + static_cast<std::ptrdiff_t>(n_dof));
    s.amplitude_fractions.assign(fractions.begin(), fractions.begin() + static_cast<std::ptrdiff_t>(n_dof));
    return s;
  }

  std::size_t steps() const { return static_cast<std::size_t>(std::llround(duration * rate)); }

  void validate(std::size_t n_dof) const {
    if (periods.size() != n_dof || amplitude_fractions.size() != n_dof) {
      throw std::invalid_argument("sine spec needs one period and one amplitude per joint (" + std::to_string(n_dof) +
                                  ")");
    }
    for (double p : periods)
      if (!(p > 0.0)) throw std::invalid_argument("sine periods must be positive");
    for (double f : amplitude_fractions)
      if (!(f > 0.0 && f <= 1.0)) throw std::invalid_argument("amplitude fractions must lie in (0, 1]");
    if (!(rate > 0.0)) throw std::invalid_argument("rate must be positive");
    if (!(duration > 0.0)) throw std::invalid_argument("duration must be positive");
  }
};

inline void to_json(nlohmann::json& j, const SineSpec& s) {
  j = nlohmann::json{{"periods", s.periods},
                     {"amplitude_fractions", s.amplitude_fractions},
                     {"duration", s.duration},
                     {"rate", s.rate}};
}

inline void from_json(const nlohmann::json& j, SineSpec& s) {
  if (j.contains("periods")) s.periods = j.at("periods").get<std::vector<double>>();
  if (j.contains("amplitude_fractions")) s.amplitude_fractions = j.at("amplitude_fractions").get<std::vector<double>>();
  s.duration = j.value("duration", s.duration);
  s.rate = j.value("rate", s.rate);
}

struct JointTarget {
  std::vector<double> q, qd, qdd;
};

using ReferenceFn = std::function<JointTarget(double)>;

inline JointTarget sine_reference(const SineSpec& spec, std::span<const JointLimits> limits, double t) {
  if (t < 0.0) throw std::invalid_argument("sine_reference: t must be non-negative");
  const std::size_t n = spec.periods.size();
  if (limits.size() != n) throw std::invalid_argument("sine_reference: one joint limit per joint required");
  JointTarget r{std::vector<double>(n), std::vector<double>(n), std::vector<double>(n)};
  for (std::size_t j = 0; j < n; ++j) {
    const double amp = spec.amplitude_fractions[j] * (limits[j].upper - limits[j].lower) / 2.0;
    const double mid = (limits[j].upper + limits[j].lower) / 2.0;
    const double w = 2.0 * std::numbers::pi / spec.periods[j];
    r.q[j] = mid + amp * std::sin(w * t);
    r.qd[j] = amp * w * std::cos(w * t);
    r.qdd[j] = -amp * w * w * std::sin(w * t);
  }
  return r;
}

inline ReferenceFn sine_reference_fn(SineSpec spec, std::vector<JointLimits> limits) {
  return [spec = std::move(spec), limits = std::move(limits)](double t) { return sine_reference(spec, limits, t); };
}

struct PdGains {
  std::vector<double> kp, kd;

  static PdGains uniform(std::size_t n, double kp = 100.0, double kd = 10.0) {
    return {std::vector<double>(n, kp), std::vector<double>(n, kd)};
  }
};

inline void to_json(nlohmann::json& j, const PdGains& g) { j = nlohmann::json{{"kp", g.kp}, {"kd", g.kd}}; }

class SimulationDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Joint speed beyond which a simulation counts as diverged.
inline constexpr double kDivergenceSpeed = 100.0;

struct ClosedLoopLog {
  Trajectory traj;                           // realized states and applied torques
  std::vector<std::vector<double>> q_des, qd_des;
  std::vector<std::vector<double>> tau_fb;  // feedback share of each applied torque
  bool diverged = false;
  std::string diagnostic;
};

// Computed-torque tracking: tau = ID_ff(q_d, qd_d, qdd_d) + Kp (q_d - q) + Kd (qd_d - qd),
// plant advanced with dynamics::step. Stops early on divergence.
inline ClosedLoopLog run_closed_loop(const RobotModel& model, std::span<const RigidBody<double>> plant,
                                     std::span<const RigidBody<double>> feedforward, const ReferenceFn& reference,
                                     double duration, double rate, const PdGains& gains) {
  const std::size_t n = model.n_dof();
  if (gains.kp.size() != n || gains.kd.size() != n) throw std::invalid_argument("PD gains need one entry per joint");
  if (!(rate > 0.0)) throw std::invalid_argument("rate must be positive");
  const std::size_t steps = static_cast<std::size_t>(std::llround(duration * rate));
  const double dt = 1.0 / rate;

  ClosedLoopLog log;
  log.traj.n_dof = n;
  log.traj.records.reserve(steps);
  const JointTarget start = reference(0.0);
  std::vector<double> q = start.q, qd = start.qd;
  std::vector<double> tau(n), fb(n);
  for (std::size_t k = 0; k < steps; ++k) {
    const double t = static_cast<double>(k) / rate;
    const JointTarget des = reference(t);
    const auto ff = rnea<double>(model, feedforward, des.q, des.qd, des.qdd);
    for (std::size_t j = 0; j < n; ++j) {
      fb[j] = gains.kp[j] * (des.q[j] - q[j]) + gains.kd[j] * (des.qd[j] - qd[j]);
      tau[j] = ff[j] + fb[j];
    }
    JointState next = step(model, plant, q, qd, tau, dt);
    log.traj.records.push_back({t, q, qd, next.qdd, tau});
    log.q_des.push_back(des.q);
    log.qd_des.push_back(des.qd);
    log.tau_fb.push_back(fb);
    for (std::size_t j = 0; j < n; ++j) {
      if (!std::isfinite(next.qd[j]) || !std::isfinite(next.q[j]) || std::abs(next.qd[j]) > kDivergenceSpeed) {
        log.diverged = true;
        log.diagnostic = "joint " + std::to_string(j) + " speed " + format_double(next.qd[j]) + " rad/s at t = " +
                         format_double(t + dt) + " s";
        return log;
      }
    }
    q = std::move(next.q);
    qd = std::move(next.qd);
  }
  return log;
}

// Closed-loop tracking of the sine reference with the true model as feed-forward.
inline Trajectory generate_dataset(const RobotModel& model, std::span<const LinkInertia<double>> true_inertias,
                                   const SineSpec& spec, const PdGains& gains) {
  spec.validate(model.n_dof());
  const auto bodies = rigid_bodies(true_inertias);
  const auto log = run_closed_loop(model, bodies, bodies, sine_reference_fn(spec, model.joint_limits()),
                                   spec.duration, spec.rate, gains);
  if (log.diverged) throw SimulationDiverged("data generation diverged: " + log.diagnostic);
  return log.traj;
}

inline std::string model_hash(const RobotModel& model) { return fnv1a_hex(emit_urdf(model)); }

inline nlohmann::ordered_json dataset_sidecar(const RobotModel& model, const SineSpec& spec, const PdGains& gains,
                                              std::uint64_t seed, std::size_t records) {
  nlohmann::ordered_json j;
  j["model"] = model.name;
  j["model_hash"] = model_hash(model);
  j["n_dof"] = model.n_dof();
  j["records"] = records;
  j["columns"] = csv_header(model.n_dof());
  j["sine"] = nlohmann::json(spec);
  j["gains"] = nlohmann::json(gains);
  j["seed"] = seed;
  return j;
}

}  // namespace diffnea
