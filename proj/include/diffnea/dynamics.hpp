#pragma once

// Recursive Newton-Euler inverse dynamics and what is built on top of it.
//
// Kinematic quantities (velocities, accelerations, joint transforms) depend
// only on the state and the fixed kinematics, so they are always computed in
// double. Only the inertial side is generic, which keeps the tape small when
// T = Var.

#include <span>
#include <stdexcept>
#include <vector>

#include "diffnea/autodiff.hpp"
#include "diffnea/inertia.hpp"
#include "diffnea/model.hpp"
#include "diffnea/spatial.hpp"

namespace diffnea {

class SingularMassMatrix : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct JointState {
  std::vector<double> q;
  std::vector<double> qd;
  std::vector<double> qdd;
};

// Inertia of a link about its own origin, ready for the force recursion.
template <class T>
struct RigidBody {
  T mass{};
  Vec3<T> h{};
  Mat3<T> inertia_origin{};
  T damping{};
};

template <class T>
RigidBody<T> rigid_body(const LinkInertia<T>& link) {
  RigidBody<T> b;
  b.mass = link.mass;
  b.h = link.h;
  b.damping = link.damping;
  if (value(link.mass) == 0.0) {
    // Massless bodies carry at most a rotational inertia.
    for (std::size_t i = 0; i < 3; ++i) {
      if (value(link.h[i]) != 0.0) throw std::domain_error("rigid_body: zero mass with non-zero first moment");
    }
    b.inertia_origin = link.inertia_com;
    return b;
  }
  // Parallel axis: I_O = I_C + (1/m) [h]x [h]xᵀ.
  const Mat3<T> hx = skew(link.h);
  b.inertia_origin = link.inertia_com + scale(T(1.0) / link.mass, hx * transpose(hx));
  return b;
}

template <class T>
std::vector<RigidBody<T>> rigid_bodies(std::span<const LinkInertia<T>> links) {
  std::vector<RigidBody<T>> out;
  out.reserve(links.size());
  for (const auto& l : links) out.push_back(rigid_body(l));
  return out;
}

namespace detail {

struct LinkKinematics {
  Mat3<double> to_child;  // parent coordinates -> child coordinates
  Vec3<double> offset;    // child origin in parent coordinates
  Vec3<double> omega, vel;
  Vec3<double> alpha, acc;
};

inline void check_sizes(const RobotModel& model, std::size_t links, std::span<const double> q,
                        std::span<const double> qd, std::span<const double> qdd) {
  const std::size_t n = model.n_dof();
  if (links != model.links.size()) throw std::invalid_argument("dynamics: one inertia per link required");
  if (q.size() != n || qd.size() != n || qdd.size() != n) {
    throw std::invalid_argument("dynamics: joint vectors must have length n_dof");
  }
}

}  // namespace detail

// Joint torques τ = M(q) q̈ + C(q, q̇) q̇ + g(q) + diag(damping) q̇.
template <class T>
std::vector<T> rnea(const RobotModel& model, std::span<const RigidBody<T>> bodies, std::span<const double> q,
                    std::span<const double> qd, std::span<const double> qdd, bool with_gravity = true) {
  detail::check_sizes(model, bodies.size(), q, qd, qdd);
  const std::size_t nl = model.links.size();
  std::vector<detail::LinkKinematics> kin(nl);

  Vec3<double> omega{}, vel{}, alpha{};
  Vec3<double> acc = with_gravity ? -model.gravity : Vec3<double>{};
  std::size_t dof = 0;
  for (std::size_t i = 0; i < nl; ++i) {
    const LinkSpec& link = model.links[i];
    auto& k = kin[i];
    Mat3<double> rot = link.origin.rotation;
    if (link.joint_kind == JointKind::Revolute) rot = rot * axis_angle_rotation(link.axis, q[dof]);
    k.to_child = transpose(rot);
    k.offset = link.origin.translation;

    // Plücker transform of the parent's velocity and acceleration.
    vel = k.to_child * (vel + cross(omega, k.offset));
    acc = k.to_child * (acc + cross(alpha, k.offset));
    omega = k.to_child * omega;
    alpha = k.to_child * alpha;
    if (link.joint_kind == JointKind::Revolute) {
      const Vec3<double> s_qd = scale(qd[dof], link.axis);
      omega = omega + s_qd;
      alpha = alpha + scale(qdd[dof], link.axis) + cross(omega, s_qd);
      acc = acc + cross(vel, s_qd);
      ++dof;
    }
    k.omega = omega;
    k.vel = vel;
    k.alpha = alpha;
    k.acc = acc;
  }

  std::vector<T> tau(model.n_dof());
  Vec3<T> n_child{}, f_child{};
  bool have_child = false;
  dof = model.n_dof();
  for (std::size_t i = nl; i-- > 0;) {
    const auto& k = kin[i];
    const RigidBody<T>& b = bodies[i];
    // I a
    Vec3<T> n = b.inertia_origin * k.alpha + cross(b.h, k.acc);
    Vec3<T> f = scale(b.mass, k.acc) - cross(b.h, k.alpha);
    // v x* (I v)
    const Vec3<T> nv = b.inertia_origin * k.omega + cross(b.h, k.vel);
    const Vec3<T> fv = scale(b.mass, k.vel) - cross(b.h, k.omega);
    n = n + cross(k.omega, nv) + cross(k.vel, fv);
    f = f + cross(k.omega, fv);
    if (have_child) {
      n = n + n_child;
      f = f + f_child;
    }
    const LinkSpec& link = model.links[i];
    if (link.joint_kind == JointKind::Revolute) {
      --dof;
      tau[dof] = dot(link.axis, n) + b.damping * qd[dof];
    }
    // Express in the parent frame, moment about the parent origin.
    const Vec3<T> f_parent = transpose_times(k.to_child, f);
    n_child = transpose_times(k.to_child, n) + cross(k.offset, f_parent);
    f_child = f_parent;
    have_child = true;
  }
  return tau;
}

template <class T>
std::vector<T> rnea(const RobotModel& model, std::span<const LinkInertia<T>> links, const JointState& s) {
  const auto bodies = rigid_bodies(links);
  return rnea<T>(model, bodies, s.q, s.qd, s.qdd);
}

// C(q, q̇) q̇ + g(q) + friction: inverse dynamics at zero acceleration.
template <class T>
std::vector<T> bias_forces(const RobotModel& model, std::span<const RigidBody<T>> bodies, std::span<const double> q,
                           std::span<const double> qd) {
  const std::vector<double> zero(model.n_dof(), 0.0);
  return rnea<T>(model, bodies, q, qd, zero);
}

template <class T>
struct SquareMatrix {
  std::size_t n = 0;
  std::vector<T> data;  // row-major

  explicit SquareMatrix(std::size_t size = 0) : n(size), data(size * size) {}
  T& operator()(std::size_t i, std::size_t j) { return data[i * n + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return data[i * n + j]; }
};

// Unit-vector method with gravity off: column j = rnea(q, 0, e_j) - rnea(q, 0, 0).
// The second term vanishes identically (no velocity, no gravity), so it is
// not evaluated.
template <class T>
SquareMatrix<T> mass_matrix(const RobotModel& model, std::span<const RigidBody<T>> bodies,
                            std::span<const double> q) {
  const std::size_t n = model.n_dof();
  SquareMatrix<T> m(n);
  const std::vector<double> zero(n, 0.0);
  std::vector<double> unit(n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    unit[j] = 1.0;
    const auto col = rnea<T>(model, bodies, q, zero, unit, /*with_gravity=*/false);
    for (std::size_t i = 0; i < n; ++i) m(i, j) = col[i];
    unit[j] = 0.0;
  }
  return m;
}

// In-place Cholesky (lower triangle) followed by a solve. Throws
// SingularMassMatrix when a pivot is not strictly positive.
template <class T>
std::vector<T> cholesky_solve(SquareMatrix<T> a, std::vector<T> rhs) {
  const std::size_t n = a.n;
  for (std::size_t j = 0; j < n; ++j) {
    T d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d = d - a(j, k) * a(j, k);
    if (!(value(d) > 0.0)) {
      throw SingularMassMatrix("mass matrix is not positive definite (pivot " + std::to_string(j) + " = " +
                               std::to_string(value(d)) + ")");
    }
    const T l = sqrt(d);
    a(j, j) = l;
    for (std::size_t i = j + 1; i < n; ++i) {
      T s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s = s - a(i, k) * a(j, k);
      a(i, j) = s / l;
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    T s = rhs[i];
    for (std::size_t k = 0; k < i; ++k) s = s - a(i, k) * rhs[k];
    rhs[i] = s / a(i, i);
  }
  for (std::size_t i = n; i-- > 0;) {
    T s = rhs[i];
    for (std::size_t k = i + 1; k < n; ++k) s = s - a(k, i) * rhs[k];
    rhs[i] = s / a(i, i);
  }
  return rhs;
}

// q̈ = M(q)⁻¹ (τ - bias(q, q̇)), bias including friction.
template <class T, class Tau>
std::vector<T> forward_dynamics(const RobotModel& model, std::span<const RigidBody<T>> bodies,
                                std::span<const double> q, std::span<const double> qd, std::span<const Tau> tau) {
  const std::size_t n = model.n_dof();
  if (tau.size() != n) throw std::invalid_argument("forward_dynamics: tau must have length n_dof");
  const auto bias = bias_forces<T>(model, bodies, q, qd);
  std::vector<T> rhs(n);
  for (std::size_t i = 0; i < n; ++i) rhs[i] = tau[i] - bias[i];
  return cholesky_solve(mass_matrix<T>(model, bodies, q), std::move(rhs));
}

// Semi-implicit Euler. The returned state carries the advanced q, q̇ and, in
// qdd, the forward-dynamics acceleration that was integrated.
inline JointState step(const RobotModel& model, std::span<const RigidBody<double>> bodies,
                       std::span<const double> q, std::span<const double> qd, std::span<const double> tau,
                       double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("step: dt must be positive");
  JointState next;
  next.qdd = forward_dynamics<double, double>(model, bodies, q, qd, tau);
  const std::size_t n = q.size();
  next.q.resize(n);
  next.qd.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    next.qd[i] = qd[i] + dt * next.qdd[i];
    next.q[i] = q[i] + dt * next.qd[i];
  }
  return next;
}

}  // namespace diffnea
