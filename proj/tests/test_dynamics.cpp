#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "diffnea/dynamics.hpp"
#include "test_support.hpp"

namespace diffnea {
namespace {

using testing::load_model;
using testing::pendulum_urdf;
using testing::uniform_vector;

std::vector<RigidBody<double>> bodies_of(const RobotModel& m) {
  const auto in = m.inertias();
  return rigid_bodies<double>(in);
}

std::vector<double> id(const RobotModel& m, std::span<const RigidBody<double>> b, const std::vector<double>& q,
                       const std::vector<double>& qd, const std::vector<double>& qdd) {
  return rnea<double>(m, b, q, qd, qdd);
}

TEST(Rnea, ZeroGravityAtRestIsZero) {
  for (const char* f : {"arm7.urdf", "two_link.urdf"}) {
    RobotModel m = load_model(f);
    m.gravity = {};
    const auto b = bodies_of(m);
    std::mt19937_64 rng(1);
    const auto q = uniform_vector(rng, m.n_dof(), -2, 2);
    const std::vector<double> zero(m.n_dof(), 0.0);
    for (double t : id(m, b, q, zero, zero)) EXPECT_EQ(t, 0.0);
  }
}

TEST(Rnea, PendulumExample) {
  const RobotModel m = parse_urdf(pendulum_urdf(1.0, 0.5));
  const auto b = bodies_of(m);
  const auto tau = id(m, b, {0.0}, {0.0}, {0.0});
  EXPECT_NEAR(tau[0], 4.905, 1e-12);
}

// m g l cos(q) + (m l² + I) q̈ + d q̇ for a point mass on a massless rod.
TEST(Rnea, PendulumAnalyticSweep) {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> mass(0.1, 5), len(0.1, 2), ang(-3, 3), vel(-5, 5), damp(0, 2);
  for (int t = 0; t < 200; ++t) {
    const double mm = mass(rng), l = len(rng), inertia = t % 2 ? 0.0 : 0.01, d = damp(rng);
    const RobotModel m = parse_urdf(pendulum_urdf(mm, l, inertia, d));
    const auto b = bodies_of(m);
    const double q = ang(rng), qd = vel(rng), qdd = vel(rng);
    const double expected = mm * 9.81 * l * std::cos(q) + (mm * l * l + inertia) * qdd + d * qd;
    EXPECT_NEAR(id(m, b, {q}, {qd}, {qdd})[0], expected, 1e-10 * std::max(1.0, std::abs(expected)));
  }
}

TEST(BiasForces, Examples) {
  RobotModel p = parse_urdf(pendulum_urdf(1.0, 0.5));
  auto b = bodies_of(p);
  const std::vector<double> q{std::numbers::pi / 2}, qd{0.0};
  EXPECT_NEAR(bias_forces<double>(p, b, q, qd)[0], 0.0, 1e-15);

  RobotModel arm = load_model("arm7.urdf");
  const auto ab = bodies_of(arm);
  std::mt19937_64 rng(3);
  const auto aq = uniform_vector(rng, 7, -2, 2), aqd = uniform_vector(rng, 7, -2, 2);
  EXPECT_EQ(bias_forces<double>(arm, ab, aq, aqd), id(arm, ab, aq, aqd, std::vector<double>(7, 0.0)));
  arm.gravity = {};
  for (double t : bias_forces<double>(arm, ab, aq, std::vector<double>(7, 0.0))) EXPECT_EQ(t, 0.0);
}

TEST(MassMatrix, PendulumScalar) {
  const RobotModel m = parse_urdf(pendulum_urdf(2.0, 0.7, 0.03));
  const auto b = bodies_of(m);
  const std::vector<double> q{0.4};
  const auto mm = mass_matrix<double>(m, b, q);
  ASSERT_EQ(mm.n, 1u);
  EXPECT_NEAR(mm(0, 0), 2.0 * 0.49 + 0.03, 1e-14);
}

TEST(MassMatrix, SymmetricAndPositiveDefinite) {
  const RobotModel m = load_model("arm7.urdf");
  const auto b = bodies_of(m);
  std::mt19937_64 rng(4);
  for (int t = 0; t < 100; ++t) {
    const auto q = uniform_vector(rng, 7, -3, 3);
    const auto mm = mass_matrix<double>(m, b, q);
    Eigen::Matrix<double, 7, 7> e;
    for (int i = 0; i < 7; ++i)
      for (int j = 0; j < 7; ++j) e(i, j) = mm(i, j);
    EXPECT_LT((e - e.transpose()).cwiseAbs().maxCoeff(), 1e-9);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix<double, 7, 7>> eig(e);
    EXPECT_GT(eig.eigenvalues().minCoeff(), 0.0);
  }
}

TEST(ForwardDynamics, BiasTorqueGivesZeroAcceleration) {
  const RobotModel m = load_model("arm7.urdf");
  const auto b = bodies_of(m);
  std::mt19937_64 rng(5);
  const auto q = uniform_vector(rng, 7, -2, 2), qd = uniform_vector(rng, 7, -2, 2);
  const auto tau = bias_forces<double>(m, b, q, qd);
  for (double a : forward_dynamics<double, double>(m, b, q, qd, tau)) EXPECT_NEAR(a, 0.0, 1e-12);
}

TEST(ForwardDynamics, PendulumFreeFall) {
  const double mm = 1.5, l = 0.6, inertia = 0.02;
  const RobotModel m = parse_urdf(pendulum_urdf(mm, l, inertia));
  const auto b = bodies_of(m);
  const std::vector<double> zero{0.0};
  const auto qdd = forward_dynamics<double, double>(m, b, zero, zero, zero);
  EXPECT_NEAR(qdd[0], -(mm * 9.81 * l) / (mm * l * l + inertia), 1e-12);
}

TEST(ForwardDynamics, RoundTripWithInverseDynamics) {
  RobotModel m = load_model("arm7.urdf");
  for (std::size_t i = 1; i < m.links.size(); ++i) m.links[i].inertia.damping = 0.1 * static_cast<double>(i);
  const auto b = bodies_of(m);
  std::mt19937_64 rng(6);
  double worst = 0.0;
  for (int t = 0; t < 200; ++t) {
    const auto q = uniform_vector(rng, 7, -3, 3), qd = uniform_vector(rng, 7, -3, 3),
               qdd = uniform_vector(rng, 7, -10, 10);
    const auto tau = id(m, b, q, qd, qdd);
    const auto back = forward_dynamics<double, double>(m, b, q, qd, tau);
    for (std::size_t i = 0; i < 7; ++i) worst = std::max(worst, std::abs(back[i] - qdd[i]));
  }
  EXPECT_LT(worst, 1e-8);
}

TEST(ForwardDynamics, SingularMassMatrixRaised) {
  RobotModel m = parse_urdf(pendulum_urdf(1.0, 0.5));
  auto in = m.inertias();
  in[1].mass = -1.0;
  in[1].h = {-0.5, 0.0, 0.0};
  const auto b = rigid_bodies<double>(in);
  const std::vector<double> zero{0.0};
  EXPECT_THROW((forward_dynamics<double, double>(m, b, zero, zero, zero)), SingularMassMatrix);
}

TEST(Dynamics, DimensionMismatch) {
  const RobotModel m = load_model("two_link.urdf");
  const auto b = bodies_of(m);
  EXPECT_THROW(id(m, b, {0.0}, {0.0, 0.0}, {0.0, 0.0}), std::invalid_argument);
  const std::vector<RigidBody<double>> few(b.begin(), b.end() - 1);
  EXPECT_THROW(id(m, few, {0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}), std::invalid_argument);
}

TEST(Dynamics, LinearInInertialParameters) {
  const RobotModel m = load_model("arm7.urdf");
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n(0.0, 1.0);
  auto random_links = [&] {
    auto in = m.inertias();
    for (auto& l : in) {
      l.mass = n(rng);
      for (auto& x : l.h.v) x = n(rng);
      for (auto& x : l.inertia_com.m) x = n(rng);
      l.damping = 0.3;
    }
    return in;
  };
  for (int t = 0; t < 20; ++t) {
    const auto a = random_links(), c = random_links();
    const double alpha = std::uniform_real_distribution<double>(-1, 2)(rng);
    auto mix = a;
    for (std::size_t i = 0; i < a.size(); ++i) {
      mix[i].mass = alpha * a[i].mass + (1 - alpha) * c[i].mass;
      for (std::size_t k = 0; k < 3; ++k) mix[i].h[k] = alpha * a[i].h[k] + (1 - alpha) * c[i].h[k];
      for (std::size_t k = 0; k < 9; ++k)
        mix[i].inertia_com.m[k] = alpha * a[i].inertia_com.m[k] + (1 - alpha) * c[i].inertia_com.m[k];
    }
    // rigid_body() applies the parallel axis theorem, which is not linear in
    // (m, h, I_C); build bodies whose origin inertia is linear instead.
    auto bodies = [](const std::vector<LinkInertia<double>>& in) {
      std::vector<RigidBody<double>> out;
      for (const auto& l : in) out.push_back({l.mass, l.h, l.inertia_com, l.damping});
      return out;
    };
    const auto q = uniform_vector(rng, 7, -2, 2), qd = uniform_vector(rng, 7, -2, 2),
               qdd = uniform_vector(rng, 7, -2, 2);
    const auto ta = id(m, bodies(a), q, qd, qdd), tc = id(m, bodies(c), q, qd, qdd),
               tm = id(m, bodies(mix), q, qd, qdd);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(tm[i], alpha * ta[i] + (1 - alpha) * tc[i], 1e-9);
  }
}

TEST(Dynamics, MasslessFixedLinkChangesNothing) {
  const RobotModel m = load_model("arm7.urdf");
  RobotModel extended = m;
  LinkSpec tip;
  tip.name = "tool";
  tip.joint_name = "tool_mount";
  tip.origin = {rpy_to_rotation({0.1, 0.2, 0.3}), {0.0, 0.0, 0.1}};
  extended.links.push_back(tip);
  const auto b = bodies_of(m), be = bodies_of(extended);
  std::mt19937_64 rng(8);
  for (int t = 0; t < 20; ++t) {
    const auto q = uniform_vector(rng, 7, -2, 2), qd = uniform_vector(rng, 7, -2, 2),
               qdd = uniform_vector(rng, 7, -2, 2);
    const auto a = id(m, b, q, qd, qdd), c = id(extended, be, q, qd, qdd);
    for (std::size_t i = 0; i < 7; ++i) EXPECT_NEAR(a[i], c[i], 1e-12);
  }
}

TEST(Dynamics, MasslessBodyWithFirstMomentRejected) {
  LinkInertia<double> l;
  l.h = {0.1, 0, 0};
  EXPECT_THROW(rigid_body(l), std::domain_error);
}

// Gradient of Σ τ² with respect to every inertial quantity, through RNEA on the tape.
TEST(Dynamics, TapeGradientMatchesFiniteDifferences) {
  const RobotModel m = load_model("two_link.urdf");
  std::mt19937_64 rng(9);
  const auto q = uniform_vector(rng, 2, -2, 2), qd = uniform_vector(rng, 2, -2, 2),
             qdd = uniform_vector(rng, 2, -2, 2);
  std::vector<double> x;
  for (const auto& l : m.inertias()) {
    x.push_back(l.mass);
    x.insert(x.end(), l.h.v.begin(), l.h.v.end());
    x.insert(x.end(), l.inertia_com.m.begin(), l.inertia_com.m.end());
  }
  auto loss = [&](auto theta) {
    using T = std::remove_cvref_t<decltype(theta[0])>;
    std::vector<LinkInertia<T>> in(m.links.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
      const auto s = theta.subspan(i * 13, 13);
      in[i].mass = s[0];
      for (std::size_t k = 0; k < 3; ++k) in[i].h[k] = s[1 + k];
      for (std::size_t k = 0; k < 9; ++k) in[i].inertia_com.m[k] = s[4 + k];
    }
    const auto bodies = rigid_bodies<T>(in);
    const auto tau = rnea<T>(m, bodies, q, qd, qdd);
    T sum = 0.0;
    for (const auto& t : tau) sum = sum + t * t;
    return sum;
  };
  EXPECT_LT(grad_check(loss, x, 1e-6), 1e-6);
}

TEST(Step, ZeroDynamicsLeavesStateUnchanged) {
  RobotModel m = load_model("two_link.urdf");
  m.gravity = {};
  const auto b = bodies_of(m);
  const std::vector<double> q{0.3, -0.2}, zero{0.0, 0.0};
  const auto next = step(m, b, q, zero, zero, 0.004);
  EXPECT_EQ(next.q, q);
  EXPECT_EQ(next.qd, zero);
  EXPECT_EQ(next.qdd, zero);
}

TEST(Step, RecordsForwardDynamicsAcceleration) {
  const RobotModel m = load_model("two_link.urdf");
  const auto b = bodies_of(m);
  const std::vector<double> q{0.3, -0.2}, qd{0.5, 1.0}, tau{1.0, -2.0};
  const auto next = step(m, b, q, qd, tau, 0.01);
  const auto qdd = forward_dynamics<double, double>(m, b, q, qd, tau);
  EXPECT_EQ(next.qdd, qdd);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(next.qd[i], qd[i] + 0.01 * qdd[i]);
    EXPECT_EQ(next.q[i], q[i] + 0.01 * next.qd[i]);
  }
}

TEST(Step, NonPositiveDtRejected) {
  const RobotModel m = load_model("two_link.urdf");
  const auto b = bodies_of(m);
  const std::vector<double> z{0.0, 0.0};
  EXPECT_THROW(step(m, b, z, z, z, 0.0), std::invalid_argument);
  EXPECT_THROW(step(m, b, z, z, z, -1.0), std::invalid_argument);
}

TEST(Step, PendulumEnergyDriftBounded) {
  const double mm = 1.0, l = 0.5, inertia = 0.01, g = 9.81;
  const RobotModel m = parse_urdf(pendulum_urdf(mm, l, inertia));
  const auto b = bodies_of(m);
  // Released from horizontal; potential measured from the lowest bob position.
  auto energy = [&](double q, double qd) {
    return 0.5 * (mm * l * l + inertia) * qd * qd + mm * g * l * (1.0 + std::sin(q));
  };
  std::vector<double> q{0.0}, qd{0.0};
  const std::vector<double> zero{0.0};
  const double e0 = energy(q[0], qd[0]);
  double worst = 0.0;
  for (int k = 0; k < 2500; ++k) {
    const auto next = step(m, b, q, qd, zero, 1.0 / 250.0);
    q = next.q;
    qd = next.qd;
    worst = std::max(worst, std::abs(energy(q[0], qd[0]) - e0));
  }
  EXPECT_LT(worst / e0, 0.02);
}

}  // namespace
}  // namespace diffnea
