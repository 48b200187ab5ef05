#include <cmath>
#include <numbers>
#include <random>

#include <Eigen/Dense>
#include <gtest/gtest.h>

#include "diffnea/params.hpp"
#include "test_support.hpp"

namespace diffnea {
namespace {

using testing::load_model;

constexpr double kB = kDefaultBias;

Eigen::Vector3d eigenvalues(const Mat3<double>& m) {
  Eigen::Matrix3d e;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) e(i, j) = m(i, j);
  return Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d>(e, Eigen::EigenvaluesOnly).eigenvalues();
}

std::vector<double> random_theta(std::mt19937_64& rng, std::size_t n, double scale_by) {
  std::uniform_real_distribution<double> u(-scale_by, scale_by);
  std::vector<double> t(n);
  for (double& x : t) x = u(rng);
  return t;
}

LinkInertia<double> mat(Kind k, const std::vector<double>& t, double b = kB) {
  return materialize<double>(k, t, b);
}

TEST(NoStr, Examples) {
  std::vector<double> t{2, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1};
  auto l = mat(Kind::NoStr, t);
  EXPECT_EQ(l.mass, 2.0);
  EXPECT_EQ(max_abs_diff(l.inertia_com, Mat3<double>::identity()), 0.0);

  t = {1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  l = mat(Kind::NoStr, t);
  for (std::size_t i = 0; i < 9; ++i) EXPECT_EQ(l.inertia_com.m[i], t[4 + i]);

  t[0] = -1;
  EXPECT_EQ(mat(Kind::NoStr, t).mass, -1.0);
  EXPECT_THROW(mat(Kind::NoStr, std::vector<double>(10)), std::invalid_argument);
}

TEST(Symm, Examples) {
  std::vector<double> t{2, 0.1, 0.2, 0.3, 1, 2, 3, 4, 5, 6};
  auto l = mat(Kind::Symm, t);
  EXPECT_EQ(l.mass, 4.0001);
  EXPECT_EQ(l.h[2], 0.3);
  EXPECT_EQ(l.inertia_com(0, 0), 1.0);
  EXPECT_EQ(l.inertia_com(1, 1), 2.0);
  EXPECT_EQ(l.inertia_com(2, 2), 3.0);
  EXPECT_EQ(l.inertia_com(0, 1), 4.0);
  EXPECT_EQ(l.inertia_com(0, 2), 5.0);
  EXPECT_EQ(l.inertia_com(1, 2), 6.0);
  EXPECT_EQ(max_abs_diff(l.inertia_com, transpose(l.inertia_com)), 0.0);
  t[0] = 0.0;
  EXPECT_EQ(mat(Kind::Symm, t).mass, kB);
}

TEST(Symm, PositiveMassButIndefiniteWitness) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 1000; ++i) {
    const auto l = mat(Kind::Symm, random_theta(rng, 10, 10.0));
    EXPECT_GE(l.mass, kB);
    EXPECT_EQ(max_abs_diff(l.inertia_com, transpose(l.inertia_com)), 0.0);
  }
  const std::vector<double> witness{1, 0, 0, 0, 1, 1, 1, 2, 0, 0};  // xy = 2 > sqrt(xx yy)
  const auto l = mat(Kind::Symm, witness);
  EXPECT_LT(eigenvalues(l.inertia_com)(0), 0.0);
  EXPECT_FALSE(consistency_check(l).inertia_spd);
}

TEST(Spd, Examples) {
  const std::vector<double> t{1, 0, 0, 0, 1, 1, 1, 0, 0, 0};
  EXPECT_EQ(max_abs_diff(mat(Kind::SPD, t, 0.0).inertia_com, Mat3<double>::identity()), 0.0);
  const auto b = mat(Kind::SPD, t);
  EXPECT_EQ(b.inertia_com(0, 0), 1.0 + kB);
  EXPECT_EQ(b.mass, 1.0 + kB);
}

TEST(Spd, MinEigenvalueAtLeastBias) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 2000; ++i) {
    const double s = i % 2 ? 0.01 : 3.0;
    const auto l = mat(Kind::SPD, random_theta(rng, 10, s));
    EXPECT_GE(eigenvalues(l.inertia_com)(0), kB * (1 - 1e-9) - 1e-15);
  }
}

TEST(Spd, TriangleInequalityWitness) {
  const std::vector<double> witness{1, 0, 0, 0, 1, 1, std::sqrt(3.0), 0, 0, 0};
  const auto l = mat(Kind::SPD, witness, 0.0);
  EXPECT_NEAR(l.inertia_com(2, 2), 3.0, 1e-15);
  const auto r = consistency_check(l);
  EXPECT_TRUE(r.inertia_spd);
  EXPECT_FALSE(r.triangle_ineq);
  EXPECT_FALSE(consistency_check(mat(Kind::SPD, witness)).triangle_ineq);
}

TEST(Tri, RightAngleExample) {
  const double s = std::sqrt(1.0 - kB);
  const std::vector<double> t{1, 0, 0, 0, 0, 0, 0, s, s, 0};
  const auto l = mat(Kind::Tri, t);
  const Mat3<double> expected = Mat3<double>::diagonal(1.0, 1.0, std::sqrt(2.0));
  EXPECT_LT(max_abs_diff(l.inertia_com, expected), 1e-15);
}

TEST(Tri, DegenerateLimit) {
  const std::vector<double> t{1, 0, 0, 0, 0.3, -0.2, 0.1, 1.2, 0.7, 800.0};
  const auto j = tri_moments(t[7], t[8], t[9], kB);
  EXPECT_NEAR(j.j3, j.j1 + j.j2, 1e-15 * (j.j1 + j.j2));
  EXPECT_TRUE(consistency_check(mat(Kind::Tri, t)).fully_consistent);
}

TEST(Tri, SweepSatisfiesTriangleInequality) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 10000; ++i) {
    const auto t = random_theta(rng, 10, i % 3 == 0 ? 20.0 : 2.0);
    const auto j = tri_moments(t[7], t[8], t[9], kB);
    EXPECT_GE(j.j1 + j.j2, j.j3);
    EXPECT_GE(j.j1 + j.j3, j.j2);
    EXPECT_GE(j.j2 + j.j3, j.j1);
    const auto ev = eigenvalues(mat(Kind::Tri, t).inertia_com);
    EXPECT_GE(ev(0) + ev(1) - ev(2), -1e-12 * ev.sum());
  }
}

// Rotating by one extra full turn around the same axis gives the same inertia.
TEST(Tri, RotationVectorRedundancy) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 100; ++i) {
    auto t = random_theta(rng, 10, 2.0);
    const auto a = mat(Kind::Tri, t);
    const double n = std::sqrt(t[4] * t[4] + t[5] * t[5] + t[6] * t[6]);
    for (std::size_t k = 4; k < 7; ++k) t[k] *= 1.0 + 2.0 * std::numbers::pi / n;
    EXPECT_LT(max_abs_diff(a.inertia_com, mat(Kind::Tri, t).inertia_com), 1e-9);
  }
}

TEST(Cov, Examples) {
  const std::vector<double> t{1, 0, 0, 0, 1, 1, 1, 0, 0, 0};
  const auto l = mat(Kind::Cov, t, 0.0);
  EXPECT_EQ(max_abs_diff(l.inertia_com, scale(2.0, Mat3<double>::identity())), 0.0);
}

TEST(Cov, CovarianceRecoveredFromInertia) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    const auto t = random_theta(rng, 10, 2.0);
    const auto l = mat(Kind::Cov, t);
    const Mat3<double> sigma = scale(0.5 * trace(l.inertia_com), Mat3<double>::identity()) - l.inertia_com;
    // Oracle: build L Lᵀ + bI directly.
    Eigen::Matrix3d lo = Eigen::Matrix3d::Zero();
    lo << t[4], 0, 0, t[7], t[5], 0, t[8], t[9], t[6];
    const Eigen::Matrix3d ref = lo * lo.transpose() + kB * Eigen::Matrix3d::Identity();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) EXPECT_NEAR(sigma(r, c), ref(r, c), 1e-12 * std::max(1.0, ref.norm()));
  }
}

TEST(Cov, EigenvaluesSatisfyTriangleInequality) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 10000; ++i) {
    const auto ev = eigenvalues(mat(Kind::Cov, random_theta(rng, 10, i % 3 == 0 ? 20.0 : 2.0)).inertia_com);
    EXPECT_GT(ev(0), 0.0);
    EXPECT_GE(ev(0) + ev(1) - ev(2), 0.0);
  }
}

// Every θ, including large magnitudes, lands on a physically consistent inertia.
TEST(HardConstraints, TriAndCovAlwaysConsistent) {
  std::mt19937_64 rng(7);
  const std::array<double, 5> scales{1e-3, 1e-1, 1.0, 30.0, 1e3};
  for (Kind k : {Kind::Tri, Kind::Cov}) {
    int bad = 0;
    for (int i = 0; i < 100000; ++i) {
      const auto r = consistency_check(mat(k, random_theta(rng, 10, scales[i % scales.size()])));
      if (!r.fully_consistent || !r.routes_agree) {
        ++bad;
        ADD_FAILURE() << kind_label(k) << " " << violations(r) << " moments " << r.principal_moments[0] << " "
                      << r.principal_moments[1] << " " << r.principal_moments[2] << " agree " << r.routes_agree;
      }
    }
    EXPECT_EQ(bad, 0) << kind_label(k);
  }
}

TEST(Damping, Examples) {
  EXPECT_EQ(materialize_damping(0.0), 0.0);
  EXPECT_EQ(materialize_damping(3.0), 9.0);
  Tape tape;
  const Var x = tape.variable(-1.5);
  tape.backward(materialize_damping(x));
  EXPECT_EQ(tape.adjoint(x), -3.0);
  auto f = [](auto t) { return materialize_damping(t[0]); };
  const std::vector<double> at{0.7};
  EXPECT_LT(grad_check(f, at, 1e-6), 1e-8);
  EXPECT_EQ(invert_damping(9.0), 3.0);
  EXPECT_THROW(invert_damping(-1.0), NotRepresentable);
}

TEST(Materialize, DifferentiableForEveryKind) {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> n(0.0, 1.0);
  for (Kind k : kAllKinds) {
    const std::size_t slots = slots_per_link(k);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) {
      std::vector<double> theta(slots);
      for (double& x : theta) x = n(rng);
      std::vector<double> w(13);
      for (double& x : w) x = n(rng);
      auto f = [&](auto t) {
        using T = std::remove_cvref_t<decltype(t[0])>;
        const LinkInertia<T> l = materialize<T>(k, t, kB);
        T s = w[0] * l.mass;
        for (std::size_t j = 0; j < 3; ++j) s = s + w[1 + j] * l.h[j];
        for (std::size_t j = 0; j < 9; ++j) s = s + w[4 + j] * l.inertia_com.m[j];
        return s;
      };
      worst = std::max(worst, grad_check(f, theta, 1e-6));
    }
    EXPECT_LT(worst, 1e-4) << kind_label(k);
  }
}

TEST(Consistency, Examples) {
  LinkInertia<double> l;
  l.mass = 1.0;
  l.inertia_com = Mat3<double>::identity();
  auto r = consistency_check(l);
  EXPECT_TRUE(r.fully_consistent);

  l.inertia_com = Mat3<double>::diagonal(1, 1, 3);
  r = consistency_check(l);
  EXPECT_FALSE(r.triangle_ineq);
  EXPECT_FALSE(r.fully_consistent);
  EXPECT_NEAR(r.covariance_min_eigenvalue, -0.5, 1e-15);
  EXPECT_TRUE(r.routes_agree);
  EXPECT_EQ(violations(r), "triangle_ineq");

  l.inertia_com = Mat3<double>::diagonal(2, 3, 4);
  r = consistency_check(l);
  EXPECT_TRUE(r.fully_consistent);
  EXPECT_NEAR(r.covariance_min_eigenvalue, 0.5, 1e-15);
  EXPECT_NEAR(r.principal_moments[0], 2.0, 1e-15);
  EXPECT_NEAR(r.principal_moments[2], 4.0, 1e-15);

  l.mass = 0.0;
  EXPECT_FALSE(consistency_check(l).mass_positive);
}

TEST(Consistency, AsymmetryRejected) {
  LinkInertia<double> l;
  l.mass = 1.0;
  l.inertia_com = Mat3<double>::identity();
  l.inertia_com(0, 1) = 1e-6;
  const auto r = consistency_check(l);
  EXPECT_FALSE(r.inertia_spd);
  EXPECT_FALSE(r.fully_consistent);
  l.inertia_com(0, 1) = 1e-12;
  EXPECT_TRUE(consistency_check(l).fully_consistent);
}

TEST(Consistency, RoutesAgreeOnRandomSymmetricMatrices) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> n(0.0, 1.0);
  for (int i = 0; i < 5000; ++i) {
    LinkInertia<double> l;
    l.mass = 1.0;
    const double d = 2.0 + n(rng), e = 2.0 + n(rng), f = 2.0 + n(rng);
    const double xy = 0.3 * n(rng), xz = 0.3 * n(rng), yz = 0.3 * n(rng);
    l.inertia_com = Mat3<double>::from_rows({d, xy, xz, xy, e, yz, xz, yz, f});
    const auto r = consistency_check(l);
    EXPECT_TRUE(r.routes_agree);
    const auto ev = eigenvalues(l.inertia_com);
    EXPECT_EQ(r.triangle_ineq, ev(0) + ev(1) >= ev(2)) << ev.transpose();
  }
}

TEST(Invert, RoundTripEveryKind) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(0.1, 2.0);
  for (int i = 0; i < 500; ++i) {
    // Random consistent inertia from a Cov draw, then re-expressed in every kind.
    const auto truth = mat(Kind::Cov, random_theta(rng, 10, 1.5));
    for (Kind k : kAllKinds) {
      const auto theta = invert_link(k, truth, kB);
      ASSERT_EQ(theta.size(), slots_per_link(k));
      const auto back = mat(k, theta);
      EXPECT_NEAR(back.mass, truth.mass, 1e-12 * truth.mass) << kind_label(k);
      EXPECT_LT(max_abs_diff(back.inertia_com, truth.inertia_com), 1e-9) << kind_label(k);
      for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(back.h[j], truth.h[j]);
    }
  }
}

TEST(Invert, InconsistentInertiaNotRepresentable) {
  LinkInertia<double> l;
  l.mass = 1.0;
  l.inertia_com = Mat3<double>::diagonal(1, 1, 3);
  EXPECT_THROW(invert_link(Kind::Cov, l, kB), NotRepresentable);
  EXPECT_THROW(invert_link(Kind::Tri, l, kB), NotRepresentable);
  EXPECT_NO_THROW(invert_link(Kind::SPD, l, kB));
  l.mass = 0.0;
  EXPECT_THROW(invert_link(Kind::Symm, l, kB), NotRepresentable);
  EXPECT_NO_THROW(invert_link(Kind::NoStr, l, kB));
}

TEST(InitParams, ZeroNoiseReproducesUrdf) {
  const RobotModel m = load_model("arm7.urdf");
  for (Kind k : kAllKinds) {
    const auto p = init_params(k, m, {InitMode::FromUrdfPerturbed, 0.0}, 1);
    EXPECT_EQ(p.num_links(), 7u);
    EXPECT_EQ(p.size(), 7 * slots_per_link(k));
    const auto links = materialize_model(m, p);
    for (std::size_t i = 0; i < m.links.size(); ++i) {
      EXPECT_NEAR(links[i].mass, m.links[i].inertia.mass, 1e-12);
      EXPECT_LT(max_abs_diff(links[i].inertia_com, m.links[i].inertia.inertia_com), 1e-9) << kind_label(k);
    }
  }
}

TEST(InitParams, SeedDeterminism) {
  const RobotModel m = load_model("two_link.urdf");
  for (InitMode mode : {InitMode::FromUrdfPerturbed, InitMode::Random}) {
    const auto a = init_params(Kind::Tri, m, {mode, 0.1}, 42, true);
    const auto b = init_params(Kind::Tri, m, {mode, 0.1}, 42, true);
    const auto c = init_params(Kind::Tri, m, {mode, 0.1}, 43, true);
    EXPECT_EQ(a.values, b.values);
    EXPECT_NE(a.values, c.values);
    EXPECT_EQ(a.num_damping, 2u);
  }
}

TEST(InitParams, SharedModeGivesEveryKindTheSameModel) {
  const RobotModel m = load_model("arm7.urdf");
  const auto ref = materialize_model(m, init_params(Kind::Cov, m, {InitMode::FromUrdfShared, 0.1}, 9, true));
  for (Kind k : kAllKinds) {
    const auto links = materialize_model(m, init_params(k, m, {InitMode::FromUrdfShared, 0.1}, 9, true));
    for (std::size_t i = 0; i < links.size(); ++i) {
      EXPECT_NEAR(links[i].mass, ref[i].mass, 1e-12) << kind_label(k);
      EXPECT_NEAR(links[i].damping, ref[i].damping, 1e-12) << kind_label(k);
      for (std::size_t a = 0; a < 3; ++a) EXPECT_NEAR(links[i].h[a], ref[i].h[a], 1e-12) << kind_label(k);
      EXPECT_LT(max_abs_diff(links[i].inertia_com, ref[i].inertia_com), 1e-9) << kind_label(k);
    }
  }
  EXPECT_EQ(parse_init_mode("from_urdf_shared"), InitMode::FromUrdfShared);
  EXPECT_FALSE(parse_init_mode("urdf"));
}

TEST(InitParams, InconsistentUrdfFallsBackToRandom) {
  const RobotModel m = load_model("inconsistent.urdf");
  const auto p = init_params(Kind::Cov, m, {InitMode::FromUrdfPerturbed, 0.1}, 5);
  const auto r = init_params(Kind::Cov, m, {InitMode::Random, 0.1}, 5);
  EXPECT_EQ(p.values, r.values);
}

TEST(MaterializeModel, WeldedLinksAndDamping) {
  RobotModel m = parse_urdf(
      "<robot name=\"r\">"
      "<link name=\"a\"><inertial><mass value=\"1\"/><inertia ixx=\"1\" ixy=\"0\" ixz=\"0\" iyy=\"1\" iyz=\"0\" izz=\"1\"/></inertial></link>"
      "<link name=\"b\"><inertial><mass value=\"2\"/><inertia ixx=\"1\" ixy=\"0\" ixz=\"0\" iyy=\"1\" iyz=\"0\" izz=\"1\"/></inertial></link>"
      "<link name=\"c\"><inertial><mass value=\"3\"/><inertia ixx=\"1\" ixy=\"0\" ixz=\"0\" iyy=\"1\" iyz=\"0\" izz=\"1\"/></inertial></link>"
      "<joint name=\"w\" type=\"fixed\"><parent link=\"a\"/><child link=\"b\"/></joint>"
      "<joint name=\"j\" type=\"revolute\"><parent link=\"b\"/><child link=\"c\"/><dynamics damping=\"0.25\"/></joint>"
      "</robot>");
  auto p = empty_params(Kind::SPD, m, false);
  EXPECT_EQ(p.link_names, std::vector<std::string>{"c"});
  auto links = materialize_model(m, p);
  EXPECT_EQ(links[1].mass, 2.0);
  EXPECT_EQ(links[2].mass, kB);
  EXPECT_EQ(links[2].damping, 0.25);

  p = empty_params(Kind::SPD, m, true);
  p.values.back() = 2.0;
  links = materialize_model(m, p);
  EXPECT_EQ(links[2].damping, 4.0);
  EXPECT_THROW(materialize_model(m, empty_params(Kind::SPD, load_model("two_link.urdf"), false)),
               std::invalid_argument);
}

TEST(ParamJson, BitExactRoundTrip) {
  const RobotModel m = load_model("arm7.urdf");
  for (Kind k : kAllKinds) {
    const auto p = init_params(k, m, {InitMode::Random, 1.0}, 17, true);
    const auto text = to_json(p).dump();
    const auto q = params_from_json(nlohmann::json::parse(text));
    EXPECT_EQ(q.kind, p.kind);
    EXPECT_EQ(q.bias, p.bias);
    EXPECT_EQ(q.link_names, p.link_names);
    EXPECT_EQ(q.num_damping, p.num_damping);
    EXPECT_EQ(q.values, p.values);
  }
}

TEST(ParamJson, SlotNames) {
  const auto j = to_json(empty_params(Kind::Tri, load_model("two_link.urdf"), false));
  EXPECT_EQ(j["kind"], "tri");
  EXPECT_TRUE(j["per_link"][0].contains("sqrt_J1"));
  EXPECT_TRUE(j["per_link"][0].contains("RAA_3"));
  EXPECT_EQ(slot_names(Kind::NoStr).size(), 13u);
  EXPECT_EQ(slot_names(Kind::Cov).size(), 10u);
  EXPECT_THROW(params_from_json(nlohmann::json{{"kind", "bogus"}, {"per_link", nlohmann::json::array()}}),
               std::invalid_argument);
}

TEST(Kinds, NamesParse) {
  for (Kind k : kAllKinds) {
    EXPECT_EQ(parse_kind(kind_name(k)), k);
    EXPECT_EQ(parse_kind(kind_label(k)), k);
  }
  EXPECT_FALSE(parse_kind("lmi").has_value());
}

}  // namespace
}  // namespace diffnea
