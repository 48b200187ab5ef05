#pragma once

#include <algorithm>
#include <cmath>
#include <string>

#include "diffnea/spatial.hpp"

namespace diffnea {

// Inertial parameters of one link: mass, first moment h = m c (link frame),
// rotational inertia about the centre of mass (axes aligned with the link
// frame) and the viscous damping of the joint driving the link.
template <class T>
struct LinkInertia {
  T mass{};
  Vec3<T> h{};
  Mat3<T> inertia_com{};
  T damping{};

  template <class U>
  static LinkInertia from(const LinkInertia<U>& o) {
    return {T(o.mass), Vec3<T>::from(o.h), Mat3<T>::from(o.inertia_com), T(o.damping)};
  }
};

inline LinkInertia<double> to_double(const LinkInertia<Var>& v) {
  LinkInertia<double> r;
  r.mass = v.mass.value();
  for (std::size_t i = 0; i < 3; ++i) r.h[i] = v.h[i].value();
  for (std::size_t i = 0; i < 9; ++i) r.inertia_com.m[i] = v.inertia_com.m[i].value();
  r.damping = v.damping.value();
  return r;
}

struct ConsistencyReport {
  bool mass_positive = false;
  bool inertia_spd = false;
  bool triangle_ineq = false;
  bool fully_consistent = false;
  Vec3<double> principal_moments{};  // ascending
  // Smallest eigenvalue of 0.5 tr(I) 1 - I; non-negative iff the triangle
  // inequality holds.
  double covariance_min_eigenvalue = 0.0;
  bool routes_agree = true;
  double asymmetry = 0.0;
};

// Relative slack, in units of tr(I_C), for the triangle inequality. Covers
// rounding in the eigenvalues of matrices that sit exactly on the boundary.
inline constexpr double kTriangleRelTol = 1e-12;
inline constexpr double kAsymmetryTol = 1e-9;

inline ConsistencyReport consistency_check(const LinkInertia<double>& link) {
  ConsistencyReport rep;
  const Mat3<double>& a = link.inertia_com;
  const Mat3<double> at = transpose(a);
  rep.asymmetry = max_abs_diff(a, at);
  const Mat3<double> sym = scale(0.5, a + at);

  // Jacobi rather than the closed form: the closed form loses accuracy when
  // two moments nearly coincide, which is common on the triangle boundary.
  rep.principal_moments = symmetric_eigen(sym).values;
  const double j1 = rep.principal_moments[0];
  const double j2 = rep.principal_moments[1];
  const double j3 = rep.principal_moments[2];
  const double tol = kTriangleRelTol * (std::abs(j1) + std::abs(j2) + std::abs(j3));

  rep.mass_positive = link.mass > 0.0;
  rep.inertia_spd = rep.asymmetry <= kAsymmetryTol && j1 > 0.0;
  rep.triangle_ineq = j1 + j2 - j3 >= -tol;

  const Mat3<double> sigma = scale(0.5 * trace(sym), Mat3<double>::identity()) - sym;
  rep.covariance_min_eigenvalue = symmetric_eigen(sigma).values[0];
  rep.routes_agree = (rep.covariance_min_eigenvalue >= -0.5 * tol) == rep.triangle_ineq;

  rep.fully_consistent = rep.mass_positive && rep.inertia_spd && rep.triangle_ineq;
  return rep;
}

// Names the violated conditions, e.g. "triangle_ineq".
inline std::string violations(const ConsistencyReport& r) {
  std::string out;
  auto add = [&](const char* s) {
    if (!out.empty()) out += ",";
    out += s;
  };
  if (!r.mass_positive) add("mass_positive");
  if (!r.inertia_spd) add("inertia_spd");
  if (!r.triangle_ineq) add("triangle_ineq");
  return out;
}

}  // namespace diffnea
