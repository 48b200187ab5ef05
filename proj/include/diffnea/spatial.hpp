#pragma once

// Fixed-size 3D / 6D algebra, generic over double and Var.
//
// Spatial vectors follow the Featherstone body-coordinate convention with the
// angular block first: motion (omega, v), force (n, f).

#include <array>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <utility>

#include "diffnea/autodiff.hpp"

namespace diffnea {

template <class T>
struct Vec3 {
  std::array<T, 3> v{};

  constexpr Vec3() = default;
  constexpr Vec3(T x, T y, T z) : v{std::move(x), std::move(y), std::move(z)} {}

  template <class U>
  static Vec3 from(const Vec3<U>& o) {
    return {T(o[0]), T(o[1]), T(o[2])};
  }

  T& operator[](std::size_t i) { return v[i]; }
  const T& operator[](std::size_t i) const { return v[i]; }
};

template <class T>
struct Mat3 {
  std::array<T, 9> m{};  // row-major

  static Mat3 zero() { return Mat3{}; }
  static Mat3 identity() { return diagonal(T(1.0), T(1.0), T(1.0)); }
  static Mat3 diagonal(T a, T b, T c) {
    Mat3 r;
    r(0, 0) = std::move(a);
    r(1, 1) = std::move(b);
    r(2, 2) = std::move(c);
    return r;
  }
  static Mat3 from_rows(std::array<T, 9> rows) {
    Mat3 r;
    r.m = std::move(rows);
    return r;
  }
  template <class U>
  static Mat3 from(const Mat3<U>& o) {
    Mat3 r;
    for (std::size_t i = 0; i < 9; ++i) r.m[i] = T(o.m[i]);
    return r;
  }

  T& operator()(std::size_t i, std::size_t j) { return m[3 * i + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return m[3 * i + j]; }
};

template <class T>
struct Mat6 {
  std::array<T, 36> m{};

  T& operator()(std::size_t i, std::size_t j) { return m[6 * i + j]; }
  const T& operator()(std::size_t i, std::size_t j) const { return m[6 * i + j]; }

  void set_block(std::size_t r0, std::size_t c0, const Mat3<T>& b) {
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 3; ++j) (*this)(r0 + i, c0 + j) = b(i, j);
  }
};

template <class A, class B>
using Product = decltype(std::declval<A>() * std::declval<B>());

// ---- Vec3 ---------------------------------------------------------------

template <class A, class B>
auto operator+(const Vec3<A>& a, const Vec3<B>& b) {
  return Vec3<Product<A, B>>{a[0] + b[0], a[1] + b[1], a[2] + b[2]};
}
template <class A, class B>
auto operator-(const Vec3<A>& a, const Vec3<B>& b) {
  return Vec3<Product<A, B>>{a[0] - b[0], a[1] - b[1], a[2] - b[2]};
}
template <class T>
Vec3<T> operator-(const Vec3<T>& a) {
  return {-a[0], -a[1], -a[2]};
}
template <class S, class T>
auto scale(const S& s, const Vec3<T>& a) {
  return Vec3<Product<S, T>>{s * a[0], s * a[1], s * a[2]};
}
template <class A, class B>
auto dot(const Vec3<A>& a, const Vec3<B>& b) {
  return a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
}
template <class A, class B>
auto cross(const Vec3<A>& a, const Vec3<B>& b) {
  return Vec3<Product<A, B>>{a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2],
                             a[0] * b[1] - a[1] * b[0]};
}
template <class T>
T squared_norm(const Vec3<T>& a) {
  return dot(a, a);
}
inline double norm(const Vec3<double>& a) { return std::sqrt(squared_norm(a)); }

// ---- Mat3 ---------------------------------------------------------------

template <class A, class B>
auto operator+(const Mat3<A>& a, const Mat3<B>& b) {
  Mat3<Product<A, B>> r;
  for (std::size_t i = 0; i < 9; ++i) r.m[i] = a.m[i] + b.m[i];
  return r;
}
template <class A, class B>
auto operator-(const Mat3<A>& a, const Mat3<B>& b) {
  Mat3<Product<A, B>> r;
  for (std::size_t i = 0; i < 9; ++i) r.m[i] = a.m[i] - b.m[i];
  return r;
}
template <class S, class T>
auto scale(const S& s, const Mat3<T>& a) {
  Mat3<Product<S, T>> r;
  for (std::size_t i = 0; i < 9; ++i) r.m[i] = s * a.m[i];
  return r;
}
template <class A, class B>
auto operator*(const Mat3<A>& a, const Vec3<B>& x) {
  Vec3<Product<A, B>> r;
  for (std::size_t i = 0; i < 3; ++i) r[i] = a(i, 0) * x[0] + a(i, 1) * x[1] + a(i, 2) * x[2];
  return r;
}
template <class A, class B>
auto operator*(const Mat3<A>& a, const Mat3<B>& b) {
  Mat3<Product<A, B>> r;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      r(i, j) = a(i, 0) * b(0, j) + a(i, 1) * b(1, j) + a(i, 2) * b(2, j);
  return r;
}
// aᵀ x
template <class A, class B>
auto transpose_times(const Mat3<A>& a, const Vec3<B>& x) {
  Vec3<Product<A, B>> r;
  for (std::size_t i = 0; i < 3; ++i) r[i] = a(0, i) * x[0] + a(1, i) * x[1] + a(2, i) * x[2];
  return r;
}
template <class T>
Mat3<T> transpose(const Mat3<T>& a) {
  Mat3<T> r;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) r(i, j) = a(j, i);
  return r;
}
template <class T>
T trace(const Mat3<T>& a) {
  return a(0, 0) + a(1, 1) + a(2, 2);
}
template <class T>
T determinant(const Mat3<T>& a) {
  return a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) -
         a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0)) +
         a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
}
inline double max_abs_diff(const Mat3<double>& a, const Mat3<double>& b) {
  double d = 0.0;
  for (std::size_t i = 0; i < 9; ++i) d = std::max(d, std::abs(a.m[i] - b.m[i]));
  return d;
}

template <class T>
Mat3<T> skew(const Vec3<T>& w) {
  return Mat3<T>::from_rows({T(0.0), -w[2], w[1], w[2], T(0.0), -w[0], -w[1], w[0], T(0.0)});
}

// Rodrigues formula, with a second-order Taylor expansion below a rotation
// angle of 1e-6 so that values and gradients stay finite at w = 0.
template <class T>
Mat3<T> exp_so3(const Vec3<T>& w) {
  constexpr double kTaylorCutoff = 1e-6;
  const Mat3<T> k = skew(w);
  const Mat3<T> k2 = k * k;
  const T theta2 = squared_norm(w);
  if (value(theta2) < kTaylorCutoff * kTaylorCutoff) {
    return Mat3<T>::identity() + k + scale(0.5, k2);
  }
  const T theta = sqrt(theta2);
  const T a = sin(theta) / theta;
  const T b = (T(1.0) - cos(theta)) / theta2;
  return Mat3<T>::identity() + scale(a, k) + scale(b, k2);
}

// Inverse of exp_so3 on rotation matrices; the angle lies in [0, pi].
inline Vec3<double> log_so3(const Mat3<double>& r) {
  const Vec3<double> vee{r(2, 1) - r(1, 2), r(0, 2) - r(2, 0), r(1, 0) - r(0, 1)};
  // atan2 keeps the angle accurate near 0 and pi, where acos is ill-conditioned.
  const double angle = std::atan2(0.5 * norm(vee), 0.5 * (trace(r) - 1.0));
  if (angle < 1e-8) return scale(0.5, vee);
  if (std::numbers::pi - angle > 1e-6) return scale(angle / (2.0 * std::sin(angle)), vee);
  // Near pi: axis from the symmetric part, R + I = 2 a aᵀ (approximately).
  std::size_t k = 0;
  for (std::size_t i = 1; i < 3; ++i)
    if (r(i, i) > r(k, k)) k = i;
  Vec3<double> axis;
  for (std::size_t i = 0; i < 3; ++i) axis[i] = (r(i, k) + r(k, i)) / 2.0 + (i == k ? 1.0 : 0.0);
  axis = scale(1.0 / norm(axis), axis);
  // Pick the sign consistent with the antisymmetric part.
  if (dot(axis, vee) < 0.0) axis = -axis;
  return scale(angle, axis);
}

// URDF roll-pitch-yaw: R = Rz(yaw) Ry(pitch) Rx(roll).
inline Mat3<double> rpy_to_rotation(const Vec3<double>& rpy) {
  const double cr = std::cos(rpy[0]), sr = std::sin(rpy[0]);
  const double cp = std::cos(rpy[1]), sp = std::sin(rpy[1]);
  const double cy = std::cos(rpy[2]), sy = std::sin(rpy[2]);
  return Mat3<double>::from_rows({cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr,
                                  sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr,
                                  -sp, cp * sr, cp * cr});
}

inline Mat3<double> axis_angle_rotation(const Vec3<double>& unit_axis, double angle) {
  return exp_so3(scale(angle, unit_axis));
}

// Pose of a child frame in its parent: p_parent = rotation * p_child + translation.
struct SpatialTransform {
  Mat3<double> rotation = Mat3<double>::identity();
  Vec3<double> translation{};

  SpatialTransform operator*(const SpatialTransform& child) const {
    return {rotation * child.rotation, rotation * child.translation + translation};
  }
  Vec3<double> apply(const Vec3<double>& p) const { return rotation * p + translation; }
  SpatialTransform inverse() const {
    const Mat3<double> rt = transpose(rotation);
    return {rt, -(rt * translation)};
  }
  // Plücker motion transform taking parent coordinates to child coordinates.
  Mat6<double> motion_matrix() const {
    const Mat3<double> e = transpose(rotation);
    Mat6<double> x;
    x.set_block(0, 0, e);
    x.set_block(3, 3, e);
    x.set_block(3, 0, scale(-1.0, e * skew(translation)));
    return x;
  }
};

inline bool is_rotation(const Mat3<double>& r, double tol = 1e-9) {
  const Mat3<double> rtr = transpose(r) * r;
  return max_abs_diff(rtr, Mat3<double>::identity()) <= tol &&
         std::abs(determinant(r) - 1.0) <= tol;
}

// 6x6 spatial inertia about the body origin from mass, first moment h = m c
// and rotational inertia about the centre of mass.
template <class T>
Mat6<T> spatial_inertia(const T& mass, const Vec3<T>& h, const Mat3<T>& inertia_com) {
  if (value(mass) == 0.0) throw std::domain_error("spatial_inertia: zero mass");
  const Mat3<T> hx = skew(h);
  const Mat3<T> upper = inertia_com + scale(T(1.0) / mass, hx * transpose(hx));
  Mat6<T> out;
  out.set_block(0, 0, upper);
  out.set_block(0, 3, hx);
  out.set_block(3, 0, transpose(hx));
  out.set_block(3, 3, Mat3<T>::diagonal(mass, mass, mass));
  return out;
}

// Eigenvalues of a symmetric 3x3 matrix in ascending order (closed form).
inline Vec3<double> symmetric_eigenvalues(const Mat3<double>& a) {
  const double p1 = square(a(0, 1)) + square(a(0, 2)) + square(a(1, 2));
  if (p1 == 0.0) {
    std::array<double, 3> d{a(0, 0), a(1, 1), a(2, 2)};
    std::sort(d.begin(), d.end());
    return {d[0], d[1], d[2]};
  }
  const double q = trace(a) / 3.0;
  const double p2 = square(a(0, 0) - q) + square(a(1, 1) - q) + square(a(2, 2) - q) + 2.0 * p1;
  const double p = std::sqrt(p2 / 6.0);
  const Mat3<double> b = scale(1.0 / p, a - scale(q, Mat3<double>::identity()));
  const double r = std::clamp(determinant(b) / 2.0, -1.0, 1.0);
  const double phi = std::acos(r) / 3.0;
  const double largest = q + 2.0 * p * std::cos(phi);
  const double smallest = q + 2.0 * p * std::cos(phi + 2.0 * std::numbers::pi / 3.0);
  const double middle = 3.0 * q - largest - smallest;
  std::array<double, 3> d{smallest, middle, largest};
  std::sort(d.begin(), d.end());
  return {d[0], d[1], d[2]};
}

struct SymmetricEigen {
  Vec3<double> values;    // ascending
  Mat3<double> vectors;   // columns, right-handed (det = +1)
};

// Cyclic Jacobi sweeps. Accurate to rounding even for clustered eigenvalues.
inline SymmetricEigen symmetric_eigen(const Mat3<double>& input) {
  Mat3<double> a = input;
  Mat3<double> v = Mat3<double>::identity();
  for (int sweep = 0; sweep < 50; ++sweep) {
    const double off = square(a(0, 1)) + square(a(0, 2)) + square(a(1, 2));
    const double diag = square(a(0, 0)) + square(a(1, 1)) + square(a(2, 2));
    if (off <= 1e-300 || off <= 1e-32 * diag) break;
    for (std::size_t p = 0; p < 2; ++p) {
      for (std::size_t q = p + 1; q < 3; ++q) {
        if (a(p, q) == 0.0) continue;
        const double tau = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (std::size_t k = 0; k < 3; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < 3; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < 3; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  std::array<std::size_t, 3> order{0, 1, 2};
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return a(i, i) < a(j, j); });
  SymmetricEigen out;
  for (std::size_t c = 0; c < 3; ++c) {
    out.values[c] = a(order[c], order[c]);
    for (std::size_t r = 0; r < 3; ++r) out.vectors(r, c) = v(r, order[c]);
  }
  if (determinant(out.vectors) < 0.0) {
    for (std::size_t r = 0; r < 3; ++r) out.vectors(r, 2) = -out.vectors(r, 2);
  }
  return out;
}

}  // namespace diffnea
