#pragma once

// Learnable representations of per-link inertial parameters.
//
// Every representation maps an unconstrained real vector to a LinkInertia.
// Layout per link: a mass slot, three first-moment slots, then the
// rotational-inertia slots (9 for NoStr, 6 otherwise). Optional damping
// slots, one per joint, follow all links.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffnea/autodiff.hpp"
#include "diffnea/inertia.hpp"
#include "diffnea/model.hpp"
#include "diffnea/spatial.hpp"

namespace diffnea {

enum class Kind { NoStr, Symm, SPD, Tri, Cov };

inline constexpr std::array<Kind, 5> kAllKinds{Kind::NoStr, Kind::Symm, Kind::SPD, Kind::Tri, Kind::Cov};

// Positivity bias b used by every structured representation.
inline constexpr double kDefaultBias = 1e-4;

inline std::string_view kind_name(Kind k) {
  switch (k) {
    case Kind::NoStr: return "nostr";
    case Kind::Symm: return "symm";
    case Kind::SPD: return "spd";
    case Kind::Tri: return "tri";
    case Kind::Cov: return "cov";
  }
  return "?";
}

inline std::string_view kind_label(Kind k) {
  switch (k) {
    case Kind::NoStr: return "NoStr";
    case Kind::Symm: return "Symm";
    case Kind::SPD: return "SPD";
    case Kind::Tri: return "Tri";
    case Kind::Cov: return "Cov";
  }
  return "?";
}

inline std::optional<Kind> parse_kind(std::string_view s) {
  for (Kind k : kAllKinds) {
    if (s == kind_name(k) || s == kind_label(k)) return k;
  }
  return std::nullopt;
}

inline std::size_t slots_per_link(Kind k) { return k == Kind::NoStr ? 13 : 10; }

inline std::vector<std::string> slot_names(Kind k) {
  std::vector<std::string> out;
  out.push_back(k == Kind::NoStr ? "m" : "sqrt_m");
  out.insert(out.end(), {"h_x", "h_y", "h_z"});
  auto numbered = [&](const std::string& stem, int n) {
    for (int i = 1; i <= n; ++i) out.push_back(stem + std::to_string(i));
  };
  switch (k) {
    case Kind::NoStr: numbered("I_", 9); break;
    case Kind::Symm: numbered("I_", 6); break;
    case Kind::SPD: numbered("LI_", 6); break;
    case Kind::Tri: out.insert(out.end(), {"RAA_1", "RAA_2", "RAA_3", "sqrt_J1", "sqrt_J2", "a"}); break;
    case Kind::Cov: numbered("LSigma_", 6); break;
  }
  return out;
}

struct ParamVector {
  Kind kind = Kind::Cov;
  double bias = kDefaultBias;
  std::vector<std::string> link_names;  // one per learnable link
  std::size_t num_damping = 0;           // 0 when damping is not learned
  std::vector<double> values;

  std::size_t num_links() const { return link_names.size(); }
  std::size_t size() const { return num_links() * slots_per_link(kind) + num_damping; }

  template <class T>
  static std::span<const T> link_slots(Kind kind, std::span<const T> theta, std::size_t link) {
    const std::size_t n = slots_per_link(kind);
    return theta.subspan(link * n, n);
  }
  std::span<const double> link(std::size_t i) const { return link_slots<double>(kind, values, i); }
  std::span<double> link(std::size_t i) {
    const std::size_t n = slots_per_link(kind);
    return std::span<double>(values).subspan(i * n, n);
  }
  std::span<const double> damping() const {
    return std::span<const double>(values).subspan(num_links() * slots_per_link(kind), num_damping);
  }
};

// ---- materialization -------------------------------------------------------

namespace detail {

template <class T>
void check_slots(std::span<const T> theta, std::size_t n, const char* who) {
  if (theta.size() != n) {
    throw std::invalid_argument(std::string(who) + ": expected " + std::to_string(n) + " slots, got " +
                                std::to_string(theta.size()));
  }
}

// L Lᵀ with L = [[t1, 0, 0], [t4, t2, 0], [t5, t6, t3]].
template <class T>
Mat3<T> lower_gram(std::span<const T> t) {
  const T& l00 = t[0];
  const T& l11 = t[1];
  const T& l22 = t[2];
  const T& l10 = t[3];
  const T& l20 = t[4];
  const T& l21 = t[5];
  Mat3<T> g;
  g(0, 0) = square(l00);
  g(1, 1) = square(l10) + square(l11);
  g(2, 2) = square(l20) + square(l21) + square(l22);
  g(0, 1) = l00 * l10;
  g(0, 2) = l00 * l20;
  g(1, 2) = l10 * l20 + l11 * l21;
  g(1, 0) = g(0, 1);
  g(2, 0) = g(0, 2);
  g(2, 1) = g(1, 2);
  return g;
}

template <class T>
Mat3<T> add_diagonal(Mat3<T> a, double b) {
  for (std::size_t i = 0; i < 3; ++i) a(i, i) = a(i, i) + b;
  return a;
}

template <class T>
LinkInertia<T> mass_and_moment(std::span<const T> theta, double b) {
  LinkInertia<T> out;
  out.mass = square(theta[0]) + b;
  out.h = {theta[1], theta[2], theta[3]};
  return out;
}

}  // namespace detail

template <class T>
LinkInertia<T> materialize_no_str(std::span<const T> theta) {
  detail::check_slots(theta, 13, "materialize_no_str");
  LinkInertia<T> out;
  out.mass = theta[0];
  out.h = {theta[1], theta[2], theta[3]};
  for (std::size_t i = 0; i < 9; ++i) out.inertia_com.m[i] = theta[4 + i];
  return out;
}

// Slot order of the six inertia entries: xx, yy, zz, xy, xz, yz.
template <class T>
LinkInertia<T> materialize_symm(std::span<const T> theta, double b) {
  detail::check_slots(theta, 10, "materialize_symm");
  LinkInertia<T> out = detail::mass_and_moment(theta, b);
  Mat3<T>& ic = out.inertia_com;
  ic(0, 0) = theta[4];
  ic(1, 1) = theta[5];
  ic(2, 2) = theta[6];
  ic(0, 1) = ic(1, 0) = theta[7];
  ic(0, 2) = ic(2, 0) = theta[8];
  ic(1, 2) = ic(2, 1) = theta[9];
  return out;
}

template <class T>
LinkInertia<T> materialize_spd(std::span<const T> theta, double b) {
  detail::check_slots(theta, 10, "materialize_spd");
  LinkInertia<T> out = detail::mass_and_moment(theta, b);
  out.inertia_com = detail::add_diagonal(detail::lower_gram(theta.subspan(4, 6)), b);
  return out;
}

template <class T>
struct PrincipalMoments {
  T j1, j2, j3;
};

// J1, J2 from squared slots plus b; J3 closes the triangle with interior
// angle pi * sigmoid(a). J3² = J1² + J2² - 2 J1 J2 cos(alpha) is evaluated as
// (J1 - J2)² + 4 J1 J2 sin²(alpha / 2), which cannot round below zero.
template <class T>
PrincipalMoments<T> tri_moments(const T& sqrt_j1, const T& sqrt_j2, const T& a, double b) {
  const T j1 = square(sqrt_j1) + b;
  const T j2 = square(sqrt_j2) + b;
  const T half_alpha = (0.5 * std::numbers::pi) * sigmoid(a);
  T j3 = sqrt(square(j1 - j2) + 4.0 * j1 * j2 * square(sin(half_alpha)));
  // Rounding can push J3 an ulp past either end of its range. Both ends are
  // stationary points in alpha, so snapping to them keeps the gradient.
  const T upper = j1 + j2;
  const T lower = j1 > j2 ? j1 - j2 : j2 - j1;
  if (j3 > upper) j3 = upper;
  if (j3 < lower) j3 = lower;
  return {j1, j2, j3};
}

template <class T>
LinkInertia<T> materialize_tri(std::span<const T> theta, double b) {
  detail::check_slots(theta, 10, "materialize_tri");
  LinkInertia<T> out = detail::mass_and_moment(theta, b);
  const Mat3<T> r = exp_so3(Vec3<T>{theta[4], theta[5], theta[6]});
  const auto j = tri_moments(theta[7], theta[8], theta[9], b);
  const std::array<T, 3> d{j.j1, j.j2, j.j3};
  Mat3<T>& ic = out.inertia_com;
  for (std::size_t row = 0; row < 3; ++row) {
    for (std::size_t col = row; col < 3; ++col) {
      T s = r(row, 0) * d[0] * r(col, 0);
      s = s + r(row, 1) * d[1] * r(col, 1);
      s = s + r(row, 2) * d[2] * r(col, 2);
      ic(row, col) = s;
      if (col != row) ic(col, row) = s;
    }
  }
  return out;
}

template <class T>
LinkInertia<T> materialize_cov(std::span<const T> theta, double b) {
  detail::check_slots(theta, 10, "materialize_cov");
  LinkInertia<T> out = detail::mass_and_moment(theta, b);
  const Mat3<T> sigma = detail::add_diagonal(detail::lower_gram(theta.subspan(4, 6)), b);
  const T tr = trace(sigma);
  Mat3<T>& ic = out.inertia_com;
  for (std::size_t i = 0; i < 9; ++i) ic.m[i] = -sigma.m[i];
  for (std::size_t i = 0; i < 3; ++i) ic(i, i) = tr - sigma(i, i);
  return out;
}

// Viscous damping d = θ², allowed to reach zero.
template <class T>
T materialize_damping(const T& theta) {
  return square(theta);
}

template <class T>
LinkInertia<T> materialize(Kind kind, std::span<const T> theta, double b) {
  switch (kind) {
    case Kind::NoStr: return materialize_no_str(theta);
    case Kind::Symm: return materialize_symm(theta, b);
    case Kind::SPD: return materialize_spd(theta, b);
    case Kind::Tri: return materialize_tri(theta, b);
    case Kind::Cov: return materialize_cov(theta, b);
  }
  throw std::invalid_argument("materialize: unknown kind");
}

// Inertias of the learnable links only, in order.
template <class T>
std::vector<LinkInertia<T>> materialize_links(const ParamVector& layout, std::span<const T> theta) {
  if (theta.size() != layout.size()) throw std::invalid_argument("materialize_links: wrong parameter count");
  std::vector<LinkInertia<T>> out;
  out.reserve(layout.num_links());
  for (std::size_t i = 0; i < layout.num_links(); ++i) {
    out.push_back(materialize(layout.kind, ParamVector::link_slots<T>(layout.kind, theta, i), layout.bias));
  }
  return out;
}

inline std::vector<LinkInertia<double>> materialize_links(const ParamVector& p) {
  return materialize_links<double>(p, std::span<const double>(p.values));
}

// Inertias for every model link: welded links keep their model values,
// learnable links come from theta. Damping is learned when the layout has
// damping slots, otherwise it is taken from the model.
template <class T>
std::vector<LinkInertia<T>> materialize_model(const RobotModel& model, const ParamVector& layout,
                                              std::span<const T> theta) {
  const auto moving = model.moving_links();
  if (moving.size() != layout.num_links()) {
    throw std::invalid_argument("materialize_model: parameter vector has " + std::to_string(layout.num_links()) +
                                " links, model has " + std::to_string(moving.size()) + " learnable links");
  }
  if (layout.num_damping != 0 && layout.num_damping != model.n_dof()) {
    throw std::invalid_argument("materialize_model: damping slot count differs from n_dof");
  }
  std::vector<LinkInertia<T>> out;
  out.reserve(model.links.size());
  for (const auto& l : model.links) out.push_back(LinkInertia<T>::from(l.inertia));
  auto learned = materialize_links<T>(layout, theta);
  for (std::size_t i = 0; i < moving.size(); ++i) {
    learned[i].damping = out[moving[i]].damping;
    out[moving[i]] = std::move(learned[i]);
  }
  if (layout.num_damping > 0) {
    const std::size_t base = layout.num_links() * slots_per_link(layout.kind);
    std::size_t dof = 0;
    for (std::size_t i = 0; i < model.links.size(); ++i) {
      if (model.links[i].joint_kind != JointKind::Revolute) continue;
      out[i].damping = materialize_damping(theta[base + dof]);
      ++dof;
    }
  }
  return out;
}

inline std::vector<LinkInertia<double>> materialize_model(const RobotModel& model, const ParamVector& p) {
  return materialize_model<double>(model, p, std::span<const double>(p.values));
}

// ---- inversion (physical -> theta) ----------------------------------------

class NotRepresentable : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

namespace detail {

// Returns the six slots (diagonal first, then 10, 20, 21) of L with L Lᵀ = a.
inline std::array<double, 6> cholesky_slots(const Mat3<double>& a, const char* what) {
  const double l00sq = a(0, 0);
  if (!(l00sq > 0.0)) throw NotRepresentable(std::string(what) + " is not positive definite");
  const double l00 = std::sqrt(l00sq);
  const double l10 = a(1, 0) / l00;
  const double l20 = a(2, 0) / l00;
  const double l11sq = a(1, 1) - l10 * l10;
  if (!(l11sq > 0.0)) throw NotRepresentable(std::string(what) + " is not positive definite");
  const double l11 = std::sqrt(l11sq);
  const double l21 = (a(2, 1) - l20 * l10) / l11;
  const double l22sq = a(2, 2) - l20 * l20 - l21 * l21;
  if (!(l22sq > 0.0)) throw NotRepresentable(std::string(what) + " is not positive definite");
  return {l00, l11, std::sqrt(l22sq), l10, l20, l21};
}

inline double sqrt_minus_bias(double x, double b, const char* what) {
  if (x < b) throw NotRepresentable(std::string(what) + " is below the positivity bias");
  return std::sqrt(x - b);
}

inline Mat3<double> symmetrized(const Mat3<double>& a) { return scale(0.5, a + transpose(a)); }

}  // namespace detail

// Inverse of materialize for one link. Throws NotRepresentable when the
// inertia lies outside the set the representation can produce.
inline std::vector<double> invert_link(Kind kind, const LinkInertia<double>& in, double b) {
  std::vector<double> t;
  t.reserve(slots_per_link(kind));
  if (kind == Kind::NoStr) {
    t.push_back(in.mass);
    t.insert(t.end(), {in.h[0], in.h[1], in.h[2]});
    t.insert(t.end(), in.inertia_com.m.begin(), in.inertia_com.m.end());
    return t;
  }
  t.push_back(detail::sqrt_minus_bias(in.mass, b, "mass"));
  t.insert(t.end(), {in.h[0], in.h[1], in.h[2]});
  const Mat3<double> ic = detail::symmetrized(in.inertia_com);
  switch (kind) {
    case Kind::Symm:
      t.insert(t.end(), {ic(0, 0), ic(1, 1), ic(2, 2), ic(0, 1), ic(0, 2), ic(1, 2)});
      break;
    case Kind::SPD: {
      const auto l = detail::cholesky_slots(detail::add_diagonal(ic, -b), "I_C - b I");
      t.insert(t.end(), l.begin(), l.end());
      break;
    }
    case Kind::Tri: {
      const SymmetricEigen eig = symmetric_eigen(ic);
      const double j1 = eig.values[0], j2 = eig.values[1], j3 = eig.values[2];
      const double cos_alpha = std::clamp((j1 * j1 + j2 * j2 - j3 * j3) / (2.0 * j1 * j2), -1.0, 1.0);
      const double frac = std::acos(cos_alpha) / std::numbers::pi;
      if (!(frac > 0.0 && frac < 1.0)) throw NotRepresentable("principal moments form a degenerate triangle");
      const Vec3<double> raa = log_so3(eig.vectors);
      t.insert(t.end(), {raa[0], raa[1], raa[2]});
      t.push_back(detail::sqrt_minus_bias(j1, b, "principal moment J1"));
      t.push_back(detail::sqrt_minus_bias(j2, b, "principal moment J2"));
      t.push_back(std::log(frac / (1.0 - frac)));
      break;
    }
    case Kind::Cov: {
      const Mat3<double> sigma = scale(0.5 * trace(ic), Mat3<double>::identity()) - ic;
      const auto l = detail::cholesky_slots(detail::add_diagonal(sigma, -b), "Sigma_C - b I");
      t.insert(t.end(), l.begin(), l.end());
      break;
    }
    case Kind::NoStr: break;
  }
  return t;
}

inline double invert_damping(double d) {
  if (d < 0.0) throw NotRepresentable("negative damping");
  return std::sqrt(d);
}

// ---- initialization --------------------------------------------------------

// FromUrdfShared perturbs the URDF in covariance coordinates and maps the
// result into the requested kind, so every kind starts from the same
// physical model for a given seed.
enum class InitMode { FromUrdfPerturbed, FromUrdfShared, Random };

struct InitSpec {
  InitMode mode = InitMode::FromUrdfPerturbed;
  double sigma = 0.1;
};

inline std::string_view init_mode_name(InitMode m) {
  switch (m) {
    case InitMode::Random: return "random";
    case InitMode::FromUrdfShared: return "from_urdf_shared";
    case InitMode::FromUrdfPerturbed: break;
  }
  return "from_urdf_perturbed";
}

inline std::optional<InitMode> parse_init_mode(std::string_view s) {
  for (InitMode m : {InitMode::FromUrdfPerturbed, InitMode::FromUrdfShared, InitMode::Random})
    if (s == init_mode_name(m)) return m;
  return std::nullopt;
}

inline ParamVector empty_params(Kind kind, const RobotModel& model, bool learn_damping, double b = kDefaultBias) {
  ParamVector p;
  p.kind = kind;
  p.bias = b;
  for (std::size_t i : model.moving_links()) p.link_names.push_back(model.links[i].name);
  p.num_damping = learn_damping ? model.n_dof() : 0;
  p.values.assign(p.size(), 0.0);
  return p;
}

// Perturbed-URDF initialization needs every learnable link to be physically
// consistent; otherwise it falls back to random initialization.
inline ParamVector init_params(Kind kind, const RobotModel& model, const InitSpec& init, std::uint64_t seed,
                               bool learn_damping = false, double b = kDefaultBias) {
  ParamVector p = empty_params(kind, model, learn_damping, b);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto noise = [&] { return init.sigma == 0.0 ? 0.0 : init.sigma * gauss(rng); };

  const auto moving = model.moving_links();
  if (init.mode == InitMode::FromUrdfShared && kind != Kind::Cov) {
    const ParamVector cov = init_params(Kind::Cov, model, init, seed, learn_damping, b);
    const auto links = materialize_links(cov);
    for (std::size_t k = 0; k < moving.size(); ++k) {
      const auto theta = invert_link(kind, links[k], b);
      std::copy(theta.begin(), theta.end(), p.link(k).begin());
    }
    const auto d = cov.damping();
    std::copy(d.begin(), d.end(), p.values.end() - static_cast<std::ptrdiff_t>(d.size()));
    return p;
  }
  bool from_urdf = init.mode != InitMode::Random;
  if (from_urdf) {
    for (std::size_t i : moving) from_urdf = from_urdf && consistency_check(model.links[i].inertia).fully_consistent;
  }
  if (from_urdf) {
    for (std::size_t k = 0; k < moving.size(); ++k) {
      const auto theta = invert_link(kind, model.links[moving[k]].inertia, b);
      std::copy(theta.begin(), theta.end(), p.link(k).begin());
    }
    const std::size_t base = p.num_links() * slots_per_link(kind);
    std::size_t dof = 0;
    for (const auto& l : model.links) {
      if (l.joint_kind == JointKind::Revolute && p.num_damping > 0) p.values[base + dof++] = invert_damping(l.inertia.damping);
    }
  }
  for (double& v : p.values) v += noise();
  return p;
}

// ---- JSON -------------------------------------------------------------------

inline nlohmann::ordered_json to_json(const ParamVector& p) {
  nlohmann::ordered_json j;
  j["kind"] = std::string(kind_name(p.kind));
  j["bias"] = p.bias;
  j["links"] = p.link_names;
  const auto names = slot_names(p.kind);
  nlohmann::ordered_json per_link = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < p.num_links(); ++i) {
    nlohmann::ordered_json slots;
    const auto v = p.link(i);
    for (std::size_t s = 0; s < names.size(); ++s) slots[names[s]] = v[s];
    per_link.push_back(std::move(slots));
  }
  j["per_link"] = std::move(per_link);
  const auto d = p.damping();
  j["damping"] = std::vector<double>(d.begin(), d.end());
  return j;
}

inline ParamVector params_from_json(const nlohmann::json& j) {
  ParamVector p;
  const auto kind = parse_kind(j.at("kind").get<std::string>());
  if (!kind) throw std::invalid_argument("unknown parameter kind '" + j.at("kind").get<std::string>() + "'");
  p.kind = *kind;
  p.bias = j.value("bias", kDefaultBias);
  const auto& per_link = j.at("per_link");
  const auto names = slot_names(p.kind);
  if (j.contains("links")) p.link_names = j.at("links").get<std::vector<std::string>>();
  if (p.link_names.empty()) {
    for (std::size_t i = 0; i < per_link.size(); ++i) p.link_names.push_back("link" + std::to_string(i));
  }
  if (p.link_names.size() != per_link.size()) throw std::invalid_argument("links and per_link differ in length");
  for (const auto& slots : per_link) {
    for (const auto& name : names) {
      if (!slots.contains(name)) throw std::invalid_argument("missing slot '" + name + "'");
      p.values.push_back(slots.at(name).get<double>());
    }
  }
  const auto damping = j.value("damping", std::vector<double>{});
  p.num_damping = damping.size();
  p.values.insert(p.values.end(), damping.begin(), damping.end());
  return p;
}

}  // namespace diffnea
