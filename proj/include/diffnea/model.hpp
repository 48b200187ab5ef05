#pragma once

// Serial-chain robot model read from a subset of URDF.

#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/property_tree/ptree.hpp>
#include <boost/property_tree/xml_parser.hpp>
#include <nlohmann/json.hpp>

#include "diffnea/inertia.hpp"
#include "diffnea/io.hpp"
#include "diffnea/spatial.hpp"

namespace diffnea {

class UrdfError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class JointKind { Fixed, Revolute };

struct JointLimits {
  double lower = 0.0;
  double upper = 0.0;
  double velocity = 0.0;
};

struct LinkSpec {
  std::string name;
  std::string joint_name;  // empty for the root
  JointKind joint_kind = JointKind::Fixed;
  // Joint frame in the parent link frame, as written in the URDF.
  Vec3<double> origin_xyz{};
  Vec3<double> origin_rpy{};
  SpatialTransform origin;
  Vec3<double> axis{1.0, 0.0, 0.0};
  LinkInertia<double> inertia;
  std::optional<JointLimits> limits;
  // Continuous joints parse as revolute without limits; remembered for emit.
  bool continuous = false;
};

struct RobotModel {
  std::string name;
  std::vector<LinkSpec> links;  // root first
  Vec3<double> gravity{0.0, 0.0, -9.81};

  std::size_t n_dof() const {
    std::size_t n = 0;
    for (const auto& l : links) n += l.joint_kind == JointKind::Revolute ? 1 : 0;
    return n;
  }

  // Links downstream of the first revolute joint. Links before it are welded
  // to the world and never influence joint torques.
  std::vector<std::size_t> moving_links() const {
    std::vector<std::size_t> out;
    bool moving = false;
    for (std::size_t i = 0; i < links.size(); ++i) {
      moving = moving || links[i].joint_kind == JointKind::Revolute;
      if (moving) out.push_back(i);
    }
    return out;
  }

  std::vector<LinkInertia<double>> inertias() const {
    std::vector<LinkInertia<double>> out;
    out.reserve(links.size());
    for (const auto& l : links) out.push_back(l.inertia);
    return out;
  }

  std::vector<JointLimits> joint_limits() const {
    std::vector<JointLimits> out;
    for (const auto& l : links) {
      if (l.joint_kind != JointKind::Revolute) continue;
      if (!l.limits) throw std::invalid_argument("joint '" + l.joint_name + "' has no limits");
      out.push_back(*l.limits);
    }
    return out;
  }
};

namespace detail {

inline Vec3<double> parse_vec3(const std::string& text, const std::string& what) {
  std::istringstream in(text);
  Vec3<double> v;
  std::string tok;
  for (std::size_t i = 0; i < 3; ++i) {
    if (!(in >> tok)) throw UrdfError("expected three numbers in " + what + ": '" + text + "'");
    try {
      v[i] = parse_double(tok);
    } catch (const std::invalid_argument&) {
      throw UrdfError("bad number in " + what + ": '" + tok + "'");
    }
  }
  if (in >> tok) throw UrdfError("trailing data in " + what + ": '" + text + "'");
  return v;
}

inline double attr_double(const boost::property_tree::ptree& node, const std::string& key,
                          const std::string& what) {
  const auto s = node.get_optional<std::string>("<xmlattr>." + key);
  if (!s) throw UrdfError("missing attribute '" + key + "' in " + what);
  try {
    return parse_double(*s);
  } catch (const std::invalid_argument&) {
    throw UrdfError("bad number for '" + key + "' in " + what + ": '" + *s + "'");
  }
}

inline void read_origin(const boost::property_tree::ptree& parent, Vec3<double>& xyz,
                        Vec3<double>& rpy, const std::string& what) {
  xyz = {};
  rpy = {};
  if (const auto o = parent.get_child_optional("origin")) {
    if (auto s = o->get_optional<std::string>("<xmlattr>.xyz")) xyz = parse_vec3(*s, what + " origin xyz");
    if (auto s = o->get_optional<std::string>("<xmlattr>.rpy")) rpy = parse_vec3(*s, what + " origin rpy");
  }
}

inline LinkInertia<double> read_inertial(const boost::property_tree::ptree& link,
                                         const std::string& name) {
  const auto inertial = link.get_child_optional("inertial");
  if (!inertial) throw UrdfError("link '" + name + "' has no <inertial> block");
  const std::string what = "link '" + name + "' inertial";
  Vec3<double> xyz, rpy;
  read_origin(*inertial, xyz, rpy, what);
  const auto mass_node = inertial->get_child_optional("mass");
  if (!mass_node) throw UrdfError(what + ": missing <mass>");
  const double mass = attr_double(*mass_node, "value", what + " mass");
  if (mass < 0.0) throw UrdfError(what + ": negative mass");
  const auto in = inertial->get_child_optional("inertia");
  if (!in) throw UrdfError(what + ": missing <inertia>");
  const double ixx = attr_double(*in, "ixx", what), ixy = attr_double(*in, "ixy", what),
               ixz = attr_double(*in, "ixz", what), iyy = attr_double(*in, "iyy", what),
               iyz = attr_double(*in, "iyz", what), izz = attr_double(*in, "izz", what);
  const Mat3<double> local = Mat3<double>::from_rows({ixx, ixy, ixz, ixy, iyy, iyz, ixz, iyz, izz});
  const Mat3<double> r = rpy_to_rotation(rpy);
  Mat3<double> ic = r * local * transpose(r);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = i + 1; j < 3; ++j) ic(j, i) = ic(i, j);

  LinkInertia<double> out;
  out.mass = mass;
  out.h = scale(mass, xyz);
  out.inertia_com = ic;
  return out;
}

}  // namespace detail

inline RobotModel parse_urdf(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::read_xml(in, tree);
  } catch (const pt::xml_parser_error& e) {
    throw UrdfError(std::string("malformed XML: ") + e.what());
  }
  const auto robot = tree.get_child_optional("robot");
  if (!robot) throw UrdfError("no <robot> element");

  RobotModel model;
  model.name = robot->get<std::string>("<xmlattr>.name", "");

  struct RawJoint {
    std::string name, type, parent, child;
    const pt::ptree* node;
  };
  std::map<std::string, const pt::ptree*> link_nodes;
  std::vector<std::string> link_order;
  std::vector<RawJoint> joints;
  for (const auto& [tag, node] : *robot) {
    if (tag == "link") {
      const auto name = node.get<std::string>("<xmlattr>.name", "");
      if (name.empty()) throw UrdfError("link without a name");
      if (!link_nodes.emplace(name, &node).second) throw UrdfError("duplicate link '" + name + "'");
      link_order.push_back(name);
    } else if (tag == "joint") {
      RawJoint j;
      j.name = node.get<std::string>("<xmlattr>.name", "");
      j.type = node.get<std::string>("<xmlattr>.type", "");
      j.parent = node.get<std::string>("parent.<xmlattr>.link", "");
      j.child = node.get<std::string>("child.<xmlattr>.link", "");
      j.node = &node;
      if (j.parent.empty() || j.child.empty()) {
        throw UrdfError("joint '" + j.name + "' lacks parent or child");
      }
      joints.push_back(std::move(j));
    }
  }
  if (link_nodes.empty()) throw UrdfError("robot has no links");

  std::map<std::string, const RawJoint*> joint_by_child;
  std::map<std::string, std::vector<const RawJoint*>> joints_by_parent;
  for (const auto& j : joints) {
    if (!link_nodes.count(j.parent) || !link_nodes.count(j.child)) {
      throw UrdfError("joint '" + j.name + "' references an unknown link");
    }
    if (!joint_by_child.emplace(j.child, &j).second) {
      throw UrdfError("link '" + j.child + "' has two parents: non-serial structure");
    }
    joints_by_parent[j.parent].push_back(&j);
  }
  std::vector<std::string> roots;
  for (const auto& name : link_order)
    if (!joint_by_child.count(name)) roots.push_back(name);
  if (roots.size() != 1) throw UrdfError("expected exactly one root link: non-serial structure");

  std::set<std::string> visited;
  std::string current = roots.front();
  const RawJoint* via = nullptr;
  while (true) {
    if (!visited.insert(current).second) throw UrdfError("kinematic loop at '" + current + "'");
    LinkSpec spec;
    spec.name = current;
    spec.inertia = detail::read_inertial(*link_nodes.at(current), current);
    if (via != nullptr) {
      const std::string what = "joint '" + via->name + "'";
      spec.joint_name = via->name;
      detail::read_origin(*via->node, spec.origin_xyz, spec.origin_rpy, what);
      spec.origin = {rpy_to_rotation(spec.origin_rpy), spec.origin_xyz};
      if (via->type == "fixed") {
        spec.joint_kind = JointKind::Fixed;
      } else if (via->type == "revolute" || via->type == "continuous") {
        spec.joint_kind = JointKind::Revolute;
        spec.continuous = via->type == "continuous";
        if (auto s = via->node->get_optional<std::string>("axis.<xmlattr>.xyz")) {
          spec.axis = detail::parse_vec3(*s, what + " axis");
        }
        const double n = norm(spec.axis);
        if (n == 0.0) throw UrdfError(what + ": zero axis");
        spec.axis = scale(1.0 / n, spec.axis);
        if (!spec.continuous) {
          if (const auto lim = via->node->get_child_optional("limit")) {
            JointLimits l;
            l.lower = detail::attr_double(*lim, "lower", what + " limit");
            l.upper = detail::attr_double(*lim, "upper", what + " limit");
            l.velocity = lim->get_optional<std::string>("<xmlattr>.velocity")
                             ? detail::attr_double(*lim, "velocity", what + " limit")
                             : 0.0;
            if (l.upper < l.lower) throw UrdfError(what + ": upper limit below lower");
            spec.limits = l;
          }
        }
        if (const auto dyn = via->node->get_child_optional("dynamics")) {
          if (dyn->get_optional<std::string>("<xmlattr>.damping")) {
            spec.inertia.damping = detail::attr_double(*dyn, "damping", what + " dynamics");
          }
        }
      } else {
        throw UrdfError(what + ": unsupported joint type '" + via->type + "'");
      }
    }
    model.links.push_back(std::move(spec));

    const auto it = joints_by_parent.find(current);
    if (it == joints_by_parent.end()) break;
    if (it->second.size() > 1) throw UrdfError("branching chain at link '" + current + "'");
    via = it->second.front();
    current = via->child;
  }
  if (visited.size() != link_nodes.size()) throw UrdfError("disconnected links: non-serial structure");
  return model;
}

inline RobotModel load_urdf(const std::filesystem::path& path) {
  return parse_urdf(read_file(path));
}

// Writes the supported subset back as URDF; parse_urdf(emit_urdf(m)) == m.
inline std::string emit_urdf(const RobotModel& model) {
  auto v3 = [](const Vec3<double>& v) {
    return format_double(v[0]) + " " + format_double(v[1]) + " " + format_double(v[2]);
  };
  std::ostringstream out;
  out << "<?xml version=\"1.0\"?>\n<robot name=\"" << model.name << "\">\n";
  for (const auto& l : model.links) {
    const auto& in = l.inertia;
    const Vec3<double> com = in.mass > 0.0 ? scale(1.0 / in.mass, in.h) : Vec3<double>{};
    const auto& ic = in.inertia_com;
    out << "  <link name=\"" << l.name << "\">\n"
        << "    <inertial>\n"
        << "      <origin xyz=\"" << v3(com) << "\" rpy=\"0 0 0\"/>\n"
        << "      <mass value=\"" << format_double(in.mass) << "\"/>\n"
        << "      <inertia ixx=\"" << format_double(ic(0, 0)) << "\" ixy=\"" << format_double(ic(0, 1))
        << "\" ixz=\"" << format_double(ic(0, 2)) << "\" iyy=\"" << format_double(ic(1, 1))
        << "\" iyz=\"" << format_double(ic(1, 2)) << "\" izz=\"" << format_double(ic(2, 2))
        << "\"/>\n"
        << "    </inertial>\n"
        << "  </link>\n";
  }
  for (std::size_t i = 1; i < model.links.size(); ++i) {
    const auto& l = model.links[i];
    const char* type = l.joint_kind == JointKind::Fixed ? "fixed" : (l.continuous ? "continuous" : "revolute");
    out << "  <joint name=\"" << l.joint_name << "\" type=\"" << type << "\">\n"
        << "    <parent link=\"" << model.links[i - 1].name << "\"/>\n"
        << "    <child link=\"" << l.name << "\"/>\n"
        << "    <origin xyz=\"" << v3(l.origin_xyz) << "\" rpy=\"" << v3(l.origin_rpy) << "\"/>\n";
    if (l.joint_kind == JointKind::Revolute) {
      out << "    <axis xyz=\"" << v3(l.axis) << "\"/>\n";
      if (l.limits) {
        out << "    <limit lower=\"" << format_double(l.limits->lower) << "\" upper=\""
            << format_double(l.limits->upper) << "\" velocity=\"" << format_double(l.limits->velocity)
            << "\" effort=\"0\"/>\n";
      }
      out << "    <dynamics damping=\"" << format_double(l.inertia.damping) << "\"/>\n";
    }
    out << "  </joint>\n";
  }
  out << "</robot>\n";
  return out.str();
}

// Debug dump for diffing fixtures.
inline nlohmann::ordered_json model_to_json(const RobotModel& model) {
  using nlohmann::ordered_json;
  auto v3 = [](const Vec3<double>& v) { return ordered_json::array({v[0], v[1], v[2]}); };
  ordered_json links = ordered_json::array();
  for (const auto& l : model.links) {
    ordered_json j;
    j["name"] = l.name;
    j["joint"] = l.joint_name;
    j["joint_kind"] = l.joint_kind == JointKind::Fixed ? "fixed" : "revolute";
    j["origin_xyz"] = v3(l.origin_xyz);
    j["origin_rpy"] = v3(l.origin_rpy);
    j["axis"] = v3(l.axis);
    j["mass"] = l.inertia.mass;
    j["h"] = v3(l.inertia.h);
    j["inertia_com"] = l.inertia.inertia_com.m;
    j["damping"] = l.inertia.damping;
    if (l.limits) j["limits"] = {l.limits->lower, l.limits->upper, l.limits->velocity};
    links.push_back(std::move(j));
  }
  ordered_json out;
  out["name"] = model.name;
  out["gravity"] = v3(model.gravity);
  out["n_dof"] = model.n_dof();
  out["links"] = std::move(links);
  return out;
}

// World pose of every link frame.
inline std::vector<SpatialTransform> forward_kinematics(const RobotModel& model, std::span<const double> q) {
  if (q.size() != model.n_dof()) throw std::invalid_argument("forward_kinematics: q has wrong length");
  std::vector<SpatialTransform> poses;
  poses.reserve(model.links.size());
  SpatialTransform world;
  std::size_t dof = 0;
  for (const auto& l : model.links) {
    SpatialTransform joint = l.origin;
    if (l.joint_kind == JointKind::Revolute) {
      joint = joint * SpatialTransform{axis_angle_rotation(l.axis, q[dof++]), {}};
    }
    world = world * joint;
    poses.push_back(world);
  }
  return poses;
}

inline std::vector<ConsistencyReport> validate_model(const RobotModel& model) {
  std::vector<ConsistencyReport> out;
  out.reserve(model.links.size());
  for (const auto& l : model.links) out.push_back(consistency_check(l.inertia));
  return out;
}

}  // namespace diffnea
