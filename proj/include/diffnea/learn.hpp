#pragma once

// Losses, optimizers and the batch / online trainers.
//
// Gradients of a minibatch are computed on fixed 64-sample shards, each on
// its own tape, and summed in shard order. Results therefore do not depend
// on how many worker threads run the shards (DIFFNEA_THREADS caps them).

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "diffnea/autodiff.hpp"
#include "diffnea/dynamics.hpp"
#include "diffnea/metrics.hpp"
#include "diffnea/params.hpp"
#include "diffnea/trajectory.hpp"

namespace diffnea {

enum class LossKind { ID, FD };
enum class OptimizerKind { SGD, Adam };

inline constexpr double kDefaultClipNorm = 1e3;

struct TrainConfig {
  Kind kind = Kind::Cov;
  LossKind loss = LossKind::ID;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 200;
  double convergence_nmse = 0.1;
  bool shuffle = true;
  std::uint64_t seed = 0;
  bool friction_learnable = false;
  InitSpec init;
  double bias = kDefaultBias;
  // Unset: clip at kDefaultClipNorm for NoStr only. A value <= 0 disables clipping.
  std::optional<double> clip_norm;
  // Keep training to max_epochs after convergence instead of stopping.
  bool train_past_convergence = false;

  double effective_clip() const {
    if (clip_norm) return *clip_norm;
    return kind == Kind::NoStr ? kDefaultClipNorm : 0.0;
  }

  void validate() const {
    if (!(lr > 0.0)) throw std::invalid_argument("lr must be positive");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
    if (!(convergence_nmse > 0.0)) throw std::invalid_argument("convergence_nmse must be positive");
    if (!(init.sigma >= 0.0)) throw std::invalid_argument("init sigma must be non-negative");
    if (!(bias > 0.0)) throw std::invalid_argument("bias must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("Adam betas must lie in [0, 1)");
  }
};

inline std::string_view loss_name(LossKind l) { return l == LossKind::ID ? "id" : "fd"; }
inline std::string_view optimizer_name(OptimizerKind o) { return o == OptimizerKind::Adam ? "adam" : "sgd"; }

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"kind", kind_name(c.kind)},
                     {"loss", loss_name(c.loss)},
                     {"optimizer", optimizer_name(c.optimizer)},
                     {"lr", c.lr},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"epsilon", c.epsilon},
                     {"batch_size", c.batch_size},
                     {"max_epochs", c.max_epochs},
                     {"convergence_nmse", c.convergence_nmse},
                     {"shuffle", c.shuffle},
                     {"seed", c.seed},
                     {"friction_learnable", c.friction_learnable},
                     {"init", init_mode_name(c.init.mode)},
                     {"init_sigma", c.init.sigma},
                     {"bias", c.bias},
                     {"clip_norm", c.clip_norm ? nlohmann::json(*c.clip_norm) : nlohmann::json(nullptr)},
                     {"train_past_convergence", c.train_past_convergence}};
}

// Missing fields keep their defaults; unknown fields are rejected.
inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    if (key == "kind") {
      const auto k = parse_kind(v.get<std::string>());
      if (!k) throw std::invalid_argument("unknown kind '" + v.get<std::string>() + "' (valid: nostr, symm, spd, tri, cov)");
      c.kind = *k;
    } else if (key == "loss") {
      const auto s = v.get<std::string>();
      if (s == "id" || s == "ID") c.loss = LossKind::ID;
      else if (s == "fd" || s == "FD") c.loss = LossKind::FD;
      else throw std::invalid_argument("unknown loss '" + s + "' (valid: id, fd)");
    } else if (key == "optimizer") {
      const auto s = v.get<std::string>();
      if (s == "adam") c.optimizer = OptimizerKind::Adam;
      else if (s == "sgd") c.optimizer = OptimizerKind::SGD;
      else throw std::invalid_argument("unknown optimizer '" + s + "' (valid: adam, sgd)");
    } else if (key == "lr") c.lr = v.get<double>();
    else if (key == "beta1") c.beta1 = v.get<double>();
    else if (key == "beta2") c.beta2 = v.get<double>();
    else if (key == "epsilon") c.epsilon = v.get<double>();
    else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
    else if (key == "max_epochs") c.max_epochs = v.get<std::size_t>();
    else if (key == "convergence_nmse") c.convergence_nmse = v.get<double>();
    else if (key == "shuffle") c.shuffle = v.get<bool>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "friction_learnable") c.friction_learnable = v.get<bool>();
    else if (key == "init") {
      const auto s = v.get<std::string>();
      const auto m = parse_init_mode(s);
      if (!m) throw std::invalid_argument("unknown init '" + s + "' (valid: from_urdf_perturbed, from_urdf_shared, random)");
      c.init.mode = *m;
    } else if (key == "init_sigma") c.init.sigma = v.get<double>();
    else if (key == "bias") c.bias = v.get<double>();
    else if (key == "clip_norm") c.clip_norm = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    else if (key == "train_past_convergence") c.train_past_convergence = v.get<bool>();
    else throw std::invalid_argument("unknown train config field '" + key + "'");
  }
}

// ---- parallel helpers -------------------------------------------------------

inline std::size_t worker_count() {
  if (const char* env = std::getenv("DIFFNEA_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<std::size_t>(n);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

// Runs f(i) for i in [0, n). Exceptions are rethrown in index order.
template <class F>
void parallel_for(std::size_t n, F&& f) {
  const std::size_t workers = std::min(worker_count(), n);
  std::vector<std::exception_ptr> errors(n);
  auto guarded = [&](std::size_t i) {
    try {
      f(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) guarded(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) guarded(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---- losses -----------------------------------------------------------------

namespace detail {

inline void check_batch(const RobotModel& model, std::span<const Record> batch) {
  if (batch.empty()) throw std::invalid_argument("loss: batch is empty");
  const std::size_t n = model.n_dof();
  for (const auto& r : batch) {
    if (r.q.size() != n || r.qd.size() != n || r.qdd.size() != n || r.tau.size() != n) {
      throw std::invalid_argument("loss: record width differs from the model's n_dof");
    }
  }
}

}  // namespace detail

// Sum over the batch of ||tau - ID_theta(q, qd, qdd)||².
template <class T>
T loss_id(const RobotModel& model, const ParamVector& layout, std::span<const T> theta, std::span<const Record> batch) {
  detail::check_batch(model, batch);
  const auto links = materialize_model<T>(model, layout, theta);
  const auto bodies = rigid_bodies<T>(links);
  T sum = 0.0;
  for (const auto& r : batch) {
    const auto pred = rnea<T>(model, bodies, r.q, r.qd, r.qdd);
    for (std::size_t j = 0; j < pred.size(); ++j) sum = sum + square(r.tau[j] - pred[j]);
  }
  return sum;
}

// Sum over the batch of ||qdd - FD_theta(q, qd, tau)||². Throws
// SingularMassMatrix when the parameters give an indefinite mass matrix.
template <class T>
T loss_fd(const RobotModel& model, const ParamVector& layout, std::span<const T> theta, std::span<const Record> batch) {
  detail::check_batch(model, batch);
  const auto links = materialize_model<T>(model, layout, theta);
  const auto bodies = rigid_bodies<T>(links);
  T sum = 0.0;
  for (const auto& r : batch) {
    const auto pred = forward_dynamics<T, double>(model, bodies, r.q, r.qd, r.tau);
    for (std::size_t j = 0; j < pred.size(); ++j) sum = sum + square(r.qdd[j] - pred[j]);
  }
  return sum;
}

template <class T>
T loss(LossKind kind, const RobotModel& model, const ParamVector& layout, std::span<const T> theta,
       std::span<const Record> batch) {
  return kind == LossKind::ID ? loss_id<T>(model, layout, theta, batch) : loss_fd<T>(model, layout, theta, batch);
}

inline constexpr std::size_t kShardSize = 64;

struct LossGradient {
  double loss = 0.0;
  std::vector<double> grad;
};

inline LossGradient loss_and_gradient(LossKind kind, const RobotModel& model, const ParamVector& layout,
                                      std::span<const double> theta, std::span<const Record> batch) {
  const std::size_t shards = (batch.size() + kShardSize - 1) / kShardSize;
  std::vector<LossGradient> parts(shards);
  parallel_for(shards, [&](std::size_t s) {
    const auto sub = batch.subspan(s * kShardSize, std::min(kShardSize, batch.size() - s * kShardSize));
    Tape tape;
    tape.reserve(sub.size() * 2000 + theta.size() * 64);
    std::vector<Var> vars;
    vars.reserve(theta.size());
    for (double x : theta) vars.push_back(tape.variable(x));
    const Var l = loss<Var>(kind, model, layout, std::span<const Var>(vars), sub);
    tape.backward(l);
    parts[s].loss = l.value();
    parts[s].grad = tape.gradient(vars);
  });
  LossGradient out;
  out.grad.assign(theta.size(), 0.0);
  for (const auto& p : parts) {
    out.loss += p.loss;
    for (std::size_t i = 0; i < out.grad.size(); ++i) out.grad[i] += p.grad[i];
  }
  return out;
}

// ---- evaluation ---------------------------------------------------------------

struct Evaluation {
  double loss = 0.0;              // mean per sample
  std::vector<double> nmse;       // torque NMSE per joint
  double nmse_max = 0.0;
  double nmse_mean = 0.0;
  double consistent_fraction = 0.0;
};

inline double consistent_fraction(const ParamVector& p) {
  const auto links = materialize_links(p);
  if (links.empty()) return 1.0;
  std::size_t ok = 0;
  for (const auto& l : links) ok += consistency_check(l).fully_consistent ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(links.size());
}

// Torque predictions of the parameterized model on every record.
inline std::vector<std::vector<double>> predict_torques(const RobotModel& model, const ParamVector& p,
                                                        std::span<const Record> data) {
  const auto bodies = rigid_bodies<double>(materialize_model(model, p));
  std::vector<std::vector<double>> out(data.size());
  const std::size_t shards = (data.size() + 1023) / 1024;
  parallel_for(shards, [&](std::size_t s) {
    const std::size_t end = std::min(data.size(), (s + 1) * 1024);
    for (std::size_t i = s * 1024; i < end; ++i) {
      out[i] = rnea<double>(model, bodies, data[i].q, data[i].qd, data[i].qdd);
    }
  });
  return out;
}

inline std::vector<double> torque_nmse(const RobotModel& model, const ParamVector& p, std::span<const Record> data) {
  const auto pred = predict_torques(model, p, data);
  std::vector<std::vector<double>> target;
  target.reserve(data.size());
  for (const auto& r : data) target.push_back(r.tau);
  return nmse_per_channel(pred, target);
}

inline Evaluation evaluate(LossKind kind, const RobotModel& model, const ParamVector& p, std::span<const Record> data) {
  Evaluation e;
  const auto pred = predict_torques(model, p, data);
  std::vector<std::vector<double>> target;
  target.reserve(data.size());
  for (const auto& r : data) target.push_back(r.tau);
  e.nmse = nmse_per_channel(pred, target);
  e.nmse_max = *std::max_element(e.nmse.begin(), e.nmse.end());
  for (double v : e.nmse) e.nmse_mean += v;
  e.nmse_mean /= static_cast<double>(e.nmse.size());
  if (kind == LossKind::ID) {
    for (std::size_t i = 0; i < data.size(); ++i)
      for (std::size_t j = 0; j < pred[i].size(); ++j) e.loss += square(data[i].tau[j] - pred[i][j]);
  } else {
    try {
      e.loss = loss_fd<double>(model, p, p.values, data);
    } catch (const SingularMassMatrix&) {
      e.loss = std::numeric_limits<double>::infinity();
    }
  }
  e.loss /= static_cast<double>(data.size());
  e.consistent_fraction = consistent_fraction(p);
  return e;
}

// ---- optimizers -------------------------------------------------------------

class Optimizer {
 public:
  Optimizer(const TrainConfig& cfg, std::size_t n) : cfg_(cfg), m_(n, 0.0), v_(n, 0.0) {}

  void step(std::vector<double>& theta, std::vector<double> grad) {
    const double clip = cfg_.effective_clip();
    if (clip > 0.0) {
      double sq = 0.0;
      for (double g : grad) sq += g * g;
      const double norm = std::sqrt(sq);
      if (norm > clip) {
        for (double& g : grad) g *= clip / norm;
      }
    }
    if (cfg_.optimizer == OptimizerKind::SGD) {
      for (std::size_t i = 0; i < theta.size(); ++i) theta[i] -= cfg_.lr * grad[i];
      return;
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < theta.size(); ++i) {
      m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * grad[i];
      v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * grad[i] * grad[i];
      theta[i] -= cfg_.lr * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + cfg_.epsilon);
    }
  }

 private:
  TrainConfig cfg_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// ---- trainers -----------------------------------------------------------------

struct TrainReport {
  TrainConfig config;
  std::optional<std::size_t> epochs_to_converge;
  // Entry 0 is the initialization; entry e is the state after epoch e.
  std::vector<double> loss_history;
  std::vector<std::vector<double>> nmse_per_joint_history;
  std::vector<double> consistency_history;
  ParamVector initial_params;
  ParamVector final_params;
  std::size_t rejected_steps = 0;
  bool aborted = false;
  std::string diagnostic;

  std::size_t epochs_run() const { return loss_history.empty() ? 0 : loss_history.size() - 1; }
};

inline ParamVector initial_params_for(const RobotModel& model, const TrainConfig& cfg) {
  return init_params(cfg.kind, model, cfg.init, cfg.seed, cfg.friction_learnable, cfg.bias);
}

namespace detail {

// Fisher-Yates with a plain modulus, so the order depends only on the engine.
inline void shuffle_indices(std::vector<std::size_t>& idx, std::mt19937_64& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng() % i]);
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// One optimizer update on a batch. Returns false when the step was rejected.
inline bool update(const TrainConfig& cfg, const RobotModel& model, ParamVector& p, Optimizer& opt,
                   std::span<const Record> batch, TrainReport& report) {
  LossGradient lg;
  try {
    lg = loss_and_gradient(cfg.loss, model, p, p.values, batch);
  } catch (const SingularMassMatrix& e) {
    ++report.rejected_steps;
    if (report.diagnostic.empty()) report.diagnostic = std::string("step rejected: ") + e.what();
    return false;
  }
  if (!std::isfinite(lg.loss) || !all_finite(lg.grad)) throw std::domain_error("non-finite loss or gradient");
  opt.step(p.values, std::move(lg.grad));
  if (!all_finite(p.values)) throw std::domain_error("non-finite parameters after update");
  return true;
}

}  // namespace detail

inline TrainReport train(const RobotModel& model, const Trajectory& data, const TrainConfig& cfg,
                         std::optional<ParamVector> init = std::nullopt) {
  cfg.validate();
  if (data.size() < cfg.batch_size) {
    throw std::invalid_argument("training data has " + std::to_string(data.size()) + " records, fewer than batch_size " +
                                std::to_string(cfg.batch_size));
  }
  if (data.n_dof != model.n_dof()) throw std::invalid_argument("dataset n_dof differs from the model");
  TrainReport report;
  report.config = cfg;
  ParamVector p = init ? *init : initial_params_for(model, cfg);
  report.initial_params = p;
  ParamVector last_good = p;
  const std::span<const Record> all(data.records);

  auto record = [&](std::size_t epoch) {
    const Evaluation e = evaluate(cfg.loss, model, p, all);
    if (!std::isfinite(e.nmse_max)) throw std::domain_error("non-finite torque predictions");
    report.loss_history.push_back(e.loss);
    report.nmse_per_joint_history.push_back(e.nmse);
    report.consistency_history.push_back(e.consistent_fraction);
    if (!report.epochs_to_converge && e.nmse_max <= cfg.convergence_nmse) report.epochs_to_converge = epoch;
  };

  Optimizer opt(cfg, p.size());
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5deece66dull);
  std::vector<std::size_t> order(data.size());
  std::vector<Record> batch;
  try {
    record(0);
    last_good = p;
    for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
      if (report.epochs_to_converge && !cfg.train_past_convergence) break;
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      if (cfg.shuffle) detail::shuffle_indices(order, shuffle_rng);
      for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(order.size(), start + cfg.batch_size);
        if (cfg.shuffle) {
          batch.clear();
          for (std::size_t i = start; i < end; ++i) batch.push_back(data.records[order[i]]);
          detail::update(cfg, model, p, opt, batch, report);
        } else {
          detail::update(cfg, model, p, opt, all.subspan(start, end - start), report);
        }
      }
      record(epoch);
      last_good = p;
    }
  } catch (const std::domain_error& e) {
    report.aborted = true;
    report.diagnostic = std::string("training aborted: ") + e.what();
    p = last_good;
  }
  report.final_params = p;
  return report;
}

struct OnlineReport {
  TrainConfig config;
  // One entry per batch, measured on the entire dataset after the update.
  std::vector<double> nmse_mean;
  std::vector<std::vector<double>> nmse_per_joint;
  std::vector<double> consistency;
  ParamVector final_params;
  std::size_t rejected_steps = 0;
  bool aborted = false;
  std::string diagnostic;
};

// Single pass in temporal order, no shuffling.
inline OnlineReport train_online(const RobotModel& model, const Trajectory& data, TrainConfig cfg,
                                 std::optional<ParamVector> init = std::nullopt) {
  cfg.shuffle = false;
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("online training needs data");
  if (data.n_dof != model.n_dof()) throw std::invalid_argument("dataset n_dof differs from the model");
  OnlineReport out;
  out.config = cfg;
  ParamVector p = init ? *init : initial_params_for(model, cfg);
  ParamVector last_good = p;
  Optimizer opt(cfg, p.size());
  TrainReport scratch;
  const std::span<const Record> all(data.records);
  try {
    for (std::size_t start = 0; start < data.size(); start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, data.size() - start);
      detail::update(cfg, model, p, opt, all.subspan(start, count), scratch);
      const Evaluation e = evaluate(cfg.loss, model, p, all);
      if (!std::isfinite(e.nmse_max)) throw std::domain_error("non-finite torque predictions");
      out.nmse_mean.push_back(e.nmse_mean);
      out.nmse_per_joint.push_back(e.nmse);
      out.consistency.push_back(e.consistent_fraction);
      last_good = p;
    }
  } catch (const std::domain_error& e) {
    out.aborted = true;
    out.diagnostic = std::string("online training aborted: ") + e.what();
    p = last_good;
  }
  out.rejected_steps = scratch.rejected_steps;
  if (out.diagnostic.empty()) out.diagnostic = scratch.diagnostic;
  out.final_params = p;
  return out;
}

// ---- report output ----------------------------------------------------------

inline nlohmann::ordered_json to_json(const TrainReport& r, const RobotModel& model) {
  nlohmann::ordered_json j;
  j["config"] = nlohmann::json(r.config);
  j["epochs_to_converge"] = r.epochs_to_converge ? nlohmann::json(*r.epochs_to_converge) : nlohmann::json(nullptr);
  j["epochs_run"] = r.epochs_run();
  j["loss_history"] = r.loss_history;
  j["nmse_per_joint_history"] = r.nmse_per_joint_history;
  j["consistency_history"] = r.consistency_history;
  j["rejected_steps"] = r.rejected_steps;
  j["aborted"] = r.aborted;
  j["diagnostic"] = r.diagnostic;
  nlohmann::ordered_json links = nlohmann::ordered_json::array();
  const auto inertias = materialize_model(model, r.final_params);
  const auto moving = model.moving_links();
  for (std::size_t k = 0; k < moving.size(); ++k) {
    const auto rep = consistency_check(inertias[moving[k]]);
    links.push_back({{"link", model.links[moving[k]].name},
                     {"fully_consistent", rep.fully_consistent},
                     {"violations", violations(rep)}});
  }
  j["final_consistency"] = std::move(links);
  j["final_params"] = to_json(r.final_params);
  return j;
}

inline std::string history_csv(const TrainReport& r) {
  const std::size_t n = r.nmse_per_joint_history.empty() ? 0 : r.nmse_per_joint_history.front().size();
  std::string out = "epoch,loss";
  for (std::size_t j = 0; j < n; ++j) out += ",nmse" + std::to_string(j);
  out += ",consistent_fraction\n";
  for (std::size_t e = 0; e < r.loss_history.size(); ++e) {
    out += std::to_string(e) + "," + format_double(r.loss_history[e]);
    for (double v : r.nmse_per_joint_history[e]) out += "," + format_double(v);
    out += "," + format_double(r.consistency_history[e]) + "\n";
  }
  return out;
}

}  // namespace diffnea
