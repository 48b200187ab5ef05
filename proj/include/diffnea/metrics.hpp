#pragma once

#include <span>
#include <stdexcept>
#include <vector>

namespace diffnea {

struct NmseResult {
  double value = 0.0;
  bool zero_variance = false;  // value is then the raw MSE
};

// MSE(pred, target) / Var(target), population variance.
inline NmseResult nmse_checked(std::span<const double> pred, std::span<const double> target) {
  if (pred.size() != target.size()) throw std::invalid_argument("nmse: series differ in length");
  if (target.size() < 2) throw std::invalid_argument("nmse: need at least two samples");
  const double n = static_cast<double>(target.size());
  double mean = 0.0;
  for (double y : target) mean += y;
  mean /= n;
  double var = 0.0, mse = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    var += (target[i] - mean) * (target[i] - mean);
    mse += (pred[i] - target[i]) * (pred[i] - target[i]);
  }
  var /= n;
  mse /= n;
  if (var == 0.0) return {mse, true};
  return {mse / var, false};
}

inline double nmse(std::span<const double> pred, std::span<const double> target) {
  return nmse_checked(pred, target).value;
}

// Per-channel NMSE of row-major series (one row per time step).
inline std::vector<double> nmse_per_channel(const std::vector<std::vector<double>>& pred,
                                            const std::vector<std::vector<double>>& target) {
  if (pred.size() != target.size() || target.empty()) throw std::invalid_argument("nmse: series differ in length");
  const std::size_t channels = target.front().size();
  std::vector<double> out(channels);
  std::vector<double> p(target.size()), t(target.size());
  for (std::size_t j = 0; j < channels; ++j) {
    for (std::size_t i = 0; i < target.size(); ++i) {
      p[i] = pred[i][j];
      t[i] = target[i][j];
    }
    out[j] = nmse(p, t);
  }
  return out;
}

}  // namespace diffnea
