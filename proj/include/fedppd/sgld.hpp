#ifndef FEDPPD_SGLD_HPP
#define FEDPPD_SGLD_HPP

#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <span>
#include <string>

#include "fedppd/error.hpp"
#include "fedppd/model.hpp"
#include "fedppd/rng.hpp"

namespace fedppd {

struct SgldConfig {
  double step_size = 1e-3;
  // Polynomial decay alpha_v = alpha * (1 + v / tau)^(-kappa); tau == 0 keeps alpha constant.
  double decay_tau = 0.0;
  double decay_kappa = 0.0;
  std::size_t burn_in = 50;
  // Steps between full-data MAP evaluations; 0 means once per local epoch.
  std::size_t map_eval_every = 0;
  std::size_t minibatch_size = 32;

  double step_at(std::size_t v) const {
    if (decay_tau <= 0.0 || decay_kappa == 0.0) return step_size;
    return step_size * std::pow(1.0 + static_cast<double>(v) / decay_tau, -decay_kappa);
  }

  void validate() const {
    if (!(step_size > 0.0)) throw ConfigError("sgld.step_size must be > 0");
    if (decay_kappa < 0.0 || decay_kappa > 1.0) throw ConfigError("sgld.decay_kappa must be in [0, 1]");
    if (decay_tau < 0.0) throw ConfigError("sgld.decay_tau must be >= 0");
    if (minibatch_size == 0) throw ConfigError("sgld.minibatch_size must be >= 1");
  }
};

// Langevin update in place: params += (alpha/2) * grad_log_joint + N(0, alpha I).
// A null rng disables the noise, which reduces the update to gradient ascent
// with rate alpha/2.
inline void langevin_update(std::span<double> params, std::span<const double> grad_log_joint,
                            double alpha, Rng* rng) {
  if (params.size() != grad_log_joint.size()) {
    throw DimensionError("langevin_update: gradient length " + std::to_string(grad_log_joint.size()) +
                         " != parameter length " + std::to_string(params.size()));
  }
  if (!(alpha > 0.0)) throw ArgumentError("langevin_update: step size must be > 0");
  for (double g : grad_log_joint) {
    if (!std::isfinite(g)) throw NumericError("sgld: non-finite gradient");
  }
  const double half = 0.5 * alpha;
  if (rng == nullptr) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] += half * grad_log_joint[i];
    return;
  }
  const double sd = std::sqrt(alpha);
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] += half * grad_log_joint[i] + sd * rng->normal();
  }
}

// One SGLD step on the MLP posterior using the minibatch (inputs, labels) out of
// a client dataset of `dataset_size` examples.
inline ParamVector sgld_step(const ModelSpec& spec, ParamVector params, const Matrix& inputs,
                             std::span<const int> labels, double alpha, const PriorHyper& prior,
                             std::size_t dataset_size, Rng* rng) {
  const ValueAndGrad vg = log_joint_and_grad(spec, params, inputs, labels, prior, dataset_size);
  langevin_update(params.values, vg.grad.values, alpha, rng);
  return params;
}

// Keeps the sample with the highest full-data log joint seen so far.
class MapTracker {
 public:
  // Returns true if `params` replaced the stored best (strict improvement only).
  bool offer(double log_joint, const ParamVector& params) {
    if (!best_ || log_joint > best_log_joint_) {
      best_log_joint_ = log_joint;
      best_ = params;
      return true;
    }
    return false;
  }

  bool empty() const noexcept { return !best_.has_value(); }
  double best_log_joint() const noexcept { return best_log_joint_; }
  const ParamVector& best() const {
    if (!best_) throw ArgumentError("MAP tracker is empty");
    return *best_;
  }

 private:
  double best_log_joint_ = -std::numeric_limits<double>::infinity();
  std::optional<ParamVector> best_;
};

}  // namespace fedppd

#endif  // FEDPPD_SGLD_HPP
