#ifndef FEDPPD_DISTILL_HPP
#define FEDPPD_DISTILL_HPP

#include <cmath>
#include <cstddef>
#include <span>
#include <string>

#include "fedppd/autodiff.hpp"
#include "fedppd/error.hpp"
#include "fedppd/model.hpp"
#include "fedppd/rng.hpp"

namespace fedppd {

struct DistillConfig {
  double step_size = 0.2;
  double perturb_sigma = 0.05;
  PriorHyper prior{1e-5};

  void validate() const {
    if (!(step_size > 0.0)) throw ConfigError("distill.step_size must be > 0");
    if (perturb_sigma < 0.0) throw ConfigError("distill.perturb_sigma must be >= 0");
    if (prior.precision < 0.0) throw ConfigError("distill.prior_precision must be >= 0");
  }
};

// Adds independent N(0, sigma^2) noise to every feature. Only inputs go in, so
// the result is unlabeled by construction.
inline Matrix perturb_inputs(const Matrix& batch, double sigma, Rng& rng) {
  if (sigma < 0.0) throw ArgumentError("perturb_inputs: sigma must be >= 0");
  Matrix out = batch;
  if (sigma == 0.0) return out;
  for (double& v : out.data()) v += sigma * rng.normal();
  return out;
}

// Student objective on one perturbed batch:
//   (1/M) sum_x sum_c p_teacher(c|x) log p_student(c|x, w) - (lambda/2) ||w||^2
// Teacher probabilities enter as constants.
inline ValueAndGrad student_objective(const ModelSpec& student, const ParamVector& w,
                                      const Matrix& teacher_probs, const Matrix& inputs,
                                      const PriorHyper& prior) {
  if (teacher_probs.cols() != student.classes) {
    throw DimensionError("student_objective: teacher has " + std::to_string(teacher_probs.cols()) +
                         " classes, student has " + std::to_string(student.classes));
  }
  if (teacher_probs.rows() != inputs.rows() || inputs.rows() == 0) {
    throw DimensionError("student_objective: teacher rows " + std::to_string(teacher_probs.rows()) +
                         " vs inputs " + std::to_string(inputs.rows()));
  }
  Tape tape;
  TapedModel m = record_forward(tape, student, w, inputs);
  Var targets = tape.leaf(teacher_probs);
  Var ce = tape.cross_entropy_soft(targets, tape.log_softmax(m.logits));
  Var out = tape.scale(ce, -1.0 / static_cast<double>(inputs.rows()));
  if (prior.precision != 0.0) {
    out = tape.add(out, tape.scale(m.squared_norm(tape), -0.5 * prior.precision));
  }
  tape.backward(out);
  return {tape.scalar(out), m.gradient(tape)};
}

// One gradient-ascent step of the student towards the current teacher sample.
inline ParamVector student_step(const ModelSpec& student, ParamVector w, const Matrix& teacher_probs,
                                const Matrix& perturbed_inputs, const DistillConfig& cfg) {
  const ValueAndGrad vg = student_objective(student, w, teacher_probs, perturbed_inputs, cfg.prior);
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (!std::isfinite(vg.grad[i])) throw NumericError("student_step: non-finite gradient");
    w[i] += cfg.step_size * vg.grad[i];
  }
  return w;
}

// Batch distillation loss over a fixed unlabeled set:
//   -(1/m) sum_i sum_x sum_j p(j|x, teacher_i) log S(j|x, w)
inline double distill_loss(const ModelSpec& student, const ParamVector& w,
                           std::span<const Matrix> teacher_prob_sets, const Matrix& unlabeled) {
  if (unlabeled.rows() == 0) throw ArgumentError("distill_loss: empty unlabeled set");
  if (teacher_prob_sets.empty()) throw ArgumentError("distill_loss: no teacher probabilities");
  const Matrix log_s = ops::log_softmax(forward(student, w, unlabeled));
  double total = 0.0;
  for (const Matrix& p : teacher_prob_sets) {
    if (p.rows() != log_s.rows() || p.cols() != log_s.cols()) {
      throw DimensionError("distill_loss: teacher probabilities " + p.shape() + " vs student " +
                           log_s.shape());
    }
    total += ops::cross_entropy_soft(p, log_s)(0, 0);
  }
  return total / static_cast<double>(teacher_prob_sets.size());
}

// Row-wise average of probability matrices.
inline Matrix mean_probabilities(std::span<const Matrix> sets) {
  if (sets.empty()) throw ArgumentError("mean_probabilities: empty set");
  Matrix out(sets[0].rows(), sets[0].cols());
  for (const Matrix& p : sets) {
    if (p.rows() != out.rows() || p.cols() != out.cols()) {
      throw DimensionError("mean_probabilities: shape " + p.shape() + " vs " + out.shape());
    }
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += p.data()[i];
  }
  const double inv = 1.0 / static_cast<double>(sets.size());
  for (double& v : out.data()) v *= inv;
  return out;
}

// Mean over rows of KL(p || q) in nats.
inline double mean_kl(const Matrix& p, const Matrix& q) {
  if (p.rows() != q.rows() || p.cols() != q.cols() || p.rows() == 0) {
    throw DimensionError("mean_kl: shapes " + p.shape() + " and " + q.shape());
  }
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double a = p.data()[i];
    if (a > 0.0) total += a * (std::log(a) - std::log(q.data()[i]));
  }
  return total / static_cast<double>(p.rows());
}

}  // namespace fedppd

#endif  // FEDPPD_DISTILL_HPP
