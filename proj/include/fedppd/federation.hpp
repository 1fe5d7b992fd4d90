#ifndef FEDPPD_FEDERATION_HPP
#define FEDPPD_FEDERATION_HPP

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedppd/data.hpp"
#include "fedppd/distill.hpp"
#include "fedppd/error.hpp"
#include "fedppd/metrics.hpp"
#include "fedppd/model.hpp"
#include "fedppd/rng.hpp"
#include "fedppd/sgld.hpp"

namespace fedppd {

enum class Aggregator { average, distill };
enum class ClientMode { fedppd, fedavg };

inline const char* to_string(Aggregator a) { return a == Aggregator::average ? "average" : "distill"; }
inline const char* to_string(ClientMode m) { return m == ClientMode::fedppd ? "fedppd" : "fedavg"; }

// Plain SGD settings for the point-estimate (FedAvg) client mode.
struct FedAvgConfig {
  double lr = 0.1;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
};

// Server-side ensemble distillation (Gaussian fit + SWA).
struct ServerDistillConfig {
  std::size_t extra_samples = 10;
  std::size_t epochs = 20;
  double lr_teacher = 0.01;
  double lr_student = 0.01;
  std::size_t batch_size = 64;
  // First epoch whose end is snapshotted; nullopt means ceil(epochs / 2).
  std::optional<std::size_t> swa_start_epoch;
  std::size_t swa_every_epochs = 1;
};

struct FederationConfig {
  ModelSpec teacher;
  ModelSpec student;
  SgldConfig sgld;
  PriorHyper teacher_prior{1e-4};
  DistillConfig distill;
  FedAvgConfig fedavg;
  ServerDistillConfig server;
  std::size_t rounds = 10;
  std::size_t local_epochs = 10;
  Aggregator aggregator = Aggregator::average;
  ClientMode mode = ClientMode::fedppd;
  std::size_t threads = 1;
  std::size_t eval_bins = 10;
  std::uint64_t seed = 0;

  void validate() const {
    teacher.validate();
    sgld.validate();
    if (mode == ClientMode::fedppd) {
      student.validate();
      distill.validate();
      if (student.classes != teacher.classes || student.input_dim != teacher.input_dim) {
        throw ConfigError("teacher and student must share input_dim and classes");
      }
    } else {
      if (!(fedavg.lr > 0.0)) throw ConfigError("fedavg.lr must be > 0");
      if (fedavg.batch_size == 0) throw ConfigError("fedavg.batch_size must be >= 1");
    }
    if (teacher_prior.precision < 0.0) throw ConfigError("sgld.prior_precision must be >= 0");
    if (server.batch_size == 0) throw ConfigError("federation.server.batch_size must be >= 1");
    if (server.swa_every_epochs == 0) throw ConfigError("federation.server.swa_every_epochs must be >= 1");
    if (eval_bins == 0) throw ConfigError("eval.bins must be >= 1");
  }
};

// The pair broadcast by the server each round. In fedavg mode `student` is empty.
struct GlobalModels {
  ParamVector teacher;
  ParamVector student;
  std::size_t round = 0;

  bool all_finite() const { return teacher.all_finite() && student.all_finite(); }
};

// What a client sends back after its local update.
struct ClientUpload {
  std::size_t id = 0;
  ParamVector teacher;  // MAP sample (fedppd) or the SGD point estimate (fedavg)
  ParamVector student;
  std::size_t n = 0;
  double map_log_joint = std::numeric_limits<double>::quiet_NaN();
  std::size_t local_epochs = 0;
};

// ---------------------------------------------------------------------------
// Client side

namespace detail {

inline std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

inline std::vector<int> gather_labels(std::span<const int> labels, std::span<const std::size_t> rows) {
  std::vector<int> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) out[i] = labels[rows[i]];
  return out;
}

// Calls fn(rows) for each minibatch of a fresh permutation of [0, n).
template <class F>
void for_each_minibatch(std::size_t n, std::size_t batch, Rng& rng, F&& fn) {
  std::vector<std::size_t> perm = iota(n);
  rng.shuffle(perm);
  for (std::size_t b = 0; b < n; b += batch) {
    const std::size_t e = std::min(n, b + batch);
    fn(std::span<const std::size_t>(perm.data() + b, e - b));
  }
}

}  // namespace detail

// Local FedPPD update: interleaved SGLD teacher steps and online student
// distillation steps, tracking the MAP teacher sample on the full client data.
// Called with every post-burn-in teacher sample, i.e. every sample the student is distilled from.
using SampleObserver = std::function<void(const ParamVector&)>;

inline ClientUpload client_update_fedppd(std::size_t id, const Dataset& data, const GlobalModels& globals,
                                         const FederationConfig& cfg, std::size_t epochs, Rng& rng,
                                         const SampleObserver& on_sample = {}) {
  const std::size_t n = data.size();
  if (n == 0) throw ArgumentError("client " + std::to_string(id) + " has no data");
  const std::size_t batch = std::min(cfg.sgld.minibatch_size, n);
  const std::size_t per_epoch = (n + batch - 1) / batch;
  const std::size_t map_every = cfg.sgld.map_eval_every == 0 ? per_epoch : cfg.sgld.map_eval_every;

  ParamVector theta = globals.teacher;
  ParamVector w = globals.student;
  MapTracker tracker;
  auto full_log_joint = [&](const ParamVector& p) {
    return log_joint(cfg.teacher, p, data.features, data.labels, cfg.teacher_prior, n);
  };

  std::size_t v = 0;
  for (std::size_t e = 0; e < epochs; ++e) {
    detail::for_each_minibatch(n, batch, rng, [&](std::span<const std::size_t> rows) {
      const Matrix x = select_rows(data.features, rows);
      const std::vector<int> y = detail::gather_labels(data.labels, rows);
      theta = sgld_step(cfg.teacher, std::move(theta), x, y, cfg.sgld.step_at(v), cfg.teacher_prior, n, &rng);
      if (v >= cfg.sgld.burn_in) {
        const Matrix xp = perturb_inputs(x, cfg.distill.perturb_sigma, rng);
        const Matrix pt = predict_proba(cfg.teacher, theta, xp);
        if (on_sample) on_sample(theta);
        w = student_step(cfg.student, std::move(w), pt, xp, cfg.distill);
      }
      ++v;
      if (v % map_every == 0) tracker.offer(full_log_joint(theta), theta);
    });
  }
  if (tracker.empty()) tracker.offer(full_log_joint(theta), theta);

  ClientUpload up;
  up.id = id;
  up.teacher = tracker.best();
  up.student = std::move(w);
  up.n = n;
  up.map_log_joint = tracker.best_log_joint();
  up.local_epochs = epochs;
  return up;
}

// Point-estimate client: minibatch SGD on mean cross-entropy (+ L2).
inline ClientUpload client_update_fedavg(std::size_t id, const Dataset& data, const GlobalModels& globals,
                                         const FederationConfig& cfg, std::size_t epochs, Rng& rng) {
  const std::size_t n = data.size();
  if (n == 0) throw ArgumentError("client " + std::to_string(id) + " has no data");
  const std::size_t batch = std::min(cfg.fedavg.batch_size, n);
  ParamVector theta = globals.teacher;
  for (std::size_t e = 0; e < epochs; ++e) {
    detail::for_each_minibatch(n, batch, rng, [&](std::span<const std::size_t> rows) {
      const Matrix x = select_rows(data.features, rows);
      const std::vector<int> y = detail::gather_labels(data.labels, rows);
      const double m = static_cast<double>(rows.size());
      // (1/m) sum log p - (wd/2)||theta||^2, via the log-joint with N = m.
      const ValueAndGrad vg = log_joint_and_grad(cfg.teacher, theta, x, y,
                                                 PriorHyper{cfg.fedavg.weight_decay * m}, rows.size());
      for (std::size_t i = 0; i < theta.size(); ++i) {
        if (!std::isfinite(vg.grad[i])) throw NumericError("fedavg: non-finite gradient");
        theta[i] += cfg.fedavg.lr * vg.grad[i] / m;
      }
    });
  }
  ClientUpload up;
  up.id = id;
  up.teacher = std::move(theta);
  up.n = n;
  up.local_epochs = epochs;
  return up;
}

inline ClientUpload client_update(std::size_t id, const Dataset& data, const GlobalModels& globals,
                                  const FederationConfig& cfg, std::size_t epochs, Rng& rng) {
  return cfg.mode == ClientMode::fedppd ? client_update_fedppd(id, data, globals, cfg, epochs, rng)
                                        : client_update_fedavg(id, data, globals, cfg, epochs, rng);
}

// ---------------------------------------------------------------------------
// Server side

// sum_k (n_k / N) models_k, anchored at the first model:
//   models_0 + sum_k (n_k / N) (models_k - models_0)
// so a single model, or K identical models, come back bit-for-bit.
inline ParamVector weighted_average(std::span<const ParamVector> models, std::span<const std::size_t> weights) {
  if (models.empty()) throw ArgumentError("weighted_average: no models");
  if (weights.size() != models.size()) throw ArgumentError("weighted_average: weight count mismatch");
  double total = 0.0;
  for (std::size_t w : weights) total += static_cast<double>(w);
  if (!(total > 0.0)) throw ArgumentError("weighted_average: total weight is zero");
  const ParamVector& anchor = models[0];
  for (std::size_t k = 1; k < models.size(); ++k) {
    if (models[k].size() != anchor.size()) {
      throw ProtocolError("model " + std::to_string(k) + " has " + std::to_string(models[k].size()) +
                          " parameters, expected " + std::to_string(anchor.size()));
    }
  }
  ParamVector out = anchor;
  for (std::size_t k = 1; k < models.size(); ++k) {
    const double a = static_cast<double>(weights[k]) / total;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += a * (models[k][i] - anchor[i]);
  }
  return out;
}

namespace detail {

inline void check_uploads(std::span<const ClientUpload> ups, const GlobalModels& layout, bool with_student) {
  if (ups.empty()) throw ArgumentError("aggregate: no client uploads");
  for (std::size_t k = 1; k < ups.size(); ++k) {
    if (ups[k].id <= ups[k - 1].id) throw ProtocolError("aggregate: uploads must be sorted by client id");
  }
  for (const ClientUpload& u : ups) {
    if (!layout.teacher.empty() && u.teacher.size() != layout.teacher.size()) {
      throw ProtocolError("client " + std::to_string(u.id) + " sent a teacher with " +
                          std::to_string(u.teacher.size()) + " parameters, expected " +
                          std::to_string(layout.teacher.size()));
    }
    if (with_student && !layout.student.empty() && u.student.size() != layout.student.size()) {
      throw ProtocolError("client " + std::to_string(u.id) + " sent a student with " +
                          std::to_string(u.student.size()) + " parameters, expected " +
                          std::to_string(layout.student.size()));
    }
  }
}

}  // namespace detail

// Dataset-size-weighted averages of the teachers and of the students.
// `layout`, when non-empty, is the expected parameter layout.
inline GlobalModels aggregate_average(std::span<const ClientUpload> uploads, const GlobalModels& layout = {}) {
  const bool with_student = !uploads.empty() && !uploads[0].student.empty();
  detail::check_uploads(uploads, layout, with_student);
  if (layout.teacher.empty()) {
    for (const ClientUpload& u : uploads) {
      if (u.teacher.size() != uploads[0].teacher.size() || u.student.size() != uploads[0].student.size()) {
        throw ProtocolError("client " + std::to_string(u.id) + " parameter layout differs from client " +
                            std::to_string(uploads[0].id));
      }
    }
  }
  std::vector<ParamVector> teachers;
  std::vector<ParamVector> students;
  std::vector<std::size_t> n;
  for (const ClientUpload& u : uploads) {
    teachers.push_back(u.teacher);
    if (with_student) students.push_back(u.student);
    n.push_back(u.n);
  }
  GlobalModels g;
  g.teacher = weighted_average(teachers, n);
  if (with_student) g.student = weighted_average(students, n);
  return g;
}

// Diagonal Gaussian over a set of parameter vectors.
struct ParamGaussian {
  ParamVector mean;
  std::vector<double> stddev;
};

// Weighted mean and weighted population standard deviation per coordinate.
inline ParamGaussian fit_param_gaussian(std::span<const ParamVector> models, std::span<const std::size_t> weights) {
  ParamGaussian g;
  g.mean = weighted_average(models, weights);
  double total = 0.0;
  for (std::size_t w : weights) total += static_cast<double>(w);
  g.stddev.assign(g.mean.size(), 0.0);
  for (std::size_t k = 0; k < models.size(); ++k) {
    const double a = static_cast<double>(weights[k]) / total;
    for (std::size_t i = 0; i < g.mean.size(); ++i) {
      const double d = models[k][i] - g.mean[i];
      g.stddev[i] += a * d * d;
    }
  }
  for (double& s : g.stddev) s = std::sqrt(s);
  return g;
}

// Ensemble = {M draws from g} + {mean} + {client models}, in that order.
inline std::vector<ParamVector> sample_ensemble(const ParamGaussian& g, std::size_t extra,
                                                std::span<const ParamVector> clients, const ParamVector& mean,
                                                Rng& rng) {
  std::vector<ParamVector> e;
  e.reserve(extra + 1 + clients.size());
  for (std::size_t j = 0; j < extra; ++j) {
    ParamVector s = g.mean;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const double z = rng.normal();
      if (g.stddev[i] > 0.0) s[i] += g.stddev[i] * z;
    }
    e.push_back(std::move(s));
  }
  e.push_back(mean);
  e.insert(e.end(), clients.begin(), clients.end());
  return e;
}

// Unlabeled inputs with ensemble-averaged soft targets.
struct PseudoLabeledSet {
  Matrix inputs;
  Matrix targets;
};

inline PseudoLabeledSet pseudo_label(const ModelSpec& spec, std::span<const ParamVector> ensemble,
                                     const Matrix& unlabeled) {
  if (unlabeled.rows() == 0) throw ArgumentError("pseudo_label: empty unlabeled set");
  if (ensemble.empty()) throw ArgumentError("pseudo_label: empty ensemble");
  std::vector<Matrix> probs;
  probs.reserve(ensemble.size());
  for (const ParamVector& p : ensemble) probs.push_back(predict_proba(spec, p, unlabeled));
  return {unlabeled, mean_probabilities(probs)};
}

// Running SWA average of snapshots: the sum divided by the snapshot count.
class SwaAverager {
 public:
  void add(const ParamVector& p) {
    if (count_ == 0) {
      sum_ = p;
    } else {
      if (p.size() != sum_.size()) throw DimensionError("SWA snapshot size mismatch");
      for (std::size_t i = 0; i < p.size(); ++i) sum_[i] += p[i];
    }
    ++count_;
  }
  std::size_t count() const noexcept { return count_; }
  ParamVector average() const {
    ParamVector out = sum_;
    for (double& v : out.values) v /= static_cast<double>(count_);
    return out;
  }

 private:
  ParamVector sum_;
  std::size_t count_ = 0;
};

struct SwaSchedule {
  std::size_t epochs = 0;
  double lr = 0.01;
  std::size_t batch_size = 64;
  // Snapshot after step s (1-based) when s >= swa_start and (s - swa_start) % swa_every == 0.
  std::size_t swa_start = 1;
  std::size_t swa_every = 1;
};

// SGD on mean soft-target cross-entropy over the pseudo-labeled set, returning
// the average of the SWA snapshots (or `init` if none were taken).
inline ParamVector swa_distill(const ModelSpec& spec, const ParamVector& init, const PseudoLabeledSet& data,
                               const SwaSchedule& sched, Rng& rng) {
  if (sched.epochs == 0) return init;
  const std::size_t n = data.inputs.rows();
  if (n == 0) throw ArgumentError("swa_distill: empty pseudo-labeled set");
  const std::size_t batch = std::min(sched.batch_size, n);
  const std::size_t every = std::max<std::size_t>(1, sched.swa_every);
  ParamVector w = init;
  SwaAverager swa;
  std::size_t step = 0;
  for (std::size_t e = 0; e < sched.epochs; ++e) {
    detail::for_each_minibatch(n, batch, rng, [&](std::span<const std::size_t> rows) {
      const Matrix x = select_rows(data.inputs, rows);
      const Matrix t = select_rows(data.targets, rows);
      // Ascent on -(mean CE) with no prior.
      const ValueAndGrad vg = student_objective(spec, w, t, x, PriorHyper{0.0});
      for (std::size_t i = 0; i < w.size(); ++i) {
        if (!std::isfinite(vg.grad[i])) throw NumericError("swa_distill: non-finite gradient");
        w[i] += sched.lr * vg.grad[i];
      }
      ++step;
      if (step >= sched.swa_start && (step - sched.swa_start) % every == 0) swa.add(w);
    });
  }
  return swa.count() == 0 ? init : swa.average();
}

inline SwaSchedule swa_schedule(const ServerDistillConfig& s, double lr, std::size_t unlabeled) {
  const std::size_t batch = std::min(s.batch_size, std::max<std::size_t>(unlabeled, 1));
  const std::size_t per_epoch = (unlabeled + batch - 1) / batch;
  const std::size_t start_epoch = s.swa_start_epoch.value_or((s.epochs + 1) / 2);
  SwaSchedule out;
  out.epochs = s.epochs;
  out.lr = lr;
  out.batch_size = s.batch_size;
  out.swa_start = std::max<std::size_t>(1, start_epoch) * per_epoch;
  out.swa_every = s.swa_every_epochs * per_epoch;
  return out;
}

// Gaussian-fit ensemble distillation for one model family (teachers or students).
inline ParamVector server_distill(const ModelSpec& spec, std::span<const ParamVector> models,
                                  std::span<const std::size_t> weights, const Matrix& unlabeled,
                                  const ServerDistillConfig& cfg, double lr, Rng& rng) {
  const ParamGaussian g = fit_param_gaussian(models, weights);
  if (cfg.epochs == 0) return g.mean;
  if (unlabeled.rows() == 0) throw ConfigError("distill aggregator requires a nonempty server unlabeled set");
  const auto ensemble = sample_ensemble(g, cfg.extra_samples, models, g.mean, rng);
  const PseudoLabeledSet t = pseudo_label(spec, ensemble, unlabeled);
  return swa_distill(spec, g.mean, t, swa_schedule(cfg, lr, unlabeled.rows()), rng);
}

// ---------------------------------------------------------------------------
// Orchestration

struct ClientRoundStats {
  std::size_t id = 0;
  std::size_t n = 0;
  double map_log_joint = std::numeric_limits<double>::quiet_NaN();
  std::size_t local_epochs = 0;
};

struct RunRecord {
  std::size_t round = 0;
  std::vector<ClientRoundStats> per_client;
  std::string aggregator;
  std::string client_mode;
  double test_acc_teacher = 0.0;
  std::optional<double> test_acc_student;
  double ece = 0.0;
  double mce = 0.0;
  double brier = 0.0;
  std::size_t bins = 10;
  double wall_ms = 0.0;
};

inline nlohmann::json to_json(const RunRecord& r) {
  nlohmann::json clients = nlohmann::json::array();
  for (const auto& c : r.per_client) {
    clients.push_back({{"id", c.id},
                       {"n", c.n},
                       {"map_log_joint", std::isfinite(c.map_log_joint) ? nlohmann::json(c.map_log_joint)
                                                                        : nlohmann::json(nullptr)},
                       {"local_epochs", c.local_epochs}});
  }
  nlohmann::json server = {{"aggregator", r.aggregator},
                           {"client_mode", r.client_mode},
                           {"test_acc_teacher", r.test_acc_teacher},
                           {"test_acc_student", r.test_acc_student ? nlohmann::json(*r.test_acc_student)
                                                                   : nlohmann::json(nullptr)},
                           {"ece", r.ece},
                           {"mce", r.mce},
                           {"brier", r.brier},
                           {"bins", r.bins}};
  return {{"round", r.round}, {"per_client", clients}, {"server", server}, {"wall_ms", r.wall_ms}};
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Exceptions are
// captured per index; the lowest failing index is rethrown after all finish.
template <class F>
void parallel_for(std::size_t n, std::size_t threads, F&& fn) {
  std::vector<std::exception_ptr> errors(n);
  auto run = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(n, std::max<std::size_t>(1, threads));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < workers; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) run(i);
      });
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

// Model used for predictions: the student (PPD) in fedppd mode, the point
// estimate in fedavg mode.
inline const ParamVector& serving_params(const GlobalModels& g, const FederationConfig& cfg) {
  return cfg.mode == ClientMode::fedppd ? g.student : g.teacher;
}
inline const ModelSpec& serving_spec(const FederationConfig& cfg) {
  return cfg.mode == ClientMode::fedppd ? cfg.student : cfg.teacher;
}

inline GlobalModels initial_globals(const FederationConfig& cfg) {
  GlobalModels g;
  Rng rt = Rng::stream(cfg.seed, Stream::init, 0);
  g.teacher = init_params(cfg.teacher, rt);
  if (cfg.mode == ClientMode::fedppd) {
    Rng rs = Rng::stream(cfg.seed, Stream::init, 1);
    g.student = init_params(cfg.student, rs);
  }
  return g;
}

// One server aggregation step. Teacher and student reductions are independent
// and run concurrently when threads > 1.
inline GlobalModels server_update(std::span<const ClientUpload> uploads, const GlobalModels& previous,
                                  const Matrix& server_unlabeled, const FederationConfig& cfg,
                                  std::size_t round) {
  GlobalModels next = aggregate_average(uploads, previous);
  if (cfg.aggregator == Aggregator::distill) {
    std::vector<ParamVector> teachers;
    std::vector<ParamVector> students;
    std::vector<std::size_t> n;
    for (const ClientUpload& u : uploads) {
      teachers.push_back(u.teacher);
      students.push_back(u.student);
      n.push_back(u.n);
    }
    const bool with_student = !next.student.empty();
    parallel_for(with_student ? 2 : 1, cfg.threads, [&](std::size_t which) {
      Rng rng = Rng::stream(cfg.seed, Stream::server, round, which);
      if (which == 0) {
        next.teacher = server_distill(cfg.teacher, teachers, n, server_unlabeled, cfg.server, cfg.server.lr_teacher, rng);
      } else {
        next.student = server_distill(cfg.student, students, n, server_unlabeled, cfg.server, cfg.server.lr_student, rng);
      }
    });
  }
  return next;
}

struct FederatedResult {
  GlobalModels globals;
  std::vector<RunRecord> records;
};

using RoundObserver = std::function<void(const RunRecord&, const GlobalModels&)>;

// T rounds of broadcast -> local updates -> aggregation -> evaluation.
// `start` (optional) replaces the seeded initialization; `round_offset` shifts
// the round index used for RNG streams and records (used by active learning).
inline FederatedResult run_federated(const FederationConfig& cfg, std::span<const Dataset> clients,
                                     const Matrix& server_unlabeled, const Dataset& test,
                                     const std::optional<GlobalModels>& start = std::nullopt,
                                     const RoundObserver& observer = {}, std::size_t round_offset = 0) {
  cfg.validate();
  if (clients.empty()) throw ArgumentError("run_federated: no clients");
  FederatedResult result;
  result.globals = start ? *start : initial_globals(cfg);
  if (!result.globals.all_finite()) throw ProtocolError("initial broadcast has non-finite parameters");

  for (std::size_t t = 0; t < cfg.rounds; ++t) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t round = round_offset + t;
    std::vector<ClientUpload> uploads(clients.size());
    const GlobalModels& broadcast = result.globals;
    parallel_for(clients.size(), cfg.threads, [&](std::size_t k) {
      Rng rng = Rng::stream(cfg.seed, Stream::client, k, round);
      try {
        uploads[k] = client_update(k, clients[k], broadcast, cfg, cfg.local_epochs, rng);
      } catch (const NumericError& e) {
        throw NumericError("round " + std::to_string(round) + ", client " + std::to_string(k) + ": " + e.what());
      } catch (const Error& e) {
        throw ProtocolError("round " + std::to_string(round) + ", client " + std::to_string(k) + ": " + e.what());
      }
    });

    GlobalModels next = server_update(uploads, broadcast, server_unlabeled, cfg, round);
    next.round = round + 1;
    if (!next.all_finite()) {
      throw NumericError("round " + std::to_string(round) + ": aggregated global model is not finite");
    }

    RunRecord rec;
    rec.round = round;
    rec.aggregator = to_string(cfg.aggregator);
    rec.client_mode = to_string(cfg.mode);
    rec.bins = cfg.eval_bins;
    for (const ClientUpload& u : uploads) rec.per_client.push_back({u.id, u.n, u.map_log_joint, u.local_epochs});
    if (test.size() > 0) {
      const EvalBatch tb(predict_proba(cfg.teacher, next.teacher, test.features), test.labels);
      rec.test_acc_teacher = accuracy(tb);
      const EvalBatch* serving = &tb;
      std::optional<EvalBatch> sb;
      if (cfg.mode == ClientMode::fedppd) {
        sb.emplace(predict_proba(cfg.student, next.student, test.features), test.labels);
        rec.test_acc_student = accuracy(*sb);
        serving = &*sb;
      }
      const Calibration cal = ece_mce(*serving, cfg.eval_bins);
      rec.ece = cal.ece;
      rec.mce = cal.mce;
      rec.brier = brier(*serving);
    }
    result.globals = std::move(next);
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    if (observer) observer(rec, result.globals);
    result.records.push_back(std::move(rec));
  }
  return result;
}

}  // namespace fedppd

#endif  // FEDPPD_FEDERATION_HPP
