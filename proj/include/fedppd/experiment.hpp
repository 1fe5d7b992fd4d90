#ifndef FEDPPD_EXPERIMENT_HPP
#define FEDPPD_EXPERIMENT_HPP

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedppd/active.hpp"
#include "fedppd/checkpoint.hpp"
#include "fedppd/config.hpp"
#include "fedppd/data.hpp"
#include "fedppd/federation.hpp"
#include "fedppd/io.hpp"
#include "fedppd/metrics.hpp"

namespace fedppd {

// Everything a run needs, derived from the config alone.
struct ExperimentData {
  Dataset pool;  // standardized with training-partition statistics
  PartitionPlan plan;
  std::vector<Dataset> clients;
  Matrix server_unlabeled;
  Dataset test;  // in-distribution test set
  Matrix ood;
};

namespace detail {

// Pooled within-class standard deviation (root mean of per-feature variances).
inline double within_class_std(const Dataset& d) {
  const auto mu = class_means(d);
  double ss = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto row = d.features.row(i);
    const auto& m = mu[static_cast<std::size_t>(d.labels[i])];
    for (std::size_t j = 0; j < d.dim(); ++j) ss += (row[j] - m[j]) * (row[j] - m[j]);
  }
  return std::sqrt(ss / static_cast<double>(d.size() * d.dim()));
}

}  // namespace detail

inline ExperimentData prepare_data(const ExperimentConfig& cfg) {
  const auto& dc = cfg.dataset;
  PartitionRequest req = dc.partition;
  const bool held_out = cfg.ood_strategy == OodStrategy::Kind::held_out_classes;
  if (held_out) req.exclude_classes.insert(req.exclude_classes.end(), cfg.ood_classes.begin(), cfg.ood_classes.end());

  Dataset raw;
  Dataset external_test;
  bool global_scale = false;
  if (dc.source == "synthetic") {
    raw = gen_synthetic_raw(dc.synthetic, cfg.seed);
  } else if (dc.source == "mnist") {
    raw = load_idx_raw(dc.train_images, dc.train_labels);
    global_scale = true;
    if (!dc.test_images.empty()) {
      external_test = load_idx_raw(dc.test_images, dc.test_labels);
      req.test_size = 0;
    }
  } else {
    raw = read_csv(dc.csv_path);
  }

  ExperimentData out;
  out.plan = partition(raw.labels, raw.classes, req, cfg.seed);
  const Standardizer scaler = Standardizer::fit(raw.features, out.plan.training_rows(), global_scale);

  Dataset test_raw = external_test.size() > 0 ? external_test : raw.subset(out.plan.test);
  test_raw.classes = raw.classes;

  if (held_out) {
    OodPair pair = split_held_out(test_raw, cfg.ood_classes);
    out.test = std::move(pair.in_test);
    out.ood = std::move(pair.ood);
  } else if (test_raw.size() > 0) {
    out.test = test_raw;
    if (dc.source == "synthetic") {
      const double offset = cfg.ood_offset_spreads * dc.synthetic.spread;
      out.ood = shift_towards_centroid(test_raw, blob_centres(dc.synthetic.classes, dc.synthetic.dim), offset);
    } else {
      const Dataset train = raw.subset(out.plan.training_rows());
      out.ood = shift_towards_centroid(test_raw, class_means(train),
                                       cfg.ood_offset_spreads * detail::within_class_std(train));
    }
  }
  if (out.test.size() > 0) scaler.apply(out.test.features);
  if (out.ood.rows() > 0) scaler.apply(out.ood);

  out.pool = std::move(raw);
  scaler.apply(out.pool.features);
  for (const auto& rows : out.plan.clients) out.clients.push_back(out.pool.subset(rows));
  out.server_unlabeled = select_rows(out.pool.features, out.plan.server_unlabeled);
  return out;
}

// Accuracy, calibration, OOD and correctness AUROC of one model.
inline MetricsReport evaluate_model(const ModelSpec& spec, const ParamVector& params, const ExperimentData& data,
                                    const ExperimentConfig& cfg) {
  if (data.test.size() == 0) throw ConfigError("evaluation needs a nonempty test set (dataset.partition.test_size)");
  const EvalBatch batch(predict_proba(spec, params, data.test.features), data.test.labels);
  MetricsReport r = evaluate(batch, cfg.bins);
  if (data.ood.rows() > 0) {
    Rng rng = Rng::stream(cfg.seed, Stream::eval);
    r.ood = ood_eval(batch.probs, predict_proba(spec, params, data.ood), cfg.repeats, rng);
    r.ood_repeats = cfg.repeats;
  }
  return r;
}

// ---------------------------------------------------------------------------
// Commands

inline void prepare_out_dir(const std::filesystem::path& out) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create output directory " + out.string() + ": " + ec.message());
}

inline void write_resolved_config(const std::filesystem::path& out, const ExperimentConfig& cfg) {
  write_text(out / "resolved_config.json", dump_json(to_json(cfg), 2) + "\n");
}

inline Checkpoint make_checkpoint(const GlobalModels& g, const FederationConfig& f) {
  Checkpoint c;
  c.round = g.round;
  c.teacher = StoredModel{f.teacher, g.teacher};
  if (!g.student.empty()) c.student = StoredModel{f.student, g.student};
  return c;
}

// Writes dataset.csv (standardized pool), partition.json, test.csv and the resolved config.
inline void cmd_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out) {
  const ExperimentData data = prepare_data(cfg);
  prepare_out_dir(out);
  write_resolved_config(out, cfg);
  write_csv(data.pool, (out / "dataset.csv").string());
  if (data.test.size() > 0) write_csv(data.test, (out / "test.csv").string());
  write_text(out / "partition.json", dump_json(nlohmann::json(data.plan)) + "\n");
}

inline void write_metrics(const std::filesystem::path& out, const MetricsReport& r, const std::string& model) {
  nlohmann::json j = to_json(r);
  j["model"] = model;
  write_text(out / "metrics.json", dump_json(j, 2) + "\n");
  write_text(out / "metrics.csv", metrics_csv_header() + metrics_csv_row(r));
}

struct TrainOutcome {
  FederatedResult result;
  MetricsReport metrics;
};

// Federated training run. Artifacts: resolved_config.json, records.jsonl,
// checkpoints/round_NNNN.json (every checkpoint_every rounds), final_checkpoint.json,
// metrics.json and metrics.csv.
inline TrainOutcome cmd_train(const ExperimentConfig& cfg, const std::filesystem::path& out, std::size_t threads) {
  const ExperimentData data = prepare_data(cfg);
  const FederationConfig fcfg = federation_config(cfg, data.pool.dim(), data.pool.classes, threads);
  fcfg.validate();
  prepare_out_dir(out);
  write_resolved_config(out, cfg);
  const auto records_path = out / "records.jsonl";
  write_text(records_path, "");
  if (cfg.checkpoint_every > 0) prepare_out_dir(out / "checkpoints");

  auto observer = [&](const RunRecord& rec, const GlobalModels& g) {
    append_line(records_path, dump_json(to_json(rec)));
    if (cfg.checkpoint_every > 0 && (rec.round + 1) % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "round_%04zu.json", rec.round + 1);
      save_checkpoint(out / "checkpoints" / name, make_checkpoint(g, fcfg));
    }
  };
  TrainOutcome o;
  o.result = run_federated(fcfg, data.clients, data.server_unlabeled, data.test, std::nullopt, observer);
  save_checkpoint(out / "final_checkpoint.json", make_checkpoint(o.result.globals, fcfg));
  o.metrics = evaluate_model(serving_spec(fcfg), serving_params(o.result.globals, fcfg), data, cfg);
  write_metrics(out, o.metrics, cfg.client_mode == ClientMode::fedppd ? "student" : "teacher");
  return o;
}

// Federated active learning. Artifacts: resolved_config.json, curve.csv,
// records.jsonl, final_checkpoint.json.
inline ActiveResult cmd_active(const ExperimentConfig& cfg, const std::filesystem::path& out, std::size_t threads) {
  const ExperimentData data = prepare_data(cfg);
  const FederationConfig fcfg = federation_config(cfg, data.pool.dim(), data.pool.classes, threads);
  fcfg.validate();
  auto pools = make_pools(data.plan.clients, cfg.active.initial_labeled, cfg.seed);
  prepare_out_dir(out);
  write_resolved_config(out, cfg);
  const auto records_path = out / "records.jsonl";
  write_text(records_path, "");
  auto observer = [&](const RunRecord& rec, const GlobalModels&) {
    append_line(records_path, dump_json(to_json(rec)));
  };
  ActiveResult res = run_active_loop(cfg.active, fcfg, data.pool, std::move(pools), data.server_unlabeled, data.test,
                                     observer);
  write_text(out / "curve.csv", curve_csv(res.curve));
  save_checkpoint(out / "final_checkpoint.json", make_checkpoint(res.globals, fcfg));
  return res;
}

// Evaluates a checkpointed model on the config's test/OOD data. `which` picks
// "student" or "teacher"; empty means student when present.
inline MetricsReport cmd_eval(const std::filesystem::path& checkpoint, const ExperimentConfig& cfg,
                              const std::filesystem::path& out, const std::string& which = "") {
  const Checkpoint ck = load_checkpoint(checkpoint);
  const StoredModel* m = nullptr;
  std::string name = which;
  if (name.empty()) name = ck.student ? "student" : "teacher";
  if (name == "student") {
    m = ck.student ? &*ck.student : nullptr;
  } else if (name == "teacher") {
    m = ck.teacher ? &*ck.teacher : nullptr;
  } else {
    throw ConfigError("--model must be 'student' or 'teacher'");
  }
  if (m == nullptr) throw FormatError("checkpoint has no " + name + " model");
  const ExperimentData data = prepare_data(cfg);
  if (m->spec.input_dim != data.pool.dim() || m->spec.classes != data.pool.classes) {
    throw FormatError("checkpoint model expects input_dim=" + std::to_string(m->spec.input_dim) + ", classes=" +
                      std::to_string(m->spec.classes) + " but dataset has input_dim=" +
                      std::to_string(data.pool.dim()) + ", classes=" + std::to_string(data.pool.classes));
  }
  const MetricsReport r = evaluate_model(m->spec, m->params, data, cfg);
  prepare_out_dir(out);
  write_metrics(out, r, name);
  return r;
}

}  // namespace fedppd

#endif  // FEDPPD_EXPERIMENT_HPP
