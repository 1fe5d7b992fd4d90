#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "fedppd/experiment.hpp"
#include "gradient_cases.hpp"
#include "oracle.hpp"

using namespace fedppd;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  enum class Kind { pass, fail, skip } kind = Kind::fail;
  std::string detail;
};

Verdict verdict(bool ok, std::string detail) { return {ok ? Verdict::Kind::pass : Verdict::Kind::fail, std::move(detail)}; }

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path work_dir() {
  const fs::path d = fs::temp_directory_path() / "fedppd_acceptance";
  fs::create_directories(d);
  return d;
}

// ---------------------------------------------------------------------------
// 1. Gradients

Verdict gradients() {
  std::size_t cases = 0;
  double worst = 0.0;
  std::string worst_name;
  auto note = [&](double e, const std::string& name) {
    ++cases;
    if (e > worst) {
      worst = e;
      worst_name = name;
    }
  };
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed + 1000);
    for (const oracle::Case& c : oracle::cases_for_seed(seed)) note(oracle::check_case(c, rng), c.name);
  }
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed + 77);
    const ModelSpec s{1 + rng.index(4), {1 + rng.index(5)}, 2 + rng.index(3), Role::teacher};
    const ParamVector p = init_params(s, rng);
    const std::size_t n = 1 + rng.index(6);
    const Matrix x = oracle::random_matrix(n, s.input_dim, rng);
    std::vector<int> y(n);
    for (int& v : y) v = static_cast<int>(rng.index(s.classes));
    const PriorHyper prior{rng.uniform(0.0, 2.0)};
    const std::size_t total = n + rng.index(20);
    const auto vg = log_joint_and_grad(s, p, x, y, prior, total);
    const auto fd = oracle::finite_diff(
        [&](const std::vector<double>& v) { return log_joint(s, ParamVector(v), x, y, prior, total); }, p.values);
    note(oracle::relative_error(vg.grad.values, fd), "teacher objective");
  }
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed + 500);
    const ModelSpec s{1 + rng.index(4), {1 + rng.index(5)}, 2 + rng.index(3), Role::student};
    const ParamVector w = init_params(s, rng);
    const std::size_t n = 1 + rng.index(6);
    const Matrix x = oracle::random_matrix(n, s.input_dim, rng);
    const Matrix t = oracle::random_probs(n, s.classes, rng);
    const PriorHyper prior{rng.uniform(0.0, 1.0)};
    const auto vg = student_objective(s, w, t, x, prior);
    const auto fd = oracle::finite_diff(
        [&](const std::vector<double>& v) { return student_objective(s, ParamVector(v), t, x, prior).value; },
        w.values);
    note(oracle::relative_error(vg.grad.values, fd), "student objective");
  }
  return verdict(cases >= 100 && worst < 1e-4, std::to_string(cases) + " cases, worst relative error " +
                                                    fmt("%.2e", worst) + " (" + worst_name + ")");
}

// ---------------------------------------------------------------------------
// 2. SGLD

Verdict sgld() {
  const oracle::ChainResult r = oracle::run_conjugate_chain(1);
  const double mu = r.model.posterior_mean();
  const double var = r.model.posterior_var();
  const double sd = std::sqrt(var);
  const double mean_err = std::abs(oracle::sample_mean(r.samples) - mu) / sd;
  const double var_err = std::abs(oracle::sample_var(r.samples) / var - 1.0);

  Rng rng(4);
  const ModelSpec s{5, {7}, 3, Role::teacher};
  const ParamVector start = init_params(s, rng);
  const Matrix x = oracle::random_matrix(40, 5, rng);
  std::vector<int> y(40);
  for (int& v : y) v = static_cast<int>(rng.index(3));
  ParamVector a = start;
  ParamVector b = start;
  for (std::size_t t = 0; t < 25; ++t) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < 8; ++i) rows.push_back((t * 8 + i) % 40);
    const Matrix xb = select_rows(x, rows);
    std::vector<int> yb;
    for (std::size_t i : rows) yb.push_back(y[i]);
    a = sgld_step(s, std::move(a), xb, yb, 1e-3, PriorHyper{1e-2}, 40, nullptr);
    const auto vg = log_joint_and_grad(s, b, xb, yb, PriorHyper{1e-2}, 40);
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += (1e-3 / 2.0) * vg.grad[i];
  }
  const bool bitwise = a == b;
  return verdict(r.samples.size() == 5000 && mean_err < 0.05 && var_err < 0.2 && bitwise,
                 std::to_string(r.samples.size()) + " samples, |mean error| " + fmt("%.4f", mean_err) +
                     " sd, variance error " + fmt("%.1f", 100.0 * var_err) + "%, zero-noise SGD " +
                     (bitwise ? "bitwise equal" : "DIFFERS"));
}

// ---------------------------------------------------------------------------
// 3. Distillation

Verdict distillation() {
  const oracle::ToyDistillResult toy = oracle::toy_distill_kl(1, 5);
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed + 40);
    const ModelSpec s{3, {6}, 4, Role::student};
    const ParamVector w = init_params(s, rng);
    const Matrix u = oracle::random_matrix(9, 3, rng);
    const std::vector<Matrix> teachers{oracle::random_probs(9, 4, rng), oracle::random_probs(9, 4, rng),
                                       oracle::random_probs(9, 4, rng)};
    const Matrix sp = predict_proba(s, w, u);
    double ref = 0.0;
    for (std::size_t i = 0; i < 9; ++i) {
      for (std::size_t j = 0; j < 4; ++j) {
        double pbar = 0.0;
        for (const Matrix& t : teachers) pbar += t(i, j);
        ref -= pbar / 3.0 * std::log(sp(i, j));
      }
    }
    const double loss = distill_loss(s, w, teachers, u);
    worst = std::max(worst, std::abs(loss - ref) / std::max(1.0, std::abs(ref)));
  }
  return verdict(toy.kl < 0.05 && worst <= 1e-12,
                 "toy KL " + fmt("%.4f", toy.kl) + " nats over " + std::to_string(toy.samples) +
                     " teacher samples, linearity error " + fmt("%.1e", worst));
}

// ---------------------------------------------------------------------------
// 4. Aggregation

Verdict aggregation() {
  std::vector<std::string> bad;
  Rng rng(2);
  ParamVector p(40);
  for (double& v : p.values) v = rng.normal() * 10.0;
  {
    ClientUpload u;
    u.teacher = p;
    u.student = p;
    u.n = 11;
    const std::vector<ClientUpload> one{u};
    const GlobalModels g = aggregate_average(one);
    if (g.teacher != p || g.student != p) bad.push_back("K=1 passthrough");
  }
  {
    const std::vector<ParamVector> m{ParamVector(std::vector<double>{1.0, -2.0}),
                                     ParamVector(std::vector<double>{3.0, 4.0})};
    const std::vector<std::size_t> eq{7, 7};
    if (weighted_average(m, eq) != ParamVector(std::vector<double>{2.0, 1.0})) bad.push_back("equal-weight mean");
    const std::vector<std::size_t> w13{1, 3};
    if (weighted_average(m, w13) != ParamVector(std::vector<double>{2.5, 2.5})) bad.push_back("n=[1,3]");
  }
  {
    FederationConfig cfg;
    cfg.teacher = ModelSpec{4, {8}, 3, Role::teacher};
    cfg.student = ModelSpec{4, {8}, 3, Role::student};
    cfg.sgld.burn_in = 2;
    cfg.server.extra_samples = 0;
    cfg.server.epochs = 0;
    const Dataset all = gen_synthetic({3, 4, 100, 0.4}, 3);
    PartitionRequest req;
    req.clients = 3;
    req.sizes = {50};
    req.server_unlabeled = 40;
    const PartitionPlan plan = partition(all.labels, all.classes, req, 3);
    const GlobalModels g0 = initial_globals(cfg);
    std::vector<ClientUpload> ups;
    for (std::size_t k = 0; k < 3; ++k) {
      Rng r = Rng::stream(3, Stream::client, k);
      ups.push_back(client_update(k, all.subset(plan.clients[k]), g0, cfg, 1, r));
    }
    const Matrix unl = select_rows(all.features, plan.server_unlabeled);
    cfg.aggregator = Aggregator::average;
    const GlobalModels a = server_update(ups, g0, unl, cfg, 0);
    cfg.aggregator = Aggregator::distill;
    const GlobalModels d = server_update(ups, g0, unl, cfg, 0);
    if (a.teacher != d.teacher || a.student != d.student) bad.push_back("distill(M=0, 0 epochs) vs average");
  }
  {
    SwaAverager swa;
    ParamVector x(20);
    ParamVector y(20);
    for (std::size_t i = 0; i < 20; ++i) {
      x[i] = static_cast<double>(i) * 0.5;
      y[i] = -static_cast<double>(i) * 1.5 + 3.0;
    }
    swa.add(x);
    swa.add(y);
    ParamVector mean(20);
    for (std::size_t i = 0; i < 20; ++i) mean[i] = (x[i] + y[i]) / 2.0;
    if (swa.average() != mean) bad.push_back("SWA of two snapshots");
  }
  std::string d = bad.empty() ? "all five identities exact" : "inexact:";
  for (const auto& b : bad) d += " " + b;
  return verdict(bad.empty(), d);
}

// ---------------------------------------------------------------------------
// 5. Metrics

Verdict metrics() {
  std::size_t mismatches = 0;
  bool mce_ok = true;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed + 1000);
    const std::size_t n = 1 + rng.index(200);
    const std::size_t c = 2 + rng.index(5);
    const std::size_t bins = 1 + rng.index(20);
    const Matrix p = oracle::random_probs(n, c, rng);
    std::vector<int> y(n);
    for (int& v : y) v = static_cast<int>(rng.index(c));
    const EvalBatch b(p, y);
    const auto [ece, mce] = oracle::brute_ece_mce(p, y, bins);
    const Calibration cal = ece_mce(b, bins);
    std::vector<double> pos(1 + rng.index(60));
    std::vector<double> neg(1 + rng.index(60));
    for (double& v : pos) v = static_cast<double>(rng.index(8));
    for (double& v : neg) v = static_cast<double>(rng.index(6));
    mismatches += cal.ece != ece;
    mismatches += cal.mce != mce;
    mismatches += brier(b) != oracle::brute_brier(p, y);
    mismatches += auroc(pos, neg) != oracle::brute_auroc(pos, neg);
    mce_ok = mce_ok && cal.mce >= cal.ece;
  }
  bool closed = true;
  for (std::size_t c : {2u, 4u, 10u}) {
    const Matrix u(25, c, 1.0 / static_cast<double>(c));
    const EvalBatch b(u, std::vector<int>(25, 1));
    closed = closed && std::abs(brier(b) - static_cast<double>(c - 1) / static_cast<double>(c)) < 1e-15;
  }
  closed = closed && auroc(std::vector<double>(13, 0.7), std::vector<double>(8, 0.7)) == 0.5;
  return verdict(mismatches == 0 && mce_ok && closed,
                 std::to_string(mismatches) + " mismatches over 100 batches, uniform Brier/ties AUROC " +
                     (closed ? "ok" : "WRONG") + ", MCE >= ECE " + (mce_ok ? "ok" : "VIOLATED"));
}

// ---------------------------------------------------------------------------
// Shared synthetic task

nlohmann::json synthetic_task() {
  return nlohmann::json::parse(R"({
    "seed": 1,
    "dataset": {
      "source": "synthetic",
      "synthetic": {"classes": 4, "dim": 10, "per_class": 1600, "spread": 0.25},
      "partition": {"clients": 8, "mode": "label_skew", "major_classes": 2, "client_size": 500,
                    "server_unlabeled": 800, "test_size": 1000}
    },
    "federation": {"rounds": 20, "local_epochs": 10},
    "active": {"rounds": 4, "budget": 25, "initial_labeled": 25, "fed_rounds": 5},
    "eval": {"repeats": 5, "ood": {"strategy": "shifted_blobs", "offset_spreads": 10}}
  })");
}

ExperimentConfig task_config(std::uint64_t seed, const std::string& mode, const std::string& agg) {
  nlohmann::json j = synthetic_task();
  j["seed"] = seed;
  j["federation"]["client_mode"] = mode;
  j["federation"]["aggregator"] = agg;
  return parse_config(j);
}

struct TaskRun {
  double accuracy = 0.0;
  double ece = 0.0;
  double ood_auroc = 0.0;
};

TaskRun train_once(const ExperimentConfig& cfg, const fs::path& out) {
  const TrainOutcome o = cmd_train(cfg, out, 1);
  return {o.metrics.accuracy, o.metrics.calibration.ece, o.metrics.ood ? o.metrics.ood->mean : 0.0};
}

struct TaskSweep {
  std::vector<TaskRun> average;
  std::vector<TaskRun> distill;
  std::vector<TaskRun> fedavg;
  double seconds = 0.0;
};

const TaskSweep& task_sweep() {
  static const TaskSweep sweep = [] {
    TaskSweep s;
    const auto t0 = std::chrono::steady_clock::now();
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      const fs::path base = work_dir() / ("task_seed" + std::to_string(seed));
      s.average.push_back(train_once(task_config(seed, "fedppd", "average"), base / "fedppd_average"));
      s.distill.push_back(train_once(task_config(seed, "fedppd", "distill"), base / "fedppd_distill"));
      s.fedavg.push_back(train_once(task_config(seed, "fedavg", "average"), base / "fedavg"));
      std::printf("  seed %llu: acc fedppd-average %.4f fedppd-distill %.4f fedavg %.4f | ece %.4f %.4f %.4f | "
                  "ood auroc %.4f\n",
                  static_cast<unsigned long long>(seed), s.average.back().accuracy, s.distill.back().accuracy,
                  s.fedavg.back().accuracy, s.average.back().ece, s.distill.back().ece, s.fedavg.back().ece,
                  s.average.back().ood_auroc);
      std::fflush(stdout);
    }
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return s;
  }();
  return sweep;
}

// ---------------------------------------------------------------------------
// 6, 7, 10

Verdict accuracy_trend() {
  const TaskSweep& s = task_sweep();
  int avg_wins = 0;
  int dst_wins = 0;
  for (std::size_t i = 0; i < 5; ++i) {
    avg_wins += s.average[i].accuracy >= s.fedavg[i].accuracy;
    dst_wins += s.distill[i].accuracy >= s.fedavg[i].accuracy;
  }
  return verdict(avg_wins >= 4 && dst_wins >= 4 && s.seconds < 600.0,
                 "fedppd-average >= fedavg in " + std::to_string(avg_wins) + "/5, fedppd-distill >= fedavg in " +
                     std::to_string(dst_wins) + "/5, sweep " + fmt("%.0f", s.seconds) + " s");
}

Verdict calibration_trend() {
  const TaskSweep& s = task_sweep();
  int wins = 0;
  double mean_ppd = 0.0;
  double mean_avg = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    wins += s.average[i].ece <= s.fedavg[i].ece;
    mean_ppd += s.average[i].ece / 5.0;
    mean_avg += s.fedavg[i].ece / 5.0;
  }
  return verdict(wins >= 4, "fedppd ECE <= fedavg ECE in " + std::to_string(wins) + "/5 (mean " +
                                fmt("%.4f", mean_ppd) + " vs " + fmt("%.4f", mean_avg) + ")");
}

Verdict ood_trend() {
  const TaskSweep& s = task_sweep();
  double mean = 0.0;
  for (const TaskRun& r : s.average) mean += r.ood_auroc / 5.0;
  return verdict(mean > 0.9 && mean > 0.5, "fedppd mean entropy AUROC " + fmt("%.4f", mean) +
                                               " over 5 seeds x 5 repeats (random baseline 0.5)");
}

// ---------------------------------------------------------------------------
// 8. MNIST

Verdict mnist() {
  const char* env = std::getenv("FEDPPD_MNIST_DIR");
  const fs::path dir = env ? fs::path(env) : fs::path(FEDPPD_SOURCE_DIR) / "data" / "mnist";
  const fs::path files[] = {dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte",
                            dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte"};
  for (const fs::path& f : files) {
    if (!fs::exists(f)) return {Verdict::Kind::skip, "MNIST not found (" + f.string() + "); set FEDPPD_MNIST_DIR"};
  }
  nlohmann::json j = nlohmann::json::parse(R"({
    "seed": 1,
    "dataset": {
      "source": "mnist",
      "partition": {"clients": 10, "mode": "label_skew", "major_classes": 2, "client_size": 500,
                    "server_unlabeled": 1000}
    },
    "model": {"teacher_hidden": [100], "student_hidden": [100]},
    "federation": {"rounds": 25, "local_epochs": 10},
    "eval": {"repeats": 5}
  })");
  j["dataset"]["mnist"] = {{"train_images", files[0].string()},
                           {"train_labels", files[1].string()},
                           {"test_images", files[2].string()},
                           {"test_labels", files[3].string()}};
  const auto t0 = std::chrono::steady_clock::now();
  const TaskRun r = train_once(parse_config(j), work_dir() / "mnist");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return verdict(r.accuracy >= 0.9 && secs < 1800.0,
                 "test accuracy " + fmt("%.4f", r.accuracy) + " in " + fmt("%.0f", secs) + " s");
}

// ---------------------------------------------------------------------------
// 9. Active learning

Verdict active_trend() {
  const auto t0 = std::chrono::steady_clock::now();
  int wins = 0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    double final_acc[2] = {0.0, 0.0};
    const char* names[2] = {"entropy", "random"};
    for (int a = 0; a < 2; ++a) {
      nlohmann::json j = synthetic_task();
      j["seed"] = seed;
      j["sgld"]["burn_in"] = 0;
      j["active"]["acquisition"] = names[a];
      const ActiveResult r = cmd_active(parse_config(j), work_dir() / ("active_seed" + std::to_string(seed)) / names[a], 1);
      final_acc[a] = r.curve.back().test_accuracy;
    }
    wins += final_acc[0] > final_acc[1];
    std::printf("  seed %llu: final accuracy entropy %.4f random %.4f\n", static_cast<unsigned long long>(seed),
                final_acc[0], final_acc[1]);
    std::fflush(stdout);
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return verdict(wins >= 3 && secs < 1200.0,
                 "entropy beats random in " + std::to_string(wins) + "/5 seeds, " + fmt("%.0f", secs) + " s");
}

// ---------------------------------------------------------------------------
// 11. Determinism

std::string records_without_wall(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::string out;
  for (std::string line; std::getline(in, line);) {
    nlohmann::json j = nlohmann::json::parse(line);
    j.erase("wall_ms");
    out += dump_json(j) + "\n";
  }
  return out;
}

Verdict determinism() {
  std::vector<std::string> bad;
  nlohmann::json j = synthetic_task();
  j["seed"] = 11;
  j["federation"]["rounds"] = 4;
  j["federation"]["local_epochs"] = 2;
  j["federation"]["aggregator"] = "distill";
  j["federation"]["checkpoint_every"] = 2;
  j["active"]["rounds"] = 2;
  j["active"]["fed_rounds"] = 2;
  const ExperimentConfig cfg = parse_config(j);
  const fs::path base = work_dir() / "determinism";
  std::size_t compared = 0;
  for (const char* cmd : {"train", "active"}) {
    std::vector<fs::path> outs;
    for (std::size_t threads : {1u, 2u, 4u}) {
      const fs::path out = base / (std::string(cmd) + "_t" + std::to_string(threads));
      fs::remove_all(out);
      if (std::string(cmd) == "train") {
        cmd_train(cfg, out, threads);
      } else {
        cmd_active(cfg, out, threads);
      }
      outs.push_back(out);
    }
    for (std::size_t i = 1; i < outs.size(); ++i) {
      ++compared;
      if (records_without_wall(outs[0] / "records.jsonl") != records_without_wall(outs[i] / "records.jsonl")) {
        bad.push_back(std::string(cmd) + " records");
      }
      std::vector<fs::path> files{"final_checkpoint.json"};
      if (std::string(cmd) == "train") {
        files.push_back("checkpoints/round_0002.json");
        files.push_back("checkpoints/round_0004.json");
        files.push_back("metrics.json");
      } else {
        files.push_back("curve.csv");
      }
      for (const fs::path& f : files) {
        if (read_text(outs[0] / f) != read_text(outs[i] / f)) bad.push_back(std::string(cmd) + " " + f.string());
      }
    }
  }
  std::string d = std::to_string(compared) + " run pairs across 1/2/4 threads";
  d += bad.empty() ? ", records and checkpoints bitwise identical" : ", differences:";
  for (const auto& b : bad) d += " " + b;
  return verdict(bad.empty(), d);
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double limit_s;
    std::function<Verdict()> run;
  };
  const std::vector<Criterion> all{
      {1, "gradient correctness", 30.0, gradients},
      {2, "SGLD posterior fidelity", 60.0, sgld},
      {3, "distillation fidelity", 60.0, distillation},
      {4, "aggregation algebra", 0.0, aggregation},
      {5, "metric oracles", 0.0, metrics},
      {6, "end-to-end accuracy trend", 600.0, accuracy_trend},
      {7, "calibration trend", 0.0, calibration_trend},
      {8, "scaled MNIST run", 1800.0, mnist},
      {9, "active learning trend", 1200.0, active_trend},
      {10, "OOD trend", 0.0, ood_trend},
      {11, "determinism across thread counts", 0.0, determinism},
  };
  int failed = 0;
  for (const Criterion& c : all) {
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {Verdict::Kind::fail, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (v.kind == Verdict::Kind::pass && c.limit_s > 0.0 && secs >= c.limit_s) {
      v.kind = Verdict::Kind::fail;
      v.detail += "; over the " + fmt("%.0f", c.limit_s) + " s limit";
    }
    const char* tag = v.kind == Verdict::Kind::pass ? "PASS" : v.kind == Verdict::Kind::skip ? "SKIP" : "FAIL";
    std::printf("criterion %2d %-34s %s  %s [%.1f s]\n", c.id, c.name, tag, v.detail.c_str(), secs);
    std::fflush(stdout);
    failed += v.kind == Verdict::Kind::fail;
  }
  std::printf("%d criteria failed\n", failed);
  return failed == 0 ? 0 : 1;
}
