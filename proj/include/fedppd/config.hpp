#ifndef FEDPPD_CONFIG_HPP
#define FEDPPD_CONFIG_HPP

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedppd/active.hpp"
#include "fedppd/data.hpp"
#include "fedppd/error.hpp"
#include "fedppd/federation.hpp"

namespace fedppd {

// Experiment configuration. Parsed from JSON; unknown keys are rejected and
// every default is written back into the resolved config. Schema (all keys
// optional unless marked required):
//
//   seed                                  u64
//   dataset.source                        "synthetic" | "mnist" | "csv"   (required)
//   dataset.synthetic.{classes,dim,per_class,spread}
//   dataset.mnist.{train_images,train_labels,test_images,test_labels}
//   dataset.csv.path
//   dataset.partition.{clients,mode,major_classes,client_size,server_unlabeled,test_size,exclude_classes}
//   model.{teacher_hidden,student_hidden}
//   sgld.{step_size,decay_tau,decay_kappa,burn_in,map_eval_every,minibatch_size,prior_precision}
//   distill.{step_size,perturb_sigma,prior_precision}
//   federation.{rounds,local_epochs,aggregator,client_mode,checkpoint_every}
//   federation.fedavg.{lr,weight_decay,batch_size}
//   federation.server.{extra_samples,epochs,lr_teacher,lr_student,batch_size,swa_start_epoch,swa_every_epochs}
//   active.{rounds,budget,acquisition,initial_labeled,fed_rounds}
//   eval.{bins,repeats}
//   eval.ood.{strategy,offset_spreads,classes}
struct ExperimentConfig {
  std::uint64_t seed = 0;

  struct Dataset {
    std::string source = "synthetic";
    SyntheticParams synthetic;
    std::string train_images;
    std::string train_labels;
    std::string test_images;
    std::string test_labels;
    std::string csv_path;
    PartitionRequest partition;
  } dataset;

  std::vector<std::size_t> teacher_hidden{32};
  std::vector<std::size_t> student_hidden{64};

  SgldConfig sgld;
  double teacher_prior = 1e-4;
  DistillConfig distill;

  std::size_t rounds = 10;
  std::size_t local_epochs = 10;
  Aggregator aggregator = Aggregator::average;
  ClientMode client_mode = ClientMode::fedppd;
  std::size_t checkpoint_every = 0;
  FedAvgConfig fedavg;
  ServerDistillConfig server;

  ActiveConfig active;

  std::size_t bins = 10;
  std::size_t repeats = 5;
  OodStrategy::Kind ood_strategy = OodStrategy::Kind::shifted_blobs;
  double ood_offset_spreads = 10.0;
  std::vector<int> ood_classes;
};

namespace detail {

// Reads keys of one JSON object and rejects any it did not consume.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + " must be an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <class T>
  void get(const std::string& key, T& out) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(field(key) + ": wrong type");
    }
  }

  template <class T>
  void require(const std::string& key, T& out) {
    if (!j_.contains(key)) throw ConfigError("missing required field " + field(key));
    get(key, out);
  }

  void get_opt(const std::string& key, std::optional<std::size_t>& out) {
    used_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return;
    std::size_t v = 0;
    get(key, v);
    out = v;
  }

  template <class E>
  void get_enum(const std::string& key, E& out, std::initializer_list<std::pair<const char*, E>> names) {
    used_.insert(key);
    if (!j_.contains(key)) return;
    if (!j_.at(key).is_string()) throw ConfigError(field(key) + ": expected a string");
    const std::string s = j_.at(key).get<std::string>();
    std::string allowed;
    for (const auto& [name, value] : names) {
      if (s == name) {
        out = value;
        return;
      }
      allowed += std::string(allowed.empty() ? "" : ", ") + name;
    }
    throw ConfigError(field(key) + ": '" + s + "' is not one of {" + allowed + "}");
  }

  Section child(const std::string& key) {
    used_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) throw ConfigError("unknown key " + field(it.key()));
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  if (d.source == "synthetic") {
    if (d.synthetic.classes < 2) throw ConfigError("dataset.synthetic.classes must be >= 2");
    if (d.synthetic.dim < 1) throw ConfigError("dataset.synthetic.dim must be >= 1");
    if (d.synthetic.per_class < 1) throw ConfigError("dataset.synthetic.per_class must be >= 1");
    if (d.synthetic.spread < 0.0) throw ConfigError("dataset.synthetic.spread must be >= 0");
  } else if (d.source == "mnist") {
    if (d.train_images.empty()) throw ConfigError("missing required field dataset.mnist.train_images");
    if (d.train_labels.empty()) throw ConfigError("missing required field dataset.mnist.train_labels");
  } else if (d.source == "csv") {
    if (d.csv_path.empty()) throw ConfigError("missing required field dataset.csv.path");
  } else {
    throw ConfigError("dataset.source: '" + d.source + "' is not one of {synthetic, mnist, csv}");
  }
  if (d.partition.clients == 0) throw ConfigError("dataset.partition.clients must be >= 1");
  if (d.partition.sizes.empty() || d.partition.sizes[0] == 0) throw ConfigError("dataset.partition.client_size must be >= 1");
  if (d.partition.mode == PartitionMode::label_skew && d.partition.major_classes == 0) {
    throw ConfigError("dataset.partition.major_classes must be >= 1");
  }
  if (c.teacher_prior < 0.0) throw ConfigError("sgld.prior_precision must be >= 0");
  c.sgld.validate();
  c.distill.validate();
  if (!(c.fedavg.lr > 0.0)) throw ConfigError("federation.fedavg.lr must be > 0");
  if (c.fedavg.batch_size == 0) throw ConfigError("federation.fedavg.batch_size must be >= 1");
  if (c.server.batch_size == 0) throw ConfigError("federation.server.batch_size must be >= 1");
  if (c.server.swa_every_epochs == 0) throw ConfigError("federation.server.swa_every_epochs must be >= 1");
  if (c.aggregator == Aggregator::distill && c.dataset.partition.server_unlabeled == 0 && c.server.epochs > 0) {
    throw ConfigError("federation.aggregator=distill needs dataset.partition.server_unlabeled > 0");
  }
  if (c.active.initial_labeled == 0) throw ConfigError("active.initial_labeled must be >= 1");
  if (c.bins == 0) throw ConfigError("eval.bins must be >= 1");
  if (c.repeats == 0) throw ConfigError("eval.repeats must be >= 1");
  for (std::size_t h : c.teacher_hidden) {
    if (h == 0) throw ConfigError("model.teacher_hidden widths must be >= 1");
  }
  for (std::size_t h : c.student_hidden) {
    if (h == 0) throw ConfigError("model.student_hidden widths must be >= 1");
  }
  if (c.ood_strategy == OodStrategy::Kind::held_out_classes && c.ood_classes.empty()) {
    throw ConfigError("eval.ood.classes must be nonempty for held_out_classes");
  }
}

inline ExperimentConfig parse_config(const nlohmann::json& j) {
  ExperimentConfig c;
  detail::Section root(j, "");
  root.get("seed", c.seed);

  if (!root.has("dataset")) throw ConfigError("missing required field dataset");
  {
    auto ds = root.child("dataset");
    ds.require("source", c.dataset.source);
    {
      auto s = ds.child("synthetic");
      s.get("classes", c.dataset.synthetic.classes);
      s.get("dim", c.dataset.synthetic.dim);
      s.get("per_class", c.dataset.synthetic.per_class);
      s.get("spread", c.dataset.synthetic.spread);
      s.finish();
    }
    {
      auto s = ds.child("mnist");
      s.get("train_images", c.dataset.train_images);
      s.get("train_labels", c.dataset.train_labels);
      s.get("test_images", c.dataset.test_images);
      s.get("test_labels", c.dataset.test_labels);
      s.finish();
    }
    {
      auto s = ds.child("csv");
      s.get("path", c.dataset.csv_path);
      s.finish();
    }
    {
      auto s = ds.child("partition");
      auto& p = c.dataset.partition;
      s.get("clients", p.clients);
      s.get_enum("mode", p.mode, {{"iid", PartitionMode::iid}, {"label_skew", PartitionMode::label_skew}});
      s.get("major_classes", p.major_classes);
      std::size_t size = p.sizes.at(0);
      s.get("client_size", size);
      p.sizes = {size};
      // Default U: 20% of the clients' combined training data.
      p.server_unlabeled = p.clients * size / 5;
      s.get("server_unlabeled", p.server_unlabeled);
      s.get("test_size", p.test_size);
      s.get("exclude_classes", p.exclude_classes);
      s.finish();
    }
    ds.finish();
  }
  {
    auto s = root.child("model");
    s.get("teacher_hidden", c.teacher_hidden);
    s.get("student_hidden", c.student_hidden);
    s.finish();
  }
  {
    auto s = root.child("sgld");
    s.get("step_size", c.sgld.step_size);
    s.get("decay_tau", c.sgld.decay_tau);
    s.get("decay_kappa", c.sgld.decay_kappa);
    s.get("burn_in", c.sgld.burn_in);
    s.get("map_eval_every", c.sgld.map_eval_every);
    s.get("minibatch_size", c.sgld.minibatch_size);
    s.get("prior_precision", c.teacher_prior);
    s.finish();
  }
  {
    auto s = root.child("distill");
    s.get("step_size", c.distill.step_size);
    s.get("perturb_sigma", c.distill.perturb_sigma);
    s.get("prior_precision", c.distill.prior.precision);
    s.finish();
  }
  {
    auto s = root.child("federation");
    s.get("rounds", c.rounds);
    s.get("local_epochs", c.local_epochs);
    s.get_enum("aggregator", c.aggregator, {{"average", Aggregator::average}, {"distill", Aggregator::distill}});
    s.get_enum("client_mode", c.client_mode, {{"fedppd", ClientMode::fedppd}, {"fedavg", ClientMode::fedavg}});
    s.get("checkpoint_every", c.checkpoint_every);
    {
      auto f = s.child("fedavg");
      f.get("lr", c.fedavg.lr);
      f.get("weight_decay", c.fedavg.weight_decay);
      f.get("batch_size", c.fedavg.batch_size);
      f.finish();
    }
    {
      auto f = s.child("server");
      f.get("extra_samples", c.server.extra_samples);
      f.get("epochs", c.server.epochs);
      f.get("lr_teacher", c.server.lr_teacher);
      f.get("lr_student", c.server.lr_student);
      f.get("batch_size", c.server.batch_size);
      f.get_opt("swa_start_epoch", c.server.swa_start_epoch);
      f.get("swa_every_epochs", c.server.swa_every_epochs);
      f.finish();
    }
    s.finish();
  }
  {
    auto s = root.child("active");
    s.get("rounds", c.active.rounds);
    s.get("budget", c.active.budget);
    s.get_enum("acquisition", c.active.acquisition,
               {{"entropy", Acquisition::entropy}, {"random", Acquisition::random}});
    s.get("initial_labeled", c.active.initial_labeled);
    s.get("fed_rounds", c.active.fed_rounds);
    s.finish();
  }
  {
    auto s = root.child("eval");
    s.get("bins", c.bins);
    s.get("repeats", c.repeats);
    {
      auto o = s.child("ood");
      o.get_enum("strategy", c.ood_strategy,
                 {{"shifted_blobs", OodStrategy::Kind::shifted_blobs},
                  {"held_out_classes", OodStrategy::Kind::held_out_classes}});
      o.get("offset_spreads", c.ood_offset_spreads);
      o.get("classes", c.ood_classes);
      o.finish();
    }
    s.finish();
  }
  root.finish();
  validate(c);
  return c;
}

// Fully resolved config, defaults included. parse_config(to_json(c)) == c.
inline nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& d = c.dataset;
  const auto& p = d.partition;
  nlohmann::json j;
  j["seed"] = c.seed;
  j["dataset"] = {
      {"source", d.source},
      {"synthetic",
       {{"classes", d.synthetic.classes}, {"dim", d.synthetic.dim}, {"per_class", d.synthetic.per_class},
        {"spread", d.synthetic.spread}}},
      {"mnist",
       {{"train_images", d.train_images}, {"train_labels", d.train_labels}, {"test_images", d.test_images},
        {"test_labels", d.test_labels}}},
      {"csv", {{"path", d.csv_path}}},
      {"partition",
       {{"clients", p.clients},
        {"mode", p.mode == PartitionMode::iid ? "iid" : "label_skew"},
        {"major_classes", p.major_classes},
        {"client_size", p.sizes.at(0)},
        {"server_unlabeled", p.server_unlabeled},
        {"test_size", p.test_size},
        {"exclude_classes", p.exclude_classes}}}};
  j["model"] = {{"teacher_hidden", c.teacher_hidden}, {"student_hidden", c.student_hidden}};
  j["sgld"] = {{"step_size", c.sgld.step_size},         {"decay_tau", c.sgld.decay_tau},
               {"decay_kappa", c.sgld.decay_kappa},     {"burn_in", c.sgld.burn_in},
               {"map_eval_every", c.sgld.map_eval_every}, {"minibatch_size", c.sgld.minibatch_size},
               {"prior_precision", c.teacher_prior}};
  j["distill"] = {{"step_size", c.distill.step_size},
                  {"perturb_sigma", c.distill.perturb_sigma},
                  {"prior_precision", c.distill.prior.precision}};
  j["federation"] = {
      {"rounds", c.rounds},
      {"local_epochs", c.local_epochs},
      {"aggregator", to_string(c.aggregator)},
      {"client_mode", to_string(c.client_mode)},
      {"checkpoint_every", c.checkpoint_every},
      {"fedavg", {{"lr", c.fedavg.lr}, {"weight_decay", c.fedavg.weight_decay}, {"batch_size", c.fedavg.batch_size}}},
      {"server",
       {{"extra_samples", c.server.extra_samples},
        {"epochs", c.server.epochs},
        {"lr_teacher", c.server.lr_teacher},
        {"lr_student", c.server.lr_student},
        {"batch_size", c.server.batch_size},
        {"swa_start_epoch", c.server.swa_start_epoch.value_or((c.server.epochs + 1) / 2)},
        {"swa_every_epochs", c.server.swa_every_epochs}}}};
  j["active"] = {{"rounds", c.active.rounds},
                 {"budget", c.active.budget},
                 {"acquisition", to_string(c.active.acquisition)},
                 {"initial_labeled", c.active.initial_labeled},
                 {"fed_rounds", c.active.fed_rounds}};
  j["eval"] = {{"bins", c.bins},
               {"repeats", c.repeats},
               {"ood",
                {{"strategy", c.ood_strategy == OodStrategy::Kind::shifted_blobs ? "shifted_blobs" : "held_out_classes"},
                 {"offset_spreads", c.ood_offset_spreads},
                 {"classes", c.ood_classes}}}};
  return j;
}

inline FederationConfig federation_config(const ExperimentConfig& c, std::size_t input_dim, std::size_t classes,
                                          std::size_t threads) {
  FederationConfig f;
  f.teacher = ModelSpec{input_dim, c.teacher_hidden, classes, Role::teacher};
  f.student = ModelSpec{input_dim, c.student_hidden, classes, Role::student};
  f.sgld = c.sgld;
  f.teacher_prior = PriorHyper{c.teacher_prior};
  f.distill = c.distill;
  f.fedavg = c.fedavg;
  f.server = c.server;
  f.rounds = c.rounds;
  f.local_epochs = c.local_epochs;
  f.aggregator = c.aggregator;
  f.mode = c.client_mode;
  f.threads = threads;
  f.eval_bins = c.bins;
  f.seed = c.seed;
  return f;
}

}  // namespace fedppd

#endif  // FEDPPD_CONFIG_HPP
