#ifndef FEDPPD_METRICS_HPP
#define FEDPPD_METRICS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedppd/error.hpp"
#include "fedppd/rng.hpp"
#include "fedppd/tensor.hpp"

namespace fedppd {

// Predicted probabilities paired with the true labels.
struct EvalBatch {
  Matrix probs;
  std::vector<int> labels;

  EvalBatch() = default;
  EvalBatch(Matrix p, std::vector<int> y) : probs(std::move(p)), labels(std::move(y)) {
    if (probs.rows() != labels.size()) {
      throw DimensionError("eval batch: " + std::to_string(probs.rows()) + " rows vs " +
                           std::to_string(labels.size()) + " labels");
    }
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= probs.cols()) {
        throw ArgumentError("eval batch: label " + std::to_string(l) + " out of range");
      }
    }
  }

  std::size_t size() const noexcept { return labels.size(); }

  // Lowest class index wins ties.
  std::size_t predicted(std::size_t i) const {
    auto r = probs.row(i);
    return static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
  }
  double confidence(std::size_t i) const {
    auto r = probs.row(i);
    return *std::max_element(r.begin(), r.end());
  }
  bool correct(std::size_t i) const { return predicted(i) == static_cast<std::size_t>(labels[i]); }
};

inline double accuracy(const EvalBatch& b) {
  if (b.size() == 0) throw ArgumentError("accuracy: empty batch");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b.size(); ++i) hits += b.correct(i) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(b.size());
}

// Shannon entropy in nats; 0 log 0 = 0.
inline double predictive_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double v : p) {
    if (v > 0.0) h -= v * std::log(v);
  }
  return h;
}

inline std::vector<double> row_entropies(const Matrix& probs) {
  std::vector<double> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) out[i] = predictive_entropy(probs.row(i));
  return out;
}

struct BinStats {
  std::size_t count = 0;
  double mean_confidence = 0.0;
  double accuracy = 0.0;
};

struct Calibration {
  double ece = 0.0;
  double mce = 0.0;
  std::vector<BinStats> bins;
};

// Bin b of B covers confidences in (b/B, (b+1)/B]; confidence 0 falls in bin 0.
inline std::size_t confidence_bin(double c, std::size_t bins) {
  const double nb = static_cast<double>(bins);
  auto b = static_cast<std::size_t>(std::clamp(std::ceil(c * nb) - 1.0, 0.0, nb - 1.0));
  while (b > 0 && c <= static_cast<double>(b) / nb) --b;
  while (b + 1 < bins && c > static_cast<double>(b + 1) / nb) ++b;
  return b;
}

inline Calibration ece_mce(const EvalBatch& batch, std::size_t bins = 10) {
  if (bins == 0) throw ArgumentError("ece_mce: bins must be >= 1");
  if (batch.size() == 0) throw ArgumentError("ece_mce: empty batch");
  std::vector<double> conf_sum(bins, 0.0);
  std::vector<std::size_t> hits(bins, 0);
  Calibration out;
  out.bins.resize(bins);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const double c = batch.confidence(i);
    const std::size_t b = confidence_bin(c, bins);
    ++out.bins[b].count;
    conf_sum[b] += c;
    hits[b] += batch.correct(i) ? 1 : 0;
  }
  const double n = static_cast<double>(batch.size());
  for (std::size_t b = 0; b < bins; ++b) {
    BinStats& s = out.bins[b];
    if (s.count == 0) continue;
    s.mean_confidence = conf_sum[b] / static_cast<double>(s.count);
    s.accuracy = static_cast<double>(hits[b]) / static_cast<double>(s.count);
    const double gap = std::abs(s.accuracy - s.mean_confidence);
    out.ece += (static_cast<double>(s.count) / n) * gap;
    out.mce = std::max(out.mce, gap);
  }
  return out;
}

inline double brier(const EvalBatch& b) {
  if (b.size() == 0) throw ArgumentError("brier: empty batch");
  double total = 0.0;
  for (std::size_t i = 0; i < b.size(); ++i) {
    auto r = b.probs.row(i);
    double s = 0.0;
    for (std::size_t c = 0; c < r.size(); ++c) {
      const double t = c == static_cast<std::size_t>(b.labels[i]) ? 1.0 : 0.0;
      s += (r[c] - t) * (r[c] - t);
    }
    total += s;
  }
  return total / static_cast<double>(b.size());
}

// Mann-Whitney AUROC: P(pos > neg) with ties counted half. Computed from
// midranks in O((p + n) log(p + n)).
inline double auroc(std::span<const double> positive, std::span<const double> negative) {
  if (positive.empty() || negative.empty()) throw ArgumentError("auroc: positive and negative sets must be nonempty");
  struct Item {
    double score;
    bool pos;
  };
  std::vector<Item> all;
  all.reserve(positive.size() + negative.size());
  for (double s : positive) all.push_back({s, true});
  for (double s : negative) all.push_back({s, false});
  std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.score < b.score; });
  // Twice the U statistic, accumulated in integers so the result is exact.
  std::size_t u2 = 0;
  std::size_t neg_below = 0;
  for (std::size_t i = 0; i < all.size();) {
    std::size_t j = i;
    std::size_t pos_here = 0;
    std::size_t neg_here = 0;
    while (j < all.size() && all[j].score == all[i].score) {
      (all[j].pos ? pos_here : neg_here) += 1;
      ++j;
    }
    u2 += pos_here * (2 * neg_below + neg_here);
    neg_below += neg_here;
    i = j;
  }
  return (static_cast<double>(u2) / 2.0) /
         (static_cast<double>(positive.size()) * static_cast<double>(negative.size()));
}

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
  std::vector<double> values;
};

// Entropy-based OOD detection (OOD is the positive class). Each repeat draws
// equally many rows from both sets without replacement.
inline MeanStd ood_eval(const Matrix& in_probs, const Matrix& ood_probs, std::size_t repeats, Rng& rng) {
  if (in_probs.rows() == 0 || ood_probs.rows() == 0) throw ArgumentError("ood_eval: empty set");
  if (repeats == 0) throw ArgumentError("ood_eval: repeats must be >= 1");
  const std::vector<double> h_in = row_entropies(in_probs);
  const std::vector<double> h_ood = row_entropies(ood_probs);
  const std::size_t n = std::min(h_in.size(), h_ood.size());
  auto draw = [&](const std::vector<double>& h) {
    std::vector<std::size_t> idx(h.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (h.size() > n) rng.shuffle(idx);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = h[idx[i]];
    return out;
  };
  MeanStd r;
  for (std::size_t t = 0; t < repeats; ++t) {
    const auto neg = draw(h_in);
    const auto pos = draw(h_ood);
    r.values.push_back(auroc(pos, neg));
  }
  for (double v : r.values) r.mean += v;
  r.mean /= static_cast<double>(repeats);
  for (double v : r.values) r.std += (v - r.mean) * (v - r.mean);
  r.std = std::sqrt(r.std / static_cast<double>(repeats));
  return r;
}

// AUROC of "prediction is correct" scored by negative predictive entropy.
// nullopt when all predictions are correct or all are wrong.
inline std::optional<double> correctness_auroc(const EvalBatch& b) {
  std::vector<double> correct;
  std::vector<double> wrong;
  for (std::size_t i = 0; i < b.size(); ++i) {
    const double s = -predictive_entropy(b.probs.row(i));
    (b.correct(i) ? correct : wrong).push_back(s);
  }
  if (correct.empty() || wrong.empty()) return std::nullopt;
  return auroc(correct, wrong);
}

// ---------------------------------------------------------------------------
// Reports

struct MetricsReport {
  std::size_t n = 0;
  double accuracy = 0.0;
  Calibration calibration;
  std::size_t bins = 10;
  double brier = 0.0;
  std::optional<MeanStd> ood;
  std::size_t ood_repeats = 0;
  std::optional<double> correctness_auroc;
};

inline MetricsReport evaluate(const EvalBatch& b, std::size_t bins) {
  MetricsReport r;
  r.n = b.size();
  r.accuracy = accuracy(b);
  r.bins = bins;
  r.calibration = ece_mce(b, bins);
  r.brier = brier(b);
  r.correctness_auroc = correctness_auroc(b);
  return r;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json j;
  j["n"] = r.n;
  j["accuracy"] = r.accuracy;
  j["ece"] = r.calibration.ece;
  j["mce"] = r.calibration.mce;
  j["bins"] = r.bins;
  j["brier"] = r.brier;
  nlohmann::json reliability = nlohmann::json::array();
  for (const BinStats& s : r.calibration.bins) {
    reliability.push_back({{"count", s.count}, {"mean_confidence", s.mean_confidence}, {"accuracy", s.accuracy}});
  }
  j["reliability"] = reliability;
  if (r.ood) {
    j["ood_auroc"] = {{"mean", r.ood->mean}, {"std", r.ood->std}, {"repeats", r.ood_repeats},
                      {"values", r.ood->values}};
  } else {
    j["ood_auroc"] = nullptr;
  }
  if (r.correctness_auroc) {
    j["correctness_auroc"] = *r.correctness_auroc;
  } else {
    j["correctness_auroc"] = nullptr;
  }
  return j;
}

inline std::string metrics_csv_header() {
  return "n,accuracy,ece,mce,bins,brier,ood_auroc_mean,ood_auroc_std,ood_repeats,correctness_auroc\n";
}

inline std::string metrics_csv_row(const MetricsReport& r) {
  auto f = [](double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  std::string s = std::to_string(r.n) + "," + f(r.accuracy) + "," + f(r.calibration.ece) + "," +
                  f(r.calibration.mce) + "," + std::to_string(r.bins) + "," + f(r.brier) + ",";
  s += r.ood ? f(r.ood->mean) + "," + f(r.ood->std) + "," + std::to_string(r.ood_repeats) : std::string(",,");
  s += ",";
  s += r.correctness_auroc ? f(*r.correctness_auroc) : std::string();
  return s + "\n";
}

}  // namespace fedppd

#endif  // FEDPPD_METRICS_HPP
