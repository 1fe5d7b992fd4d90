#ifndef FEDPPD_ACTIVE_HPP
#define FEDPPD_ACTIVE_HPP

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <iterator>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedppd/data.hpp"
#include "fedppd/error.hpp"
#include "fedppd/federation.hpp"
#include "fedppd/metrics.hpp"
#include "fedppd/rng.hpp"

namespace fedppd {

enum class Acquisition { entropy, random };

inline const char* to_string(Acquisition a) { return a == Acquisition::entropy ? "entropy" : "random"; }

struct ActiveConfig {
  std::size_t rounds = 4;
  std::size_t budget = 25;
  Acquisition acquisition = Acquisition::entropy;
  std::size_t initial_labeled = 100;
  // Federated rounds run after each acquisition step.
  std::size_t fed_rounds = 5;
};

// One client's pools, as row indices into the shared training dataset. The
// unlabeled rows keep their true labels in the dataset; they are only read
// once a row has been acquired.
struct ClientPools {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
  std::vector<std::vector<std::size_t>> history;

  void check(std::size_t expected_total) const {
    if (labeled.size() + unlabeled.size() != expected_total) {
      throw ProtocolError("active pools: size changed from " + std::to_string(expected_total) + " to " +
                          std::to_string(labeled.size() + unlabeled.size()));
    }
    std::vector<std::size_t> a = labeled;
    std::vector<std::size_t> b = unlabeled;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    std::vector<std::size_t> both;
    std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
    if (!both.empty()) throw ProtocolError("active pools: labeled and unlabeled pools overlap");
  }
};

// Splits each client's rows into an initial labeled pool and an unlabeled pool.
inline std::vector<ClientPools> make_pools(const std::vector<std::vector<std::size_t>>& client_rows,
                                           std::size_t initial_labeled, std::uint64_t seed) {
  std::vector<ClientPools> out;
  for (std::size_t k = 0; k < client_rows.size(); ++k) {
    std::vector<std::size_t> rows = client_rows[k];
    if (rows.size() <= initial_labeled) {
      throw ArgumentError("active: client " + std::to_string(k) + " has " + std::to_string(rows.size()) +
                          " rows, need more than initial_labeled=" + std::to_string(initial_labeled));
    }
    if (initial_labeled == 0) throw ArgumentError("active: initial_labeled must be >= 1");
    Rng rng = Rng::stream(seed, Stream::pools, k);
    rng.shuffle(rows);
    ClientPools p;
    p.labeled.assign(rows.begin(), rows.begin() + static_cast<std::ptrdiff_t>(initial_labeled));
    p.unlabeled.assign(rows.begin() + static_cast<std::ptrdiff_t>(initial_labeled), rows.end());
    std::sort(p.labeled.begin(), p.labeled.end());
    std::sort(p.unlabeled.begin(), p.unlabeled.end());
    out.push_back(std::move(p));
  }
  return out;
}

// Positions of the `budget` highest scores, highest first; ties go to the
// lower position. A budget beyond the pool size selects everything.
inline std::vector<std::size_t> select_batch(std::span<const double> scores, std::size_t budget) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  idx.resize(std::min(budget, idx.size()));
  return idx;
}

// Positions chosen uniformly at random, independent of any model output.
inline std::vector<std::size_t> select_random(std::size_t pool_size, std::size_t budget, Rng& rng) {
  std::vector<std::size_t> idx(pool_size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  rng.shuffle(idx);
  idx.resize(std::min(budget, pool_size));
  return idx;
}

// Moves the given positions of `unlabeled` into `labeled`.
inline void acquire(ClientPools& p, std::span<const std::size_t> positions) {
  std::vector<char> take(p.unlabeled.size(), 0);
  std::vector<std::size_t> acquired;
  for (std::size_t pos : positions) {
    if (pos >= p.unlabeled.size() || take[pos]) throw ArgumentError("acquire: bad or repeated position");
    take[pos] = 1;
    acquired.push_back(p.unlabeled[pos]);
  }
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < p.unlabeled.size(); ++i) {
    if (!take[i]) rest.push_back(p.unlabeled[i]);
  }
  p.unlabeled = std::move(rest);
  p.labeled.insert(p.labeled.end(), acquired.begin(), acquired.end());
  std::sort(p.labeled.begin(), p.labeled.end());
  p.history.push_back(std::move(acquired));
}

struct CurvePoint {
  std::size_t active_round = 0;
  double labeled_per_client = 0.0;
  std::string acquisition;
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
};

struct ActiveResult {
  std::vector<CurvePoint> curve;
  std::vector<RunRecord> records;
  GlobalModels globals;
  std::vector<ClientPools> pools;
};

inline std::string curve_csv(std::span<const CurvePoint> curve) {
  std::string s = "active_round,labeled_per_client,acquisition,seed,test_accuracy\n";
  for (const CurvePoint& p : curve) {
    s += std::to_string(p.active_round) + "," + format_double(p.labeled_per_client) + "," + p.acquisition + "," +
         std::to_string(p.seed) + "," + format_double(p.test_accuracy) + "\n";
  }
  return s;
}

// Federated active learning: train on the initial pools, then for each active
// round score every client's unlabeled inputs with the current global model,
// acquire up to `budget` of them per client and continue federated training.
// Stops early once every unlabeled pool is empty.
inline ActiveResult run_active_loop(const ActiveConfig& acfg, const FederationConfig& fcfg, const Dataset& pool,
                                    std::vector<ClientPools> pools, const Matrix& server_unlabeled,
                                    const Dataset& test, const RoundObserver& observer = {}) {
  if (pools.empty()) throw ArgumentError("active: no clients");
  FederationConfig cfg = fcfg;
  cfg.rounds = acfg.fed_rounds;
  std::vector<std::size_t> totals;
  for (const ClientPools& p : pools) totals.push_back(p.labeled.size() + p.unlabeled.size());

  ActiveResult res;
  std::size_t round_offset = 0;
  auto train = [&](const std::optional<GlobalModels>& start) {
    std::vector<Dataset> clients;
    for (const ClientPools& p : pools) clients.push_back(pool.subset(p.labeled));
    FederatedResult fr = run_federated(cfg, clients, server_unlabeled, test, start, observer, round_offset);
    round_offset += cfg.rounds;
    res.records.insert(res.records.end(), fr.records.begin(), fr.records.end());
    return fr.globals;
  };
  auto record_point = [&](std::size_t r, const GlobalModels& g) {
    double labeled = 0.0;
    for (const ClientPools& p : pools) labeled += static_cast<double>(p.labeled.size());
    CurvePoint pt;
    pt.active_round = r;
    pt.labeled_per_client = labeled / static_cast<double>(pools.size());
    pt.acquisition = to_string(acfg.acquisition);
    pt.seed = cfg.seed;
    pt.test_accuracy =
        accuracy(EvalBatch(predict_proba(serving_spec(cfg), serving_params(g, cfg), test.features), test.labels));
    res.curve.push_back(pt);
  };

  GlobalModels g = train(std::nullopt);
  record_point(0, g);
  for (std::size_t r = 0; r < acfg.rounds; ++r) {
    bool any_left = false;
    for (const ClientPools& p : pools) any_left = any_left || !p.unlabeled.empty();
    if (!any_left) break;
    parallel_for(pools.size(), cfg.threads, [&](std::size_t k) {
      ClientPools& p = pools[k];
      std::vector<std::size_t> picks;
      if (acfg.acquisition == Acquisition::entropy) {
        const Matrix x = select_rows(pool.features, p.unlabeled);
        const std::vector<double> scores =
            x.rows() == 0 ? std::vector<double>{} : row_entropies(predict_proba(serving_spec(cfg), serving_params(g, cfg), x));
        picks = select_batch(scores, acfg.budget);
      } else {
        Rng rng = Rng::stream(cfg.seed, Stream::acquire, k, r);
        picks = select_random(p.unlabeled.size(), acfg.budget, rng);
      }
      acquire(p, picks);
    });
    for (std::size_t k = 0; k < pools.size(); ++k) pools[k].check(totals[k]);
    g = train(g);
    record_point(r + 1, g);
  }
  res.globals = std::move(g);
  res.pools = std::move(pools);
  return res;
}

}  // namespace fedppd

#endif  // FEDPPD_ACTIVE_HPP
