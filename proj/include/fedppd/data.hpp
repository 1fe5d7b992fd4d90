#ifndef FEDPPD_DATA_HPP
#define FEDPPD_DATA_HPP

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fedppd/error.hpp"
#include "fedppd/rng.hpp"
#include "fedppd/tensor.hpp"

namespace fedppd {

struct Dataset {
  Matrix features;
  std::vector<int> labels;
  std::size_t classes = 0;
  std::string provenance;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }

  Dataset subset(std::span<const std::size_t> rows) const {
    Dataset out;
    out.features = select_rows(features, rows);
    out.labels.reserve(rows.size());
    for (std::size_t r : rows) out.labels.push_back(labels[r]);
    out.classes = classes;
    out.provenance = provenance;
    return out;
  }
};

// Per-feature affine standardization; in global mode one scalar mean/std is
// shared by all features (used for image pixels).
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  static Standardizer fit(const Matrix& x, std::span<const std::size_t> rows, bool global = false) {
    if (rows.empty()) throw ArgumentError("standardizer: no rows to fit");
    const std::size_t d = x.cols();
    const double n = static_cast<double>(rows.size());
    Standardizer s;
    if (global) {
      double m = 0.0;
      for (std::size_t r : rows) {
        for (double v : x.row(r)) m += v;
      }
      m /= n * static_cast<double>(d);
      double var = 0.0;
      for (std::size_t r : rows) {
        for (double v : x.row(r)) var += (v - m) * (v - m);
      }
      var /= n * static_cast<double>(d);
      s.mean.assign(d, m);
      s.stddev.assign(d, var > 0.0 ? std::sqrt(var) : 1.0);
      return s;
    }
    s.mean.assign(d, 0.0);
    s.stddev.assign(d, 0.0);
    for (std::size_t r : rows) {
      auto row = x.row(r);
      for (std::size_t j = 0; j < d; ++j) s.mean[j] += row[j];
    }
    for (double& m : s.mean) m /= n;
    for (std::size_t r : rows) {
      auto row = x.row(r);
      for (std::size_t j = 0; j < d; ++j) s.stddev[j] += (row[j] - s.mean[j]) * (row[j] - s.mean[j]);
    }
    for (double& v : s.stddev) v = v > 0.0 ? std::sqrt(v / n) : 1.0;
    return s;
  }

  static Standardizer fit(const Matrix& x, bool global = false) {
    std::vector<std::size_t> all(x.rows());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    return fit(x, all, global);
  }

  void apply(Matrix& x) const {
    if (x.cols() != mean.size()) throw DimensionError("standardizer: width mismatch");
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto row = x.row(i);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] = (row[j] - mean[j]) / stddev[j];
    }
  }
};

// ---------------------------------------------------------------------------
// Synthetic Gaussian blobs

struct SyntheticParams {
  std::size_t classes = 4;
  std::size_t dim = 10;
  std::size_t per_class = 500;
  double spread = 0.3;
};

// Class centres: unit basis vectors when classes <= dim (a regular simplex),
// otherwise points on the unit circle in the first two coordinates (or on a
// line for dim == 1).
inline std::vector<std::vector<double>> blob_centres(std::size_t classes, std::size_t dim) {
  std::vector<std::vector<double>> mu(classes, std::vector<double>(dim, 0.0));
  for (std::size_t c = 0; c < classes; ++c) {
    if (classes <= dim) {
      mu[c][c] = 1.0;
    } else if (dim >= 2) {
      const double a = 2.0 * std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
      mu[c][0] = std::cos(a);
      mu[c][1] = std::sin(a);
    } else {
      mu[c][0] = static_cast<double>(c);
    }
  }
  return mu;
}

inline void check_synthetic(const SyntheticParams& p) {
  if (p.classes < 2) throw ArgumentError("synthetic: classes must be >= 2");
  if (p.dim < 1) throw ArgumentError("synthetic: dim must be >= 1");
  if (p.per_class < 1) throw ArgumentError("synthetic: per_class must be >= 1");
  if (p.spread < 0.0) throw ArgumentError("synthetic: spread must be >= 0");
}

// Unstandardized blobs, rows ordered class by class.
inline Dataset gen_synthetic_raw(const SyntheticParams& p, std::uint64_t seed) {
  check_synthetic(p);
  Rng rng = Rng::stream(seed, Stream::data);
  const auto mu = blob_centres(p.classes, p.dim);
  Dataset d;
  d.classes = p.classes;
  d.features = Matrix(p.classes * p.per_class, p.dim);
  d.labels.reserve(p.classes * p.per_class);
  std::size_t r = 0;
  for (std::size_t c = 0; c < p.classes; ++c) {
    for (std::size_t i = 0; i < p.per_class; ++i, ++r) {
      auto row = d.features.row(r);
      for (std::size_t j = 0; j < p.dim; ++j) row[j] = mu[c][j] + p.spread * rng.normal();
      d.labels.push_back(static_cast<int>(c));
    }
  }
  d.provenance = "synthetic(classes=" + std::to_string(p.classes) + ",dim=" + std::to_string(p.dim) +
                 ",per_class=" + std::to_string(p.per_class) + ",seed=" + std::to_string(seed) + ")";
  return d;
}

// Blobs standardized with their own statistics.
inline Dataset gen_synthetic(const SyntheticParams& p, std::uint64_t seed) {
  Dataset d = gen_synthetic_raw(p, seed);
  Standardizer::fit(d.features).apply(d.features);
  return d;
}

// Moves every row of class c by `offset` along the unit vector from centre c
// towards the centroid of all centres. offset = 0 is the identity.
inline Matrix shift_towards_centroid(const Dataset& d, const std::vector<std::vector<double>>& centres,
                                     double offset) {
  const std::size_t dim = d.dim();
  std::vector<double> centroid(dim, 0.0);
  for (const auto& c : centres) {
    for (std::size_t j = 0; j < dim; ++j) centroid[j] += c[j] / static_cast<double>(centres.size());
  }
  std::vector<std::vector<double>> dir(centres.size(), std::vector<double>(dim, 0.0));
  for (std::size_t c = 0; c < centres.size(); ++c) {
    double norm = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      dir[c][j] = centroid[j] - centres[c][j];
      norm += dir[c][j] * dir[c][j];
    }
    norm = std::sqrt(norm);
    for (double& v : dir[c]) v = norm > 0.0 ? v / norm : 0.0;
  }
  Matrix out = d.features;
  for (std::size_t i = 0; i < d.size(); ++i) {
    auto row = out.row(i);
    const auto& u = dir[static_cast<std::size_t>(d.labels[i])];
    for (std::size_t j = 0; j < dim; ++j) row[j] += offset * u[j];
  }
  return out;
}

// Empirical per-class means of a dataset.
inline std::vector<std::vector<double>> class_means(const Dataset& d) {
  std::vector<std::vector<double>> mu(d.classes, std::vector<double>(d.dim(), 0.0));
  std::vector<std::size_t> count(d.classes, 0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto c = static_cast<std::size_t>(d.labels[i]);
    ++count[c];
    auto row = d.features.row(i);
    for (std::size_t j = 0; j < d.dim(); ++j) mu[c][j] += row[j];
  }
  for (std::size_t c = 0; c < d.classes; ++c) {
    if (count[c] == 0) continue;
    for (double& v : mu[c]) v /= static_cast<double>(count[c]);
  }
  return mu;
}

// ---------------------------------------------------------------------------
// IDX (MNIST) reader

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t read_be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw FormatError(path + ": truncated IDX header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

inline std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%08X", v);
  return buf;
}

}  // namespace detail

// Parses an IDX image/label pair. Pixels are scaled to [0, 1]; standardization
// is left to the caller so train statistics can be reused for the test split.
inline Dataset load_idx_raw(const std::string& images_path, const std::string& labels_path) {
  const auto img = detail::read_file(images_path);
  const auto lab = detail::read_file(labels_path);
  const std::uint32_t img_magic = detail::read_be32(img, 0, images_path);
  if (img_magic != 0x00000803) {
    throw FormatError(images_path + ": bad image magic " + detail::hex32(img_magic) +
                      " (expected 0x00000803)");
  }
  const std::uint32_t lab_magic = detail::read_be32(lab, 0, labels_path);
  if (lab_magic != 0x00000801) {
    throw FormatError(labels_path + ": bad label magic " + detail::hex32(lab_magic) +
                      " (expected 0x00000801)");
  }
  const std::size_t n = detail::read_be32(img, 4, images_path);
  const std::size_t rows = detail::read_be32(img, 8, images_path);
  const std::size_t cols = detail::read_be32(img, 12, images_path);
  const std::size_t nl = detail::read_be32(lab, 4, labels_path);
  if (n != nl) {
    throw FormatError("IDX count mismatch: " + std::to_string(n) + " images vs " + std::to_string(nl) +
                      " labels");
  }
  const std::size_t d = rows * cols;
  if (img.size() < 16 + n * d) {
    throw FormatError(images_path + ": truncated, expected " + std::to_string(16 + n * d) + " bytes, got " +
                      std::to_string(img.size()));
  }
  if (lab.size() < 8 + n) {
    throw FormatError(labels_path + ": truncated, expected " + std::to_string(8 + n) + " bytes, got " +
                      std::to_string(lab.size()));
  }
  Dataset out;
  out.features = Matrix(n, d);
  auto& x = out.features.data();
  for (std::size_t i = 0; i < n * d; ++i) x[i] = static_cast<double>(img[16 + i]) / 255.0;
  out.labels.resize(n);
  int max_label = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out.labels[i] = lab[8 + i];
    max_label = std::max(max_label, out.labels[i]);
  }
  out.classes = static_cast<std::size_t>(max_label) + 1;
  out.provenance = "idx(" + images_path + ")";
  return out;
}

// IDX pair standardized with the pixel mean/std of the file itself.
inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
  Dataset d = load_idx_raw(images_path, labels_path);
  Standardizer::fit(d.features, true).apply(d.features);
  return d;
}

// ---------------------------------------------------------------------------
// CSV import/export: header x0..x{d-1},label; one row per example.

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_csv(const Dataset& d, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  for (std::size_t j = 0; j < d.dim(); ++j) out << 'x' << j << ',';
  out << "label\n";
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (double v : d.features.row(i)) out << format_double(v) << ',';
    out << d.labels[i] << '\n';
  }
  if (!out) throw IoError("failed writing " + path);
}

inline Dataset read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw FormatError(path + ": missing header");
  const std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
  if (cols < 2) throw FormatError(path + ": need at least one feature and a label column");
  const std::size_t d = cols - 1;
  std::vector<double> values;
  std::vector<int> labels;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::size_t k = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        if (k < d) {
          values.push_back(std::stod(cell));
        } else if (k == d) {
          labels.push_back(std::stoi(cell));
        }
      } catch (const std::exception&) {
        throw FormatError(path + ":" + std::to_string(lineno) + ": bad number '" + cell + "'");
      }
      ++k;
    }
    if (k != cols) throw FormatError(path + ":" + std::to_string(lineno) + ": expected " +
                                     std::to_string(cols) + " fields");
  }
  Dataset out;
  out.features = Matrix(labels.size(), d, std::move(values));
  out.labels = std::move(labels);
  int mx = -1;
  for (int l : out.labels) {
    if (l < 0) throw FormatError(path + ": negative label");
    mx = std::max(mx, l);
  }
  out.classes = static_cast<std::size_t>(mx + 1);
  out.provenance = "csv(" + path + ")";
  return out;
}

// ---------------------------------------------------------------------------
// Client partitioning

enum class PartitionMode { iid, label_skew };

struct PartitionRequest {
  std::size_t clients = 1;
  PartitionMode mode = PartitionMode::iid;
  std::size_t major_classes = 2;
  // One entry per client, or a single entry applied to all clients.
  std::vector<std::size_t> sizes{500};
  std::size_t server_unlabeled = 0;
  std::size_t test_size = 0;
  std::vector<int> exclude_classes;
  // Share of each client's data drawn from its major classes.
  double major_share = 0.9;
};

struct PartitionPlan {
  std::vector<std::vector<std::size_t>> clients;
  std::vector<std::size_t> server_unlabeled;
  std::vector<std::size_t> test;

  // Throws if lists overlap, reference rows outside [0, n) or a client is empty.
  void validate(std::size_t n) const {
    std::vector<char> seen(n, 0);
    auto mark = [&](const std::vector<std::size_t>& list, const std::string& what) {
      for (std::size_t i : list) {
        if (i >= n) throw ArgumentError("partition: " + what + " index " + std::to_string(i) + " out of range");
        if (seen[i]) throw ArgumentError("partition: index " + std::to_string(i) + " appears twice (" + what + ")");
        seen[i] = 1;
      }
    };
    for (std::size_t k = 0; k < clients.size(); ++k) {
      if (clients[k].empty()) throw ArgumentError("partition: client " + std::to_string(k) + " is empty");
      mark(clients[k], "client " + std::to_string(k));
    }
    mark(server_unlabeled, "server_unlabeled");
    mark(test, "test");
  }

  std::vector<std::size_t> training_rows() const {
    std::vector<std::size_t> out;
    for (const auto& c : clients) out.insert(out.end(), c.begin(), c.end());
    std::sort(out.begin(), out.end());
    return out;
  }
};

inline void to_json(nlohmann::json& j, const PartitionPlan& p) {
  j = nlohmann::json{{"clients", p.clients}, {"server_unlabeled", p.server_unlabeled}, {"test", p.test}};
}

inline void from_json(const nlohmann::json& j, PartitionPlan& p) {
  j.at("clients").get_to(p.clients);
  j.at("server_unlabeled").get_to(p.server_unlabeled);
  j.at("test").get_to(p.test);
}

inline PartitionPlan partition(std::span<const int> labels, std::size_t classes, const PartitionRequest& req,
                               std::uint64_t seed) {
  if (req.clients == 0) throw ArgumentError("partition: need at least one client");
  if (req.sizes.size() != 1 && req.sizes.size() != req.clients) {
    throw ArgumentError("partition: sizes must have 1 or " + std::to_string(req.clients) + " entries");
  }
  auto size_of = [&](std::size_t k) { return req.sizes.size() == 1 ? req.sizes[0] : req.sizes[k]; };
  for (std::size_t k = 0; k < req.clients; ++k) {
    if (size_of(k) == 0) throw ArgumentError("partition: client " + std::to_string(k) + " has size 0");
  }
  std::vector<char> excluded(classes, 0);
  for (int c : req.exclude_classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= classes) {
      throw ArgumentError("partition: excluded class " + std::to_string(c) + " out of range");
    }
    excluded[static_cast<std::size_t>(c)] = 1;
  }
  std::vector<std::size_t> allowed;
  for (std::size_t c = 0; c < classes; ++c) {
    if (!excluded[c]) allowed.push_back(c);
  }
  if (allowed.empty()) throw ArgumentError("partition: every class is excluded");

  Rng rng = Rng::stream(seed, Stream::partition);
  const std::size_t n = labels.size();
  PartitionPlan plan;

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  rng.shuffle(order);
  if (req.test_size > n) {
    throw ArgumentError("partition: test_size " + std::to_string(req.test_size) + " exceeds " +
                        std::to_string(n) + " examples");
  }
  plan.test.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(req.test_size));

  // Remaining training-side rows per class, in shuffled order.
  std::vector<std::vector<std::size_t>> pool(classes);
  for (std::size_t i = req.test_size; i < n; ++i) {
    const auto c = static_cast<std::size_t>(labels[order[i]]);
    if (c >= classes) throw ArgumentError("partition: label out of range");
    if (!excluded[c]) pool[c].push_back(order[i]);
  }
  auto take = [&](std::size_t c, std::size_t count, std::vector<std::size_t>& dst) {
    if (pool[c].size() < count) {
      throw ArgumentError("partition: class " + std::to_string(c) + " short by " +
                          std::to_string(count - pool[c].size()) + " examples");
    }
    dst.insert(dst.end(), pool[c].end() - static_cast<std::ptrdiff_t>(count), pool[c].end());
    pool[c].resize(pool[c].size() - count);
  };

  plan.clients.resize(req.clients);
  if (req.mode == PartitionMode::iid) {
    std::vector<std::size_t> all;
    for (std::size_t c : allowed) all.insert(all.end(), pool[c].begin(), pool[c].end());
    rng.shuffle(all);
    std::size_t need = 0;
    for (std::size_t k = 0; k < req.clients; ++k) need += size_of(k);
    if (all.size() < need) {
      throw ArgumentError("partition: need " + std::to_string(need) + " examples for clients, only " +
                          std::to_string(all.size()) + " available (short by " +
                          std::to_string(need - all.size()) + ")");
    }
    std::size_t pos = 0;
    for (std::size_t k = 0; k < req.clients; ++k) {
      plan.clients[k].assign(all.begin() + static_cast<std::ptrdiff_t>(pos),
                             all.begin() + static_cast<std::ptrdiff_t>(pos + size_of(k)));
      pos += size_of(k);
    }
    for (std::size_t c : allowed) pool[c].clear();
    for (std::size_t i = pos; i < all.size(); ++i) {
      pool[static_cast<std::size_t>(labels[all[i]])].push_back(all[i]);
    }
  } else {
    const std::size_t m = req.major_classes;
    if (m == 0 || m > allowed.size()) {
      throw ArgumentError("partition: major_classes must be in [1, " + std::to_string(allowed.size()) + "]");
    }
    // Major classes go to the least-used classes first, ties broken at random,
    // which spreads the classes evenly over clients.
    std::vector<std::size_t> usage(classes, 0);
    for (std::size_t k = 0; k < req.clients; ++k) {
      std::vector<std::size_t> cand = allowed;
      rng.shuffle(cand);
      std::stable_sort(cand.begin(), cand.end(),
                       [&](std::size_t a, std::size_t b) { return usage[a] < usage[b]; });
      cand.resize(m);
      for (std::size_t c : cand) ++usage[c];

      const std::size_t s = size_of(k);
      const auto n_major = static_cast<std::size_t>(std::ceil(req.major_share * static_cast<double>(s)));
      for (std::size_t j = 0; j < m; ++j) {
        const std::size_t share = n_major / m + (j < n_major % m ? 1 : 0);
        take(cand[j], share, plan.clients[k]);
      }
      for (std::size_t r = n_major; r < s; ++r) {
        std::size_t c = allowed[rng.index(allowed.size())];
        if (pool[c].empty()) {
          std::vector<std::size_t> nonempty;
          for (std::size_t a : allowed) {
            if (!pool[a].empty()) nonempty.push_back(a);
          }
          if (nonempty.empty()) {
            throw ArgumentError("partition: pool exhausted, client " + std::to_string(k) + " short by " +
                                std::to_string(s - r) + " examples");
          }
          c = nonempty[rng.index(nonempty.size())];
        }
        take(c, 1, plan.clients[k]);
      }
    }
  }

  std::vector<std::size_t> residual;
  for (std::size_t c : allowed) residual.insert(residual.end(), pool[c].begin(), pool[c].end());
  std::sort(residual.begin(), residual.end());
  rng.shuffle(residual);
  if (residual.size() < req.server_unlabeled) {
    throw ArgumentError("partition: server_unlabeled short by " +
                        std::to_string(req.server_unlabeled - residual.size()) + " examples");
  }
  plan.server_unlabeled.assign(residual.begin(), residual.begin() + static_cast<std::ptrdiff_t>(req.server_unlabeled));

  for (auto& c : plan.clients) std::sort(c.begin(), c.end());
  std::sort(plan.server_unlabeled.begin(), plan.server_unlabeled.end());
  std::sort(plan.test.begin(), plan.test.end());
  plan.validate(n);
  return plan;
}

// ---------------------------------------------------------------------------
// OOD pairs

struct OodStrategy {
  enum class Kind { shifted_blobs, held_out_classes } kind = Kind::shifted_blobs;
  double offset = 0.0;
  std::vector<int> classes;
};

struct OodPair {
  Dataset in_test;
  Matrix ood;
};

// Held-out classes: rows of `test` in the class set become OOD, the rest stay
// in-distribution. The class set must leave at least one in-distribution class.
inline OodPair split_held_out(const Dataset& test, const std::vector<int>& held_out) {
  std::set<int> hs(held_out.begin(), held_out.end());
  if (hs.empty()) throw ArgumentError("held_out_classes: empty class set");
  if (hs.size() >= test.classes) throw ArgumentError("held_out_classes: class set covers every class");
  std::vector<std::size_t> in_rows;
  std::vector<std::size_t> ood_rows;
  for (std::size_t i = 0; i < test.size(); ++i) {
    (hs.count(test.labels[i]) ? ood_rows : in_rows).push_back(i);
  }
  return {test.subset(in_rows), select_rows(test.features, ood_rows)};
}

}  // namespace fedppd

#endif  // FEDPPD_DATA_HPP
