#pragma once

// Concept-specificity scores for SAE features. For concept c at timestep t:
//
//   score(i) = mu(i, D_c) / (sum_j mu(j, D_c) + delta)
//            - mu(i, D_not_c) / (sum_j mu(j, D_not_c) + delta)
//
// where mu is the mean feature activation over the records of a subset at t.
// Candidates for selection exclude dead features and features firing more
// often than the 99th percentile of the (non-zero) density distribution.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "saeuron/activation_store.hpp"
#include "saeuron/errors.hpp"
#include "saeuron/sae.hpp"
#include "saeuron/train.hpp"

namespace saeuron {

inline constexpr double kDefaultScoreDelta = 1e-10;

// Per-(timestep, concept) activation sums plus per-feature firing counts,
// gathered in one encoding pass.
struct ActivationStatistics {
  struct Cell {
    std::vector<double> sum;
    std::uint64_t count = 0;
  };

  std::uint32_t n = 0;
  std::uint32_t T = 0;
  std::vector<std::map<std::uint16_t, Cell>> cells;  // indexed by timestep
  std::vector<std::uint64_t> fire_counts;
  std::uint64_t total_records = 0;

  void add(std::uint16_t t, std::uint16_t concept_id, const SparseCode<double>& code) {
    auto& cell = cells.at(t)[concept_id];
    if (cell.sum.empty()) cell.sum.assign(n, 0.0);
    for (std::size_t j = 0; j < code.size(); ++j) {
      cell.sum[code.indices[j]] += code.values[j];
      if (code.values[j] > 0) ++fire_counts[code.indices[j]];
    }
    ++cell.count;
    ++total_records;
  }
};

template <class S>
void require_dataset_width(const SaeModel<S>& model, const DatasetHandle& data) {
  if (model.d != data.d()) {
    throw DimensionError("model has d=" + std::to_string(model.d) + " but the dataset has d=" +
                         std::to_string(data.d()));
  }
}

template <class S>
ActivationStatistics collect_statistics(const SaeModel<S>& model, const DatasetHandle& data,
                                        std::size_t batch_size = 1024) {
  require_dataset_width(model, data);
  ActivationStatistics stats;
  stats.n = model.n;
  stats.T = data.manifest().T;
  stats.cells.resize(stats.T);
  stats.fire_counts.assign(model.n, 0);

  auto stream = iterate_batches(data, batch_size, false);
  std::vector<ActivationRecord> batch;
  while (stream.next(batch)) {
    const auto codes = encode_batch(model, batch_matrix<S>(batch, model.d), EncodeMode::inference);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      SparseCode<double> code{codes[b].indices, std::vector<double>(codes[b].values.begin(), codes[b].values.end()),
                              codes[b].n};
      stats.add(batch[b].timestep, batch[b].concept_id, code);
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------

enum class Subset : std::uint8_t { all = 0, target = 1, rest = 2 };

inline std::string subset_tag(Subset s, std::uint16_t concept_id) {
  switch (s) {
    case Subset::all:
      return "all";
    case Subset::target:
      return std::to_string(concept_id);
    case Subset::rest:
      return "!" + std::to_string(concept_id);
  }
  return "?";
}

// Mean activations mu(i, t, S) for S in {D, D_c, D_not_c} of one concept.
// Cells with no contributing records are absent; reading one throws.
class MeanTable {
 public:
  MeanTable() = default;
  MeanTable(std::uint16_t concept_id, std::uint32_t n, std::uint32_t T)
      : concept_id_(concept_id), n_(n), rows_(T), counts_(T) {
    for (auto& c : counts_) c.fill(0);
  }

  std::uint16_t concept_id() const { return concept_id_; }
  std::uint32_t n() const { return n_; }
  std::uint32_t T() const { return static_cast<std::uint32_t>(rows_.size()); }

  bool has(std::uint32_t t, Subset s) const { return t < rows_.size() && rows_[t][index(s)].has_value(); }
  std::uint64_t count(std::uint32_t t, Subset s) const { return counts_.at(t)[index(s)]; }

  const std::vector<double>& row(std::uint32_t t, Subset s) const {
    if (!has(t, s)) {
      throw DataError("no records for subset " + subset_tag(s, concept_id_) + " at timestep " + std::to_string(t));
    }
    return *rows_[t][index(s)];
  }

  double mean(std::uint32_t feature, std::uint32_t t, Subset s) const { return row(t, s).at(feature); }

  void set(std::uint32_t t, Subset s, std::vector<double> means, std::uint64_t count) {
    if (means.size() != n_) throw DimensionError("mean row width does not match n");
    rows_.at(t)[index(s)] = std::move(means);
    counts_.at(t)[index(s)] = count;
  }

 private:
  static std::size_t index(Subset s) { return static_cast<std::size_t>(s); }

  std::uint16_t concept_id_ = 0;
  std::uint32_t n_ = 0;
  std::vector<std::array<std::optional<std::vector<double>>, 3>> rows_;
  std::vector<std::array<std::uint64_t, 3>> counts_;
};

inline MeanTable means_from_statistics(const ActivationStatistics& stats, std::uint16_t concept_id) {
  MeanTable table(concept_id, stats.n, stats.T);
  for (std::uint32_t t = 0; t < stats.T; ++t) {
    std::array<std::vector<double>, 3> sums;
    std::array<std::uint64_t, 3> counts{0, 0, 0};
    for (auto& s : sums) s.assign(stats.n, 0.0);
    for (const auto& [c, cell] : stats.cells[t]) {
      const auto target = static_cast<std::size_t>(c == concept_id ? Subset::target : Subset::rest);
      for (std::size_t tag : {static_cast<std::size_t>(Subset::all), target}) {
        for (std::uint32_t i = 0; i < stats.n; ++i) sums[tag][i] += cell.sum[i];
        counts[tag] += cell.count;
      }
    }
    for (std::size_t tag = 0; tag < 3; ++tag) {
      if (counts[tag] == 0) continue;
      for (auto& v : sums[tag]) v /= static_cast<double>(counts[tag]);
      table.set(t, static_cast<Subset>(tag), std::move(sums[tag]), counts[tag]);
    }
  }
  return table;
}

template <class S>
MeanTable compute_means(const SaeModel<S>& model, const DatasetHandle& data, std::uint16_t concept_id) {
  if (!data.manifest().concepts.count(concept_id)) {
    throw DataError("concept " + std::to_string(concept_id) + " is not in the manifest");
  }
  return means_from_statistics(collect_statistics(model, data), concept_id);
}

// ---------------------------------------------------------------------------

class ScoreTable {
 public:
  ScoreTable() = default;
  ScoreTable(std::uint16_t concept_id, double delta, std::uint32_t n, std::uint32_t T)
      : concept_id_(concept_id), delta_(delta), n_(n), rows_(T) {}

  std::uint16_t concept_id() const { return concept_id_; }
  double delta() const { return delta_; }
  std::uint32_t n() const { return n_; }
  std::uint32_t T() const { return static_cast<std::uint32_t>(rows_.size()); }

  bool has(std::uint32_t t) const { return t < rows_.size() && rows_[t].has_value(); }
  const std::vector<double>& row(std::uint32_t t) const {
    if (!has(t)) throw DataError("no scores at timestep " + std::to_string(t));
    return *rows_[t];
  }
  double score(std::uint32_t feature, std::uint32_t t) const { return row(t).at(feature); }

  void set(std::uint32_t t, std::vector<double> scores) { rows_.at(t) = std::move(scores); }

 private:
  std::uint16_t concept_id_ = 0;
  double delta_ = kDefaultScoreDelta;
  std::uint32_t n_ = 0;
  std::vector<std::optional<std::vector<double>>> rows_;
};

// Score row from the two mean rows; an empty "rest" row contributes zero.
inline std::vector<double> score_row(std::span<const double> mu_concept, std::span<const double> mu_rest,
                                     double delta) {
  double total_c = 0, total_r = 0;
  for (double v : mu_concept) total_c += v;
  for (double v : mu_rest) total_r += v;
  std::vector<double> out(mu_concept.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double rest = mu_rest.empty() ? 0.0 : mu_rest[i] / (total_r + delta);
    out[i] = mu_concept[i] / (total_c + delta) - rest;
  }
  return out;
}

// Timesteps without concept records get no score row.
inline ScoreTable compute_scores(const MeanTable& means, double delta = kDefaultScoreDelta) {
  ScoreTable table(means.concept_id(), delta, means.n(), means.T());
  for (std::uint32_t t = 0; t < means.T(); ++t) {
    if (!means.has(t, Subset::target)) continue;
    std::span<const double> rest;
    if (means.has(t, Subset::rest)) rest = means.row(t, Subset::rest);
    table.set(t, score_row(means.row(t, Subset::target), rest, delta));
  }
  return table;
}

// ---------------------------------------------------------------------------

struct DensityHistogram {
  std::vector<double> bin_edges;  // log10(density)
  std::vector<std::uint64_t> counts;
};

struct DensityProfile {
  std::vector<double> density;  // fraction of records on which each feature fires
  std::vector<std::uint32_t> dead;
  double p99 = 0;  // over features with non-zero density
  std::uint64_t records = 0;
  DensityHistogram log_histogram;

  bool is_candidate(std::uint32_t i) const { return density.at(i) > 0 && density[i] <= p99; }
};

// Linear interpolation between closest ranks.
inline double percentile(std::vector<double> values, double q) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

inline DensityProfile density_from_counts(std::span<const std::uint64_t> fire_counts, std::uint64_t records,
                                          std::size_t bins = 50) {
  DensityProfile p;
  p.records = records;
  p.density.resize(fire_counts.size(), 0.0);
  std::vector<double> live, logs;
  for (std::uint32_t i = 0; i < fire_counts.size(); ++i) {
    p.density[i] = records == 0 ? 0.0 : static_cast<double>(fire_counts[i]) / static_cast<double>(records);
    if (p.density[i] > 0) {
      live.push_back(p.density[i]);
      logs.push_back(std::log10(p.density[i]));
    } else {
      p.dead.push_back(i);
    }
  }
  p.p99 = percentile(live, 99.0);

  double lo = -1.0;
  for (double v : logs) lo = std::min(lo, std::floor(v));
  p.log_histogram.bin_edges.resize(bins + 1);
  p.log_histogram.counts.assign(bins, 0);
  for (std::size_t b = 0; b <= bins; ++b) p.log_histogram.bin_edges[b] = lo + (0.0 - lo) * static_cast<double>(b) / bins;
  for (double v : logs) {
    auto b = static_cast<std::size_t>((v - lo) / (0.0 - lo) * static_cast<double>(bins));
    ++p.log_histogram.counts[std::min(b, bins - 1)];
  }
  return p;
}

template <class S>
DensityProfile compute_density(const SaeModel<S>& model, const DatasetHandle& data) {
  if (data.empty()) throw DataError("density needs a non-empty dataset");
  const auto stats = collect_statistics(model, data);
  return density_from_counts(stats.fire_counts, stats.total_records);
}

struct FeatureSelection {
  std::vector<std::uint32_t> features;  // descending score
  std::vector<double> scores;
  bool truncated = false;  // fewer candidates than requested
};

inline FeatureSelection select_features(const ScoreTable& scores, const DensityProfile& density, std::uint32_t t,
                                        std::size_t tau) {
  FeatureSelection sel;
  if (tau == 0) return sel;
  const auto& row = scores.row(t);
  if (row.size() != density.density.size()) throw DimensionError("score and density widths differ");
  std::vector<std::uint32_t> candidates;
  for (std::uint32_t i = 0; i < row.size(); ++i) {
    if (density.is_candidate(i)) candidates.push_back(i);
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::uint32_t a, std::uint32_t b) { return row[a] > row[b]; });
  if (candidates.size() < tau) sel.truncated = true;
  candidates.resize(std::min(candidates.size(), tau));
  sel.features = candidates;
  for (auto i : candidates) sel.scores.push_back(row[i]);
  return sel;
}

// ---------------------------------------------------------------------------
// Exports

// Round-trip precision for text exports.
inline std::string fmt_double(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

inline void write_scores_csv(std::span<const ScoreTable> tables, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "feature,timestep,concept,value\n";
  for (const auto& table : tables) {
    for (std::uint32_t t = 0; t < table.T(); ++t) {
      if (!table.has(t)) continue;
      const auto& row = table.row(t);
      for (std::uint32_t i = 0; i < row.size(); ++i) {
        out << i << ',' << t << ',' << table.concept_id() << ',' << fmt_double(row[i]) << '\n';
      }
    }
  }
}

// The concept column carries the subset tag: "all", "<c>" or "!<c>".
inline void write_means_csv(std::span<const MeanTable> tables, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "feature,timestep,concept,value\n";
  for (const auto& table : tables) {
    for (std::uint32_t t = 0; t < table.T(); ++t) {
      for (Subset s : {Subset::all, Subset::target, Subset::rest}) {
        if (s == Subset::all && &table != &tables.front()) continue;
        if (!table.has(t, s)) continue;
        const auto& row = table.row(t, s);
        for (std::uint32_t i = 0; i < row.size(); ++i) {
          out << i << ',' << t << ',' << subset_tag(s, table.concept_id()) << ',' << fmt_double(row[i])
              << '\n';
        }
      }
    }
  }
}

// Share of (feature, timestep) scores above half of that timestep's maximum.
inline double high_score_fraction(const ScoreTable& table) {
  std::uint64_t above = 0, total = 0;
  for (std::uint32_t t = 0; t < table.T(); ++t) {
    if (!table.has(t)) continue;
    const auto& row = table.row(t);
    const double mx = *std::max_element(row.begin(), row.end());
    total += row.size();
    if (mx <= 0) continue;
    for (double v : row) above += v > 0.5 * mx ? 1 : 0;
  }
  return total == 0 ? 0.0 : static_cast<double>(above) / static_cast<double>(total);
}

inline nlohmann::json score_summary_json(std::span<const ScoreTable> tables, std::size_t top = 5) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& table : tables) {
    nlohmann::json per_t = nlohmann::json::array();
    for (std::uint32_t t = 0; t < table.T(); ++t) {
      if (!table.has(t)) continue;
      const auto& row = table.row(t);
      std::vector<std::uint32_t> order(row.size());
      for (std::uint32_t i = 0; i < order.size(); ++i) order[i] = i;
      std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return row[a] > row[b]; });
      nlohmann::json best = nlohmann::json::array();
      for (std::size_t j = 0; j < std::min(top, order.size()); ++j) {
        best.push_back({{"feature", order[j]}, {"score", row[order[j]]}});
      }
      per_t.push_back({{"timestep", t}, {"max", row[order.front()]}, {"top", best}});
    }
    out.push_back({{"concept", table.concept_id()},
                   {"delta", table.delta()},
                   {"high_score_fraction", high_score_fraction(table)},
                   {"timesteps", per_t}});
  }
  return out;
}

inline nlohmann::json density_json(const DensityProfile& p) {
  return {{"records", p.records},
          {"num_features", p.density.size()},
          {"dead_count", p.dead.size()},
          {"dead", p.dead},
          {"p99", p.p99},
          {"density", p.density},
          {"log10_histogram", {{"bin_edges", p.log_histogram.bin_edges}, {"counts", p.log_histogram.counts}}}};
}

}  // namespace saeuron
