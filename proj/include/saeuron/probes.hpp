#pragma once

// Read-only probes over trained SAEs: a k-nearest-neighbour classifier on
// pooled feature activations, per-patch activation heatmaps and counts of
// active latents per image and per spatial position.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "saeuron/activation_store.hpp"
#include "saeuron/errors.hpp"
#include "saeuron/feature_scoring.hpp"
#include "saeuron/parallel.hpp"
#include "saeuron/random.hpp"
#include "saeuron/sae.hpp"
#include "saeuron/unlearn.hpp"

namespace saeuron {

// ---------------------------------------------------------------------------
// Images

// Records of one generated image at one timestep. Shards carry no image id,
// so the n-th occurrence of a spatial index within (shard, timestep, concept,
// cond) belongs to image n.
struct ImageGroup {
  std::uint32_t shard = 0;
  std::uint16_t timestep = 0;
  std::uint16_t concept_id = 0;
  bool cond_flag = true;
  std::uint32_t occurrence = 0;
  std::vector<RecordRef> rows;
};

inline std::vector<ImageGroup> group_images(const DatasetHandle& data) {
  using Key = std::tuple<std::uint32_t, std::uint16_t, std::uint16_t, bool, std::uint32_t>;
  std::map<Key, std::uint32_t> seen;
  std::map<Key, std::size_t> index;
  std::vector<ImageGroup> groups;
  for (const auto& ref : data.records()) {
    const auto occ = seen[{ref.shard, ref.timestep, ref.concept_id, ref.cond_flag, ref.spatial_index}]++;
    const Key key{ref.shard, ref.timestep, ref.concept_id, ref.cond_flag, occ};
    auto it = index.find(key);
    if (it == index.end()) {
      it = index.emplace(key, groups.size()).first;
      groups.push_back({ref.shard, ref.timestep, ref.concept_id, ref.cond_flag, occ, {}});
    }
    groups[it->second].rows.push_back(ref);
  }
  return groups;
}

// Unconditioned rows when the dataset has any, otherwise everything.
inline DatasetHandle probe_view(const DatasetHandle& data, std::vector<std::string>* warnings = nullptr) {
  auto uncond = data.filtered(only_cond(false));
  if (!uncond.empty()) return uncond;
  if (warnings) warnings->push_back("no unconditioned rows; probing all rows");
  return data;
}

// Inference-mode codes (or BatchTopK training-mode codes over consecutive
// chunks of `batch_size`) for the records, in order.
template <class S>
std::vector<SparseCode<S>> encode_records(const SaeModel<S>& model, const std::vector<ActivationRecord>& records,
                                          EncodeMode mode = EncodeMode::inference, std::size_t batch_size = 1024) {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  std::vector<SparseCode<S>> out;
  out.reserve(records.size());
  for (std::size_t start = 0; start < records.size(); start += batch_size) {
    const std::size_t end = std::min(records.size(), start + batch_size);
    typename SaeModel<S>::Matrix X(static_cast<Eigen::Index>(end - start), model.d);
    for (std::size_t b = start; b < end; ++b) {
      model.check_input(records[b].values.size());
      for (std::uint32_t j = 0; j < model.d; ++j) {
        X(static_cast<Eigen::Index>(b - start), j) = static_cast<S>(records[b].values[j]);
      }
    }
    for (auto& c : encode_batch(model, X, mode)) out.push_back(std::move(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// k-NN probe

struct LabeledVector {
  std::uint16_t label = 0;
  std::uint16_t timestep = 0;
  std::uint64_t image = 0;  // shared by every timestep of one image
  std::vector<double> features;
};

// One mean-pooled activation vector per image and timestep.
template <class S>
std::vector<LabeledVector> pooled_image_vectors(const SaeModel<S>& model, const DatasetHandle& data) {
  require_dataset_width(model, data);
  const auto groups = group_images(data);
  std::vector<LabeledVector> out(groups.size());
  parallel_for(
      groups.size(),
      [&](std::size_t g) {
        const auto& group = groups[g];
        std::vector<ActivationRecord> records;
        records.reserve(group.rows.size());
        ShardReader reader(data.shard_path(group.shard));
        for (const auto& ref : group.rows) records.push_back(reader.read(ref.row));
        auto& v = out[g];
        v.label = group.concept_id;
        v.timestep = group.timestep;
        v.image = (static_cast<std::uint64_t>(group.shard) << 32) | group.occurrence;
        v.features.assign(model.n, 0.0);
        for (const auto& code : encode_records(model, records)) {
          for (std::size_t j = 0; j < code.size(); ++j) v.features[code.indices[j]] += static_cast<double>(code.values[j]);
        }
        for (auto& f : v.features) f /= static_cast<double>(records.size());
      },
      1);
  return out;
}

// Whole images go to one side; each label contributes round(test_fraction *
// images) test images, chosen by a seeded shuffle.
inline std::pair<std::vector<LabeledVector>, std::vector<LabeledVector>> split_train_test(
    const std::vector<LabeledVector>& vectors, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction > 0 && test_fraction < 1)) throw ConfigError("test fraction must lie in (0, 1)");
  std::map<std::uint16_t, std::vector<std::uint64_t>> images;
  for (const auto& v : vectors) {
    auto& list = images[v.label];
    if (std::find(list.begin(), list.end(), v.image) == list.end()) list.push_back(v.image);
  }
  std::set<std::uint64_t> test_images;
  for (auto& [label, list] : images) {
    std::sort(list.begin(), list.end());
    seeded_shuffle(list, derive_seed(seed, label));
    const auto count = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(list.size())));
    test_images.insert(list.begin(), list.begin() + static_cast<std::ptrdiff_t>(std::min(count, list.size())));
  }
  std::pair<std::vector<LabeledVector>, std::vector<LabeledVector>> out;
  for (const auto& v : vectors) (test_images.count(v.image) ? out.second : out.first).push_back(v);
  return out;
}

struct ProbeReport {
  std::map<std::uint16_t, double> accuracy;  // per timestep
  std::map<std::uint16_t, std::uint64_t> test_counts;
  std::vector<std::uint32_t> subset;
  double baseline = 0;
  std::uint32_t k_neighbors = 5;
  std::uint32_t num_classes = 0;
};

// Majority label of the k nearest training points, nearest first. A tied
// vote goes to the label of the nearest neighbour among the tied labels.
inline std::uint16_t knn_vote(const std::vector<std::pair<double, std::size_t>>& nearest,
                              const std::vector<const LabeledVector*>& train) {
  std::map<std::uint16_t, std::uint32_t> votes;
  std::uint32_t best = 0;
  for (const auto& [dist, idx] : nearest) best = std::max(best, ++votes[train[idx]->label]);
  for (const auto& [dist, idx] : nearest) {
    if (votes[train[idx]->label] == best) return train[idx]->label;
  }
  return 0;
}

// Points are compared within their own timestep, using Euclidean distance
// over the subset dimensions. Distance ties go to the lower training index.
inline ProbeReport knn_probe(const std::vector<LabeledVector>& train, const std::vector<LabeledVector>& test,
                             std::uint32_t k_neighbors, const std::vector<std::uint32_t>& subset) {
  if (subset.empty()) throw ConfigError("k-NN probe needs a nonempty feature subset");
  if (k_neighbors == 0) throw ConfigError("k_neighbors must be at least 1");
  ProbeReport report;
  report.subset = subset;
  report.k_neighbors = k_neighbors;
  std::set<std::uint16_t> classes;
  for (const auto& v : train) classes.insert(v.label);
  report.num_classes = static_cast<std::uint32_t>(classes.size());
  report.baseline = classes.empty() ? 0.0 : 1.0 / static_cast<double>(classes.size());

  std::map<std::uint16_t, std::vector<const LabeledVector*>> train_at, test_at;
  for (const auto& v : train) train_at[v.timestep].push_back(&v);
  for (const auto& v : test) test_at[v.timestep].push_back(&v);

  for (const auto& [t, points] : test_at) {
    const auto& pool = train_at[t];
    if (pool.size() < k_neighbors) {
      throw DataError("timestep " + std::to_string(t) + " has " + std::to_string(pool.size()) +
                      " training points, fewer than k=" + std::to_string(k_neighbors));
    }
    for (const auto* p : points) {
      for (auto f : subset) {
        if (f >= p->features.size()) throw DimensionError("feature subset index out of range");
      }
    }
    std::vector<std::uint8_t> correct(points.size(), 0);
    parallel_for(points.size(), [&](std::size_t q) {
      const auto& x = points[q]->features;
      std::vector<std::pair<double, std::size_t>> dist(pool.size());
      for (std::size_t i = 0; i < pool.size(); ++i) {
        double acc = 0;
        for (auto f : subset) {
          const double diff = x[f] - pool[i]->features[f];
          acc += diff * diff;
        }
        dist[i] = {std::sqrt(acc), i};
      }
      std::partial_sort(dist.begin(), dist.begin() + k_neighbors, dist.end());
      dist.resize(k_neighbors);
      correct[q] = knn_vote(dist, pool) == points[q]->label ? 1 : 0;
    });
    const auto hits = std::accumulate(correct.begin(), correct.end(), std::uint64_t{0});
    report.accuracy[t] = static_cast<double>(hits) / static_cast<double>(points.size());
    report.test_counts[t] = points.size();
  }
  return report;
}

// `size` distinct feature ids drawn uniformly from [0, n), ascending.
inline std::vector<std::uint32_t> random_feature_subset(std::uint32_t n, std::size_t size, std::uint64_t seed) {
  if (size > n) throw ConfigError("random subset larger than the latent count");
  std::vector<std::uint32_t> all(n);
  std::iota(all.begin(), all.end(), 0u);
  seeded_shuffle(all, seed);
  all.resize(size);
  std::sort(all.begin(), all.end());
  return all;
}

// Union over concepts of the top-`per_class` selected features at timestep t.
inline std::vector<std::uint32_t> score_selected_subset(const ScoringArtifacts& artifacts,
                                                        const std::vector<std::uint16_t>& concepts, std::uint16_t t,
                                                        std::uint32_t per_class) {
  std::vector<std::uint32_t> out;
  for (auto c : concepts) {
    const auto scores = compute_scores(means_from_statistics(artifacts.stats, c), artifacts.delta);
    if (!scores.has(t)) continue;
    for (auto f : select_features(scores, artifacts.density, t, per_class).features) {
      if (std::find(out.begin(), out.end(), f) == out.end()) out.push_back(f);
    }
  }
  return out;
}

inline nlohmann::json to_json(const ProbeReport& r) {
  nlohmann::json acc = nlohmann::json::object();
  for (const auto& [t, a] : r.accuracy) acc[std::to_string(t)] = a;
  nlohmann::json counts = nlohmann::json::object();
  for (const auto& [t, c] : r.test_counts) counts[std::to_string(t)] = c;
  return {{"accuracy", acc},  {"test_counts", counts},         {"subset", r.subset},
          {"baseline", r.baseline}, {"k_neighbors", r.k_neighbors}, {"num_classes", r.num_classes}};
}

// Columns: probe, timestep, accuracy, baseline.
inline void write_probe_csv(const std::map<std::string, ProbeReport>& reports, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "probe,timestep,accuracy,baseline\n";
  for (const auto& [name, r] : reports) {
    for (const auto& [t, a] : r.accuracy) out << name << ',' << t << ',' << fmt_double(a) << ',' << fmt_double(r.baseline) << '\n';
  }
}

// ---------------------------------------------------------------------------
// Heatmaps

struct Heatmap {
  std::uint32_t h = 0, w = 0;
  std::uint32_t feature = 0;
  std::uint16_t timestep = 0;
  std::vector<double> values;  // row-major, in [0, 1]
};

template <class S>
Heatmap heatmap(const FeatureMap& map, const SaeModel<S>& model, std::uint32_t feature) {
  if (feature >= model.n) throw DimensionError("feature id " + std::to_string(feature) + " out of range");
  if (map.d != model.d) throw DimensionError("feature map d does not match the model");
  Heatmap hm{map.h, map.w, feature, map.timestep, std::vector<double>(map.rows(), 0.0)};
  for (std::size_t j = 0; j < map.rows(); ++j) {
    const auto x = to_scalar_vector<S>(map.row(j));
    hm.values[j] = static_cast<double>(encode(model, x).value_of(feature));
  }
  const double peak = *std::max_element(hm.values.begin(), hm.values.end());
  if (peak > 0) {
    for (auto& v : hm.values) v /= peak;
  } else {
    std::fill(hm.values.begin(), hm.values.end(), 0.0);
  }
  return hm;
}

inline void write_heatmap_csv(const Heatmap& hm, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (std::uint32_t r = 0; r < hm.h; ++r) {
    for (std::uint32_t c = 0; c < hm.w; ++c) out << (c ? "," : "") << fmt_double(hm.values[r * hm.w + c]);
    out << '\n';
  }
}

// Plain-text 8-bit greymap.
inline void write_heatmap_pgm(const Heatmap& hm, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P2\n" << hm.w << ' ' << hm.h << "\n255\n";
  for (std::uint32_t r = 0; r < hm.h; ++r) {
    for (std::uint32_t c = 0; c < hm.w; ++c) {
      out << (c ? " " : "") << std::lround(std::clamp(hm.values[r * hm.w + c], 0.0, 1.0) * 255.0);
    }
    out << '\n';
  }
}

// ---------------------------------------------------------------------------
// Active-latent statistics

enum class StatsMode { per_sample, batch };
enum class StatsGroup { per_image, per_patch };

inline StatsMode stats_mode_from_string(const std::string& s) {
  if (s == "per-sample") return StatsMode::per_sample;
  if (s == "batch") return StatsMode::batch;
  throw ConfigError("unknown stats mode '" + s + "' (expected per-sample or batch)");
}

inline StatsGroup stats_group_from_string(const std::string& s) {
  if (s == "per-image") return StatsGroup::per_image;
  if (s == "per-patch") return StatsGroup::per_patch;
  throw ConfigError("unknown stats group '" + s + "' (expected per-image or per-patch)");
}

struct DistributionSummary {
  std::uint64_t count = 0;
  double mean = 0, min = 0, max = 0;
  std::vector<double> edges;
  std::vector<std::uint64_t> counts;
};

inline DistributionSummary summarize(const std::vector<double>& values, std::size_t bins = 20) {
  DistributionSummary s;
  s.count = values.size();
  if (values.empty()) return s;
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (s.max == s.min) bins = 1;
  const double width = s.max == s.min ? 1.0 : (s.max - s.min) / static_cast<double>(bins);
  for (std::size_t b = 0; b <= bins; ++b) s.edges.push_back(s.min + width * static_cast<double>(b));
  s.counts.assign(bins, 0);
  for (double v : values) {
    auto b = static_cast<std::size_t>((v - s.min) / width);
    ++s.counts[std::min(b, bins - 1)];
  }
  return s;
}

inline nlohmann::json to_json(const DistributionSummary& s) {
  return {{"count", s.count}, {"mean", s.mean}, {"min", s.min}, {"max", s.max},
          {"histogram", {{"edges", s.edges}, {"counts", s.counts}}}};
}

struct ActiveLatentStats {
  std::vector<double> per_image;  // total active latents per image group
  std::vector<double> per_patch;  // mean active latents at each spatial index
  std::vector<std::uint64_t> patch_records;

  DistributionSummary summary(StatsGroup g) const { return summarize(g == StatsGroup::per_image ? per_image : per_patch); }
};

// Per-sample mode encodes each record with fixed k. Batch mode applies
// BatchTopK selection to consecutive chunks of `batch_size` filtered records.
template <class S>
ActiveLatentStats active_latent_stats(const SaeModel<S>& model, const DatasetHandle& data, StatsMode mode,
                                      std::size_t batch_size = 4096) {
  require_dataset_width(model, data);
  const auto refs = data.records();
  const auto records = data.load_all();
  const auto codes =
      encode_records(model, records, mode == StatsMode::batch ? EncodeMode::training : EncodeMode::inference, batch_size);

  std::map<std::tuple<std::uint32_t, std::uint16_t, std::uint16_t, bool, std::uint32_t>, std::uint32_t> seen;
  std::map<std::tuple<std::uint32_t, std::uint16_t, std::uint16_t, bool, std::uint32_t>, std::size_t> group_of;
  ActiveLatentStats stats;
  const std::uint32_t hw = data.manifest().h * data.manifest().w;
  std::vector<double> patch_sum(hw, 0.0);
  stats.patch_records.assign(hw, 0);
  for (std::size_t r = 0; r < refs.size(); ++r) {
    const auto& ref = refs[r];
    const auto occ = seen[{ref.shard, ref.timestep, ref.concept_id, ref.cond_flag, ref.spatial_index}]++;
    auto [it, inserted] =
        group_of.emplace(std::make_tuple(ref.shard, ref.timestep, ref.concept_id, ref.cond_flag, occ),
                         stats.per_image.size());
    if (inserted) stats.per_image.push_back(0.0);
    const auto active = static_cast<double>(codes[r].size());
    stats.per_image[it->second] += active;
    patch_sum[ref.spatial_index] += active;
    ++stats.patch_records[ref.spatial_index];
  }
  stats.per_patch.assign(hw, 0.0);
  for (std::uint32_t j = 0; j < hw; ++j) {
    if (stats.patch_records[j] > 0) stats.per_patch[j] = patch_sum[j] / static_cast<double>(stats.patch_records[j]);
  }
  return stats;
}

inline nlohmann::json to_json(const ActiveLatentStats& s) {
  return {{"per_image", to_json(s.summary(StatsGroup::per_image))},
          {"per_patch", to_json(s.summary(StatsGroup::per_patch))},
          {"per_patch_means", s.per_patch}};
}

}  // namespace saeuron
