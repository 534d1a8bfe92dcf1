#pragma once

// Concept ablation and steering on feature maps at one denoising timestep.
//
// Ablation encodes every row x, rescales each planned feature i whose
// activation exceeds its threshold (f_i > mu(i,t,D)) to gamma * mu(i,t,D_c) * f_i,
// and returns decode(z_hat) + (x - decode(z)). The SAE reconstruction error
// passes through untouched, so rows without a modified feature come back
// bit-identical. Steering adds gamma+ * mu(i,t,D_c) * W_dec[:, i] to every row.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "saeuron/activation_store.hpp"
#include "saeuron/errors.hpp"
#include "saeuron/feature_scoring.hpp"
#include "saeuron/parallel.hpp"
#include "saeuron/sae.hpp"

namespace saeuron {

struct FeatureMap {
  std::uint32_t h = 0, w = 0, d = 0;
  std::uint16_t timestep = 0;
  std::vector<float> data;  // (h*w) x d, row-major
  std::vector<bool> cond;   // per row

  std::size_t rows() const { return static_cast<std::size_t>(h) * w; }
  std::span<float> row(std::size_t j) { return std::span<float>(data).subspan(j * d, d); }
  std::span<const float> row(std::size_t j) const { return std::span<const float>(data).subspan(j * d, d); }

  void validate() const {
    if (data.size() != rows() * d || cond.size() != rows()) {
      throw DimensionError("feature map storage does not match h*w*d");
    }
    for (float v : data) {
      if (!std::isfinite(v)) throw FormatError("feature map contains a non-finite value");
    }
  }

  // Records must cover every spatial index exactly once at a single timestep.
  static FeatureMap from_records(std::span<const ActivationRecord> records, std::uint32_t h, std::uint32_t w) {
    FeatureMap map;
    map.h = h;
    map.w = w;
    if (records.size() != map.rows()) throw DimensionError("feature map needs exactly h*w records");
    map.d = static_cast<std::uint32_t>(records.front().values.size());
    map.timestep = records.front().timestep;
    map.data.assign(map.rows() * map.d, 0.0f);
    map.cond.assign(map.rows(), true);
    std::vector<bool> seen(map.rows(), false);
    for (const auto& r : records) {
      if (r.timestep != map.timestep) throw DataError("feature map records span several timesteps");
      if (r.values.size() != map.d) throw DimensionError("feature map records disagree on d");
      if (r.spatial_index >= map.rows() || seen[r.spatial_index]) {
        throw DataError("feature map spatial indices must be a permutation of [0, h*w)");
      }
      seen[r.spatial_index] = true;
      std::copy(r.values.begin(), r.values.end(), map.row(r.spatial_index).begin());
      map.cond[r.spatial_index] = r.cond_flag;
    }
    return map;
  }

  std::vector<ActivationRecord> to_records(std::uint16_t concept_id) const {
    std::vector<ActivationRecord> out(rows());
    for (std::size_t j = 0; j < rows(); ++j) {
      auto& r = out[j];
      r.timestep = timestep;
      r.concept_id = concept_id;
      r.spatial_index = static_cast<std::uint32_t>(j);
      r.cond_flag = cond[j];
      r.values.assign(row(j).begin(), row(j).end());
    }
    return out;
  }
};

struct PlannedFeature {
  std::uint32_t id = 0;
  double theta = 0;  // mu(i, t, D); activation must exceed it to be ablated
  double scale = 0;  // mu(i, t, D_c)

  friend bool operator==(const PlannedFeature&, const PlannedFeature&) = default;
};

struct UnlearnPlan {
  std::uint16_t concept_id = 0;
  double gamma = -1.0;
  std::map<std::uint16_t, std::vector<PlannedFeature>> per_timestep;

  const std::vector<PlannedFeature>& at(std::uint16_t t) const {
    static const std::vector<PlannedFeature> kEmpty;
    auto it = per_timestep.find(t);
    return it == per_timestep.end() ? kEmpty : it->second;
  }

  void validate() const {
    if (!(gamma < 0)) throw ConfigError("ablation multiplier gamma must be negative");
  }

  friend bool operator==(const UnlearnPlan&, const UnlearnPlan&) = default;
};

struct SteerFeature {
  std::uint32_t id = 0;
  double scale = 0;  // mu(i, t, D_c)

  friend bool operator==(const SteerFeature&, const SteerFeature&) = default;
};

struct SteerPlan {
  std::uint16_t concept_id = 0;
  double gamma_plus = 1.0;
  std::map<std::uint16_t, std::vector<SteerFeature>> per_timestep;

  const std::vector<SteerFeature>& at(std::uint16_t t) const {
    static const std::vector<SteerFeature> kEmpty;
    auto it = per_timestep.find(t);
    return it == per_timestep.end() ? kEmpty : it->second;
  }

  friend bool operator==(const SteerPlan&, const SteerPlan&) = default;
};

// ---------------------------------------------------------------------------
// Preparation

// Everything selection needs, computed in one encoding pass over the
// validation data and reusable across concepts and timesteps.
struct ScoringArtifacts {
  ActivationStatistics stats;
  DensityProfile density;
  double delta = kDefaultScoreDelta;
};

template <class S>
ScoringArtifacts compute_scoring_artifacts(const SaeModel<S>& model, const DatasetHandle& data,
                                           double delta = kDefaultScoreDelta) {
  if (data.empty()) throw DataError("scoring needs a non-empty dataset");
  ScoringArtifacts a;
  a.stats = collect_statistics(model, data);
  a.density = density_from_counts(a.stats.fire_counts, a.stats.total_records);
  a.delta = delta;
  return a;
}

namespace detail {

struct PreparedTimestep {
  FeatureSelection selection;
  const MeanTable* means;
};

inline PreparedTimestep select_for_timestep(const ScoringArtifacts& a, const MeanTable& means,
                                            const ScoreTable& scores, std::uint16_t t, std::size_t tau) {
  if (!means.has(t, Subset::target)) {
    throw DataError("concept " + std::to_string(means.concept_id()) + " has no records at timestep " +
                    std::to_string(t));
  }
  if (!means.has(t, Subset::rest)) {
    throw DataError("no non-concept records at timestep " + std::to_string(t) + "; scores would be meaningless");
  }
  return {select_features(scores, a.density, t, tau), &means};
}

inline std::vector<std::uint16_t> all_timesteps(std::uint32_t T) {
  std::vector<std::uint16_t> ts(T);
  for (std::uint32_t t = 0; t < T; ++t) ts[t] = static_cast<std::uint16_t>(t);
  return ts;
}

}  // namespace detail

inline UnlearnPlan prepare_from_artifacts(const ScoringArtifacts& a, std::uint16_t concept_id,
                                          std::span<const std::uint16_t> timesteps, std::size_t tau, double gamma) {
  UnlearnPlan plan;
  plan.concept_id = concept_id;
  plan.gamma = gamma;
  plan.validate();
  const MeanTable means = means_from_statistics(a.stats, concept_id);
  const ScoreTable scores = compute_scores(means, a.delta);
  for (auto t : timesteps) {
    auto prepared = detail::select_for_timestep(a, means, scores, t, tau);
    auto& entry = plan.per_timestep[t];
    for (auto i : prepared.selection.features) {
      entry.push_back({i, means.mean(i, t, Subset::all), means.mean(i, t, Subset::target)});
    }
  }
  return plan;
}

inline SteerPlan prepare_steer_from_artifacts(const ScoringArtifacts& a, std::uint16_t concept_id,
                                              std::span<const std::uint16_t> timesteps, std::size_t tau,
                                              double gamma_plus) {
  if (!(gamma_plus > 0)) throw ConfigError("steering multiplier must be positive");
  SteerPlan plan;
  plan.concept_id = concept_id;
  plan.gamma_plus = gamma_plus;
  const MeanTable means = means_from_statistics(a.stats, concept_id);
  const ScoreTable scores = compute_scores(means, a.delta);
  for (auto t : timesteps) {
    auto prepared = detail::select_for_timestep(a, means, scores, t, tau);
    auto& entry = plan.per_timestep[t];
    for (auto i : prepared.selection.features) entry.push_back({i, means.mean(i, t, Subset::target)});
  }
  return plan;
}

inline void require_concept_present(const DatasetHandle& data, std::uint16_t concept_id) {
  for (const auto& [cell, count] : data.cell_counts()) {
    if (cell.first == concept_id && count > 0) return;
  }
  throw DataError("concept " + std::to_string(concept_id) + " has no records in the dataset");
}

// Plan for a single timestep.
template <class S>
UnlearnPlan prepare(const SaeModel<S>& model, const DatasetHandle& data, std::uint16_t concept_id, std::uint16_t t,
                    std::size_t tau, double gamma, double delta = kDefaultScoreDelta) {
  require_concept_present(data, concept_id);
  const auto artifacts = compute_scoring_artifacts(model, data, delta);
  const std::uint16_t ts[] = {t};
  return prepare_from_artifacts(artifacts, concept_id, ts, tau, gamma);
}

// Plan covering every timestep of the dataset.
template <class S>
UnlearnPlan prepare_all(const SaeModel<S>& model, const DatasetHandle& data, std::uint16_t concept_id,
                        std::size_t tau, double gamma, double delta = kDefaultScoreDelta) {
  require_concept_present(data, concept_id);
  const auto artifacts = compute_scoring_artifacts(model, data, delta);
  const auto ts = detail::all_timesteps(data.manifest().T);
  return prepare_from_artifacts(artifacts, concept_id, ts, tau, gamma);
}

// ---------------------------------------------------------------------------
// Interventions

template <class S>
void check_plan_features(const SaeModel<S>& model, const std::vector<PlannedFeature>& features) {
  for (const auto& f : features) {
    if (f.id >= model.n) throw DimensionError("plan feature " + std::to_string(f.id) + " outside model width");
  }
}

// Ablates one activation vector. Returns true when some feature was modified;
// otherwise `out` is an exact copy of `x`.
template <class S>
bool ablate_row(const SaeModel<S>& model, std::span<const float> x, const std::vector<PlannedFeature>& features,
                double gamma, std::span<float> out) {
  std::copy(x.begin(), x.end(), out.begin());
  if (features.empty()) return false;
  const auto xs = to_scalar_vector<S>(x);
  const SparseCode<S> z = encode(model, std::span<const S>(xs));

  // decode(z_hat) + (x - decode(z)) == x + W_dec (z_hat - z) / input_scale
  typename SaeModel<S>::Vector shift = SaeModel<S>::Vector::Zero(model.d);
  bool modified = false;
  for (const auto& f : features) {
    const double act = static_cast<double>(z.value_of(f.id));
    if (act > f.theta) {
      const double replaced = gamma * f.scale * act;
      shift += static_cast<S>(replaced - act) * model.w_dec.col(f.id);
      modified = true;
    }
  }
  if (!modified) return false;
  shift /= model.input_scale;
  for (std::uint32_t j = 0; j < model.d; ++j) out[j] = static_cast<float>(static_cast<S>(x[j]) + shift(j));
  return true;
}

template <class S>
FeatureMap ablate(const FeatureMap& map, const SaeModel<S>& model, const UnlearnPlan& plan) {
  map.validate();
  plan.validate();
  if (map.d != model.d) throw DimensionError("feature map d does not match the model");
  const auto& features = plan.at(map.timestep);
  check_plan_features(model, features);
  FeatureMap out = map;
  parallel_for(map.rows(), [&](std::size_t j) { ablate_row(model, map.row(j), features, plan.gamma, out.row(j)); });
  return out;
}

template <class S>
typename SaeModel<S>::Vector steering_offset(const SaeModel<S>& model, const std::vector<SteerFeature>& features,
                                             double gamma_plus) {
  typename SaeModel<S>::Vector offset = SaeModel<S>::Vector::Zero(model.d);
  for (const auto& f : features) {
    if (f.id >= model.n) throw DimensionError("plan feature " + std::to_string(f.id) + " outside model width");
    offset += static_cast<S>(gamma_plus * f.scale) * model.w_dec.col(f.id);
  }
  return offset / model.input_scale;
}

template <class S>
FeatureMap steer(const FeatureMap& map, const SaeModel<S>& model, const SteerPlan& plan) {
  map.validate();
  if (map.d != model.d) throw DimensionError("feature map d does not match the model");
  if (plan.gamma_plus < 0) throw ConfigError("steering multiplier must be non-negative");
  const auto offset = steering_offset(model, plan.at(map.timestep), plan.gamma_plus);
  FeatureMap out = map;
  if (plan.gamma_plus == 0 || plan.at(map.timestep).empty()) return out;
  for (std::size_t j = 0; j < out.rows(); ++j) {
    auto r = out.row(j);
    for (std::uint32_t c = 0; c < out.d; ++c) r[c] = static_cast<float>(static_cast<S>(r[c]) + offset(c));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Plan serialisation

inline nlohmann::json to_json(const UnlearnPlan& plan) {
  nlohmann::json per_t = nlohmann::json::array();
  for (const auto& [t, features] : plan.per_timestep) {
    nlohmann::json fs = nlohmann::json::array();
    for (const auto& f : features) fs.push_back({{"id", f.id}, {"theta", f.theta}, {"scale", f.scale}});
    per_t.push_back({{"t", t}, {"features", fs}});
  }
  return {{"concept", plan.concept_id}, {"gamma", plan.gamma}, {"per_timestep", per_t}};
}

inline UnlearnPlan unlearn_plan_from_json(const nlohmann::json& j) {
  try {
    UnlearnPlan plan;
    plan.concept_id = j.at("concept").get<std::uint16_t>();
    plan.gamma = j.at("gamma").get<double>();
    for (const auto& entry : j.at("per_timestep")) {
      auto& fs = plan.per_timestep[entry.at("t").get<std::uint16_t>()];
      for (const auto& f : entry.at("features")) {
        fs.push_back({f.at("id").get<std::uint32_t>(), f.at("theta").get<double>(), f.at("scale").get<double>()});
      }
    }
    plan.validate();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed unlearn plan: ") + e.what());
  }
}

inline nlohmann::json to_json(const SteerPlan& plan) {
  nlohmann::json per_t = nlohmann::json::array();
  for (const auto& [t, features] : plan.per_timestep) {
    nlohmann::json fs = nlohmann::json::array();
    for (const auto& f : features) fs.push_back({{"id", f.id}, {"scale", f.scale}});
    per_t.push_back({{"t", t}, {"features", fs}});
  }
  return {{"concept", plan.concept_id}, {"gamma", plan.gamma_plus}, {"per_timestep", per_t}};
}

inline SteerPlan steer_plan_from_json(const nlohmann::json& j) {
  try {
    SteerPlan plan;
    plan.concept_id = j.at("concept").get<std::uint16_t>();
    plan.gamma_plus = j.at("gamma").get<double>();
    for (const auto& entry : j.at("per_timestep")) {
      auto& fs = plan.per_timestep[entry.at("t").get<std::uint16_t>()];
      for (const auto& f : entry.at("features")) fs.push_back({f.at("id").get<std::uint32_t>(), f.at("scale").get<double>()});
    }
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed steering plan: ") + e.what());
  }
}

}  // namespace saeuron
