#pragma once

// Planted-dictionary activation datasets with known concept -> atom ground
// truth, plus brute-force reference computations used as test oracles.
//
// Each record is x = sum_a c_a * atom_a + noise with non-negative
// coefficients: `shared_active` atoms drawn from a shared pool, plus the atoms
// owned by the record's concept, each independently present with probability
// `concept_atom_prob`. Concept coefficients are multiplied by a ramp that
// grows linearly from `ramp_start` at t = 0 to 1 at t = T - 1.
//
// Atoms that always fire together cannot be told apart by any sparse code,
// and a linear encoder only separates atoms of low mutual coherence, so the
// defaults keep concept atoms partially independent and spread the planted
// directions apart.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "saeuron/activation_store.hpp"
#include "saeuron/errors.hpp"
#include "saeuron/feature_scoring.hpp"
#include "saeuron/random.hpp"
#include "saeuron/sae.hpp"
#include "saeuron/train_config.hpp"

namespace saeuron {

struct SyntheticConfig {
  std::uint32_t d = 16;
  std::uint32_t num_concepts = 10;
  std::uint32_t atoms_per_concept = 2;
  std::uint32_t shared_atoms = 6;
  std::uint32_t shared_active = 2;
  double coef_mean = 1.0;
  double coef_sigma = 0.3;
  double noise_sigma = 0.02;
  double ramp_start = 0.5;
  double concept_atom_prob = 0.5;
  // Target bound on |cos| between distinct atoms; values >= 1 keep plain
  // Gaussian directions.
  double max_coherence = 0.2;
  std::uint64_t seed = 0;
};

struct SyntheticGroundTruth {
  std::uint32_t d = 0;
  std::vector<std::vector<double>> atoms;                  // unit norm
  std::vector<std::vector<std::uint32_t>> concept_atoms;  // pairwise disjoint
  std::vector<std::uint32_t> shared_atoms;
  std::vector<std::string> concept_names;
  std::uint32_t shared_active = 0;
  double coef_mean = 1.0;
  double coef_sigma = 0.3;
  double noise_sigma = 0.0;
  double ramp_start = 1.0;
  double concept_atom_prob = 1.0;
  std::uint64_t seed = 0;

  std::size_t num_atoms() const { return atoms.size(); }
  std::size_t num_concepts() const { return concept_atoms.size(); }

  double ramp(std::uint32_t t, std::uint32_t T) const {
    if (T <= 1) return 1.0;
    return ramp_start + (1.0 - ramp_start) * static_cast<double>(t) / static_cast<double>(T - 1);
  }

  // Concept owning `atom`, or -1 for shared atoms.
  int owner(std::uint32_t atom) const {
    for (std::size_t c = 0; c < concept_atoms.size(); ++c) {
      if (std::find(concept_atoms[c].begin(), concept_atoms[c].end(), atom) != concept_atoms[c].end()) {
        return static_cast<int>(c);
      }
    }
    return -1;
  }
};

namespace detail {

// Alternating projection between Gram matrices with off-diagonal entries
// clipped to [-mu, mu] and rank-d positive semidefinite matrices. Columns of
// `atoms` (d x m) are updated in place and returned unit-norm.
inline void reduce_coherence(Eigen::MatrixXd& atoms, double mu, int iterations = 500) {
  const auto d = atoms.rows(), m = atoms.cols();
  if (m < 2) return;
  for (int it = 0; it < iterations; ++it) {
    Eigen::MatrixXd G = atoms.transpose() * atoms;
    bool within = true;
    for (Eigen::Index i = 0; i < m; ++i) {
      for (Eigen::Index j = 0; j < m; ++j) {
        if (i == j) {
          G(i, j) = 1.0;
        } else if (std::abs(G(i, j)) > mu) {
          within = false;
          G(i, j) = std::clamp(G(i, j), -mu, mu);
        }
      }
    }
    if (within) break;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(G);
    const Eigen::Index r = std::min(d, m);
    const Eigen::VectorXd root = eig.eigenvalues().tail(r).cwiseMax(0.0).cwiseSqrt();
    Eigen::MatrixXd next = Eigen::MatrixXd::Zero(d, m);
    next.topRows(r) = root.asDiagonal() * eig.eigenvectors().rightCols(r).transpose();
    for (Eigen::Index a = 0; a < m; ++a) {
      const double norm = next.col(a).norm();
      if (norm > 0) next.col(a) /= norm;
    }
    atoms = next;
  }
}

}  // namespace detail

inline SyntheticGroundTruth make_ground_truth(const SyntheticConfig& cfg) {
  if (cfg.d == 0) throw ConfigError("synthetic d must be positive");
  if (cfg.shared_active > cfg.shared_atoms) throw ConfigError("shared_active exceeds the shared pool");
  if (!(cfg.concept_atom_prob > 0 && cfg.concept_atom_prob <= 1)) {
    throw ConfigError("concept_atom_prob must lie in (0, 1]");
  }
  SyntheticGroundTruth gt;
  gt.d = cfg.d;
  gt.shared_active = cfg.shared_active;
  gt.coef_mean = cfg.coef_mean;
  gt.coef_sigma = cfg.coef_sigma;
  gt.noise_sigma = cfg.noise_sigma;
  gt.ramp_start = cfg.ramp_start;
  gt.concept_atom_prob = cfg.concept_atom_prob;
  gt.seed = cfg.seed;

  const std::uint32_t m = cfg.num_concepts * cfg.atoms_per_concept + cfg.shared_atoms;
  std::mt19937_64 rng(derive_seed(cfg.seed, 1));
  std::normal_distribution<double> gauss(0.0, 1.0);
  gt.atoms.resize(m);
  for (auto& atom : gt.atoms) {
    double norm = 0;
    do {
      atom.assign(cfg.d, 0.0);
      norm = 0;
      for (auto& v : atom) {
        v = gauss(rng);
        norm += v * v;
      }
      norm = std::sqrt(norm);
    } while (norm == 0);
    for (auto& v : atom) v /= norm;
  }
  if (cfg.max_coherence < 1.0) {
    if (!(cfg.max_coherence > 0)) throw ConfigError("max_coherence must be positive");
    Eigen::MatrixXd A(cfg.d, m);
    for (std::uint32_t a = 0; a < m; ++a) {
      for (std::uint32_t i = 0; i < cfg.d; ++i) A(i, a) = gt.atoms[a][i];
    }
    detail::reduce_coherence(A, cfg.max_coherence);
    for (std::uint32_t a = 0; a < m; ++a) {
      for (std::uint32_t i = 0; i < cfg.d; ++i) gt.atoms[a][i] = A(i, a);
    }
  }
  std::uint32_t next = 0;
  gt.concept_atoms.resize(cfg.num_concepts);
  for (std::uint32_t c = 0; c < cfg.num_concepts; ++c) {
    for (std::uint32_t a = 0; a < cfg.atoms_per_concept; ++a) gt.concept_atoms[c].push_back(next++);
    gt.concept_names.push_back("concept_" + std::to_string(c));
  }
  for (std::uint32_t a = 0; a < cfg.shared_atoms; ++a) gt.shared_atoms.push_back(next++);
  return gt;
}

// Draws activation vectors from a ground truth. One sampler per shard keeps
// generation deterministic.
class SyntheticSampler {
 public:
  SyntheticSampler(const SyntheticGroundTruth& gt, std::uint64_t seed) : gt_(gt), rng_(seed) {}

  std::vector<double> sample(std::uint32_t concept_idx, std::uint32_t t, std::uint32_t T) {
    std::vector<double> x(gt_.d, 0.0);
    std::vector<std::uint32_t> pool = gt_.shared_atoms;
    for (std::uint32_t j = 0; j < gt_.shared_active; ++j) {
      std::uniform_int_distribution<std::size_t> pick(j, pool.size() - 1);
      std::swap(pool[j], pool[pick(rng_)]);
      add_atom(x, pool[j], coefficient());
    }
    if (concept_idx < gt_.concept_atoms.size()) {
      const double ramp = gt_.ramp(t, T);
      for (auto a : gt_.concept_atoms[concept_idx]) {
        if (gt_.concept_atom_prob < 1 && !std::bernoulli_distribution(gt_.concept_atom_prob)(rng_)) continue;
        add_atom(x, a, ramp * coefficient());
      }
    }
    if (gt_.noise_sigma > 0) {
      std::normal_distribution<double> noise(0.0, gt_.noise_sigma);
      for (auto& v : x) v += noise(rng_);
    }
    return x;
  }

 private:
  double coefficient() {
    if (gt_.coef_sigma <= 0) return std::max(0.0, gt_.coef_mean);
    std::normal_distribution<double> coef(gt_.coef_mean, gt_.coef_sigma);
    return std::max(0.0, coef(rng_));
  }

  void add_atom(std::vector<double>& x, std::uint32_t atom, double c) {
    for (std::uint32_t i = 0; i < gt_.d; ++i) x[i] += c * gt_.atoms[atom][i];
  }

  const SyntheticGroundTruth& gt_;
  std::mt19937_64 rng_;
};

// Training settings for planted datasets at desk scale: n = 4d, k = 4 and
// 2000 steps of 256 records.
inline TrainConfig desk_scale_train_config() {
  TrainConfig cfg;
  cfg.variant = Variant::topk;
  cfg.expansion_factor = 4;
  cfg.k = 4;
  cfg.lr = 5e-3;
  cfg.batch_size = 256;
  cfg.epochs = 40;
  cfg.max_steps = 2000;
  cfg.dead_threshold = 10'000;
  return cfg;
}

struct SyntheticLayout {
  std::uint32_t images_per_concept = 20;
  std::uint32_t h = 4, w = 4, T = 4;
  CondPolicy cond_policy = CondPolicy::conditioned_only;
  std::string block_name = "synthetic";
};

struct GeneratedDataset {
  std::filesystem::path manifest_path;
  Manifest manifest;
  std::vector<std::string> warnings;
};

inline nlohmann::json to_json(const SyntheticGroundTruth& gt) {
  return {{"d", gt.d},
          {"atoms", gt.atoms},
          {"concept_atoms", gt.concept_atoms},
          {"shared_atoms", gt.shared_atoms},
          {"concept_names", gt.concept_names},
          {"shared_active", gt.shared_active},
          {"coefficients",
           {{"law", "max(0, normal)"}, {"mean", gt.coef_mean}, {"sigma", gt.coef_sigma}, {"ramp_start", gt.ramp_start},
            {"concept_atom_prob", gt.concept_atom_prob}}},
          {"noise_sigma", gt.noise_sigma},
          {"seed", gt.seed}};
}

inline SyntheticGroundTruth ground_truth_from_json(const nlohmann::json& j) {
  try {
    SyntheticGroundTruth gt;
    gt.d = j.at("d").get<std::uint32_t>();
    gt.atoms = j.at("atoms").get<std::vector<std::vector<double>>>();
    gt.concept_atoms = j.at("concept_atoms").get<std::vector<std::vector<std::uint32_t>>>();
    gt.shared_atoms = j.at("shared_atoms").get<std::vector<std::uint32_t>>();
    gt.concept_names = j.at("concept_names").get<std::vector<std::string>>();
    gt.shared_active = j.at("shared_active").get<std::uint32_t>();
    const auto& coef = j.at("coefficients");
    gt.coef_mean = coef.at("mean").get<double>();
    gt.coef_sigma = coef.at("sigma").get<double>();
    gt.ramp_start = coef.at("ramp_start").get<double>();
    gt.concept_atom_prob = coef.value("concept_atom_prob", 1.0);
    gt.noise_sigma = j.at("noise_sigma").get<double>();
    gt.seed = j.at("seed").get<std::uint64_t>();
    return gt;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed ground truth: ") + e.what());
  }
}

// Writes one shard per concept (images in order, each image's timesteps in
// order, each map's rows in spatial order), the manifest and ground_truth.json.
inline GeneratedDataset generate(const SyntheticGroundTruth& gt, const SyntheticLayout& layout,
                                 const std::filesystem::path& out_dir) {
  GeneratedDataset result;
  if (gt.num_atoms() > gt.d) {
    result.warnings.push_back("planted dictionary has " + std::to_string(gt.num_atoms()) + " atoms in d=" +
                              std::to_string(gt.d) + "; recovery is not guaranteed to be identifiable");
  }
  std::filesystem::create_directories(out_dir);
  Manifest& m = result.manifest;
  m.block_name = layout.block_name;
  m.d = gt.d;
  m.h = layout.h;
  m.w = layout.w;
  m.T = layout.T;
  m.cond_policy = layout.cond_policy;
  for (std::size_t c = 0; c < gt.num_concepts(); ++c) m.concepts[static_cast<std::uint16_t>(c)] = gt.concept_names[c];

  const ShardHeader header = m.shard_header();
  const std::uint32_t hw = layout.h * layout.w;
  for (std::uint32_t c = 0; c < gt.num_concepts(); ++c) {
    SyntheticSampler sampler(gt, derive_seed(gt.seed, 1000 + c));
    std::vector<ActivationRecord> records;
    records.reserve(static_cast<std::size_t>(layout.images_per_concept) * layout.T * hw);
    for (std::uint32_t img = 0; img < layout.images_per_concept; ++img) {
      for (std::uint32_t t = 0; t < layout.T; ++t) {
        for (bool cond : {true, false}) {
          if (!cond && layout.cond_policy == CondPolicy::conditioned_only) continue;
          for (std::uint32_t j = 0; j < hw; ++j) {
            ActivationRecord r;
            r.timestep = static_cast<std::uint16_t>(t);
            r.concept_id = static_cast<std::uint16_t>(c);
            r.spatial_index = j;
            r.cond_flag = cond;
            const auto x = sampler.sample(c, t, layout.T);
            r.values.assign(x.begin(), x.end());
            records.push_back(std::move(r));
          }
        }
      }
    }
    const std::string name = "concept_" + std::to_string(c) + ".shard";
    write_shard(records, header, out_dir / name);
    m.shards.push_back({name, records.size()});
  }
  result.manifest_path = out_dir / "manifest.json";
  write_manifest(m, result.manifest_path);
  std::ofstream gt_out(out_dir / "ground_truth.json", std::ios::trunc);
  if (!gt_out) throw IoError("cannot write ground_truth.json");
  gt_out << to_json(gt).dump(2) << '\n';
  return result;
}

// ---------------------------------------------------------------------------
// Dictionary matching

struct AtomMatch {
  std::uint32_t feature = 0;
  std::uint32_t atom = 0;
  double cosine = 0;  // absolute
};

struct ConceptPrecision {
  std::uint64_t selected = 0;
  std::uint64_t correct = 0;
  double precision() const { return selected == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(selected); }
};

struct MatchReport {
  std::vector<AtomMatch> pairs;
  std::vector<int> atom_of_feature;  // -1 when unmatched
  double atom_recall = 0;            // matched atoms / planted atoms
  std::map<std::uint16_t, ConceptPrecision> per_concept;
  ConceptPrecision overall;
};

// Greedy one-to-one matching of decoder columns to atoms by absolute cosine
// similarity. `selections` lists, per concept, selected features (repeats
// allowed, e.g. one entry per timestep); each counts as correct when its
// matched atom belongs to that concept.
template <class S>
MatchReport match_features(const SaeModel<S>& model, const SyntheticGroundTruth& gt,
                           const std::map<std::uint16_t, std::vector<std::uint32_t>>& selections = {},
                           double min_cosine = 0.9) {
  if (model.d != gt.d) throw DimensionError("model and ground truth disagree on d");
  std::vector<AtomMatch> candidates;
  for (std::uint32_t f = 0; f < model.n; ++f) {
    const double fnorm = static_cast<double>(model.w_dec.col(f).norm());
    if (fnorm == 0) continue;
    for (std::uint32_t a = 0; a < gt.num_atoms(); ++a) {
      double dot = 0;
      for (std::uint32_t i = 0; i < gt.d; ++i) dot += static_cast<double>(model.w_dec(i, f)) * gt.atoms[a][i];
      const double cos = std::abs(dot) / fnorm;
      if (cos >= min_cosine) candidates.push_back({f, a, cos});
    }
  }
  std::stable_sort(candidates.begin(), candidates.end(),
                   [](const AtomMatch& x, const AtomMatch& y) { return x.cosine > y.cosine; });

  MatchReport report;
  report.atom_of_feature.assign(model.n, -1);
  std::vector<bool> atom_used(gt.num_atoms(), false);
  for (const auto& c : candidates) {
    if (report.atom_of_feature[c.feature] >= 0 || atom_used[c.atom]) continue;
    report.atom_of_feature[c.feature] = static_cast<int>(c.atom);
    atom_used[c.atom] = true;
    report.pairs.push_back(c);
  }
  report.atom_recall =
      gt.num_atoms() == 0 ? 0.0 : static_cast<double>(report.pairs.size()) / static_cast<double>(gt.num_atoms());

  for (const auto& [concept_id, features] : selections) {
    auto& pc = report.per_concept[concept_id];
    for (auto f : features) {
      ++pc.selected;
      if (f < model.n && report.atom_of_feature[f] >= 0 &&
          gt.owner(static_cast<std::uint32_t>(report.atom_of_feature[f])) == static_cast<int>(concept_id)) {
        ++pc.correct;
      }
    }
    report.overall.selected += pc.selected;
    report.overall.correct += pc.correct;
  }
  return report;
}

inline nlohmann::json to_json(const MatchReport& r) {
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : r.pairs) pairs.push_back({{"feature", p.feature}, {"atom", p.atom}, {"cosine", p.cosine}});
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [c, pc] : r.per_concept) {
    per[std::to_string(c)] = {{"selected", pc.selected}, {"correct", pc.correct}, {"precision", pc.precision()}};
  }
  return {{"pairs", pairs},
          {"atom_recall", r.atom_recall},
          {"per_concept", per},
          {"precision", r.overall.precision()},
          {"selected", r.overall.selected}};
}

// ---------------------------------------------------------------------------
// Brute-force scoring oracle: dense loops, a full sort per record and direct
// evaluation of the score formula. Shares no code with feature_scoring.

namespace oracle {

template <class S>
std::vector<double> dense_activations(const SaeModel<S>& model, const std::vector<float>& x) {
  const double scale = static_cast<double>(model.input_scale);
  std::vector<double> pre(model.n, 0.0);
  for (std::uint32_t i = 0; i < model.n; ++i) {
    double acc = 0;
    for (std::uint32_t j = 0; j < model.d; ++j) {
      acc += static_cast<double>(model.w_enc(i, j)) * (static_cast<double>(x[j]) * scale - static_cast<double>(model.b_pre(j)));
    }
    if (model.variant == Variant::relu) acc += static_cast<double>(model.b_enc(i));
    pre[i] = acc;
  }
  std::vector<double> out(model.n, 0.0);
  if (model.variant == Variant::relu) {
    for (std::uint32_t i = 0; i < model.n; ++i) out[i] = std::max(0.0, pre[i]);
    return out;
  }
  std::vector<std::uint32_t> order(model.n);
  for (std::uint32_t i = 0; i < model.n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
    return pre[a] != pre[b] ? pre[a] > pre[b] : a < b;
  });
  for (std::uint32_t r = 0; r < std::min<std::uint32_t>(model.k, model.n); ++r) {
    if (pre[order[r]] > 0) out[order[r]] = pre[order[r]];
  }
  return out;
}

}  // namespace oracle

// Scores for one (timestep, concept) computed by brute force. An empty
// non-concept subset contributes zero through delta.
template <class S>
ScoreTable brute_force_score(const SaeModel<S>& model, const DatasetHandle& data, std::uint16_t t,
                             std::uint16_t concept_id, double delta = kDefaultScoreDelta) {
  std::vector<double> sum_c(model.n, 0.0), sum_r(model.n, 0.0);
  std::uint64_t count_c = 0, count_r = 0;
  for (const auto& ref : data.records()) {
    if (ref.timestep != t) continue;
    const auto rec = data.load(ref);
    const auto act = oracle::dense_activations(model, rec.values);
    auto& sum = ref.concept_id == concept_id ? sum_c : sum_r;
    (ref.concept_id == concept_id ? count_c : count_r) += 1;
    for (std::uint32_t i = 0; i < model.n; ++i) sum[i] += act[i];
  }
  ScoreTable table(concept_id, delta, model.n, data.manifest().T);
  if (count_c == 0) return table;
  double tot_c = 0, tot_r = 0;
  for (std::uint32_t i = 0; i < model.n; ++i) {
    sum_c[i] /= static_cast<double>(count_c);
    if (count_r > 0) sum_r[i] /= static_cast<double>(count_r);
    tot_c += sum_c[i];
    tot_r += sum_r[i];
  }
  std::vector<double> row(model.n);
  for (std::uint32_t i = 0; i < model.n; ++i) row[i] = sum_c[i] / (tot_c + delta) - sum_r[i] / (tot_r + delta);
  table.set(t, std::move(row));
  return table;
}

}  // namespace saeuron
