#include <fstream>
#include <random>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace saeuron;
using testutil::TempDir;

namespace {

std::string file_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SyntheticConfig single_atom_config() {
  SyntheticConfig c;
  c.d = 4;
  c.num_concepts = 1;
  c.atoms_per_concept = 1;
  c.shared_atoms = 0;
  c.shared_active = 0;
  c.coef_mean = 2.0;
  c.coef_sigma = 0.0;
  c.noise_sigma = 0.0;
  c.ramp_start = 1.0;
  c.concept_atom_prob = 1.0;
  c.max_coherence = 1.0;
  return c;
}

}  // namespace

TEST(Synthetic, NoiselessSingleAtomIsExact) {
  auto gt = make_ground_truth(single_atom_config());
  SyntheticSampler s(gt, 1);
  for (std::uint32_t t = 0; t < 3; ++t) {
    auto x = s.sample(0, t, 3);
    for (std::uint32_t i = 0; i < 4; ++i) EXPECT_EQ(x[i], 2.0 * gt.atoms[0][i]);
  }
}

TEST(Synthetic, RampScalesConceptAtoms) {
  auto cfg = single_atom_config();
  cfg.ramp_start = 0.25;
  auto gt = make_ground_truth(cfg);
  SyntheticSampler s(gt, 1);
  auto first = s.sample(0, 0, 4);
  auto last = s.sample(0, 3, 4);
  for (std::uint32_t i = 0; i < 4; ++i) {
    EXPECT_NEAR(first[i], 0.5 * gt.atoms[0][i], 1e-15);
    EXPECT_NEAR(last[i], 2.0 * gt.atoms[0][i], 1e-15);
  }
}

TEST(Synthetic, GroundTruthStructure) {
  SyntheticConfig cfg;
  auto gt = make_ground_truth(cfg);
  EXPECT_EQ(gt.num_atoms(), 26u);
  std::set<std::uint32_t> used;
  for (const auto& atoms : gt.concept_atoms) {
    for (auto a : atoms) EXPECT_TRUE(used.insert(a).second);
  }
  for (auto a : gt.shared_atoms) EXPECT_TRUE(used.insert(a).second);
  EXPECT_EQ(used.size(), gt.num_atoms());
  for (const auto& atom : gt.atoms) {
    double n = 0;
    for (double v : atom) n += v * v;
    EXPECT_NEAR(std::sqrt(n), 1.0, 1e-9);
  }
  EXPECT_EQ(gt.owner(gt.concept_atoms[3][1]), 3);
  EXPECT_EQ(gt.owner(gt.shared_atoms[0]), -1);
}

TEST(Synthetic, CoherenceIsReduced) {
  auto coherence = [](const SyntheticGroundTruth& gt) {
    double worst = 0;
    for (std::size_t a = 0; a < gt.num_atoms(); ++a) {
      for (std::size_t b = a + 1; b < gt.num_atoms(); ++b) {
        double dot = 0;
        for (std::uint32_t i = 0; i < gt.d; ++i) dot += gt.atoms[a][i] * gt.atoms[b][i];
        worst = std::max(worst, std::abs(dot));
      }
    }
    return worst;
  };
  SyntheticConfig cfg;
  cfg.max_coherence = 1.0;
  const double plain = coherence(make_ground_truth(cfg));
  cfg.max_coherence = 0.2;
  const double reduced = coherence(make_ground_truth(cfg));
  EXPECT_LT(reduced, plain);
  EXPECT_LT(reduced, 0.35);
}

TEST(Synthetic, InvalidConfigs) {
  SyntheticConfig cfg;
  cfg.shared_active = 7;
  EXPECT_THROW(make_ground_truth(cfg), ConfigError);
  cfg = SyntheticConfig{};
  cfg.concept_atom_prob = 0;
  EXPECT_THROW(make_ground_truth(cfg), ConfigError);
  cfg = SyntheticConfig{};
  cfg.max_coherence = 0;
  EXPECT_THROW(make_ground_truth(cfg), ConfigError);
}

TEST(Synthetic, GenerationIsSeededAndWarns) {
  TempDir a, b, c;
  SyntheticConfig cfg;
  cfg.seed = 4;
  auto gt = make_ground_truth(cfg);
  SyntheticLayout layout;
  layout.images_per_concept = 2;
  auto ra = generate(gt, layout, a.path());
  generate(gt, layout, b.path());
  cfg.seed = 5;
  generate(make_ground_truth(cfg), layout, c.path());
  for (const auto& s : ra.manifest.shards) {
    EXPECT_EQ(file_bytes(a / s.path), file_bytes(b / s.path));
    EXPECT_NE(file_bytes(a / s.path), file_bytes(c / s.path));
  }
  ASSERT_EQ(ra.warnings.size(), 1u);
  auto ds = open_dataset(ra.manifest_path);
  EXPECT_EQ(ds.size(), 10u * 2 * 4 * 16);

  auto small = make_ground_truth(single_atom_config());
  EXPECT_TRUE(generate(small, layout, c / "small").warnings.empty());
}

TEST(Synthetic, GroundTruthJsonRoundTrip) {
  SyntheticConfig cfg;
  auto gt = make_ground_truth(cfg);
  auto back = ground_truth_from_json(to_json(gt));
  EXPECT_EQ(back.atoms, gt.atoms);
  EXPECT_EQ(back.concept_atoms, gt.concept_atoms);
  EXPECT_EQ(back.shared_active, gt.shared_active);
  EXPECT_EQ(back.concept_atom_prob, gt.concept_atom_prob);
}

TEST(Match, PlantedDictionaryMatchesPerfectly) {
  auto cfg = single_atom_config();
  cfg.d = 8;
  cfg.num_concepts = 3;
  cfg.atoms_per_concept = 2;
  cfg.shared_atoms = 2;
  auto gt = make_ground_truth(cfg);
  auto m = SaeModel<double>::zeros(8, 8, 2, Variant::topk);
  for (std::uint32_t a = 0; a < 8; ++a) {
    for (std::uint32_t i = 0; i < 8; ++i) m.w_dec(i, a) = gt.atoms[a][i];
  }
  auto report = match_features(m, gt, {{0, {0, 1}}, {2, {4, 0}}});
  EXPECT_EQ(report.atom_recall, 1.0);
  EXPECT_EQ(report.per_concept[0].precision(), 1.0);
  EXPECT_EQ(report.per_concept[2].precision(), 0.5);
  EXPECT_EQ(report.overall.selected, 4u);
  EXPECT_EQ(report.overall.correct, 3u);
}

TEST(Match, RandomDecoderMatchesAlmostNothing) {
  SyntheticConfig cfg;
  auto gt = make_ground_truth(cfg);
  auto m = testutil::random_model<float>(16, 64, 4, Variant::topk, 1);
  auto report = match_features(m, gt);
  EXPECT_LT(report.atom_recall, 0.1);
}

TEST(Oracle, BruteForceMatchesOnDoubleModels) {
  TempDir dir;
  SyntheticConfig cfg;
  auto gt = make_ground_truth(cfg);
  SyntheticLayout layout;
  layout.images_per_concept = 1;
  auto ds = open_dataset(generate(gt, layout, dir.path()).manifest_path);
  auto m = testutil::random_model<double>(16, 48, 5, Variant::topk, 2);
  auto means = compute_means(m, ds, 6);
  auto scores = compute_scores(means);
  for (std::uint16_t t = 0; t < 4; ++t) {
    auto oracle = brute_force_score(m, ds, t, 6);
    for (std::uint32_t i = 0; i < 48; ++i) EXPECT_NEAR(scores.score(i, t), oracle.score(i, t), 1e-9);
  }
}
