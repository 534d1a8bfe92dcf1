#include <random>

#include "oracles.hpp"
#include "test_util.hpp"

using namespace saeuron;
using testutil::make_record;
using testutil::TempDir;

namespace {

SaeModel<float> axis_model(std::uint32_t d, std::uint32_t k) {
  auto m = SaeModel<float>::zeros(d, d, k, Variant::topk);
  m.w_enc.setIdentity();
  m.w_dec.setIdentity();
  return m;
}

FeatureMap single_channel_map(std::uint32_t h, std::uint32_t w, const std::vector<float>& values) {
  FeatureMap map;
  map.h = h;
  map.w = w;
  map.d = 1;
  map.data = values;
  map.cond.assign(map.rows(), true);
  return map;
}

LabeledVector point(std::uint16_t label, std::uint64_t image, std::vector<double> f, std::uint16_t t = 0) {
  return LabeledVector{label, t, image, std::move(f)};
}

}  // namespace

TEST(Heatmap, AllZeroStaysZero) {
  auto hm = heatmap(single_channel_map(2, 2, {0, 0, -1, 0}), axis_model(1, 1), 0);
  for (double v : hm.values) EXPECT_EQ(v, 0.0);
}

TEST(Heatmap, SinglePatchAndUniform) {
  std::vector<float> vals(16, 0.0f);
  vals[7] = 3.0f;
  auto hm = heatmap(single_channel_map(4, 4, vals), axis_model(1, 1), 0);
  EXPECT_EQ(hm.values[7], 1.0);
  EXPECT_EQ(std::count(hm.values.begin(), hm.values.end(), 0.0), 15);
  auto uni = heatmap(single_channel_map(2, 3, std::vector<float>(6, 3.0f)), axis_model(1, 1), 0);
  for (double v : uni.values) EXPECT_EQ(v, 1.0);
}

TEST(Heatmap, ValuesInUnitRangeAndScaleInvariant) {
  std::mt19937_64 rng(1);
  auto m = testutil::random_model<float>(6, 24, 3, Variant::topk, 1);
  m.b_pre.setZero();
  FeatureMap map;
  map.h = map.w = 5;
  map.d = 6;
  map.cond.assign(25, true);
  for (std::size_t j = 0; j < 25; ++j) {
    auto v = testutil::random_vector(6, rng);
    map.data.insert(map.data.end(), v.begin(), v.end());
  }
  for (std::uint32_t f = 0; f < 24; ++f) {
    auto hm = heatmap(map, m, f);
    for (double v : hm.values) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
    FeatureMap doubled = map;
    for (auto& v : doubled.data) v *= 2.0f;
    auto hm2 = heatmap(doubled, m, f);
    for (std::size_t j = 0; j < 25; ++j) EXPECT_NEAR(hm.values[j], hm2.values[j], 1e-6);
  }
  EXPECT_THROW(heatmap(map, m, 24), DimensionError);
}

TEST(Heatmap, Writers) {
  TempDir dir;
  auto hm = heatmap(single_channel_map(1, 2, {1.0f, 2.0f}), axis_model(1, 1), 0);
  write_heatmap_csv(hm, dir / "h.csv");
  write_heatmap_pgm(hm, dir / "h.pgm");
  std::ifstream csv(dir / "h.csv"), pgm(dir / "h.pgm");
  std::stringstream a, b;
  a << csv.rdbuf();
  b << pgm.rdbuf();
  EXPECT_EQ(a.str(), "0.5,1\n");
  EXPECT_EQ(b.str(), "P2\n2 1\n255\n128 255\n");
}

TEST(Knn, SeparatedClustersAreExact) {
  std::vector<LabeledVector> train, test;
  for (std::uint16_t c = 0; c < 4; ++c) {
    for (int i = 0; i < 6; ++i) {
      std::vector<double> f(4, 0.01 * i);
      f[c] = 10.0;
      (i < 4 ? train : test).push_back(point(c, c * 10u + i, f));
    }
  }
  auto r = knn_probe(train, test, 3, {0, 1, 2, 3});
  EXPECT_EQ(r.accuracy.at(0), 1.0);
  EXPECT_EQ(r.baseline, 0.25);
  EXPECT_EQ(r.num_classes, 4u);
  EXPECT_EQ(r.test_counts.at(0), 8u);
}

TEST(Knn, SubsetRestrictsDistance) {
  // Label is encoded only in dimension 1; dimension 0 is misleading.
  std::vector<LabeledVector> train{point(0, 0, {0, 0}), point(0, 1, {5, 0}), point(1, 2, {0, 5}),
                                   point(1, 3, {5, 5})};
  std::vector<LabeledVector> test{point(0, 4, {5, 0.4}), point(1, 5, {0, 4.6})};
  EXPECT_EQ(knn_probe(train, test, 1, {1}).accuracy.at(0), 1.0);
  EXPECT_EQ(knn_probe(train, test, 1, {0}).accuracy.at(0), 0.5);
}

TEST(Knn, TiesResolveToNearerAndLowerIndex) {
  // k=2 votes split 1-1; the nearer neighbour's label wins.
  std::vector<LabeledVector> train{point(3, 0, {1.0}), point(5, 1, {-2.0})};
  EXPECT_EQ(knn_probe(train, {point(3, 9, {0.0})}, 2, {0}).accuracy.at(0), 1.0);
  // Equal distances: the lower training index is nearer.
  std::vector<LabeledVector> eq{point(5, 0, {1.0}), point(3, 1, {-1.0})};
  EXPECT_EQ(knn_probe(eq, {point(5, 9, {0.0})}, 1, {0}).accuracy.at(0), 1.0);
  EXPECT_EQ(knn_probe(eq, {point(3, 9, {0.0})}, 1, {0}).accuracy.at(0), 0.0);
}

TEST(Knn, MatchesExhaustiveOracle) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g;
  std::vector<LabeledVector> train, test;
  for (int i = 0; i < 60; ++i) {
    std::vector<double> f(10);
    for (auto& v : f) v = g(rng);
    const auto label = static_cast<std::uint16_t>(i % 3);
    f[label] += 1.0;
    (i < 45 ? train : test).push_back(point(label, static_cast<std::uint64_t>(i), f, static_cast<std::uint16_t>(i % 2)));
  }
  const std::vector<std::uint32_t> subset{0, 1, 2, 7};
  const std::uint32_t k = 5;
  auto r = knn_probe(train, test, k, subset);
  for (std::uint16_t t = 0; t < 2; ++t) {
    std::vector<const LabeledVector*> pool;
    for (const auto& v : train) {
      if (v.timestep == t) pool.push_back(&v);
    }
    double hits = 0, total = 0;
    for (const auto& q : test) {
      if (q.timestep != t) continue;
      std::vector<std::pair<double, std::size_t>> all;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        double acc = 0;
        for (auto f : subset) acc += std::pow(q.features[f] - pool[i]->features[f], 2);
        all.push_back({std::sqrt(acc), i});
      }
      std::sort(all.begin(), all.end());
      std::map<std::uint16_t, int> votes;
      for (std::uint32_t j = 0; j < k; ++j) ++votes[pool[all[j].second]->label];
      int best = 0;
      for (auto& [l, v] : votes) best = std::max(best, v);
      std::uint16_t pred = 0;
      for (std::uint32_t j = 0; j < k; ++j) {
        if (votes[pool[all[j].second]->label] == best) {
          pred = pool[all[j].second]->label;
          break;
        }
      }
      hits += pred == q.label;
      total += 1;
    }
    EXPECT_NEAR(r.accuracy.at(t), hits / total, 1e-12);
  }
  EXPECT_EQ(to_json(knn_probe(train, test, k, subset)), to_json(r));
}

TEST(Knn, InvalidInputs) {
  std::vector<LabeledVector> train{point(0, 0, {0}), point(1, 1, {1})};
  std::vector<LabeledVector> test{point(0, 2, {0})};
  EXPECT_THROW(knn_probe(train, test, 3, {0}), DataError);
  EXPECT_THROW(knn_probe(train, test, 1, {}), ConfigError);
  EXPECT_THROW(knn_probe(train, test, 0, {0}), ConfigError);
  EXPECT_THROW(knn_probe(train, test, 1, {4}), DimensionError);
}

TEST(Split, WholeImagesPerLabelAndSeeded) {
  std::vector<LabeledVector> vectors;
  for (std::uint16_t label = 0; label < 3; ++label) {
    for (std::uint64_t img = 0; img < 10; ++img) {
      for (std::uint16_t t = 0; t < 4; ++t) vectors.push_back(point(label, label * 100 + img, {0.0}, t));
    }
  }
  auto [train, test] = split_train_test(vectors, 0.3, 5);
  std::map<std::uint16_t, std::set<std::uint64_t>> test_imgs;
  std::set<std::uint64_t> train_imgs;
  for (const auto& v : test) test_imgs[v.label].insert(v.image);
  for (const auto& v : train) train_imgs.insert(v.image);
  for (const auto& [label, imgs] : test_imgs) {
    EXPECT_EQ(imgs.size(), 3u);
    for (auto i : imgs) EXPECT_EQ(train_imgs.count(i), 0u);
  }
  EXPECT_EQ(test.size(), 36u);
  auto again = split_train_test(vectors, 0.3, 5);
  EXPECT_EQ(again.second.size(), test.size());
  for (std::size_t i = 0; i < test.size(); ++i) EXPECT_EQ(again.second[i].image, test[i].image);
  EXPECT_THROW(split_train_test(vectors, 1.0, 5), ConfigError);
}

TEST(RandomSubset, SortedDistinctSeeded) {
  auto a = random_feature_subset(100, 20, 3);
  EXPECT_EQ(a.size(), 20u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::set<std::uint32_t>(a.begin(), a.end()).size(), 20u);
  EXPECT_EQ(random_feature_subset(100, 20, 3), a);
  EXPECT_NE(random_feature_subset(100, 20, 4), a);
  EXPECT_THROW(random_feature_subset(5, 6, 0), ConfigError);
}

TEST(Grouping, OccurrenceSeparatesImages) {
  TempDir dir;
  std::vector<ActivationRecord> recs;
  for (std::uint32_t img = 0; img < 3; ++img) {
    for (std::uint16_t t = 0; t < 2; ++t) {
      for (std::uint32_t j = 0; j < 4; ++j) recs.push_back(make_record(t, 0, j, true, {float(img), float(j)}));
    }
  }
  auto ds = open_dataset(testutil::write_dataset(dir.path(), {recs}, 2, 2, 2, 2));
  auto groups = group_images(ds);
  ASSERT_EQ(groups.size(), 6u);
  for (const auto& g : groups) {
    EXPECT_EQ(g.rows.size(), 4u);
    for (const auto& ref : g.rows) EXPECT_EQ(ds.load(ref).values[0], float(g.occurrence));
  }
  auto pooled = pooled_image_vectors(axis_model(2, 2), ds);
  ASSERT_EQ(pooled.size(), 6u);
  for (const auto& v : pooled) {
    EXPECT_DOUBLE_EQ(v.features[1], 1.5);
    EXPECT_DOUBLE_EQ(v.features[0], double(v.image & 0xffffffffu));
  }
}

TEST(ProbeView, PrefersUnconditionedRows) {
  TempDir dir;
  auto both = open_dataset(testutil::write_dataset(
      dir.path(), {{make_record(0, 0, 0, true, {1}), make_record(0, 0, 0, false, {2})}}, 1, 1, 1, 1));
  std::vector<std::string> warnings;
  EXPECT_EQ(probe_view(both, &warnings).size(), 1u);
  EXPECT_TRUE(warnings.empty());
  auto cond_only = both.filtered(only_cond(true));
  EXPECT_EQ(probe_view(cond_only, &warnings).size(), 1u);
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Stats, TopKGivesExactlyKPerPatch) {
  TempDir dir;
  std::mt19937_64 rng(3);
  std::vector<ActivationRecord> recs;
  for (std::uint32_t j = 0; j < 256; ++j) {
    auto v = testutil::random_vector(16, rng);
    recs.push_back(make_record(0, 0, j, true, v));
  }
  auto ds = open_dataset(testutil::write_dataset(dir.path(), {recs}, 16, 16, 16, 1));
  // With b_pre = 0 and W_enc rows (e_i, -e_i, ...) every row has >= 32 positive pre-activations.
  auto m = SaeModel<float>::zeros(16, 64, 32, Variant::topk);
  for (std::uint32_t i = 0; i < 16; ++i) {
    m.w_enc(i, i) = 1;
    m.w_enc(16 + i, i) = -1;
    m.w_enc(32 + i, i) = 1;
    m.w_enc(48 + i, i) = -1;
  }
  auto stats = active_latent_stats(m, ds, StatsMode::per_sample);
  ASSERT_EQ(stats.per_image.size(), 1u);
  EXPECT_EQ(stats.per_image[0], 8192.0);
  m.k = 0;
  EXPECT_EQ(active_latent_stats(m, ds, StatsMode::per_sample).per_image[0], 0.0);
}

TEST(Stats, BatchModeMatchesGlobalSort) {
  TempDir dir;
  std::mt19937_64 rng(4);
  std::vector<ActivationRecord> recs;
  for (std::uint32_t img = 0; img < 3; ++img) {
    for (std::uint32_t j = 0; j < 4; ++j) recs.push_back(make_record(0, 0, j, true, testutil::random_vector(5, rng)));
  }
  auto ds = open_dataset(testutil::write_dataset(dir.path(), {recs}, 5, 2, 2, 1));
  auto m = testutil::random_model<float>(5, 20, 3, Variant::batch_topk, 4);
  auto stats = active_latent_stats(m, ds, StatsMode::batch, 12);
  auto md = m.cast<double>();
  std::vector<std::vector<double>> pre;
  for (const auto& r : recs) pre.push_back(oracles::pre_activations(md, std::vector<double>(r.values.begin(), r.values.end())));
  auto sel = oracles::batch_topk_by_sort(pre, 3);
  double total = 0;
  for (std::size_t img = 0; img < 3; ++img) {
    double count = 0;
    for (std::size_t j = 0; j < 4; ++j) {
      for (double v : sel[img * 4 + j]) count += v > 0;
    }
    EXPECT_EQ(stats.per_image[img], count);
    total += count;
  }
  double patch_total = 0;
  for (std::size_t j = 0; j < 4; ++j) patch_total += stats.per_patch[j] * double(stats.patch_records[j]);
  EXPECT_NEAR(patch_total, total, 1e-9);
  EXPECT_LE(total, 36.0);
}

TEST(Stats, SummaryAndModeNames) {
  auto s = summarize({1, 2, 3, 4}, 3);
  EXPECT_EQ(s.count, 4u);
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_EQ(s.counts, (std::vector<std::uint64_t>{1, 1, 2}));  // bins [1,2) [2,3) [3,4]
  auto flat = summarize({7, 7});
  EXPECT_EQ(flat.counts, (std::vector<std::uint64_t>{2}));
  EXPECT_EQ(stats_mode_from_string("batch"), StatsMode::batch);
  EXPECT_EQ(stats_group_from_string("per-patch"), StatsGroup::per_patch);
  EXPECT_THROW(stats_mode_from_string("x"), ConfigError);
}
