#pragma once

#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "saeuron/saeuron.hpp"

namespace testutil {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static int counter = 0;
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = "saeuron_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++);
    if (info) name += std::string("_") + info->name();
    path_ = std::filesystem::temp_directory_path() / name;
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  std::filesystem::path path_;
};

inline saeuron::ActivationRecord make_record(std::uint16_t t, std::uint16_t c, std::uint32_t j, bool cond,
                                             std::vector<float> values) {
  saeuron::ActivationRecord r;
  r.timestep = t;
  r.concept_id = c;
  r.spatial_index = j;
  r.cond_flag = cond;
  r.values = std::move(values);
  return r;
}

// Writes one shard per entry of `shards` plus a manifest naming concepts 0..max.
inline std::filesystem::path write_dataset(const std::filesystem::path& dir,
                                           const std::vector<std::vector<saeuron::ActivationRecord>>& shards,
                                           std::uint32_t d, std::uint32_t h, std::uint32_t w, std::uint32_t T) {
  saeuron::Manifest m;
  m.block_name = "test.block";
  m.d = d;
  m.h = h;
  m.w = w;
  m.T = T;
  for (std::size_t s = 0; s < shards.size(); ++s) {
    for (const auto& r : shards[s]) m.concepts[r.concept_id] = "concept" + std::to_string(r.concept_id);
    const std::string name = "shard" + std::to_string(s) + ".bin";
    saeuron::write_shard(shards[s], m.shard_header(), dir / name);
    m.shards.push_back({name, shards[s].size()});
  }
  const auto path = dir / "manifest.json";
  saeuron::write_manifest(m, path);
  return path;
}

template <class S>
saeuron::SaeModel<S> random_model(std::uint32_t d, std::uint32_t n, std::uint32_t k, saeuron::Variant v,
                                  std::uint64_t seed) {
  auto m = saeuron::SaeModel<S>::zeros(d, n, k, v);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (Eigen::Index i = 0; i < m.w_enc.size(); ++i) m.w_enc.data()[i] = static_cast<S>(g(rng));
  for (Eigen::Index i = 0; i < m.w_dec.size(); ++i) m.w_dec.data()[i] = static_cast<S>(g(rng));
  for (Eigen::Index i = 0; i < m.b_pre.size(); ++i) m.b_pre(i) = static_cast<S>(0.3 * g(rng));
  if (v == saeuron::Variant::relu) {
    for (Eigen::Index i = 0; i < m.b_enc.size(); ++i) m.b_enc(i) = static_cast<S>(0.3 * g(rng));
  }
  saeuron::normalize_decoder_columns(m);
  return m;
}

inline std::vector<float> random_vector(std::size_t d, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  std::vector<float> x(d);
  for (auto& v : x) v = static_cast<float>(g(rng));
  return x;
}

}  // namespace testutil
