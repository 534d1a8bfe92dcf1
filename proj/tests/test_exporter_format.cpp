// Files written by the Python shard writer must open cleanly here.

#include <cstdlib>

#include "test_util.hpp"

using namespace saeuron;
using testutil::TempDir;

namespace {

bool run_fixture(const std::filesystem::path& out, const std::string& policy) {
  const std::string cmd = std::string(SAEURON_PYTHON) + " " + SAEURON_SOURCE_DIR +
                          "/tests/fixtures/tiny_export.py " + out.string() + " --policy " + policy;
  return std::system(cmd.c_str()) == 0;
}

}  // namespace

TEST(ExporterFormat, ConditionedOnlyCounts) {
  TempDir dir;
  ASSERT_TRUE(run_fixture(dir.path(), "conditioned-only"));
  auto ds = open_dataset(dir / "manifest.json");
  EXPECT_EQ(ds.size(), 1u * 4 * 4 * 4);
  EXPECT_EQ(ds.manifest().block_name, "up.1.1");
  EXPECT_EQ(ds.manifest().cond_policy, CondPolicy::conditioned_only);
  EXPECT_EQ(ds.filtered(only_cond(false)).size(), 0u);
  EXPECT_EQ(ds.filtered(only_timestep(2)).size(), 16u);
  for (const auto& r : ds.load_all()) EXPECT_EQ(r.concept_id, 3);
}

TEST(ExporterFormat, BothHalvesDoubleTheCount) {
  TempDir a, b;
  ASSERT_TRUE(run_fixture(a.path(), "conditioned-only"));
  ASSERT_TRUE(run_fixture(b.path(), "both"));
  auto cond = open_dataset(a / "manifest.json");
  auto both = open_dataset(b / "manifest.json");
  EXPECT_EQ(both.size(), 2 * cond.size());
  EXPECT_EQ(both.filtered(only_cond(false)).size(), cond.size());
  EXPECT_EQ(std::filesystem::file_size(b / "prompt_0.shard"), kShardHeaderSize + both.size() * shard_record_size(8));
}

TEST(ExporterFormat, SameBytesAsNativeWriter) {
  TempDir dir;
  ASSERT_TRUE(run_fixture(dir.path(), "both"));
  ShardHeader header;
  auto records = read_shard(dir / "prompt_0.shard", &header);
  write_shard(records, header, dir / "native.shard");
  std::ifstream x(dir / "prompt_0.shard", std::ios::binary), y(dir / "native.shard", std::ios::binary);
  std::stringstream sx, sy;
  sx << x.rdbuf();
  sy << y.rdbuf();
  EXPECT_EQ(sx.str(), sy.str());
}
