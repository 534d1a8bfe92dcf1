#include <fstream>
#include <set>

#include "test_util.hpp"

using namespace saeuron;
using testutil::make_record;
using testutil::TempDir;

namespace {

std::vector<ActivationRecord> ten_records(std::uint16_t concept_id = 0) {
  std::vector<ActivationRecord> out;
  for (std::uint32_t i = 0; i < 10; ++i) {
    out.push_back(make_record(static_cast<std::uint16_t>(i % 2), concept_id, i % 4, true,
                              {float(i), float(i) + 0.5f, -float(i), 1.0f}));
  }
  return out;
}

}  // namespace

TEST(ShardFormat, EmptyShardHasHeaderOnly) {
  TempDir dir;
  ShardHeader h{kShardVersion, 4, 2, 2, 2, 0};
  write_shard(std::vector<ActivationRecord>{}, h, dir / "e.bin");
  EXPECT_EQ(std::filesystem::file_size(dir / "e.bin"), kShardHeaderSize);
  ShardHeader back;
  EXPECT_TRUE(read_shard(dir / "e.bin", &back).empty());
  EXPECT_EQ(back.record_count, 0u);
}

TEST(ShardFormat, TwoRecordsAtD4Are92Bytes) {
  TempDir dir;
  ShardHeader h{kShardVersion, 4, 2, 2, 2, 0};
  std::vector<ActivationRecord> recs{make_record(0, 0, 0, true, {1, 2, 3, 4}),
                                     make_record(1, 0, 3, false, {5, 6, 7, 8})};
  write_shard(recs, h, dir / "s.bin");
  EXPECT_EQ(std::filesystem::file_size(dir / "s.bin"), 92u);
}

TEST(ShardFormat, RoundTripIsExact) {
  TempDir dir;
  ShardHeader h{kShardVersion, 4, 2, 2, 2, 0};
  auto recs = ten_records();
  recs[3].values[1] = -0.0f;
  recs[4].values[2] = 1e-38f;
  write_shard(recs, h, dir / "s.bin");
  ShardHeader back;
  auto got = read_shard(dir / "s.bin", &back);
  EXPECT_EQ(got, recs);
  EXPECT_EQ(back.record_count, 10u);
  EXPECT_TRUE(std::signbit(got[3].values[1]));
}

TEST(ShardFormat, WrongWidthRejected) {
  TempDir dir;
  ShardHeader h{kShardVersion, 4, 2, 2, 2, 0};
  std::vector<ActivationRecord> recs{make_record(0, 0, 0, true, {1, 2, 3})};
  EXPECT_THROW(write_shard(recs, h, dir / "s.bin"), FormatError);
}

TEST(ShardFormat, OutOfRangeFieldsRejected) {
  TempDir dir;
  ShardHeader h{kShardVersion, 2, 2, 2, 2, 0};
  EXPECT_THROW(write_shard(std::vector{make_record(2, 0, 0, true, {1, 2})}, h, dir / "a.bin"), FormatError);
  EXPECT_THROW(write_shard(std::vector{make_record(0, 0, 4, true, {1, 2})}, h, dir / "b.bin"), FormatError);
  EXPECT_THROW(write_shard(std::vector{make_record(0, 0, 0, true, {1, NAN})}, h, dir / "c.bin"), FormatError);
}

TEST(ShardFormat, BadMagicAndVersion) {
  TempDir dir;
  ShardHeader h{kShardVersion, 2, 1, 1, 1, 0};
  write_shard(std::vector{make_record(0, 0, 0, true, {1, 2})}, h, dir / "s.bin");
  std::fstream f(dir / "s.bin", std::ios::in | std::ios::out | std::ios::binary);
  f.seekp(8);
  std::uint32_t v = 99;
  f.write(reinterpret_cast<const char*>(&v), 4);
  f.close();
  EXPECT_THROW(read_shard(dir / "s.bin"), VersionError);
  std::ofstream(dir / "junk.bin", std::ios::binary) << std::string(40, 'x');
  EXPECT_THROW(read_shard(dir / "junk.bin"), FormatError);
}

TEST(ShardFormat, TruncatedShard) {
  TempDir dir;
  ShardHeader h{kShardVersion, 4, 2, 2, 2, 0};
  write_shard(ten_records(), h, dir / "s.bin");
  std::filesystem::resize_file(dir / "s.bin", std::filesystem::file_size(dir / "s.bin") - 5);
  EXPECT_THROW(read_shard(dir / "s.bin"), CorruptFileError);
}

TEST(Manifest, JsonRoundTrip) {
  Manifest m;
  m.block_name = "up.1.attn";
  m.d = 4;
  m.h = 2;
  m.w = 3;
  m.T = 5;
  m.concepts = {{0, "cats"}, {7, "dogs"}};
  m.shards = {{"a.bin", 3}, {"b.bin", 0}};
  m.cond_policy = CondPolicy::both;
  const auto back = manifest_from_json(to_json(m));
  EXPECT_EQ(to_json(back), to_json(m));
  EXPECT_EQ(back.concept_id("dogs"), 7);
  EXPECT_EQ(back.concept_id("0"), 0);
  EXPECT_THROW(back.concept_id("birds"), DataError);
  EXPECT_THROW(back.concept_id("3"), DataError);
}

TEST(Manifest, MalformedRejected) {
  EXPECT_THROW(manifest_from_json(nlohmann::json{{"d", 4}}), FormatError);
}

TEST(Dataset, MissingShard) {
  TempDir dir;
  auto path = testutil::write_dataset(dir.path(), {ten_records()}, 4, 2, 2, 2);
  std::filesystem::remove(dir / "shard0.bin");
  EXPECT_THROW(open_dataset(path), MissingFileError);
}

TEST(Dataset, RecordCountMismatch) {
  TempDir dir;
  auto path = testutil::write_dataset(dir.path(), {ten_records()}, 4, 2, 2, 2);
  auto m = read_manifest(path);
  m.shards[0].records = 11;
  write_manifest(m, path);
  EXPECT_THROW(open_dataset(path), IntegrityError);
}

TEST(Dataset, UnknownConcept) {
  TempDir dir;
  auto path = testutil::write_dataset(dir.path(), {ten_records(7)}, 4, 2, 2, 2);
  auto m = read_manifest(path);
  m.concepts = {{0, "only"}};
  write_manifest(m, path);
  EXPECT_THROW(open_dataset(path), IntegrityError);
}

TEST(Dataset, DimensionDisagreement) {
  TempDir dir;
  auto path = testutil::write_dataset(dir.path(), {ten_records()}, 4, 2, 2, 2);
  auto m = read_manifest(path);
  m.d = 8;
  write_manifest(m, path);
  EXPECT_THROW(open_dataset(path), IntegrityError);
}

TEST(Dataset, BatchesCoverInOrder) {
  TempDir dir;
  auto path = testutil::write_dataset(dir.path(), {ten_records()}, 4, 2, 2, 2);
  auto ds = open_dataset(path);
  auto stream = iterate_batches(ds, 4, false);
  std::vector<std::size_t> sizes;
  std::vector<ActivationRecord> batch, all;
  while (stream.next(batch)) {
    sizes.push_back(batch.size());
    all.insert(all.end(), batch.begin(), batch.end());
  }
  EXPECT_EQ(sizes, (std::vector<std::size_t>{4, 4, 2}));
  EXPECT_EQ(all, ten_records());
  EXPECT_THROW(iterate_batches(ds, 0, false), ConfigError);
}

TEST(Dataset, ShuffleIsSeededPermutation) {
  TempDir dir;
  std::vector<ActivationRecord> big;
  for (std::uint32_t i = 0; i < 200; ++i) big.push_back(make_record(0, 0, i % 4, true, {float(i), 0, 0, 0}));
  auto path = testutil::write_dataset(dir.path(), {big}, 4, 2, 2, 1);
  auto ds = open_dataset(path).with_seed(11);

  auto a = iterate_batches(ds, 7, true, 0).order();
  auto b = iterate_batches(ds, 7, true, 0).order();
  auto c = iterate_batches(ds, 7, true, 1).order();
  auto other = iterate_batches(open_dataset(path).with_seed(12), 7, true, 0).order();
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  EXPECT_NE(a, other);

  auto stream = iterate_batches(ds, 7, true, 3);
  std::multiset<float> seen;
  std::vector<ActivationRecord> batch;
  while (stream.next(batch)) {
    for (const auto& r : batch) seen.insert(r.values[0]);
  }
  ASSERT_EQ(seen.size(), 200u);
  float expect = 0;
  for (float v : seen) EXPECT_EQ(v, expect++);
}

TEST(Dataset, FiltersAcrossShards) {
  TempDir dir;
  auto a = ten_records(0);
  auto b = ten_records(3);
  for (std::size_t i = 0; i < 4; ++i) b.pop_back();
  auto path = testutil::write_dataset(dir.path(), {a, b}, 4, 2, 2, 2);
  auto ds = open_dataset(path);
  EXPECT_EQ(ds.size(), 16u);
  auto only3 = ds.filtered(only_concept(3));
  EXPECT_EQ(only3.size(), 6u);
  for (const auto& r : only3.load_all()) EXPECT_EQ(r.concept_id, 3);
  EXPECT_EQ(ds.filtered(only_timestep(1)).size(), 8u);
  EXPECT_EQ(ds.filtered(only_concept(3)).filtered(only_timestep(0)).size(), 3u);
  EXPECT_EQ(ds.filtered(only_cond(false)).size(), 0u);
  auto cells = ds.cell_counts();
  std::uint64_t total = 0;
  for (const auto& [key, count] : cells) total += count;
  EXPECT_EQ(total, 16u);
}
