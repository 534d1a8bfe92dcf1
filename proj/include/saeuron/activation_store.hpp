#pragma once

// Binary activation shards, the JSON manifest that groups them, and filtered,
// seeded batch iteration over the records they contain.
//
// Shard layout (little-endian):
//   "SAEACT01"  u32 version  u32 d  u32 h  u32 w  u32 T  u64 record_count
//   record_count x { u16 timestep  u16 concept_id  u32 spatial_index
//                    u8 cond_flag  3 pad bytes  d x f32 }

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "saeuron/binary_io.hpp"
#include "saeuron/errors.hpp"
#include "saeuron/random.hpp"

namespace saeuron {

inline constexpr std::array<char, 8> kShardMagic = {'S', 'A', 'E', 'A', 'C', 'T', '0', '1'};
inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr std::size_t kShardHeaderSize = 8 + 5 * 4 + 8;
inline constexpr std::size_t kRecordPrefixSize = 2 + 2 + 4 + 1 + 3;

inline constexpr std::size_t shard_record_size(std::uint32_t d) {
  return kRecordPrefixSize + 4 * static_cast<std::size_t>(d);
}

struct ActivationRecord {
  std::uint16_t timestep = 0;
  std::uint16_t concept_id = 0;
  std::uint32_t spatial_index = 0;
  bool cond_flag = true;
  std::vector<float> values;

  friend bool operator==(const ActivationRecord&, const ActivationRecord&) = default;
};

struct ShardHeader {
  std::uint32_t version = kShardVersion;
  std::uint32_t d = 0;
  std::uint32_t h = 0;
  std::uint32_t w = 0;
  std::uint32_t T = 0;
  std::uint64_t record_count = 0;

  std::uint64_t spatial_size() const { return std::uint64_t{h} * w; }
  friend bool operator==(const ShardHeader&, const ShardHeader&) = default;
};

namespace detail {

inline void validate_header_dims(const ShardHeader& header) {
  if (header.d == 0 || header.h == 0 || header.w == 0 || header.T == 0) {
    throw FormatError("shard header dimensions must be positive");
  }
  if (header.T > 65536) throw FormatError("T exceeds the u16 timestep range");
}

inline void validate_record(const ActivationRecord& r, const ShardHeader& header) {
  if (r.values.size() != header.d) {
    throw FormatError("record has " + std::to_string(r.values.size()) + " values, header declares d=" +
                      std::to_string(header.d));
  }
  if (r.spatial_index >= header.spatial_size()) {
    throw FormatError("spatial_index " + std::to_string(r.spatial_index) + " outside h*w=" +
                      std::to_string(header.spatial_size()));
  }
  if (r.timestep >= header.T) {
    throw FormatError("timestep " + std::to_string(r.timestep) + " outside T=" + std::to_string(header.T));
  }
  for (float v : r.values) {
    if (!std::isfinite(v)) throw FormatError("record contains a non-finite value");
  }
}

inline void encode_header(io::ByteWriter& out, const ShardHeader& header) {
  out.put_bytes(std::span<const char>(kShardMagic));
  out.put(header.version);
  out.put(header.d);
  out.put(header.h);
  out.put(header.w);
  out.put(header.T);
  out.put(header.record_count);
}

inline void encode_record(io::ByteWriter& out, const ActivationRecord& r) {
  out.put(r.timestep);
  out.put(r.concept_id);
  out.put(r.spatial_index);
  out.put(static_cast<std::uint8_t>(r.cond_flag ? 1 : 0));
  out.pad(3);
  for (float v : r.values) out.put_f32(v);
}

inline ShardHeader decode_header(std::span<const char> bytes) {
  io::ByteReader in(bytes);
  auto magic = in.get_bytes(kShardMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kShardMagic.begin())) {
    throw FormatError("bad shard magic");
  }
  ShardHeader h;
  h.version = in.get<std::uint32_t>();
  if (h.version != kShardVersion) {
    throw VersionError("unsupported shard version " + std::to_string(h.version));
  }
  h.d = in.get<std::uint32_t>();
  h.h = in.get<std::uint32_t>();
  h.w = in.get<std::uint32_t>();
  h.T = in.get<std::uint32_t>();
  h.record_count = in.get<std::uint64_t>();
  return h;
}

inline ActivationRecord decode_record(std::span<const char> bytes, std::uint32_t d) {
  io::ByteReader in(bytes);
  ActivationRecord r;
  r.timestep = in.get<std::uint16_t>();
  r.concept_id = in.get<std::uint16_t>();
  r.spatial_index = in.get<std::uint32_t>();
  r.cond_flag = in.get<std::uint8_t>() != 0;
  in.skip(3);
  r.values.resize(d);
  for (auto& v : r.values) v = in.get_f32();
  return r;
}

}  // namespace detail

// Writes header + records. The header's record_count is taken from the input.
inline std::size_t write_shard(std::span<const ActivationRecord> records, ShardHeader header,
                               const std::filesystem::path& path) {
  detail::validate_header_dims(header);
  header.version = kShardVersion;
  header.record_count = records.size();
  for (const auto& r : records) detail::validate_record(r, header);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  io::ByteWriter buf;
  detail::encode_header(buf, header);
  for (const auto& r : records) {
    detail::encode_record(buf, r);
    if (buf.bytes().size() > (1u << 20)) {
      out.write(buf.bytes().data(), static_cast<std::streamsize>(buf.bytes().size()));
      buf.clear();
    }
  }
  out.write(buf.bytes().data(), static_cast<std::streamsize>(buf.bytes().size()));
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
  return records.size();
}

// Random-access reader over one shard file.
class ShardReader {
 public:
  explicit ShardReader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw MissingFileError("cannot open shard " + path.string());
    std::array<char, kShardHeaderSize> raw{};
    in_.read(raw.data(), raw.size());
    if (in_.gcount() != static_cast<std::streamsize>(raw.size())) {
      throw CorruptFileError("shard " + path.string() + " is shorter than its header");
    }
    header_ = detail::decode_header(raw);
    in_.seekg(0, std::ios::end);
    file_size_ = static_cast<std::uint64_t>(in_.tellg());
    record_buf_.resize(shard_record_size(header_.d));
  }

  const ShardHeader& header() const { return header_; }
  const std::filesystem::path& path() const { return path_; }

  // Number of whole records physically present after the header.
  std::uint64_t records_on_disk() const {
    return (file_size_ - kShardHeaderSize) / shard_record_size(header_.d);
  }

  ActivationRecord read(std::uint64_t row) {
    if (row >= header_.record_count || row >= records_on_disk()) {
      throw CorruptFileError("record " + std::to_string(row) + " missing from " + path_.string());
    }
    in_.clear();
    in_.seekg(static_cast<std::streamoff>(kShardHeaderSize + row * record_buf_.size()));
    in_.read(record_buf_.data(), static_cast<std::streamsize>(record_buf_.size()));
    if (!in_) throw IoError("read failed in " + path_.string());
    return detail::decode_record(record_buf_, header_.d);
  }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  ShardHeader header_;
  std::uint64_t file_size_ = 0;
  std::vector<char> record_buf_;
};

inline ShardHeader read_shard_header(const std::filesystem::path& path) { return ShardReader(path).header(); }

inline std::vector<ActivationRecord> read_shard(const std::filesystem::path& path, ShardHeader* header_out = nullptr) {
  ShardReader reader(path);
  const auto& header = reader.header();
  if (reader.records_on_disk() < header.record_count) {
    throw CorruptFileError("shard " + path.string() + " truncated: header claims " +
                           std::to_string(header.record_count) + " records");
  }
  std::vector<ActivationRecord> out;
  out.reserve(header.record_count);
  for (std::uint64_t i = 0; i < header.record_count; ++i) out.push_back(reader.read(i));
  if (header_out) *header_out = header;
  return out;
}

// ---------------------------------------------------------------------------
// Manifest

enum class CondPolicy { conditioned_only, both };

inline std::string to_string(CondPolicy p) { return p == CondPolicy::both ? "both" : "conditioned-only"; }

inline CondPolicy cond_policy_from_string(const std::string& s) {
  if (s == "both") return CondPolicy::both;
  if (s == "conditioned-only") return CondPolicy::conditioned_only;
  throw FormatError("unknown cond_policy '" + s + "'");
}

struct ShardEntry {
  std::string path;  // relative to the manifest's directory unless absolute
  std::uint64_t records = 0;
};

struct Manifest {
  std::string block_name;
  std::uint32_t d = 0, h = 0, w = 0, T = 0;
  std::map<std::uint16_t, std::string> concepts;
  std::vector<ShardEntry> shards;
  CondPolicy cond_policy = CondPolicy::conditioned_only;

  ShardHeader shard_header() const { return ShardHeader{kShardVersion, d, h, w, T, 0}; }

  // Resolves a concept given either its name or its numeric id.
  std::uint16_t concept_id(const std::string& name_or_id) const {
    for (const auto& [id, name] : concepts) {
      if (name == name_or_id) return id;
    }
    try {
      std::size_t used = 0;
      unsigned long v = std::stoul(name_or_id, &used);
      if (used == name_or_id.size() && concepts.count(static_cast<std::uint16_t>(v))) {
        return static_cast<std::uint16_t>(v);
      }
    } catch (const std::exception&) {
    }
    throw DataError("concept '" + name_or_id + "' not present in manifest");
  }
};

inline nlohmann::json to_json(const Manifest& m) {
  nlohmann::json concepts = nlohmann::json::object();
  for (const auto& [id, name] : m.concepts) concepts[std::to_string(id)] = name;
  nlohmann::json shards = nlohmann::json::array();
  for (const auto& s : m.shards) shards.push_back({{"path", s.path}, {"records", s.records}});
  return {{"block_name", m.block_name}, {"d", m.d},         {"h", m.h},
          {"w", m.w},                   {"T", m.T},         {"concepts", concepts},
          {"shards", shards},           {"cond_policy", to_string(m.cond_policy)}};
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
  try {
    Manifest m;
    m.block_name = j.value("block_name", std::string{});
    m.d = j.at("d").get<std::uint32_t>();
    m.h = j.at("h").get<std::uint32_t>();
    m.w = j.at("w").get<std::uint32_t>();
    m.T = j.at("T").get<std::uint32_t>();
    for (const auto& [key, name] : j.at("concepts").items()) {
      m.concepts[static_cast<std::uint16_t>(std::stoul(key))] = name.get<std::string>();
    }
    for (const auto& s : j.at("shards")) {
      m.shards.push_back({s.at("path").get<std::string>(), s.at("records").get<std::uint64_t>()});
    }
    m.cond_policy = cond_policy_from_string(j.value("cond_policy", std::string{"conditioned-only"}));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed manifest: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw FormatError("malformed manifest: concept keys must be integers");
  }
}

inline void write_manifest(const Manifest& m, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(m).dump(2) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

inline Manifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingFileError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  return manifest_from_json(j);
}

// ---------------------------------------------------------------------------
// Dataset handle

using RecordFilter = std::function<bool(std::uint16_t concept_id, std::uint16_t timestep, bool cond_flag)>;

inline RecordFilter only_concept(std::uint16_t c) {
  return [c](std::uint16_t concept_id, std::uint16_t, bool) { return concept_id == c; };
}
inline RecordFilter only_timestep(std::uint16_t t) {
  return [t](std::uint16_t, std::uint16_t timestep, bool) { return timestep == t; };
}
inline RecordFilter only_cond(bool cond) {
  return [cond](std::uint16_t, std::uint16_t, bool flag) { return flag == cond; };
}

// Metadata of one record, enough to filter and group without reading values.
struct RecordRef {
  std::uint32_t shard = 0;
  std::uint64_t row = 0;
  std::uint16_t timestep = 0;
  std::uint16_t concept_id = 0;
  std::uint32_t spatial_index = 0;
  bool cond_flag = true;
};

class DatasetHandle {
 public:
  DatasetHandle() = default;

  const Manifest& manifest() const { return state_->manifest; }
  const std::filesystem::path& manifest_path() const { return state_->manifest_path; }
  std::filesystem::path shard_path(std::uint32_t shard) const { return state_->shard_paths.at(shard); }
  std::uint64_t seed() const { return seed_; }
  std::uint32_t d() const { return state_->manifest.d; }

  // Every record in the dataset, in shard order, regardless of the filter.
  const std::vector<RecordRef>& all_records() const { return state_->refs; }

  // Records passing the filter, in shard order.
  std::vector<RecordRef> records() const {
    std::vector<RecordRef> out;
    out.reserve(selected_.size());
    for (auto i : selected_) out.push_back(state_->refs[i]);
    return out;
  }

  std::size_t size() const { return selected_.size(); }
  bool empty() const { return selected_.empty(); }

  // Filters compose: the result keeps records passing both the current filter and `f`.
  DatasetHandle filtered(const RecordFilter& f) const {
    DatasetHandle out = *this;
    out.selected_.clear();
    for (auto i : selected_) {
      const auto& r = state_->refs[i];
      if (f(r.concept_id, r.timestep, r.cond_flag)) out.selected_.push_back(i);
    }
    return out;
  }

  DatasetHandle with_seed(std::uint64_t seed) const {
    DatasetHandle out = *this;
    out.seed_ = seed;
    return out;
  }

  // Filtered record count per (concept, timestep) cell.
  std::map<std::pair<std::uint16_t, std::uint16_t>, std::uint64_t> cell_counts() const {
    std::map<std::pair<std::uint16_t, std::uint16_t>, std::uint64_t> out;
    for (auto i : selected_) {
      const auto& r = state_->refs[i];
      ++out[{r.concept_id, r.timestep}];
    }
    return out;
  }

  ActivationRecord load(const RecordRef& ref) const {
    ShardReader reader(shard_path(ref.shard));
    return reader.read(ref.row);
  }

  std::vector<ActivationRecord> load_all() const;

  const std::vector<std::size_t>& selected_positions() const { return selected_; }

  friend DatasetHandle open_dataset(const std::filesystem::path& manifest_path);

 private:
  struct State {
    Manifest manifest;
    std::filesystem::path manifest_path;
    std::vector<std::filesystem::path> shard_paths;
    std::vector<RecordRef> refs;
  };
  std::shared_ptr<const State> state_;
  std::vector<std::size_t> selected_;
  std::uint64_t seed_ = 0;
};

// Validates every shard against the manifest and indexes record metadata.
inline DatasetHandle open_dataset(const std::filesystem::path& manifest_path) {
  auto state = std::make_shared<DatasetHandle::State>();
  state->manifest = read_manifest(manifest_path);
  state->manifest_path = manifest_path;
  const auto& m = state->manifest;
  const auto base = manifest_path.parent_path();

  for (std::uint32_t s = 0; s < m.shards.size(); ++s) {
    std::filesystem::path p = m.shards[s].path;
    if (p.is_relative()) p = base / p;
    if (!std::filesystem::exists(p)) throw MissingFileError("shard " + p.string() + " does not exist");
    state->shard_paths.push_back(p);

    std::ifstream in(p, std::ios::binary);
    if (!in) throw MissingFileError("cannot open shard " + p.string());
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < kShardHeaderSize) throw CorruptFileError("shard " + p.string() + " shorter than header");
    const ShardHeader header = detail::decode_header(std::span<const char>(bytes).first(kShardHeaderSize));
    if (header.d != m.d || header.h != m.h || header.w != m.w || header.T != m.T) {
      throw IntegrityError("shard " + p.string() + " dimensions disagree with manifest");
    }
    const std::size_t rsize = shard_record_size(header.d);
    const std::uint64_t on_disk = (bytes.size() - kShardHeaderSize) / rsize;
    if ((bytes.size() - kShardHeaderSize) % rsize != 0 || on_disk != header.record_count) {
      throw IntegrityError("shard " + p.string() + " holds " + std::to_string(on_disk) +
                           " records but its header claims " + std::to_string(header.record_count));
    }
    if (on_disk != m.shards[s].records) {
      throw IntegrityError("manifest claims " + std::to_string(m.shards[s].records) + " records in " + p.string() +
                           " but the shard holds " + std::to_string(on_disk));
    }
    for (std::uint64_t row = 0; row < on_disk; ++row) {
      io::ByteReader in_rec(std::span<const char>(bytes).subspan(kShardHeaderSize + row * rsize, kRecordPrefixSize));
      RecordRef ref;
      ref.shard = s;
      ref.row = row;
      ref.timestep = in_rec.get<std::uint16_t>();
      ref.concept_id = in_rec.get<std::uint16_t>();
      ref.spatial_index = in_rec.get<std::uint32_t>();
      ref.cond_flag = in_rec.get<std::uint8_t>() != 0;
      if (!m.concepts.count(ref.concept_id)) {
        throw IntegrityError("concept_id " + std::to_string(ref.concept_id) + " in " + p.string() +
                             " is missing from the manifest concepts map");
      }
      if (ref.timestep >= m.T || ref.spatial_index >= header.spatial_size()) {
        throw IntegrityError("record " + std::to_string(row) + " of " + p.string() + " is out of range");
      }
      state->refs.push_back(ref);
    }
  }

  DatasetHandle handle;
  handle.state_ = std::move(state);
  handle.selected_.resize(handle.state_->refs.size());
  for (std::size_t i = 0; i < handle.selected_.size(); ++i) handle.selected_[i] = i;
  return handle;
}

// One pass over the filtered records in batches. Without shuffling the order
// is shard order; with shuffling it is a permutation derived from
// (handle seed, epoch).
class BatchStream {
 public:
  BatchStream(const DatasetHandle& handle, std::size_t batch_size, bool shuffle, std::uint64_t epoch = 0)
      : handle_(handle), batch_size_(batch_size), order_(handle.selected_positions()) {
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (shuffle) seeded_shuffle(order_, derive_seed(handle.seed(), epoch));
  }

  std::size_t num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }
  std::size_t num_records() const { return order_.size(); }

  bool next(std::vector<ActivationRecord>& batch) {
    batch.clear();
    if (cursor_ >= order_.size()) return false;
    const std::size_t end = std::min(order_.size(), cursor_ + batch_size_);
    for (; cursor_ < end; ++cursor_) {
      const RecordRef& ref = handle_.all_records()[order_[cursor_]];
      batch.push_back(reader(ref.shard).read(ref.row));
    }
    return true;
  }

  // Record metadata of the batch most recently returned is not tracked; use
  // order() to map batch positions back to dataset positions when needed.
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  ShardReader& reader(std::uint32_t shard) {
    if (readers_.size() <= shard) readers_.resize(shard + 1);
    if (!readers_[shard]) readers_[shard] = std::make_unique<ShardReader>(handle_.shard_path(shard));
    return *readers_[shard];
  }

  DatasetHandle handle_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::vector<std::unique_ptr<ShardReader>> readers_;
};

inline BatchStream iterate_batches(const DatasetHandle& handle, std::size_t batch_size, bool shuffle,
                                   std::uint64_t epoch = 0) {
  return BatchStream(handle, batch_size, shuffle, epoch);
}

inline std::vector<ActivationRecord> DatasetHandle::load_all() const {
  std::vector<ActivationRecord> out;
  out.reserve(size());
  BatchStream stream(*this, 4096, false);
  std::vector<ActivationRecord> batch;
  while (stream.next(batch)) {
    for (auto& r : batch) out.push_back(std::move(r));
  }
  return out;
}

}  // namespace saeuron
