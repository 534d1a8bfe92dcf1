#pragma once

// Checkpoint layout (little-endian):
//   "SAECKPT1"  u32 version  u32 n  u32 d  u32 k  u8 variant
//   f32 W_enc (row-major n x d)  f32 W_dec (row-major d x n)
//   f32 b_pre (d)  f32 b_enc (n)  u64 dead_counter (n)
//   UTF-8 JSON trailer up to end of file

#include <array>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "saeuron/binary_io.hpp"
#include "saeuron/errors.hpp"
#include "saeuron/sae.hpp"

namespace saeuron {

inline constexpr std::array<char, 8> kCheckpointMagic = {'S', 'A', 'E', 'C', 'K', 'P', 'T', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <class S>
std::string serialize_checkpoint(const SaeModel<S>& model) {
  io::ByteWriter out;
  out.put_bytes(std::span<const char>(kCheckpointMagic));
  out.put(kCheckpointVersion);
  out.put(model.n);
  out.put(model.d);
  out.put(model.k);
  out.put(static_cast<std::uint8_t>(model.variant));
  for (std::uint32_t r = 0; r < model.n; ++r) {
    for (std::uint32_t c = 0; c < model.d; ++c) out.put_f32(static_cast<float>(model.w_enc(r, c)));
  }
  for (std::uint32_t r = 0; r < model.d; ++r) {
    for (std::uint32_t c = 0; c < model.n; ++c) out.put_f32(static_cast<float>(model.w_dec(r, c)));
  }
  for (std::uint32_t i = 0; i < model.d; ++i) out.put_f32(static_cast<float>(model.b_pre(i)));
  for (std::uint32_t i = 0; i < model.n; ++i) {
    out.put_f32(model.variant == Variant::relu ? static_cast<float>(model.b_enc(i)) : 0.0f);
  }
  for (std::uint32_t i = 0; i < model.n; ++i) out.put(model.dead_counter.at(i));

  nlohmann::json trailer = model.metadata.is_object() ? model.metadata : nlohmann::json::object();
  trailer["input_scale"] = static_cast<float>(model.input_scale);
  out.put_bytes(trailer.dump());
  return out.bytes();
}

inline SaeModel<float> parse_checkpoint(std::span<const char> bytes) {
  io::ByteReader in(bytes);
  auto magic = in.get_bytes(kCheckpointMagic.size());
  if (!std::equal(magic.begin(), magic.end(), kCheckpointMagic.begin())) {
    throw CorruptFileError("not a checkpoint (bad magic)");
  }
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw VersionError("unsupported checkpoint version " + std::to_string(version));
  const auto n = in.get<std::uint32_t>();
  const auto d = in.get<std::uint32_t>();
  const auto k = in.get<std::uint32_t>();
  const auto variant_raw = in.get<std::uint8_t>();
  if (variant_raw > static_cast<std::uint8_t>(Variant::batch_topk)) throw CorruptFileError("unknown SAE variant tag");
  if (n == 0 || d == 0) throw CorruptFileError("checkpoint declares zero dimensions");
  const std::uint64_t needed = 4ull * (2ull * n * d + d + n) + 8ull * n;
  if (in.remaining() < needed) throw CorruptFileError("checkpoint truncated");

  auto model = SaeModel<float>::zeros(d, n, k, static_cast<Variant>(variant_raw));
  for (std::uint32_t r = 0; r < n; ++r) {
    for (std::uint32_t c = 0; c < d; ++c) model.w_enc(r, c) = in.get_f32();
  }
  for (std::uint32_t r = 0; r < d; ++r) {
    for (std::uint32_t c = 0; c < n; ++c) model.w_dec(r, c) = in.get_f32();
  }
  for (std::uint32_t i = 0; i < d; ++i) model.b_pre(i) = in.get_f32();
  for (std::uint32_t i = 0; i < n; ++i) model.b_enc(i) = in.get_f32();
  for (std::uint32_t i = 0; i < n; ++i) model.dead_counter[i] = in.get<std::uint64_t>();

  auto rest = in.get_bytes(in.remaining());
  try {
    model.metadata = nlohmann::json::parse(rest.begin(), rest.end());
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError(std::string("checkpoint trailer is not valid JSON: ") + e.what());
  }
  if (!model.metadata.is_object()) throw CorruptFileError("checkpoint trailer must be a JSON object");
  model.input_scale = model.metadata.value("input_scale", 1.0f);
  model.metadata.erase("input_scale");
  return model;
}

template <class S>
void save_checkpoint(const SaeModel<S>& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

inline SaeModel<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingFileError("cannot open checkpoint " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

// Use-site check that a checkpoint fits the data it is applied to.
template <class S>
void require_model_width(const SaeModel<S>& model, std::uint32_t d) {
  if (model.d != d) {
    throw DimensionError("checkpoint has d=" + std::to_string(model.d) + " but the data has d=" + std::to_string(d));
  }
}

}  // namespace saeuron
