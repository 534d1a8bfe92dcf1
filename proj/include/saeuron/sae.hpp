#pragma once

// TopK / BatchTopK sparse autoencoder: model type, sparse codes, encode and
// decode. Loss, training and checkpointing live in their own headers.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "saeuron/errors.hpp"
#include "saeuron/parallel.hpp"

namespace saeuron {

enum class Variant : std::uint8_t { relu = 0, topk = 1, batch_topk = 2 };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::relu:
      return "relu";
    case Variant::topk:
      return "topk";
    case Variant::batch_topk:
      return "batch-topk";
  }
  return "unknown";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "relu") return Variant::relu;
  if (s == "topk") return Variant::topk;
  if (s == "batch-topk" || s == "batchtopk") return Variant::batch_topk;
  throw ConfigError("unknown SAE variant '" + s + "'");
}

// Training mode lets BatchTopK share the B*k budget across the batch;
// inference always keeps at most k latents per sample.
enum class EncodeMode { inference, training };

template <class S>
struct SparseCode {
  std::vector<std::uint32_t> indices;  // strictly increasing
  std::vector<S> values;               // positive, parallel to indices
  std::uint32_t n = 0;

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }

  S value_of(std::uint32_t i) const {
    auto it = std::lower_bound(indices.begin(), indices.end(), i);
    if (it == indices.end() || *it != i) return S{0};
    return values[static_cast<std::size_t>(it - indices.begin())];
  }

  std::vector<S> to_dense() const {
    std::vector<S> out(n, S{0});
    for (std::size_t j = 0; j < indices.size(); ++j) out[indices[j]] = values[j];
    return out;
  }

  friend bool operator==(const SparseCode&, const SparseCode&) = default;
};

template <class S>
struct SaeModel {
  using Scalar = S;
  using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
  using Vector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

  std::uint32_t n = 0;
  std::uint32_t d = 0;
  std::uint32_t k = 0;
  Variant variant = Variant::batch_topk;
  Matrix w_enc;  // n x d
  Matrix w_dec;  // d x n, unit-norm columns
  Vector b_pre;  // d
  Vector b_enc;  // n, only read by the ReLU variant
  std::vector<std::uint64_t> dead_counter;
  // Inputs are multiplied by this before encoding and reconstructions divided
  // by it; 1 unless the model was trained with input normalisation.
  S input_scale = S{1};
  nlohmann::json metadata = nlohmann::json::object();

  static SaeModel zeros(std::uint32_t d, std::uint32_t n, std::uint32_t k, Variant variant) {
    if (d == 0 || n == 0) throw ConfigError("SAE dimensions must be positive");
    SaeModel m;
    m.n = n;
    m.d = d;
    m.k = k;
    m.variant = variant;
    m.w_enc = Matrix::Zero(n, d);
    m.w_dec = Matrix::Zero(d, n);
    m.b_pre = Vector::Zero(d);
    m.b_enc = Vector::Zero(n);
    m.dead_counter.assign(n, 0);
    return m;
  }

  template <class T>
  SaeModel<T> cast() const {
    SaeModel<T> m;
    m.n = n;
    m.d = d;
    m.k = k;
    m.variant = variant;
    m.w_enc = w_enc.template cast<T>();
    m.w_dec = w_dec.template cast<T>();
    m.b_pre = b_pre.template cast<T>();
    m.b_enc = b_enc.template cast<T>();
    m.dead_counter = dead_counter;
    m.input_scale = static_cast<T>(input_scale);
    m.metadata = metadata;
    return m;
  }

  void check_input(std::size_t size) const {
    if (size != d) {
      throw DimensionError("input has " + std::to_string(size) + " values, model expects d=" + std::to_string(d));
    }
  }
};

// Keeps the `k` entries of `values` with the largest strictly positive value.
// Ties go to the lower index. Returned indices are ascending.
template <class S>
std::vector<std::uint32_t> top_k_positive(std::span<const S> values, std::size_t k) {
  std::vector<std::uint32_t> idx;
  if (k == 0) return idx;
  for (std::uint32_t i = 0; i < values.size(); ++i) {
    if (values[i] > S{0}) idx.push_back(i);
  }
  if (idx.size() > k) {
    auto before = [&](std::uint32_t a, std::uint32_t b) {
      return values[a] > values[b] || (values[a] == values[b] && a < b);
    };
    std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), before);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
  }
  return idx;
}

template <class S>
typename SaeModel<S>::Vector pre_activations(const SaeModel<S>& model, std::span<const S> x) {
  model.check_input(x.size());
  Eigen::Map<const typename SaeModel<S>::Vector> xv(x.data(), static_cast<Eigen::Index>(x.size()));
  typename SaeModel<S>::Vector p = model.w_enc * (xv * model.input_scale - model.b_pre);
  if (model.variant == Variant::relu) p += model.b_enc;
  return p;
}

namespace detail {

template <class S>
SparseCode<S> code_from_pre(const typename SaeModel<S>::Vector& p, const SaeModel<S>& model) {
  SparseCode<S> code;
  code.n = model.n;
  std::span<const S> pv(p.data(), static_cast<std::size_t>(p.size()));
  if (model.variant == Variant::relu) {
    for (std::uint32_t i = 0; i < model.n; ++i) {
      if (pv[i] > S{0}) code.indices.push_back(i);
    }
  } else {
    code.indices = top_k_positive(pv, model.k);
  }
  code.values.reserve(code.indices.size());
  for (auto i : code.indices) code.values.push_back(pv[i]);
  return code;
}

}  // namespace detail

// Per-sample encode: ReLU is applied before TopK selection, so the code holds
// min(k, #positive pre-activations) entries.
template <class S>
SparseCode<S> encode(const SaeModel<S>& model, std::span<const S> x) {
  return detail::code_from_pre(pre_activations(model, x), model);
}

template <class S>
SparseCode<S> encode(const SaeModel<S>& model, const std::vector<S>& x) {
  return encode(model, std::span<const S>(x));
}

// Selects codes from a precomputed n x B pre-activation matrix.
template <class S>
std::vector<SparseCode<S>> codes_from_pre_activations(const SaeModel<S>& model,
                                                      const typename SaeModel<S>::Matrix& P, EncodeMode mode) {
  const auto B = static_cast<std::size_t>(P.cols());
  std::vector<SparseCode<S>> codes(B);
  if (model.variant != Variant::batch_topk || mode == EncodeMode::inference) {
    parallel_for(B, [&](std::size_t b) {
      typename SaeModel<S>::Vector col = P.col(static_cast<Eigen::Index>(b));
      codes[b] = detail::code_from_pre<S>(col, model);
    });
    return codes;
  }

  // BatchTopK: the B*k globally largest positive entries, flat index b*n + i
  // for tie-breaking.
  std::span<const S> flat(P.data(), static_cast<std::size_t>(P.size()));
  const auto keep = top_k_positive(flat, B * model.k);
  for (auto& c : codes) c.n = model.n;
  for (auto f : keep) {
    const std::size_t b = f / model.n;
    const std::uint32_t i = f % model.n;
    codes[b].indices.push_back(i);
    codes[b].values.push_back(flat[f]);
  }
  return codes;
}

// X holds one sample per row (B x d).
template <class S>
std::vector<SparseCode<S>> encode_batch(const SaeModel<S>& model, const typename SaeModel<S>::Matrix& X,
                                        EncodeMode mode = EncodeMode::inference) {
  if (X.cols() != model.d) {
    throw DimensionError("batch has " + std::to_string(X.cols()) + " columns, model expects d=" +
                         std::to_string(model.d));
  }
  using Matrix = typename SaeModel<S>::Matrix;
  // P is n x B: one column of pre-activations per sample.
  Matrix P = model.w_enc * ((X * model.input_scale).transpose().colwise() - model.b_pre);
  if (model.variant == Variant::relu) P.colwise() += model.b_enc;
  return codes_from_pre_activations(model, P, mode);
}

template <class S>
typename SaeModel<S>::Vector decode_latent(const SaeModel<S>& model, const SparseCode<S>& z) {
  if (z.n != model.n) {
    throw DimensionError("code width " + std::to_string(z.n) + " does not match model n=" + std::to_string(model.n));
  }
  typename SaeModel<S>::Vector out = model.b_pre;
  for (std::size_t j = 0; j < z.indices.size(); ++j) {
    if (z.indices[j] >= model.n) throw DimensionError("code index out of range");
    out += z.values[j] * model.w_dec.col(z.indices[j]);
  }
  return out;
}

// W_dec z + b_pre, mapped back to input units.
template <class S>
typename SaeModel<S>::Vector decode(const SaeModel<S>& model, const SparseCode<S>& z) {
  typename SaeModel<S>::Vector out = decode_latent(model, z);
  if (model.input_scale != S{1}) out /= model.input_scale;
  return out;
}

template <class S>
std::vector<S> to_scalar_vector(std::span<const float> values) {
  return std::vector<S>(values.begin(), values.end());
}

}  // namespace saeuron
