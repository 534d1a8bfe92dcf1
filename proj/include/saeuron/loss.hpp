#pragma once

// Training objective: mean over the batch of ||x - x_hat||^2 plus alpha times
// an auxiliary term in which the top-k_aux dead latents try to reconstruct
// the main residual. Gradients are exact for the selected active sets.

#include <cstdint>
#include <span>
#include <vector>

#include "saeuron/sae.hpp"
#include "saeuron/train_config.hpp"

namespace saeuron {

template <class S>
struct Gradients {
  typename SaeModel<S>::Matrix w_enc;
  typename SaeModel<S>::Matrix w_dec;
  typename SaeModel<S>::Vector b_pre;
  typename SaeModel<S>::Vector b_enc;
};

template <class S>
struct LossResult {
  S loss = 0;
  S main = 0;  // batch mean of squared residual norms
  S aux = 0;   // batch mean of squared auxiliary residual norms; alpha not applied
  Gradients<S> grads;
  std::vector<SparseCode<S>> codes;  // main codes, for dead-latent bookkeeping
};

// `dead_mask[i]` marks latent i as dead. With no dead latents the auxiliary
// term is zero.
template <class S>
LossResult<S> loss_and_grads(const SaeModel<S>& model, const typename SaeModel<S>::Matrix& X, const TrainConfig& cfg,
                             const std::vector<bool>& dead_mask, bool with_grads = true) {
  using Matrix = typename SaeModel<S>::Matrix;
  using Vector = typename SaeModel<S>::Vector;
  if (X.rows() == 0) throw DataError("loss_and_grads needs a non-empty batch");
  if (X.cols() != model.d) throw DimensionError("batch width does not match model d");
  if (dead_mask.size() != model.n) throw DimensionError("dead mask length does not match model n");

  const auto B = static_cast<std::size_t>(X.rows());
  const S inv_b = S{1} / static_cast<S>(B);
  const S alpha = static_cast<S>(cfg.alpha);
  const std::uint32_t k_aux = cfg.effective_k_aux(model.n);
  bool any_dead = false;
  for (bool dead : dead_mask) any_dead = any_dead || dead;

  LossResult<S> out;
  Matrix Xs = X.transpose() * model.input_scale;  // d x B
  Matrix centered = Xs.colwise() - model.b_pre;
  Matrix P = model.w_enc * centered;  // n x B
  if (model.variant == Variant::relu) P.colwise() += model.b_enc;
  out.codes = codes_from_pre_activations(model, P, EncodeMode::training);

  if (with_grads) {
    out.grads.w_enc = Matrix::Zero(model.n, model.d);
    out.grads.w_dec = Matrix::Zero(model.d, model.n);
    out.grads.b_pre = Vector::Zero(model.d);
    out.grads.b_enc = Vector::Zero(model.n);
  }

  std::vector<S> dead_pre(model.n);
  for (std::size_t b = 0; b < B; ++b) {
    const auto col = static_cast<Eigen::Index>(b);
    const SparseCode<S>& z = out.codes[b];

    Vector x_hat = model.b_pre;
    for (std::size_t j = 0; j < z.size(); ++j) x_hat += z.values[j] * model.w_dec.col(z.indices[j]);
    const Vector r = Xs.col(col) - x_hat;
    out.main += r.squaredNorm();

    std::vector<std::uint32_t> aux_idx;
    Vector q;
    if (any_dead) {
      for (std::uint32_t i = 0; i < model.n; ++i) dead_pre[i] = dead_mask[i] ? P(i, col) : S{0};
      aux_idx = top_k_positive(std::span<const S>(dead_pre), k_aux);
      Vector e_hat = Vector::Zero(model.d);
      for (auto i : aux_idx) e_hat += P(i, col) * model.w_dec.col(i);
      q = r - e_hat;
      out.aux += q.squaredNorm();
    }
    if (!with_grads) continue;

    // dL/dr and dL/d(e_hat); e_hat enters only the auxiliary term.
    Vector g_r = (S{2} * inv_b) * r;
    Vector g_e;
    if (any_dead) {
      g_r += (S{2} * inv_b * alpha) * q;
      g_e = (-S{2} * inv_b * alpha) * q;
    }
    out.grads.b_pre -= g_r;

    auto backprop_latent = [&](std::uint32_t i, S g_p) {
      out.grads.w_enc.row(i) += g_p * centered.col(col).transpose();
      out.grads.b_pre -= g_p * model.w_enc.row(i).transpose();
      if (model.variant == Variant::relu) out.grads.b_enc(i) += g_p;
    };
    for (std::size_t j = 0; j < z.size(); ++j) {
      const auto i = z.indices[j];
      out.grads.w_dec.col(i) -= z.values[j] * g_r;
      backprop_latent(i, -model.w_dec.col(i).dot(g_r));
    }
    for (auto i : aux_idx) {
      out.grads.w_dec.col(i) += P(i, col) * g_e;
      backprop_latent(i, model.w_dec.col(i).dot(g_e));
    }
  }

  out.main *= inv_b;
  out.aux *= inv_b;
  out.loss = out.main + alpha * out.aux;
  return out;
}

}  // namespace saeuron
