#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "saeuron/activation_store.hpp"
#include "saeuron/hash.hpp"
#include "saeuron/loss.hpp"
#include "saeuron/sae.hpp"
#include "saeuron/train_config.hpp"

namespace saeuron {

// Adam with bias correction. Each parameter tensor owns a slot holding its
// first and second moment estimates.
template <class S>
class AdamOptimizer {
 public:
  AdamOptimizer(double beta1, double beta2, double epsilon) : beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {}

  void begin_step() { ++t_; }
  std::uint64_t steps() const { return t_; }

  template <class Derived>
  void apply(std::size_t slot, Eigen::PlainObjectBase<Derived>& param, const Eigen::PlainObjectBase<Derived>& grad,
             double lr) {
    if (slots_.size() <= slot) slots_.resize(slot + 1);
    auto& [m, v] = slots_[slot];
    const auto size = param.size();
    if (m.size() != size) {
      m = Array::Zero(size);
      v = Array::Zero(size);
    }
    Eigen::Map<Array> p(param.data(), size);
    Eigen::Map<const Array> g(grad.data(), size);
    const S b1 = static_cast<S>(beta1_), b2 = static_cast<S>(beta2_);
    m = b1 * m + (S{1} - b1) * g;
    v = b2 * v + (S{1} - b2) * g.square();
    const S c1 = static_cast<S>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
    const S c2 = static_cast<S>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
    p -= static_cast<S>(lr) * (m / c1) / ((v / c2).sqrt() + static_cast<S>(epsilon_));
  }

 private:
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;
  double beta1_, beta2_, epsilon_;
  std::uint64_t t_ = 0;
  std::vector<std::pair<Array, Array>> slots_;
};

inline double scheduled_lr(const TrainConfig& cfg, std::uint64_t step, std::uint64_t total_steps) {
  if (cfg.lr_schedule == LrSchedule::constant || total_steps == 0) return cfg.lr;
  return cfg.lr * (1.0 - static_cast<double>(step) / static_cast<double>(total_steps));
}

template <class S>
void normalize_decoder_columns(SaeModel<S>& model) {
  for (Eigen::Index i = 0; i < model.w_dec.cols(); ++i) {
    const S norm = model.w_dec.col(i).norm();
    if (norm > S{0}) model.w_dec.col(i) /= norm;
  }
}

struct TrainLogEntry {
  std::uint64_t step = 0;
  std::uint32_t epoch = 0;
  double lr = 0;
  double loss = 0;
  double main_loss = 0;
  double aux_loss = 0;
  std::uint32_t dead_latents = 0;
};

template <class S>
struct TrainResult {
  SaeModel<S> model;
  std::vector<TrainLogEntry> log;
};

template <class S>
using StepObserver = std::function<void(const SaeModel<S>&, const TrainLogEntry&)>;

template <class S>
typename SaeModel<S>::Matrix batch_matrix(const std::vector<ActivationRecord>& batch, std::uint32_t d) {
  typename SaeModel<S>::Matrix X(static_cast<Eigen::Index>(batch.size()), d);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].values.size() != d) throw DimensionError("record width does not match d");
    for (std::uint32_t j = 0; j < d; ++j) X(static_cast<Eigen::Index>(b), j) = static_cast<S>(batch[b].values[j]);
  }
  return X;
}

inline std::string dataset_hash(const DatasetHandle& data) {
  std::ifstream in(data.manifest_path(), std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

// Decoder columns are Gaussian directions normalised to unit length, the
// encoder starts as the decoder transpose and b_pre as the data mean.
template <class S>
SaeModel<S> initialize_model(const DatasetHandle& data, const TrainConfig& cfg) {
  if (data.empty()) throw DataError("cannot train on an empty dataset");
  const std::uint32_t d = data.d();
  cfg.validate(d);
  auto model = SaeModel<S>::zeros(d, cfg.latent_count(d), cfg.k, cfg.variant);

  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (Eigen::Index c = 0; c < model.w_dec.cols(); ++c) {
    for (Eigen::Index r = 0; r < model.w_dec.rows(); ++r) model.w_dec(r, c) = static_cast<S>(gauss(rng));
  }
  normalize_decoder_columns(model);
  model.w_enc = model.w_dec.transpose();

  Eigen::VectorXd sum = Eigen::VectorXd::Zero(d);
  double norm_sum = 0;
  auto stream = iterate_batches(data, 4096, false);
  std::vector<ActivationRecord> batch;
  while (stream.next(batch)) {
    for (const auto& r : batch) {
      Eigen::Map<const Eigen::VectorXf> x(r.values.data(), d);
      sum += x.cast<double>();
      norm_sum += x.cast<double>().norm();
    }
  }
  const double count = static_cast<double>(data.size());
  double scale = 1.0;
  if (cfg.normalize_input == InputNormalization::unit_norm && norm_sum > 0) scale = count / norm_sum;
  model.input_scale = static_cast<S>(scale);
  model.b_pre = (sum * (scale / count)).cast<S>();

  model.metadata = {{"train_config", to_json(cfg)},
                    {"provenance",
                     {{"block_name", data.manifest().block_name}, {"dataset_hash", dataset_hash(data)}}}};
  return model;
}

template <class S>
TrainResult<S> train(const DatasetHandle& data, const TrainConfig& cfg, const StepObserver<S>& observer = {}) {
  TrainResult<S> result{initialize_model<S>(data, cfg), {}};
  SaeModel<S>& model = result.model;

  const std::uint64_t batches_per_epoch = (data.size() + cfg.batch_size - 1) / cfg.batch_size;
  std::uint64_t total_steps = batches_per_epoch * cfg.epochs;
  if (cfg.max_steps > 0) total_steps = std::min(total_steps, cfg.max_steps);

  AdamOptimizer<S> adam(cfg.beta1, cfg.beta2, cfg.epsilon);
  std::vector<bool> dead_mask(model.n);
  std::vector<bool> fired(model.n);
  std::vector<ActivationRecord> batch;
  std::uint64_t step = 0;

  for (std::uint32_t epoch = 0; epoch < cfg.epochs && step < total_steps; ++epoch) {
    auto stream = iterate_batches(data, cfg.batch_size, true, epoch);
    while (step < total_steps && stream.next(batch)) {
      const auto X = batch_matrix<S>(batch, model.d);
      std::uint32_t dead_count = 0;
      for (std::uint32_t i = 0; i < model.n; ++i) {
        dead_mask[i] = model.dead_counter[i] >= cfg.dead_threshold;
        dead_count += dead_mask[i] ? 1 : 0;
      }

      const double lr = scheduled_lr(cfg, step, total_steps);
      auto lg = loss_and_grads(model, X, cfg, dead_mask, true);
      if (!std::isfinite(static_cast<double>(lg.loss))) {
        std::ostringstream msg;
        msg << "non-finite loss at step " << step << " (epoch " << epoch << "): main=" << lg.main
            << " aux=" << lg.aux << " lr=" << lr;
        throw NumericError(msg.str());
      }

      adam.begin_step();
      adam.apply(0, model.w_enc, lg.grads.w_enc, lr);
      adam.apply(1, model.w_dec, lg.grads.w_dec, lr);
      adam.apply(2, model.b_pre, lg.grads.b_pre, lr);
      if (model.variant == Variant::relu) adam.apply(3, model.b_enc, lg.grads.b_enc, lr);
      normalize_decoder_columns(model);

      std::fill(fired.begin(), fired.end(), false);
      for (const auto& code : lg.codes) {
        for (std::size_t j = 0; j < code.size(); ++j) {
          if (code.values[j] > S{0}) fired[code.indices[j]] = true;
        }
      }
      for (std::uint32_t i = 0; i < model.n; ++i) {
        auto& c = model.dead_counter[i];
        if (fired[i]) {
          c = 0;
        } else {
          c = (c > std::numeric_limits<std::uint64_t>::max() - batch.size()) ? std::numeric_limits<std::uint64_t>::max()
                                                                           : c + batch.size();
        }
      }

      TrainLogEntry entry{step, epoch, lr, static_cast<double>(lg.loss), static_cast<double>(lg.main),
                          static_cast<double>(lg.aux), dead_count};
      result.log.push_back(entry);
      if (observer) observer(model, entry);
      ++step;
    }
  }
  return result;
}

}  // namespace saeuron
