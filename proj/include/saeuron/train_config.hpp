#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "saeuron/errors.hpp"
#include "saeuron/sae.hpp"

namespace saeuron {

enum class LrSchedule { constant, linear_decay };
enum class InputNormalization { none, unit_norm };

struct TrainConfig {
  Variant variant = Variant::batch_topk;
  std::uint32_t expansion_factor = 16;
  std::uint32_t k = 32;
  std::uint32_t k_aux = 0;  // 0 selects the power of two closest to n/2
  double alpha = 1.0 / 32.0;
  double lr = 4e-4;
  std::uint32_t batch_size = 4096;
  std::uint32_t epochs = 5;
  std::uint64_t max_steps = 0;  // 0 = run every batch of every epoch
  std::uint64_t dead_threshold = 10'000'000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  LrSchedule lr_schedule = LrSchedule::linear_decay;
  std::uint64_t seed = 0;
  InputNormalization normalize_input = InputNormalization::none;

  std::uint32_t latent_count(std::uint32_t d) const { return d * expansion_factor; }

  // Power of two nearest to n/2 (the smaller one on ties), capped at n.
  static std::uint32_t default_k_aux(std::uint32_t n) {
    const double half = n / 2.0;
    std::uint32_t lo = 1;
    while (static_cast<double>(lo) * 2 <= half) lo *= 2;
    const std::uint64_t hi = std::uint64_t{lo} * 2;
    const std::uint64_t pick = (half - lo <= static_cast<double>(hi) - half) ? lo : hi;
    return static_cast<std::uint32_t>(std::min<std::uint64_t>(pick, n));
  }

  std::uint32_t effective_k_aux(std::uint32_t n) const { return k_aux == 0 ? default_k_aux(n) : k_aux; }

  void validate(std::uint32_t d) const {
    if (expansion_factor == 0) throw ConfigError("expansion factor must be a positive integer");
    const std::uint32_t n = latent_count(d);
    if (k > n) throw ConfigError("k exceeds the latent count n=" + std::to_string(n));
    if (k_aux > n) throw ConfigError("k_aux exceeds the latent count n=" + std::to_string(n));
    if (!(alpha >= 0.0)) throw ConfigError("alpha must be non-negative");
    if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
    if (batch_size == 0) throw ConfigError("batch size must be at least 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
    if (!(epsilon > 0.0)) throw ConfigError("Adam epsilon must be positive");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"variant", to_string(c.variant)},
          {"expansion_factor", c.expansion_factor},
          {"k", c.k},
          {"k_aux", c.k_aux},
          {"alpha", c.alpha},
          {"lr", c.lr},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"max_steps", c.max_steps},
          {"dead_threshold", c.dead_threshold},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"lr_schedule", c.lr_schedule == LrSchedule::constant ? "constant" : "linear-decay-to-zero"},
          {"seed", c.seed},
          {"normalize_input", c.normalize_input == InputNormalization::none ? "none" : "unit-norm"}};
}

// Missing keys keep the values already in `base`, so a JSON file can overlay defaults.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  try {
    if (j.contains("variant")) base.variant = variant_from_string(j["variant"].get<std::string>());
    if (j.contains("expansion_factor")) base.expansion_factor = j["expansion_factor"].get<std::uint32_t>();
    if (j.contains("k")) base.k = j["k"].get<std::uint32_t>();
    if (j.contains("k_aux")) base.k_aux = j["k_aux"].get<std::uint32_t>();
    if (j.contains("alpha")) base.alpha = j["alpha"].get<double>();
    if (j.contains("lr")) base.lr = j["lr"].get<double>();
    if (j.contains("batch_size")) base.batch_size = j["batch_size"].get<std::uint32_t>();
    if (j.contains("epochs")) base.epochs = j["epochs"].get<std::uint32_t>();
    if (j.contains("max_steps")) base.max_steps = j["max_steps"].get<std::uint64_t>();
    if (j.contains("dead_threshold")) base.dead_threshold = j["dead_threshold"].get<std::uint64_t>();
    if (j.contains("beta1")) base.beta1 = j["beta1"].get<double>();
    if (j.contains("beta2")) base.beta2 = j["beta2"].get<double>();
    if (j.contains("epsilon")) base.epsilon = j["epsilon"].get<double>();
    if (j.contains("lr_schedule")) {
      const auto s = j["lr_schedule"].get<std::string>();
      if (s == "constant") {
        base.lr_schedule = LrSchedule::constant;
      } else if (s == "linear-decay-to-zero" || s == "linear") {
        base.lr_schedule = LrSchedule::linear_decay;
      } else {
        throw ConfigError("unknown lr_schedule '" + s + "'");
      }
    }
    if (j.contains("seed")) base.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("normalize_input")) {
      const auto s = j["normalize_input"].get<std::string>();
      if (s == "none") {
        base.normalize_input = InputNormalization::none;
      } else if (s == "unit-norm") {
        base.normalize_input = InputNormalization::unit_norm;
      } else {
        throw ConfigError("unknown normalize_input '" + s + "'");
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad training config: ") + e.what());
  }
  return base;
}

}  // namespace saeuron
