#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "simreweight/dataset.hpp"
#include "simreweight/model.hpp"

namespace simreweight::train {

enum class WeightingMode { kDynamic, kAverage };

struct TaskWeights {
  std::array<double, 3> w{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0};
  double alpha = 0.3;
};

// Exponential-smoothing task reweighting from per-task losses:
// w <- (1 - alpha) * w + alpha * (loss / sum(loss)). Preserves the simplex.
TaskWeights update_task_weights(const TaskWeights& tw, const std::array<double, 3>& losses);

// Weighted sum of the task losses; `average` pins the weights at 1/3.
double total_loss(const TaskWeights& tw, const std::array<double, 3>& losses, WeightingMode mode);

struct TrainConfig {
  int epochs = 40;
  int batch_size = 16;
  double learning_rate = 0.05;
  double alpha = 0.3;
  uint64_t seed = 1;
  WeightingMode weighting = WeightingMode::kDynamic;
  double grad_clip = 5.0;
  void validate() const;
};

struct EpochRow {
  int epoch;
  std::array<double, 3> losses;  // epoch means, sample-weighted
  std::array<double, 3> weights;
  double total;
};

struct TrainResult {
  model::ParamVector params;
  std::vector<EpochRow> history;
  TaskWeights final_weights;
};

// Full-batch/minibatch gradient descent with gradient-norm clipping and
// per-epoch dynamic task weighting. `sample_weights`, when given, holds one
// multiplicative weight per sim sample (already sigmoid-squashed).
TrainResult train(const model::Forecaster& f, const data::DatasetBundle& bundle,
                  const TrainConfig& cfg,
                  const std::vector<double>* sample_weights = nullptr);

std::string history_csv(const std::vector<EpochRow>& rows);

}  // namespace simreweight::train
