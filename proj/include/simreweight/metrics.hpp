#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "simreweight/dataset.hpp"
#include "simreweight/model.hpp"
#include "simreweight/reweighter.hpp"
#include "simreweight/trainer.hpp"

namespace simreweight::evalh {

double mae(const std::vector<double>& pred, const std::vector<double>& target);
double rmse(const std::vector<double>& pred, const std::vector<double>& target);

struct TaskMetrics {
  double mae = 0.0;
  double rmse = 0.0;
};

struct MetricsReport {
  std::string split;
  std::array<TaskMetrics, 3> tasks;  // de-normalized traffic units
  int n_samples = 0;
  uint64_t seed = 0;
  std::string weighting_mode;
  std::string variant;
  std::string model_config_json;
  uint64_t dataset_checksum = 0;
  double wall_clock_sec = 0.0;  // logged only; the serialized report is deterministic
};

MetricsReport evaluate(const model::Forecaster& f, const model::ParamVector& pv,
                       const data::DatasetBundle& bundle, const std::string& split);

std::string report_json(const MetricsReport& r);
// Two-decimal table row, e.g. "Call MAE 0.29 / RMSE 0.40".
std::string format_metrics_row(const std::string& task, const TaskMetrics& m);

enum class Variant {
  kFull,
  kNoInteraction,
  kNoSpatial,
  kAverageWeighting,
  kUniformSampleWeights,
  kSingleTask,
};
const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

struct PipelineConfig {
  model::ModelConfig model;
  train::TrainConfig train;
  bilevel::ReweightConfig reweight;
};

struct VariantRun {
  Variant variant = Variant::kFull;
  uint64_t seed = 0;
  MetricsReport report;
  std::vector<double> sigma_w;  // effective sim-sample weights used for training
};

// One ablation cell: bilevel reweighting on the variant architecture
// (skipped for uniform_sample_weights), then training with the frozen
// sigmoid weights and the variant's loss weighting, then test metrics.
VariantRun run_variant(const data::DatasetBundle& bundle, const PipelineConfig& cfg, Variant v,
                       uint64_t seed);

std::vector<VariantRun> run_ablation(const data::DatasetBundle& bundle, const PipelineConfig& cfg,
                                     const std::vector<Variant>& variants,
                                     const std::vector<uint64_t>& seeds, int jobs = 1);

// Aggregate CSV shaped like the ablation table: variant,metric,call,sms,net
// with per-variant means over seeds.
std::string ablation_csv(const std::vector<VariantRun>& runs);

struct ReweightCompare {
  std::vector<double> sigma_gap;       // per seed: mean sigma(clean) - mean sigma(corrupt)
  std::vector<double> mae_uniform;     // per seed: mean task MAE on test
  std::vector<double> mae_reweighted;  // per seed
  int wins = 0;                        // seeds with reweighted <= uniform
};

// Corruption benchmark comparison between uniform weights and the full
// reweighting pipeline on a bundle whose sim targets are half corrupted.
ReweightCompare compare_reweighting(const data::DatasetBundle& corrupted,
                                    const std::vector<int>& corrupted_idx,
                                    const PipelineConfig& cfg, const std::vector<uint64_t>& seeds);

}  // namespace simreweight::evalh
