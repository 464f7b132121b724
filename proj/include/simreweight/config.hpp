#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "simreweight/dataset.hpp"
#include "simreweight/metrics.hpp"
#include "simreweight/model.hpp"
#include "simreweight/reweighter.hpp"
#include "simreweight/simulator.hpp"
#include "simreweight/trainer.hpp"

namespace simreweight::config {

struct SimulatorConfig {
  sim::RandomizationRanges ranges;
  sim::ScenarioConfig real_reference = sim::default_real_reference();
  int n_scenarios = 30;
  uint64_t seed = 7;
};

struct EvalConfig {
  std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<std::string> variants{"full",
                                    "no_interaction",
                                    "no_spatial",
                                    "average_weighting",
                                    "uniform_sample_weights",
                                    "single_task"};
  int jobs = 1;
};

// The whole experiment configuration; every field is addressable by dotted
// key (e.g. "reweight.K"). Unknown keys are rejected on load.
struct RunConfig {
  SimulatorConfig simulator;
  data::DatasetConfig dataset;
  model::ModelConfig model;
  bilevel::ReweightConfig reweight;
  train::TrainConfig train;
  EvalConfig eval;
  void validate() const;
};

RunConfig default_config();

std::string to_json(const RunConfig& cfg);
RunConfig from_json(const std::string& text);
RunConfig load_file(const std::string& path);

// Applies "section.key=value" (JSON-literal value) onto the configuration.
RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& overrides);

}  // namespace simreweight::config
