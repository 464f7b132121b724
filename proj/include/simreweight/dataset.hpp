#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "simreweight/simulator.hpp"

namespace simreweight::data {

// One supervised instance. Values are step-major: input[t * patch_cells + p].
// Temporal markers are shared across tasks (same clock).
struct TaskWindow {
  std::vector<double> input;   // [L_in x patch_cells]
  std::vector<double> token;   // [L_token x patch_cells], suffix of input
  std::vector<double> target;  // [L_out], center cell
};

struct WindowSample {
  std::array<TaskWindow, 3> tasks;
  std::vector<int> enc_hour, enc_dow;  // [L_in]
  std::vector<int> dec_hour, dec_dow;  // [L_token + L_out]
  std::string source;                  // "sim" | "real"
  int scenario_id = -1;
  int sample_id = -1;
};

// Per patch-cell per task z-score statistics, computed from sim data only.
struct NormStats {
  int patch_rows = 0, patch_cols = 0;
  std::vector<double> mean;  // [patch_cells * 3], cell-major
  std::vector<double> stdev;
  double mean_at(int cell, int task) const { return mean[static_cast<size_t>(cell * 3 + task)]; }
  double std_at(int cell, int task) const { return stdev[static_cast<size_t>(cell * 3 + task)]; }
};

struct DatasetBundle {
  std::vector<WindowSample> sim;   // D_s
  std::vector<WindowSample> val;   // D_v, real env only
  std::vector<WindowSample> test;  // real env only
  NormStats stats;
  bool normalized = false;
  int L_in = 24, L_token = 12, L_out = 6;
  int patch_rows = 3, patch_cols = 3;
  int patch_r0 = 0, patch_c0 = 0;  // patch origin in grid coordinates
  int hours_per_day = 24;
  std::string config_echo;  // JSON echo of the generating configuration

  int patch_cells() const { return patch_rows * patch_cols; }
  int center_cell() const { return (patch_rows / 2) * patch_cols + patch_cols / 2; }
  void validate() const;
};

// Sliding windows over time for all cells of the centered patch;
// count = floor((T - L_in - L_out) / stride) + 1.
std::vector<WindowSample> window(const sim::TrafficCube& cube, int L_in, int L_token, int L_out,
                                 int stride, int patch_rows, int patch_cols);

struct DatasetConfig {
  int L_in = 24, L_token = 12, L_out = 6, stride = 6;
  int patch_rows = 3, patch_cols = 3;
  // Keeps |D_s| at a few hundred samples: windows per sim cube are
  // subsampled evenly down to this cap (0 = keep all).
  int max_windows_per_cube = 4;
  void validate() const;
};

// Full assembly: window the sim pool into D_s and split the real cube into
// val/test halves disjoint in time (windows straddling the midpoint are
// dropped), then z-score with sim statistics.
DatasetBundle build_bundle(const std::vector<sim::TrafficCube>& pool, const sim::TrafficCube& real,
                           const DatasetConfig& cfg, const std::string& config_echo);

// Z-score per patch cell per task using sim input windows only; stats are
// stored for the inverse transform. No-op if already normalized.
void normalize(DatasetBundle& bundle);

double denormalize_target(const DatasetBundle& bundle, int task, double value);

void save(const DatasetBundle& bundle, const std::string& dir);
DatasetBundle load(const std::string& dir);

// FNV-1a over the canonical CSV serialization of all three splits.
uint64_t checksum(const DatasetBundle& bundle);

// Corruption benchmark support: replaces the targets of a seeded random
// half of the sim samples (all tasks) with independent N(0,1) noise.
// Returns the corrupted sample indices.
std::vector<int> corrupt_half_targets(DatasetBundle& bundle, uint64_t seed);

}  // namespace simreweight::data
