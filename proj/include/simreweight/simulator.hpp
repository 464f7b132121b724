#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "simreweight/errors.hpp"

namespace simreweight::sim {

// Task channels, fixed order everywhere.
enum Task : int { kCall = 0, kSms = 1, kNet = 2 };
inline constexpr std::array<const char*, 3> kTaskNames{"call", "sms", "net"};

struct ScenarioConfig {
  int grid_rows = 8;
  int grid_cols = 8;
  int horizon_T = 336;
  int diurnal_period = 24;  // steps per day
  std::array<double, 3> base_level{5.0, 3.0, 10.0};
  std::array<double, 3> diurnal_amp{1.5, 1.0, 3.0};
  std::array<double, 3> weekly_amp{0.5, 0.4, 1.0};
  std::array<double, 3> phase_shift{6.0, 8.0, 0.0};  // steps
  int n_hotspots = 1;
  std::vector<std::pair<int, int>> hotspot_centers{{4, 4}};
  double hotspot_sigma = 1.5;
  double coupling_call_net = 0.6;
  double coupling_sms_net = 0.5;
  std::array<double, 3> noise_sigma{0.2, 0.15, 0.4};
  double burst_rate = 0.0;       // events per 1000 steps
  double burst_magnitude = 1.0;  // multiplier >= 1
  uint64_t seed = 0;

  void validate() const;
};

struct FloatRange {
  double lo = 0.0, hi = 0.0;
  FloatRange() = default;
  FloatRange(double v) : lo(v), hi(v) {}
  FloatRange(double l, double h) : lo(l), hi(h) {}
};

struct IntRange {
  int64_t lo = 0, hi = 0;
  IntRange() = default;
  IntRange(int64_t v) : lo(v), hi(v) {}
  IntRange(int64_t l, int64_t h) : lo(l), hi(h) {}
};

// One interval (or fixed value, lo == hi) per scenario field. Hotspot
// centers are drawn uniformly inside the grid.
struct RandomizationRanges {
  IntRange grid_rows{8}, grid_cols{8};
  IntRange horizon_T{336};
  IntRange diurnal_period{24};
  std::array<FloatRange, 3> base_level{FloatRange{4, 6}, FloatRange{2, 4}, FloatRange{8, 12}};
  std::array<FloatRange, 3> diurnal_amp{FloatRange{1, 2}, FloatRange{0.5, 1.5}, FloatRange{2, 4}};
  std::array<FloatRange, 3> weekly_amp{FloatRange{0.3, 0.8}, FloatRange{0.2, 0.6}, FloatRange{0.5, 1.5}};
  std::array<FloatRange, 3> phase_shift{FloatRange{4, 8}, FloatRange{6, 10}, FloatRange{0, 4}};
  IntRange n_hotspots{1, 3};
  FloatRange hotspot_sigma{1.0, 2.0};
  FloatRange coupling_call_net{0.4, 0.8};
  FloatRange coupling_sms_net{0.3, 0.7};
  std::array<FloatRange, 3> noise_sigma{FloatRange{0.15, 0.4}, FloatRange{0.1, 0.3}, FloatRange{0.3, 0.8}};
  FloatRange burst_rate{0.0};       // bursts live only in the real env by default
  FloatRange burst_magnitude{1.0};

  void validate() const;
};

// 4-D nonnegative traffic values [row, col, step, task].
struct TrafficCube {
  std::vector<double> values;
  ScenarioConfig scenario;
  int scenario_id = -1;  // -1 for the real environment

  double at(int r, int c, int t, int task) const {
    const auto& s = scenario;
    return values[static_cast<size_t>(((r * s.grid_cols + c) * s.horizon_T + t) * 3 + task)];
  }
  double& at(int r, int c, int t, int task) {
    const auto& s = scenario;
    return values[static_cast<size_t>(((r * s.grid_cols + c) * s.horizon_T + t) * 3 + task)];
  }
};

// Uniform draw of every ranged field from a deterministic counter-based
// stream; identical (ranges, seed) give identical configs.
ScenarioConfig sample_scenario(const RandomizationRanges& ranges, uint64_t seed);

TrafficCube generate_cube(const ScenarioConfig& config);

std::vector<TrafficCube> make_sim_pool(const RandomizationRanges& ranges, int n_scenarios,
                                       uint64_t seed);

// Fixed reference environment; carries burst dynamics the sim ranges lack.
TrafficCube make_real_env(const ScenarioConfig& reference);

RandomizationRanges default_sim_ranges();
ScenarioConfig default_real_reference();

}  // namespace simreweight::sim
