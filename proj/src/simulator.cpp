#include "simreweight/simulator.hpp"

#include <cmath>

#include "simreweight/rng.hpp"

namespace simreweight::sim {

namespace {

constexpr double kTwoPi = 6.283185307179586476925286766559;

// Stream ids for the counter-based generator; field draws and per-cell
// noise must never collide.
enum Stream : uint64_t {
  kFieldBase = 100,      // +task
  kFieldDiurnal = 110,   // +task
  kFieldWeekly = 120,    // +task
  kFieldPhase = 130,     // +task
  kFieldNoise = 140,     // +task
  kFieldScalar = 200,    // +field index
  kFieldHotspot = 300,   // counters 2h, 2h+1
  kNoise = 400,          // +task, counter = cell*T + t
  kBurstCount = 500,
  kBurstPos = 501,
};

double clip0(double v) { return v > 0.0 ? v : 0.0; }

void check_interval(double lo, double hi, const char* field) {
  if (!(lo <= hi) || !std::isfinite(lo) || !std::isfinite(hi))
    throw InvalidRange(std::string("randomization range for ") + field + " is invalid");
}

}  // namespace

void ScenarioConfig::validate() const {
  if (grid_rows <= 0 || grid_cols <= 0 || horizon_T <= 0)
    throw InvalidRange("scenario: grid and horizon must be positive");
  if (diurnal_period < 2) throw InvalidRange("scenario: diurnal_period must be >= 2");
  if (n_hotspots < 0 || static_cast<size_t>(n_hotspots) != hotspot_centers.size())
    throw InvalidRange("scenario: hotspot count does not match centers");
  for (const auto& [r, c] : hotspot_centers)
    if (r < 0 || r >= grid_rows || c < 0 || c >= grid_cols)
      throw InvalidRange("scenario: hotspot center outside grid");
  for (int t = 0; t < 3; ++t) {
    if (base_level[t] < 0 || diurnal_amp[t] < 0 || weekly_amp[t] < 0 || noise_sigma[t] < 0)
      throw InvalidRange("scenario: levels, amplitudes and sigmas must be nonnegative");
    if (!std::isfinite(base_level[t]) || !std::isfinite(diurnal_amp[t]) ||
        !std::isfinite(weekly_amp[t]) || !std::isfinite(phase_shift[t]) ||
        !std::isfinite(noise_sigma[t]))
      throw InvalidRange("scenario: non-finite field");
  }
  if (coupling_call_net < 0 || coupling_call_net > 1 || coupling_sms_net < 0 || coupling_sms_net > 1)
    throw InvalidRange("scenario: couplings must lie in [0,1]");
  if (hotspot_sigma <= 0 || !std::isfinite(hotspot_sigma))
    throw InvalidRange("scenario: hotspot_sigma must be positive");
  if (burst_rate < 0 || burst_magnitude < 1.0)
    throw InvalidRange("scenario: burst_rate >= 0 and burst_magnitude >= 1 required");
}

void RandomizationRanges::validate() const {
  auto chk_i = [](const IntRange& r, const char* f) {
    if (r.lo > r.hi) throw InvalidRange(std::string("randomization range for ") + f + " is invalid");
  };
  chk_i(grid_rows, "grid_rows");
  chk_i(grid_cols, "grid_cols");
  chk_i(horizon_T, "horizon_T");
  chk_i(diurnal_period, "diurnal_period");
  chk_i(n_hotspots, "n_hotspots");
  for (int t = 0; t < 3; ++t) {
    check_interval(base_level[t].lo, base_level[t].hi, "base_level");
    check_interval(diurnal_amp[t].lo, diurnal_amp[t].hi, "diurnal_amp");
    check_interval(weekly_amp[t].lo, weekly_amp[t].hi, "weekly_amp");
    check_interval(phase_shift[t].lo, phase_shift[t].hi, "phase_shift");
    check_interval(noise_sigma[t].lo, noise_sigma[t].hi, "noise_sigma");
  }
  check_interval(hotspot_sigma.lo, hotspot_sigma.hi, "hotspot_sigma");
  check_interval(coupling_call_net.lo, coupling_call_net.hi, "coupling_call_net");
  check_interval(coupling_sms_net.lo, coupling_sms_net.hi, "coupling_sms_net");
  check_interval(burst_rate.lo, burst_rate.hi, "burst_rate");
  check_interval(burst_magnitude.lo, burst_magnitude.hi, "burst_magnitude");
}

ScenarioConfig sample_scenario(const RandomizationRanges& ranges, uint64_t seed) {
  ranges.validate();
  rng::Counter rc(seed);
  ScenarioConfig cfg;
  cfg.grid_rows = static_cast<int>(rc.uniform_int(kFieldScalar + 0, 0, ranges.grid_rows.lo, ranges.grid_rows.hi));
  cfg.grid_cols = static_cast<int>(rc.uniform_int(kFieldScalar + 1, 0, ranges.grid_cols.lo, ranges.grid_cols.hi));
  cfg.horizon_T = static_cast<int>(rc.uniform_int(kFieldScalar + 2, 0, ranges.horizon_T.lo, ranges.horizon_T.hi));
  cfg.diurnal_period =
      static_cast<int>(rc.uniform_int(kFieldScalar + 3, 0, ranges.diurnal_period.lo, ranges.diurnal_period.hi));
  for (int t = 0; t < 3; ++t) {
    cfg.base_level[t] = rc.uniform(kFieldBase + t, 0, ranges.base_level[t].lo, ranges.base_level[t].hi);
    cfg.diurnal_amp[t] = rc.uniform(kFieldDiurnal + t, 0, ranges.diurnal_amp[t].lo, ranges.diurnal_amp[t].hi);
    cfg.weekly_amp[t] = rc.uniform(kFieldWeekly + t, 0, ranges.weekly_amp[t].lo, ranges.weekly_amp[t].hi);
    cfg.phase_shift[t] = rc.uniform(kFieldPhase + t, 0, ranges.phase_shift[t].lo, ranges.phase_shift[t].hi);
    cfg.noise_sigma[t] = rc.uniform(kFieldNoise + t, 0, ranges.noise_sigma[t].lo, ranges.noise_sigma[t].hi);
  }
  cfg.n_hotspots = static_cast<int>(rc.uniform_int(kFieldScalar + 4, 0, ranges.n_hotspots.lo, ranges.n_hotspots.hi));
  cfg.hotspot_centers.clear();
  for (int h = 0; h < cfg.n_hotspots; ++h) {
    int r = static_cast<int>(rc.uniform_int(kFieldHotspot, 2 * static_cast<uint64_t>(h), 0, cfg.grid_rows - 1));
    int c = static_cast<int>(rc.uniform_int(kFieldHotspot, 2 * static_cast<uint64_t>(h) + 1, 0, cfg.grid_cols - 1));
    cfg.hotspot_centers.emplace_back(r, c);
  }
  cfg.hotspot_sigma = rc.uniform(kFieldScalar + 5, 0, ranges.hotspot_sigma.lo, ranges.hotspot_sigma.hi);
  cfg.coupling_call_net =
      rc.uniform(kFieldScalar + 6, 0, ranges.coupling_call_net.lo, ranges.coupling_call_net.hi);
  cfg.coupling_sms_net =
      rc.uniform(kFieldScalar + 7, 0, ranges.coupling_sms_net.lo, ranges.coupling_sms_net.hi);
  cfg.burst_rate = rc.uniform(kFieldScalar + 8, 0, ranges.burst_rate.lo, ranges.burst_rate.hi);
  cfg.burst_magnitude =
      rc.uniform(kFieldScalar + 9, 0, ranges.burst_magnitude.lo, ranges.burst_magnitude.hi);
  cfg.seed = seed;
  cfg.validate();
  return cfg;
}

TrafficCube generate_cube(const ScenarioConfig& config) {
  config.validate();
  const int R = config.grid_rows, C = config.grid_cols, T = config.horizon_T;
  TrafficCube cube;
  cube.scenario = config;
  cube.values.assign(static_cast<size_t>(R) * C * T * 3, 0.0);

  rng::Counter rc(config.seed);

  // Burst factor shared by all tasks: each Poisson event multiplies a
  // 3-step window; overlapping events compound.
  std::vector<double> burst(static_cast<size_t>(T), 1.0);
  if (config.burst_rate > 0.0 && config.burst_magnitude > 1.0) {
    double lambda = config.burst_rate * static_cast<double>(T) / 1000.0;
    int n_events = rc.poisson(kBurstCount, lambda);
    for (int e = 0; e < n_events; ++e) {
      int start = static_cast<int>(rc.uniform_int(kBurstPos, static_cast<uint64_t>(e), 0, T - 3));
      for (int t = start; t < start + 3 && t < T; ++t) burst[static_cast<size_t>(t)] *= config.burst_magnitude;
    }
  }

  std::vector<double> spatial(static_cast<size_t>(R) * C, 1.0);
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      double s = 1.0;
      for (const auto& [hr, hc] : config.hotspot_centers) {
        double d2 = static_cast<double>((r - hr) * (r - hr) + (c - hc) * (c - hc));
        s += std::exp(-d2 / (2.0 * config.hotspot_sigma * config.hotspot_sigma));
      }
      spatial[static_cast<size_t>(r * C + c)] = s;
    }
  }

  const double period = static_cast<double>(config.diurnal_period);
  auto seasonal = [&](int task, int t) {
    double v = config.base_level[task] +
               config.diurnal_amp[task] *
                   std::sin(kTwoPi * static_cast<double>(t) / period + config.phase_shift[task]) +
               config.weekly_amp[task] * std::sin(kTwoPi * static_cast<double>(t) / (7.0 * period));
    return clip0(v);
  };

  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      const double sp = spatial[static_cast<size_t>(r * C + c)];
      const uint64_t cell = static_cast<uint64_t>(r * C + c);
      // Net first; Call and SMS couple to the previous step's Net value.
      for (int t = 0; t < T; ++t) {
        double noise = config.noise_sigma[kNet] == 0.0
                           ? 0.0
                           : rc.normal(kNoise + static_cast<uint64_t>(kNet),
                                       cell * static_cast<uint64_t>(T) + static_cast<uint64_t>(t),
                                       0.0, config.noise_sigma[kNet]);
        cube.at(r, c, t, kNet) = clip0(seasonal(kNet, t) * sp * burst[static_cast<size_t>(t)] + noise);
      }
      for (int t = 0; t < T; ++t) {
        double lagged = cube.at(r, c, t > 0 ? t - 1 : 0, kNet);
        for (int task : {kCall, kSms}) {
          double coupling = task == kCall ? config.coupling_call_net : config.coupling_sms_net;
          double noise = config.noise_sigma[task] == 0.0
                             ? 0.0
                             : rc.normal(kNoise + static_cast<uint64_t>(task),
                                         cell * static_cast<uint64_t>(T) + static_cast<uint64_t>(t), 0.0,
                                         config.noise_sigma[task]);
          cube.at(r, c, t, task) =
              clip0(coupling * lagged + seasonal(task, t) * sp * burst[static_cast<size_t>(t)] + noise);
        }
      }
    }
  }
  return cube;
}

std::vector<TrafficCube> make_sim_pool(const RandomizationRanges& ranges, int n_scenarios,
                                       uint64_t seed) {
  ranges.validate();
  std::vector<TrafficCube> pool;
  pool.reserve(static_cast<size_t>(n_scenarios));
  for (int s = 0; s < n_scenarios; ++s) {
    ScenarioConfig cfg = sample_scenario(ranges, rng::mix(seed, static_cast<uint64_t>(s)));
    TrafficCube cube = generate_cube(cfg);
    cube.scenario_id = s;
    pool.push_back(std::move(cube));
  }
  return pool;
}

TrafficCube make_real_env(const ScenarioConfig& reference) {
  TrafficCube cube = generate_cube(reference);
  cube.scenario_id = -1;
  return cube;
}

RandomizationRanges default_sim_ranges() { return RandomizationRanges{}; }

ScenarioConfig default_real_reference() {
  ScenarioConfig cfg;
  cfg.grid_rows = 8;
  cfg.grid_cols = 8;
  cfg.horizon_T = 336;
  cfg.diurnal_period = 24;
  cfg.base_level = {5.0, 3.0, 10.0};
  cfg.diurnal_amp = {1.5, 1.0, 3.0};
  cfg.weekly_amp = {0.55, 0.4, 1.0};
  cfg.phase_shift = {6.0, 8.0, 2.0};
  cfg.n_hotspots = 1;
  cfg.hotspot_centers = {{4, 4}};
  cfg.hotspot_sigma = 1.5;
  cfg.coupling_call_net = 0.6;
  cfg.coupling_sms_net = 0.5;
  cfg.noise_sigma = {0.25, 0.2, 0.5};
  // The reality gap: burst dynamics absent from the randomization ranges.
  cfg.burst_rate = 12.0;
  cfg.burst_magnitude = 2.5;
  cfg.seed = 971;
  return cfg;
}

}  // namespace simreweight::sim
