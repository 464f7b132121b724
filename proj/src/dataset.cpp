#include "simreweight/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "simreweight/errors.hpp"
#include "simreweight/rng.hpp"

namespace simreweight::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void fnv_update(uint64_t& h, const std::string& s) {
  for (unsigned char c : s) {
    h ^= static_cast<uint64_t>(c);
    h *= 1099511628211ULL;
  }
}

constexpr const char* kCsvHeader = "sample_id,scenario_id,source,task,role,step,cell_row,cell_col,value\n";

}  // namespace

void DatasetConfig::validate() const {
  if (L_in <= 0 || L_token <= 0 || L_out <= 0 || stride <= 0)
    throw ConfigError("dataset: window lengths and stride must be positive");
  if (L_token > L_in) throw ConfigError("dataset: L_token must not exceed L_in");
  if (patch_rows <= 0 || patch_cols <= 0) throw ConfigError("dataset: patch must be nonempty");
  if (max_windows_per_cube < 0) throw ConfigError("dataset: max_windows_per_cube must be >= 0");
}

void DatasetBundle::validate() const {
  if (sim.empty()) throw ConfigError("bundle: sim split must be nonempty");
  for (const auto& s : val)
    if (s.source != "real") throw ConfigError("bundle: val split contains non-real sample");
  for (const auto& s : test)
    if (s.source != "real") throw ConfigError("bundle: test split contains non-real sample");
  for (const auto& s : sim)
    if (s.source != "sim") throw ConfigError("bundle: sim split contains non-sim sample");
}

std::vector<WindowSample> window(const sim::TrafficCube& cube, int L_in, int L_token, int L_out,
                                 int stride, int patch_rows, int patch_cols) {
  const auto& sc = cube.scenario;
  if (L_in + L_out > sc.horizon_T) throw WindowTooLong("window: L_in + L_out exceeds horizon");
  if (L_token > L_in) throw WindowTooLong("window: L_token exceeds L_in");
  if (stride <= 0) throw WindowTooLong("window: stride must be positive");
  if (patch_rows > sc.grid_rows || patch_cols > sc.grid_cols)
    throw WindowTooLong("window: patch exceeds grid");

  const int r0 = (sc.grid_rows - patch_rows) / 2;
  const int c0 = (sc.grid_cols - patch_cols) / 2;
  const int P = patch_rows * patch_cols;
  const int center_r = r0 + patch_rows / 2;
  const int center_c = c0 + patch_cols / 2;
  const int count = (sc.horizon_T - L_in - L_out) / stride + 1;
  const int L_dec = L_token + L_out;

  std::vector<WindowSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int s = i * stride;
    WindowSample w;
    w.source = cube.scenario_id < 0 ? "real" : "sim";
    w.scenario_id = cube.scenario_id;
    w.enc_hour.resize(static_cast<size_t>(L_in));
    w.enc_dow.resize(static_cast<size_t>(L_in));
    for (int t = 0; t < L_in; ++t) {
      int abs_t = s + t;
      w.enc_hour[static_cast<size_t>(t)] = abs_t % sc.diurnal_period;
      w.enc_dow[static_cast<size_t>(t)] = (abs_t / sc.diurnal_period) % 7;
    }
    w.dec_hour.resize(static_cast<size_t>(L_dec));
    w.dec_dow.resize(static_cast<size_t>(L_dec));
    for (int t = 0; t < L_dec; ++t) {
      int abs_t = s + L_in - L_token + t;
      w.dec_hour[static_cast<size_t>(t)] = abs_t % sc.diurnal_period;
      w.dec_dow[static_cast<size_t>(t)] = (abs_t / sc.diurnal_period) % 7;
    }
    for (int task = 0; task < 3; ++task) {
      TaskWindow& tw = w.tasks[static_cast<size_t>(task)];
      tw.input.resize(static_cast<size_t>(L_in * P));
      for (int t = 0; t < L_in; ++t)
        for (int pr = 0; pr < patch_rows; ++pr)
          for (int pc = 0; pc < patch_cols; ++pc)
            tw.input[static_cast<size_t>(t * P + pr * patch_cols + pc)] =
                cube.at(r0 + pr, c0 + pc, s + t, task);
      tw.token.resize(static_cast<size_t>(L_token * P));
      for (int t = 0; t < L_token; ++t)
        for (int p = 0; p < P; ++p)
          tw.token[static_cast<size_t>(t * P + p)] =
              tw.input[static_cast<size_t>((L_in - L_token + t) * P + p)];
      tw.target.resize(static_cast<size_t>(L_out));
      for (int t = 0; t < L_out; ++t)
        tw.target[static_cast<size_t>(t)] = cube.at(center_r, center_c, s + L_in + t, task);
    }
    out.push_back(std::move(w));
  }
  return out;
}

DatasetBundle build_bundle(const std::vector<sim::TrafficCube>& pool, const sim::TrafficCube& real,
                           const DatasetConfig& cfg, const std::string& config_echo) {
  cfg.validate();
  if (pool.empty()) throw ConfigError("build_bundle: empty sim pool");
  DatasetBundle b;
  b.L_in = cfg.L_in;
  b.L_token = cfg.L_token;
  b.L_out = cfg.L_out;
  b.patch_rows = cfg.patch_rows;
  b.patch_cols = cfg.patch_cols;
  b.patch_r0 = (real.scenario.grid_rows - cfg.patch_rows) / 2;
  b.patch_c0 = (real.scenario.grid_cols - cfg.patch_cols) / 2;
  b.hours_per_day = real.scenario.diurnal_period;
  b.config_echo = config_echo;

  for (const auto& cube : pool) {
    auto ws = window(cube, cfg.L_in, cfg.L_token, cfg.L_out, cfg.stride, cfg.patch_rows, cfg.patch_cols);
    if (cfg.max_windows_per_cube > 0 && static_cast<int>(ws.size()) > cfg.max_windows_per_cube) {
      // Even subsample across the horizon.
      std::vector<WindowSample> kept;
      int n = static_cast<int>(ws.size());
      for (int k = 0; k < cfg.max_windows_per_cube; ++k) {
        int idx = static_cast<int>((static_cast<int64_t>(k) * n) / cfg.max_windows_per_cube);
        kept.push_back(std::move(ws[static_cast<size_t>(idx)]));
      }
      ws = std::move(kept);
    }
    for (auto& w : ws) b.sim.push_back(std::move(w));
  }

  // Real windows: halves disjoint in time; windows that straddle the
  // midpoint are dropped.
  auto rw = window(real, cfg.L_in, cfg.L_token, cfg.L_out, cfg.stride, cfg.patch_rows, cfg.patch_cols);
  const int mid = real.scenario.horizon_T / 2;
  const int total_len = cfg.L_in + cfg.L_out;
  for (size_t i = 0; i < rw.size(); ++i) {
    int start = static_cast<int>(i) * cfg.stride;
    if (start + total_len <= mid)
      b.val.push_back(std::move(rw[i]));
    else if (start >= mid)
      b.test.push_back(std::move(rw[i]));
  }
  if (b.val.empty() || b.test.empty())
    throw ConfigError("build_bundle: real horizon too short for a val/test split");

  int id = 0;
  for (auto* split : {&b.sim, &b.val, &b.test})
    for (auto& w : *split) w.sample_id = id++;
  b.validate();
  return b;
}

void normalize(DatasetBundle& b) {
  if (b.normalized) return;
  const int P = b.patch_cells();
  b.stats.patch_rows = b.patch_rows;
  b.stats.patch_cols = b.patch_cols;
  b.stats.mean.assign(static_cast<size_t>(P * 3), 0.0);
  b.stats.stdev.assign(static_cast<size_t>(P * 3), 1.0);

  // Statistics from sim input windows only; real data never leaks into
  // preprocessing.
  for (int task = 0; task < 3; ++task) {
    for (int p = 0; p < P; ++p) {
      double sum = 0.0, sum2 = 0.0;
      int64_t n = 0;
      for (const auto& s : b.sim) {
        const auto& in = s.tasks[static_cast<size_t>(task)].input;
        for (int t = 0; t < b.L_in; ++t) {
          double v = in[static_cast<size_t>(t * P + p)];
          sum += v;
          sum2 += v * v;
          ++n;
        }
      }
      double mean = sum / static_cast<double>(n);
      double var = sum2 / static_cast<double>(n) - mean * mean;
      double sd = std::sqrt(var > 0.0 ? var : 0.0);
      if (sd < 1e-6) sd = 1e-6;  // std floor
      b.stats.mean[static_cast<size_t>(p * 3 + task)] = mean;
      b.stats.stdev[static_cast<size_t>(p * 3 + task)] = sd;
    }
  }

  const int center = b.center_cell();
  auto apply_norm = [&](WindowSample& s) {
    for (int task = 0; task < 3; ++task) {
      TaskWindow& tw = s.tasks[static_cast<size_t>(task)];
      for (int t = 0; t < b.L_in; ++t)
        for (int p = 0; p < P; ++p) {
          double& v = tw.input[static_cast<size_t>(t * P + p)];
          v = (v - b.stats.mean_at(p, task)) / b.stats.std_at(p, task);
        }
      for (int t = 0; t < b.L_token; ++t)
        for (int p = 0; p < P; ++p) {
          double& v = tw.token[static_cast<size_t>(t * P + p)];
          v = (v - b.stats.mean_at(p, task)) / b.stats.std_at(p, task);
        }
      for (double& v : tw.target)
        v = (v - b.stats.mean_at(center, task)) / b.stats.std_at(center, task);
    }
  };
  for (auto& s : b.sim) apply_norm(s);
  for (auto& s : b.val) apply_norm(s);
  for (auto& s : b.test) apply_norm(s);
  b.normalized = true;
}

double denormalize_target(const DatasetBundle& b, int task, double value) {
  if (!b.normalized) return value;
  const int center = b.center_cell();
  return value * b.stats.std_at(center, task) + b.stats.mean_at(center, task);
}

namespace {

void serialize_split(const DatasetBundle& b, const std::vector<WindowSample>& split,
                     std::string& out) {
  const int P = b.patch_cells();
  const int center = b.center_cell();
  const int center_r = b.patch_r0 + b.patch_rows / 2;
  const int center_c = b.patch_c0 + b.patch_cols / 2;
  (void)center;
  out += kCsvHeader;
  for (const auto& s : split) {
    std::string prefix = std::to_string(s.sample_id) + "," + std::to_string(s.scenario_id) + "," + s.source + ",";
    for (int task = 0; task < 3; ++task) {
      const TaskWindow& tw = s.tasks[static_cast<size_t>(task)];
      const std::string tname = sim::kTaskNames[static_cast<size_t>(task)];
      for (int t = 0; t < b.L_in; ++t)
        for (int p = 0; p < P; ++p)
          out += prefix + tname + ",input," + std::to_string(t) + "," +
                 std::to_string(b.patch_r0 + p / b.patch_cols) + "," +
                 std::to_string(b.patch_c0 + p % b.patch_cols) + "," +
                 fmt17(tw.input[static_cast<size_t>(t * P + p)]) + "\n";
      for (int t = 0; t < b.L_token; ++t)
        for (int p = 0; p < P; ++p)
          out += prefix + tname + ",token," + std::to_string(t) + "," +
                 std::to_string(b.patch_r0 + p / b.patch_cols) + "," +
                 std::to_string(b.patch_c0 + p % b.patch_cols) + "," +
                 fmt17(tw.token[static_cast<size_t>(t * P + p)]) + "\n";
      for (int t = 0; t < b.L_out; ++t)
        out += prefix + tname + ",target," + std::to_string(t) + "," + std::to_string(center_r) +
               "," + std::to_string(center_c) + "," + fmt17(tw.target[static_cast<size_t>(t)]) + "\n";
    }
    auto markers = [&](const char* role, const std::vector<int>& vals) {
      for (size_t t = 0; t < vals.size(); ++t)
        out += prefix + "all," + role + "," + std::to_string(t) + ",-1,-1," +
               std::to_string(vals[t]) + "\n";
    };
    markers("hour", s.enc_hour);
    markers("dow", s.enc_dow);
    markers("dec_hour", s.dec_hour);
    markers("dec_dow", s.dec_dow);
  }
}

void atomic_write(const fs::path& path, const std::string& content) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open " + tmp.string() + " for writing");
    f.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!f) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

int task_index(const std::string& name) {
  for (int t = 0; t < 3; ++t)
    if (name == sim::kTaskNames[static_cast<size_t>(t)]) return t;
  return -1;
}

}  // namespace

uint64_t checksum(const DatasetBundle& b) {
  uint64_t h = 1469598103934665603ULL;
  std::string buf;
  for (const auto* split : {&b.sim, &b.val, &b.test}) {
    buf.clear();
    serialize_split(b, *split, buf);
    fnv_update(h, buf);
  }
  return h;
}

void save(const DatasetBundle& b, const std::string& dir) {
  b.validate();
  fs::create_directories(dir);
  const std::array<std::pair<const char*, const std::vector<WindowSample>*>, 3> splits{
      {{"sim", &b.sim}, {"val", &b.val}, {"test", &b.test}}};
  std::string buf;
  for (const auto& [name, split] : splits) {
    buf.clear();
    serialize_split(b, *split, buf);
    atomic_write(fs::path(dir) / (std::string(name) + ".csv"), buf);
  }

  json m;
  m["format_version"] = 1;
  m["L_in"] = b.L_in;
  m["L_token"] = b.L_token;
  m["L_out"] = b.L_out;
  m["patch_rows"] = b.patch_rows;
  m["patch_cols"] = b.patch_cols;
  m["patch_r0"] = b.patch_r0;
  m["patch_c0"] = b.patch_c0;
  m["hours_per_day"] = b.hours_per_day;
  m["normalized"] = b.normalized;
  m["counts"] = {{"sim", b.sim.size()}, {"val", b.val.size()}, {"test", b.test.size()}};
  m["stats"] = {{"patch_rows", b.stats.patch_rows},
                {"patch_cols", b.stats.patch_cols},
                {"mean", b.stats.mean},
                {"std", b.stats.stdev}};
  m["checksum"] = checksum(b);
  if (!b.config_echo.empty()) {
    m["config_echo"] = json::parse(b.config_echo, nullptr, false);
    if (m["config_echo"].is_discarded()) m["config_echo"] = b.config_echo;
  }
  atomic_write(fs::path(dir) / "manifest.json", m.dump(2) + "\n");
}

namespace {

std::vector<WindowSample> parse_split(const DatasetBundle& geom, const fs::path& file,
                                      size_t expected_count, int first_id) {
  std::ifstream f(file);
  if (!f) throw IoError("cannot open " + file.string());
  std::string line;
  if (!std::getline(f, line) || line + "\n" != kCsvHeader)
    throw IoError("bad CSV header in " + file.string());

  const int P = geom.patch_rows * geom.patch_cols;
  std::vector<WindowSample> out(expected_count);
  for (auto& s : out) {
    for (auto& tw : s.tasks) {
      tw.input.assign(static_cast<size_t>(geom.L_in * P), 0.0);
      tw.token.assign(static_cast<size_t>(geom.L_token * P), 0.0);
      tw.target.assign(static_cast<size_t>(geom.L_out), 0.0);
    }
    s.enc_hour.assign(static_cast<size_t>(geom.L_in), 0);
    s.enc_dow.assign(static_cast<size_t>(geom.L_in), 0);
    s.dec_hour.assign(static_cast<size_t>(geom.L_token + geom.L_out), 0);
    s.dec_dow.assign(static_cast<size_t>(geom.L_token + geom.L_out), 0);
    s.sample_id = -1;
  }

  std::vector<std::string> cols(9);
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    size_t pos = 0;
    for (int c = 0; c < 9; ++c) {
      size_t next = c == 8 ? line.size() : line.find(',', pos);
      if (next == std::string::npos) throw IoError("malformed CSV row in " + file.string());
      cols[static_cast<size_t>(c)] = line.substr(pos, next - pos);
      pos = next + 1;
    }
    int sid = std::stoi(cols[0]);
    size_t local = static_cast<size_t>(sid - first_id);
    if (local >= out.size()) throw IoError("sample_id out of range in " + file.string());
    WindowSample& s = out[local];
    s.sample_id = sid;
    s.scenario_id = std::stoi(cols[1]);
    s.source = cols[2];
    const std::string& role = cols[4];
    int step = std::stoi(cols[5]);
    double value = std::strtod(cols[8].c_str(), nullptr);
    if (role == "hour" || role == "dow" || role == "dec_hour" || role == "dec_dow") {
      auto& v = role == "hour" ? s.enc_hour
                : role == "dow" ? s.enc_dow
                : role == "dec_hour" ? s.dec_hour
                                     : s.dec_dow;
      if (step < 0 || static_cast<size_t>(step) >= v.size())
        throw IoError("marker step out of range in " + file.string());
      v[static_cast<size_t>(step)] = static_cast<int>(value);
      continue;
    }
    int task = task_index(cols[3]);
    if (task < 0) throw IoError("unknown task in " + file.string());
    TaskWindow& tw = s.tasks[static_cast<size_t>(task)];
    if (role == "target") {
      if (step < 0 || step >= geom.L_out) throw IoError("target step out of range");
      tw.target[static_cast<size_t>(step)] = value;
      continue;
    }
    int cell_r = std::stoi(cols[6]) - geom.patch_r0;
    int cell_c = std::stoi(cols[7]) - geom.patch_c0;
    if (cell_r < 0 || cell_r >= geom.patch_rows || cell_c < 0 || cell_c >= geom.patch_cols)
      throw IoError("cell outside patch in " + file.string());
    int p = cell_r * geom.patch_cols + cell_c;
    if (role == "input") {
      if (step < 0 || step >= geom.L_in) throw IoError("input step out of range");
      tw.input[static_cast<size_t>(step * P + p)] = value;
    } else if (role == "token") {
      if (step < 0 || step >= geom.L_token) throw IoError("token step out of range");
      tw.token[static_cast<size_t>(step * P + p)] = value;
    } else {
      throw IoError("unknown role '" + role + "' in " + file.string());
    }
  }
  for (const auto& s : out)
    if (s.sample_id < 0)
      throw IoError("manifest count does not match rows in " + file.string());
  return out;
}

}  // namespace

DatasetBundle load(const std::string& dir) {
  fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream mf(mpath);
  if (!mf) throw IoError("missing manifest: " + mpath.string());
  json m = json::parse(mf, nullptr, false);
  if (m.is_discarded()) throw IoError("unparseable manifest: " + mpath.string());

  DatasetBundle b;
  try {
    b.L_in = m.at("L_in").get<int>();
    b.L_token = m.at("L_token").get<int>();
    b.L_out = m.at("L_out").get<int>();
    b.patch_rows = m.at("patch_rows").get<int>();
    b.patch_cols = m.at("patch_cols").get<int>();
    b.patch_r0 = m.at("patch_r0").get<int>();
    b.patch_c0 = m.at("patch_c0").get<int>();
    b.hours_per_day = m.at("hours_per_day").get<int>();
    b.normalized = m.at("normalized").get<bool>();
    b.stats.patch_rows = m.at("stats").at("patch_rows").get<int>();
    b.stats.patch_cols = m.at("stats").at("patch_cols").get<int>();
    b.stats.mean = m.at("stats").at("mean").get<std::vector<double>>();
    b.stats.stdev = m.at("stats").at("std").get<std::vector<double>>();
    if (m.contains("config_echo")) b.config_echo = m["config_echo"].dump();
  } catch (const json::exception& e) {
    throw IoError(std::string("manifest field error: ") + e.what());
  }

  size_t n_sim = m.at("counts").at("sim").get<size_t>();
  size_t n_val = m.at("counts").at("val").get<size_t>();
  size_t n_test = m.at("counts").at("test").get<size_t>();
  b.sim = parse_split(b, fs::path(dir) / "sim.csv", n_sim, 0);
  b.val = parse_split(b, fs::path(dir) / "val.csv", n_val, static_cast<int>(n_sim));
  b.test = parse_split(b, fs::path(dir) / "test.csv", n_test, static_cast<int>(n_sim + n_val));

  uint64_t want = m.at("checksum").get<uint64_t>();
  uint64_t got = checksum(b);
  if (want != got) throw IoError("dataset checksum mismatch in " + dir);
  b.validate();
  return b;
}

std::vector<int> corrupt_half_targets(DatasetBundle& b, uint64_t seed) {
  rng::Sequence r(seed);
  std::vector<int> idx(b.sim.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  r.shuffle(idx);
  idx.resize(idx.size() / 2);
  std::sort(idx.begin(), idx.end());
  for (int i : idx) {
    WindowSample& s = b.sim[static_cast<size_t>(i)];
    for (auto& tw : s.tasks)
      for (double& v : tw.target) v = r.normal(0.0, 1.0);
  }
  return idx;
}

}  // namespace simreweight::data
