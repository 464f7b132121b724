#include "simreweight/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "simreweight/errors.hpp"

namespace simreweight::config {

using nlohmann::json;

namespace {

void expect_keys(const json& j, const std::set<std::string>& allowed, const std::string& ctx) {
  if (!j.is_object()) throw ConfigError("config: " + ctx + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("config: unknown key '" + ctx + "." + it.key() + "'");
}

json frange_json(const sim::FloatRange& r) {
  if (r.lo == r.hi) return json(r.lo);
  return json::array({r.lo, r.hi});
}

json irange_json(const sim::IntRange& r) {
  if (r.lo == r.hi) return json(r.lo);
  return json::array({r.lo, r.hi});
}

sim::FloatRange parse_frange(const json& j, const std::string& ctx) {
  if (j.is_number()) return sim::FloatRange(j.get<double>());
  if (j.is_array() && j.size() == 2) return sim::FloatRange(j[0].get<double>(), j[1].get<double>());
  throw ConfigError("config: " + ctx + " must be a number or [lo, hi]");
}

sim::IntRange parse_irange(const json& j, const std::string& ctx) {
  if (j.is_number_integer()) return sim::IntRange(j.get<int64_t>());
  if (j.is_array() && j.size() == 2) return sim::IntRange(j[0].get<int64_t>(), j[1].get<int64_t>());
  throw ConfigError("config: " + ctx + " must be an integer or [lo, hi]");
}

json triple_json(const std::array<sim::FloatRange, 3>& t) {
  return json{{"call", frange_json(t[0])}, {"sms", frange_json(t[1])}, {"net", frange_json(t[2])}};
}

std::array<sim::FloatRange, 3> parse_triple(const json& j, const std::string& ctx) {
  expect_keys(j, {"call", "sms", "net"}, ctx);
  return {parse_frange(j.at("call"), ctx + ".call"), parse_frange(j.at("sms"), ctx + ".sms"),
          parse_frange(j.at("net"), ctx + ".net")};
}

json scenario_json(const sim::ScenarioConfig& c) {
  json centers = json::array();
  for (const auto& [r, cc] : c.hotspot_centers) centers.push_back(json::array({r, cc}));
  return json{{"grid_rows", c.grid_rows},
              {"grid_cols", c.grid_cols},
              {"horizon_T", c.horizon_T},
              {"diurnal_period", c.diurnal_period},
              {"base_level", {{"call", c.base_level[0]}, {"sms", c.base_level[1]}, {"net", c.base_level[2]}}},
              {"diurnal_amp", {{"call", c.diurnal_amp[0]}, {"sms", c.diurnal_amp[1]}, {"net", c.diurnal_amp[2]}}},
              {"weekly_amp", {{"call", c.weekly_amp[0]}, {"sms", c.weekly_amp[1]}, {"net", c.weekly_amp[2]}}},
              {"phase_shift", {{"call", c.phase_shift[0]}, {"sms", c.phase_shift[1]}, {"net", c.phase_shift[2]}}},
              {"n_hotspots", c.n_hotspots},
              {"hotspot_centers", centers},
              {"hotspot_sigma", c.hotspot_sigma},
              {"coupling_call_net", c.coupling_call_net},
              {"coupling_sms_net", c.coupling_sms_net},
              {"noise_sigma", {{"call", c.noise_sigma[0]}, {"sms", c.noise_sigma[1]}, {"net", c.noise_sigma[2]}}},
              {"burst_rate", c.burst_rate},
              {"burst_magnitude", c.burst_magnitude},
              {"seed", c.seed}};
}

std::array<double, 3> parse_dtriple(const json& j, const std::string& ctx) {
  expect_keys(j, {"call", "sms", "net"}, ctx);
  return {j.at("call").get<double>(), j.at("sms").get<double>(), j.at("net").get<double>()};
}

sim::ScenarioConfig parse_scenario(const json& j, const std::string& ctx) {
  expect_keys(j,
              {"grid_rows", "grid_cols", "horizon_T", "diurnal_period", "base_level", "diurnal_amp",
               "weekly_amp", "phase_shift", "n_hotspots", "hotspot_centers", "hotspot_sigma",
               "coupling_call_net", "coupling_sms_net", "noise_sigma", "burst_rate",
               "burst_magnitude", "seed"},
              ctx);
  sim::ScenarioConfig c;
  c.grid_rows = j.at("grid_rows").get<int>();
  c.grid_cols = j.at("grid_cols").get<int>();
  c.horizon_T = j.at("horizon_T").get<int>();
  c.diurnal_period = j.at("diurnal_period").get<int>();
  c.base_level = parse_dtriple(j.at("base_level"), ctx + ".base_level");
  c.diurnal_amp = parse_dtriple(j.at("diurnal_amp"), ctx + ".diurnal_amp");
  c.weekly_amp = parse_dtriple(j.at("weekly_amp"), ctx + ".weekly_amp");
  c.phase_shift = parse_dtriple(j.at("phase_shift"), ctx + ".phase_shift");
  c.n_hotspots = j.at("n_hotspots").get<int>();
  c.hotspot_centers.clear();
  for (const auto& e : j.at("hotspot_centers"))
    c.hotspot_centers.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
  c.hotspot_sigma = j.at("hotspot_sigma").get<double>();
  c.coupling_call_net = j.at("coupling_call_net").get<double>();
  c.coupling_sms_net = j.at("coupling_sms_net").get<double>();
  c.noise_sigma = parse_dtriple(j.at("noise_sigma"), ctx + ".noise_sigma");
  c.burst_rate = j.at("burst_rate").get<double>();
  c.burst_magnitude = j.at("burst_magnitude").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

json ranges_json(const sim::RandomizationRanges& r) {
  return json{{"grid_rows", irange_json(r.grid_rows)},
              {"grid_cols", irange_json(r.grid_cols)},
              {"horizon_T", irange_json(r.horizon_T)},
              {"diurnal_period", irange_json(r.diurnal_period)},
              {"base_level", triple_json(r.base_level)},
              {"diurnal_amp", triple_json(r.diurnal_amp)},
              {"weekly_amp", triple_json(r.weekly_amp)},
              {"phase_shift", triple_json(r.phase_shift)},
              {"n_hotspots", irange_json(r.n_hotspots)},
              {"hotspot_sigma", frange_json(r.hotspot_sigma)},
              {"coupling_call_net", frange_json(r.coupling_call_net)},
              {"coupling_sms_net", frange_json(r.coupling_sms_net)},
              {"noise_sigma", triple_json(r.noise_sigma)},
              {"burst_rate", frange_json(r.burst_rate)},
              {"burst_magnitude", frange_json(r.burst_magnitude)}};
}

sim::RandomizationRanges parse_ranges(const json& j, const std::string& ctx) {
  expect_keys(j,
              {"grid_rows", "grid_cols", "horizon_T", "diurnal_period", "base_level", "diurnal_amp",
               "weekly_amp", "phase_shift", "n_hotspots", "hotspot_sigma", "coupling_call_net",
               "coupling_sms_net", "noise_sigma", "burst_rate", "burst_magnitude"},
              ctx);
  sim::RandomizationRanges r;
  r.grid_rows = parse_irange(j.at("grid_rows"), ctx + ".grid_rows");
  r.grid_cols = parse_irange(j.at("grid_cols"), ctx + ".grid_cols");
  r.horizon_T = parse_irange(j.at("horizon_T"), ctx + ".horizon_T");
  r.diurnal_period = parse_irange(j.at("diurnal_period"), ctx + ".diurnal_period");
  r.base_level = parse_triple(j.at("base_level"), ctx + ".base_level");
  r.diurnal_amp = parse_triple(j.at("diurnal_amp"), ctx + ".diurnal_amp");
  r.weekly_amp = parse_triple(j.at("weekly_amp"), ctx + ".weekly_amp");
  r.phase_shift = parse_triple(j.at("phase_shift"), ctx + ".phase_shift");
  r.n_hotspots = parse_irange(j.at("n_hotspots"), ctx + ".n_hotspots");
  r.hotspot_sigma = parse_frange(j.at("hotspot_sigma"), ctx + ".hotspot_sigma");
  r.coupling_call_net = parse_frange(j.at("coupling_call_net"), ctx + ".coupling_call_net");
  r.coupling_sms_net = parse_frange(j.at("coupling_sms_net"), ctx + ".coupling_sms_net");
  r.noise_sigma = parse_triple(j.at("noise_sigma"), ctx + ".noise_sigma");
  r.burst_rate = parse_frange(j.at("burst_rate"), ctx + ".burst_rate");
  r.burst_magnitude = parse_frange(j.at("burst_magnitude"), ctx + ".burst_magnitude");
  return r;
}

json full_json(const RunConfig& c) {
  json j;
  j["simulator"] = {{"ranges", ranges_json(c.simulator.ranges)},
                    {"real", scenario_json(c.simulator.real_reference)},
                    {"n_scenarios", c.simulator.n_scenarios},
                    {"seed", c.simulator.seed}};
  j["dataset"] = {{"L_in", c.dataset.L_in},
                  {"L_token", c.dataset.L_token},
                  {"L_out", c.dataset.L_out},
                  {"stride", c.dataset.stride},
                  {"patch_rows", c.dataset.patch_rows},
                  {"patch_cols", c.dataset.patch_cols},
                  {"max_windows_per_cube", c.dataset.max_windows_per_cube}};
  j["model"] = json::parse(model::model_config_to_json(c.model));
  j["reweight"] = {{"K", c.reweight.K},
                   {"eta", c.reweight.eta},
                   {"eps", c.reweight.eps},
                   {"eta_w", c.reweight.eta_w},
                   {"eta_phi", c.reweight.eta_phi},
                   {"eta_mu", c.reweight.eta_mu},
                   {"T1", c.reweight.T1},
                   {"delta", c.reweight.delta},
                   {"T_max", c.reweight.T_max},
                   {"mu_init", c.reweight.mu_init},
                   {"inactive_tol", c.reweight.inactive_tol},
                   {"warm_start", c.reweight.warm_start},
                   {"plane_offset_paper", c.reweight.plane_offset_paper},
                   {"h_every", c.reweight.h_every},
                   {"conv_tol", c.reweight.conv_tol}};
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"alpha", c.train.alpha},
                {"seed", c.train.seed},
                {"weighting", c.train.weighting == train::WeightingMode::kAverage ? "average" : "dynamic"},
                {"grad_clip", c.train.grad_clip}};
  j["eval"] = {{"seeds", c.eval.seeds}, {"variants", c.eval.variants}, {"jobs", c.eval.jobs}};
  return j;
}

RunConfig parse_full(const json& j) {
  expect_keys(j, {"simulator", "dataset", "model", "reweight", "train", "eval"}, "<root>");
  RunConfig c;
  {
    const json& s = j.at("simulator");
    expect_keys(s, {"ranges", "real", "n_scenarios", "seed"}, "simulator");
    c.simulator.ranges = parse_ranges(s.at("ranges"), "simulator.ranges");
    c.simulator.real_reference = parse_scenario(s.at("real"), "simulator.real");
    c.simulator.n_scenarios = s.at("n_scenarios").get<int>();
    c.simulator.seed = s.at("seed").get<uint64_t>();
  }
  {
    const json& d = j.at("dataset");
    expect_keys(d, {"L_in", "L_token", "L_out", "stride", "patch_rows", "patch_cols", "max_windows_per_cube"},
                "dataset");
    c.dataset.L_in = d.at("L_in").get<int>();
    c.dataset.L_token = d.at("L_token").get<int>();
    c.dataset.L_out = d.at("L_out").get<int>();
    c.dataset.stride = d.at("stride").get<int>();
    c.dataset.patch_rows = d.at("patch_rows").get<int>();
    c.dataset.patch_cols = d.at("patch_cols").get<int>();
    c.dataset.max_windows_per_cube = d.at("max_windows_per_cube").get<int>();
  }
  {
    const json& m = j.at("model");
    expect_keys(m,
                {"d_model", "n_heads", "n_enc_layers", "n_dec_layers", "cnn_channels", "cnn_kernel",
                 "mlp_hidden", "dropout_rate", "L_in", "L_token", "L_out", "patch_rows",
                 "patch_cols", "hours_per_day", "probsparse_topu", "use_interaction", "use_spatial",
                 "single_task"},
                "model");
    c.model = model::model_config_from_json(m.dump());
  }
  {
    const json& r = j.at("reweight");
    expect_keys(r,
                {"K", "eta", "eps", "eta_w", "eta_phi", "eta_mu", "T1", "delta", "T_max", "mu_init",
                 "inactive_tol", "warm_start", "plane_offset_paper", "h_every", "conv_tol"},
                "reweight");
    c.reweight.K = r.at("K").get<int>();
    c.reweight.eta = r.at("eta").get<double>();
    c.reweight.eps = r.at("eps").get<double>();
    c.reweight.eta_w = r.at("eta_w").get<double>();
    c.reweight.eta_phi = r.at("eta_phi").get<double>();
    c.reweight.eta_mu = r.at("eta_mu").get<double>();
    c.reweight.T1 = r.at("T1").get<int>();
    c.reweight.delta = r.at("delta").get<int>();
    c.reweight.T_max = r.at("T_max").get<int>();
    c.reweight.mu_init = r.at("mu_init").get<double>();
    c.reweight.inactive_tol = r.at("inactive_tol").get<double>();
    c.reweight.warm_start = r.at("warm_start").get<bool>();
    c.reweight.plane_offset_paper = r.at("plane_offset_paper").get<bool>();
    c.reweight.h_every = r.at("h_every").get<int>();
    c.reweight.conv_tol = r.at("conv_tol").get<double>();
  }
  {
    const json& t = j.at("train");
    expect_keys(t, {"epochs", "batch_size", "learning_rate", "alpha", "seed", "weighting", "grad_clip"},
                "train");
    c.train.epochs = t.at("epochs").get<int>();
    c.train.batch_size = t.at("batch_size").get<int>();
    c.train.learning_rate = t.at("learning_rate").get<double>();
    c.train.alpha = t.at("alpha").get<double>();
    c.train.seed = t.at("seed").get<uint64_t>();
    std::string w = t.at("weighting").get<std::string>();
    if (w == "dynamic")
      c.train.weighting = train::WeightingMode::kDynamic;
    else if (w == "average")
      c.train.weighting = train::WeightingMode::kAverage;
    else
      throw ConfigError("config: train.weighting must be 'dynamic' or 'average'");
    c.train.grad_clip = t.at("grad_clip").get<double>();
  }
  {
    const json& e = j.at("eval");
    expect_keys(e, {"seeds", "variants", "jobs"}, "eval");
    c.eval.seeds = e.at("seeds").get<std::vector<uint64_t>>();
    c.eval.variants = e.at("variants").get<std::vector<std::string>>();
    c.eval.jobs = e.at("jobs").get<int>();
  }
  c.validate();
  return c;
}

}  // namespace

void RunConfig::validate() const {
  simulator.ranges.validate();
  simulator.real_reference.validate();
  if (simulator.n_scenarios <= 0) throw ConfigError("config: simulator.n_scenarios must be positive");
  dataset.validate();
  model.validate();
  reweight.validate();
  train.validate();
  if (eval.seeds.empty()) throw ConfigError("config: eval.seeds must be nonempty");
  if (eval.jobs <= 0) throw ConfigError("config: eval.jobs must be positive");
  for (const auto& v : eval.variants) evalh::variant_from_name(v);
}

RunConfig default_config() { return RunConfig{}; }

std::string to_json(const RunConfig& cfg) { return full_json(cfg).dump(2) + "\n"; }

RunConfig from_json(const std::string& text) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config: unparseable JSON");
  try {
    return parse_full(j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

RunConfig load_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config file: " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_json(text);
}

RunConfig apply_overrides(const RunConfig& cfg, const std::vector<std::string>& overrides) {
  if (overrides.empty()) return cfg;
  json j = full_json(cfg);
  for (const auto& ov : overrides) {
    size_t eq = ov.find('=');
    if (eq == std::string::npos) throw ConfigError("override must be key=value: " + ov);
    std::string key = ov.substr(0, eq);
    std::string value = ov.substr(eq + 1);
    json* cur = &j;
    size_t pos = 0;
    while (true) {
      size_t dotp = key.find('.', pos);
      std::string part = key.substr(pos, dotp == std::string::npos ? std::string::npos : dotp - pos);
      if (!cur->is_object() || !cur->contains(part))
        throw ConfigError("config: unknown key '" + key + "'");
      cur = &(*cur)[part];
      if (dotp == std::string::npos) break;
      pos = dotp + 1;
    }
    json parsed = json::parse(value, nullptr, false);
    *cur = parsed.is_discarded() ? json(value) : parsed;
  }
  try {
    return parse_full(j);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

}  // namespace simreweight::config
