#include "simreweight/metrics.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <thread>

#include <json.hpp>

#include "simreweight/errors.hpp"
#include "simreweight/log.hpp"

namespace simreweight::evalh {

using nlohmann::json;

double mae(const std::vector<double>& pred, const std::vector<double>& target) {
  if (pred.size() != target.size() || pred.empty())
    throw ShapeMismatch("mae: size mismatch or empty input");
  double acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) acc += std::fabs(pred[i] - target[i]);
  return acc / static_cast<double>(pred.size());
}

double rmse(const std::vector<double>& pred, const std::vector<double>& target) {
  if (pred.size() != target.size() || pred.empty())
    throw ShapeMismatch("rmse: size mismatch or empty input");
  double acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) {
    double d = pred[i] - target[i];
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(pred.size()));
}

MetricsReport evaluate(const model::Forecaster& f, const model::ParamVector& pv,
                       const data::DatasetBundle& bundle, const std::string& split) {
  auto t0 = std::chrono::steady_clock::now();
  const std::vector<data::WindowSample>* samples = nullptr;
  if (split == "val")
    samples = &bundle.val;
  else if (split == "test")
    samples = &bundle.test;
  else if (split == "sim")
    samples = &bundle.sim;
  else
    throw ConfigError("evaluate: unknown split '" + split + "'");
  if (samples->empty()) throw ConfigError("evaluate: empty split '" + split + "'");

  ad::Workspace ws;
  f.bind_params(ws, pv);
  f.bind_dropout_identity(ws);
  std::array<std::vector<double>, 3> preds, targets;
  for (const auto& s : *samples) {
    model::BoundSample bs = f.prepare(s);
    f.bind_inputs_only(ws, bs);
    eval(f.graph(), ws, f.last_pred(), ad::FiniteCheck::Output);
    for (int t = 0; t < 3; ++t) {
      if (!f.config().task_active(t)) continue;
      const auto& y = ws.value(f.pred(t)).data;
      const auto& tgt = s.tasks[static_cast<size_t>(t)].target;
      for (size_t j = 0; j < y.size(); ++j) {
        preds[static_cast<size_t>(t)].push_back(data::denormalize_target(bundle, t, y[j]));
        targets[static_cast<size_t>(t)].push_back(data::denormalize_target(bundle, t, tgt[j]));
      }
    }
  }

  MetricsReport r;
  r.split = split;
  r.n_samples = static_cast<int>(samples->size());
  r.model_config_json = model::model_config_to_json(f.config());
  r.dataset_checksum = data::checksum(bundle);
  for (int t = 0; t < 3; ++t) {
    if (!f.config().task_active(t)) continue;
    r.tasks[static_cast<size_t>(t)].mae = mae(preds[static_cast<size_t>(t)], targets[static_cast<size_t>(t)]);
    r.tasks[static_cast<size_t>(t)].rmse = rmse(preds[static_cast<size_t>(t)], targets[static_cast<size_t>(t)]);
  }
  r.wall_clock_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  log::info("evaluate split=" + split + " wall_clock_sec=" + std::to_string(r.wall_clock_sec));
  return r;
}

std::string report_json(const MetricsReport& r) {
  json j;
  j["split"] = r.split;
  j["n_samples"] = r.n_samples;
  j["seed"] = r.seed;
  if (!r.weighting_mode.empty()) j["weighting_mode"] = r.weighting_mode;
  if (!r.variant.empty()) j["variant"] = r.variant;
  j["dataset_checksum"] = r.dataset_checksum;
  json cfg = json::parse(r.model_config_json, nullptr, false);
  j["model_config"] = cfg.is_discarded() ? json(r.model_config_json) : cfg;
  for (int t = 0; t < 3; ++t) {
    const char* name = sim::kTaskNames[static_cast<size_t>(t)];
    j["metrics"][name] = {{"mae", r.tasks[static_cast<size_t>(t)].mae},
                          {"rmse", r.tasks[static_cast<size_t>(t)].rmse}};
  }
  return j.dump(2) + "\n";
}

std::string format_metrics_row(const std::string& task, const TaskMetrics& m) {
  char buf[120];
  std::string cap = task;
  if (!cap.empty()) cap[0] = static_cast<char>(std::toupper(cap[0]));
  std::snprintf(buf, sizeof(buf), "%s MAE %.2f / RMSE %.2f", cap.c_str(), m.mae, m.rmse);
  return buf;
}

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::kFull: return "full";
    case Variant::kNoInteraction: return "no_interaction";
    case Variant::kNoSpatial: return "no_spatial";
    case Variant::kAverageWeighting: return "average_weighting";
    case Variant::kUniformSampleWeights: return "uniform_sample_weights";
    case Variant::kSingleTask: return "single_task";
  }
  return "full";
}

Variant variant_from_name(const std::string& name) {
  for (Variant v : {Variant::kFull, Variant::kNoInteraction, Variant::kNoSpatial,
                    Variant::kAverageWeighting, Variant::kUniformSampleWeights, Variant::kSingleTask})
    if (name == variant_name(v)) return v;
  throw ConfigError("unknown ablation variant '" + name + "'");
}

namespace {

model::ModelConfig variant_model(const model::ModelConfig& base, Variant v, int task) {
  model::ModelConfig m = base;
  switch (v) {
    case Variant::kNoInteraction: m.use_interaction = false; break;
    case Variant::kNoSpatial: m.use_spatial = false; break;
    case Variant::kSingleTask:
      m.single_task = task;
      m.use_interaction = false;
      break;
    default: break;
  }
  return m;
}

// Reweight on the variant architecture, then train with frozen sigmoid
// weights; evaluation on the test split.
std::pair<model::ParamVector, std::vector<double>> pipeline(
    const data::DatasetBundle& bundle, const model::ModelConfig& mc, const PipelineConfig& cfg,
    bool uniform_weights, train::WeightingMode weighting, uint64_t seed,
    const model::Forecaster& f) {
  std::vector<double> sigma(bundle.sim.size(), 0.5);
  if (!uniform_weights) {
    bilevel::ForecasterOracle oracle(f, bundle);
    std::vector<double> w0(bundle.sim.size(), 0.0);
    model::ParamVector phi0 = f.init_params(seed);
    bilevel::RunResult rr = bilevel::run(oracle, w0, phi0.flat, cfg.reweight);
    for (size_t i = 0; i < sigma.size(); ++i) sigma[i] = 1.0 / (1.0 + std::exp(-rr.w[i]));
  }
  train::TrainConfig tc = cfg.train;
  tc.seed = seed;
  tc.weighting = weighting;
  (void)mc;
  train::TrainResult tr = train::train(f, bundle, tc, &sigma);
  return {std::move(tr.params), std::move(sigma)};
}

}  // namespace

VariantRun run_variant(const data::DatasetBundle& bundle, const PipelineConfig& cfg, Variant v,
                       uint64_t seed) {
  VariantRun out;
  out.variant = v;
  out.seed = seed;
  train::WeightingMode mode = v == Variant::kAverageWeighting ? train::WeightingMode::kAverage
                                                              : train::WeightingMode::kDynamic;
  bool uniform = v == Variant::kUniformSampleWeights;

  if (v == Variant::kSingleTask) {
    // One independently trained model per task.
    for (int t = 0; t < 3; ++t) {
      model::ModelConfig mc = variant_model(cfg.model, v, t);
      model::Forecaster f(mc);
      auto [params, sigma] = pipeline(bundle, mc, cfg, uniform, mode, seed, f);
      MetricsReport r = evaluate(f, params, bundle, "test");
      if (t == 0) {
        out.report = r;
        out.sigma_w = sigma;
      }
      out.report.tasks[static_cast<size_t>(t)] = r.tasks[static_cast<size_t>(t)];
    }
  } else {
    model::ModelConfig mc = variant_model(cfg.model, v, -1);
    model::Forecaster f(mc);
    auto [params, sigma] = pipeline(bundle, mc, cfg, uniform, mode, seed, f);
    out.report = evaluate(f, params, bundle, "test");
    out.sigma_w = sigma;
  }
  out.report.seed = seed;
  out.report.variant = variant_name(v);
  out.report.weighting_mode = mode == train::WeightingMode::kAverage ? "average" : "dynamic";
  return out;
}

std::vector<VariantRun> run_ablation(const data::DatasetBundle& bundle, const PipelineConfig& cfg,
                                     const std::vector<Variant>& variants,
                                     const std::vector<uint64_t>& seeds, int jobs) {
  std::vector<std::pair<Variant, uint64_t>> cells;
  for (Variant v : variants)
    for (uint64_t s : seeds) cells.emplace_back(v, s);
  std::vector<VariantRun> out(cells.size());
  if (jobs <= 1) {
    for (size_t i = 0; i < cells.size(); ++i) {
      out[i] = run_variant(bundle, cfg, cells[i].first, cells[i].second);
      log::info(std::string("ablation ") + variant_name(cells[i].first) + " seed " +
                std::to_string(cells[i].second) + " done");
    }
    return out;
  }
  std::atomic<size_t> next{0};
  auto worker = [&]() {
    while (true) {
      size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      out[i] = run_variant(bundle, cfg, cells[i].first, cells[i].second);
    }
  };
  std::vector<std::thread> pool;
  for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
  for (auto& th : pool) th.join();
  return out;
}

std::string ablation_csv(const std::vector<VariantRun>& runs) {
  // Mean over seeds per variant, in first-appearance order.
  std::vector<std::string> order;
  std::map<std::string, std::array<double, 6>> acc;  // mae x3 then rmse x3
  std::map<std::string, int> counts;
  for (const auto& r : runs) {
    std::string name = r.report.variant;
    if (!counts.count(name)) order.push_back(name);
    auto& a = acc[name];
    for (int t = 0; t < 3; ++t) {
      a[static_cast<size_t>(t)] += r.report.tasks[static_cast<size_t>(t)].mae;
      a[static_cast<size_t>(t + 3)] += r.report.tasks[static_cast<size_t>(t)].rmse;
    }
    counts[name] += 1;
  }
  std::string out = "variant,metric,call,sms,net\n";
  char buf[200];
  for (const auto& name : order) {
    const auto& a = acc[name];
    double n = counts[name];
    std::snprintf(buf, sizeof(buf), "%s,mae,%.6f,%.6f,%.6f\n", name.c_str(), a[0] / n, a[1] / n,
                  a[2] / n);
    out += buf;
    std::snprintf(buf, sizeof(buf), "%s,rmse,%.6f,%.6f,%.6f\n", name.c_str(), a[3] / n, a[4] / n,
                  a[5] / n);
    out += buf;
  }
  return out;
}

ReweightCompare compare_reweighting(const data::DatasetBundle& corrupted,
                                    const std::vector<int>& corrupted_idx,
                                    const PipelineConfig& cfg, const std::vector<uint64_t>& seeds) {
  std::vector<bool> is_corrupt(corrupted.sim.size(), false);
  for (int i : corrupted_idx) is_corrupt[static_cast<size_t>(i)] = true;

  ReweightCompare out;
  for (uint64_t seed : seeds) {
    VariantRun uni = run_variant(corrupted, cfg, Variant::kUniformSampleWeights, seed);
    VariantRun full = run_variant(corrupted, cfg, Variant::kFull, seed);
    double clean_sum = 0, corrupt_sum = 0;
    int n_clean = 0, n_corrupt = 0;
    for (size_t i = 0; i < full.sigma_w.size(); ++i) {
      if (is_corrupt[i]) {
        corrupt_sum += full.sigma_w[i];
        ++n_corrupt;
      } else {
        clean_sum += full.sigma_w[i];
        ++n_clean;
      }
    }
    double gap = clean_sum / std::max(1, n_clean) - corrupt_sum / std::max(1, n_corrupt);
    auto mean_mae = [](const MetricsReport& r) {
      return (r.tasks[0].mae + r.tasks[1].mae + r.tasks[2].mae) / 3.0;
    };
    out.sigma_gap.push_back(gap);
    out.mae_uniform.push_back(mean_mae(uni.report));
    out.mae_reweighted.push_back(mean_mae(full.report));
    if (out.mae_reweighted.back() <= out.mae_uniform.back()) ++out.wins;
    log::info("compare_reweighting seed " + std::to_string(seed) + " gap " + std::to_string(gap) +
              " mae_uniform " + std::to_string(out.mae_uniform.back()) + " mae_reweighted " +
              std::to_string(out.mae_reweighted.back()));
  }
  return out;
}

}  // namespace simreweight::evalh
