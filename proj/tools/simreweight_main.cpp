#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "simreweight/config.hpp"
#include "simreweight/errors.hpp"
#include "simreweight/gradcheck.hpp"
#include "simreweight/log.hpp"

namespace fs = std::filesystem;
using namespace simreweight;

namespace {

void atomic_write_file(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
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

// Existing outputs make a command a no-op unless --force is given.
bool skip_existing(const fs::path& marker, bool force, const std::string& what) {
  if (!force && fs::exists(marker)) {
    std::cout << what << " already exists at " << marker.string() << "; use --force to overwrite\n";
    return true;
  }
  return false;
}

config::RunConfig load_config(const std::string& config_path,
                              const std::vector<std::string>& overrides) {
  config::RunConfig cfg =
      config_path.empty() ? config::default_config() : config::load_file(config_path);
  return config::apply_overrides(cfg, overrides);
}

// The bundle owns the window geometry; the model must follow it.
model::ModelConfig model_for_bundle(const config::RunConfig& cfg, const data::DatasetBundle& b) {
  model::ModelConfig m = cfg.model;
  m.L_in = b.L_in;
  m.L_token = b.L_token;
  m.L_out = b.L_out;
  m.patch_rows = b.patch_rows;
  m.patch_cols = b.patch_cols;
  m.hours_per_day = b.hours_per_day;
  m.validate();
  return m;
}

std::vector<double> read_weights_file(const std::string& path, size_t n_sim) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open sample weights file: " + path);
  std::string line;
  if (!std::getline(f, line) || line != "sample_id,raw_w,sigmoid_w")
    throw IoError("bad weights CSV header in " + path);
  std::vector<double> w(n_sim, std::nan(""));
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id_s, raw_s, sig_s;
    if (!std::getline(ss, id_s, ',') || !std::getline(ss, raw_s, ',') || !std::getline(ss, sig_s))
      throw IoError("malformed weights row in " + path);
    size_t id = static_cast<size_t>(std::stoul(id_s));
    if (id >= n_sim) throw IoError("weights file refers to unknown sample_id in " + path);
    w[id] = std::strtod(sig_s.c_str(), nullptr);
  }
  for (double v : w)
    if (std::isnan(v)) throw IoError("weights file is missing sim samples: " + path);
  return w;
}

data::DatasetBundle simulate_bundle(const config::RunConfig& cfg) {
  auto pool = sim::make_sim_pool(cfg.simulator.ranges, cfg.simulator.n_scenarios, cfg.simulator.seed);
  sim::TrafficCube real = sim::make_real_env(cfg.simulator.real_reference);
  data::DatasetBundle b = data::build_bundle(pool, real, cfg.dataset, config::to_json(cfg));
  data::normalize(b);
  return b;
}

int cmd_simulate(const config::RunConfig& cfg, const std::string& out_dir, bool force) {
  if (skip_existing(fs::path(out_dir) / "manifest.json", force, "dataset bundle")) return 0;
  data::DatasetBundle b = simulate_bundle(cfg);
  data::save(b, out_dir);
  std::cout << "wrote bundle: sim=" << b.sim.size() << " val=" << b.val.size()
            << " test=" << b.test.size() << " -> " << out_dir << "\n";
  return 0;
}

int cmd_train(const config::RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
              const std::string& weights_arg, bool force) {
  if (skip_existing(fs::path(out_dir) / "checkpoint.bin", force, "checkpoint")) return 0;
  data::DatasetBundle b = data::load(data_dir);
  model::ModelConfig mc = model_for_bundle(cfg, b);
  model::Forecaster f(mc);

  std::vector<double> weights;
  const std::vector<double>* weights_ptr = nullptr;
  if (!weights_arg.empty()) {
    if (weights_arg == "uniform")
      weights.assign(b.sim.size(), 0.5);
    else
      weights = read_weights_file(weights_arg, b.sim.size());
    weights_ptr = &weights;
  }

  train::TrainResult tr = train::train(f, b, cfg.train, weights_ptr);
  fs::create_directories(out_dir);
  model::save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), mc, tr.params);
  atomic_write_file(fs::path(out_dir) / "train_history.csv", train::history_csv(tr.history));
  atomic_write_file(fs::path(out_dir) / "config.json", config::to_json(cfg));
  std::cout << "trained " << cfg.train.epochs << " epochs; final total loss "
            << tr.history.back().total << " -> " << out_dir << "\n";
  return 0;
}

int cmd_reweight(const config::RunConfig& cfg, const std::string& data_dir,
                 const std::string& out_dir, bool retrain, bool force) {
  if (skip_existing(fs::path(out_dir) / "weights.csv", force, "reweighting output")) return 0;
  data::DatasetBundle b = data::load(data_dir);
  model::ModelConfig mc = model_for_bundle(cfg, b);
  model::Forecaster f(mc);
  bilevel::ForecasterOracle oracle(f, b);

  std::vector<double> w0(b.sim.size(), 0.0);
  model::ParamVector phi0 = f.init_params(cfg.train.seed);
  bilevel::RunResult rr = bilevel::run(oracle, w0, phi0.flat, cfg.reweight);

  std::vector<int> ids;
  ids.reserve(b.sim.size());
  for (const auto& s : b.sim) ids.push_back(s.sample_id);

  fs::create_directories(out_dir);
  atomic_write_file(fs::path(out_dir) / "weights.csv", bilevel::weights_csv(ids, rr.w));
  atomic_write_file(fs::path(out_dir) / "reweight_history.csv", bilevel::history_csv(rr.history));

  model::ParamVector final_params = phi0;
  if (retrain) {
    std::vector<double> sigma(rr.w.size());
    for (size_t i = 0; i < sigma.size(); ++i) sigma[i] = 1.0 / (1.0 + std::exp(-rr.w[i]));
    train::TrainResult tr = train::train(f, b, cfg.train, &sigma);
    final_params = std::move(tr.params);
  } else {
    final_params.flat = rr.phi;
  }
  model::save_checkpoint((fs::path(out_dir) / "checkpoint.bin").string(), mc, final_params);
  atomic_write_file(fs::path(out_dir) / "config.json", config::to_json(cfg));
  std::cout << "reweighting " << (rr.converged ? "converged" : "stopped") << " after " << rr.iters
            << " iterations; final G " << rr.final_G << " -> " << out_dir << "\n";
  return 0;
}

int cmd_evaluate(const config::RunConfig& cfg, const std::string& data_dir,
                 const std::string& ckpt_path, const std::string& out_file,
                 const std::string& split, bool force) {
  if (skip_existing(out_file, force, "report")) return 0;
  data::DatasetBundle b = data::load(data_dir);
  model::Checkpoint ck = model::load_checkpoint(ckpt_path);
  model::Forecaster f(ck.config);
  evalh::MetricsReport r = evalh::evaluate(f, ck.params, b, split);
  r.seed = cfg.train.seed;
  r.weighting_mode = cfg.train.weighting == train::WeightingMode::kAverage ? "average" : "dynamic";
  atomic_write_file(out_file, evalh::report_json(r));
  for (int t = 0; t < 3; ++t)
    if (ck.config.task_active(t))
      std::cout << evalh::format_metrics_row(sim::kTaskNames[static_cast<size_t>(t)],
                                             r.tasks[static_cast<size_t>(t)])
                << "\n";
  return 0;
}

int cmd_ablate(const config::RunConfig& cfg, const std::string& data_dir,
               const std::string& out_dir, const std::vector<std::string>& variant_names,
               const std::vector<uint64_t>& seeds, int jobs, bool force) {
  if (skip_existing(fs::path(out_dir) / "ablation.csv", force, "ablation output")) return 0;
  data::DatasetBundle b = data::load(data_dir);
  evalh::PipelineConfig pc{model_for_bundle(cfg, b), cfg.train, cfg.reweight};
  std::vector<evalh::Variant> variants;
  for (const auto& n : variant_names) variants.push_back(evalh::variant_from_name(n));
  auto runs = evalh::run_ablation(b, pc, variants, seeds, jobs);
  fs::create_directories(out_dir);
  for (const auto& r : runs) {
    std::string name = "run_" + r.report.variant + "_" + std::to_string(r.seed) + ".json";
    atomic_write_file(fs::path(out_dir) / name, evalh::report_json(r.report));
  }
  atomic_write_file(fs::path(out_dir) / "ablation.csv", evalh::ablation_csv(runs));
  std::cout << evalh::ablation_csv(runs);
  return 0;
}

int cmd_gradcheck(int seeds) {
  double prim = gradcheck::check_primitives(seeds);
  double mdl = gradcheck::check_model(gradcheck::small_check_config(), seeds, 20);
  std::cout << "primitive max relative error: " << prim << " (tolerance 1e-4)\n";
  std::cout << "end-to-end max relative error: " << mdl << " (tolerance 1e-3)\n";
  bool ok = prim <= 1e-4 && mdl <= 1e-3;
  std::cout << (ok ? "gradcheck passed\n" : "gradcheck FAILED\n");
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sim-to-real multi-task traffic forecasting workbench"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "JSON configuration file")->capture_default_str();
  app.add_option("--set", overrides, "Override a config field, e.g. --set reweight.K=5");

  // simulate
  auto* sim_cmd = app.add_subcommand("simulate", "Generate the sim pool and real env, write a dataset bundle");
  std::string sim_out;
  bool sim_force = false;
  uint64_t sim_seed = 0;
  bool sim_seed_set = false;
  sim_cmd->add_option("--out", sim_out, "Output bundle directory")->required();
  sim_cmd->add_flag("--force", sim_force, "Overwrite existing outputs");
  sim_cmd->add_option("--seed", sim_seed, "Simulator seed override")->each([&](const std::string&) {
    sim_seed_set = true;
  });

  // train
  auto* train_cmd = app.add_subcommand("train", "Train the multi-task model on a bundle");
  std::string train_data, train_out, train_weighting, train_single, train_weights;
  bool train_force = false;
  uint64_t train_seed = 0;
  bool train_seed_set = false;
  train_cmd->add_option("--data", train_data, "Bundle directory")->required();
  train_cmd->add_option("--out", train_out, "Output directory")->required();
  train_cmd->add_option("--weighting", train_weighting, "dynamic|average")
      ->check(CLI::IsMember({"dynamic", "average"}));
  train_cmd->add_option("--single-task", train_single, "Train one task only: call|sms|net")
      ->check(CLI::IsMember({"call", "sms", "net"}));
  train_cmd->add_option("--sample-weights", train_weights,
                        "Sample weights: 'uniform' or a weights.csv path");
  train_cmd->add_option("--seed", train_seed, "Training seed override")->each([&](const std::string&) {
    train_seed_set = true;
  });
  train_cmd->add_flag("--force", train_force, "Overwrite existing outputs");

  // reweight
  auto* rw_cmd = app.add_subcommand("reweight", "Run the cutting-plane bilevel sample reweighting");
  std::string rw_data, rw_out, rw_offset;
  bool rw_retrain = false, rw_force = false;
  rw_cmd->add_option("--data", rw_data, "Bundle directory")->required();
  rw_cmd->add_option("--out", rw_out, "Output directory")->required();
  rw_cmd->add_option("--plane-offset", rw_offset, "corrected|paper linearization offset")
      ->check(CLI::IsMember({"corrected", "paper"}));
  rw_cmd->add_flag("--retrain-with-weights", rw_retrain,
                   "Retrain from scratch with the learned weights instead of keeping phi*");
  rw_cmd->add_flag("--force", rw_force, "Overwrite existing outputs");

  // evaluate
  auto* ev_cmd = app.add_subcommand("evaluate", "Compute MAE/RMSE for a checkpoint on a bundle");
  std::string ev_data, ev_ckpt, ev_out, ev_split = "test";
  bool ev_force = false;
  ev_cmd->add_option("--data", ev_data, "Bundle directory")->required();
  ev_cmd->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required();
  ev_cmd->add_option("--out", ev_out, "Report JSON path")->required();
  ev_cmd->add_option("--split", ev_split, "val|test|sim")->check(CLI::IsMember({"val", "test", "sim"}));
  ev_cmd->add_flag("--force", ev_force, "Overwrite existing outputs");

  // ablate
  auto* ab_cmd = app.add_subcommand("ablate", "Run the ablation matrix over a seed list");
  std::string ab_data, ab_out;
  std::vector<uint64_t> ab_seeds;
  std::vector<std::string> ab_variants;
  int ab_jobs = 0;
  bool ab_force = false;
  ab_cmd->add_option("--data", ab_data, "Bundle directory")->required();
  ab_cmd->add_option("--out", ab_out, "Output directory")->required();
  ab_cmd->add_option("--seeds", ab_seeds, "Seed list")->delimiter(',');
  ab_cmd->add_option("--variants", ab_variants, "Variant list")->delimiter(',');
  ab_cmd->add_option("--jobs", ab_jobs, "Parallel runs");
  ab_cmd->add_flag("--force", ab_force, "Overwrite existing outputs");

  // gradcheck
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient verification");
  int gc_seeds = 10;
  gc_cmd->add_option("--seeds", gc_seeds, "Number of random seeds");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::Config);
  }

  try {
    config::RunConfig cfg = load_config(config_path, overrides);
    if (*sim_cmd) {
      if (sim_seed_set) cfg.simulator.seed = sim_seed;
      return cmd_simulate(cfg, sim_out, sim_force);
    }
    if (*train_cmd) {
      if (train_seed_set) cfg.train.seed = train_seed;
      if (train_weighting == "average") cfg.train.weighting = train::WeightingMode::kAverage;
      if (train_weighting == "dynamic") cfg.train.weighting = train::WeightingMode::kDynamic;
      if (!train_single.empty()) {
        for (int t = 0; t < 3; ++t)
          if (train_single == sim::kTaskNames[static_cast<size_t>(t)]) cfg.model.single_task = t;
        cfg.model.use_interaction = false;
      }
      return cmd_train(cfg, train_data, train_out, train_weights, train_force);
    }
    if (*rw_cmd) {
      if (rw_offset == "paper") cfg.reweight.plane_offset_paper = true;
      if (rw_offset == "corrected") cfg.reweight.plane_offset_paper = false;
      return cmd_reweight(cfg, rw_data, rw_out, rw_retrain, rw_force);
    }
    if (*ev_cmd) return cmd_evaluate(cfg, ev_data, ev_ckpt, ev_out, ev_split, ev_force);
    if (*ab_cmd) {
      auto seeds = ab_seeds.empty() ? cfg.eval.seeds : ab_seeds;
      auto variants = ab_variants.empty() ? cfg.eval.variants : ab_variants;
      int jobs = ab_jobs > 0 ? ab_jobs : cfg.eval.jobs;
      return cmd_ablate(cfg, ab_data, ab_out, variants, seeds, jobs, ab_force);
    }
    if (*gc_cmd) return cmd_gradcheck(gc_seeds);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::Config);
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::Io);
  } catch (const DivergedError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return static_cast<int>(ExitCode::Diverged);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::Failure);
  }
  return 0;
}
