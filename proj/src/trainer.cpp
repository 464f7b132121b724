#include "simreweight/trainer.hpp"

#include <cmath>
#include <cstdio>

#include "simreweight/errors.hpp"
#include "simreweight/log.hpp"

namespace simreweight::train {

using ad::FiniteCheck;
using ad::Workspace;

TaskWeights update_task_weights(const TaskWeights& tw, const std::array<double, 3>& losses) {
  double sum = losses[0] + losses[1] + losses[2];
  if (!(sum > 0.0)) throw ZeroTotalLoss("update_task_weights: task losses must be positive");
  TaskWeights out = tw;
  for (int t = 0; t < 3; ++t)
    out.w[static_cast<size_t>(t)] =
        (1.0 - tw.alpha) * tw.w[static_cast<size_t>(t)] + tw.alpha * (losses[static_cast<size_t>(t)] / sum);
  return out;
}

double total_loss(const TaskWeights& tw, const std::array<double, 3>& losses, WeightingMode mode) {
  double out = 0.0;
  for (int t = 0; t < 3; ++t) {
    double w = mode == WeightingMode::kAverage ? 1.0 / 3.0 : tw.w[static_cast<size_t>(t)];
    out += w * losses[static_cast<size_t>(t)];
  }
  return out;
}

void TrainConfig::validate() const {
  if (epochs <= 0 || batch_size <= 0 || learning_rate <= 0.0 || grad_clip <= 0.0)
    throw ConfigError("train: epochs, batch_size, learning_rate, grad_clip must be positive");
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("train: alpha must lie in [0,1]");
}

TrainResult train(const model::Forecaster& f, const data::DatasetBundle& bundle,
                  const TrainConfig& cfg, const std::vector<double>* sample_weights) {
  cfg.validate();
  const auto& mc = f.config();
  if (bundle.sim.empty()) throw ConfigError("train: empty sim split");
  if (sample_weights && sample_weights->size() != bundle.sim.size())
    throw ConfigError("train: sample weight count does not match sim split");

  const size_t n = bundle.sim.size();
  std::vector<model::BoundSample> prepared;
  prepared.reserve(n);
  for (const auto& s : bundle.sim) prepared.push_back(f.prepare(s));

  model::ParamVector pv = f.init_params(cfg.seed);
  TaskWeights tw;
  tw.alpha = cfg.alpha;
  const bool single = mc.single_task >= 0;

  Workspace ws;
  rng::Sequence shuffle_rng(rng::mix(cfg.seed, 0xA11CE5ULL));
  rng::Sequence dropout_rng(rng::mix(cfg.seed, 0xD80F0FULL));
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;

  std::vector<double> grad(static_cast<size_t>(f.param_count()), 0.0);
  const auto& index = f.param_index();
  const auto& leaves = f.param_leaves();

  TrainResult result;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    std::array<double, 3> epoch_losses{0.0, 0.0, 0.0};
    std::array<double, 3> bind_w = single ? std::array<double, 3>{1, 1, 1}
                                : cfg.weighting == WeightingMode::kAverage
                                    ? std::array<double, 3>{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0}
                                    : tw.w;

    for (size_t b0 = 0; b0 < n; b0 += static_cast<size_t>(cfg.batch_size)) {
      size_t b1 = std::min(n, b0 + static_cast<size_t>(cfg.batch_size));
      double batch_scale = 1.0 / static_cast<double>(b1 - b0);
      std::fill(grad.begin(), grad.end(), 0.0);
      f.bind_params(ws, pv);
      f.bind_task_weights(ws, bind_w);
      for (size_t k = b0; k < b1; ++k) {
        size_t i = order[k];
        double sw = sample_weights ? (*sample_weights)[i] : 1.0;
        f.bind_sample(ws, prepared[i]);
        if (mc.dropout_rate > 0.0)
          f.bind_dropout_random(ws, dropout_rng);
        else
          f.bind_dropout_identity(ws);
        eval(f.graph(), ws, f.weighted_total(), FiniteCheck::Output);
        backward(f.graph(), ws, f.weighted_total(), sw * batch_scale, FiniteCheck::None);
        auto tl = f.task_losses(ws);
        for (int t = 0; t < 3; ++t) epoch_losses[static_cast<size_t>(t)] += sw * tl[static_cast<size_t>(t)];
        for (size_t p = 0; p < index.size(); ++p) {
          if (!ws.has_grad(leaves[p])) continue;
          const auto& gt = ws.grad(leaves[p]).data;
          double* dst = grad.data() + index[p].offset;
          for (size_t j = 0; j < gt.size(); ++j) dst[j] += gt[j];
        }
      }
      double norm2 = 0.0;
      for (double v : grad) norm2 += v * v;
      if (!std::isfinite(norm2)) throw DivergedError("train: non-finite gradient");
      double norm = std::sqrt(norm2);
      double scale = norm > cfg.grad_clip ? cfg.grad_clip / norm : 1.0;
      for (size_t j = 0; j < grad.size(); ++j)
        pv.flat[j] -= cfg.learning_rate * scale * grad[j];
    }

    for (double& v : epoch_losses) v /= static_cast<double>(n);
    double total = single ? epoch_losses[static_cast<size_t>(mc.single_task)]
                          : total_loss(tw, epoch_losses, cfg.weighting);
    if (!std::isfinite(total)) throw DivergedError("train: non-finite epoch loss");
    result.history.push_back({epoch, epoch_losses,
                              single ? bind_w : (cfg.weighting == WeightingMode::kAverage
                                                     ? std::array<double, 3>{1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0}
                                                     : tw.w),
                              total});
    if (!single && cfg.weighting == WeightingMode::kDynamic) {
      double sum = epoch_losses[0] + epoch_losses[1] + epoch_losses[2];
      if (sum > 0.0) tw = update_task_weights(tw, epoch_losses);
    }
    log::debug("epoch " + std::to_string(epoch) + " total " + std::to_string(total));
  }

  result.params = std::move(pv);
  result.final_weights = tw;
  return result;
}

std::string history_csv(const std::vector<EpochRow>& rows) {
  std::string out = "epoch,loss_call,loss_sms,loss_net,w_call,w_sms,w_net,total\n";
  char buf[256];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.epoch,
                  r.losses[0], r.losses[1], r.losses[2], r.weights[0], r.weights[1], r.weights[2],
                  r.total);
    out += buf;
  }
  return out;
}

}  // namespace simreweight::train
