#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "simreweight/dataset.hpp"
#include "simreweight/graph.hpp"
#include "simreweight/rng.hpp"

namespace simreweight::model {

struct ModelConfig {
  int64_t d_model = 32;
  int64_t n_heads = 4;
  int64_t n_enc_layers = 2;
  int64_t n_dec_layers = 1;
  int64_t cnn_channels = 8;
  int64_t cnn_kernel = 3;
  int64_t mlp_hidden = 64;
  double dropout_rate = 0.1;
  int64_t L_in = 24;
  int64_t L_token = 12;
  int64_t L_out = 6;
  int64_t patch_rows = 3;
  int64_t patch_cols = 3;
  int64_t hours_per_day = 24;
  int64_t probsparse_topu = 0;  // 0 = full cross-attention
  bool use_interaction = true;
  bool use_spatial = true;
  int single_task = -1;  // -1 = all three tasks

  int64_t patch_cells() const { return patch_rows * patch_cols; }
  int64_t dec_len() const { return L_token + L_out; }
  bool task_active(int t) const { return single_task < 0 || single_task == t; }
  void validate() const;
};

struct ParamInfo {
  std::string name;
  int64_t offset = 0;
  std::vector<int64_t> shape;
  int64_t numel() const { return ad::Tensor::count(shape); }
};

// Flat view of all model parameters with a structured index; the index
// partitions the flat vector exactly, in construction order.
struct ParamVector {
  std::vector<double> flat;
  std::vector<ParamInfo> index;
  int64_t size() const { return static_cast<int64_t>(flat.size()); }
  const ParamInfo* find(const std::string& name) const;
  void validate() const;
};

// Tensors ready to bind for one sample (value windows, one-hot markers,
// targets). Precomputed once per sample so training loops stay cheap.
struct BoundSample {
  std::array<ad::Tensor, 3> enc_values, dec_values, targets;
  ad::Tensor enc_hour, enc_dow, dec_hour, dec_dow;
};

// Multi-task spatiotemporal forecaster: per-task embedding + attention
// encoder over time, CNN + attention encoder over the cell patch, task-token
// attention interaction, and causal attention decoders with cross-attention
// into the fused task representation.
//
// Parameter count (per active task, d = d_model, m = mlp_hidden, H =
// hours_per_day, P = patch_cells, C = cnn_channels, k = cnn_kernel,
// E = n_enc_layers, D = n_dec_layers):
//   embeddings (enc + dec):  2*(P*d + H*d + 7*d)
//   encoder:   E * (4*(d*d + d) + (d*m + m) + (m*d + d) + 4*d)
//   spatial:   k*k*L_in*C + C + 4*(C*C + C) + C*d + d        (when enabled)
//   decoder:   D * (8*(d*d + d) + (d*m + m) + (m*d + d) + 6*d)
//   head:      d + 1
// plus, when interaction is enabled (three tasks):
//   shared:    (spatial on ? 2 : 1) * (4*(d*d + d) + 2*d)
//   per task:  (z*m + m) + (m*d + d), z = (spatial on ? 2d : d)
// and when interaction is off, the decoder memory is the raw
// [spatial; pooled temporal] token stack (no extra parameters).
class Forecaster {
 public:
  explicit Forecaster(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<ParamInfo>& param_index() const { return index_; }
  int64_t param_count() const { return total_params_; }
  ParamVector init_params(uint64_t seed) const;

  const ad::Graph& graph() const { return graph_; }

  void bind_params(ad::Workspace& ws, const ParamVector& pv) const;
  void bind_params(ad::Workspace& ws, const std::vector<double>& flat) const;
  void bind_sample(ad::Workspace& ws, const BoundSample& bs) const;
  void bind_inputs_only(ad::Workspace& ws, const BoundSample& bs) const;  // no targets
  void bind_dropout_identity(ad::Workspace& ws) const;
  void bind_dropout_random(ad::Workspace& ws, rng::Sequence& rng) const;
  void bind_task_weights(ad::Workspace& ws, const std::array<double, 3>& tw) const;

  BoundSample prepare(const data::WindowSample& s) const;

  ad::NodeRef pred(int task) const { return pred_[static_cast<size_t>(task)]; }
  ad::NodeRef task_loss(int task) const { return task_loss_[static_cast<size_t>(task)]; }
  ad::NodeRef scalar_loss() const { return scalar_loss_; }
  ad::NodeRef weighted_total() const { return weighted_total_; }
  ad::NodeRef h_enc(int task) const { return h_enc_[static_cast<size_t>(task)]; }
  ad::NodeRef h_s(int task) const { return h_s_[static_cast<size_t>(task)]; }
  ad::NodeRef h_tilde(int task) const { return h_tilde_[static_cast<size_t>(task)]; }
  ad::NodeRef last_pred() const { return last_pred_; }
  ad::NodeRef dec_values_leaf(int task) const { return dec_values_leaf_[static_cast<size_t>(task)]; }
  const std::vector<ad::NodeRef>& param_leaves() const { return param_leaves_; }

  // Evaluated per-task outputs for inspection and evaluation.
  struct TaskState {
    ad::Tensor h_enc, h_s, h_tilde, y;
  };
  std::array<TaskState, 3> forward_states(const ParamVector& pv, const data::WindowSample& s) const;
  std::array<double, 3> task_losses(ad::Workspace& ws) const;  // after eval

  // Gradient graph extension for Hessian-vector products: same forward,
  // plus symbolic per-parameter gradients and their dot with a direction.
  struct HvpGraph;
  const HvpGraph& hvp() const;

  ~Forecaster();
  Forecaster(const Forecaster&) = delete;
  Forecaster& operator=(const Forecaster&) = delete;

 private:
  struct Build;
  void construct(ad::Graph& g, std::vector<ad::NodeRef>& params_out, Build& b,
                 bool record_index) const;

  ModelConfig cfg_;
  ad::Graph graph_;
  std::vector<ParamInfo> index_;
  std::vector<double> init_fan_;       // per param: >0 uniform bound fan-in
  std::vector<int> init_kind_;         // 0 linear, 1 embed, 2 const1, 3 const0
  int64_t total_params_ = 0;
  std::vector<ad::NodeRef> param_leaves_;
  std::array<ad::NodeRef, 3> enc_values_leaf_{}, dec_values_leaf_{}, target_leaf_{};
  ad::NodeRef enc_hour_leaf_{}, enc_dow_leaf_{}, dec_hour_leaf_{}, dec_dow_leaf_{};
  std::vector<std::pair<ad::NodeRef, std::vector<int64_t>>> dropout_leaves_;
  std::array<ad::NodeRef, 3> pred_{}, task_loss_{}, h_enc_{}, h_s_{}, h_tilde_{};
  ad::NodeRef scalar_loss_{}, tw_leaf_{}, weighted_total_{}, last_pred_{};
  mutable HvpGraph* hvp_ = nullptr;
};

struct Forecaster::HvpGraph {
  ad::Graph g;
  std::vector<ad::NodeRef> param_leaves;
  std::vector<ad::NodeRef> lambda_leaves;  // direction, same shapes as params
  std::array<ad::NodeRef, 3> enc_values, dec_values, targets;
  ad::NodeRef enc_hour, enc_dow, dec_hour, dec_dow;
  std::vector<std::pair<ad::NodeRef, std::vector<int64_t>>> dropout_leaves;
  ad::NodeRef loss;       // scalar mean-task loss
  ad::NodeRef dot;        // <grad(loss), lambda>
};

// Checkpoint: magic line, JSON header (config + parameter index), raw
// little-endian 64-bit float payload.
void save_checkpoint(const std::string& path, const ModelConfig& cfg, const ParamVector& pv);
struct Checkpoint {
  ModelConfig config;
  ParamVector params;
};
Checkpoint load_checkpoint(const std::string& path);

std::string model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const std::string& text);

}  // namespace simreweight::model
