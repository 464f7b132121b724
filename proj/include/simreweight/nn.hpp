#pragma once

#include <vector>

#include "simreweight/graph.hpp"

namespace simreweight::ad::nn {

NodeRef identity(Graph& g, NodeRef x);
NodeRef reshape(Graph& g, NodeRef x, std::vector<int64_t> shape);

// 2-D structural helpers (all lowered to gather/scatter index maps).
NodeRef slice_rows(Graph& g, NodeRef x, int64_t r0, int64_t r1);
NodeRef slice_cols(Graph& g, NodeRef x, int64_t c0, int64_t c1);
NodeRef concat_rows(Graph& g, const std::vector<NodeRef>& xs);
NodeRef concat_cols(Graph& g, const std::vector<NodeRef>& xs);
NodeRef bcast_rows(Graph& g, NodeRef rowvec, int64_t m);  // [1 x n] -> [m x n]
NodeRef bcast_cols(Graph& g, NodeRef colvec, int64_t n);  // [m x 1] -> [m x n]

// Reductions.
NodeRef sum_all(Graph& g, NodeRef x);   // -> [1]
NodeRef mean_all(Graph& g, NodeRef x);  // -> [1]
NodeRef row_sum(Graph& g, NodeRef x);   // [m x n] -> [m x 1]
NodeRef col_sum(Graph& g, NodeRef x);   // [m x n] -> [1 x n]
NodeRef mean_rows(Graph& g, NodeRef x); // [m x n] -> [1 x n]

// x @ W (+ b broadcast over rows when b is valid).
NodeRef linear(Graph& g, NodeRef x, NodeRef w, NodeRef b = NodeRef{});
NodeRef add_rowvec(Graph& g, NodeRef x, NodeRef b);

NodeRef softmax_rows(Graph& g, NodeRef x);
NodeRef layer_norm_rows(Graph& g, NodeRef x, NodeRef gamma, NodeRef beta, double eps = 1e-5);

// Scaled dot-product attention. `mask` (optional) is added to the logits;
// disallowed entries use -1e9.
NodeRef attention(Graph& g, NodeRef q, NodeRef k, NodeRef v, NodeRef mask = NodeRef{});

// Strict causal additive mask: position i may attend to j <= i.
Tensor causal_mask(int64_t len);
Tensor sinusoidal_positions(int64_t len, int64_t d_model);

// Same-size 2-D convolution over an H x W cell grid with C channels.
// x is the [H*W x C] cell-major matrix; kernel is [kh*kw*C x Cout] with
// tap-major rows ((dr, dc, ch)); zero padding, stride 1.
NodeRef conv2d_same(Graph& g, NodeRef x, int64_t grid_h, int64_t grid_w, int64_t kh, int64_t kw,
                    NodeRef kernel, NodeRef bias = NodeRef{});

NodeRef mse(Graph& g, NodeRef pred, NodeRef target);
NodeRef dot_all(Graph& g, NodeRef a, NodeRef b);

struct AttentionParams {
  NodeRef wq, bq, wk, bk, wv, bv, wo, bo;
};

// Multi-head attention, post projections included. When probsparse_topu > 0
// and < query count, only the top-u queries (by max-minus-mean logit score)
// keep their attention rows; the rest fall back to the mean of the values.
NodeRef multihead_attention(Graph& g, NodeRef x_q, NodeRef x_kv, const AttentionParams& p,
                            int64_t n_heads, NodeRef mask = NodeRef{}, int64_t probsparse_topu = 0);

}  // namespace simreweight::ad::nn
