#include "simreweight/nn.hpp"

#include <cmath>

namespace simreweight::ad::nn {

namespace {

const std::vector<int64_t>& shape_of(const Graph& g, NodeRef x) { return g.node(x).shape; }

void require_2d(const Graph& g, NodeRef x, const char* what) {
  if (shape_of(g, x).size() != 2) throw ShapeMismatch(std::string(what) + ": operand must be 2-D");
}

}  // namespace

NodeRef identity(Graph& g, NodeRef x) { return g.scale(x, 1.0); }

NodeRef reshape(Graph& g, NodeRef x, std::vector<int64_t> shape) {
  int64_t n = Tensor::count(shape);
  if (n != Tensor::count(shape_of(g, x))) throw ShapeMismatch("reshape: numel mismatch");
  std::vector<int32_t> map(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) map[static_cast<size_t>(i)] = static_cast<int32_t>(i);
  return g.gather(x, std::move(map), std::move(shape));
}

NodeRef slice_rows(Graph& g, NodeRef x, int64_t r0, int64_t r1) {
  require_2d(g, x, "slice_rows");
  auto s = shape_of(g, x);
  if (!(0 <= r0 && r0 < r1 && r1 <= s[0])) throw ShapeMismatch("slice_rows: bad range");
  int64_t cols = s[1];
  std::vector<int32_t> map;
  map.reserve(static_cast<size_t>((r1 - r0) * cols));
  for (int64_t r = r0; r < r1; ++r)
    for (int64_t c = 0; c < cols; ++c) map.push_back(static_cast<int32_t>(r * cols + c));
  return g.gather(x, std::move(map), {r1 - r0, cols});
}

NodeRef slice_cols(Graph& g, NodeRef x, int64_t c0, int64_t c1) {
  require_2d(g, x, "slice_cols");
  auto s = shape_of(g, x);
  if (!(0 <= c0 && c0 < c1 && c1 <= s[1])) throw ShapeMismatch("slice_cols: bad range");
  std::vector<int32_t> map;
  map.reserve(static_cast<size_t>(s[0] * (c1 - c0)));
  for (int64_t r = 0; r < s[0]; ++r)
    for (int64_t c = c0; c < c1; ++c) map.push_back(static_cast<int32_t>(r * s[1] + c));
  return g.gather(x, std::move(map), {s[0], c1 - c0});
}

NodeRef concat_rows(Graph& g, const std::vector<NodeRef>& xs) {
  if (xs.empty()) throw ShapeMismatch("concat_rows: no operands");
  if (xs.size() == 1) return xs[0];
  int64_t cols = shape_of(g, xs[0])[1];
  int64_t rows = 0;
  for (NodeRef x : xs) {
    require_2d(g, x, "concat_rows");
    if (shape_of(g, x)[1] != cols) throw ShapeMismatch("concat_rows: column mismatch");
    rows += shape_of(g, x)[0];
  }
  // Pad each block into the destination, then sum; keeps everything linear.
  NodeRef acc{};
  int64_t r_off = 0;
  for (NodeRef x : xs) {
    auto s = shape_of(g, x);
    std::vector<int32_t> map(static_cast<size_t>(s[0] * cols));
    for (int64_t r = 0; r < s[0]; ++r)
      for (int64_t c = 0; c < cols; ++c)
        map[static_cast<size_t>(r * cols + c)] = static_cast<int32_t>((r_off + r) * cols + c);
    NodeRef padded = g.scatter(x, std::move(map), {rows, cols});
    acc = acc.valid() ? g.add(acc, padded) : padded;
    r_off += s[0];
  }
  return acc;
}

NodeRef concat_cols(Graph& g, const std::vector<NodeRef>& xs) {
  if (xs.empty()) throw ShapeMismatch("concat_cols: no operands");
  if (xs.size() == 1) return xs[0];
  int64_t rows = shape_of(g, xs[0])[0];
  int64_t cols = 0;
  for (NodeRef x : xs) {
    require_2d(g, x, "concat_cols");
    if (shape_of(g, x)[0] != rows) throw ShapeMismatch("concat_cols: row mismatch");
    cols += shape_of(g, x)[1];
  }
  NodeRef acc{};
  int64_t c_off = 0;
  for (NodeRef x : xs) {
    auto s = shape_of(g, x);
    std::vector<int32_t> map(static_cast<size_t>(rows * s[1]));
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < s[1]; ++c)
        map[static_cast<size_t>(r * s[1] + c)] = static_cast<int32_t>(r * cols + c_off + c);
    NodeRef padded = g.scatter(x, std::move(map), {rows, cols});
    acc = acc.valid() ? g.add(acc, padded) : padded;
    c_off += s[1];
  }
  return acc;
}

NodeRef bcast_rows(Graph& g, NodeRef rowvec, int64_t m) {
  require_2d(g, rowvec, "bcast_rows");
  auto s = shape_of(g, rowvec);
  if (s[0] != 1) throw ShapeMismatch("bcast_rows: operand must be [1 x n]");
  std::vector<int32_t> map(static_cast<size_t>(m * s[1]));
  for (int64_t r = 0; r < m; ++r)
    for (int64_t c = 0; c < s[1]; ++c) map[static_cast<size_t>(r * s[1] + c)] = static_cast<int32_t>(c);
  return g.gather(rowvec, std::move(map), {m, s[1]});
}

NodeRef bcast_cols(Graph& g, NodeRef colvec, int64_t n) {
  require_2d(g, colvec, "bcast_cols");
  auto s = shape_of(g, colvec);
  if (s[1] != 1) throw ShapeMismatch("bcast_cols: operand must be [m x 1]");
  std::vector<int32_t> map(static_cast<size_t>(s[0] * n));
  for (int64_t r = 0; r < s[0]; ++r)
    for (int64_t c = 0; c < n; ++c) map[static_cast<size_t>(r * n + c)] = static_cast<int32_t>(r);
  return g.gather(colvec, std::move(map), {s[0], n});
}

NodeRef sum_all(Graph& g, NodeRef x) {
  int64_t n = Tensor::count(shape_of(g, x));
  std::vector<int32_t> map(static_cast<size_t>(n), 0);
  return g.scatter(x, std::move(map), {1});
}

NodeRef mean_all(Graph& g, NodeRef x) {
  int64_t n = Tensor::count(shape_of(g, x));
  return g.scale(sum_all(g, x), 1.0 / static_cast<double>(n));
}

NodeRef row_sum(Graph& g, NodeRef x) {
  require_2d(g, x, "row_sum");
  auto s = shape_of(g, x);
  std::vector<int32_t> map(static_cast<size_t>(s[0] * s[1]));
  for (int64_t r = 0; r < s[0]; ++r)
    for (int64_t c = 0; c < s[1]; ++c) map[static_cast<size_t>(r * s[1] + c)] = static_cast<int32_t>(r);
  return g.scatter(x, std::move(map), {s[0], 1});
}

NodeRef col_sum(Graph& g, NodeRef x) {
  require_2d(g, x, "col_sum");
  auto s = shape_of(g, x);
  std::vector<int32_t> map(static_cast<size_t>(s[0] * s[1]));
  for (int64_t r = 0; r < s[0]; ++r)
    for (int64_t c = 0; c < s[1]; ++c) map[static_cast<size_t>(r * s[1] + c)] = static_cast<int32_t>(c);
  return g.scatter(x, std::move(map), {1, s[1]});
}

NodeRef mean_rows(Graph& g, NodeRef x) {
  auto s = shape_of(g, x);
  return g.scale(col_sum(g, x), 1.0 / static_cast<double>(s[0]));
}

NodeRef add_rowvec(Graph& g, NodeRef x, NodeRef b) {
  auto s = shape_of(g, x);
  return g.add(x, bcast_rows(g, b, s[0]));
}

NodeRef linear(Graph& g, NodeRef x, NodeRef w, NodeRef b) {
  NodeRef y = g.matmul(x, w);
  if (b.valid()) y = add_rowvec(g, y, b);
  return y;
}

NodeRef softmax_rows(Graph& g, NodeRef x) {
  require_2d(g, x, "softmax_rows");
  auto s = shape_of(g, x);
  // Shift by the (detached) row max: exact values and derivatives, since
  // softmax and all its derivatives are shift-invariant.
  NodeRef shifted = g.sub(x, bcast_cols(g, g.row_max(x), s[1]));
  NodeRef e = g.exp(shifted);
  NodeRef denom = g.recip(row_sum(g, e));
  return g.mul(e, bcast_cols(g, denom, s[1]));
}

NodeRef layer_norm_rows(Graph& g, NodeRef x, NodeRef gamma, NodeRef beta, double eps) {
  require_2d(g, x, "layer_norm_rows");
  auto s = shape_of(g, x);
  double inv_n = 1.0 / static_cast<double>(s[1]);
  NodeRef mean = g.scale(row_sum(g, x), inv_n);
  NodeRef centered = g.sub(x, bcast_cols(g, mean, s[1]));
  NodeRef var = g.scale(row_sum(g, g.mul(centered, centered)), inv_n);
  NodeRef inv_sd = g.recip(g.sqrt(g.add_scalar(var, eps)));
  NodeRef normed = g.mul(centered, bcast_cols(g, inv_sd, s[1]));
  if (gamma.valid()) normed = g.mul(normed, bcast_rows(g, gamma, s[0]));
  if (beta.valid()) normed = add_rowvec(g, normed, beta);
  return normed;
}

NodeRef attention(Graph& g, NodeRef q, NodeRef k, NodeRef v, NodeRef mask) {
  require_2d(g, q, "attention");
  require_2d(g, k, "attention");
  require_2d(g, v, "attention");
  auto sq = shape_of(g, q);
  auto sk = shape_of(g, k);
  auto sv = shape_of(g, v);
  if (sq[1] != sk[1]) throw ShapeMismatch("attention: query/key width mismatch");
  if (sk[0] != sv[0]) throw ShapeMismatch("attention: key/value length mismatch");
  NodeRef logits = g.scale(g.matmul(q, g.transpose(k)), 1.0 / std::sqrt(static_cast<double>(sq[1])));
  if (mask.valid()) logits = g.add(logits, mask);
  return g.matmul(softmax_rows(g, logits), v);
}

Tensor causal_mask(int64_t len) {
  Tensor m = Tensor::zeros({len, len});
  for (int64_t i = 0; i < len; ++i)
    for (int64_t j = i + 1; j < len; ++j) m.data[static_cast<size_t>(i * len + j)] = -1e9;
  return m;
}

Tensor sinusoidal_positions(int64_t len, int64_t d_model) {
  Tensor p = Tensor::zeros({len, d_model});
  for (int64_t pos = 0; pos < len; ++pos) {
    for (int64_t i = 0; i < d_model; i += 2) {
      double rate = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d_model));
      p.data[static_cast<size_t>(pos * d_model + i)] = std::sin(static_cast<double>(pos) * rate);
      if (i + 1 < d_model)
        p.data[static_cast<size_t>(pos * d_model + i + 1)] = std::cos(static_cast<double>(pos) * rate);
    }
  }
  return p;
}

NodeRef conv2d_same(Graph& g, NodeRef x, int64_t grid_h, int64_t grid_w, int64_t kh, int64_t kw,
                    NodeRef kernel, NodeRef bias) {
  require_2d(g, x, "conv2d_same");
  auto sx = shape_of(g, x);
  if (sx[0] != grid_h * grid_w) throw ShapeMismatch("conv2d_same: grid size mismatch");
  int64_t ch = sx[1];
  auto sk = shape_of(g, kernel);
  if (sk[0] != kh * kw * ch) throw ShapeMismatch("conv2d_same: kernel rows mismatch");
  int64_t pad_h = (kh - 1) / 2;
  int64_t pad_w = (kw - 1) / 2;
  // im2col: [H*W x kh*kw*C] patch matrix, zero padded at the borders.
  std::vector<int32_t> map;
  map.reserve(static_cast<size_t>(grid_h * grid_w * kh * kw * ch));
  for (int64_t r = 0; r < grid_h; ++r) {
    for (int64_t c = 0; c < grid_w; ++c) {
      for (int64_t dr = 0; dr < kh; ++dr) {
        for (int64_t dc = 0; dc < kw; ++dc) {
          int64_t rr = r + dr - pad_h;
          int64_t cc = c + dc - pad_w;
          bool inside = rr >= 0 && rr < grid_h && cc >= 0 && cc < grid_w;
          for (int64_t k = 0; k < ch; ++k)
            map.push_back(inside ? static_cast<int32_t>((rr * grid_w + cc) * ch + k) : -1);
        }
      }
    }
  }
  NodeRef patches = g.gather(x, std::move(map), {grid_h * grid_w, kh * kw * ch});
  return linear(g, patches, kernel, bias);
}

NodeRef mse(Graph& g, NodeRef pred, NodeRef target) {
  NodeRef d = g.sub(pred, target);
  return mean_all(g, g.mul(d, d));
}

NodeRef dot_all(Graph& g, NodeRef a, NodeRef b) { return sum_all(g, g.mul(a, b)); }

NodeRef multihead_attention(Graph& g, NodeRef x_q, NodeRef x_kv, const AttentionParams& p,
                            int64_t n_heads, NodeRef mask, int64_t probsparse_topu) {
  NodeRef q = linear(g, x_q, p.wq, p.bq);
  NodeRef k = linear(g, x_kv, p.wk, p.bk);
  NodeRef v = linear(g, x_kv, p.wv, p.bv);
  auto sq = shape_of(g, q);
  int64_t d = sq[1];
  if (d % n_heads != 0) throw ShapeMismatch("multihead_attention: width not divisible by heads");
  int64_t dk = d / n_heads;
  int64_t lq = sq[0];
  std::vector<NodeRef> heads;
  heads.reserve(static_cast<size_t>(n_heads));
  for (int64_t h = 0; h < n_heads; ++h) {
    NodeRef qh = slice_cols(g, q, h * dk, (h + 1) * dk);
    NodeRef kh = slice_cols(g, k, h * dk, (h + 1) * dk);
    NodeRef vh = slice_cols(g, v, h * dk, (h + 1) * dk);
    NodeRef logits =
        g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dk)));
    if (mask.valid()) logits = g.add(logits, mask);
    NodeRef out = g.matmul(softmax_rows(g, logits), vh);
    int64_t lk = shape_of(g, kh)[0];
    if (probsparse_topu > 0 && probsparse_topu < lq) {
      // Query sparsity score: max logit minus mean logit; selection is
      // detached, unselected queries emit the mean value row.
      NodeRef score = g.sub(g.row_max(logits), g.scale(row_sum(g, logits), 1.0 / static_cast<double>(lk)));
      NodeRef keep = g.topk_mask(score, probsparse_topu);
      NodeRef keep_b = bcast_cols(g, keep, dk);
      NodeRef drop_b = g.add_scalar(g.scale(keep_b, -1.0), 1.0);
      NodeRef fallback = bcast_rows(g, mean_rows(g, vh), lq);
      out = g.add(g.mul(keep_b, out), g.mul(drop_b, fallback));
    }
    heads.push_back(out);
  }
  NodeRef cat = concat_cols(g, heads);
  return linear(g, cat, p.wo, p.bo);
}

}  // namespace simreweight::ad::nn
