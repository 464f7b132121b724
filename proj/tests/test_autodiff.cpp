#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "simreweight/nn.hpp"
#include "testutil.hpp"

using namespace simreweight;
using namespace simreweight::ad;
using testutil::fd_check;
using testutil::random_tensor;

TEST_CASE("eval basics") {
  Graph g;
  NodeRef x = g.leaf({1});
  NodeRef y = nn::identity(g, x);
  CHECK(eval(g, {{x, Tensor::scalar(3.0)}}, y).data[0] == doctest::Approx(3.0));

  NodeRef s = g.sigmoid(x);
  CHECK(eval(g, {{x, Tensor::scalar(0.0)}}, s).data[0] == doctest::Approx(0.5));

  Graph g2;
  NodeRef v = g2.leaf({1, 3});
  NodeRef sm = nn::softmax_rows(g2, v);
  Tensor out = eval(g2, {{v, Tensor::row({1.0, 1.0, 1.0})}}, sm);
  for (double d : out.data) CHECK(d == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("eval is pure: identical bindings give bit-identical output") {
  rng::Sequence r(7);
  Graph g;
  NodeRef x = g.leaf({4, 4});
  NodeRef y = nn::softmax_rows(g, g.matmul(g.sigmoid(x), g.transpose(x)));
  Tensor in = random_tensor({4, 4}, r);
  Tensor a = eval(g, {{x, in}}, y);
  Tensor b = eval(g, {{x, in}}, y);
  CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0);
}

TEST_CASE("eval rejects non-finite values") {
  Graph g;
  NodeRef x = g.leaf({1});
  NodeRef y = g.recip(x);
  CHECK_THROWS_AS(eval(g, {{x, Tensor::scalar(0.0)}}, y), NonFiniteValue);
}

TEST_CASE("shape mismatch raised at build time") {
  Graph g;
  NodeRef a = g.leaf({2, 3});
  NodeRef b = g.leaf({3, 2});
  CHECK_THROWS_AS(g.add(a, b), ShapeMismatch);
  CHECK_THROWS_AS(g.matmul(a, a), ShapeMismatch);
}

TEST_CASE("backward basics") {
  Graph g;
  NodeRef x = g.leaf({1});
  NodeRef s = g.sigmoid(x);
  GradientMap gm = backward(g, {{x, Tensor::scalar(0.0)}}, s);
  CHECK(gm.find(x)->data[0] == doctest::Approx(0.25));

  Graph g2;
  NodeRef z = g2.leaf({1});
  NodeRef zz = g2.mul(z, z);
  GradientMap gm2 = backward(g2, {{z, Tensor::scalar(3.0)}}, zz);
  CHECK(gm2.find(z)->data[0] == doctest::Approx(6.0));
}

TEST_CASE("backward requires scalar output") {
  Graph g;
  NodeRef x = g.leaf({2, 2});
  NodeRef y = g.sigmoid(x);
  Workspace ws;
  ws.bind(g, x, Tensor::zeros({2, 2}));
  eval(g, ws, y);
  CHECK_THROWS_AS(backward(g, ws, y), NonScalarOutput);
}

TEST_CASE("random three-layer scalar graph matches finite differences") {
  for (uint64_t seed = 0; seed < 10; ++seed) {
    rng::Sequence r(seed);
    Graph g;
    NodeRef x = g.leaf({3, 4});
    NodeRef w1 = g.leaf({4, 5});
    NodeRef w2 = g.leaf({5, 2});
    NodeRef h1 = g.sigmoid(g.matmul(x, w1));
    NodeRef h2 = g.relu(g.matmul(h1, w2));
    NodeRef out = nn::mean_all(g, g.mul(h2, h2));
    Bindings binds{{x, random_tensor({3, 4}, r)},
                   {w1, random_tensor({4, 5}, r)},
                   {w2, random_tensor({5, 2}, r)}};
    CHECK(fd_check(g, binds, out, {x, w1, w2}) <= 1e-4);
  }
}

TEST_CASE("matmul with identity") {
  rng::Sequence r(3);
  Graph g;
  NodeRef a = g.leaf({2, 2});
  NodeRef eye = g.constant(Tensor::matrix(2, 2, {1, 0, 0, 1}));
  NodeRef y = g.matmul(eye, a);
  Tensor in = random_tensor({2, 2}, r);
  Tensor out = eval(g, {{a, in}}, y);
  for (size_t i = 0; i < 4; ++i) CHECK(out.data[i] == doctest::Approx(in.data[i]));
}

TEST_CASE("layer-norm of a constant vector is zero before affine") {
  Graph g;
  NodeRef x = g.leaf({1, 8});
  NodeRef y = nn::layer_norm_rows(g, x, NodeRef{}, NodeRef{});
  Tensor out = eval(g, {{x, Tensor::full({1, 8}, 4.2)}}, y);
  for (double d : out.data) CHECK(std::fabs(d) < 1e-9);
}

TEST_CASE("attention with a full causal mask at position 0 returns value row 0") {
  rng::Sequence r(11);
  Graph g;
  NodeRef q = g.leaf({4, 6});
  NodeRef k = g.leaf({4, 6});
  NodeRef v = g.leaf({4, 6});
  NodeRef mask = g.constant(nn::causal_mask(4));
  NodeRef out = nn::attention(g, q, k, v, mask);
  Tensor qv = random_tensor({4, 6}, r);
  Tensor kv = random_tensor({4, 6}, r);
  Tensor vv = random_tensor({4, 6}, r);
  Tensor o = eval(g, {{q, qv}, {k, kv}, {v, vv}}, out);
  for (int64_t j = 0; j < 6; ++j)
    CHECK(o.data[static_cast<size_t>(j)] == doctest::Approx(vv.data[static_cast<size_t>(j)]));
}

TEST_CASE("causal mask blocks future influence to 1e-12") {
  rng::Sequence r(5);
  Graph g;
  NodeRef x = g.leaf({6, 4});
  NodeRef wq = g.leaf({4, 4});
  NodeRef mask = g.constant(nn::causal_mask(6));
  NodeRef out = nn::attention(g, g.matmul(x, wq), x, x, mask);
  Tensor xv = random_tensor({6, 4}, r);
  Tensor wv = random_tensor({4, 4}, r);
  Tensor base = eval(g, {{x, xv}, {wq, wv}}, out);
  for (int t = 1; t < 6; ++t) {
    Tensor xp = xv;
    for (int64_t c = 0; c < 4; ++c) xp.data[static_cast<size_t>(t * 4 + c)] += 0.37;
    Tensor pert = eval(g, {{x, xp}, {wq, wv}}, out);
    for (int64_t row = 0; row < t; ++row)
      for (int64_t c = 0; c < 4; ++c) {
        size_t i = static_cast<size_t>(row * 4 + c);
        CHECK(std::fabs(pert.data[i] - base.data[i]) <= 1e-12);
      }
  }
}

TEST_CASE("finite differences across the primitive set") {
  for (uint64_t seed = 0; seed < 3; ++seed) {
    rng::Sequence r(100 + seed);

    {  // matmul + add + mul
      Graph g;
      NodeRef a = g.leaf({3, 4});
      NodeRef b = g.leaf({4, 3});
      NodeRef c = g.leaf({3, 3});
      NodeRef y = nn::sum_all(g, g.mul(g.add(g.matmul(a, b), c), c));
      Bindings binds{{a, random_tensor({3, 4}, r)},
                     {b, random_tensor({4, 3}, r)},
                     {c, random_tensor({3, 3}, r)}};
      CHECK(fd_check(g, binds, y, {a, b, c}) <= 1e-4);
    }
    {  // sigmoid / relu / softmax
      Graph g;
      NodeRef x = g.leaf({2, 5});
      NodeRef y = nn::sum_all(
          g, g.mul(nn::softmax_rows(g, x), g.relu(g.sigmoid(x))));
      Bindings binds{{x, random_tensor({2, 5}, r)}};
      CHECK(fd_check(g, binds, y, {x}) <= 1e-4);
    }
    {  // layer norm with affine
      Graph g;
      NodeRef x = g.leaf({3, 6});
      NodeRef gamma = g.leaf({1, 6});
      NodeRef beta = g.leaf({1, 6});
      NodeRef y = nn::sum_all(g, nn::layer_norm_rows(g, x, gamma, beta));
      Bindings binds{{x, random_tensor({3, 6}, r)},
                     {gamma, random_tensor({1, 6}, r, 0.5, 1.5)},
                     {beta, random_tensor({1, 6}, r)}};
      CHECK(fd_check(g, binds, y, {x, gamma, beta}) <= 1e-4);
    }
    {  // conv2d over a 3x3 grid, 2 channels
      Graph g;
      NodeRef x = g.leaf({9, 2});
      NodeRef k = g.leaf({18, 3});
      NodeRef bias = g.leaf({1, 3});
      NodeRef y = nn::sum_all(g, g.sigmoid(nn::conv2d_same(g, x, 3, 3, 3, 3, k, bias)));
      Bindings binds{{x, random_tensor({9, 2}, r)},
                     {k, random_tensor({18, 3}, r)},
                     {bias, random_tensor({1, 3}, r)}};
      CHECK(fd_check(g, binds, y, {x, k, bias}) <= 1e-4);
    }
    {  // reductions + concatenation
      Graph g;
      NodeRef a = g.leaf({2, 3});
      NodeRef b = g.leaf({2, 3});
      NodeRef cat = nn::concat_rows(g, {a, b});
      NodeRef y = g.add(nn::mean_all(g, g.mul(cat, cat)),
                        nn::sum_all(g, nn::concat_cols(g, {a, b})));
      Bindings binds{{a, random_tensor({2, 3}, r)}, {b, random_tensor({2, 3}, r)}};
      CHECK(fd_check(g, binds, y, {a, b}) <= 1e-4);
    }
    {  // masked attention
      Graph g;
      NodeRef q = g.leaf({4, 4});
      NodeRef k = g.leaf({4, 4});
      NodeRef v = g.leaf({4, 4});
      NodeRef mask = g.constant(nn::causal_mask(4));
      NodeRef y = nn::mean_all(g, nn::attention(g, q, k, v, mask));
      Bindings binds{{q, random_tensor({4, 4}, r)},
                     {k, random_tensor({4, 4}, r)},
                     {v, random_tensor({4, 4}, r)}};
      CHECK(fd_check(g, binds, y, {q, k, v}) <= 1e-4);
    }
    {  // multi-head attention with projections
      Graph g;
      nn::AttentionParams p;
      NodeRef x = g.leaf({5, 4});
      p.wq = g.leaf({4, 4});
      p.bq = g.leaf({1, 4});
      p.wk = g.leaf({4, 4});
      p.bk = g.leaf({1, 4});
      p.wv = g.leaf({4, 4});
      p.bv = g.leaf({1, 4});
      p.wo = g.leaf({4, 4});
      p.bo = g.leaf({1, 4});
      NodeRef y = nn::mean_all(g, nn::multihead_attention(g, x, x, p, 2));
      Bindings binds{{x, random_tensor({5, 4}, r)},   {p.wq, random_tensor({4, 4}, r)},
                     {p.bq, random_tensor({1, 4}, r)}, {p.wk, random_tensor({4, 4}, r)},
                     {p.bk, random_tensor({1, 4}, r)}, {p.wv, random_tensor({4, 4}, r)},
                     {p.bv, random_tensor({1, 4}, r)}, {p.wo, random_tensor({4, 4}, r)},
                     {p.bo, random_tensor({1, 4}, r)}};
      CHECK(fd_check(g, binds, y, {x, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo}) <= 1e-4);
    }
  }
}

TEST_CASE("gather/scatter are adjoint") {
  rng::Sequence r(17);
  // <G x, y> == <x, G^T y> for the im2col-style gather used by conv.
  Graph g;
  NodeRef x = g.leaf({4, 3});
  std::vector<int32_t> map = {0, 5, -1, 2, 2, 7, -1, 11, 3, 1};
  NodeRef gx = g.gather(x, map, {10});
  NodeRef y = g.leaf({10});
  NodeRef lhs = nn::dot_all(g, gx, y);
  NodeRef sy = g.scatter(y, map, {4, 3});
  NodeRef rhs = nn::dot_all(g, x, sy);
  Tensor xv = random_tensor({4, 3}, r);
  Tensor yv = random_tensor({10}, r);
  double a = eval(g, {{x, xv}, {y, yv}}, lhs).data[0];
  double b = eval(g, {{x, xv}, {y, yv}}, rhs).data[0];
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
}

TEST_CASE("abs subgradient at zero is zero") {
  Graph g;
  NodeRef x = g.leaf({3});
  NodeRef y = nn::sum_all(g, g.abs(x));
  GradientMap gm = backward(g, {{x, Tensor({3}, {-2.0, 0.0, 5.0})}}, y);
  const Tensor* gx = gm.find(x);
  CHECK(gx->data[0] == doctest::Approx(-1.0));
  CHECK(gx->data[1] == doctest::Approx(0.0));
  CHECK(gx->data[2] == doctest::Approx(1.0));
}

TEST_CASE("symbolic gradient graph matches numeric backward and differentiates again") {
  rng::Sequence r(23);
  Graph g;
  NodeRef x = g.leaf({3, 3});
  NodeRef w = g.leaf({3, 3});
  NodeRef loss = nn::mean_all(g, g.mul(g.sigmoid(g.matmul(x, w)), g.matmul(x, w)));
  auto grads = backward_graph(g, loss, {w});
  REQUIRE(grads.size() == 1);
  REQUIRE(grads[0].valid());

  Tensor xv = random_tensor({3, 3}, r);
  Tensor wv = random_tensor({3, 3}, r);
  GradientMap gm = backward(g, {{x, xv}, {w, wv}}, loss);
  Tensor sym = eval(g, {{x, xv}, {w, wv}}, grads[0]);
  const Tensor* num = gm.find(w);
  for (size_t i = 0; i < sym.data.size(); ++i)
    CHECK(sym.data[i] == doctest::Approx(num->data[i]).epsilon(1e-12));

  // Second order: d/dw of <grad, v> vs finite differences of <grad, v>.
  NodeRef v = g.leaf({3, 3});
  NodeRef hv = nn::dot_all(g, grads[0], v);
  Tensor vv = random_tensor({3, 3}, r);
  Bindings binds{{x, xv}, {w, wv}, {v, vv}};
  CHECK(fd_check(g, binds, hv, {w}) <= 1e-4);
}

TEST_CASE("probsparse top-u fallback keeps shapes and determinism") {
  rng::Sequence r(31);
  Graph g;
  nn::AttentionParams p;
  NodeRef x = g.leaf({6, 4});
  p.wq = g.leaf({4, 4});
  p.bq = g.leaf({1, 4});
  p.wk = g.leaf({4, 4});
  p.bk = g.leaf({1, 4});
  p.wv = g.leaf({4, 4});
  p.bv = g.leaf({1, 4});
  p.wo = g.leaf({4, 4});
  p.bo = g.leaf({1, 4});
  NodeRef y = nn::multihead_attention(g, x, x, p, 2, NodeRef{}, 3);
  Bindings binds{{x, random_tensor({6, 4}, r)},   {p.wq, random_tensor({4, 4}, r)},
                 {p.bq, random_tensor({1, 4}, r)}, {p.wk, random_tensor({4, 4}, r)},
                 {p.bk, random_tensor({1, 4}, r)}, {p.wv, random_tensor({4, 4}, r)},
                 {p.bv, random_tensor({1, 4}, r)}, {p.wo, random_tensor({4, 4}, r)},
                 {p.bo, random_tensor({1, 4}, r)}};
  Tensor a = eval(g, binds, y);
  Tensor b = eval(g, binds, y);
  CHECK(a.shape == std::vector<int64_t>{6, 4});
  CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0);
}
