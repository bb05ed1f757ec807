#include <cmath>

#include "doctest.h"
#include "sgm/nn.hpp"
#include "test_support.hpp"

using namespace sgm;
using sgm::testing::random_matrix;

namespace {

double leaky_ref(double x) { return x > 0 ? x : 0.2 * x; }

// Naive scalar-loop MLP, Eval mode.
Matrix mlp_oracle(const Matrix& x, const MlpParams& p) {
  const std::size_t n = x.rows(), hid = p.w1.rows(), out = p.w2.rows();
  Matrix y(n, out);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> a(hid);
    for (std::size_t j = 0; j < hid; ++j) {
      double s = p.b1(j, 0);
      for (std::size_t k = 0; k < x.cols(); ++k) s += p.w1(j, k) * x(i, k);
      a[j] = s > 0 ? s : 0;
    }
    for (std::size_t j = 0; j < out; ++j) {
      double s = p.b2(j, 0);
      for (std::size_t k = 0; k < hid; ++k) s += p.w2(j, k) * a[k];
      y(i, j) = s > 0 ? s : 0;
    }
  }
  return y;
}

// Dense attention: materialize the full alpha matrix from an adjacency
// matrix (with self-loops) and combine heads, Eval mode.
Matrix gat_dense_oracle(const Matrix& h, const std::vector<std::vector<bool>>& adj, const GatLayerParams& layer) {
  const std::size_t n = h.rows(), in = h.cols();
  const std::size_t dh = layer.heads.front().wh.rows();
  const std::size_t H = layer.heads.size();
  const bool concat = layer.head_mode == HeadMode::Concat;
  Matrix out(n, concat ? H * dh : dh);
  for (std::size_t k = 0; k < H; ++k) {
    const GatHead& hd = layer.heads[k];
    Matrix alpha(n, n);  // alpha(u, v): weight of u into v
    for (std::size_t v = 0; v < n; ++v) {
      std::vector<double> e(n, -INFINITY);
      double mx = -INFINITY;
      for (std::size_t u = 0; u < n; ++u) {
        if (!adj[u][v]) continue;
        double logit = 0;
        for (std::size_t c = 0; c < dh; ++c) {
          double z = 0;
          for (std::size_t q = 0; q < in; ++q) z += hd.wa(c, q) * h(u, q) + hd.wa(c, in + q) * h(v, q);
          logit += hd.att(c, 0) * leaky_ref(z);
        }
        e[u] = logit;
        mx = std::max(mx, logit);
      }
      double zsum = 0;
      for (std::size_t u = 0; u < n; ++u) zsum += adj[u][v] ? std::exp(e[u] - mx) : 0.0;
      for (std::size_t u = 0; u < n; ++u) alpha(u, v) = adj[u][v] ? std::exp(e[u] - mx) / zsum : 0.0;
    }
    const Matrix values = matmul_nt(h, hd.wh);                 // n x dh
    const Matrix agg = matmul_tn(alpha, values);               // n x dh, row v = sum_u alpha(u,v) value(u)
    for (std::size_t v = 0; v < n; ++v) {
      for (std::size_t c = 0; c < dh; ++c) {
        if (concat) {
          out(v, k * dh + c) = agg(v, c);
        } else {
          out(v, c) += agg(v, c) / static_cast<double>(H);
        }
      }
    }
  }
  if (layer.relu) {
    for (auto& v : out.values()) v = std::max(v, 0.0);
  }
  return out;
}

std::vector<std::vector<bool>> dense_adjacency(const SceneGraph& g) {
  std::vector<std::vector<bool>> adj(g.size(), std::vector<bool>(g.size(), false));
  for (std::size_t i = 0; i < g.size(); ++i) adj[i][i] = true;
  for (const auto& e : g.edges) adj[e.src][e.dst] = true;
  return adj;
}

Matrix identity_padded(std::size_t rows, std::size_t cols) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < std::min(rows, cols); ++i) m(i, i) = 1.0;
  return m;
}

SceneGraph six_node_prepared() {
  SceneGraph g = augment_edges(sgm::testing::six_node_graph());
  const SceneGraph* p = &g;
  return standardize_features(g, compute_feature_stats(std::span<const SceneGraph* const>(&p, 1)));
}

// Scalar objective sum(W .* encoder(x)) for gradient checks.
struct EncoderObjective {
  const SceneGraph& graph;
  EncoderParams params;
  Matrix weights;
  std::uint64_t mask_seed;

  double operator()(const std::vector<double>& flat) const {
    EncoderParams p = params;
    unflatten(flat, p);
    const Matrix out = encoder_forward(graph, p, mask_seed);
    double s = 0;
    for (std::size_t i = 0; i < out.size(); ++i) s += weights[i] * out[i];
    return s;
  }
};

}  // namespace

TEST_CASE("MLP with zero weights outputs zeros") {
  Rng rng(1);
  MlpParams p;
  p.w1 = Matrix(64, 7);
  p.b1 = Matrix(64, 1);
  p.w2 = Matrix(64, 64);
  p.b2 = Matrix(64, 1);
  const Matrix y = mlp_forward(random_matrix(rng, 5, 7), p, Mode::Eval);
  for (double v : y.values()) CHECK(v == 0.0);
}

TEST_CASE("MLP with identity weights embeds non-negative input") {
  Rng rng(2);
  MlpParams p;
  p.w1 = identity_padded(64, 7);
  p.b1 = Matrix(64, 1);
  p.w2 = identity_padded(64, 64);
  p.b2 = Matrix(64, 1);
  const Matrix x = random_matrix(rng, 4, 7, 0.0, 3.0);
  const Matrix y = mlp_forward(x, p, Mode::Eval);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t d = 0; d < 7; ++d) CHECK(y(i, d) == x(i, d));
    for (std::size_t d = 7; d < 64; ++d) CHECK(y(i, d) == 0.0);
  }
}

TEST_CASE("MLP agrees with a scalar-loop oracle") {
  Rng rng(3);
  EncoderParams p = init_encoder(Architecture{}, 17);
  p.mlp.b1 = random_matrix(rng, 64, 1);
  p.mlp.b2 = random_matrix(rng, 64, 1);
  const Matrix x = random_matrix(rng, 9, 7, -2, 2);
  CHECK(max_abs_diff(mlp_forward(x, p.mlp, Mode::Eval), mlp_oracle(x, p.mlp)) < 1e-12);
}

TEST_CASE("MLP rejects non-finite input") {
  EncoderParams p = init_encoder(Architecture{}, 1);
  Matrix x(2, 7);
  x(1, 3) = NAN;
  CHECK_THROWS_AS(mlp_forward(x, p.mlp, Mode::Eval), InputError);
  CHECK_THROWS_AS(mlp_forward(Matrix(2, 6), p.mlp, Mode::Eval), InputError);
}

TEST_CASE("inverted dropout keeps the expected activation") {
  Rng rng(4);
  MlpParams p;
  p.w1 = identity_padded(64, 7);
  p.b1 = Matrix(64, 1);
  p.w2 = identity_padded(64, 64);
  p.b2 = Matrix(64, 1);
  p.dropout_p = 0.3;
  Matrix x(4000, 7);
  x.fill(1.0);
  const Matrix y = mlp_forward(x, p, Mode::Train, &rng);
  double mean = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) mean += y(i, 0);
  mean /= static_cast<double>(x.rows());
  CHECK(mean == doctest::Approx(1.0).epsilon(0.05));
  CHECK(mlp_forward(x, p, Mode::Eval) == mlp_oracle(x, p));
}

TEST_CASE("GATv2 scores") {
  SUBCASE("zero attention vector gives zero logits") {
    Rng rng(5);
    GatHead h{random_matrix(rng, 3, 8), Matrix(3, 1), random_matrix(rng, 3, 4)};
    const auto g = EncoderGraph::from_edges(3, {{0, 1}, {1, 2}}, true);
    for (double l : gatv2_scores(random_matrix(rng, 3, 4), g, h)) CHECK(l == 0.0);
  }
  SUBCASE("hand evaluation of one edge") {
    GatHead h{Matrix::from_rows({{1, 1}}), Matrix::from_rows({{1}}), Matrix::from_rows({{1}})};
    const auto g = EncoderGraph::from_edges(2, {{0, 1}}, false);
    const auto logits = gatv2_scores(Matrix::from_rows({{1}, {1}}), g, h);
    REQUIRE(logits.size() == 1);
    CHECK(logits[0] == 2.0);
  }
  SUBCASE("negative pre-activation uses the leaky slope") {
    GatHead h{Matrix::from_rows({{1, 1}}), Matrix::from_rows({{1}}), Matrix::from_rows({{1}})};
    const auto g = EncoderGraph::from_edges(2, {{0, 1}}, false);
    CHECK(gatv2_scores(Matrix::from_rows({{-1}, {-1}}), g, h)[0] == doctest::Approx(-0.4));
  }
  SUBCASE("shape mismatch") {
    GatHead h{Matrix(2, 5), Matrix(2, 1), Matrix(2, 3)};
    const auto g = EncoderGraph::from_edges(2, {}, true);
    CHECK_THROWS_AS(gatv2_scores(Matrix(2, 3), g, h), InputError);
  }
}

TEST_CASE("attention softmax per destination") {
  SUBCASE("single incoming edge") {
    const auto g = EncoderGraph::from_edges(2, {{0, 1}}, false);
    CHECK(attention_normalize({3.7}, g, Mode::Eval, 0.0)[0] == 1.0);
  }
  SUBCASE("equal logits") {
    const auto g = EncoderGraph::from_edges(3, {{0, 2}, {1, 2}}, false);
    const auto a = attention_normalize({0.4, 0.4}, g, Mode::Eval, 0.0);
    CHECK(a[0] == 0.5);
    CHECK(a[1] == 0.5);
  }
  SUBCASE("logits 0 and ln 3") {
    const auto g = EncoderGraph::from_edges(3, {{0, 2}, {1, 2}}, false);
    const auto a = attention_normalize({0.0, std::log(3.0)}, g, Mode::Eval, 0.0);
    CHECK(a[0] == doctest::Approx(0.25).epsilon(1e-14));
    CHECK(a[1] == doctest::Approx(0.75).epsilon(1e-14));
  }
  SUBCASE("large logits stay finite") {
    const auto g = EncoderGraph::from_edges(3, {{0, 2}, {1, 2}}, false);
    const auto a = attention_normalize({1000.0, 999.0}, g, Mode::Eval, 0.0);
    CHECK(a[0] + a[1] == doctest::Approx(1.0));
    CHECK(a[0] > a[1]);
  }
  SUBCASE("logit count mismatch") {
    const auto g = EncoderGraph::from_edges(2, {{0, 1}}, false);
    CHECK_THROWS_AS(attention_normalize({1.0, 2.0}, g, Mode::Eval, 0.0), InputError);
  }
}

TEST_CASE("GATv2 layer special cases") {
  GatLayerParams layer;
  layer.head_mode = HeadMode::Concat;
  GatHead h{Matrix(2, 4), Matrix(2, 1), identity_padded(2, 2)};
  layer.heads.push_back(h);
  const Matrix x = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});

  SUBCASE("uniform attention averages in-neighbours") {
    // zero Wa/a: every logit equal, alpha uniform over in-edges (incl. self)
    const auto g = EncoderGraph::from_edges(3, {{0, 2}, {1, 2}}, true);
    const Matrix y = gatv2_layer_forward(x, g, layer, Mode::Eval);
    CHECK(y(2, 0) == doctest::Approx(3.0));
    CHECK(y(2, 1) == doctest::Approx(4.0));
  }
  SUBCASE("isolated node keeps its own value") {
    const auto g = EncoderGraph::from_edges(3, {{0, 2}}, true);
    const Matrix y = gatv2_layer_forward(x, g, layer, Mode::Eval);
    CHECK(y(1, 0) == 3.0);
    CHECK(y(1, 1) == 4.0);
  }
}

TEST_CASE("GATv2 layer matches the dense-attention oracle") {
  Rng rng(8);
  const SceneGraph g = sgm::testing::prepared_floorplan(21, 3, 4);
  const auto eg = EncoderGraph::from_scene(g);
  const auto adj = dense_adjacency(g);
  const EncoderParams p = init_encoder(Architecture{}, 99);
  const Matrix h = random_matrix(rng, g.size(), 64, -1, 1);
  for (int l = 0; l < 2; ++l) {
    CHECK(max_abs_diff(gatv2_layer_forward(h, eg, p.layers[l], Mode::Eval), gat_dense_oracle(h, adj, p.layers[l])) <
          1e-10);
  }
}

TEST_CASE("encoder with zero MLP output matches the dense oracle") {
  const SceneGraph g = sgm::testing::prepared_floorplan(22, 2, 3);
  EncoderParams p = init_encoder(Architecture{}, 5);
  p.mlp.w2.fill(0.0);
  const Matrix out = encoder_forward(g, p);
  const auto adj = dense_adjacency(g);
  const Matrix h0(g.size(), 64);
  const Matrix expect = gat_dense_oracle(gat_dense_oracle(h0, adj, p.layers[0]), adj, p.layers[1]);
  CHECK(max_abs_diff(out, expect) < 1e-12);
  for (double v : out.values()) CHECK(v == 0.0);
}

TEST_CASE("encoder architecture and determinism") {
  const SceneGraph g = sgm::testing::prepared_floorplan(23);
  EncoderParams p = init_encoder(Architecture{}, 7);
  CHECK(p.layers[0].out_dim() == 64);
  CHECK(p.layers[1].out_dim() == 32);
  CHECK(p.layers[0].heads.size() == 4);
  const Matrix a = encoder_forward(g, p);
  CHECK(a.rows() == g.size());
  CHECK(a.cols() == 32);
  CHECK(a == encoder_forward(g, p));

  p.mode = Mode::Train;
  const Matrix t1 = encoder_forward(g, p, 11);
  CHECK(t1 == encoder_forward(g, p, 11));
  CHECK(t1 != encoder_forward(g, p, 12));
  CHECK(t1 != a);

  SceneGraph bare = g;
  bare.features = Matrix();
  CHECK_THROWS_AS(encoder_forward(bare, p), InputError);
}

TEST_CASE("encoder is permutation equivariant") {
  Rng rng(9);
  const EncoderParams p = init_encoder(Architecture{}, 3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const SceneGraph g = sgm::testing::prepared_floorplan(seed);
    const auto perm = sgm::testing::random_permutation(rng, g.size());
    const Matrix out = encoder_forward(g, p);
    const Matrix out_perm = encoder_forward(relabel(g, perm), p);
    double worst = 0;
    for (std::size_t i = 0; i < g.size(); ++i) {
      for (std::size_t c = 0; c < out.cols(); ++c) worst = std::max(worst, std::abs(out(i, c) - out_perm(perm[i], c)));
    }
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("grad_check harness") {
  SUBCASE("linear map is exact") {
    const std::vector<double> c{1.5, -2.0, 0.25};
    auto f = [&](const std::vector<double>& x) { return c[0] * x[0] + c[1] * x[1] + c[2] * x[2]; };
    CHECK(grad_check(f, {0.3, 0.1, -0.7}, c) < 1e-9);
  }
  SUBCASE("corrupted gradient is detected") {
    auto f = [](const std::vector<double>& x) { return x[0] * x[0] + std::sin(x[1]); };
    const std::vector<double> x{0.4, 0.9};
    const std::vector<double> g{2 * 0.4 * 1.01, std::cos(0.9) * 1.01};
    const double err = grad_check(f, x, g);
    CHECK(err > 5e-3);
    CHECK(err < 2e-2);
  }
  SUBCASE("non-deterministic function rejected") {
    int calls = 0;
    auto f = [&](const std::vector<double>&) { return static_cast<double>(++calls); };
    CHECK_THROWS_AS(grad_check(f, {0.0}, {0.0}), InputError);
  }
  SUBCASE("length mismatch") {
    auto f = [](const std::vector<double>& x) { return x[0]; };
    CHECK_THROWS_AS(grad_check(f, {0.0, 1.0}, {0.0}), InputError);
  }
}

TEST_CASE("encoder backward") {
  const SceneGraph g = six_node_prepared();
  REQUIRE(g.size() == 6);
  Rng rng(10);

  SUBCASE("zero upstream gives zero gradients") {
    EncoderParams p = init_encoder(Architecture{}, 1);
    EncoderCache cache;
    const Matrix out = encoder_forward(g, p, 0, &cache);
    EncoderParams grads = zeros_like(p);
    encoder_backward(cache, p, Matrix(out.rows(), out.cols()), grads);
    for (double v : flatten(grads)) CHECK(v == 0.0);
  }
  SUBCASE("missing cache rejected") {
    EncoderParams p = init_encoder(Architecture{}, 1);
    EncoderParams grads = zeros_like(p);
    CHECK_THROWS_AS(encoder_backward(EncoderCache{}, p, Matrix(6, 32), grads), InputError);
  }
  SUBCASE("finite differences, Eval mode") {
    // seed chosen so that no pre-activation lies within eps of a kink
    EncoderParams p = init_encoder(Architecture{}, 3);
    p.mlp.b1 = random_matrix(rng, 64, 1, 0.0, 0.2);
    p.mlp.b2 = random_matrix(rng, 64, 1, 0.0, 0.2);
    EncoderObjective obj{g, p, random_matrix(rng, 6, 32), 0};
    EncoderCache cache;
    encoder_forward(g, p, 0, &cache);
    EncoderParams grads = zeros_like(p);
    encoder_backward(cache, p, obj.weights, grads);
    CHECK(grad_check(obj, flatten(p), flatten(grads)) < 1e-4);
  }
  SUBCASE("finite differences with frozen dropout masks") {
    EncoderParams p = init_encoder(sgm::testing::small_arch(0.2, 0.2, 0.2), 3);
    p.mlp.b1 = random_matrix(rng, p.mlp.b1.rows(), 1, 0.0, 0.2);
    p.mlp.b2 = random_matrix(rng, p.mlp.b2.rows(), 1, 0.0, 0.2);
    p.mode = Mode::Train;
    EncoderObjective obj{g, p, random_matrix(rng, 6, 4), 1234};
    EncoderCache cache;
    encoder_forward(g, p, 1234, &cache);
    EncoderParams grads = zeros_like(p);
    encoder_backward(cache, p, obj.weights, grads);
    CHECK(grad_check(obj, flatten(p), flatten(grads)) < 1e-4);
  }
}

TEST_CASE("per-layer finite differences") {
  Rng rng(12);
  const SceneGraph g = six_node_prepared();
  const auto eg = EncoderGraph::from_scene(g);
  const EncoderParams p = init_encoder(Architecture{}, 4);

  for (int l = 0; l < 2; ++l) {
    const GatLayerParams& layer = p.layers[l];
    const Matrix h = random_matrix(rng, 6, 64);
    const Matrix w = random_matrix(rng, 6, layer.out_dim());
    auto objective = [&](const GatLayerParams& lp, const Matrix& x) {
      const Matrix y = gatv2_layer_forward(x, eg, lp, Mode::Eval);
      double s = 0;
      for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
      return s;
    };
    LayerCache cache;
    gatv2_layer_forward(h, eg, layer, Mode::Eval, nullptr, &cache);
    GatLayerParams grads = layer;
    for (auto& hd : grads.heads) {
      hd.wa.fill(0);
      hd.att.fill(0);
      hd.wh.fill(0);
    }
    const Matrix dh = gatv2_layer_backward(cache, eg, layer, w, grads);

    // input gradient
    std::vector<double> x0(h.values().begin(), h.values().end());
    auto f_in = [&](const std::vector<double>& x) {
      Matrix m = h;
      std::copy(x.begin(), x.end(), m.values().begin());
      return objective(layer, m);
    };
    CHECK(grad_check(f_in, x0, std::vector<double>(dh.values().begin(), dh.values().end())) < 1e-4);

    // parameter gradient of head 0
    for (int which = 0; which < 3; ++which) {
      auto pick = [which](GatHead& hd) -> Matrix& { return which == 0 ? hd.wa : which == 1 ? hd.att : hd.wh; };
      GatLayerParams base = layer;
      const Matrix& t = pick(base.heads[0]);
      std::vector<double> v(t.values().begin(), t.values().end());
      auto f = [&](const std::vector<double>& x) {
        GatLayerParams lp = layer;
        std::copy(x.begin(), x.end(), pick(lp.heads[0]).values().begin());
        return objective(lp, h);
      };
      const Matrix& gt = pick(grads.heads[0]);
      CHECK(grad_check(f, v, std::vector<double>(gt.values().begin(), gt.values().end())) < 1e-4);
    }
  }
}

TEST_CASE("MLP finite differences") {
  Rng rng(13);
  EncoderParams p = init_encoder(Architecture{}, 8);
  p.mlp.b1 = random_matrix(rng, 64, 1, 0.0, 0.3);
  p.mlp.b2 = random_matrix(rng, 64, 1, 0.0, 0.3);
  const Matrix x = random_matrix(rng, 6, 7);
  const Matrix w = random_matrix(rng, 6, 64);
  MlpCache cache;
  mlp_forward(x, p.mlp, Mode::Eval, nullptr, &cache);
  MlpParams g = zeros_like(p).mlp;
  mlp_backward(cache, p.mlp, w, g);
  std::vector<double> flat, analytic;
  for (const Matrix* m : {&p.mlp.w1, &p.mlp.b1, &p.mlp.w2, &p.mlp.b2}) flat.insert(flat.end(), m->values().begin(), m->values().end());
  for (const Matrix* m : {&g.w1, &g.b1, &g.w2, &g.b2}) analytic.insert(analytic.end(), m->values().begin(), m->values().end());
  auto f = [&](const std::vector<double>& v) {
    MlpParams q = p.mlp;
    std::size_t pos = 0;
    for (Matrix* m : {&q.w1, &q.b1, &q.w2, &q.b2}) {
      std::copy(v.begin() + static_cast<long>(pos), v.begin() + static_cast<long>(pos + m->size()), m->values().begin());
      pos += m->size();
    }
    const Matrix y = mlp_forward(x, q, Mode::Eval);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += w[i] * y[i];
    return s;
  };
  CHECK(grad_check(f, flat, analytic) < 1e-4);
}

TEST_CASE("parameter bookkeeping") {
  const EncoderParams p = init_encoder(Architecture{}, 1);
  // MLP 7*64+64+64*64+64, layer1 4*(16*128+16+16*64), layer2 4*(32*128+32+32*64)
  const std::size_t expected = (7 * 64 + 64 + 64 * 64 + 64) + 4 * (16 * 128 + 16 + 16 * 64) + 4 * (32 * 128 + 32 + 32 * 64);
  CHECK(parameter_count(p) == expected);
  CHECK(flatten(p).size() == expected);

  EncoderParams q = zeros_like(p);
  unflatten(flatten(p), q);
  CHECK(flatten(q) == flatten(p));
  CHECK_THROWS_AS(unflatten(std::vector<double>(3), q), InputError);

  EncoderParams acc = zeros_like(p);
  accumulate(acc, p, 2.0);
  CHECK(flatten(acc)[5] == 2.0 * flatten(p)[5]);

  const double bound = std::sqrt(6.0 / (64 + 7));
  for (double v : p.mlp.w1.values()) CHECK(std::abs(v) <= bound);
  for (double v : p.mlp.b1.values()) CHECK(v == 0.0);
  CHECK(flatten(init_encoder(Architecture{}, 1)) == flatten(p));
  CHECK(flatten(init_encoder(Architecture{}, 2)) != flatten(p));
}

TEST_CASE("weights json round trip") {
  const EncoderParams p = init_encoder(Architecture{}, 31);
  FeatureStats stats;
  stats.mean[3] = 2.5;
  stats.stddev[4] = 0.75;
  const json j = weights_to_json(p, stats);
  CHECK(j.at("format_version") == 1);
  const auto [q, s] = weights_from_json(j);
  CHECK(flatten(q) == flatten(p));
  CHECK(q.arch == p.arch);
  CHECK(s == stats);

  json bad = j;
  bad["tensors"][0]["shape"] = {64, 8};
  CHECK_THROWS_AS(weights_from_json(bad), InputError);
  bad = j;
  bad["tensors"][2]["data"].erase(0);
  CHECK_THROWS_AS(weights_from_json(bad), InputError);
  bad = j;
  bad["format_version"] = 2;
  CHECK_THROWS_AS(weights_from_json(bad), InputError);
}
