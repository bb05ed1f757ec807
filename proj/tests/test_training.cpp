#include <cmath>

#include "doctest.h"
#include "sgm/training.hpp"
#include "test_support.hpp"

using namespace sgm;
using sgm::testing::random_matrix;

namespace {

Corpus tiny_corpus(std::size_t count, std::uint64_t seed) {
  GenParams gp;
  gp.rooms_min = 2;
  gp.rooms_max = 4;
  return generate_corpus(gp, NoiseParams{}, count, seed);
}

}  // namespace

TEST_CASE("ground-truth matrix") {
  const Matrix id = build_gt_matrix(GroundTruth{{0, 1, 2}}, 3, 3);
  CHECK(id == Matrix::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}}));
  const Matrix p = build_gt_matrix(GroundTruth{{2, 0}}, 3, 2);
  CHECK(p == Matrix::from_rows({{0, 1}, {0, 0}, {1, 0}}));
  CHECK_THROWS_AS(build_gt_matrix(GroundTruth{{3}}, 3, 1), InputError);
  CHECK_THROWS_AS(build_gt_matrix(GroundTruth{{1, 1}}, 3, 2), InputError);
  CHECK_THROWS_AS(build_gt_matrix(GroundTruth{{0}}, 3, 2), InputError);
}

TEST_CASE("permutation loss values") {
  const Matrix gt = build_gt_matrix(GroundTruth{{1, 0}}, 3, 2);
  CHECK(permutation_loss(gt, gt) < 1e-6);
  CHECK(permutation_loss(Matrix(3, 2, 0.5), gt) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  Matrix inv = gt;
  for (auto& v : inv.values()) v = 1.0 - v;
  CHECK(permutation_loss(inv, gt) == doctest::Approx(-std::log(1e-7)).epsilon(1e-6));
  CHECK_THROWS_AS(permutation_loss(Matrix(2, 2), gt), InputError);
}

TEST_CASE("permutation loss gradient") {
  Rng rng(1);
  const Matrix gt = build_gt_matrix(GroundTruth{{4, 0, 2, 1}}, 5, 4);
  const Matrix s = random_matrix(rng, 5, 4, 0.05, 0.95);
  const Matrix d = permutation_loss_backward(s, gt);
  auto f = [&](const std::vector<double>& v) { return permutation_loss(Matrix(5, 4, v), gt); };
  CHECK(grad_check(f, std::vector<double>(s.values().begin(), s.values().end()),
                   std::vector<double>(d.values().begin(), d.values().end()), 1e-7) < 1e-6);
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] > gt[i]) CHECK(d[i] > 0);
    if (s[i] < gt[i]) CHECK(d[i] < 0);
  }
  CHECK(permutation_loss_backward(Matrix(1, 1, 1.0), Matrix(1, 1, 1.0))(0, 0) == 0.0);
  CHECK(permutation_loss_backward(Matrix(1, 1, 0.3), Matrix(1, 1, 0.3))(0, 0) == 0.0);
}

TEST_CASE("loss is invariant to consistent row permutation") {
  Rng rng(2);
  const Matrix s = random_matrix(rng, 6, 3, 0.01, 0.99);
  const Matrix gt = build_gt_matrix(GroundTruth{{5, 1, 3}}, 6, 3);
  const auto perm = sgm::testing::random_permutation(rng, 6);
  Matrix ps(6, 3), pg(6, 3);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      ps(perm[i], j) = s(i, j);
      pg(perm[i], j) = gt(i, j);
    }
  }
  CHECK(permutation_loss(ps, pg) == doctest::Approx(permutation_loss(s, gt)).epsilon(1e-14));
}

TEST_CASE("AdamW step") {
  EncoderParams p = init_encoder(sgm::testing::small_arch(), 3);
  const auto before = flatten(p);

  SUBCASE("zero gradient without decay") {
    AdamWConfig cfg;
    cfg.weight_decay = 0;
    OptimizerState st = OptimizerState::for_params(p);
    adamw_step(p, zeros_like(p), st, cfg);
    CHECK(flatten(p) == before);
    CHECK(st.step == 1);
  }
  SUBCASE("zero gradient applies decoupled decay") {
    OptimizerState st = OptimizerState::for_params(p);
    adamw_step(p, zeros_like(p), st, AdamWConfig{});
    const auto after = flatten(p);
    for (std::size_t i = 0; i < after.size(); ++i) CHECK(after[i] == doctest::Approx(before[i] * (1 - 5e-8)).epsilon(1e-15));
  }
  SUBCASE("first step moves by the learning rate against the gradient sign") {
    Rng rng(4);
    EncoderParams g = zeros_like(p);
    auto flat = flatten(g);
    for (auto& v : flat) v = uniform(rng, -1, 1);
    unflatten(flat, g);
    AdamWConfig cfg;
    cfg.weight_decay = 0;
    OptimizerState st = OptimizerState::for_params(p);
    adamw_step(p, g, st, cfg);
    const auto after = flatten(p);
    for (std::size_t i = 0; i < after.size(); ++i) {
      const double sign = flat[i] > 0 ? 1.0 : -1.0;
      CHECK(after[i] - before[i] == doctest::Approx(-1e-3 * sign).epsilon(1e-6));
    }
  }
  SUBCASE("zero learning rate leaves parameters unchanged") {
    AdamWConfig cfg;
    cfg.learning_rate = 0;
    EncoderParams g = zeros_like(p);
    g.mlp.w1.fill(1.0);
    OptimizerState st = OptimizerState::for_params(p);
    adamw_step(p, g, st, cfg);
    CHECK(flatten(p) == before);
  }
  SUBCASE("non-finite gradient is reported by name") {
    EncoderParams g = zeros_like(p);
    g.layers[1].heads[0].att(0, 0) = NAN;
    OptimizerState st = OptimizerState::for_params(p);
    try {
      adamw_step(p, g, st, AdamWConfig{});
      FAIL("expected a failure");
    } catch (const RuntimeFailure& e) {
      CHECK(std::string(e.what()).find("gat1.head0.att") != std::string::npos);
    }
    CHECK(flatten(p) == before);
  }
}

TEST_CASE("early stopping rule") {
  EarlyStopper s(1);
  CHECK_FALSE(s.update(0, 1.0));
  CHECK_FALSE(s.update(1, 0.5));
  CHECK(s.update(2, 0.5));  // plateau at epoch 1, stop at epoch 2
  CHECK(s.best_epoch() == 1);
  CHECK(s.best_loss() == 0.5);

  EarlyStopper p3(3);
  const double losses[] = {1.0, 0.9, 0.95, 0.8, 0.85, 0.9, 0.81};
  int stopped = -1;
  for (int e = 0; e < 7; ++e) {
    if (p3.update(e, losses[e])) {
      stopped = e;
      break;
    }
  }
  CHECK(stopped == 6);
  CHECK(p3.best_epoch() == 3);
  CHECK_THROWS_AS(EarlyStopper(0), InputError);
}

TEST_CASE("end-to-end gradient of the pipeline loss") {
  const SceneGraph a = sgm::testing::six_node_graph();
  NoiseParams np;
  np.p_drop_room = 0;
  np.p_drop_ws = 0.3;
  np.seed = 3;
  Sample s;
  s.agraph = a;
  std::tie(s.sgraph, s.gt) = perturb(a, np);
  const SceneGraph* gs[] = {&s.agraph, &s.sgraph};
  const PreparedSample prep = prepare_sample(s, compute_feature_stats(std::span<const SceneGraph* const>(gs)), {});

  EncoderParams p = init_encoder(sgm::testing::small_arch(0.1, 0.12, 0.15), 8);
  // nonzero biases keep the checked point away from ReLU kinks
  Rng rng(5);
  p.mlp.b1 = random_matrix(rng, p.mlp.b1.rows(), 1, 0.05, 0.2);
  p.mlp.b2 = random_matrix(rng, p.mlp.b2.rows(), 1, 0.05, 0.2);
  p.mode = Mode::Train;
  PipelineOptions opts;
  opts.sinkhorn_iters = 5;
  EncoderParams grads = zeros_like(p);
  sample_loss(prep, p, opts, 77, &grads);
  auto f = [&](const std::vector<double>& v) {
    EncoderParams q = p;
    unflatten(v, q);
    return sample_loss(prep, q, opts, 77);
  };
  CHECK(grad_check(f, flatten(p), flatten(grads)) < 1e-3);

  // grad_scale multiplies every gradient
  EncoderParams half = zeros_like(p);
  sample_loss(prep, p, opts, 77, &half, 0.5);
  const auto full = flatten(grads), h = flatten(half);
  for (std::size_t i = 0; i < full.size(); ++i) CHECK(h[i] == doctest::Approx(0.5 * full[i]).epsilon(1e-12));
}

TEST_CASE("training is deterministic and returns the best checkpoint") {
  const Corpus c = tiny_corpus(20, 5);
  TrainConfig cfg;
  cfg.max_epochs = 4;
  cfg.seed = 9;
  cfg.record_timing = false;
  const TrainResult r1 = train(c, cfg);
  const TrainResult r2 = train(c, cfg);
  CHECK(flatten(r1.model.params) == flatten(r2.model.params));
  CHECK(history_to_json(r1.history) == history_to_json(r2.history));
  CHECK(r1.model.params.mode == Mode::Eval);

  REQUIRE(r1.history.epochs.size() == 4);
  double best = INFINITY;
  for (const auto& e : r1.history.epochs) best = std::min(best, e.val_loss);
  CHECK(r1.history.best_val_loss == best);
  CHECK(r1.history.epochs[r1.history.best_epoch].val_loss == best);

  // the returned params reproduce the best validation loss
  PipelineOptions opts;
  double total = 0;
  const auto val = c.indices(Split::Val);
  for (std::size_t i : val) total += sample_loss(prepare_sample(c.samples[i], r1.model.stats, {}), r1.model.params, opts, 0);
  CHECK(total / static_cast<double>(val.size()) == doctest::Approx(best).epsilon(1e-12));

  cfg.jobs = 3;
  const TrainResult r3 = train(c, cfg);
  CHECK(flatten(r3.model.params) == flatten(r1.model.params));
}

TEST_CASE("training overfits a single sample") {
  // The instance-normalized, unit-temperature assignment caps how sharp the
  // soft matrix can get, so the loss only crosses 0.05 after a few hundred
  // epochs on one sample.
  Corpus c = generate_corpus(GenParams{}, NoiseParams{}, 1, 3);
  c.samples.push_back(c.samples.front());
  c.splits = {Split::Train, Split::Val};
  TrainConfig cfg;
  cfg.max_epochs = 600;
  cfg.patience = 600;
  cfg.seed = 1;
  cfg.record_timing = false;
  const TrainResult r = train(c, cfg);
  CHECK(r.history.epochs.back().train_loss < r.history.epochs.front().train_loss);
  CHECK(r.history.best_val_loss < 0.05);
}

TEST_CASE("training input checks") {
  Corpus c = tiny_corpus(6, 2);
  for (auto& s : c.splits) s = Split::Train;
  CHECK_THROWS_AS(train(c, TrainConfig{}), InputError);
  TrainConfig cfg;
  cfg.batch_size = 0;
  CHECK_THROWS_AS(train(tiny_corpus(10, 1), cfg), InputError);
  cfg = {};
  cfg.max_epochs = 1;
  EncoderParams wrong = init_encoder(sgm::testing::small_arch(), 1);
  CHECK_THROWS_AS(train(tiny_corpus(10, 1), cfg, &wrong), InputError);
}

TEST_CASE("train config json") {
  TrainConfig c;
  c.optimizer.learning_rate = 5e-4;
  c.batch_size = 8;
  c.seed = 99;
  const TrainConfig back = train_config_from_json(train_config_to_json(c));
  CHECK(back.optimizer.learning_rate == 5e-4);
  CHECK(back.batch_size == 8);
  CHECK(back.seed == 99);
  CHECK(train_config_from_json(json::object()).patience == 20);
}
