#include "sgm/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

#include "sgm/rng.hpp"

namespace sgm {

Matrix build_gt_matrix(const GroundTruth& gt, std::size_t n_a, std::size_t n_s) {
  if (gt.size() != n_s) throw InputError("ground truth covers " + std::to_string(gt.size()) + " S-nodes, expected " + std::to_string(n_s));
  Matrix p(n_a, n_s, 0.0);
  for (std::size_t s = 0; s < n_s; ++s) {
    const NodeId a = gt.s_to_a[s];
    if (a < 0 || static_cast<std::size_t>(a) >= n_a) throw InputError("ground truth A-node " + std::to_string(a) + " out of range");
    if (std::any_of(p.row(a).begin(), p.row(a).end(), [](double v) { return v != 0.0; })) {
      throw InputError("ground truth is not injective at A-node " + std::to_string(a));
    }
    p(a, s) = 1.0;
  }
  return p;
}

double permutation_loss(const Matrix& soft, const Matrix& gt) {
  if (!soft.same_shape(gt)) throw InputError("loss shape mismatch " + shape_str(soft) + " vs " + shape_str(gt));
  if (soft.empty()) throw InputError("loss over an empty matrix");
  double total = 0.0;
  for (std::size_t i = 0; i < soft.size(); ++i) {
    const double s = std::clamp(soft[i], kLossClamp, 1.0 - kLossClamp);
    const double p = gt[i];
    total -= p * std::log(s) + (1.0 - p) * std::log(1.0 - s);
  }
  return total / static_cast<double>(soft.size());
}

Matrix permutation_loss_backward(const Matrix& soft, const Matrix& gt) {
  if (!soft.same_shape(gt)) throw InputError("loss shape mismatch " + shape_str(soft) + " vs " + shape_str(gt));
  const double n = static_cast<double>(soft.size());
  Matrix d(soft.rows(), soft.cols());
  for (std::size_t i = 0; i < soft.size(); ++i) {
    const double s = soft[i];
    if (s < kLossClamp || s > 1.0 - kLossClamp) continue;
    d[i] = (s - gt[i]) / (s * (1.0 - s)) / n;
  }
  return d;
}

OptimizerState OptimizerState::for_params(const EncoderParams& params) {
  OptimizerState st;
  for (const auto& [name, t] : named_tensors(params)) {
    st.m.emplace_back(t->rows(), t->cols());
    st.v.emplace_back(t->rows(), t->cols());
  }
  return st;
}

void adamw_step(EncoderParams& params, const EncoderParams& grads, OptimizerState& state, const AdamWConfig& cfg) {
  auto ps = named_tensors(params);
  const auto gs = named_tensors(grads);
  if (ps.size() != gs.size() || state.m.size() != ps.size() || state.v.size() != ps.size()) {
    throw InputError("optimizer state does not match parameters");
  }
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (!ps[i].second->same_shape(*gs[i].second) || !ps[i].second->same_shape(state.m[i])) {
      throw InputError("gradient shape mismatch for " + ps[i].first);
    }
    if (!gs[i].second->all_finite()) throw RuntimeFailure("non-finite gradient in " + gs[i].first);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const double decay = cfg.learning_rate * cfg.weight_decay;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    Matrix& w = *ps[i].second;
    const Matrix& g = *gs[i].second;
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      w[k] -= decay * w[k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double m_hat = m[k] / c1;
      const double v_hat = v[k] / c2;
      w[k] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

EarlyStopper::EarlyStopper(int patience) : patience_(patience) {
  if (patience < 1) throw InputError("patience must be >= 1");
}

bool EarlyStopper::update(int epoch, double val_loss) {
  improved_last_ = val_loss < best_;
  if (improved_last_) {
    best_ = val_loss;
    best_epoch_ = epoch;
    since_best_ = 0;
    return false;
  }
  return ++since_best_ >= patience_;
}

PreparedSample prepare_sample(const Sample& s, const FeatureStats& stats, const AugmentConfig& augment) {
  PreparedSample p;
  p.agraph = prepare_graph(s.agraph, stats, augment);
  p.sgraph = prepare_graph(s.sgraph, stats, augment);
  p.gt = build_gt_matrix(s.gt, s.agraph.size(), s.sgraph.size());
  p.raw_gt = s.gt;
  return p;
}

double sample_loss(const PreparedSample& sample, const EncoderParams& params, const PipelineOptions& opts,
                   std::uint64_t mask_seed, EncoderParams* grads, double grad_scale) {
  const std::size_t n_a = sample.agraph.size();
  const std::size_t n_s = sample.sgraph.size();
  EncoderCache cache_a, cache_s;
  const Matrix ha = encoder_forward(sample.agraph, params, derive_seed(mask_seed, 0), grads ? &cache_a : nullptr);
  const Matrix hs = encoder_forward(sample.sgraph, params, derive_seed(mask_seed, 1), grads ? &cache_s : nullptr);
  const Matrix aff = affinity(ha, hs);
  const Matrix normed = instance_normalize(aff, opts.norm_eps);

  SinkhornOptions sk;
  sk.temperature = opts.temperature;
  sk.max_iters = opts.sinkhorn_iters;
  sk.fixed_iterations = true;
  SinkhornTrace trace;
  SoftAssignment soft = sinkhorn(pad_dummy_columns(normed), sk, grads ? &trace : nullptr);
  soft.n_real_cols = n_s;
  const Matrix real = soft.real_block();
  const double loss = permutation_loss(real, sample.gt);
  if (!grads) return loss;

  const Matrix d_real = permutation_loss_backward(real, sample.gt);
  Matrix d_soft(n_a, n_a, 0.0);
  for (std::size_t i = 0; i < n_a; ++i) std::copy(d_real.row(i).begin(), d_real.row(i).end(), d_soft.row(i).begin());
  const Matrix d_padded = sinkhorn_backward(trace, d_soft);
  Matrix d_normed(n_a, n_s);
  for (std::size_t i = 0; i < n_a; ++i) std::copy_n(d_padded.row(i).begin(), n_s, d_normed.row(i).begin());
  Matrix d_aff = instance_normalize_backward(aff, normed, d_normed, opts.norm_eps);
  d_aff *= grad_scale;

  encoder_backward(cache_a, params, matmul(d_aff, hs), *grads);
  encoder_backward(cache_s, params, matmul_tn(d_aff, ha), *grads);
  return loss;
}

void TrainConfig::validate() const {
  if (!(optimizer.learning_rate > 0.0) || !(optimizer.weight_decay >= 0.0)) throw InputError("learning rate must be positive, weight decay non-negative");
  if (batch_size < 1) throw InputError("batch_size must be >= 1");
  if (max_epochs < 1) throw InputError("max_epochs must be >= 1");
  if (patience < 1) throw InputError("patience must be >= 1");
  if (sinkhorn_train_iters < 1) throw InputError("sinkhorn_train_iters must be >= 1");
  if (jobs < 1) throw InputError("jobs must be >= 1");
}

namespace {

double mean_val_loss(const std::vector<PreparedSample>& prepared, const std::vector<std::size_t>& idx,
                     const EncoderParams& params, const PipelineOptions& opts) {
  double total = 0.0;
  for (std::size_t i : idx) total += sample_loss(prepared[i], params, opts, 0);
  return total / static_cast<double>(idx.size());
}

}  // namespace

TrainResult train(const Corpus& corpus, const TrainConfig& config, const EncoderParams* init) {
  config.validate();
  const auto train_idx = corpus.indices(Split::Train);
  const auto val_idx = corpus.indices(Split::Val);
  if (train_idx.empty() || val_idx.empty()) throw InputError("training needs non-empty train and val splits");

  std::vector<const SceneGraph*> train_graphs;
  for (std::size_t i : train_idx) {
    train_graphs.push_back(&corpus.samples[i].agraph);
    train_graphs.push_back(&corpus.samples[i].sgraph);
  }
  TrainResult result;
  result.model.stats = compute_feature_stats(std::span<const SceneGraph* const>(train_graphs));
  result.model.augment = config.augment;

  std::vector<PreparedSample> prepared(corpus.samples.size());
  for (std::size_t i : train_idx) prepared[i] = prepare_sample(corpus.samples[i], result.model.stats, config.augment);
  for (std::size_t i : val_idx) prepared[i] = prepare_sample(corpus.samples[i], result.model.stats, config.augment);

  EncoderParams params = init ? *init : init_encoder(config.arch, derive_seed(config.seed, 1));
  if (init && init->arch != config.arch) throw InputError("initial weights do not match the configured architecture");
  params.mode = Mode::Train;
  EncoderParams best = params;
  OptimizerState state = OptimizerState::for_params(params);
  EarlyStopper stopper(config.patience);

  PipelineOptions opts;
  opts.sinkhorn_iters = config.sinkhorn_train_iters;
  const std::uint64_t mask_root = derive_seed(config.seed, 2);
  const std::uint64_t shuffle_root = derive_seed(config.seed, 3);

  std::vector<std::size_t> order = train_idx;
  for (int epoch = 0; epoch < config.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    Rng shuffle_rng(derive_seed(shuffle_root, static_cast<std::uint64_t>(epoch)));
    order = train_idx;
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      const std::size_t count = end - start;
      const double scale = 1.0 / static_cast<double>(count);
      std::vector<EncoderParams> sample_grads(count, zeros_like(params));
      std::vector<double> losses(count, 0.0);

      auto work = [&](std::size_t k) {
        const std::size_t idx = order[start + k];
        const std::uint64_t mask_seed =
            derive_seed(mask_root, static_cast<std::uint64_t>(epoch) * 1000003ULL + static_cast<std::uint64_t>(idx));
        losses[k] = sample_loss(prepared[idx], params, opts, mask_seed, &sample_grads[k], scale);
      };
      const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(config.jobs), count);
      if (workers <= 1) {
        for (std::size_t k = 0; k < count; ++k) work(k);
      } else {
        std::vector<std::jthread> pool;
        for (std::size_t w = 0; w < workers; ++w) {
          pool.emplace_back([&, w] {
            for (std::size_t k = w; k < count; k += workers) work(k);
          });
        }
      }

      EncoderParams batch_grad = zeros_like(params);
      for (std::size_t k = 0; k < count; ++k) {
        if (!std::isfinite(losses[k])) {
          throw RuntimeFailure("non-finite training loss at epoch " + std::to_string(epoch) + ", sample " +
                               std::to_string(order[start + k]));
        }
        epoch_loss += losses[k];
        accumulate(batch_grad, sample_grads[k]);
      }
      adamw_step(params, batch_grad, state, config.optimizer);
    }
    epoch_loss /= static_cast<double>(order.size());

    EncoderParams eval_params = params;
    eval_params.mode = Mode::Eval;
    const double val_loss = mean_val_loss(prepared, val_idx, eval_params, opts);
    if (!std::isfinite(val_loss)) throw RuntimeFailure("non-finite validation loss at epoch " + std::to_string(epoch));

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss;
    rec.val_loss = val_loss;
    if (config.record_timing) rec.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.epochs.push_back(rec);
    if (config.on_epoch) config.on_epoch(epoch, epoch_loss, val_loss);

    const bool stop = stopper.update(epoch, val_loss);
    if (stopper.improved_last()) best = eval_params;
    if (stop) {
      result.history.stopped_early = true;
      break;
    }
  }
  result.history.best_epoch = stopper.best_epoch();
  result.history.best_val_loss = stopper.best_loss();
  best.mode = Mode::Eval;
  result.model.params = std::move(best);
  return result;
}

json history_to_json(const TrainHistory& h) {
  json epochs = json::array();
  for (const auto& e : h.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss}, {"wall_s", e.wall_s}});
  }
  return {{"epochs", std::move(epochs)},
          {"best_epoch", h.best_epoch},
          {"best_val_loss", h.best_val_loss},
          {"stopped_early", h.stopped_early}};
}

json train_config_to_json(const TrainConfig& c) {
  return {{"learning_rate", c.optimizer.learning_rate},
          {"weight_decay", c.optimizer.weight_decay},
          {"beta1", c.optimizer.beta1},
          {"beta2", c.optimizer.beta2},
          {"adam_eps", c.optimizer.eps},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"patience", c.patience},
          {"seed", c.seed},
          {"sinkhorn_train_iters", c.sinkhorn_train_iters},
          {"jobs", c.jobs},
          {"adjacency_dist_tol", c.augment.adjacency_dist_tol},
          {"adjacency_angle_tol", c.augment.adjacency_angle_tol}};
}

TrainConfig train_config_from_json(const json& j, TrainConfig c) {
  c.optimizer.learning_rate = j.value("learning_rate", c.optimizer.learning_rate);
  c.optimizer.weight_decay = j.value("weight_decay", c.optimizer.weight_decay);
  c.optimizer.beta1 = j.value("beta1", c.optimizer.beta1);
  c.optimizer.beta2 = j.value("beta2", c.optimizer.beta2);
  c.optimizer.eps = j.value("adam_eps", c.optimizer.eps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.seed = j.value("seed", c.seed);
  c.sinkhorn_train_iters = j.value("sinkhorn_train_iters", c.sinkhorn_train_iters);
  c.jobs = j.value("jobs", c.jobs);
  c.augment.adjacency_dist_tol = j.value("adjacency_dist_tol", c.augment.adjacency_dist_tol);
  c.augment.adjacency_angle_tol = j.value("adjacency_angle_tol", c.augment.adjacency_angle_tol);
  return c;
}

}  // namespace sgm
