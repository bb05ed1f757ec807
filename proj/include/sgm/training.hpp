#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "sgm/datagen.hpp"
#include "sgm/matching.hpp"
#include "sgm/nn.hpp"

namespace sgm {

inline constexpr double kLossClamp = 1e-7;

/// N1 x N2 binary matrix, entry (a, s) = 1 iff S-node s observes A-node a.
Matrix build_gt_matrix(const GroundTruth& gt, std::size_t n_a, std::size_t n_s);

/// Mean element-wise binary cross-entropy with predictions clamped to
/// [1e-7, 1 - 1e-7].
double permutation_loss(const Matrix& soft, const Matrix& gt);
/// Zero where the clamp is active.
Matrix permutation_loss_backward(const Matrix& soft, const Matrix& gt);

struct AdamWConfig {
  double learning_rate = 1e-3;
  double weight_decay = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct OptimizerState {
  std::vector<Matrix> m, v;
  std::uint64_t step = 0;

  static OptimizerState for_params(const EncoderParams& params);
};

/// Decoupled weight decay followed by the bias-corrected Adam update. Throws
/// RuntimeFailure naming the first tensor with a non-finite gradient, leaving
/// the parameters untouched.
void adamw_step(EncoderParams& params, const EncoderParams& grads, OptimizerState& state, const AdamWConfig& cfg);

/// Tracks the best validation loss; `update` returns true when training
/// should stop.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience);
  bool update(int epoch, double val_loss);
  int best_epoch() const { return best_epoch_; }
  double best_loss() const { return best_; }
  bool improved_last() const { return improved_last_; }

 private:
  int patience_;
  int best_epoch_ = -1;
  int since_best_ = 0;
  double best_ = std::numeric_limits<double>::infinity();
  bool improved_last_ = false;
};

/// A corpus sample with both graphs augmented and standardized.
struct PreparedSample {
  SceneGraph agraph;
  SceneGraph sgraph;
  Matrix gt;
  GroundTruth raw_gt;
};

PreparedSample prepare_sample(const Sample& s, const FeatureStats& stats, const AugmentConfig& augment);

struct PipelineOptions {
  int sinkhorn_iters = 20;
  double temperature = 1.0;
  double norm_eps = 1e-5;
};

/// Loss of one sample through encoder, affinity, normalization, padding and
/// unrolled Sinkhorn. When `grads` is non-null the gradient is accumulated
/// into it (scaled by `grad_scale`). Dropout masks derive from `mask_seed`.
double sample_loss(const PreparedSample& sample, const EncoderParams& params, const PipelineOptions& opts,
                   std::uint64_t mask_seed, EncoderParams* grads = nullptr, double grad_scale = 1.0);

struct TrainConfig {
  AdamWConfig optimizer;
  std::size_t batch_size = 16;
  int max_epochs = 500;
  int patience = 20;
  std::uint64_t seed = 0;
  int sinkhorn_train_iters = 20;
  int jobs = 1;
  Architecture arch;
  AugmentConfig augment;
  bool record_timing = true;
  /// Called after every epoch with (epoch, train loss, val loss).
  std::function<void(int, double, double)> on_epoch;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double wall_s = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = -1;
  double best_val_loss = 0.0;
  bool stopped_early = false;
};

struct TrainResult {
  Model model;
  TrainHistory history;
};

/// Trains from a fresh initialization, or from `init` when given.
TrainResult train(const Corpus& corpus, const TrainConfig& config, const EncoderParams* init = nullptr);

json history_to_json(const TrainHistory& h);
json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const json& j, TrainConfig base = {});

}  // namespace sgm
