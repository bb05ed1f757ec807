#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "sgm/graph.hpp"
#include "sgm/io.hpp"
#include "sgm/matrix.hpp"
#include "sgm/rng.hpp"

namespace sgm {

enum class Mode { Train, Eval };
enum class HeadMode { Concat, Average };

inline constexpr double kLeakySlope = 0.2;

/// Fixed architecture constants of the shared encoder.
struct Architecture {
  std::size_t input_dim = kFeatureDim;
  std::size_t mlp_hidden = 64;
  std::size_t mlp_out = 64;
  std::size_t heads = 4;
  std::size_t hidden_head_dim = 16;  // layer 1, concatenated -> 64
  std::size_t output_dim = 32;       // layer 2, averaged over heads
  double mlp_dropout = 0.0;
  double attn_dropout = 0.12;
  double node_dropout = 0.15;

  std::size_t hidden_dim() const { return heads * hidden_head_dim; }
  friend bool operator==(const Architecture&, const Architecture&) = default;
};

struct MlpParams {
  Matrix w1, b1;  // hidden x in, hidden x 1
  Matrix w2, b2;  // out x hidden, out x 1
  double dropout_p = 0.0;
};

struct GatHead {
  Matrix wa;   // head_dim x (2 * in): acts on [h_src || h_dst]
  Matrix att;  // head_dim x 1
  Matrix wh;   // head_dim x in
};

struct GatLayerParams {
  std::vector<GatHead> heads;
  HeadMode head_mode = HeadMode::Concat;
  bool relu = false;  // ReLU + node dropout after head combination
  double attn_dropout_p = 0.0;
  double node_dropout_p = 0.0;

  std::size_t in_dim() const { return heads.empty() ? 0 : heads.front().wh.cols(); }
  std::size_t head_dim() const { return heads.empty() ? 0 : heads.front().wh.rows(); }
  std::size_t out_dim() const { return head_mode == HeadMode::Concat ? heads.size() * head_dim() : head_dim(); }
};

struct EncoderParams {
  Architecture arch;
  MlpParams mlp;
  std::array<GatLayerParams, 2> layers;
  std::uint64_t rng_seed = 0;
  Mode mode = Mode::Eval;
};

/// Xavier-uniform weights, zero biases.
EncoderParams init_encoder(const Architecture& arch, std::uint64_t seed);
/// Same structure with every tensor zeroed; used as a gradient buffer.
EncoderParams zeros_like(const EncoderParams& params);

using NamedTensor = std::pair<std::string, Matrix*>;
using ConstNamedTensor = std::pair<std::string, const Matrix*>;
std::vector<NamedTensor> named_tensors(EncoderParams& params);
std::vector<ConstNamedTensor> named_tensors(const EncoderParams& params);
std::size_t parameter_count(const EncoderParams& params);
void accumulate(EncoderParams& into, const EncoderParams& grads, double scale = 1.0);

/// Message-passing structure: the graph's edges plus one self-loop per node.
struct EncoderGraph {
  std::size_t num_nodes = 0;
  std::vector<int> src, dst;
  std::vector<std::vector<int>> incoming;  // edge indices grouped by destination

  static EncoderGraph from_scene(const SceneGraph& graph);
  static EncoderGraph from_edges(std::size_t n, const std::vector<std::pair<int, int>>& edges, bool add_self_loops);
  std::size_t num_edges() const { return src.size(); }
};

// --- building blocks (exposed for testing) ---

struct MlpCache {
  Matrix x, z1, a1, z2;
  Matrix mask1, mask2;  // inverted-dropout scale factors; empty in Eval
};

Matrix mlp_forward(const Matrix& x, const MlpParams& params, Mode mode, Rng* rng = nullptr, MlpCache* cache = nullptr);
void mlp_backward(const MlpCache& cache, const MlpParams& params, const Matrix& d_out, MlpParams& grads);

/// One logit per directed edge: att^T LeakyReLU(Wa [h_src || h_dst]).
std::vector<double> gatv2_scores(const Matrix& h, const EncoderGraph& graph, const GatHead& head,
                                 Matrix* pre_activation = nullptr);

/// Per-destination softmax over incoming edges. In Train mode inverted
/// dropout is applied to the weights and the masked result is returned in
/// `dropped` (which equals the weights in Eval mode).
std::vector<double> attention_normalize(const std::vector<double>& logits, const EncoderGraph& graph, Mode mode,
                                        double attn_dropout_p, Rng* rng = nullptr,
                                        std::vector<double>* dropped = nullptr,
                                        std::vector<double>* mask = nullptr);

struct HeadCache {
  Matrix pre;    // E x head_dim, Wa [h_u || h_v]
  Matrix value;  // N x head_dim, Wh h
  std::vector<double> alpha;
  std::vector<double> beta;  // alpha after attention dropout
  std::vector<double> mask;  // dropout scale per edge; empty in Eval
};

struct LayerCache {
  Matrix input;
  std::vector<HeadCache> heads;
  Matrix combined;   // before ReLU / node dropout
  Matrix node_mask;  // empty unless Train and relu layer
};

Matrix gatv2_layer_forward(const Matrix& h, const EncoderGraph& graph, const GatLayerParams& layer, Mode mode,
                           Rng* rng = nullptr, LayerCache* cache = nullptr);
/// Returns the gradient w.r.t. the layer input and accumulates parameter
/// gradients into `grads`.
Matrix gatv2_layer_backward(const LayerCache& cache, const EncoderGraph& graph, const GatLayerParams& layer,
                            const Matrix& d_out, GatLayerParams& grads);

struct EncoderCache {
  EncoderGraph graph;
  MlpCache mlp;
  std::array<LayerCache, 2> layers;
  Matrix output;
  bool valid = false;
};

/// N x output_dim embeddings. Train mode draws dropout masks from `mask_seed`;
/// the same seed reproduces the same masks.
Matrix encoder_forward(const SceneGraph& graph, const EncoderParams& params, std::uint64_t mask_seed = 0,
                       EncoderCache* cache = nullptr);
void encoder_backward(const EncoderCache& cache, const EncoderParams& params, const Matrix& d_embeddings,
                      EncoderParams& grads);

/// Central-difference check of `analytic` against `f` at `x`. Returns the worst
/// |a-n| / max(|a|, |n|, floor); the floor keeps round-off on vanishing
/// gradients from reading as a large relative error. Throws if `f` is not deterministic.
double grad_check(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                  const std::vector<double>& analytic, double eps = 1e-5, double floor = 1e-6);

std::vector<double> flatten(const EncoderParams& params);
void unflatten(const std::vector<double>& flat, EncoderParams& params);

// --- weights file ---

inline constexpr int kWeightsFormatVersion = 1;

json weights_to_json(const EncoderParams& params, const FeatureStats& stats);
/// Loads into a freshly initialized architecture; rejects shape mismatches.
std::pair<EncoderParams, FeatureStats> weights_from_json(const json& j);

}  // namespace sgm
