#pragma once

#include <cstddef>
#include <vector>

#include "sgm/graph.hpp"
#include "sgm/io.hpp"
#include "sgm/matrix.hpp"
#include "sgm/nn.hpp"

namespace sgm {

/// N1 x N2 dot-product similarity; A-graph nodes index rows.
Matrix affinity(const Matrix& h_a, const Matrix& h_s);

/// (A - mean) / sqrt(var + eps) over all entries jointly (population variance).
Matrix instance_normalize(const Matrix& a, double eps = 1e-5);
Matrix instance_normalize_backward(const Matrix& input, const Matrix& output, const Matrix& d_output,
                                   double eps = 1e-5);

/// Appends N1 - N2 zero columns, producing an N1 x N1 matrix.
Matrix pad_dummy_columns(const Matrix& a);

struct SinkhornOptions {
  double temperature = 1.0;
  int max_iters = 100;
  double tol = 1e-6;
  /// Run exactly max_iters iterations and keep every iterate for backward.
  bool fixed_iterations = false;
};

struct SoftAssignment {
  Matrix values;  // N1 x N1, doubly stochastic
  std::size_t n_real_cols = 0;
  int iterations = 0;
  bool converged = false;

  Matrix real_block() const;
};

/// Log-domain iterates of an unrolled run: logs[0] = input / tau, then one
/// entry after each row and each column normalization.
struct SinkhornTrace {
  std::vector<Matrix> logs;
  double temperature = 1.0;
  bool fixed_iterations = false;
};

SoftAssignment sinkhorn(const Matrix& scores, const SinkhornOptions& opts = {}, SinkhornTrace* trace = nullptr);
/// Gradient w.r.t. the Sinkhorn input, given the gradient w.r.t. its output.
Matrix sinkhorn_backward(const SinkhornTrace& trace, const Matrix& d_output);

struct MatchPair {
  NodeId s_node = 0;
  NodeId a_node = 0;
  double score = 0.0;
  friend bool operator==(const MatchPair&, const MatchPair&) = default;
};

struct MatchResult {
  std::vector<MatchPair> pairs;  // sorted by s_node
  double elapsed_s = 0.0;

  double total_score() const;
};

/// Maximum-similarity injective assignment of the N2 columns (S-nodes) to the
/// N1 rows (A-nodes). Among optimal assignments, returns the one whose A-node
/// sequence (ordered by S-node) is lexicographically smallest.
MatchResult hungarian(const Matrix& similarity);

/// Preprocessed encoder plus everything needed to prepare raw graphs.
struct Model {
  EncoderParams params;
  FeatureStats stats;
  AugmentConfig augment;
};

/// Augments (when the graph has only room_ws edges) and standardizes.
SceneGraph prepare_graph(const SceneGraph& raw, const FeatureStats& stats, const AugmentConfig& augment);

struct MatchOptions {
  SinkhornOptions sinkhorn;
  double norm_eps = 1e-5;
};

/// Full inference pipeline on prepared graphs; params must be in Eval mode.
MatchResult match(const SceneGraph& agraph, const SceneGraph& sgraph, const EncoderParams& params,
                  const MatchOptions& opts = {});
/// Same, starting from raw graphs.
MatchResult match(const SceneGraph& agraph_raw, const SceneGraph& sgraph_raw, const Model& model,
                  const MatchOptions& opts = {});

json match_result_to_json(const MatchResult& r);
MatchResult match_result_from_json(const json& j);

json model_to_json(const Model& model);
Model model_from_json(const json& j);

}  // namespace sgm
