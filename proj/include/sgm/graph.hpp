#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sgm/matrix.hpp"

namespace sgm {

inline constexpr std::size_t kFeatureDim = 7;
using FeatureVector = std::array<double, kFeatureDim>;

enum class NodeType { Room, WallSurface };
enum class EdgeType { RoomToWS, RoomToRoom, WSToWS };

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const Vec2&, const Vec2&) = default;
};

using NodeId = int;

struct NodeRecord {
  NodeId id = 0;
  NodeType type = NodeType::Room;
  Vec2 centroid;
  Vec2 normal;           // (0,0) for rooms
  double length = -1.0;  // -1 for rooms
  std::optional<NodeId> parent_room;

  static NodeRecord room(NodeId id, Vec2 centroid);
  static NodeRecord wall(NodeId id, Vec2 centroid, Vec2 normal, double length, NodeId parent);

  friend bool operator==(const NodeRecord&, const NodeRecord&) = default;
};

struct Edge {
  NodeId src = 0;
  NodeId dst = 0;
  EdgeType type = EdgeType::RoomToWS;
  friend auto operator<=>(const Edge&, const Edge&) = default;
};

/// Two-level room / wall-surface graph. Node ids are dense and equal to the
/// node's index in `nodes`.
struct SceneGraph {
  std::vector<NodeRecord> nodes;
  std::vector<Edge> edges;
  Matrix features;  // N x 7 standardized features; empty until standardized

  std::size_t size() const { return nodes.size(); }
  bool has_features() const { return !features.empty(); }
  std::size_t count(NodeType t) const;

  /// Throws InputError describing the first violated invariant.
  void validate() const;

  friend bool operator==(const SceneGraph&, const SceneGraph&) = default;
};

/// Per-dimension affine standardization. Dims 0-1 (one-hot) are identity.
struct FeatureStats {
  FeatureVector mean{};
  FeatureVector stddev{1, 1, 1, 1, 1, 1, 1};

  static FeatureStats identity() { return {}; }
  friend bool operator==(const FeatureStats&, const FeatureStats&) = default;
};

struct AugmentConfig {
  double adjacency_dist_tol = 0.5;         // meters
  double adjacency_angle_tol = 0.17453292519943295;  // 10 degrees
};

void validate_node(const NodeRecord& node);

/// [type0, type1, cx, cy, nx, ny, len]
FeatureVector build_feature_vector(const NodeRecord& node);
Matrix raw_features(const SceneGraph& graph);

FeatureStats compute_feature_stats(std::span<const SceneGraph* const> graphs);
FeatureStats compute_feature_stats(std::span<const SceneGraph> graphs);

SceneGraph standardize_features(SceneGraph graph, const FeatureStats& stats);

/// Adds room-room adjacency edges and per-room angular WS rings to a graph
/// holding only room->WS edges.
SceneGraph augment_edges(SceneGraph graph, const AugmentConfig& cfg = {});

/// Applies a node relabeling: new id of old node i is perm[i].
SceneGraph relabel(const SceneGraph& graph, std::span<const NodeId> perm);

std::string to_string(NodeType t);
std::string to_string(EdgeType t);

}  // namespace sgm
