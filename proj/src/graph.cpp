#include "sgm/graph.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <tuple>

namespace sgm {

NodeRecord NodeRecord::room(NodeId id, Vec2 centroid) {
  NodeRecord n;
  n.id = id;
  n.type = NodeType::Room;
  n.centroid = centroid;
  return n;
}

NodeRecord NodeRecord::wall(NodeId id, Vec2 centroid, Vec2 normal, double length, NodeId parent) {
  NodeRecord n;
  n.id = id;
  n.type = NodeType::WallSurface;
  n.centroid = centroid;
  n.normal = normal;
  n.length = length;
  n.parent_room = parent;
  return n;
}

std::string to_string(NodeType t) { return t == NodeType::Room ? "room" : "ws"; }

std::string to_string(EdgeType t) {
  switch (t) {
    case EdgeType::RoomToWS: return "room_ws";
    case EdgeType::RoomToRoom: return "room_room";
    case EdgeType::WSToWS: return "ws_ws";
  }
  return "?";
}

void validate_node(const NodeRecord& n) {
  const std::string where = "node " + std::to_string(n.id) + ": ";
  if (!std::isfinite(n.centroid.x) || !std::isfinite(n.centroid.y)) {
    throw InputError(where + "non-finite centroid");
  }
  if (n.type == NodeType::Room) {
    if (n.normal.x != 0.0 || n.normal.y != 0.0) throw InputError(where + "room with non-zero normal");
    if (n.length != -1.0) throw InputError(where + "room length must be -1");
    if (n.parent_room) throw InputError(where + "room cannot have a parent room");
    return;
  }
  const double norm = std::hypot(n.normal.x, n.normal.y);
  if (!(std::abs(norm - 1.0) <= 1e-6)) throw InputError(where + "wall surface normal is not unit length");
  if (!(n.length > 0.0) || !std::isfinite(n.length)) throw InputError(where + "wall surface length must be positive");
  if (!n.parent_room) throw InputError(where + "wall surface without parent room");
}

std::size_t SceneGraph::count(NodeType t) const {
  return static_cast<std::size_t>(
      std::count_if(nodes.begin(), nodes.end(), [t](const NodeRecord& n) { return n.type == t; }));
}

void SceneGraph::validate() const {
  const auto n = static_cast<NodeId>(nodes.size());
  for (NodeId i = 0; i < n; ++i) {
    const auto& node = nodes[i];
    if (node.id != i) throw InputError("node ids must be dense; expected " + std::to_string(i));
    validate_node(node);
    if (node.type == NodeType::WallSurface) {
      const NodeId p = *node.parent_room;
      if (p < 0 || p >= n || nodes[p].type != NodeType::Room) {
        throw InputError("node " + std::to_string(i) + ": parent_room is not a room");
      }
    }
  }
  std::set<Edge> seen;
  std::vector<int> parent_edges(nodes.size(), 0);
  for (const auto& e : edges) {
    if (e.src < 0 || e.src >= n || e.dst < 0 || e.dst >= n) throw InputError("edge endpoint out of range");
    if (e.src == e.dst) throw InputError("self-edge on node " + std::to_string(e.src));
    if (!seen.insert(e).second) {
      throw InputError("duplicate edge " + std::to_string(e.src) + "->" + std::to_string(e.dst));
    }
    const NodeType ts = nodes[e.src].type;
    const NodeType td = nodes[e.dst].type;
    const bool ok = (e.type == EdgeType::RoomToWS && ts == NodeType::Room && td == NodeType::WallSurface) ||
                    (e.type == EdgeType::RoomToRoom && ts == NodeType::Room && td == NodeType::Room) ||
                    (e.type == EdgeType::WSToWS && ts == NodeType::WallSurface && td == NodeType::WallSurface);
    if (!ok) throw InputError("edge " + to_string(e.type) + " has endpoints of the wrong type");
    if (e.type == EdgeType::RoomToWS) {
      if (nodes[e.dst].parent_room != e.src) {
        throw InputError("room_ws edge into node " + std::to_string(e.dst) + " does not come from its parent");
      }
      ++parent_edges[e.dst];
    }
  }
  for (NodeId i = 0; i < n; ++i) {
    if (nodes[i].type == NodeType::WallSurface && parent_edges[i] != 1) {
      throw InputError("wall surface " + std::to_string(i) + " needs exactly one room_ws edge");
    }
  }
  if (has_features() && (features.rows() != nodes.size() || features.cols() != kFeatureDim)) {
    throw InputError("feature matrix shape " + shape_str(features) + " does not match graph");
  }
}

FeatureVector build_feature_vector(const NodeRecord& node) {
  validate_node(node);
  if (node.type == NodeType::Room) return {1, 0, node.centroid.x, node.centroid.y, 0, 0, -1};
  return {0, 1, node.centroid.x, node.centroid.y, node.normal.x, node.normal.y, node.length};
}

Matrix raw_features(const SceneGraph& graph) {
  Matrix x(graph.size(), kFeatureDim);
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const auto f = build_feature_vector(graph.nodes[i]);
    std::copy(f.begin(), f.end(), x.row(i).begin());
  }
  return x;
}

FeatureStats compute_feature_stats(std::span<const SceneGraph* const> graphs) {
  std::array<double, kFeatureDim> sum{};
  std::size_t count = 0;
  for (const auto* g : graphs) {
    for (const auto& node : g->nodes) {
      const auto f = build_feature_vector(node);
      for (std::size_t d = 0; d < kFeatureDim; ++d) sum[d] += f[d];
      ++count;
    }
  }
  if (count == 0) throw InputError("feature statistics need at least one node");

  FeatureStats stats;
  for (std::size_t d = 2; d < kFeatureDim; ++d) stats.mean[d] = sum[d] / static_cast<double>(count);
  std::array<double, kFeatureDim> sq{};
  for (const auto* g : graphs) {
    for (const auto& node : g->nodes) {
      const auto f = build_feature_vector(node);
      for (std::size_t d = 2; d < kFeatureDim; ++d) sq[d] += (f[d] - stats.mean[d]) * (f[d] - stats.mean[d]);
    }
  }
  for (std::size_t d = 2; d < kFeatureDim; ++d) {
    const double s = std::sqrt(sq[d] / static_cast<double>(count));
    stats.stddev[d] = s < 1e-8 ? 1.0 : s;
  }
  return stats;
}

FeatureStats compute_feature_stats(std::span<const SceneGraph> graphs) {
  std::vector<const SceneGraph*> ptrs;
  ptrs.reserve(graphs.size());
  for (const auto& g : graphs) ptrs.push_back(&g);
  return compute_feature_stats(std::span<const SceneGraph* const>(ptrs));
}

SceneGraph standardize_features(SceneGraph graph, const FeatureStats& stats) {
  for (double s : stats.stddev) {
    if (!(s > 0.0)) throw InputError("feature stats contain a non-positive std");
  }
  Matrix x = raw_features(graph);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t d = 2; d < kFeatureDim; ++d) x(i, d) = (x(i, d) - stats.mean[d]) / stats.stddev[d];
  }
  graph.features = std::move(x);
  return graph;
}

namespace {

bool walls_share_boundary(const NodeRecord& a, const NodeRecord& b, const AugmentConfig& cfg) {
  const double dist = std::hypot(a.centroid.x - b.centroid.x, a.centroid.y - b.centroid.y);
  if (dist > cfg.adjacency_dist_tol) return false;
  // anti-parallel within tolerance: angle(a, -b) <= tol
  const double dot = -(a.normal.x * b.normal.x + a.normal.y * b.normal.y);
  return dot >= std::cos(cfg.adjacency_angle_tol) - 1e-12;
}

}  // namespace

SceneGraph augment_edges(SceneGraph graph, const AugmentConfig& cfg) {
  const std::size_t n = graph.size();
  for (const auto& e : graph.edges) {
    if (e.type != EdgeType::RoomToWS) throw InputError("augment_edges expects only room_ws edges");
  }
  std::vector<std::vector<NodeId>> walls_of(n);
  std::vector<NodeId> rooms;
  for (const auto& node : graph.nodes) {
    if (node.type == NodeType::Room) {
      rooms.push_back(node.id);
    } else {
      if (!node.parent_room) throw InputError("wall surface " + std::to_string(node.id) + " has no parent room");
      const NodeId p = *node.parent_room;
      if (p < 0 || static_cast<std::size_t>(p) >= n || graph.nodes[p].type != NodeType::Room) {
        throw InputError("wall surface " + std::to_string(node.id) + " has an invalid parent room");
      }
      walls_of[p].push_back(node.id);
    }
  }

  std::set<Edge> present(graph.edges.begin(), graph.edges.end());
  auto add = [&](NodeId s, NodeId d, EdgeType t) {
    const Edge e{s, d, t};
    if (s != d && present.insert(e).second) graph.edges.push_back(e);
  };

  for (std::size_t i = 0; i < rooms.size(); ++i) {
    for (std::size_t j = i + 1; j < rooms.size(); ++j) {
      bool adjacent = false;
      for (NodeId wa : walls_of[rooms[i]]) {
        for (NodeId wb : walls_of[rooms[j]]) {
          if (walls_share_boundary(graph.nodes[wa], graph.nodes[wb], cfg)) {
            adjacent = true;
            break;
          }
        }
        if (adjacent) break;
      }
      if (adjacent) {
        add(rooms[i], rooms[j], EdgeType::RoomToRoom);
        add(rooms[j], rooms[i], EdgeType::RoomToRoom);
      }
    }
  }

  for (NodeId r : rooms) {
    auto ring = walls_of[r];
    if (ring.size() < 2) continue;
    const Vec2 c = graph.nodes[r].centroid;
    std::vector<std::pair<double, NodeId>> keyed;
    keyed.reserve(ring.size());
    for (NodeId w : ring) {
      const Vec2 p = graph.nodes[w].centroid;
      keyed.emplace_back(std::atan2(p.y - c.y, p.x - c.x), w);
    }
    std::sort(keyed.begin(), keyed.end());
    for (std::size_t k = 0; k < keyed.size(); ++k) {
      const NodeId a = keyed[k].second;
      const NodeId b = keyed[(k + 1) % keyed.size()].second;
      add(a, b, EdgeType::WSToWS);
      add(b, a, EdgeType::WSToWS);
    }
  }
  return graph;
}

SceneGraph relabel(const SceneGraph& graph, std::span<const NodeId> perm) {
  const std::size_t n = graph.size();
  if (perm.size() != n) throw InputError("relabel permutation has wrong length");
  std::vector<bool> hit(n, false);
  for (NodeId p : perm) {
    if (p < 0 || static_cast<std::size_t>(p) >= n || hit[p]) throw InputError("relabel input is not a permutation");
    hit[p] = true;
  }
  SceneGraph out;
  out.nodes.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    NodeRecord node = graph.nodes[i];
    node.id = perm[i];
    if (node.parent_room) node.parent_room = perm[*node.parent_room];
    out.nodes[perm[i]] = node;
  }
  out.edges.reserve(graph.edges.size());
  for (const auto& e : graph.edges) out.edges.push_back({perm[e.src], perm[e.dst], e.type});
  if (graph.has_features()) {
    out.features = Matrix(n, graph.features.cols());
    for (std::size_t i = 0; i < n; ++i) {
      std::copy(graph.features.row(i).begin(), graph.features.row(i).end(), out.features.row(perm[i]).begin());
    }
  }
  return out;
}

}  // namespace sgm
