#include "sgm/io.hpp"

#include <fstream>
#include <sstream>

namespace sgm {

namespace {

EdgeType edge_type_from(const std::string& s) {
  if (s == "room_ws") return EdgeType::RoomToWS;
  if (s == "room_room") return EdgeType::RoomToRoom;
  if (s == "ws_ws") return EdgeType::WSToWS;
  throw InputError("unknown edge type '" + s + "'");
}

Vec2 vec2_from(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 2) throw InputError(std::string(what) + " must be a 2-element array");
  return {j[0].get<double>(), j[1].get<double>()};
}

}  // namespace

json graph_to_json(const SceneGraph& graph) {
  json nodes = json::array();
  for (const auto& n : graph.nodes) {
    json jn = {{"id", n.id}, {"type", to_string(n.type)}, {"centroid", {n.centroid.x, n.centroid.y}}};
    if (n.type == NodeType::WallSurface) {
      jn["normal"] = {n.normal.x, n.normal.y};
      jn["length"] = n.length;
      jn["parent_room"] = *n.parent_room;
    }
    nodes.push_back(std::move(jn));
  }
  json edges = json::array();
  for (const auto& e : graph.edges) edges.push_back({{"src", e.src}, {"dst", e.dst}, {"type", to_string(e.type)}});
  return {{"version", kGraphFormatVersion}, {"nodes", std::move(nodes)}, {"edges", std::move(edges)}};
}

SceneGraph graph_from_json(const json& j) {
  try {
    if (!j.is_object()) throw InputError("graph JSON must be an object");
    const int version = j.at("version").get<int>();
    if (version != kGraphFormatVersion) throw InputError("unsupported graph format version " + std::to_string(version));
    SceneGraph g;
    for (const auto& jn : j.at("nodes")) {
      NodeRecord n;
      n.id = jn.at("id").get<NodeId>();
      const auto type = jn.at("type").get<std::string>();
      n.centroid = vec2_from(jn.at("centroid"), "centroid");
      if (type == "room") {
        n.type = NodeType::Room;
      } else if (type == "ws") {
        n.type = NodeType::WallSurface;
        n.normal = vec2_from(jn.at("normal"), "normal");
        n.length = jn.at("length").get<double>();
        n.parent_room = jn.at("parent_room").get<NodeId>();
      } else {
        throw InputError("unknown node type '" + type + "'");
      }
      g.nodes.push_back(n);
    }
    for (const auto& je : j.at("edges")) {
      g.edges.push_back({je.at("src").get<NodeId>(), je.at("dst").get<NodeId>(),
                         edge_type_from(je.at("type").get<std::string>())});
    }
    g.validate();
    return g;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed graph JSON: ") + e.what());
  }
}

json stats_to_json(const FeatureStats& stats) { return {{"mean", stats.mean}, {"std", stats.stddev}}; }

FeatureStats stats_from_json(const json& j) {
  try {
    FeatureStats s;
    s.mean = j.at("mean").get<FeatureVector>();
    s.stddev = j.at("std").get<FeatureVector>();
    return s;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed feature stats: ") + e.what());
  }
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw InputError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw InputError("cannot write " + path.string());
    out << text;
    if (!out) throw InputError("write failed for " + path.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw InputError("cannot move " + tmp.string() + " into place: " + ec.message());
}

void write_json_file(const std::filesystem::path& path, const json& j, int indent) {
  write_text_file(path, j.dump(indent) + "\n");
}

}  // namespace sgm
