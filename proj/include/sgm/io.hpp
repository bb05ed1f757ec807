#pragma once

#include <filesystem>
#include <string>

#include "json.hpp"

#include "sgm/graph.hpp"

namespace sgm {

using json = nlohmann::json;

inline constexpr int kGraphFormatVersion = 1;

json graph_to_json(const SceneGraph& graph);
/// Parses and validates the graph interchange format. Throws InputError.
SceneGraph graph_from_json(const json& j);

json stats_to_json(const FeatureStats& stats);
FeatureStats stats_from_json(const json& j);

json read_json_file(const std::filesystem::path& path);
/// Writes via a temporary sibling file and rename, so readers never see a
/// partial file.
void write_json_file(const std::filesystem::path& path, const json& j, int indent = 2);
void write_text_file(const std::filesystem::path& path, const std::string& text);

}  // namespace sgm
