#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "sgm/graph.hpp"
#include "sgm/io.hpp"

namespace sgm {

struct GenParams {
  int rooms_min = 5;
  int rooms_max = 10;
  double room_size_min = 3.0;  // meters
  double room_size_max = 6.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct NoiseParams {
  double p_drop_room = 0.1;
  double p_drop_ws = 0.2;
  double sigma_centroid = 0.1;                       // meters, per axis
  double sigma_normal_angle = 0.08726646259971647;   // 5 degrees
  double sigma_length = 0.1;                         // meters
  std::uint64_t seed = 0;

  static NoiseParams none() { return {0, 0, 0, 0, 0, 0}; }
  void validate() const;
};

/// s_to_a[s] is the A-graph node observed as S-graph node s.
struct GroundTruth {
  std::vector<NodeId> s_to_a;

  std::size_t size() const { return s_to_a.size(); }
  void validate(const SceneGraph& agraph, const SceneGraph& sgraph) const;
  friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

enum class Split { Train, Val, Test };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct Sample {
  SceneGraph agraph;  // un-augmented, room_ws edges only
  SceneGraph sgraph;
  GroundTruth gt;
  std::uint64_t seed = 0;
};

struct Corpus {
  std::vector<Sample> samples;
  std::vector<Split> splits;  // one label per sample
  std::uint64_t seed = 0;
  GenParams gen;
  NoiseParams noise;
  std::array<double, 3> fractions{0.70, 0.15, 0.15};

  std::vector<std::size_t> indices(Split s) const;
};

/// Rectilinear floor plan: rooms are cells of a randomly sized grid grown as a
/// connected cluster, each with four wall surfaces. Only room_ws edges.
SceneGraph generate_floorplan(const GenParams& params);

/// Drops rooms (cascading to their walls) and walls, then adds geometric
/// noise. Draw order: one uniform per room (retried as a block while every
/// room is dropped), one uniform per wall of a surviving room, then for each
/// surviving node two normals for the centroid and, for walls, one for the
/// normal angle and one for the length.
std::pair<SceneGraph, GroundTruth> perturb(const SceneGraph& agraph, const NoiseParams& noise);

/// Bins samples by A-graph size quantiles, shuffles each bin and apportions it
/// by largest remainder. Ties in remainder go to the earlier split.
std::vector<Split> stratified_split(std::span<const std::size_t> sizes, const std::array<double, 3>& fractions,
                                    std::uint64_t seed, std::size_t bins = 4);

Corpus generate_corpus(const GenParams& gen, const NoiseParams& noise, std::size_t count, std::uint64_t seed,
                       const std::array<double, 3>& fractions = {0.70, 0.15, 0.15});

json gen_params_to_json(const GenParams& p);
GenParams gen_params_from_json(const json& j, GenParams base = {});
json noise_params_to_json(const NoiseParams& p);
NoiseParams noise_params_from_json(const json& j, NoiseParams base = {});

json sample_to_json(const Sample& s);
Sample sample_from_json(const json& j);
json ground_truth_to_json(const GroundTruth& gt);
GroundTruth ground_truth_from_json(const json& j);

/// Writes sample_<idx>.json files and manifest.json.
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);
Corpus load_corpus(const std::filesystem::path& dir);

}  // namespace sgm
