#include "sgm/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "sgm/rng.hpp"

namespace sgm {

namespace {

constexpr int kMaxPackingAttempts = 32;
constexpr int kMaxRoomResamples = 16;
constexpr double kMinWallLength = 0.01;

void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw InputError(std::string(name) + " must be in [0, 1]");
}

void check_sigma(double s, const char* name) {
  if (!(s >= 0.0) || !std::isfinite(s)) throw InputError(std::string(name) + " must be >= 0");
}

}  // namespace

void GenParams::validate() const {
  if (rooms_min < 1) throw InputError("rooms_min must be >= 1");
  if (rooms_max < rooms_min) throw InputError("rooms_max must be >= rooms_min");
  if (!(room_size_min > 0.0) || !(room_size_max >= room_size_min)) {
    throw InputError("room size bounds must be positive with min <= max");
  }
}

void NoiseParams::validate() const {
  check_probability(p_drop_room, "p_drop_room");
  check_probability(p_drop_ws, "p_drop_ws");
  check_sigma(sigma_centroid, "sigma_centroid");
  check_sigma(sigma_normal_angle, "sigma_normal_angle");
  check_sigma(sigma_length, "sigma_length");
}

void GroundTruth::validate(const SceneGraph& agraph, const SceneGraph& sgraph) const {
  if (s_to_a.size() != sgraph.size()) throw InputError("ground truth must cover every S-graph node");
  std::vector<bool> used(agraph.size(), false);
  for (std::size_t s = 0; s < s_to_a.size(); ++s) {
    const NodeId a = s_to_a[s];
    if (a < 0 || static_cast<std::size_t>(a) >= agraph.size()) throw InputError("ground truth A-node out of range");
    if (used[a]) throw InputError("ground truth is not injective");
    used[a] = true;
    if (agraph.nodes[a].type != sgraph.nodes[s].type) throw InputError("ground truth does not preserve node type");
  }
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "?";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw InputError("unknown split '" + s + "'");
}

std::vector<std::size_t> Corpus::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < splits.size(); ++i)
    if (splits[i] == s) out.push_back(i);
  return out;
}

SceneGraph generate_floorplan(const GenParams& params) {
  params.validate();
  Rng rng(params.seed);
  const int n_rooms =
      params.rooms_min + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(params.rooms_max - params.rooms_min + 1)));
  const int side = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n_rooms)))) + 1;

  std::vector<double> widths(side), heights(side);
  for (auto& w : widths) w = uniform(rng, params.room_size_min, params.room_size_max);
  for (auto& h : heights) h = uniform(rng, params.room_size_min, params.room_size_max);

  std::vector<std::pair<int, int>> cells;  // (col, row) in growth order
  for (int attempt = 0; attempt < kMaxPackingAttempts && static_cast<int>(cells.size()) < n_rooms; ++attempt) {
    cells.clear();
    std::set<std::pair<int, int>> occupied;
    cells.emplace_back(static_cast<int>(uniform_index(rng, side)), static_cast<int>(uniform_index(rng, side)));
    occupied.insert(cells.back());
    while (static_cast<int>(cells.size()) < n_rooms) {
      std::set<std::pair<int, int>> frontier;
      for (auto [c, r] : cells) {
        const std::pair<int, int> nbrs[] = {{c + 1, r}, {c - 1, r}, {c, r + 1}, {c, r - 1}};
        for (auto nb : nbrs) {
          if (nb.first < 0 || nb.second < 0 || nb.first >= side || nb.second >= side) continue;
          if (!occupied.contains(nb)) frontier.insert(nb);
        }
      }
      if (frontier.empty()) break;
      auto it = frontier.begin();
      std::advance(it, static_cast<long>(uniform_index(rng, frontier.size())));
      cells.push_back(*it);
      occupied.insert(*it);
    }
  }
  if (static_cast<int>(cells.size()) < n_rooms) {
    throw RuntimeFailure("floor plan packing failed for seed " + std::to_string(params.seed));
  }

  std::vector<double> x0(side + 1, 0.0), y0(side + 1, 0.0);
  for (int i = 0; i < side; ++i) {
    x0[i + 1] = x0[i] + widths[i];
    y0[i + 1] = y0[i] + heights[i];
  }

  SceneGraph g;
  for (auto [c, r] : cells) {
    const double w = widths[c];
    const double h = heights[r];
    const double cx = x0[c] + 0.5 * w;
    const double cy = y0[r] + 0.5 * h;
    const NodeId room = static_cast<NodeId>(g.nodes.size());
    g.nodes.push_back(NodeRecord::room(room, {cx, cy}));
    struct Side {
      Vec2 centroid, normal;
      double length;
    };
    const Side sides[] = {
        {{x0[c] + w, cy}, {1, 0}, h},  // east
        {{cx, y0[r] + h}, {0, 1}, w},  // north
        {{x0[c], cy}, {-1, 0}, h},     // west
        {{cx, y0[r]}, {0, -1}, w},     // south
    };
    for (const auto& s : sides) {
      const NodeId id = static_cast<NodeId>(g.nodes.size());
      g.nodes.push_back(NodeRecord::wall(id, s.centroid, s.normal, s.length, room));
      g.edges.push_back({room, id, EdgeType::RoomToWS});
    }
  }
  return g;
}

std::pair<SceneGraph, GroundTruth> perturb(const SceneGraph& agraph, const NoiseParams& noise) {
  noise.validate();
  for (const auto& e : agraph.edges) {
    if (e.type != EdgeType::RoomToWS) throw InputError("perturb expects an un-augmented A-graph");
  }
  std::vector<NodeId> rooms;
  for (const auto& n : agraph.nodes)
    if (n.type == NodeType::Room) rooms.push_back(n.id);
  if (rooms.empty()) throw InputError("perturb needs an A-graph with at least one room");

  Rng rng(noise.seed);
  std::vector<bool> keep(agraph.size(), false);
  bool any_room = false;
  for (int attempt = 0; attempt < kMaxRoomResamples && !any_room; ++attempt) {
    for (NodeId r : rooms) {
      keep[r] = uniform01(rng) >= noise.p_drop_room;
      any_room = any_room || keep[r];
    }
  }
  if (!any_room) keep[rooms[uniform_index(rng, rooms.size())]] = true;

  for (const auto& n : agraph.nodes) {
    if (n.type != NodeType::WallSurface || !keep[*n.parent_room]) continue;
    keep[n.id] = uniform01(rng) >= noise.p_drop_ws;
  }

  std::vector<NodeId> a_to_s(agraph.size(), -1);
  SceneGraph s;
  GroundTruth gt;
  for (const auto& n : agraph.nodes) {
    if (!keep[n.id]) continue;
    NodeRecord m = n;
    m.id = static_cast<NodeId>(s.nodes.size());
    a_to_s[n.id] = m.id;
    m.centroid.x += noise.sigma_centroid * standard_normal(rng);
    m.centroid.y += noise.sigma_centroid * standard_normal(rng);
    if (m.type == NodeType::WallSurface) {
      m.parent_room = a_to_s[*n.parent_room];
      const double angle = noise.sigma_normal_angle * standard_normal(rng);
      const double nx = std::cos(angle) * n.normal.x - std::sin(angle) * n.normal.y;
      const double ny = std::sin(angle) * n.normal.x + std::cos(angle) * n.normal.y;
      const double norm = std::hypot(nx, ny);
      m.normal = {nx / norm, ny / norm};
      m.length = std::max(kMinWallLength, n.length + noise.sigma_length * standard_normal(rng));
    }
    s.nodes.push_back(m);
    gt.s_to_a.push_back(n.id);
  }
  for (const auto& e : agraph.edges) {
    if (keep[e.src] && keep[e.dst]) s.edges.push_back({a_to_s[e.src], a_to_s[e.dst], e.type});
  }
  return {std::move(s), std::move(gt)};
}

std::vector<Split> stratified_split(std::span<const std::size_t> sizes, const std::array<double, 3>& fractions,
                                    std::uint64_t seed, std::size_t bins) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw InputError("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw InputError("split fractions must sum to 1");
  if (bins == 0) throw InputError("need at least one bin");
  const std::size_t n = sizes.size();
  std::vector<Split> out(n, Split::Train);
  if (n == 0) return out;
  bins = std::min(bins, n);

  std::vector<std::size_t> sorted(sizes.begin(), sizes.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::size_t> edges;  // lower bounds of bins 1..bins-1
  for (std::size_t k = 1; k < bins; ++k) edges.push_back(sorted[k * n / bins]);

  std::vector<std::vector<std::size_t>> members(bins);
  for (std::size_t i = 0; i < n; ++i) {
    const auto b = static_cast<std::size_t>(
        std::count_if(edges.begin(), edges.end(), [&](std::size_t e) { return sizes[i] >= e; }));
    members[b].push_back(i);
  }

  Rng rng(seed);
  for (auto& bin : members) {
    if (bin.empty()) continue;
    std::shuffle(bin.begin(), bin.end(), rng);
    const double m = static_cast<double>(bin.size());
    std::array<std::size_t, 3> counts{};
    std::array<double, 3> rem{};
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      const double q = m * fractions[k];
      counts[k] = static_cast<std::size_t>(std::floor(q + 1e-9));
      rem[k] = q - static_cast<double>(counts[k]);
      assigned += counts[k];
    }
    std::array<std::size_t, 3> order{0, 1, 2};
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rem[a] > rem[b] + 1e-12; });
    for (std::size_t k = 0; assigned < bin.size(); ++k, ++assigned) ++counts[order[k % 3]];

    std::size_t pos = 0;
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t c = 0; c < counts[k]; ++c) out[bin[pos++]] = static_cast<Split>(k);
    }
  }
  return out;
}

Corpus generate_corpus(const GenParams& gen, const NoiseParams& noise, std::size_t count, std::uint64_t seed,
                       const std::array<double, 3>& fractions) {
  gen.validate();
  noise.validate();
  Corpus corpus;
  corpus.seed = seed;
  corpus.gen = gen;
  corpus.noise = noise;
  corpus.fractions = fractions;
  corpus.samples.reserve(count);
  std::vector<std::size_t> sizes;
  for (std::size_t i = 0; i < count; ++i) {
    Sample sample;
    sample.seed = derive_seed(seed, i);
    GenParams g = gen;
    g.seed = derive_seed(sample.seed, 0);
    NoiseParams p = noise;
    p.seed = derive_seed(sample.seed, 1);
    sample.agraph = generate_floorplan(g);
    std::tie(sample.sgraph, sample.gt) = perturb(sample.agraph, p);
    sizes.push_back(sample.agraph.size());
    corpus.samples.push_back(std::move(sample));
  }
  corpus.splits = stratified_split(sizes, fractions, derive_seed(seed, 0xffffffffULL));
  return corpus;
}

json gen_params_to_json(const GenParams& p) {
  return {{"rooms_min", p.rooms_min},
          {"rooms_max", p.rooms_max},
          {"room_size_min", p.room_size_min},
          {"room_size_max", p.room_size_max},
          {"seed", p.seed}};
}

GenParams gen_params_from_json(const json& j, GenParams p) {
  p.rooms_min = j.value("rooms_min", p.rooms_min);
  p.rooms_max = j.value("rooms_max", p.rooms_max);
  p.room_size_min = j.value("room_size_min", p.room_size_min);
  p.room_size_max = j.value("room_size_max", p.room_size_max);
  p.seed = j.value("seed", p.seed);
  return p;
}

json noise_params_to_json(const NoiseParams& p) {
  return {{"p_drop_room", p.p_drop_room},
          {"p_drop_ws", p.p_drop_ws},
          {"sigma_centroid", p.sigma_centroid},
          {"sigma_normal_angle", p.sigma_normal_angle},
          {"sigma_length", p.sigma_length},
          {"seed", p.seed}};
}

NoiseParams noise_params_from_json(const json& j, NoiseParams p) {
  p.p_drop_room = j.value("p_drop_room", p.p_drop_room);
  p.p_drop_ws = j.value("p_drop_ws", p.p_drop_ws);
  p.sigma_centroid = j.value("sigma_centroid", p.sigma_centroid);
  p.sigma_normal_angle = j.value("sigma_normal_angle", p.sigma_normal_angle);
  p.sigma_length = j.value("sigma_length", p.sigma_length);
  p.seed = j.value("seed", p.seed);
  return p;
}

json ground_truth_to_json(const GroundTruth& gt) {
  json pairs = json::array();
  for (std::size_t s = 0; s < gt.s_to_a.size(); ++s) pairs.push_back({static_cast<NodeId>(s), gt.s_to_a[s]});
  return pairs;
}

GroundTruth ground_truth_from_json(const json& j) {
  GroundTruth gt;
  gt.s_to_a.assign(j.size(), -1);
  for (const auto& p : j) {
    const auto s = p.at(0).get<NodeId>();
    if (s < 0 || static_cast<std::size_t>(s) >= gt.s_to_a.size() || gt.s_to_a[s] != -1) {
      throw InputError("ground truth S-node ids must be a dense set");
    }
    gt.s_to_a[s] = p.at(1).get<NodeId>();
  }
  return gt;
}

json sample_to_json(const Sample& s) {
  return {{"a_graph", graph_to_json(s.agraph)},
          {"s_graph", graph_to_json(s.sgraph)},
          {"ground_truth", ground_truth_to_json(s.gt)},
          {"seed", s.seed}};
}

Sample sample_from_json(const json& j) {
  try {
    Sample s;
    s.agraph = graph_from_json(j.at("a_graph"));
    s.sgraph = graph_from_json(j.at("s_graph"));
    s.gt = ground_truth_from_json(j.at("ground_truth"));
    s.seed = j.value("seed", std::uint64_t{0});
    s.gt.validate(s.agraph, s.sgraph);
    return s;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed sample: ") + e.what());
  }
}

void write_corpus(const std::filesystem::path& dir, const Corpus& corpus) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw InputError("cannot create " + dir.string() + ": " + ec.message());
  json seeds = json::array();
  json splits = json::array();
  for (std::size_t i = 0; i < corpus.samples.size(); ++i) {
    write_json_file(dir / ("sample_" + std::to_string(i) + ".json"), sample_to_json(corpus.samples[i]), -1);
    seeds.push_back(corpus.samples[i].seed);
    splits.push_back(to_string(corpus.splits[i]));
  }
  const json manifest = {{"version", 1},
                         {"count", corpus.samples.size()},
                         {"seed", corpus.seed},
                         {"gen_params", gen_params_to_json(corpus.gen)},
                         {"noise_params", noise_params_to_json(corpus.noise)},
                         {"fractions", corpus.fractions},
                         {"sample_seeds", seeds},
                         {"splits", splits}};
  write_json_file(dir / "manifest.json", manifest);
}

Corpus load_corpus(const std::filesystem::path& dir) {
  const json m = read_json_file(dir / "manifest.json");
  try {
    if (m.at("version").get<int>() != 1) throw InputError("unsupported corpus manifest version");
    Corpus c;
    c.seed = m.at("seed").get<std::uint64_t>();
    c.gen = gen_params_from_json(m.at("gen_params"));
    c.noise = noise_params_from_json(m.at("noise_params"));
    c.fractions = m.at("fractions").get<std::array<double, 3>>();
    const auto count = m.at("count").get<std::size_t>();
    const auto& splits = m.at("splits");
    if (splits.size() != count) throw InputError("manifest split list does not match sample count");
    for (std::size_t i = 0; i < count; ++i) {
      c.samples.push_back(sample_from_json(read_json_file(dir / ("sample_" + std::to_string(i) + ".json"))));
      c.splits.push_back(split_from_string(splits[i].get<std::string>()));
    }
    return c;
  } catch (const json::exception& e) {
    throw InputError("malformed corpus manifest: " + std::string(e.what()));
  }
}

}  // namespace sgm
