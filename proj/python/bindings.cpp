#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sgm/datagen.hpp"
#include "sgm/eval.hpp"
#include "sgm/io.hpp"
#include "sgm/matching.hpp"
#include "sgm/training.hpp"
#include "sgm/version.hpp"

namespace py = pybind11;
using namespace sgm;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Matrix to_matrix(const Array& a) {
  if (a.ndim() != 2) throw InputError("expected a 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Matrix(r, c, std::vector<double>(a.data(), a.data() + r * c));
}

Array to_array(const Matrix& m) {
  Array out({m.rows(), m.cols()});
  std::copy(m.values().begin(), m.values().end(), out.mutable_data());
  return out;
}

// Graphs, weights and reports cross the boundary as JSON text; the Python
// wrapper turns them into dicts.
SceneGraph parse_graph(const std::string& s) { return graph_from_json(json::parse(s)); }

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Scene graph matching core";
  m.attr("__version__") = kVersion;

  const NoiseParams kNoise;

  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<RuntimeFailure>(m, "RuntimeFailure", PyExc_RuntimeError);

  m.def(
      "generate_floorplan",
      [](int rooms_min, int rooms_max, double size_min, double size_max, std::uint64_t seed) {
        return graph_to_json(generate_floorplan(GenParams{rooms_min, rooms_max, size_min, size_max, seed})).dump();
      },
      py::arg("rooms_min") = 5, py::arg("rooms_max") = 10, py::arg("room_size_min") = 3.0,
      py::arg("room_size_max") = 6.0, py::arg("seed") = 0);

  m.def(
      "perturb",
      [](const std::string& graph, double p_drop_room, double p_drop_ws, double sigma_centroid, double sigma_angle,
         double sigma_length, std::uint64_t seed) {
        const auto [s, gt] = perturb(parse_graph(graph),
                                     NoiseParams{p_drop_room, p_drop_ws, sigma_centroid, sigma_angle, sigma_length, seed});
        return py::make_tuple(graph_to_json(s).dump(), gt.s_to_a);
      },
      py::arg("graph"), py::arg("p_drop_room") = kNoise.p_drop_room, py::arg("p_drop_ws") = kNoise.p_drop_ws,
      py::arg("sigma_centroid") = kNoise.sigma_centroid, py::arg("sigma_normal_angle") = kNoise.sigma_normal_angle,
      py::arg("sigma_length") = kNoise.sigma_length, py::arg("seed") = 0);

  m.def(
      "augment_edges", [](const std::string& graph) { return graph_to_json(augment_edges(parse_graph(graph))).dump(); },
      py::arg("graph"));

  m.def(
      "generate_corpus",
      [](const std::string& out_dir, std::size_t count, std::uint64_t seed, int rooms_min, int rooms_max,
         double p_drop_room, double p_drop_ws, double sigma_centroid, double sigma_angle, double sigma_length) {
        GenParams gp;
        gp.rooms_min = rooms_min;
        gp.rooms_max = rooms_max;
        const NoiseParams np{p_drop_room, p_drop_ws, sigma_centroid, sigma_angle, sigma_length, 0};
        py::gil_scoped_release release;
        write_corpus(out_dir, generate_corpus(gp, np, count, seed));
      },
      py::arg("out_dir"), py::arg("count") = 10, py::arg("seed") = 0, py::arg("rooms_min") = 5,
      py::arg("rooms_max") = 10, py::arg("p_drop_room") = kNoise.p_drop_room, py::arg("p_drop_ws") = kNoise.p_drop_ws,
      py::arg("sigma_centroid") = kNoise.sigma_centroid, py::arg("sigma_normal_angle") = kNoise.sigma_normal_angle,
      py::arg("sigma_length") = kNoise.sigma_length);

  m.def(
      "train",
      [](const std::string& corpus_dir, const std::string& config) {
        const Corpus corpus = load_corpus(corpus_dir);
        const TrainConfig cfg = train_config_from_json(json::parse(config));
        TrainResult r;
        {
          py::gil_scoped_release release;
          r = train(corpus, cfg);
        }
        return py::make_tuple(model_to_json(r.model).dump(), history_to_json(r.history).dump());
      },
      py::arg("corpus_dir"), py::arg("config") = "{}");

  m.def(
      "match",
      [](const std::string& a, const std::string& s, const std::string& weights) {
        return match_result_to_json(match(parse_graph(a), parse_graph(s), model_from_json(json::parse(weights)))).dump();
      },
      py::arg("a_graph"), py::arg("s_graph"), py::arg("weights"));

  m.def(
      "evaluate",
      [](const std::string& corpus_dir, const std::string& weights, const std::string& split, double timeout_s) {
        const Corpus corpus = load_corpus(corpus_dir);
        const Model model = model_from_json(json::parse(weights));
        const Matcher matcher = [&](const Sample& s) { return match(s.agraph, s.sgraph, model); };
        const auto idx = corpus.indices(split_from_string(split));
        py::gil_scoped_release release;
        return eval_run_to_json(evaluate(matcher, corpus.samples, idx, timeout_s), "Ours").dump();
      },
      py::arg("corpus_dir"), py::arg("weights"), py::arg("split") = "test", py::arg("timeout_s") = 60.0);

  m.def(
      "sinkhorn",
      [](const Array& scores, double temperature, int max_iters, double tol) {
        SinkhornOptions o;
        o.temperature = temperature;
        o.max_iters = max_iters;
        o.tol = tol;
        return to_array(sinkhorn(to_matrix(scores), o).values);
      },
      py::arg("scores"), py::arg("temperature") = 1.0, py::arg("max_iters") = 100, py::arg("tol") = 1e-6);

  m.def(
      "hungarian",
      [](const Array& similarity) {
        std::vector<std::pair<NodeId, NodeId>> out;
        for (const auto& p : hungarian(to_matrix(similarity)).pairs) out.emplace_back(p.s_node, p.a_node);
        return out;
      },
      py::arg("similarity"));

  m.def(
      "score",
      [](const std::string& result, const std::vector<NodeId>& s_to_a, std::size_t n_a) {
        return report_to_json(score(match_result_from_json(json::parse(result)), GroundTruth{s_to_a}, n_a,
                                    s_to_a.size()))
            .dump();
      },
      py::arg("result"), py::arg("s_to_a"), py::arg("n_a"));
}
