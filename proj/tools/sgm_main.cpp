// sgm: generate synthetic corpora, train the matcher, match graph pairs and
// evaluate on a held-out split.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "sgm/datagen.hpp"
#include "sgm/eval.hpp"
#include "sgm/io.hpp"
#include "sgm/matching.hpp"
#include "sgm/training.hpp"
#include "sgm/version.hpp"

namespace fs = std::filesystem;
using namespace sgm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitBadInput = 2;
constexpr int kExitRuntime = 3;

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

struct CommonOptions {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string config;
  std::optional<double> timeout_s;
  bool quiet = false;
  bool json_output = false;
  int jobs = 1;
};

json load_config(const CommonOptions& c) { return c.config.empty() ? json::object() : read_json_file(c.config); }

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw InputError("cannot create output directory " + dir.string());
}

class RunManifest {
 public:
  RunManifest(std::string subcommand, const std::vector<std::string>& argv)
      : doc_({{"tool", "sgm"}, {"tool_version", kVersion}, {"subcommand", std::move(subcommand)},
              {"argv", argv}, {"start_time", utc_now()}}) {}

  json& operator[](const char* key) { return doc_[key]; }

  void write(const fs::path& path) {
    doc_["end_time"] = utc_now();
    write_json_file(path, doc_);
  }

 private:
  json doc_;
};

// ---------------------------------------------------------------- generate

struct GenerateArgs {
  std::optional<std::size_t> count;
  std::optional<int> rooms_min, rooms_max;
  std::optional<double> size_min, size_max;
  std::optional<double> p_drop_room, p_drop_ws, sigma_centroid, sigma_angle, sigma_length;
};

int cmd_generate(const CommonOptions& common, const GenerateArgs& a, const std::vector<std::string>& argv) {
  RunManifest manifest("generate", argv);
  const json cfg = load_config(common);
  GenParams gen = gen_params_from_json(cfg.value("gen", json::object()));
  NoiseParams noise = noise_params_from_json(cfg.value("noise", json::object()));
  std::size_t count = cfg.value("count", std::size_t{10});
  std::uint64_t seed = cfg.value("seed", std::uint64_t{0});
  if (a.rooms_min) gen.rooms_min = *a.rooms_min;
  if (a.rooms_max) gen.rooms_max = *a.rooms_max;
  if (a.size_min) gen.room_size_min = *a.size_min;
  if (a.size_max) gen.room_size_max = *a.size_max;
  if (a.p_drop_room) noise.p_drop_room = *a.p_drop_room;
  if (a.p_drop_ws) noise.p_drop_ws = *a.p_drop_ws;
  if (a.sigma_centroid) noise.sigma_centroid = *a.sigma_centroid;
  if (a.sigma_angle) noise.sigma_normal_angle = *a.sigma_angle;
  if (a.sigma_length) noise.sigma_length = *a.sigma_length;
  if (common.seed) seed = *common.seed;
  if (a.count) count = *a.count;

  const fs::path out = common.out;
  ensure_dir(out);
  if (count == 0) std::cerr << "warning: count is 0, writing an empty corpus\n";
  const Corpus corpus = generate_corpus(gen, noise, count, seed);
  write_corpus(out, corpus);

  manifest["config"] = {{"gen", gen_params_to_json(gen)}, {"noise", noise_params_to_json(noise)}, {"count", count}};
  manifest["seeds"] = {{"seed", seed}};
  manifest["inputs"] = json::array();
  manifest["outputs"] = {(out / "manifest.json").string()};
  manifest.write(out / "run_manifest.json");
  if (!common.quiet) {
    const auto n_train = corpus.indices(Split::Train).size();
    const auto n_val = corpus.indices(Split::Val).size();
    const auto n_test = corpus.indices(Split::Test).size();
    std::cout << "wrote " << count << " samples to " << out.string() << " (train " << n_train << ", val " << n_val
              << ", test " << n_test << ")\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  std::string corpus;
  std::string init_weights;
  std::optional<int> epochs, patience;
  std::optional<double> lr, weight_decay;
  std::optional<std::size_t> batch_size;
  bool no_timing = false;
};

int cmd_train(const CommonOptions& common, const TrainArgs& a, const std::vector<std::string>& argv) {
  RunManifest manifest("train", argv);
  TrainConfig cfg = train_config_from_json(load_config(common));
  if (a.epochs) cfg.max_epochs = *a.epochs;
  if (a.patience) cfg.patience = *a.patience;
  if (a.lr) cfg.optimizer.learning_rate = *a.lr;
  if (a.weight_decay) cfg.optimizer.weight_decay = *a.weight_decay;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (common.seed) cfg.seed = *common.seed;
  cfg.jobs = common.jobs;
  cfg.record_timing = !a.no_timing;
  if (!common.quiet) {
    cfg.on_epoch = [](int epoch, double tl, double vl) {
      std::cerr << "epoch " << epoch << "  train " << tl << "  val " << vl << "\n";
    };
  }

  const Corpus corpus = load_corpus(a.corpus);
  if (corpus.indices(Split::Train).empty() || corpus.indices(Split::Val).empty()) {
    throw InputError("corpus " + a.corpus + " has no train or no val split; generate more samples");
  }
  std::optional<EncoderParams> init;
  if (!a.init_weights.empty()) {
    Model m = model_from_json(read_json_file(a.init_weights));
    if (m.params.arch != cfg.arch) throw InputError("initial weights architecture does not match");
    init = std::move(m.params);
  }

  const fs::path out = common.out;
  ensure_dir(out);
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult result = train(corpus, cfg, init ? &*init : nullptr);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  write_json_file(out / "weights.json", model_to_json(result.model), -1);
  write_json_file(out / "history.json", history_to_json(result.history));
  manifest["config"] = train_config_to_json(cfg);
  manifest["seeds"] = {{"seed", cfg.seed}};
  manifest["inputs"] = {a.corpus};
  if (!a.init_weights.empty()) manifest["inputs"].push_back(a.init_weights);
  manifest["outputs"] = {(out / "weights.json").string(), (out / "history.json").string()};
  manifest["wall_s"] = a.no_timing ? 0.0 : wall;
  manifest.write(out / "run_manifest.json");

  std::cout << "best validation loss " << result.history.best_val_loss << " at epoch " << result.history.best_epoch
            << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------- match

struct MatchArgs {
  std::string agraph, sgraph, weights, manifest;
};

int cmd_match(const CommonOptions& common, const MatchArgs& a, const std::vector<std::string>& argv) {
  RunManifest manifest("match", argv);
  const SceneGraph ag = graph_from_json(read_json_file(a.agraph));
  const SceneGraph sg = graph_from_json(read_json_file(a.sgraph));
  const Model model = model_from_json(read_json_file(a.weights));
  if (sg.size() > ag.size()) {
    throw InputError("S-graph has " + std::to_string(sg.size()) + " nodes, more than the A-graph's " +
                     std::to_string(ag.size()));
  }
  const MatchResult r = match(ag, sg, model);
  const json out = match_result_to_json(r);
  if (common.out.empty()) {
    std::cout << out.dump(2) << "\n";
  } else {
    write_json_file(common.out, out);
  }
  std::string manifest_path = a.manifest;
  if (manifest_path.empty() && !common.out.empty()) manifest_path = common.out + ".manifest.json";
  if (!manifest_path.empty()) {
    manifest["config"] = json::object();
    manifest["seeds"] = json::object();
    manifest["inputs"] = {a.agraph, a.sgraph, a.weights};
    manifest["outputs"] = common.out.empty() ? json::array() : json{common.out};
    manifest.write(manifest_path);
  }
  return kExitOk;
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  std::string corpus, weights, split = "test";
  bool no_timing = false;
};

int cmd_eval(const CommonOptions& common, const EvalArgs& a, const std::vector<std::string>& argv) {
  RunManifest manifest("eval", argv);
  const json cfg = load_config(common);
  const double timeout = common.timeout_s.value_or(cfg.value("timeout_s", 60.0));
  const Corpus corpus = load_corpus(a.corpus);
  const Model model = model_from_json(read_json_file(a.weights));
  const auto idx = corpus.indices(split_from_string(a.split));
  if (idx.empty()) throw InputError("corpus " + a.corpus + " has no '" + a.split + "' samples");

  const Matcher matcher = [&model](const Sample& s) { return match(s.agraph, s.sgraph, model); };
  const EvalRun run = evaluate(matcher, corpus.samples, idx, timeout, !a.no_timing);
  const json report = eval_run_to_json(run, "Ours");
  const std::string table = format_table({{"Ours", &run}});

  if (common.json_output) {
    std::cout << report.dump(2) << "\n";
  } else {
    std::cout << table;
  }
  if (!common.out.empty()) {
    const fs::path out = common.out;
    ensure_dir(out);
    write_json_file(out / "report.json", report);
    write_text_file(out / "report.txt", table);
    manifest["config"] = {{"timeout_s", timeout}, {"split", a.split}};
    manifest["seeds"] = json::object();
    manifest["inputs"] = {a.corpus, a.weights};
    manifest["outputs"] = {(out / "report.json").string(), (out / "report.txt").string()};
    manifest.write(out / "run_manifest.json");
  }
  if (run.completed_fraction == 0.0) {
    std::cerr << "no sample completed within the timeout\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Hierarchical scene-graph matcher"};
  app.set_version_flag("--version", kVersion);
  app.require_subcommand(1);
  const std::vector<std::string> args(argv, argv + argc);

  CommonOptions common;
  auto add_common = [&common](CLI::App* sub) {
    sub->add_option("--seed", common.seed, "Seed for every random draw");
    sub->add_option("--config", common.config, "JSON file overriding defaults (flags win)");
    sub->add_flag("--quiet", common.quiet, "Suppress progress output");
    sub->add_option("--jobs", common.jobs, "Worker threads")->check(CLI::PositiveNumber);
  };

  GenerateArgs gen_args;
  auto* gen = app.add_subcommand("generate", "Generate a synthetic corpus");
  add_common(gen);
  gen->add_option("--out", common.out, "Output directory")->required();
  gen->add_option("--count", gen_args.count, "Number of samples (default 10)");
  gen->add_option("--rooms-min", gen_args.rooms_min);
  gen->add_option("--rooms-max", gen_args.rooms_max);
  gen->add_option("--size-min", gen_args.size_min, "Minimum room side (m)");
  gen->add_option("--size-max", gen_args.size_max, "Maximum room side (m)");
  gen->add_option("--p-drop-room", gen_args.p_drop_room);
  gen->add_option("--p-drop-ws", gen_args.p_drop_ws);
  gen->add_option("--sigma-centroid", gen_args.sigma_centroid, "Centroid noise std (m)");
  gen->add_option("--sigma-angle", gen_args.sigma_angle, "Normal rotation noise std (rad)");
  gen->add_option("--sigma-length", gen_args.sigma_length, "Wall length noise std (m)");

  TrainArgs train_args;
  auto* tr = app.add_subcommand("train", "Train the encoder on a corpus");
  add_common(tr);
  tr->add_option("--corpus", train_args.corpus, "Corpus directory")->required();
  tr->add_option("--out", common.out, "Output directory for weights and history")->required();
  tr->add_option("--epochs", train_args.epochs, "Maximum epochs");
  tr->add_option("--patience", train_args.patience, "Early-stopping patience");
  tr->add_option("--lr", train_args.lr);
  tr->add_option("--weight-decay", train_args.weight_decay);
  tr->add_option("--batch-size", train_args.batch_size);
  tr->add_option("--init-weights", train_args.init_weights, "Resume from a weights file");
  tr->add_flag("--no-timing", train_args.no_timing, "Write zero wall times so outputs are byte-reproducible");

  MatchArgs match_args;
  auto* mt = app.add_subcommand("match", "Match an S-graph against an A-graph");
  add_common(mt);
  mt->add_option("--a", match_args.agraph, "A-graph JSON")->required();
  mt->add_option("--s", match_args.sgraph, "S-graph JSON")->required();
  mt->add_option("--weights", match_args.weights, "Weights file")->required();
  mt->add_option("--out", common.out, "Write the result here instead of stdout");
  mt->add_option("--manifest", match_args.manifest, "Run manifest path");

  EvalArgs eval_args;
  auto* ev = app.add_subcommand("eval", "Evaluate on a corpus split");
  add_common(ev);
  ev->add_option("--corpus", eval_args.corpus, "Corpus directory")->required();
  ev->add_option("--weights", eval_args.weights, "Weights file")->required();
  ev->add_option("--timeout-s", common.timeout_s, "Per-sample timeout (s)");
  ev->add_option("--split", eval_args.split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_option("--out", common.out, "Directory for report.json / report.txt");
  ev->add_flag("--json", common.json_output, "Print JSON instead of the table");
  ev->add_flag("--no-timing", eval_args.no_timing, "Report zero times so outputs are byte-reproducible");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitBadInput;
  }

  try {
    if (*gen) return cmd_generate(common, gen_args, args);
    if (*tr) return cmd_train(common, train_args, args);
    if (*mt) return cmd_match(common, match_args, args);
    if (*ev) return cmd_eval(common, eval_args, args);
  } catch (const InputError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitBadInput;
}
