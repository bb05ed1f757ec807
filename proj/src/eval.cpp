#include "sgm/eval.hpp"

#include <chrono>
#include <cstdio>
#include <set>

namespace sgm {

bool MetricsReport::accuracy_inflated() const {
  const auto total = tp + fp + fn + tn;
  return total > 0 && static_cast<double>(tn) / static_cast<double>(total) > 0.9;
}

void MetricsReport::recompute_ratios() {
  // Counts-based forms: with fp == fn these give bit-identical P, R and F1.
  precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  f1 = 2 * tp + fp + fn > 0 ? static_cast<double>(2 * tp) / static_cast<double>(2 * tp + fp + fn) : 0.0;
  const auto total = tp + fp + fn + tn;
  accuracy = total > 0 ? static_cast<double>(tp + tn) / static_cast<double>(total) : 0.0;
}

MetricsReport score(const MatchResult& pred, const GroundTruth& gt, std::size_t n_a, std::size_t n_s) {
  if (gt.size() != n_s) throw InputError("ground truth must cover all " + std::to_string(n_s) + " S-nodes");
  std::set<std::pair<NodeId, NodeId>> truth;
  for (std::size_t s = 0; s < n_s; ++s) {
    const NodeId a = gt.s_to_a[s];
    if (a < 0 || static_cast<std::size_t>(a) >= n_a) throw InputError("ground truth A-node out of range");
    truth.emplace(static_cast<NodeId>(s), a);
  }
  std::set<std::pair<NodeId, NodeId>> predicted;
  std::set<NodeId> used_s, used_a;
  for (const auto& p : pred.pairs) {
    if (p.s_node < 0 || static_cast<std::size_t>(p.s_node) >= n_s || p.a_node < 0 ||
        static_cast<std::size_t>(p.a_node) >= n_a) {
      throw InputError("predicted pair (" + std::to_string(p.s_node) + ", " + std::to_string(p.a_node) + ") out of range");
    }
    if (!used_s.insert(p.s_node).second || !used_a.insert(p.a_node).second) {
      throw InputError("prediction is not injective");
    }
    predicted.emplace(p.s_node, p.a_node);
  }
  MetricsReport r;
  for (const auto& p : predicted) (truth.contains(p) ? r.tp : r.fp) += 1;
  r.fn = truth.size() - r.tp;
  r.tn = static_cast<std::uint64_t>(n_a * n_s) - r.tp - r.fp - r.fn;
  r.mean_time_s = pred.elapsed_s;
  r.samples = 1;
  r.recompute_ratios();
  return r;
}

MetricsReport aggregate(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw InputError("cannot aggregate an empty report list");
  MetricsReport out;
  double time = 0.0;
  std::size_t samples = 0;
  for (const auto& r : reports) {
    out.tp += r.tp;
    out.fp += r.fp;
    out.fn += r.fn;
    out.tn += r.tn;
    time += r.mean_time_s * static_cast<double>(r.samples);
    samples += r.samples;
  }
  out.samples = samples;
  out.mean_time_s = samples > 0 ? time / static_cast<double>(samples) : 0.0;
  out.recompute_ratios();
  return out;
}

HarnessResult time_harness(const Matcher& matcher, const std::vector<Sample>& samples,
                           std::span<const std::size_t> indices, double timeout_s) {
  if (!(timeout_s > 0.0)) throw InputError("timeout must be positive");
  HarnessResult h;
  std::size_t done = 0;
  for (std::size_t idx : indices) {
    if (idx >= samples.size()) throw InputError("sample index " + std::to_string(idx) + " out of range");
    SampleOutcome o;
    o.index = idx;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      MatchResult r = matcher(samples[idx]);
      o.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      if (o.elapsed_s > timeout_s) {
        o.error = "timeout";
      } else {
        o.completed = true;
        o.result = std::move(r);
        ++done;
      }
    } catch (const std::exception& e) {
      o.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      o.error = e.what();
    }
    h.outcomes.push_back(std::move(o));
  }
  h.completed_fraction = indices.empty() ? 1.0 : static_cast<double>(done) / static_cast<double>(indices.size());
  return h;
}

EvalRun evaluate(const Matcher& matcher, const std::vector<Sample>& samples, std::span<const std::size_t> indices,
                 double timeout_s, bool record_timing) {
  EvalRun run;
  run.harness = time_harness(matcher, samples, indices, timeout_s);
  run.completed_fraction = run.harness.completed_fraction;
  for (const auto& o : run.harness.outcomes) {
    if (!o.completed) continue;
    const Sample& s = samples[o.index];
    MatchResult r = *o.result;
    r.elapsed_s = record_timing ? o.elapsed_s : 0.0;
    run.per_sample.push_back(score(r, s.gt, s.agraph.size(), s.sgraph.size()));
  }
  if (!run.per_sample.empty()) {
    run.aggregate = aggregate(run.per_sample);
    run.aggregate->completed_fraction = run.completed_fraction;
  }
  return run;
}

json report_to_json(const MetricsReport& r) {
  return {{"tp", r.tp},
          {"fp", r.fp},
          {"fn", r.fn},
          {"tn", r.tn},
          {"precision", r.precision},
          {"recall", r.recall},
          {"f1", r.f1},
          {"accuracy", r.accuracy},
          {"accuracy_inflated", r.accuracy_inflated()},
          {"mean_time_s", r.mean_time_s},
          {"completed_fraction", r.completed_fraction},
          {"samples", r.samples}};
}

json eval_run_to_json(const EvalRun& run, const std::string& method) {
  json per_sample = json::array();
  std::size_t k = 0;
  json incomplete = json::array();
  for (const auto& o : run.harness.outcomes) {
    if (o.completed) {
      json js = report_to_json(run.per_sample[k++]);
      js["index"] = o.index;
      per_sample.push_back(std::move(js));
    } else {
      incomplete.push_back({{"index", o.index}, {"error", o.error}});
    }
  }
  return {{"method", method},
          {"completed_fraction", run.completed_fraction},
          {"aggregate", run.aggregate ? report_to_json(*run.aggregate) : json(nullptr)},
          {"per_sample", std::move(per_sample)},
          {"incomplete", std::move(incomplete)}};
}

std::string format_table(const std::vector<std::pair<std::string, const EvalRun*>>& rows) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %8s %8s %8s %10s %11s\n", "Method", "Prec%", "Rec%", "F1%", "Time(s)",
                "Completed%");
  out += line;
  for (const auto& [name, run] : rows) {
    if (run->aggregate) {
      const auto& a = *run->aggregate;
      std::snprintf(line, sizeof line, "%-12s %8.1f %8.1f %8.1f %10.4f %10.1f%%\n", name.c_str(), 100.0 * a.precision,
                    100.0 * a.recall, 100.0 * a.f1, a.mean_time_s, 100.0 * run->completed_fraction);
    } else {
      std::snprintf(line, sizeof line, "%-12s %8s %8s %8s %10s %10.1f%%\n", name.c_str(), "-", "-", "-", "-",
                    100.0 * run->completed_fraction);
    }
    out += line;
  }
  return out;
}

}  // namespace sgm
