#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "sgm/datagen.hpp"
#include "sgm/matching.hpp"

namespace sgm {

struct MetricsReport {
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 0.0, recall = 0.0, f1 = 0.0, accuracy = 0.0;
  double mean_time_s = 0.0;
  double completed_fraction = 1.0;
  std::size_t samples = 0;

  /// True negatives exceed 90% of all candidate pairs.
  bool accuracy_inflated() const;
  void recompute_ratios();
};

/// Pair classification over all N1 x N2 candidate (A, S) pairs.
MetricsReport score(const MatchResult& pred, const GroundTruth& gt, std::size_t n_a, std::size_t n_s);

/// Micro-average: counts are summed, ratios recomputed, times averaged.
MetricsReport aggregate(std::span<const MetricsReport> reports);

using Matcher = std::function<MatchResult(const Sample&)>;

struct SampleOutcome {
  std::size_t index = 0;
  bool completed = false;
  double elapsed_s = 0.0;
  std::string error;
  std::optional<MatchResult> result;
};

struct HarnessResult {
  std::vector<SampleOutcome> outcomes;
  double completed_fraction = 0.0;
};

/// Runs `matcher` on each listed sample with wall-clock timing. Samples that
/// throw or exceed `timeout_s` are marked incomplete; the run continues.
HarnessResult time_harness(const Matcher& matcher, const std::vector<Sample>& samples,
                           std::span<const std::size_t> indices, double timeout_s);

struct EvalRun {
  HarnessResult harness;
  std::vector<MetricsReport> per_sample;  // completed samples only
  std::optional<MetricsReport> aggregate;  // absent when nothing completed
  double completed_fraction = 0.0;
};

EvalRun evaluate(const Matcher& matcher, const std::vector<Sample>& samples, std::span<const std::size_t> indices,
                 double timeout_s, bool record_timing = true);

json report_to_json(const MetricsReport& r);
json eval_run_to_json(const EvalRun& run, const std::string& method);
/// Columns: Method, Prec%, Rec%, F1%, Time(s), Completed%.
std::string format_table(const std::vector<std::pair<std::string, const EvalRun*>>& rows);

}  // namespace sgm
