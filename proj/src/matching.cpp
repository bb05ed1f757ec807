#include "sgm/matching.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace sgm {

Matrix affinity(const Matrix& h_a, const Matrix& h_s) {
  if (h_a.cols() != h_s.cols()) {
    throw InputError("embedding widths differ: " + shape_str(h_a) + " vs " + shape_str(h_s));
  }
  if (h_s.rows() > h_a.rows()) {
    throw InputError("S-graph has " + std::to_string(h_s.rows()) + " nodes but A-graph only " +
                     std::to_string(h_a.rows()));
  }
  return matmul_nt(h_a, h_s);
}

Matrix instance_normalize(const Matrix& a, double eps) {
  if (a.empty()) return a;
  const double n = static_cast<double>(a.size());
  double mean = 0.0;
  for (double v : a.values()) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : a.values()) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  Matrix out(a.rows(), a.cols());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = (a[i] - mean) * inv;
  return out;
}

Matrix instance_normalize_backward(const Matrix& input, const Matrix& output, const Matrix& d_output, double eps) {
  if (!input.same_shape(output) || !input.same_shape(d_output)) throw InputError("instance norm backward shape mismatch");
  if (input.empty()) return input;
  const double n = static_cast<double>(input.size());
  double mean = 0.0;
  for (double v : input.values()) mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : input.values()) var += (v - mean) * (v - mean);
  var /= n;
  const double inv = 1.0 / std::sqrt(var + eps);
  double mean_dy = 0.0, mean_dy_y = 0.0;
  for (std::size_t i = 0; i < input.size(); ++i) {
    mean_dy += d_output[i];
    mean_dy_y += d_output[i] * output[i];
  }
  mean_dy /= n;
  mean_dy_y /= n;
  Matrix dx(input.rows(), input.cols());
  for (std::size_t i = 0; i < input.size(); ++i) dx[i] = inv * (d_output[i] - mean_dy - output[i] * mean_dy_y);
  return dx;
}

Matrix pad_dummy_columns(const Matrix& a) {
  if (a.cols() > a.rows()) throw InputError("cannot pad: more columns than rows (" + shape_str(a) + ")");
  Matrix out(a.rows(), a.rows(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) std::copy(a.row(i).begin(), a.row(i).end(), out.row(i).begin());
  return out;
}

Matrix SoftAssignment::real_block() const {
  Matrix out(values.rows(), n_real_cols);
  for (std::size_t i = 0; i < values.rows(); ++i)
    std::copy_n(values.row(i).begin(), n_real_cols, out.row(i).begin());
  return out;
}

namespace {

void normalize_rows(Matrix& l) {
  for (std::size_t i = 0; i < l.rows(); ++i) {
    auto r = l.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double s = 0.0;
    for (double v : r) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (double& v : r) v -= lse;
  }
}

void normalize_cols(Matrix& l) {
  const std::size_t n = l.rows(), m = l.cols();
  std::vector<double> mx(m, -std::numeric_limits<double>::infinity()), s(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) mx[j] = std::max(mx[j], l(i, j));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) s[j] += std::exp(l(i, j) - mx[j]);
  for (std::size_t j = 0; j < m; ++j) s[j] = mx[j] + std::log(s[j]);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) l(i, j) -= s[j];
}

double marginal_error(const Matrix& p) {
  double worst = 0.0;
  std::vector<double> col(p.cols(), 0.0);
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double r = 0.0;
    for (std::size_t j = 0; j < p.cols(); ++j) {
      r += p(i, j);
      col[j] += p(i, j);
    }
    worst = std::max(worst, std::abs(r - 1.0));
  }
  for (double c : col) worst = std::max(worst, std::abs(c - 1.0));
  return worst;
}

Matrix exp_of(const Matrix& l) {
  Matrix p(l.rows(), l.cols());
  for (std::size_t i = 0; i < l.size(); ++i) p[i] = std::exp(l[i]);
  return p;
}

}  // namespace

SoftAssignment sinkhorn(const Matrix& scores, const SinkhornOptions& opts, SinkhornTrace* trace) {
  if (scores.rows() != scores.cols()) throw InputError("sinkhorn needs a square matrix, got " + shape_str(scores));
  if (!scores.all_finite()) throw InputError("sinkhorn input contains non-finite values");
  if (!(opts.temperature > 0.0)) throw InputError("sinkhorn temperature must be positive");
  if (opts.max_iters < 1) throw InputError("sinkhorn needs at least one iteration");

  Matrix l = scores;
  l *= 1.0 / opts.temperature;
  if (trace) {
    trace->logs.clear();
    trace->temperature = opts.temperature;
    trace->fixed_iterations = opts.fixed_iterations;
    trace->logs.push_back(l);
  }
  SoftAssignment out;
  out.n_real_cols = scores.cols();
  for (int it = 1; it <= opts.max_iters; ++it) {
    normalize_rows(l);
    if (trace) trace->logs.push_back(l);
    normalize_cols(l);
    if (trace) trace->logs.push_back(l);
    out.iterations = it;
    if (!opts.fixed_iterations) {
      out.values = exp_of(l);
      if (marginal_error(out.values) < opts.tol) {
        out.converged = true;
        return out;
      }
    }
  }
  out.values = exp_of(l);
  out.converged = marginal_error(out.values) < opts.tol;
  return out;
}

Matrix sinkhorn_backward(const SinkhornTrace& trace, const Matrix& d_output) {
  if (!trace.fixed_iterations) {
    throw InputError("sinkhorn_backward needs a fixed-iteration forward pass, not an early-exit one");
  }
  if (trace.logs.size() < 3 || trace.logs.size() % 2 == 0) throw InputError("sinkhorn trace is incomplete");
  const Matrix& last = trace.logs.back();
  if (!d_output.same_shape(last)) throw InputError("sinkhorn upstream gradient has the wrong shape");

  const std::size_t n = last.rows(), m = last.cols();
  Matrix d(n, m);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = d_output[i] * std::exp(last[i]);

  // y = x - lse(x) along an axis  =>  dx = dy - softmax(x) * sum(dy) along that axis,
  // and softmax(x) = exp(y).
  for (std::size_t step = trace.logs.size() - 1; step >= 1; --step) {
    const Matrix& y = trace.logs[step];
    const bool column_step = step % 2 == 0;
    if (column_step) {
      std::vector<double> s(m, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) s[j] += d(i, j);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) d(i, j) -= std::exp(y(i, j)) * s[j];
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < m; ++j) s += d(i, j);
        for (std::size_t j = 0; j < m; ++j) d(i, j) -= std::exp(y(i, j)) * s;
      }
    }
  }
  d *= 1.0 / trace.temperature;
  return d;
}

double MatchResult::total_score() const {
  double t = 0.0;
  for (const auto& p : pairs) t += p.score;
  return t;
}

namespace {

/// Kuhn augmenting-path search from `row` over tight edges.
bool try_row(int row, const std::vector<std::vector<int>>& adj, const std::vector<char>& blocked,
             std::vector<int>& col_owner, std::vector<char>& seen) {
  for (int c : adj[row]) {
    if (blocked[c] || seen[c]) continue;
    seen[c] = 1;
    if (col_owner[c] < 0 || try_row(col_owner[c], adj, blocked, col_owner, seen)) {
      col_owner[c] = row;
      return true;
    }
  }
  return false;
}

/// True when rows [first_row, n) can all be matched into unblocked columns
/// and, separately, every unblocked required column can be matched by those
/// rows. Together these imply a single matching doing both.
bool completion_exists(int first_row, int n, int m, const std::vector<std::vector<int>>& row_adj,
                       const std::vector<std::vector<int>>& col_adj, const std::vector<char>& blocked,
                       const std::vector<char>& required) {
  std::vector<int> owner(m, -1);
  for (int r = first_row; r < n; ++r) {
    std::vector<char> seen(m, 0);
    if (!try_row(r, row_adj, blocked, owner, seen)) return false;
  }
  // Required columns: match from the column side, rows restricted to [first_row, n).
  std::vector<char> row_blocked(n, 0);
  for (int r = 0; r < first_row; ++r) row_blocked[r] = 1;
  std::vector<int> row_owner(n, -1);
  for (int c = 0; c < m; ++c) {
    if (!required[c] || blocked[c]) continue;
    std::vector<char> seen(n, 0);
    if (!try_row(c, col_adj, row_blocked, row_owner, seen)) return false;
  }
  return true;
}

}  // namespace

MatchResult hungarian(const Matrix& similarity) {
  const int m = static_cast<int>(similarity.rows());  // A-nodes
  const int n = static_cast<int>(similarity.cols());  // S-nodes
  if (n > m) throw InputError("hungarian needs N2 <= N1, got " + shape_str(similarity));
  if (!similarity.all_finite()) throw InputError("hungarian input contains non-finite values");
  MatchResult result;
  if (n == 0) return result;

  // Min-cost rectangular assignment of S rows to A columns (1-based potentials).
  auto cost = [&](int i, int j) { return -similarity(j - 1, i - 1); };
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<int> p(m + 1, 0), way(m + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(m + 1, inf);
    std::vector<char> used(m + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0, j) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  // Optimal assignments are exactly the matchings on tight edges that cover
  // every row and every column with a negative potential. Pick the
  // lexicographically smallest one greedily.
  double scale = 1.0;
  for (double x : similarity.values()) scale = std::max(scale, std::abs(x));
  const double tight_eps = 1e-9 * scale;
  std::vector<std::vector<int>> row_adj(n), col_adj(m);
  for (int i = 1; i <= n; ++i) {
    for (int j = 1; j <= m; ++j) {
      if (cost(i, j) - u[i] - v[j] <= tight_eps) {
        row_adj[i - 1].push_back(j - 1);
        col_adj[j - 1].push_back(i - 1);
      }
    }
  }
  std::vector<char> required(m, 0);
  for (int j = 1; j <= m; ++j) required[j - 1] = v[j] < -tight_eps ? 1 : 0;

  std::vector<int> choice(n, -1);
  std::vector<char> blocked(m, 0);
  for (int s = 0; s < n; ++s) {
    for (int a : row_adj[s]) {
      if (blocked[a]) continue;
      blocked[a] = 1;
      if (completion_exists(s + 1, n, m, row_adj, col_adj, blocked, required)) {
        choice[s] = a;
        break;
      }
      blocked[a] = 0;
    }
    if (choice[s] < 0) {
      // Numerical corner: fall back to the solver's own assignment.
      std::vector<int> s_to_a(n, -1);
      for (int j = 1; j <= m; ++j)
        if (p[j] != 0) s_to_a[p[j] - 1] = j - 1;
      choice = s_to_a;
      break;
    }
  }

  result.pairs.reserve(n);
  for (int s = 0; s < n; ++s) result.pairs.push_back({s, choice[s], similarity(choice[s], s)});
  return result;
}

SceneGraph prepare_graph(const SceneGraph& raw, const FeatureStats& stats, const AugmentConfig& augment) {
  const bool only_containment = std::all_of(raw.edges.begin(), raw.edges.end(),
                                            [](const Edge& e) { return e.type == EdgeType::RoomToWS; });
  SceneGraph g = only_containment ? augment_edges(raw, augment) : raw;
  return standardize_features(std::move(g), stats);
}

MatchResult match(const SceneGraph& agraph, const SceneGraph& sgraph, const EncoderParams& params,
                  const MatchOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  if (params.mode != Mode::Eval) throw InputError("match requires Eval-mode parameters");
  if (sgraph.size() > agraph.size()) {
    throw InputError("S-graph has " + std::to_string(sgraph.size()) + " nodes but A-graph only " +
                     std::to_string(agraph.size()));
  }
  SinkhornOptions sk = opts.sinkhorn;
  sk.fixed_iterations = false;
  const Matrix ha = encoder_forward(agraph, params);
  const Matrix hs = encoder_forward(sgraph, params);
  const Matrix scores = pad_dummy_columns(instance_normalize(affinity(ha, hs), opts.norm_eps));
  SoftAssignment soft = sinkhorn(scores, sk);
  soft.n_real_cols = sgraph.size();
  MatchResult r = hungarian(soft.real_block());
  r.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

MatchResult match(const SceneGraph& agraph_raw, const SceneGraph& sgraph_raw, const Model& model,
                  const MatchOptions& opts) {
  const auto start = std::chrono::steady_clock::now();
  if (sgraph_raw.size() > agraph_raw.size()) {
    throw InputError("S-graph has " + std::to_string(sgraph_raw.size()) + " nodes but A-graph only " +
                     std::to_string(agraph_raw.size()));
  }
  const SceneGraph a = prepare_graph(agraph_raw, model.stats, model.augment);
  const SceneGraph s = prepare_graph(sgraph_raw, model.stats, model.augment);
  MatchResult r = match(a, s, model.params, opts);
  r.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

json match_result_to_json(const MatchResult& r) {
  json pairs = json::array();
  for (const auto& p : r.pairs) pairs.push_back({p.s_node, p.a_node, p.score});
  return {{"pairs", std::move(pairs)}, {"elapsed_s", r.elapsed_s}};
}

MatchResult match_result_from_json(const json& j) {
  try {
    MatchResult r;
    for (const auto& p : j.at("pairs")) r.pairs.push_back({p.at(0).get<NodeId>(), p.at(1).get<NodeId>(), p.at(2).get<double>()});
    r.elapsed_s = j.at("elapsed_s").get<double>();
    return r;
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed match result: ") + e.what());
  }
}

json model_to_json(const Model& model) {
  json j = weights_to_json(model.params, model.stats);
  j["augment"] = {{"adjacency_dist_tol", model.augment.adjacency_dist_tol},
                  {"adjacency_angle_tol", model.augment.adjacency_angle_tol}};
  return j;
}

Model model_from_json(const json& j) {
  Model m;
  std::tie(m.params, m.stats) = weights_from_json(j);
  m.params.mode = Mode::Eval;
  if (j.contains("augment")) {
    m.augment.adjacency_dist_tol = j["augment"].value("adjacency_dist_tol", m.augment.adjacency_dist_tol);
    m.augment.adjacency_angle_tol = j["augment"].value("adjacency_angle_tol", m.augment.adjacency_angle_tol);
  }
  return m;
}

}  // namespace sgm
