#include "sgm/nn.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace sgm {

namespace {

Matrix xavier(std::size_t rows, std::size_t cols, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (auto& v : m.values()) v = uniform(rng, -bound, bound);
  return m;
}

GatLayerParams init_layer(std::size_t in, std::size_t head_dim, std::size_t heads, HeadMode mode, bool relu,
                          double attn_p, double node_p, Rng& rng) {
  GatLayerParams layer;
  layer.head_mode = mode;
  layer.relu = relu;
  layer.attn_dropout_p = attn_p;
  layer.node_dropout_p = node_p;
  for (std::size_t k = 0; k < heads; ++k) {
    GatHead h;
    h.wa = xavier(head_dim, 2 * in, rng);
    h.att = xavier(head_dim, 1, rng);
    h.wh = xavier(head_dim, in, rng);
    layer.heads.push_back(std::move(h));
  }
  return layer;
}

/// Entries are 0 or 1/(1-p). Empty when no dropout applies.
Matrix draw_mask(std::size_t rows, std::size_t cols, double p, Mode mode, Rng* rng) {
  if (mode == Mode::Eval || p <= 0.0) return {};
  if (!rng) throw InputError("Train-mode dropout needs a random generator");
  Matrix m(rows, cols);
  const double keep_scale = 1.0 / (1.0 - p);
  for (auto& v : m.values()) v = uniform01(*rng) < p ? 0.0 : keep_scale;
  return m;
}

void add_bias(Matrix& z, const Matrix& b) {
  for (std::size_t i = 0; i < z.rows(); ++i) {
    auto r = z.row(i);
    for (std::size_t j = 0; j < z.cols(); ++j) r[j] += b[j];
  }
}

void add_column_sums(const Matrix& d, Matrix& b) {
  for (std::size_t i = 0; i < d.rows(); ++i) {
    auto r = d.row(i);
    for (std::size_t j = 0; j < d.cols(); ++j) b[j] += r[j];
  }
}

inline double leaky(double x) { return x >= 0.0 ? x : kLeakySlope * x; }
inline double leaky_grad(double x) { return x >= 0.0 ? 1.0 : kLeakySlope; }

void check_head_shapes(const Matrix& h, const GatHead& head) {
  if (head.wh.cols() != h.cols() || head.wa.cols() != 2 * h.cols() || head.wa.rows() != head.wh.rows() ||
      head.att.rows() != head.wa.rows() || head.att.cols() != 1) {
    throw InputError("GATv2 head shapes do not match input of width " + std::to_string(h.cols()));
  }
}

}  // namespace

EncoderParams init_encoder(const Architecture& arch, std::uint64_t seed) {
  Rng rng(seed);
  EncoderParams p;
  p.arch = arch;
  p.rng_seed = seed;
  p.mlp.w1 = xavier(arch.mlp_hidden, arch.input_dim, rng);
  p.mlp.b1 = Matrix(arch.mlp_hidden, 1);
  p.mlp.w2 = xavier(arch.mlp_out, arch.mlp_hidden, rng);
  p.mlp.b2 = Matrix(arch.mlp_out, 1);
  p.mlp.dropout_p = arch.mlp_dropout;
  p.layers[0] = init_layer(arch.mlp_out, arch.hidden_head_dim, arch.heads, HeadMode::Concat, true, arch.attn_dropout,
                           arch.node_dropout, rng);
  p.layers[1] = init_layer(arch.hidden_dim(), arch.output_dim, arch.heads, HeadMode::Average, false,
                           arch.attn_dropout, 0.0, rng);
  return p;
}

EncoderParams zeros_like(const EncoderParams& params) {
  EncoderParams z = params;
  for (auto& [name, t] : named_tensors(z)) t->fill(0.0);
  return z;
}

std::vector<NamedTensor> named_tensors(EncoderParams& p) {
  std::vector<NamedTensor> out{{"mlp.w1", &p.mlp.w1}, {"mlp.b1", &p.mlp.b1}, {"mlp.w2", &p.mlp.w2}, {"mlp.b2", &p.mlp.b2}};
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    for (std::size_t k = 0; k < p.layers[l].heads.size(); ++k) {
      const std::string prefix = "gat" + std::to_string(l) + ".head" + std::to_string(k) + ".";
      auto& h = p.layers[l].heads[k];
      out.emplace_back(prefix + "wa", &h.wa);
      out.emplace_back(prefix + "att", &h.att);
      out.emplace_back(prefix + "wh", &h.wh);
    }
  }
  return out;
}

std::vector<ConstNamedTensor> named_tensors(const EncoderParams& p) {
  auto mutable_list = named_tensors(const_cast<EncoderParams&>(p));
  std::vector<ConstNamedTensor> out;
  out.reserve(mutable_list.size());
  for (auto& [n, t] : mutable_list) out.emplace_back(n, t);
  return out;
}

std::size_t parameter_count(const EncoderParams& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : named_tensors(params)) n += t->size();
  return n;
}

void accumulate(EncoderParams& into, const EncoderParams& grads, double scale) {
  auto dst = named_tensors(into);
  auto src = named_tensors(grads);
  if (dst.size() != src.size()) throw InputError("parameter structures differ");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    Matrix& d = *dst[i].second;
    const Matrix& s = *src[i].second;
    if (!d.same_shape(s)) throw InputError("shape mismatch for " + dst[i].first);
    for (std::size_t k = 0; k < d.size(); ++k) d[k] += scale * s[k];
  }
}

EncoderGraph EncoderGraph::from_edges(std::size_t n, const std::vector<std::pair<int, int>>& edges,
                                      bool add_self_loops) {
  EncoderGraph g;
  g.num_nodes = n;
  g.incoming.resize(n);
  auto push = [&](int s, int d) {
    if (s < 0 || d < 0 || static_cast<std::size_t>(s) >= n || static_cast<std::size_t>(d) >= n) {
      throw InputError("encoder edge endpoint out of range");
    }
    g.incoming[d].push_back(static_cast<int>(g.src.size()));
    g.src.push_back(s);
    g.dst.push_back(d);
  };
  if (add_self_loops)
    for (std::size_t i = 0; i < n; ++i) push(static_cast<int>(i), static_cast<int>(i));
  for (auto [s, d] : edges) push(s, d);
  return g;
}

EncoderGraph EncoderGraph::from_scene(const SceneGraph& graph) {
  std::vector<std::pair<int, int>> edges;
  edges.reserve(graph.edges.size());
  for (const auto& e : graph.edges) edges.emplace_back(e.src, e.dst);
  return from_edges(graph.size(), edges, true);
}

Matrix mlp_forward(const Matrix& x, const MlpParams& p, Mode mode, Rng* rng, MlpCache* cache) {
  if (!x.all_finite()) throw InputError("MLP input contains non-finite values");
  if (x.cols() != p.w1.cols()) throw InputError("MLP input width " + std::to_string(x.cols()) + " != " + std::to_string(p.w1.cols()));
  Matrix z1 = matmul_nt(x, p.w1);
  add_bias(z1, p.b1);
  Matrix a1 = z1;
  for (auto& v : a1.values()) v = std::max(v, 0.0);
  Matrix mask1 = draw_mask(a1.rows(), a1.cols(), p.dropout_p, mode, rng);
  if (!mask1.empty())
    for (std::size_t i = 0; i < a1.size(); ++i) a1[i] *= mask1[i];

  Matrix z2 = matmul_nt(a1, p.w2);
  add_bias(z2, p.b2);
  Matrix out = z2;
  for (auto& v : out.values()) v = std::max(v, 0.0);
  Matrix mask2 = draw_mask(out.rows(), out.cols(), p.dropout_p, mode, rng);
  if (!mask2.empty())
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask2[i];

  if (cache) {
    cache->x = x;
    cache->z1 = std::move(z1);
    cache->a1 = std::move(a1);
    cache->z2 = std::move(z2);
    cache->mask1 = std::move(mask1);
    cache->mask2 = std::move(mask2);
  }
  return out;
}

void mlp_backward(const MlpCache& c, const MlpParams& p, const Matrix& d_out, MlpParams& g) {
  Matrix dz2 = d_out;
  for (std::size_t i = 0; i < dz2.size(); ++i) {
    if (!c.mask2.empty()) dz2[i] *= c.mask2[i];
    if (c.z2[i] <= 0.0) dz2[i] = 0.0;
  }
  matmul_tn_acc(dz2, c.a1, g.w2);
  add_column_sums(dz2, g.b2);
  Matrix dz1 = matmul(dz2, p.w2);
  for (std::size_t i = 0; i < dz1.size(); ++i) {
    if (!c.mask1.empty()) dz1[i] *= c.mask1[i];
    if (c.z1[i] <= 0.0) dz1[i] = 0.0;
  }
  matmul_tn_acc(dz1, c.x, g.w1);
  add_column_sums(dz1, g.b1);
}

std::vector<double> gatv2_scores(const Matrix& h, const EncoderGraph& graph, const GatHead& head,
                                 Matrix* pre_activation) {
  check_head_shapes(h, head);
  const std::size_t n = h.rows();
  const std::size_t in = h.cols();
  const std::size_t dh = head.wa.rows();
  if (n != graph.num_nodes) throw InputError("feature rows do not match graph size");

  // Wa [h_u || h_v] = Wa_src h_u + Wa_dst h_v; project every node once.
  Matrix proj_src(n, dh), proj_dst(n, dh);
  for (std::size_t i = 0; i < n; ++i) {
    auto hi = h.row(i);
    for (std::size_t c = 0; c < dh; ++c) {
      auto w = head.wa.row(c);
      double s = 0.0, d = 0.0;
      for (std::size_t k = 0; k < in; ++k) {
        s += w[k] * hi[k];
        d += w[in + k] * hi[k];
      }
      proj_src(i, c) = s;
      proj_dst(i, c) = d;
    }
  }
  const std::size_t e_count = graph.num_edges();
  std::vector<double> logits(e_count);
  Matrix pre(e_count, dh);
  for (std::size_t e = 0; e < e_count; ++e) {
    auto ps = proj_src.row(graph.src[e]);
    auto pd = proj_dst.row(graph.dst[e]);
    auto pe = pre.row(e);
    double logit = 0.0;
    for (std::size_t c = 0; c < dh; ++c) {
      pe[c] = ps[c] + pd[c];
      logit += head.att[c] * leaky(pe[c]);
    }
    logits[e] = logit;
  }
  if (pre_activation) *pre_activation = std::move(pre);
  return logits;
}

std::vector<double> attention_normalize(const std::vector<double>& logits, const EncoderGraph& graph, Mode mode,
                                        double attn_dropout_p, Rng* rng, std::vector<double>* dropped,
                                        std::vector<double>* mask_out) {
  if (logits.size() != graph.num_edges()) throw InputError("one logit per edge required");
  std::vector<double> alpha(logits.size(), 0.0);
  for (const auto& in : graph.incoming) {
    if (in.empty()) continue;
    double mx = -std::numeric_limits<double>::infinity();
    for (int e : in) mx = std::max(mx, logits[e]);
    double z = 0.0;
    for (int e : in) {
      alpha[e] = std::exp(logits[e] - mx);
      z += alpha[e];
    }
    for (int e : in) alpha[e] /= z;
  }
  if (dropped) {
    *dropped = alpha;
    const Matrix mask = draw_mask(alpha.size(), 1, attn_dropout_p, mode, rng);
    if (!mask.empty())
      for (std::size_t e = 0; e < alpha.size(); ++e) (*dropped)[e] *= mask[e];
    if (mask_out) *mask_out = mask.values();
  }
  return alpha;
}

Matrix gatv2_layer_forward(const Matrix& h, const EncoderGraph& graph, const GatLayerParams& layer, Mode mode,
                           Rng* rng, LayerCache* cache) {
  const std::size_t n = h.rows();
  const std::size_t dh = layer.head_dim();
  const std::size_t heads = layer.heads.size();
  Matrix combined(n, layer.out_dim());
  std::vector<HeadCache> head_caches(heads);

  for (std::size_t k = 0; k < heads; ++k) {
    const GatHead& head = layer.heads[k];
    HeadCache& hc = head_caches[k];
    const auto logits = gatv2_scores(h, graph, head, &hc.pre);
    hc.alpha = attention_normalize(logits, graph, mode, layer.attn_dropout_p, rng, &hc.beta, &hc.mask);
    hc.value = matmul_nt(h, head.wh);

    const std::size_t offset = layer.head_mode == HeadMode::Concat ? k * dh : 0;
    const double scale = layer.head_mode == HeadMode::Concat ? 1.0 : 1.0 / static_cast<double>(heads);
    for (std::size_t e = 0; e < graph.num_edges(); ++e) {
      const double w = scale * hc.beta[e];
      if (w == 0.0) continue;
      auto m = hc.value.row(graph.src[e]);
      auto out = combined.row(graph.dst[e]);
      for (std::size_t c = 0; c < dh; ++c) out[offset + c] += w * m[c];
    }
  }

  Matrix out = combined;
  Matrix node_mask;
  if (layer.relu) {
    for (auto& v : out.values()) v = std::max(v, 0.0);
    node_mask = draw_mask(out.rows(), out.cols(), layer.node_dropout_p, mode, rng);
    if (!node_mask.empty())
      for (std::size_t i = 0; i < out.size(); ++i) out[i] *= node_mask[i];
  }
  if (cache) {
    cache->input = h;
    cache->heads = std::move(head_caches);
    cache->combined = std::move(combined);
    cache->node_mask = std::move(node_mask);
  }
  return out;
}

Matrix gatv2_layer_backward(const LayerCache& cache, const EncoderGraph& graph, const GatLayerParams& layer,
                            const Matrix& d_out, GatLayerParams& grads) {
  const Matrix& h = cache.input;
  const std::size_t n = h.rows();
  const std::size_t in = h.cols();
  const std::size_t dh = layer.head_dim();
  const std::size_t heads = layer.heads.size();
  const std::size_t e_count = graph.num_edges();

  Matrix d_combined = d_out;
  if (layer.relu) {
    for (std::size_t i = 0; i < d_combined.size(); ++i) {
      if (!cache.node_mask.empty()) d_combined[i] *= cache.node_mask[i];
      if (cache.combined[i] <= 0.0) d_combined[i] = 0.0;
    }
  }

  Matrix d_h(n, in);
  for (std::size_t k = 0; k < heads; ++k) {
    const GatHead& head = layer.heads[k];
    GatHead& g = grads.heads[k];
    const HeadCache& hc = cache.heads[k];
    const std::size_t offset = layer.head_mode == HeadMode::Concat ? k * dh : 0;
    const double scale = layer.head_mode == HeadMode::Concat ? 1.0 : 1.0 / static_cast<double>(heads);

    // out_k[v] = sum_e beta_e * value[u]
    Matrix d_value(n, dh);
    std::vector<double> d_alpha(e_count, 0.0);
    for (std::size_t e = 0; e < e_count; ++e) {
      auto dout = d_combined.row(graph.dst[e]);
      auto m = hc.value.row(graph.src[e]);
      auto dm = d_value.row(graph.src[e]);
      double d_beta = 0.0;
      for (std::size_t c = 0; c < dh; ++c) {
        const double go = scale * dout[offset + c];
        d_beta += go * m[c];
        dm[c] += hc.beta[e] * go;
      }
      d_alpha[e] = hc.mask.empty() ? d_beta : d_beta * hc.mask[e];
    }

    std::vector<double> d_logit(e_count, 0.0);
    for (const auto& incoming : graph.incoming) {
      double t = 0.0;
      for (int e : incoming) t += hc.alpha[e] * d_alpha[e];
      for (int e : incoming) d_logit[e] = hc.alpha[e] * (d_alpha[e] - t);
    }

    Matrix d_proj_src(n, dh), d_proj_dst(n, dh);
    for (std::size_t e = 0; e < e_count; ++e) {
      auto pre = hc.pre.row(e);
      auto ds_src = d_proj_src.row(graph.src[e]);
      auto ds_dst = d_proj_dst.row(graph.dst[e]);
      const double dl = d_logit[e];
      if (dl == 0.0) continue;
      for (std::size_t c = 0; c < dh; ++c) {
        g.att[c] += dl * leaky(pre[c]);
        const double ds = dl * head.att[c] * leaky_grad(pre[c]);
        ds_src[c] += ds;
        ds_dst[c] += ds;
      }
    }

    // Wa gradients, split into the source and destination halves.
    for (std::size_t i = 0; i < n; ++i) {
      auto hi = h.row(i);
      auto dsi = d_proj_src.row(i);
      auto ddi = d_proj_dst.row(i);
      auto dvi = d_value.row(i);
      auto dhi = d_h.row(i);
      for (std::size_t c = 0; c < dh; ++c) {
        auto gw = g.wa.row(c);
        auto w = head.wa.row(c);
        auto gwh = g.wh.row(c);
        auto wh = head.wh.row(c);
        const double a = dsi[c], b = ddi[c], v = dvi[c];
        for (std::size_t k2 = 0; k2 < in; ++k2) {
          gw[k2] += a * hi[k2];
          gw[in + k2] += b * hi[k2];
          gwh[k2] += v * hi[k2];
          dhi[k2] += a * w[k2] + b * w[in + k2] + v * wh[k2];
        }
      }
    }
  }
  return d_h;
}

Matrix encoder_forward(const SceneGraph& graph, const EncoderParams& params, std::uint64_t mask_seed,
                       EncoderCache* cache) {
  if (!graph.has_features()) throw InputError("encoder needs standardized features");
  EncoderGraph eg = EncoderGraph::from_scene(graph);
  Rng rng(mask_seed);
  Rng* r = params.mode == Mode::Train ? &rng : nullptr;
  if (cache) {
    Matrix h0 = mlp_forward(graph.features, params.mlp, params.mode, r, &cache->mlp);
    Matrix h1 = gatv2_layer_forward(h0, eg, params.layers[0], params.mode, r, &cache->layers[0]);
    cache->output = gatv2_layer_forward(h1, eg, params.layers[1], params.mode, r, &cache->layers[1]);
    cache->graph = std::move(eg);
    cache->valid = true;
    return cache->output;
  }
  Matrix h0 = mlp_forward(graph.features, params.mlp, params.mode, r);
  Matrix h1 = gatv2_layer_forward(h0, eg, params.layers[0], params.mode, r);
  return gatv2_layer_forward(h1, eg, params.layers[1], params.mode, r);
}

void encoder_backward(const EncoderCache& cache, const EncoderParams& params, const Matrix& d_embeddings,
                      EncoderParams& grads) {
  if (!cache.valid) throw InputError("encoder_backward called without a forward cache");
  if (!d_embeddings.same_shape(cache.output)) {
    throw InputError("upstream gradient shape " + shape_str(d_embeddings) + " != " + shape_str(cache.output));
  }
  Matrix d1 = gatv2_layer_backward(cache.layers[1], cache.graph, params.layers[1], d_embeddings, grads.layers[1]);
  Matrix d0 = gatv2_layer_backward(cache.layers[0], cache.graph, params.layers[0], d1, grads.layers[0]);
  mlp_backward(cache.mlp, params.mlp, d0, grads.mlp);
}

double grad_check(const std::function<double(const std::vector<double>&)>& f, std::vector<double> x,
                  const std::vector<double>& analytic, double eps, double floor) {
  if (x.size() != analytic.size()) throw InputError("gradient length does not match parameter length");
  const double f0 = f(x);
  const double f1 = f(x);
  if (f0 != f1) throw InputError("grad_check needs a deterministic function");
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double fp = f(x);
    x[i] = orig - eps;
    const double fm = f(x);
    x[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = analytic[i];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
    worst = std::max(worst, err);
  }
  return worst;
}

std::vector<double> flatten(const EncoderParams& params) {
  std::vector<double> flat;
  flat.reserve(parameter_count(params));
  for (const auto& [name, t] : named_tensors(params)) flat.insert(flat.end(), t->values().begin(), t->values().end());
  return flat;
}

void unflatten(const std::vector<double>& flat, EncoderParams& params) {
  std::size_t pos = 0;
  for (auto& [name, t] : named_tensors(params)) {
    if (pos + t->size() > flat.size()) throw InputError("flat parameter vector too short");
    std::copy(flat.begin() + static_cast<long>(pos), flat.begin() + static_cast<long>(pos + t->size()),
              t->values().begin());
    pos += t->size();
  }
  if (pos != flat.size()) throw InputError("flat parameter vector too long");
}

json weights_to_json(const EncoderParams& params, const FeatureStats& stats) {
  const auto& a = params.arch;
  json tensors = json::array();
  for (const auto& [name, t] : named_tensors(params)) {
    tensors.push_back({{"name", name}, {"shape", {t->rows(), t->cols()}}, {"data", t->values()}});
  }
  return {{"format_version", kWeightsFormatVersion},
          {"architecture",
           {{"input_dim", a.input_dim},
            {"mlp_hidden", a.mlp_hidden},
            {"mlp_out", a.mlp_out},
            {"heads", a.heads},
            {"hidden_head_dim", a.hidden_head_dim},
            {"output_dim", a.output_dim},
            {"mlp_dropout", a.mlp_dropout},
            {"attn_dropout", a.attn_dropout},
            {"node_dropout", a.node_dropout},
            {"leaky_slope", kLeakySlope}}},
          {"feature_stats", stats_to_json(stats)},
          {"tensors", std::move(tensors)}};
}

std::pair<EncoderParams, FeatureStats> weights_from_json(const json& j) {
  try {
    const int version = j.at("format_version").get<int>();
    if (version != kWeightsFormatVersion) throw InputError("unsupported weights format version " + std::to_string(version));
    const auto& ja = j.at("architecture");
    Architecture a;
    a.input_dim = ja.at("input_dim").get<std::size_t>();
    a.mlp_hidden = ja.at("mlp_hidden").get<std::size_t>();
    a.mlp_out = ja.at("mlp_out").get<std::size_t>();
    a.heads = ja.at("heads").get<std::size_t>();
    a.hidden_head_dim = ja.at("hidden_head_dim").get<std::size_t>();
    a.output_dim = ja.at("output_dim").get<std::size_t>();
    a.mlp_dropout = ja.at("mlp_dropout").get<double>();
    a.attn_dropout = ja.at("attn_dropout").get<double>();
    a.node_dropout = ja.at("node_dropout").get<double>();
    if (a.input_dim != kFeatureDim) throw InputError("weights expect feature width " + std::to_string(a.input_dim));

    EncoderParams p = init_encoder(a, 0);
    auto slots = named_tensors(p);
    const auto& tensors = j.at("tensors");
    if (tensors.size() != slots.size()) {
      throw InputError("weights file has " + std::to_string(tensors.size()) + " tensors, expected " +
                       std::to_string(slots.size()));
    }
    for (std::size_t i = 0; i < slots.size(); ++i) {
      const auto& jt = tensors[i];
      const auto name = jt.at("name").get<std::string>();
      if (name != slots[i].first) throw InputError("unexpected tensor '" + name + "', expected '" + slots[i].first + "'");
      const auto shape = jt.at("shape").get<std::array<std::size_t, 2>>();
      Matrix& dst = *slots[i].second;
      if (shape[0] != dst.rows() || shape[1] != dst.cols()) {
        throw InputError("shape mismatch for " + name + ": file has " + std::to_string(shape[0]) + "x" +
                         std::to_string(shape[1]) + ", architecture needs " + shape_str(dst));
      }
      auto data = jt.at("data").get<std::vector<double>>();
      dst = Matrix(shape[0], shape[1], std::move(data));
    }
    return {std::move(p), stats_from_json(j.at("feature_stats"))};
  } catch (const json::exception& e) {
    throw InputError(std::string("malformed weights file: ") + e.what());
  }
}

}  // namespace sgm
