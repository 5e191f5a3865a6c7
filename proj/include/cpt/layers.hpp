#pragma once

// CpT building blocks: point embedding, convolutional Q/K/V projection,
// feature-wise and point-wise (InterPoint) dot-product attention, and the
// assembled transformer layer.

#include <array>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "cpt/graph.hpp"
#include "cpt/ops.hpp"
#include "cpt/params.hpp"

namespace cpt {

enum class GraphSource { kDynamic, kStatic, kNone };

struct CptLayerConfig {
  std::size_t in_features = 3;
  std::size_t embed_dim = 64;
  std::size_t k = 20;
  bool has_interpoint = true;
  EdgeMode edge_mode = EdgeMode::kConcat;
  std::size_t embed_kernel = 0;  // 0: span the whole neighbourhood
  std::size_t embed_stride = 1;
  std::size_t proj_kernel = 1;
  std::size_t proj_stride = 1;
  std::size_t heads = 1;
  std::size_t ff_hidden = 0;  // 0: twice the embedding width
  double ln_eps = 1e-5;

  std::size_t edge_channels(bool locality) const {
    if (!locality) return in_features;
    return edge_mode == EdgeMode::kConcat ? 2 * in_features : in_features;
  }
  std::size_t kernel_width(bool locality) const {
    if (!locality) return 1;
    return embed_kernel == 0 ? k : embed_kernel;
  }
  std::size_t hidden() const { return ff_hidden == 0 ? 2 * embed_dim : ff_hidden; }

  void validate(bool locality) const {
    if (in_features == 0 || embed_dim == 0) throw ConfigError("layer widths must be positive");
    if (locality && k == 0) throw ConfigError("k must be positive");
    if (locality && kernel_width(true) > k)
      throw DimensionError("embedding kernel " + std::to_string(embed_kernel) + " wider than K = " + std::to_string(k));
    if (embed_stride == 0) throw ConfigError("embedding stride must be positive");
    if (proj_kernel % 2 == 0) throw ConfigError("projection kernel size must be odd, got " + std::to_string(proj_kernel));
    if (proj_stride != 1)
      throw ConfigError("projection stride must be 1 inside a CpT layer (the residual needs N tokens)");
    if (heads == 0 || embed_dim % heads != 0)
      throw ConfigError("embedding width " + std::to_string(embed_dim) + " not divisible by " +
                        std::to_string(heads) + " heads");
    if (!(ln_eps > 0)) throw ConfigError("layer-norm epsilon must be positive");
  }
};

/// Per-forward switches and optional instrumentation.
template <typename T>
struct ForwardContext {
  bool train = false;
  std::mt19937_64* dropout_rng = nullptr;
  std::vector<Tensor<T>>* attention_log = nullptr;  // every softmax attention matrix, in order
  std::size_t graph_builds = 0;
  std::vector<KnnGraph>* graph_log = nullptr;             // graph each layer used, in order
  const std::vector<KnnGraph>* frozen_graphs = nullptr;   // reuse these instead of searching
};

/// kd-tree for low-dimensional coordinates, brute force otherwise; both are exact.
template <typename T>
KnnGraph build_graph(const Tensor<T>& points, std::size_t k) {
  if (points.dim(2) <= 3 && points.dim(1) >= 64) return accelerate_knn(points, k);
  return knn_graph(points, k);
}

// ---------------------------------------------------------------------------
// Point embedding

template <typename T, typename Rng>
void add_point_embedding_params(ParamStore<T>& store, const std::string& prefix, std::size_t edge_channels,
                                std::size_t embed_dim, std::size_t kernel, Rng& rng) {
  auto& w = store.add(prefix + "weight", {embed_dim, edge_channels, 1, kernel});
  const double bound = 1.0 / std::sqrt(static_cast<double>(edge_channels * kernel));
  init_uniform(w, bound, rng);
  init_uniform(store.add(prefix + "bias", {embed_dim}), bound, rng);
}

/// Edge tensor in (B, N, K, C) layout → per-point embedding (B, N, E).
template <typename T>
Tensor<T> point_embedding_tokens(const Tensor<T>& edges_nkc, const Tensor<T>& weight, const Tensor<T>& bias,
                                 std::size_t stride) {
  const std::size_t B = edges_nkc.dim(0), N = edges_nkc.dim(1), K = edges_nkc.dim(2), C = edges_nkc.dim(3);
  if (weight.rank() != 4 || weight.dim(1) != C || weight.dim(2) != 1)
    throw DimensionError("point_embedding: weight " + shape_str(weight.shape()) + " does not fit " +
                         std::to_string(C) + " edge channels");
  const std::size_t E = weight.dim(0), kn = weight.dim(3);
  if (kn > K)
    throw DimensionError("point_embedding: kernel width " + std::to_string(kn) + " exceeds neighbour count " +
                         std::to_string(K));
  if (kn == K && stride == 1) {
    // The kernel covers the whole neighbourhood: one linear map per point over
    // the flattened (K, C) edge block, with the weight reordered to match.
    auto w = reshape(permute(reshape(weight, {E, C, kn}), {2, 1, 0}), {kn * C, E});
    return linear(reshape(edges_nkc, {B, N, K * C}), w, bias);
  }
  auto rows = reshape(permute(edges_nkc, {0, 1, 3, 2}), {B * N, C, K});
  auto y = conv_grouped(rows, reshape(weight, {E, C, kn}), &bias, stride, 0, 1);
  return reshape(max_reduce(y, 2).values, {B, N, E});
}

/// Point embedding straight from points and graph, for a kernel spanning the
/// whole neighbourhood. Linearity splits W·[x_i ‖ x_j − x_i] summed over the K
/// taps into a neighbour term Σ_t W^Δ_t x_{j_t} and a centre term
/// (Σ_t W^c_t − Σ_t W^Δ_t) x_i, so the (B, N, K, C_e) edge tensor is never built.
template <typename T>
Tensor<T> point_embedding_direct(const Tensor<T>& points, const KnnGraph& graph, EdgeMode mode,
                                 const Tensor<T>& weight, const Tensor<T>& bias) {
  const std::size_t B = points.dim(0), N = points.dim(1), f = points.dim(2), K = graph.k;
  const std::size_t Ce = mode == EdgeMode::kConcat ? 2 * f : f;
  if (weight.rank() != 4 || weight.dim(1) != Ce || weight.dim(2) != 1 || weight.dim(3) != K)
    throw DimensionError("point_embedding: weight " + shape_str(weight.shape()) + " does not fit " +
                         std::to_string(Ce) + " edge channels over " + std::to_string(K) + " neighbours");
  const std::size_t E = weight.dim(0);
  auto w = permute(reshape(weight, {E, Ce, K}), {2, 1, 0});  // (K, C_e, E)
  auto w_delta = mode == EdgeMode::kConcat ? slice(w, 1, f, 2 * f) : w;
  auto centre = scale(mean_reduce(w_delta, 0), static_cast<T>(-static_cast<double>(K)));
  if (mode == EdgeMode::kConcat)
    centre = add(centre, scale(mean_reduce(slice(w, 1, 0, f), 0), static_cast<T>(K)));
  auto nbr = reshape(batched_gather(points, std::span<const std::size_t>(graph.neighbor_idx), N * K), {B, N, K * f});
  return add(matmul(nbr, reshape(w_delta, {K * f, E})), linear(points, centre, bias));
}

/// Edge tensor (B, C_e, N, K) → embedding (B, E, N): a (1, k_n) convolution with
/// stride (1, s_n) over the (N, K) plane, then max over the remaining neighbour axis.
template <typename T>
Tensor<T> point_embedding(const Tensor<T>& edges, const Tensor<T>& weight, const Tensor<T>& bias, std::size_t stride) {
  if (edges.rank() != 4) throw DimensionError("point_embedding: expected (B, C, N, K), got " + shape_str(edges.shape()));
  return permute(point_embedding_tokens(permute(edges, {0, 2, 3, 1}), weight, bias, stride), {0, 2, 1});
}

// ---------------------------------------------------------------------------
// Convolutional projection and attention

template <typename T, typename Rng>
void add_projection_params(ParamStore<T>& store, const std::string& prefix, std::size_t E, std::size_t p, Rng& rng) {
  for (const char* m : {"q", "k", "v"}) {
    auto& dw = store.add(prefix + m + ".depthwise", {E, 1, p});
    init_uniform(dw, 1.0 / std::sqrt(static_cast<double>(p)), rng);
    auto& pw = store.add(prefix + m + ".pointwise", {E, E, 1});
    init_uniform(pw, 1.0 / std::sqrt(static_cast<double>(E)), rng);
  }
  auto& ow = store.add(prefix + "out.weight", {E, E});
  init_uniform(ow, 1.0 / std::sqrt(static_cast<double>(E)), rng);
  init_uniform(store.add(prefix + "out.bias", {E}), 1.0 / std::sqrt(static_cast<double>(E)), rng);
}

/// x (B, E, N) → Q, K, V each (B, N', E): depthwise conv along the point axis
/// (kernel p, padding (p−1)/2, stride s) followed by a pointwise conv.
template <typename T>
std::array<Tensor<T>, 3> conv_projection(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix,
                                         std::size_t stride = 1) {
  if (x.rank() != 3) throw DimensionError("conv_projection: expected (B, E, N), got " + shape_str(x.shape()));
  const std::size_t E = x.dim(1);
  std::array<Tensor<T>, 3> out;
  const char* names[3] = {"q", "k", "v"};
  for (int m = 0; m < 3; ++m) {
    const auto& dw = params.get(prefix + names[m] + ".depthwise");
    const auto& pw = params.get(prefix + names[m] + ".pointwise");
    const std::size_t p = dw.dim(2);
    if (p % 2 == 0) throw ConfigError("conv_projection: kernel size must be odd, got " + std::to_string(p));
    auto d = conv_grouped(x, dw, static_cast<const Tensor<T>*>(nullptr), stride, (p - 1) / 2, E);
    auto q = conv_grouped(d, pw, static_cast<const Tensor<T>*>(nullptr), 1, 0, 1);
    out[m] = transpose(q, 1, 2);
  }
  return out;
}

/// Same projection on token-major input x (B, N, E), returning (B, N, E) each.
template <typename T>
std::array<Tensor<T>, 3> conv_projection_tokens(const Tensor<T>& x, const ParamStore<T>& params,
                                                const std::string& prefix) {
  if (x.rank() != 3) throw DimensionError("conv_projection: expected (B, N, E), got " + shape_str(x.shape()));
  const std::size_t E = x.dim(2);
  if (params.get(prefix + "q.depthwise").dim(2) != 1) return conv_projection(transpose(x, 1, 2), params, prefix);
  // p = 1: the depthwise conv is a per-channel scale and the pointwise conv a matmul.
  std::array<Tensor<T>, 3> out;
  const char* names[3] = {"q", "k", "v"};
  for (int m = 0; m < 3; ++m) {
    const auto& dw = params.get(prefix + names[m] + ".depthwise");
    const auto& pw = params.get(prefix + names[m] + ".pointwise");
    auto scaled = mul(x, reshape(dw, {E}));
    out[m] = matmul(scaled, transpose(reshape(pw, {E, E}), 0, 1));
  }
  return out;
}

/// softmax(Q Kᵀ / √d) V over token axis 1 of (B, N, E) inputs. With h heads the
/// last axis splits into h blocks of d = E/h and each block attends separately.
template <typename T>
Tensor<T> dot_product_attention(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V, std::size_t heads = 1,
                                std::vector<Tensor<T>>* attention_log = nullptr) {
  if (Q.rank() != 3 || Q.shape() != K.shape() || Q.shape() != V.shape())
    throw DimensionError("dot_product_attention: Q, K, V must share shape (B, N, E); got " + shape_str(Q.shape()) +
                         ", " + shape_str(K.shape()) + ", " + shape_str(V.shape()));
  const std::size_t B = Q.dim(0), N = Q.dim(1), E = Q.dim(2);
  if (heads == 0 || E % heads != 0) throw ConfigError("dot_product_attention: width not divisible by heads");
  const std::size_t d = E / heads;
  const T inv = T(1) / std::sqrt(static_cast<T>(d));
  if (heads == 1) {
    auto a = softmax(scale(matmul(Q, transpose(K, 1, 2)), inv), -1);
    if (attention_log) attention_log->push_back(a);
    return matmul(a, V);
  }
  auto split = [&](const Tensor<T>& t) { return permute(reshape(t, {B, N, heads, d}), {0, 2, 1, 3}); };
  auto q = split(Q), k = split(K), v = split(V);
  auto a = softmax(scale(matmul(q, transpose(k, 2, 3)), inv), -1);
  if (attention_log) attention_log->push_back(a);
  return reshape(permute(matmul(a, v), {0, 2, 1, 3}), {B, N, E});
}

/// Feature-wise attention: the same machinery with channels as tokens, so the
/// (E/h × E/h) attention weights feature transformations and sums run over points.
template <typename T>
Tensor<T> feature_attention(const Tensor<T>& Q, const Tensor<T>& K, const Tensor<T>& V, std::size_t heads = 1,
                            std::vector<Tensor<T>>* attention_log = nullptr) {
  if (Q.rank() != 3 || Q.shape() != K.shape() || Q.shape() != V.shape())
    throw DimensionError("feature_attention: Q, K, V must share shape (B, N, E)");
  const std::size_t B = Q.dim(0), N = Q.dim(1), E = Q.dim(2);
  if (heads == 0 || E % heads != 0) throw ConfigError("feature_attention: width not divisible by heads");
  const std::size_t e = E / heads;
  if (heads == 1) {
    // Channel tokens without reshuffling: scores Qᵀ K (E × E), output V Aᵀ.
    const T inv = T(1) / std::sqrt(static_cast<T>(N));
    auto a = softmax(scale(matmul(transpose(Q, 1, 2), K), inv), -1);
    if (attention_log) attention_log->push_back(a);
    return matmul(V, transpose(a, 1, 2));
  }
  // (B, N, h, e) → (B·h, e, N): each head is an independent set of e channel tokens.
  auto to_tokens = [&](const Tensor<T>& t) {
    return reshape(permute(reshape(t, {B, N, heads, e}), {0, 2, 3, 1}), {B * heads, e, N});
  };
  auto y = dot_product_attention(to_tokens(Q), to_tokens(K), to_tokens(V), 1, attention_log);
  return reshape(permute(reshape(y, {B, heads, e, N}), {0, 3, 1, 2}), {B, N, E});
}

enum class AttentionKind { kFeature, kInterPoint };

/// Projection, attention and output mix for tokens x (B, N, E).
template <typename T>
Tensor<T> attention_block(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix,
                          AttentionKind kind, std::size_t heads, std::vector<Tensor<T>>* attention_log = nullptr) {
  auto [q, k, v] = conv_projection_tokens(x, params, prefix);
  auto y = kind == AttentionKind::kFeature ? feature_attention(q, k, v, heads, attention_log)
                                           : dot_product_attention(q, k, v, heads, attention_log);
  return linear(y, params.get(prefix + "out.weight"), params.get(prefix + "out.bias"));
}

/// Each point attends over every point of its own cloud; batch items never mix.
template <typename T>
Tensor<T> interpoint_attention(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix,
                               std::size_t heads = 1, std::vector<Tensor<T>>* attention_log = nullptr) {
  return attention_block(x, params, prefix, AttentionKind::kInterPoint, heads, attention_log);
}

// ---------------------------------------------------------------------------
// Feedforward, normalization, full layer

template <typename T, typename Rng>
void add_feedforward_params(ParamStore<T>& store, const std::string& prefix, std::size_t E, std::size_t H, Rng& rng) {
  auto& w1 = store.add(prefix + "fc1.weight", {E, H});
  init_uniform(w1, 1.0 / std::sqrt(static_cast<double>(E)), rng);
  init_uniform(store.add(prefix + "fc1.bias", {H}), 1.0 / std::sqrt(static_cast<double>(E)), rng);
  auto& w2 = store.add(prefix + "fc2.weight", {H, E});
  init_uniform(w2, 1.0 / std::sqrt(static_cast<double>(H)), rng);
  init_uniform(store.add(prefix + "fc2.bias", {E}), 1.0 / std::sqrt(static_cast<double>(H)), rng);
}

template <typename T>
void add_norm_params(ParamStore<T>& store, const std::string& prefix, std::size_t E) {
  init_constant(store.add(prefix + "gamma", {E}), T(1));
  store.add(prefix + "beta", {E});
}

template <typename T>
Tensor<T> feedforward(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix) {
  auto h = relu(linear(x, params.get(prefix + "fc1.weight"), params.get(prefix + "fc1.bias")));
  return linear(h, params.get(prefix + "fc2.weight"), params.get(prefix + "fc2.bias"));
}

template <typename T>
Tensor<T> norm(const Tensor<T>& x, const ParamStore<T>& params, const std::string& prefix, double eps) {
  return layer_norm(x, params.get(prefix + "gamma"), params.get(prefix + "beta"), static_cast<T>(eps));
}

/// Registers every tensor of one CpT layer under `prefix`.
template <typename T, typename Rng>
void add_cpt_layer_params(ParamStore<T>& store, const std::string& prefix, const CptLayerConfig& cfg, bool locality,
                          Rng& rng) {
  cfg.validate(locality);
  const std::size_t E = cfg.embed_dim;
  add_point_embedding_params(store, prefix + "embed.", cfg.edge_channels(locality), E, cfg.kernel_width(locality), rng);
  add_projection_params(store, prefix + "attn.", E, cfg.proj_kernel, rng);
  add_norm_params(store, prefix + "norm1.", E);
  add_feedforward_params(store, prefix + "ff1.", E, cfg.hidden(), rng);
  add_norm_params(store, prefix + "norm2.", E);
  if (!cfg.has_interpoint) return;
  add_projection_params(store, prefix + "interpoint.", E, cfg.proj_kernel, rng);
  add_norm_params(store, prefix + "norm3.", E);
  add_feedforward_params(store, prefix + "ff2.", E, cfg.hidden(), rng);
  add_norm_params(store, prefix + "norm4.", E);
}

template <typename T>
struct LayerOutput {
  Tensor<T> out;   // (B, N, E)
  KnnGraph graph;  // graph the layer used (empty when graph-free)
};

/// One CpT layer on points (B, N, f_in):
///   z     = embed(edges(points, graph))
///   out_a = LN(FeatureAttn(proj(z))) + z
///   out_b = LN(FF(out_a)) + out_a
///   out_c = LN(InterPoint(out_b)) + out_b     (when enabled)
///   out_d = LN(FF'(out_c)) + out_c            (when enabled)
template <typename T>
LayerOutput<T> cpt_layer_forward(const Tensor<T>& points, const CptLayerConfig& cfg, const ParamStore<T>& params,
                                 const std::string& prefix, GraphSource source, const KnnGraph* static_graph,
                                 ForwardContext<T>& ctx) {
  if (points.rank() != 3) throw DimensionError("cpt_layer: expected (B, N, f), got " + shape_str(points.shape()));
  if (points.dim(2) != cfg.in_features)
    throw DimensionError("cpt_layer: configured for " + std::to_string(cfg.in_features) + " input features, got " +
                         shape_str(points.shape()));
  const bool locality = source != GraphSource::kNone;
  cfg.validate(locality);
  const std::size_t B = points.dim(0), N = points.dim(1);

  LayerOutput<T> result;
  Tensor<T> z;
  if (locality) {
    if (source == GraphSource::kStatic) {
      if (!static_graph) throw UsageError("cpt_layer: static graph source without a graph");
      result.graph = *static_graph;
    } else {
      result.graph = build_graph(points, cfg.k);
      ++ctx.graph_builds;
    }
    const auto& w = params.get(prefix + "embed.weight");
    const auto& b = params.get(prefix + "embed.bias");
    if (cfg.kernel_width(true) == result.graph.k && cfg.embed_stride == 1)
      z = point_embedding_direct(points, result.graph, cfg.edge_mode, w, b);
    else
      z = point_embedding_tokens(edge_features_nkc(points, result.graph, cfg.edge_mode), w, b, cfg.embed_stride);
  } else {
    auto pointwise = reshape(points, {B, N, 1, cfg.in_features});
    z = point_embedding_tokens(pointwise, params.get(prefix + "embed.weight"), params.get(prefix + "embed.bias"), 1);
  }

  const double eps = cfg.ln_eps;
  auto da = attention_block(z, params, prefix + "attn.", AttentionKind::kFeature, cfg.heads, ctx.attention_log);
  auto out_a = add(norm(da, params, prefix + "norm1.", eps), z);
  auto out_b = add(norm(feedforward(out_a, params, prefix + "ff1."), params, prefix + "norm2.", eps), out_a);
  if (!cfg.has_interpoint) {
    result.out = out_b;
    return result;
  }
  auto ip = interpoint_attention(out_b, params, prefix + "interpoint.", cfg.heads, ctx.attention_log);
  auto out_c = add(norm(ip, params, prefix + "norm3.", eps), out_b);
  result.out = add(norm(feedforward(out_c, params, prefix + "ff2."), params, prefix + "norm4.", eps), out_c);
  return result;
}

}  // namespace cpt
