#pragma once

// Classification and segmentation networks assembled from CpT layers.

#include <random>
#include <string>
#include <vector>

#include "cpt/kv.hpp"
#include "cpt/layers.hpp"

namespace cpt {

enum class Task { kClassification, kSegmentation };
enum class GraphMode { kDynamic, kStatic, kNone };

inline std::string to_string(Task t) { return t == Task::kClassification ? "classification" : "segmentation"; }
inline std::string to_string(GraphMode g) {
  switch (g) {
    case GraphMode::kDynamic: return "dynamic";
    case GraphMode::kStatic: return "static";
    default: return "none";
  }
}
inline std::string to_string(EdgeMode e) { return e == EdgeMode::kConcat ? "concat" : "delta"; }

struct ModelConfig {
  Task task = Task::kClassification;
  std::size_t in_features = 3;
  std::size_t num_outputs = 40;  // classes c, or part labels p for segmentation
  std::size_t k = 20;
  std::vector<std::size_t> layer_dims{64, 64, 128};
  std::vector<bool> interpoint{true, true, false};
  GraphMode graph_mode = GraphMode::kDynamic;
  EdgeMode edge_mode = EdgeMode::kConcat;
  std::size_t shared_mlp_dim = 1024;
  std::vector<std::size_t> head_mlp_dims{512, 256};
  double dropout = 0.5;
  std::size_t heads = 1;
  std::size_t proj_kernel = 1;
  std::size_t proj_stride = 1;
  std::size_t embed_kernel = 0;
  std::size_t embed_stride = 1;
  std::size_t ff_hidden = 0;
  double ln_eps = 1e-5;

  bool locality() const { return graph_mode != GraphMode::kNone; }

  /// The segmentation branch runs every transformer layer without InterPoint attention.
  bool layer_interpoint(std::size_t i) const { return task == Task::kClassification && interpoint[i]; }

  std::size_t concat_width() const {
    std::size_t s = 0;
    for (auto d : layer_dims) s += d;
    return s;
  }

  CptLayerConfig layer(std::size_t i) const {
    CptLayerConfig c;
    c.in_features = i == 0 ? in_features : layer_dims[i - 1];
    c.embed_dim = layer_dims[i];
    c.k = k;
    c.has_interpoint = layer_interpoint(i);
    c.edge_mode = edge_mode;
    c.embed_kernel = embed_kernel;
    c.embed_stride = embed_stride;
    c.proj_kernel = proj_kernel;
    c.proj_stride = proj_stride;
    c.heads = heads;
    c.ff_hidden = ff_hidden;
    c.ln_eps = ln_eps;
    return c;
  }

  void validate() const {
    if (layer_dims.empty()) throw ConfigError("model needs at least one CpT layer");
    if (interpoint.size() != layer_dims.size())
      throw ConfigError("interpoint flags (" + std::to_string(interpoint.size()) + ") must match layer count (" +
                        std::to_string(layer_dims.size()) + ")");
    if (interpoint.back()) throw ConfigError("the final CpT layer runs without InterPoint attention");
    for (auto d : layer_dims)
      if (d == 0) throw ConfigError("layer widths must be positive");
    for (auto d : head_mlp_dims)
      if (d == 0) throw ConfigError("head widths must be positive");
    if (in_features == 0 || num_outputs == 0 || shared_mlp_dim == 0)
      throw ConfigError("feature, output and shared-MLP widths must be positive");
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must lie in [0, 1)");
    for (std::size_t i = 0; i < layer_dims.size(); ++i) layer(i).validate(locality());
  }

  bool operator==(const ModelConfig&) const = default;
};

namespace detail {
inline const std::vector<std::string>& model_keys() {
  static const std::vector<std::string> keys{
      "task",          "in_features", "num_classes", "k",           "layer_dims",   "interpoint",
      "graph_mode",    "edge_mode",   "shared_mlp_dim", "head_mlp_dims", "dropout", "heads",
      "proj_kernel",   "proj_stride", "embed_kernel", "embed_stride", "ff_hidden", "ln_eps"};
  return keys;
}
}  // namespace detail

/// Applies one key; returns false when the key does not belong to the model.
inline bool set_model_key(ModelConfig& c, const std::string& key, const std::string& v) {
  if (key == "task") {
    if (v == "classification") c.task = Task::kClassification;
    else if (v == "segmentation") c.task = Task::kSegmentation;
    else throw ConfigError("task must be classification or segmentation, got '" + v + "'");
  } else if (key == "in_features") c.in_features = kv::to_size(key, v);
  else if (key == "num_classes") c.num_outputs = kv::to_size(key, v);
  else if (key == "k") c.k = kv::to_size(key, v);
  else if (key == "layer_dims") c.layer_dims = kv::to_size_list(key, v);
  else if (key == "interpoint") c.interpoint = kv::to_bool_list(key, v);
  else if (key == "graph_mode") {
    if (v == "dynamic") c.graph_mode = GraphMode::kDynamic;
    else if (v == "static") c.graph_mode = GraphMode::kStatic;
    else if (v == "none") c.graph_mode = GraphMode::kNone;
    else throw ConfigError("graph_mode must be dynamic, static or none, got '" + v + "'");
  } else if (key == "edge_mode") {
    if (v == "concat") c.edge_mode = EdgeMode::kConcat;
    else if (v == "delta") c.edge_mode = EdgeMode::kDelta;
    else throw ConfigError("edge_mode must be concat or delta, got '" + v + "'");
  } else if (key == "shared_mlp_dim") c.shared_mlp_dim = kv::to_size(key, v);
  else if (key == "head_mlp_dims") c.head_mlp_dims = kv::to_size_list(key, v);
  else if (key == "dropout") c.dropout = kv::to_double(key, v);
  else if (key == "heads") c.heads = kv::to_size(key, v);
  else if (key == "proj_kernel") c.proj_kernel = kv::to_size(key, v);
  else if (key == "proj_stride") c.proj_stride = kv::to_size(key, v);
  else if (key == "embed_kernel") c.embed_kernel = kv::to_size(key, v);
  else if (key == "embed_stride") c.embed_stride = kv::to_size(key, v);
  else if (key == "ff_hidden") c.ff_hidden = kv::to_size(key, v);
  else if (key == "ln_eps") c.ln_eps = kv::to_double(key, v);
  else return false;
  return true;
}

inline KeyValues model_to_kv(const ModelConfig& c) {
  auto size_fmt = [](std::size_t v) { return std::to_string(v); };
  auto bool_fmt = [](bool v) { return std::string(v ? "true" : "false"); };
  return {{"task", to_string(c.task)},
          {"in_features", std::to_string(c.in_features)},
          {"num_classes", std::to_string(c.num_outputs)},
          {"k", std::to_string(c.k)},
          {"layer_dims", kv::join(c.layer_dims, size_fmt)},
          {"interpoint", kv::join(c.interpoint, bool_fmt)},
          {"graph_mode", to_string(c.graph_mode)},
          {"edge_mode", to_string(c.edge_mode)},
          {"shared_mlp_dim", std::to_string(c.shared_mlp_dim)},
          {"head_mlp_dims", kv::join(c.head_mlp_dims, size_fmt)},
          {"dropout", kv::num(c.dropout)},
          {"heads", std::to_string(c.heads)},
          {"proj_kernel", std::to_string(c.proj_kernel)},
          {"proj_stride", std::to_string(c.proj_stride)},
          {"embed_kernel", std::to_string(c.embed_kernel)},
          {"embed_stride", std::to_string(c.embed_stride)},
          {"ff_hidden", std::to_string(c.ff_hidden)},
          {"ln_eps", kv::num(c.ln_eps)}};
}

inline ModelConfig model_from_kv(const KeyValues& values) {
  ModelConfig c;
  for (const auto& [k, v] : values)
    if (!set_model_key(c, k, v)) throw ConfigError("unknown model key '" + k + "'");
  return c;
}

/// Builds and initializes every parameter for `cfg`; names encode position.
template <typename T>
ParamStore<T> build_model_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ParamStore<T> store;
  for (std::size_t i = 0; i < cfg.layer_dims.size(); ++i)
    add_cpt_layer_params(store, "layer" + std::to_string(i) + ".", cfg.layer(i), cfg.locality(), rng);

  auto add_linear = [&](const std::string& prefix, std::size_t in, std::size_t out) {
    auto& w = store.add(prefix + "weight", {in, out});
    init_uniform(w, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    init_uniform(store.add(prefix + "bias", {out}), 1.0 / std::sqrt(static_cast<double>(in)), rng);
  };
  const std::size_t M = cfg.shared_mlp_dim;
  add_linear("shared_mlp.", cfg.concat_width(), M);
  add_norm_params(store, "shared_mlp.norm.", M);
  std::size_t width = cfg.task == Task::kClassification ? M : M + cfg.concat_width();
  for (std::size_t j = 0; j < cfg.head_mlp_dims.size(); ++j) {
    add_linear("head.fc" + std::to_string(j) + ".", width, cfg.head_mlp_dims[j]);
    add_norm_params(store, "head.norm" + std::to_string(j) + ".", cfg.head_mlp_dims[j]);
    width = cfg.head_mlp_dims[j];
  }
  add_linear("head.out.", width, cfg.num_outputs);
  return store;
}

template <typename T>
struct TrunkOutput {
  Tensor<T> per_point;  // (B, N, ΣE) concatenated layer outputs
  Tensor<T> global;     // (B, M) max-pooled shared-MLP features
};

template <typename T>
TrunkOutput<T> trunk_forward(const Tensor<T>& x, const ModelConfig& cfg, const ParamStore<T>& params,
                             ForwardContext<T>& ctx) {
  if (x.rank() != 3 || x.dim(2) != cfg.in_features)
    throw DimensionError("model expects (B, N, " + std::to_string(cfg.in_features) + ") input, got " +
                         shape_str(x.shape()));
  std::vector<Tensor<T>> outs;
  KnnGraph first;
  Tensor<T> feats = x;
  for (std::size_t i = 0; i < cfg.layer_dims.size(); ++i) {
    GraphSource src = GraphSource::kDynamic;
    if (cfg.graph_mode == GraphMode::kNone) src = GraphSource::kNone;
    else if (cfg.graph_mode == GraphMode::kStatic && i > 0) src = GraphSource::kStatic;
    const KnnGraph* given = &first;
    if (ctx.frozen_graphs && src != GraphSource::kNone) {
      if (i >= ctx.frozen_graphs->size()) throw UsageError("frozen graph list is shorter than the layer count");
      src = GraphSource::kStatic;
      given = &(*ctx.frozen_graphs)[i];
    }
    auto res = cpt_layer_forward(feats, cfg.layer(i), params, "layer" + std::to_string(i) + ".", src, given, ctx);
    if (ctx.graph_log) ctx.graph_log->push_back(res.graph);
    if (i == 0) first = std::move(res.graph);
    feats = res.out;
    outs.push_back(res.out);
  }
  auto cat = outs.size() == 1 ? outs[0] : concat(outs, -1);
  auto h = relu(norm(linear(cat, params.get("shared_mlp.weight"), params.get("shared_mlp.bias")), params,
                     "shared_mlp.norm.", cfg.ln_eps));
  return {cat, max_reduce(h, 1).values};
}

template <typename T>
Tensor<T> head_forward(Tensor<T> h, const ModelConfig& cfg, const ParamStore<T>& params, ForwardContext<T>& ctx) {
  for (std::size_t j = 0; j < cfg.head_mlp_dims.size(); ++j) {
    const std::string p = "head.fc" + std::to_string(j) + ".";
    h = relu(norm(linear(h, params.get(p + "weight"), params.get(p + "bias")), params,
                  "head.norm" + std::to_string(j) + ".", cfg.ln_eps));
    if (ctx.train && cfg.dropout > 0) {
      if (!ctx.dropout_rng) throw UsageError("training forward with dropout needs an rng");
      h = dropout(h, cfg.dropout, true, *ctx.dropout_rng);
    }
  }
  return linear(h, params.get("head.out.weight"), params.get("head.out.bias"));
}

/// (B, N, f) → class logits (B, c).
template <typename T>
Tensor<T> classify_forward(const Tensor<T>& x, const ModelConfig& cfg, const ParamStore<T>& params,
                           ForwardContext<T>& ctx) {
  if (cfg.task != Task::kClassification) throw ConfigError("classify_forward on a segmentation config");
  auto trunk = trunk_forward(x, cfg, params, ctx);
  // A singleton token axis keeps every head product per item, so a cloud's
  // logits are bit-identical whatever else shares its batch.
  const std::size_t B = x.dim(0);
  auto y = head_forward(reshape(trunk.global, {B, 1, cfg.shared_mlp_dim}), cfg, params, ctx);
  return reshape(y, {B, cfg.num_outputs});
}

/// (B, N, f) → per-point label logits (B, N, p).
template <typename T>
Tensor<T> segment_forward(const Tensor<T>& x, const ModelConfig& cfg, const ParamStore<T>& params,
                          ForwardContext<T>& ctx) {
  if (cfg.task != Task::kSegmentation) throw ConfigError("segment_forward on a classification config");
  auto trunk = trunk_forward(x, cfg, params, ctx);
  const std::size_t B = x.dim(0), N = x.dim(1);
  auto g = expand(reshape(trunk.global, {B, 1, cfg.shared_mlp_dim}), 1, N);
  return head_forward(concat(std::vector<Tensor<T>>{trunk.per_point, g}, -1), cfg, params, ctx);
}

/// Graph-free ("no locality") classification: pointwise embedding, no kNN.
template <typename T>
Tensor<T> global_input_forward(const Tensor<T>& x, const ModelConfig& cfg, const ParamStore<T>& params,
                               ForwardContext<T>& ctx) {
  if (cfg.graph_mode != GraphMode::kNone) throw ConfigError("global_input_forward requires graph_mode = none");
  return classify_forward(x, cfg, params, ctx);
}

/// Dispatches on the configured task.
template <typename T>
Tensor<T> model_forward(const Tensor<T>& x, const ModelConfig& cfg, const ParamStore<T>& params,
                        ForwardContext<T>& ctx) {
  return cfg.task == Task::kClassification ? classify_forward(x, cfg, params, ctx)
                                           : segment_forward(x, cfg, params, ctx);
}

}  // namespace cpt
