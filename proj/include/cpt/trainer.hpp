#pragma once

// Run configuration, the training loop, evaluation at several resolutions,
// run reports, and the ablation harness.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>

#include "cpt/augment.hpp"
#include "cpt/checkpoint.hpp"
#include "cpt/data.hpp"
#include "cpt/train.hpp"

namespace cpt {

struct TrainConfig {
  std::size_t epochs = 300;
  std::size_t batch_size = 16;
  double lr0 = 0.001;
  double lr_min = 1e-4;
  double momentum = 0.9;
  bool augment = true;
  AugmentConfig aug;
  std::vector<std::size_t> point_dropout_eval_sizes;
  std::uint64_t seed = 1;
  std::string dtype = "float32";
  bool stop_at_perfect_train = true;  // stop once eval-mode train accuracy reaches 100%
  bool knn_clamp = false;             // lower k to N − 1 instead of failing on small clouds

  // Data: a manifest path, or synthetic primitives when empty.
  std::string manifest;
  std::vector<std::string> families{"sphere", "cube", "torus"};
  std::size_t per_class = 30;
  std::size_t points = 128;
  double noise = 0.0;
  double train_fraction = 2.0 / 3.0;

  void validate() const {
    if (epochs == 0) throw ConfigError("epochs must be at least 1");
    if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
    if (!(lr_min > 0 && lr_min <= lr0)) throw ConfigError("learning rates must satisfy 0 < lr_min <= lr0");
    if (momentum < 0 || momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
    if (aug.scale_lo > aug.scale_hi) throw ConfigError("scale_range must satisfy lo <= hi");
    if (aug.scale_lo <= 0) throw ConfigError("scale_range must be positive");
    if (aug.jitter_sigma < 0 || aug.jitter_clip < 0) throw ConfigError("jitter parameters must be >= 0");
    if (dtype != "float32" && dtype != "float64") throw ConfigError("dtype must be float32 or float64");
    if (manifest.empty()) {
      if (families.empty()) throw ConfigError("synthetic data needs at least one shape family");
      for (const auto& f : families) parse_family(f);
      if (per_class < 2) throw ConfigError("per_class must be at least 2 for a stratified split");
    }
    if (!(train_fraction > 0 && train_fraction < 1)) throw ConfigError("train_fraction must lie in (0, 1)");
    for (auto n : point_dropout_eval_sizes)
      if (n < 2) throw ConfigError("point_dropout_eval_sizes entries must be at least 2");
  }
  bool operator==(const TrainConfig&) const = default;
};

/// Model + training settings in one flat key space.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  bool num_classes_set = false;  // otherwise taken from the dataset

  void set(const std::string& key, const std::string& v);
  void apply(const KeyValues& values) {
    for (const auto& [k, v] : values) set(k, v);
  }
  KeyValues to_kv() const;
  void validate() const {
    model.validate();
    train.validate();
  }
  bool operator==(const RunConfig&) const = default;
};

inline void RunConfig::set(const std::string& key, const std::string& v) {
  if (set_model_key(model, key, v)) {
    if (key == "num_classes") num_classes_set = true;
    return;
  }
  auto& t = train;
  if (key == "epochs") t.epochs = kv::to_size(key, v);
  else if (key == "batch_size") t.batch_size = kv::to_size(key, v);
  else if (key == "lr0") t.lr0 = kv::to_double(key, v);
  else if (key == "lr_min") t.lr_min = kv::to_double(key, v);
  else if (key == "momentum") t.momentum = kv::to_double(key, v);
  else if (key == "augment") t.augment = kv::to_bool(key, v);
  else if (key == "jitter_sigma") t.aug.jitter_sigma = kv::to_double(key, v);
  else if (key == "jitter_clip") t.aug.jitter_clip = kv::to_double(key, v);
  else if (key == "scale_range") {
    const auto parts = kv::split_list(v);
    if (parts.size() != 2) throw ConfigError("scale_range expects 'lo,hi', got '" + v + "'");
    t.aug.scale_lo = kv::to_double(key, parts[0]);
    t.aug.scale_hi = kv::to_double(key, parts[1]);
  } else if (key == "point_dropout_eval_sizes") t.point_dropout_eval_sizes = kv::to_size_list(key, v);
  else if (key == "seed") t.seed = kv::to_u64(key, v);
  else if (key == "dtype") t.dtype = v;
  else if (key == "stop_at_perfect_train") t.stop_at_perfect_train = kv::to_bool(key, v);
  else if (key == "knn_clamp") t.knn_clamp = kv::to_bool(key, v);
  else if (key == "manifest") t.manifest = v;
  else if (key == "families") {
    t.families = kv::split_list(v);
    for (const auto& f : t.families) parse_family(f);
  } else if (key == "per_class") t.per_class = kv::to_size(key, v);
  else if (key == "points") t.points = kv::to_size(key, v);
  else if (key == "noise") t.noise = kv::to_double(key, v);
  else if (key == "train_fraction") t.train_fraction = kv::to_double(key, v);
  else throw ConfigError("unknown config key '" + key + "'");
}

inline KeyValues RunConfig::to_kv() const {
  auto out = model_to_kv(model);
  const auto& t = train;
  auto size_fmt = [](std::size_t v) { return std::to_string(v); };
  auto str_fmt = [](const std::string& s) { return s; };
  out["epochs"] = std::to_string(t.epochs);
  out["batch_size"] = std::to_string(t.batch_size);
  out["lr0"] = kv::num(t.lr0);
  out["lr_min"] = kv::num(t.lr_min);
  out["momentum"] = kv::num(t.momentum);
  out["augment"] = t.augment ? "true" : "false";
  out["jitter_sigma"] = kv::num(t.aug.jitter_sigma);
  out["jitter_clip"] = kv::num(t.aug.jitter_clip);
  out["scale_range"] = kv::num(t.aug.scale_lo) + "," + kv::num(t.aug.scale_hi);
  out["point_dropout_eval_sizes"] = kv::join(t.point_dropout_eval_sizes, size_fmt);
  out["seed"] = std::to_string(t.seed);
  out["dtype"] = t.dtype;
  out["stop_at_perfect_train"] = t.stop_at_perfect_train ? "true" : "false";
  out["knn_clamp"] = t.knn_clamp ? "true" : "false";
  out["manifest"] = t.manifest;
  out["families"] = kv::join(t.families, str_fmt);
  out["per_class"] = std::to_string(t.per_class);
  out["points"] = std::to_string(t.points);
  out["noise"] = kv::num(t.noise);
  out["train_fraction"] = kv::num(t.train_fraction);
  return out;
}

inline RunConfig run_config_from_kv(const KeyValues& values) {
  RunConfig rc;
  rc.apply(values);
  return rc;
}

/// The small three-class setup: sphere/cube/torus, 30 clouds each of 128
/// points, a scaled-down network, and no head dropout (60 training clouds are
/// too few for it to help).
inline RunConfig toy_run_config() {
  RunConfig rc;
  rc.model.layer_dims = {32, 32, 64};
  rc.model.shared_mlp_dim = 256;
  rc.model.head_mlp_dims = {128, 64};
  rc.model.dropout = 0.0;
  rc.model.k = 20;
  rc.train.families = {"sphere", "cube", "torus"};
  rc.train.per_class = 30;
  rc.train.points = 128;
  rc.train.point_dropout_eval_sizes = {64};
  return rc;
}

/// Loads the dataset a run config describes (manifest or synthetic).
inline Dataset load_run_dataset(const RunConfig& rc) {
  const auto& t = rc.train;
  if (!t.manifest.empty()) {
    if (!std::filesystem::exists(t.manifest)) throw ConfigError("manifest '" + t.manifest + "' does not exist");
    return load_dataset(load_manifest(t.manifest));
  }
  std::vector<ShapeFamily> fams;
  for (const auto& f : t.families) fams.push_back(parse_family(f));
  return generate_dataset(fams, t.per_class, t.points, t.noise, derive_seed(t.seed, "data"),
                          rc.model.task == Task::kSegmentation);
}

/// The stratified train/test split a run config implies for `ds`.
inline Split run_split(const RunConfig& rc, const Dataset& ds) {
  return make_splits(strata_of(ds), rc.train.train_fraction, derive_seed(rc.train.seed, "split"));
}

/// Fills data-dependent settings and checks the model against the dataset.
inline RunConfig resolve_against(RunConfig rc, const Dataset& ds) {
  if ((ds.kind == LabelKind::kPerPoint) != (rc.model.task == Task::kSegmentation))
    throw ConfigError("task '" + to_string(rc.model.task) + "' does not match the dataset's " +
                      (ds.kind == LabelKind::kPerPoint ? "per-point" : "per-cloud") + " labels");
  if (!rc.num_classes_set) rc.model.num_outputs = ds.num_classes();
  else if (rc.model.num_outputs != ds.num_classes())
    throw ConfigError("num_classes = " + std::to_string(rc.model.num_outputs) + " but the dataset declares " +
                      std::to_string(ds.num_classes()));
  rc.num_classes_set = true;
  if (rc.model.in_features != ds.features)
    throw ConfigError("in_features = " + std::to_string(rc.model.in_features) + " but the data has " +
                      std::to_string(ds.features) + " channels per point");
  std::size_t min_points = std::numeric_limits<std::size_t>::max();
  for (const auto& s : ds.samples) min_points = std::min(min_points, s.num_points);
  for (auto n : rc.train.point_dropout_eval_sizes) min_points = std::min(min_points, n);
  if (rc.model.locality() && rc.model.k >= min_points) {
    if (!rc.train.knn_clamp)
      throw ConfigError("k = " + std::to_string(rc.model.k) + " needs clouds of more than " +
                        std::to_string(rc.model.k) + " points (smallest is " + std::to_string(min_points) +
                        "); lower k or set knn_clamp = true");
    rc.model.k = min_points - 1;
  }
  rc.validate();
  return rc;
}

// ---------------------------------------------------------------------------
// Steps and evaluation

/// One SGD step on a batch; returns the loss before the update.
template <typename T>
double train_step(const ModelConfig& cfg, ParamStore<T>& params, SgdState<T>& opt, const PointBatch<T>& batch,
                  double lr, double momentum, std::mt19937_64* dropout_rng,
                  std::vector<std::size_t>* predictions = nullptr) {
  Tape<T> tape;
  TapeScope<T> scope(tape);
  ForwardContext<T> ctx;
  ctx.train = true;
  ctx.dropout_rng = dropout_rng;
  params.zero_grad();
  auto logits = model_forward(batch.features, cfg, params, ctx);
  auto loss = cross_entropy(logits, std::span<const std::size_t>(batch.labels));
  const double value = static_cast<double>(loss.item());
  if (predictions) *predictions = argmax_rows(logits);
  if (!std::isfinite(value)) return value;
  tape.backward(loss);
  sgd_momentum_step(params, opt, lr, momentum);
  return value;
}

/// Eval-mode logits without recording a tape.
template <typename T>
Tensor<T> infer(const ModelConfig& cfg, const ParamStore<T>& params, const Tensor<T>& x) {
  ForwardContext<T> ctx;
  return model_forward(x, cfg, params, ctx);
}

/// Eval-mode metrics over `indices`. With `keep_n`, every cloud is first
/// subsampled to keep_n points using the "point_dropout" stream of `seed`.
template <typename T>
Metrics evaluate(const ModelConfig& cfg, const ParamStore<T>& params, const Dataset& ds,
                 std::span<const std::size_t> indices, std::size_t batch_size,
                 std::optional<std::size_t> keep_n = std::nullopt, std::uint64_t seed = 0) {
  ConfusionMatrix cm(cfg.num_outputs);
  for (std::size_t start = 0; start < indices.size(); start += batch_size) {
    const auto chunk = indices.subspan(start, std::min(batch_size, indices.size() - start));
    auto batch = make_batch<T>(ds, chunk);
    if (keep_n) {
      auto rng = make_rng(seed, "point_dropout", {*keep_n, start});
      batch = random_point_dropout_eval(batch, *keep_n, rng);
    }
    const auto pred = argmax_rows(infer(cfg, params, batch.features));
    cm.add(pred, batch.labels);
  }
  return cm.metrics();
}

// ---------------------------------------------------------------------------
// Runs and reports

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double lr = 0;
  double train_loss = 0;
  double train_acc = 0;  // eval-mode accuracy on the training split after the epoch
  Metrics test;
  bool operator==(const EpochRecord&) const = default;
};

struct ResolutionRecord {
  std::size_t points = 0;
  Metrics test;
  bool operator==(const ResolutionRecord&) const = default;
};

struct RunReport {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  Metrics best_test;
  std::vector<ResolutionRecord> resolutions;  // final model at full N, then each requested count

  const EpochRecord& final_epoch() const { return epochs.back(); }
  bool operator==(const RunReport&) const = default;
};

template <typename T>
struct RunResult {
  RunConfig config;  // resolved
  RunReport report;
  ParamStore<T> final_params;
  ParamStore<T> best_params;
};

struct RunHooks {
  std::ostream* log = nullptr;
  std::string checkpoint_dir;  // best.ckpt / final.ckpt written here when set
};

inline constexpr const char* kReportFields =
    "epoch\tlr\ttrain_loss\ttrain_acc\ttest_acc\ttest_mean_class_acc\ttest_miou";

/// Trains a resolved config on `ds` with the given split.
template <typename T>
RunResult<T> train_run(const RunConfig& rc, const Dataset& ds, const Split& split, const RunHooks& hooks = {}) {
  rc.validate();
  const auto& tc = rc.train;
  const auto& mc = rc.model;
  RunResult<T> res{rc, {}, build_model_params<T>(mc, derive_seed(tc.seed, "init")), {}};
  auto& params = res.final_params;
  res.best_params = params.clone();
  SgdState<T> opt;
  std::vector<std::size_t> order = split.train;
  double best_acc = -1;

  for (std::size_t e = 0; e < tc.epochs; ++e) {
    const double lr = cosine_lr(e, tc.epochs, tc.lr0, tc.lr_min);
    auto shuffle_rng = make_rng(tc.seed, "shuffle", {e});
    auto aug_rng = make_rng(tc.seed, "augment", {e});
    auto drop_rng = make_rng(tc.seed, "dropout", {e});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t start = 0; start < order.size(); start += tc.batch_size) {
      const std::span<const std::size_t> chunk(order.data() + start, std::min(tc.batch_size, order.size() - start));
      auto batch = make_batch<T>(ds, chunk);
      if (tc.augment) batch = augment(batch, tc.aug, aug_rng);
      const double loss = train_step(mc, params, opt, batch, lr, tc.momentum, &drop_rng);
      if (!std::isfinite(loss))
        throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(e + 1));
      loss_sum += loss * static_cast<double>(chunk.size());
      seen += chunk.size();
    }
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.lr = lr;
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.train_acc = evaluate(mc, params, ds, split.train, tc.batch_size).overall_acc;
    rec.test = evaluate(mc, params, ds, split.test, tc.batch_size);
    res.report.epochs.push_back(rec);
    if (rec.test.overall_acc > best_acc) {
      best_acc = rec.test.overall_acc;
      res.report.best_epoch = rec.epoch;
      res.report.best_test = rec.test;
      res.best_params = params.clone();
      if (!hooks.checkpoint_dir.empty())
        save_params(params, mc, (std::filesystem::path(hooks.checkpoint_dir) / "best.ckpt").string());
    }
    if (hooks.log)
      *hooks.log << "epoch " << rec.epoch << "  lr " << kv::num(lr) << "  loss " << std::fixed
                 << std::setprecision(4) << rec.train_loss << "  train_acc " << rec.train_acc << "  test_acc "
                 << rec.test.overall_acc << std::defaultfloat << std::endl;
    if (tc.stop_at_perfect_train && rec.train_acc == 1.0) break;
  }

  res.report.resolutions.push_back({ds.samples[split.test.front()].num_points,
                                    res.report.final_epoch().test});
  for (auto n : tc.point_dropout_eval_sizes)
    res.report.resolutions.push_back({n, evaluate(mc, params, ds, split.test, tc.batch_size, n, tc.seed)});
  if (!hooks.checkpoint_dir.empty())
    save_params(params, mc, (std::filesystem::path(hooks.checkpoint_dir) / "final.ckpt").string());
  return res;
}

/// Line-oriented report: a field-order comment, one tab-separated record per
/// epoch, then "# resolution" records (points, acc, mean class acc, mIoU).
inline void write_report(std::ostream& os, const RunReport& r) {
  os << "# " << kReportFields << '\n';
  for (const auto& e : r.epochs)
    os << e.epoch << '\t' << kv::num(e.lr) << '\t' << kv::num(e.train_loss) << '\t' << kv::num(e.train_acc) << '\t'
       << kv::num(e.test.overall_acc) << '\t' << kv::num(e.test.mean_class_acc) << '\t' << kv::num(e.test.miou)
       << '\n';
  os << "# best_epoch\t" << r.best_epoch << '\n';
  for (const auto& res : r.resolutions)
    os << "# resolution\t" << res.points << '\t' << kv::num(res.test.overall_acc) << '\t'
       << kv::num(res.test.mean_class_acc) << '\t' << kv::num(res.test.miou) << '\n';
}

inline void write_summary(std::ostream& os, const RunReport& r) {
  const auto& f = r.final_epoch();
  os << std::fixed << std::setprecision(4);
  os << "epochs run          " << r.epochs.size() << '\n'
     << "final train loss    " << f.train_loss << '\n'
     << "final train acc     " << f.train_acc << '\n'
     << "final test acc      " << f.test.overall_acc << '\n'
     << "final mean class    " << f.test.mean_class_acc << '\n'
     << "final test mIoU     " << f.test.miou << '\n'
     << "best epoch          " << r.best_epoch << " (test acc " << r.best_test.overall_acc << ")\n";
  if (!r.resolutions.empty()) {
    os << "\npoints  test_acc  mean_class  mIoU\n";
    for (const auto& res : r.resolutions)
      os << std::setw(6) << res.points << "  " << res.test.overall_acc << "    " << res.test.mean_class_acc << "      "
         << res.test.miou << '\n';
  }
  os << std::defaultfloat;
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationAxes {
  bool graph_mode = false;                      // dynamic vs static graph
  std::vector<std::size_t> k_values;            // e.g. {10, 20, 30, 40}
  std::vector<std::size_t> eval_point_counts;   // random point dropout at evaluation
  bool no_locality = false;                     // graph-free input
  std::vector<std::uint64_t> seeds{1};
};

struct AblationRow {
  std::string axis;
  std::string variant;
  std::uint64_t seed = 0;
  double train_acc = 0;
  Metrics test;
  std::size_t epochs_run = 0;
  bool operator==(const AblationRow&) const = default;
};

struct AblationReport {
  std::vector<AblationRow> rows;

  /// Mean test accuracy of one (axis, variant) over all seeds.
  double mean_test_acc(const std::string& axis, const std::string& variant) const {
    double s = 0;
    std::size_t n = 0;
    for (const auto& r : rows)
      if (r.axis == axis && r.variant == variant) {
        s += r.test.overall_acc;
        ++n;
      }
    if (n == 0) throw ConfigError("no ablation rows for " + axis + "/" + variant);
    return s / static_cast<double>(n);
  }
  std::size_t count(const std::string& axis) const {
    std::size_t n = 0;
    for (const auto& r : rows) n += r.axis == axis;
    return n;
  }
  bool operator==(const AblationReport&) const = default;
};

/// Trains every variant along the requested axes from `base` (one factor at a
/// time), each with the same seeds, data and split. Identical variants are
/// trained once and shared between axes.
template <typename T>
AblationReport ablation_harness(const RunConfig& base, const AblationAxes& axes, std::ostream* log = nullptr) {
  AblationReport rep;
  for (auto seed : axes.seeds) {
    RunConfig seeded = base;
    seeded.train.seed = seed;
    seeded.train.point_dropout_eval_sizes.clear();
    const auto ds = load_run_dataset(seeded);
    const auto split = run_split(seeded, ds);
    std::map<KeyValues, RunResult<T>> cache;
    auto run = [&](RunConfig rc) -> const RunResult<T>& {
      rc = resolve_against(rc, ds);
      const auto key = rc.to_kv();
      auto it = cache.find(key);
      if (it == cache.end()) {
        if (log) *log << "[seed " << seed << "] training " << to_string(rc.model.graph_mode) << " k=" << rc.model.k
                      << std::endl;
        it = cache.emplace(key, train_run<T>(rc, ds, split)).first;
      }
      return it->second;
    };
    auto add_row = [&](const std::string& axis, const std::string& variant, const RunResult<T>& r) {
      const auto& f = r.report.final_epoch();
      rep.rows.push_back({axis, variant, seed, f.train_acc, f.test, r.report.epochs.size()});
    };

    if (axes.graph_mode)
      for (auto mode : {GraphMode::kDynamic, GraphMode::kStatic}) {
        auto rc = seeded;
        rc.model.graph_mode = mode;
        add_row("graph_mode", to_string(mode), run(rc));
      }
    for (auto k : axes.k_values) {
      auto rc = seeded;
      rc.model.k = k;
      add_row("k", std::to_string(k), run(rc));
    }
    if (axes.no_locality)
      for (auto mode : {seeded.model.graph_mode, GraphMode::kNone}) {
        auto rc = seeded;
        rc.model.graph_mode = mode;
        add_row("locality", mode == GraphMode::kNone ? "none" : "local", run(rc));
      }
    if (!axes.eval_point_counts.empty()) {
      const auto& r = run(seeded);
      const auto mc = resolve_against(seeded, ds).model;
      add_row("points", std::to_string(ds.samples.front().num_points), r);
      for (auto n : axes.eval_point_counts) {
        const auto m = evaluate(mc, r.final_params, ds, split.test, seeded.train.batch_size, n, seed);
        rep.rows.push_back({"points", std::to_string(n), seed, r.report.final_epoch().train_acc, m,
                            r.report.epochs.size()});
      }
    }
  }
  return rep;
}

inline void write_ablation_rows(std::ostream& os, const AblationReport& r) {
  os << "# axis\tvariant\tseed\ttrain_acc\ttest_acc\ttest_mean_class_acc\ttest_miou\tepochs\n";
  for (const auto& row : r.rows)
    os << row.axis << '\t' << row.variant << '\t' << row.seed << '\t' << kv::num(row.train_acc) << '\t'
       << kv::num(row.test.overall_acc) << '\t' << kv::num(row.test.mean_class_acc) << '\t'
       << kv::num(row.test.miou) << '\t' << row.epochs_run << '\n';
}

/// Seed-averaged comparison table, one line per (axis, variant) in first-seen order.
inline void write_ablation_table(std::ostream& os, const AblationReport& r) {
  std::vector<std::pair<std::string, std::string>> keys;
  for (const auto& row : r.rows) {
    std::pair<std::string, std::string> key{row.axis, row.variant};
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
  }
  os << std::left << std::setw(12) << "axis" << std::setw(10) << "variant" << std::right << std::setw(10)
     << "test_acc" << std::setw(12) << "mean_class" << std::setw(8) << "seeds" << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& [axis, variant] : keys) {
    double mc = 0;
    std::size_t n = 0;
    for (const auto& row : r.rows)
      if (row.axis == axis && row.variant == variant) {
        mc += row.test.mean_class_acc;
        ++n;
      }
    os << std::left << std::setw(12) << axis << std::setw(10) << variant << std::right << std::setw(10)
       << r.mean_test_acc(axis, variant) << std::setw(12) << mc / static_cast<double>(n) << std::setw(8) << n << '\n';
  }
  os << std::defaultfloat;
}

}  // namespace cpt
