#pragma once

// The `cpt` command line: gen-data, train, eval, ablate, gradcheck, bench-knn.
// Kept in a header so the tests can drive it in-process.
//
// Exit codes: 0 ok, 1 verification failure, 2 usage/config error,
// 3 numeric divergence.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cpt/checkpoint.hpp"
#include "cpt/gradcheck.hpp"
#include "cpt/trainer.hpp"

namespace cpt::cli {

enum ExitCode : int { kOk = 0, kVerifyFailed = 1, kUsage = 2, kDiverged = 3 };

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  std::uint64_t seed = 0;
  bool seed_given = false;
  std::string preset = "default";
};

/// The tiny double-precision setup the gradient check runs on by default.
inline RunConfig gradcheck_run_config() {
  RunConfig rc;
  rc.model.layer_dims = {8, 8};
  rc.model.interpoint = {true, false};
  rc.model.k = 4;
  rc.model.shared_mlp_dim = 16;
  rc.model.head_mlp_dims = {8};
  rc.model.dropout = 0.0;
  rc.model.num_outputs = 3;
  rc.num_classes_set = true;
  rc.train.points = 16;
  rc.train.batch_size = 2;
  rc.train.dtype = "float64";
  return rc;
}

/// preset → config file → --set overrides → --seed, in that order.
inline RunConfig build_config(const CommonArgs& a, RunConfig base) {
  if (a.preset == "toy") base = toy_run_config();
  else if (a.preset != "default") throw ConfigError("unknown preset '" + a.preset + "' (default, toy)");
  if (!a.config_path.empty()) {
    if (!std::filesystem::exists(a.config_path)) throw ConfigError("config file '" + a.config_path + "' does not exist");
    base.apply(kv::parse_file(a.config_path));
    // Relative manifest paths are taken from the config file's directory.
    if (!base.train.manifest.empty() && std::filesystem::path(base.train.manifest).is_relative()) {
      const auto dir = std::filesystem::path(a.config_path).parent_path();
      if (!dir.empty()) base.train.manifest = (dir / base.train.manifest).string();
    }
  }
  for (const auto& o : a.overrides) {
    const auto [k, v] = kv::parse_assignment(o);
    base.set(k, v);
  }
  if (a.seed_given) base.train.seed = a.seed;
  base.validate();
  return base;
}

inline std::filesystem::path prepare_out(const std::string& dir) {
  std::filesystem::create_directories(dir);
  return dir;
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p);
  if (!out) throw ConfigError("cannot write '" + p.string() + "'");
  out << text;
}

inline void write_resolved(const std::filesystem::path& dir, const RunConfig& rc) {
  write_text(dir / "config.resolved", kv::format(rc.to_kv()));
}

inline std::vector<std::size_t> parse_sizes(const std::string& what, const std::string& v) {
  return v.empty() ? std::vector<std::size_t>{} : kv::to_size_list(what, v);
}

// ---------------------------------------------------------------------------

inline int cmd_gen_data(const RunConfig& rc, const std::filesystem::path& out, std::ostream& os) {
  if (!rc.train.manifest.empty()) throw ConfigError("gen-data generates synthetic data; unset 'manifest'");
  const auto ds = load_run_dataset(rc);
  write_dataset(ds, out.string());
  write_resolved(out, rc);
  os << "wrote " << ds.samples.size() << " clouds (" << ds.num_classes() << " classes) to "
     << (out / "manifest.tsv").string() << '\n';
  return kOk;
}

template <typename T>
int cmd_train(RunConfig rc, const std::filesystem::path& out, std::ostream& os) {
  const auto ds = load_run_dataset(rc);
  rc = resolve_against(rc, ds);
  write_resolved(out, rc);
  const auto split = run_split(rc, ds);
  const auto t0 = std::chrono::steady_clock::now();
  RunHooks hooks{&os, out.string()};
  const auto res = train_run<T>(rc, ds, split, hooks);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  {
    std::ofstream f(out / "report.tsv");
    write_report(f, res.report);
  }
  std::ostringstream summary;
  write_summary(summary, res.report);
  write_text(out / "summary.txt", summary.str());
  os << '\n' << summary.str() << "wall time           " << std::fixed << std::setprecision(1) << secs << " s\n"
     << std::defaultfloat;
  return kOk;
}

template <typename T>
int cmd_eval(RunConfig rc, const std::string& checkpoint, std::vector<std::size_t> counts,
             const std::filesystem::path& out, std::ostream& os) {
  if (checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  auto ck = load_params<T>(checkpoint);
  const auto ds = load_run_dataset(rc);
  // The network comes from the checkpoint; data, split and seed from the config.
  rc.model = ck.config;
  rc.num_classes_set = true;
  if (counts.empty()) counts = rc.train.point_dropout_eval_sizes;
  rc.train.point_dropout_eval_sizes = counts;
  try {
    rc = resolve_against(rc, ds);
  } catch (const ConfigError& e) {
    throw ConfigError(std::string("checkpoint is incompatible with the data: ") + e.what());
  }
  if (rc.model.k != ck.config.k) throw ConfigError("checkpoint k = " + std::to_string(ck.config.k) + " is too large for the data");
  check_param_layout(ck.params, rc.model);
  write_resolved(out, rc);
  const auto split = run_split(rc, ds);
  std::vector<ResolutionRecord> rows;
  rows.push_back({ds.samples[split.test.front()].num_points,
                  evaluate(rc.model, ck.params, ds, split.test, rc.train.batch_size)});
  for (auto n : counts)
    rows.push_back({n, evaluate(rc.model, ck.params, ds, split.test, rc.train.batch_size, n, rc.train.seed)});
  std::ostringstream table;
  table << "# points\ttest_acc\ttest_mean_class_acc\ttest_miou\n";
  for (const auto& r : rows)
    table << r.points << '\t' << kv::num(r.test.overall_acc) << '\t' << kv::num(r.test.mean_class_acc) << '\t'
          << kv::num(r.test.miou) << '\n';
  write_text(out / "eval.tsv", table.str());
  os << table.str();
  return kOk;
}

template <typename T>
int cmd_ablate(RunConfig rc, AblationAxes axes, const std::filesystem::path& out, std::ostream& os) {
  write_resolved(out, rc);
  const auto rep = ablation_harness<T>(rc, axes, &os);
  {
    std::ofstream f(out / "ablation_rows.tsv");
    write_ablation_rows(f, rep);
  }
  std::ostringstream table;
  write_ablation_table(table, rep);
  write_text(out / "ablation_table.txt", table.str());
  os << '\n' << table.str();
  return kOk;
}

template <typename T>
int cmd_gradcheck(RunConfig rc, const GradcheckOptions& opt, double tol, const std::filesystem::path& out,
                  std::ostream& os) {
  if (rc.model.task != Task::kClassification) throw ConfigError("gradcheck runs the classification loss");
  rc.num_classes_set = true;
  rc.validate();
  write_resolved(out, rc);
  const std::size_t B = rc.train.batch_size, N = rc.train.points, F = rc.model.in_features;
  if (rc.model.locality()) detail::check_k(rc.model.k, N, KnnPolicy::kFail);
  auto rng = make_rng(rc.train.seed, "gradcheck");
  std::normal_distribution<double> gauss;
  Tensor<T> x({B, N, F});
  for (auto& v : x.mutable_data()) v = static_cast<T>(gauss(rng));
  std::vector<std::size_t> targets(B);
  for (std::size_t b = 0; b < B; ++b) targets[b] = b % rc.model.num_outputs;
  auto params = build_model_params<T>(rc.model, derive_seed(rc.train.seed, "init"));
  const auto rep = gradcheck_model<T>(rc.model, params, x, targets, opt);

  std::ostringstream table;
  table << std::left << std::setw(32) << "# tensor" << std::right << std::setw(8) << "numel" << std::setw(14)
        << "worst_rel" << std::setw(8) << "status" << '\n';
  for (const auto& e : rep.entries)
    table << std::left << std::setw(32) << e.name << std::right << std::setw(8) << e.numel << std::setw(14)
          << std::scientific << std::setprecision(3) << e.worst_rel << std::defaultfloat << std::setw(8)
          << (e.worst_rel < tol ? "ok" : "FAIL") << '\n';
  write_text(out / "gradcheck.txt", table.str());
  os << table.str();
  const auto bad = rep.failing(tol);
  os << "max relative error " << std::scientific << std::setprecision(3) << rep.max_rel() << std::defaultfloat
     << " over " << rep.entries.size() << " tensors (tolerance " << tol << ")\n";
  if (bad.empty()) return kOk;
  os << "FAILED:";
  for (const auto& n : bad) os << ' ' << n;
  os << '\n';
  return kVerifyFailed;
}

inline int cmd_bench_knn(const std::vector<std::size_t>& sizes, const std::vector<std::size_t>& ks,
                         std::uint64_t seed, const std::filesystem::path& out, std::ostream& os) {
  if (sizes.empty() || ks.empty()) throw ConfigError("bench-knn needs at least one size and one k");
  std::ostringstream table;
  table << "# points\tk\tbrute_ms\tkdtree_ms\tspeedup\tequal\n";
  bool all_equal = true;
  for (auto n : sizes)
    for (auto k : ks) {
      if (k >= n) throw ConfigError("bench-knn: k = " + std::to_string(k) + " needs more than " + std::to_string(n) + " points");
      auto rng = make_rng(seed, "bench_knn", {n, k});
      std::uniform_real_distribution<double> u(-1, 1);
      Tensor<double> pts({1, n, 3});
      for (auto& v : pts.mutable_data()) v = u(rng);
      auto time = [](auto&& f) {
        const auto t0 = std::chrono::steady_clock::now();
        auto g = f();
        return std::pair{std::move(g), std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count()};
      };
      const auto [brute, tb] = time([&] { return knn_graph(pts, k); });
      const auto [tree, tt] = time([&] { return accelerate_knn(pts, k); });
      const bool eq = brute == tree;
      all_equal = all_equal && eq;
      table << n << '\t' << k << '\t' << std::fixed << std::setprecision(3) << tb << '\t' << tt << '\t'
            << std::setprecision(2) << tb / std::max(tt, 1e-9) << '\t' << (eq ? "yes" : "NO") << std::defaultfloat
            << '\n';
    }
  write_text(out / "bench_knn.tsv", table.str());
  os << table.str();
  return all_equal ? kOk : kVerifyFailed;
}

// ---------------------------------------------------------------------------

template <typename F>
int dispatch_dtype(const RunConfig& rc, F&& f) {
  if (rc.train.dtype == "float64") return f(double{});
  return f(float{});
}

/// Parses argv and runs one subcommand, mapping errors to exit codes.
inline int run(int argc, const char* const* argv, std::ostream& os = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Convolutional point Transformer: data, training, evaluation and verification"};
  app.require_subcommand(1);
  CommonArgs common;
  auto add_common = [&](CLI::App* sub, bool with_preset = true) {
    sub->add_option("--config", common.config_path, "key = value config file");
    sub->add_option("--set", common.overrides, "override one key (repeatable)")->type_name("KEY=VALUE");
    sub->add_option("--out", common.out_dir, "output directory")->capture_default_str();
    sub->add_option_function<std::uint64_t>("--seed", [&](std::uint64_t s) {
      common.seed = s;
      common.seed_given = true;
    }, "run seed");
    if (with_preset) sub->add_option("--preset", common.preset, "base settings: default or toy")->capture_default_str();
  };

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset and its manifest");
  add_common(gen);
  auto* train = app.add_subcommand("train", "train a model and write report, summary and checkpoints");
  add_common(train);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint at full and reduced resolutions");
  add_common(eval);
  std::string checkpoint, eval_points;
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval->add_option("--points", eval_points, "comma-separated kept-point counts");
  auto* ablate = app.add_subcommand("ablate", "train variants along ablation axes");
  add_common(ablate);
  std::string axes_list = "graph_mode,k,locality,points", k_values = "10,20,30,40", seeds_list = "1,2,3",
              ablate_points = "64";
  ablate->add_option("--axes", axes_list, "graph_mode, k, locality, points")->capture_default_str();
  ablate->add_option("--k-values", k_values, "k sweep")->capture_default_str();
  ablate->add_option("--seeds", seeds_list, "seeds every variant is trained with")->capture_default_str();
  ablate->add_option("--points", ablate_points, "kept-point counts for the points axis")->capture_default_str();
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every parameter gradient");
  add_common(grad, false);
  GradcheckOptions gopt;
  double tol = 1e-4;
  grad->add_option("--step", gopt.h, "initial central-difference step")->capture_default_str();
  grad->add_option("--tol", tol, "maximum accepted relative error")->capture_default_str();
  auto* bench = app.add_subcommand("bench-knn", "time brute-force against kd-tree kNN and check equality");
  std::string sizes = "256,1024,4096", ks = "10,20,40";
  std::string bench_out = "out";
  std::uint64_t bench_seed = 1;
  bench->add_option("--sizes", sizes, "cloud sizes")->capture_default_str();
  bench->add_option("--ks", ks, "neighbour counts")->capture_default_str();
  bench->add_option("--out", bench_out, "output directory")->capture_default_str();
  bench->add_option("--seed", bench_seed, "seed for the random clouds")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, os, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (bench->parsed())
      return cmd_bench_knn(parse_sizes("sizes", sizes), parse_sizes("ks", ks), bench_seed, prepare_out(bench_out), os);

    const bool is_grad = grad->parsed();
    const auto rc = build_config(common, is_grad ? gradcheck_run_config() : RunConfig{});
    const auto out = prepare_out(common.out_dir);
    if (gen->parsed()) return cmd_gen_data(rc, out, os);
    if (train->parsed())
      return dispatch_dtype(rc, [&](auto t) { return cmd_train<decltype(t)>(rc, out, os); });
    if (eval->parsed()) {
      const auto counts = parse_sizes("points", eval_points);
      return dispatch_dtype(rc, [&](auto t) { return cmd_eval<decltype(t)>(rc, checkpoint, counts, out, os); });
    }
    if (ablate->parsed()) {
      AblationAxes axes;
      for (const auto& a : kv::split_list(axes_list)) {
        if (a == "graph_mode") axes.graph_mode = true;
        else if (a == "k") axes.k_values = parse_sizes("k-values", k_values);
        else if (a == "locality") axes.no_locality = true;
        else if (a == "points") axes.eval_point_counts = parse_sizes("points", ablate_points);
        else throw ConfigError("unknown ablation axis '" + a + "'");
      }
      axes.seeds.clear();
      for (const auto& s : kv::split_list(seeds_list)) axes.seeds.push_back(kv::to_u64("seeds", s));
      if (axes.seeds.empty()) throw ConfigError("ablate needs at least one seed");
      return dispatch_dtype(rc, [&](auto t) { return cmd_ablate<decltype(t)>(rc, axes, out, os); });
    }
    if (is_grad) return dispatch_dtype(rc, [&](auto t) { return cmd_gradcheck<decltype(t)>(rc, gopt, tol, out, os); });
  } catch (const NumericError& e) {
    err << "error: " << e.what() << '\n';
    return kDiverged;
  } catch (const CheckpointError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::invalid_argument& e) {  // ConfigError, DimensionError
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kUsage;
  }
  return kUsage;
}

}  // namespace cpt::cli
