// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero when any fails. Pass criterion numbers to run a subset.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>

#include "cpt/alloc.hpp"
#include "cpt/cli.hpp"
#include "cpt/cpt.hpp"

using namespace cpt;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Tensor<double> gaussian(Shape shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g;
  Tensor<double> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = g(rng);
  return t;
}

// O(N²) oracle: every pairwise distance, full sort by (distance, index).
std::vector<std::size_t> full_sort_knn(const Tensor<double>& pts, std::size_t k) {
  const std::size_t N = pts.dim(1), F = pts.dim(2);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < N; ++i) {
    std::vector<std::pair<double, std::size_t>> all;
    for (std::size_t j = 0; j < N; ++j) {
      if (j == i) continue;
      double d = 0;
      for (std::size_t c = 0; c < F; ++c) d += std::pow(pts.at({0, i, c}) - pts.at({0, j, c}), 2);
      all.emplace_back(d, j);
    }
    std::sort(all.begin(), all.end());
    for (std::size_t q = 0; q < k; ++q) out.push_back(all[q].second);
  }
  return out;
}

Tensor<double> permute_points(const Tensor<double>& x, const std::vector<std::size_t>& perm) {
  Tensor<double> out(x.shape());
  for (std::size_t b = 0; b < x.dim(0); ++b)
    for (std::size_t i = 0; i < x.dim(1); ++i)
      for (std::size_t c = 0; c < x.dim(2); ++c) out.at({b, i, c}) = x.at({b, perm[i], c});
  return out;
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(p.begin(), p.end(), rng);
  return p;
}

// The toy network at reduced width for the structural checks.
ModelConfig property_model(Task task) {
  auto c = toy_run_config().model;
  c.task = task;
  c.num_outputs = task == Task::kClassification ? 3 : 6;
  c.shared_mlp_dim = 64;
  c.head_mlp_dims = {32};
  return c;
}

struct Outcome {
  bool pass;
  std::string detail;
};

// Shared between the toy run (6) and the point-dropout check (8).
struct ToyRun {
  bool done = false;
  RunReport report;
  double seconds = 0;
};
ToyRun toy;

const ToyRun& toy_run() {
  if (!toy.done) {
    const auto t0 = Clock::now();
    auto rc = toy_run_config();
    const auto ds = load_run_dataset(rc);
    rc = resolve_against(rc, ds);
    toy.report = train_run<float>(rc, ds, run_split(rc, ds)).report;
    toy.seconds = seconds_since(t0);
    toy.done = true;
  }
  return toy;
}

// ---------------------------------------------------------------------------

Outcome knn_equivalence() {
  const auto t0 = Clock::now();
  std::size_t mismatches = 0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto p = gaussian({1, 64, 3}, 1000 + s);
    for (std::size_t k : {1u, 4u, 20u}) {
      const auto oracle = full_sort_knn(p, k);
      mismatches += knn_graph(p, k).neighbor_idx != oracle;
      mismatches += accelerate_knn(p, k).neighbor_idx != oracle;
    }
  }
  const double t = seconds_since(t0);
  std::ostringstream os;
  os << "600 comparisons, " << mismatches << " mismatches, " << t << " s";
  return {mismatches == 0 && t < 10.0, os.str()};
}

Outcome gradient_fidelity() {
  const auto t0 = Clock::now();
  const auto rc = cli::gradcheck_run_config();
  auto params = build_model_params<double>(rc.model, derive_seed(1, "init"));
  const auto x = gaussian({2, 16, 3}, 2);
  const std::vector<std::size_t> targets{0, 1};
  const auto rep = gradcheck_model<double>(rc.model, params, x, targets);
  const double t = seconds_since(t0);
  std::ostringstream os;
  os << rep.entries.size() << " tensors, max rel err " << rep.max_rel() << ", " << t << " s";
  return {rep.max_rel() < 1e-4 && rep.entries.size() == params.size() && t < 60.0, os.str()};
}

Outcome permutation_symmetry() {
  const auto cls = property_model(Task::kClassification), seg = property_model(Task::kSegmentation);
  const auto pc = build_model_params<double>(cls, 3), ps = build_model_params<double>(seg, 4);
  double worst_cls = 0, worst_seg = 0;
  bool argmax_same = true;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto x = gaussian({1, 128, 3}, 2000 + s);
    const auto perm = shuffled(128, 3000 + s);
    const auto xp = permute_points(x, perm);
    ForwardContext<double> a, b, c, d;
    const auto y = model_forward(x, cls, pc, a), yp = model_forward(xp, cls, pc, b);
    for (std::size_t i = 0; i < y.numel(); ++i) worst_cls = std::max(worst_cls, std::abs(y.data()[i] - yp.data()[i]));
    argmax_same = argmax_same && argmax_rows(y) == argmax_rows(yp);
    const auto z = model_forward(x, seg, ps, c), zp = model_forward(xp, seg, ps, d);
    for (std::size_t i = 0; i < 128; ++i)
      for (std::size_t q = 0; q < 6; ++q)
        worst_seg = std::max(worst_seg, std::abs(zp.at({0, i, q}) - z.at({0, perm[i], q})));
  }
  std::ostringstream os;
  os << "classification max |Δ| " << worst_cls << ", segmentation max |Δ| " << worst_seg
     << (argmax_same ? ", argmax unchanged" : ", argmax CHANGED");
  return {worst_cls < 1e-4 && worst_seg < 1e-4 && argmax_same, os.str()};
}

Outcome attention_rows() {
  double worst = 0;
  std::size_t feature_maps = 0, point_maps = 0;
  for (std::size_t heads : {1u, 2u}) {
    auto cfg = property_model(Task::kClassification);
    cfg.heads = heads;
    const auto p = build_model_params<double>(cfg, 5 + heads);
    for (std::uint64_t s = 0; s < 10; ++s) {
      const std::size_t N = 40 + 8 * s;
      std::vector<Tensor<double>> log;
      ForwardContext<double> ctx;
      ctx.attention_log = &log;
      model_forward(gaussian({2, N, 3}, 4000 + s), cfg, p, ctx);
      for (const auto& a : log) {
        const std::size_t L = a.dim(-1);
        (L == N ? point_maps : feature_maps) += 1;
        for (std::size_t r = 0; r < a.numel() / L; ++r) {
          double sum = 0;
          for (std::size_t j = 0; j < L; ++j) sum += a.data()[r * L + j];
          worst = std::max(worst, std::abs(sum - 1.0));
        }
      }
    }
  }
  std::ostringstream os;
  os << feature_maps << " feature-wise and " << point_maps << " InterPoint maps, max |row sum − 1| " << worst;
  return {worst <= 1e-6 && feature_maps > 0 && point_maps > 0, os.str()};
}

Outcome batch_independence() {
  bool all = true;
  std::size_t checked = 0;
  for (auto task : {Task::kClassification, Task::kSegmentation}) {
    const auto cfg = property_model(task);
    for (bool dbl : {false, true}) {
      auto check = [&](auto zero) {
        using T = decltype(zero);
        const auto p = build_model_params<T>(cfg, 8);
        const auto xd = gaussian({5, 64, 3}, 9);
        Tensor<T> x(xd.shape());
        for (std::size_t i = 0; i < x.numel(); ++i) x.mutable_data()[i] = static_cast<T>(xd.data()[i]);
        ForwardContext<T> ctx;
        const auto y = model_forward(x, cfg, p, ctx);
        for (std::size_t b = 0; b < 5; ++b) {
          ForwardContext<T> one;
          const auto yb = model_forward(slice(x, 0, b, b + 1), cfg, p, one);
          const auto row = slice(y, 0, b, b + 1);
          all = all && std::equal(yb.data().begin(), yb.data().end(), row.data().begin(), row.data().end());
          ++checked;
        }
      };
      if (dbl) check(0.0);
      else check(0.0f);
    }
  }
  return {all, std::to_string(checked) + " items compared bit-for-bit (both tasks, 32- and 64-bit)"};
}

Outcome toy_overfit() {
  const auto& r = toy_run();
  const auto& f = r.report.final_epoch();
  std::ostringstream os;
  os << "train acc " << f.train_acc << " after " << r.report.epochs.size() << " epochs, test acc "
     << f.test.overall_acc << ", " << r.seconds << " s";
  return {f.train_acc == 1.0 && r.report.epochs.size() <= 300 && f.test.overall_acc >= 0.9 && r.seconds < 300,
          os.str()};
}

Outcome ablation_structure() {
  auto base = toy_run_config();
  AblationAxes trends;
  trends.graph_mode = true;
  trends.no_locality = true;
  trends.seeds = {1, 2, 3};
  const auto a = ablation_harness<float>(base, trends);
  AblationAxes sweep;
  sweep.k_values = {10, 20, 30, 40};
  sweep.seeds = {1};
  const auto b = ablation_harness<float>(base, sweep);

  bool ok = b.count("k") == 4 && a.count("graph_mode") == 6 && a.count("locality") == 6;
  for (std::size_t i = 0; i < b.rows.size(); ++i)
    ok = ok && b.rows[i].variant == std::to_string(sweep.k_values[i]);
  const double dyn = a.mean_test_acc("graph_mode", "dynamic"), sta = a.mean_test_acc("graph_mode", "static");
  const double loc = a.mean_test_acc("locality", "local"), none = a.mean_test_acc("locality", "none");
  std::ostringstream os;
  os << "k rows";
  for (const auto& r : b.rows) os << ' ' << r.variant << ':' << r.test.overall_acc;
  os << "; dynamic " << dyn << " vs static " << sta << "; local " << loc << " vs none " << none;
  return {ok && dyn >= sta && loc >= none, os.str()};
}

Outcome point_dropout() {
  const auto& r = toy_run();
  const auto& res = r.report.resolutions;
  if (res.size() < 2 || res[1].points != 64) return {false, "no 64-point evaluation in the report"};
  const double full = res[0].test.overall_acc, reduced = res[1].test.overall_acc;
  std::ostringstream os;
  os << "128 points " << full << ", 64 points " << reduced << " (ratio " << (full > 0 ? reduced / full : 0) << ")";
  return {reduced >= 0.8 * full, os.str()};
}

Outcome checkpoint_roundtrip() {
  const auto path = (std::filesystem::temp_directory_path() / "cpt_acceptance.ckpt").string();
  bool all = true;
  for (auto task : {Task::kClassification, Task::kSegmentation}) {
    const auto cfg = property_model(task);
    const auto p = build_model_params<float>(cfg, 10);
    save_params(p, cfg, path);
    const auto q = load_params<float>(path, cfg);
    const auto xd = gaussian({3, 64, 3}, 11);
    Tensor<float> x(xd.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) x.mutable_data()[i] = static_cast<float>(xd.data()[i]);
    ForwardContext<float> a, b;
    const auto ya = model_forward(x, cfg, p, a), yb = model_forward(x, cfg, q, b);
    all = all && std::equal(ya.data().begin(), ya.data().end(), yb.data().begin(), yb.data().end());
  }
  std::filesystem::remove(path);
  return {all, "classification and segmentation logits bit-identical after reload"};
}

Outcome schedule_and_momentum() {
  const double lr0 = 0.01, lr_min = 1e-4;
  bool ok = cosine_lr(0, 300, lr0, lr_min) == lr0 && cosine_lr(300, 300, lr0, lr_min) == lr_min;
  ok = ok && std::abs(cosine_lr(150, 300, lr0, lr_min) - (lr0 + lr_min) / 2) < 1e-15;
  for (std::size_t e = 1; e <= 300; ++e) ok = ok && cosine_lr(e, 300, lr0, lr_min) <= cosine_lr(e - 1, 300, lr0, lr_min);
  // v ← μv + g; θ ← θ − lr·v, with θ = 0, g = 1, lr = 1, μ = 0.9: (v, θ) = (1, −1) then (1.9, −2.9).
  std::vector<double> th{0.0}, g{1.0}, v{0.0};
  sgd_momentum_step(std::span<double>(th), std::span<const double>(g), std::span<double>(v), 1.0, 0.9);
  ok = ok && v[0] == 1.0 && th[0] == -1.0;
  sgd_momentum_step(std::span<double>(th), std::span<const double>(g), std::span<double>(v), 1.0, 0.9);
  ok = ok && v[0] == 1.9 && th[0] == -2.9;
  return {ok, "cosine endpoints/midpoint/monotone, momentum recurrence hand values"};
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"knn oracle equivalence", knn_equivalence},
      {"gradient fidelity", gradient_fidelity},
      {"permutation invariance/equivariance", permutation_symmetry},
      {"attention row normalisation", attention_rows},
      {"batch independence", batch_independence},
      {"toy overfit", toy_overfit},
      {"ablation structure and trends", ablation_structure},
      {"point-dropout robustness", point_dropout},
      {"checkpoint round trip", checkpoint_roundtrip},
      {"scheduler/optimizer contracts", schedule_and_momentum},
  };
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    Outcome o{false, ""};
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  " << (i + 1) << ". " << criteria[i].first << " — " << o.detail
              << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
