#pragma once

// Central finite-difference checks of tape gradients, per parameter tensor.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "cpt/model.hpp"
#include "cpt/train.hpp"

namespace cpt {

struct GradcheckEntry {
  std::string name;
  std::size_t numel = 0;
  double worst_rel = 0;       // max over elements of |a − n| / max(|a|, |n|, floor)
  std::size_t worst_index = 0;
  double analytic = 0;        // values at the worst element
  double numeric = 0;
  std::size_t refined = 0;    // elements that needed a step below h
};

struct GradcheckReport {
  std::vector<GradcheckEntry> entries;
  double h = 0;

  double max_rel() const {
    double m = 0;
    for (const auto& e : entries) m = std::max(m, e.worst_rel);
    return m;
  }
  std::size_t refined() const {
    std::size_t n = 0;
    for (const auto& e : entries) n += e.refined;
    return n;
  }
  std::vector<std::string> failing(double tol) const {
    std::vector<std::string> out;
    for (const auto& e : entries)
      if (!(e.worst_rel < tol)) out.push_back(e.name);
    return out;
  }
};

struct GradcheckOptions {
  double h = 1e-3;
  double min_h = 1e-7;
  double floor = 1e-6;        // magnitudes below this are compared absolutely
  double consistency = 5e-6;  // accepted |D(h) − D(h/10)|, relative
};

/// Compares the gradient `loss` leaves on every tensor of `params` with the
/// central difference (f(θ + h) − f(θ − h)) / 2h, one element at a time.
///
/// ReLU, max-pooling and kNN make the loss piecewise smooth, so a fixed step
/// can straddle a kink. The difference at h is kept when it agrees with the one
/// at h/10 (up to rounding noise); otherwise the step shrinks tenfold until it
/// does (or min_h).
template <typename T>
GradcheckReport gradcheck(ParamStore<T>& params, const std::function<Tensor<T>()>& loss,
                          const GradcheckOptions& opt = {}) {
  if (!(opt.h > 0) || !(opt.min_h > 0)) throw ConfigError("gradcheck: steps must be positive");
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    params.zero_grad();
    auto l = loss();
    tape.backward(l);
  }
  auto value = [&] { return static_cast<double>(loss().item()); };
  // Cancellation error of a central difference at step h, roughly ε·|f| / h.
  const double noise = 8 * std::numeric_limits<T>::epsilon() * std::max(1.0, std::abs(value()));
  GradcheckReport rep;
  rep.h = opt.h;
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params.at(i);
    const std::vector<T> analytic = p.has_grad() ? std::vector<T>(p.grad().begin(), p.grad().end())
                                                 : std::vector<T>(p.numel(), T(0));
    GradcheckEntry e{params.name(i), p.numel()};
    auto data = p.mutable_data();
    for (std::size_t j = 0; j < data.size(); ++j) {
      const T orig = data[j];
      auto central = [&](double h) {
        data[j] = orig + static_cast<T>(h);
        const double up = value();
        data[j] = orig - static_cast<T>(h);
        const double down = value();
        data[j] = orig;
        return (up - down) / (2 * h);
      };
      double h = opt.h, num = central(h);
      while (h / 10 >= opt.min_h) {
        const double finer = central(h / 10);
        const double scale = std::max({std::abs(num), std::abs(finer), opt.floor});
        if (std::abs(num - finer) <= opt.consistency * scale + noise / (h / 10)) break;
        h /= 10;
        num = finer;
      }
      if (h < opt.h) ++e.refined;
      const double a = static_cast<double>(analytic[j]);
      const double rel = std::abs(a - num) / std::max({std::abs(a), std::abs(num), opt.floor});
      if (rel > e.worst_rel || j == 0) {
        e.worst_rel = rel;
        e.worst_index = j;
        e.analytic = a;
        e.numeric = num;
      }
    }
    rep.entries.push_back(e);
  }
  params.zero_grad();
  return rep;
}

/// The classification loss of `cfg` on a fixed batch, in eval mode. The kNN
/// graphs are piecewise constant in the parameters, so they are taken from the
/// unperturbed forward and held fixed while differencing.
template <typename T>
GradcheckReport gradcheck_model(const ModelConfig& cfg, ParamStore<T>& params, const Tensor<T>& x,
                                std::span<const std::size_t> targets, const GradcheckOptions& opt = {}) {
  std::vector<std::size_t> t(targets.begin(), targets.end());
  std::vector<KnnGraph> graphs;
  {
    ForwardContext<T> ctx;
    ctx.graph_log = &graphs;
    model_forward(x, cfg, params, ctx);
  }
  return gradcheck<T>(
      params,
      [&] {
        ForwardContext<T> ctx;
        ctx.frozen_graphs = &graphs;
        return cross_entropy(model_forward(x, cfg, params, ctx), std::span<const std::size_t>(t));
      },
      opt);
}

}  // namespace cpt
