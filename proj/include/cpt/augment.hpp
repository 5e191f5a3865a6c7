#pragma once

// Point-cloud preprocessing: unit-sphere rescaling, train-time jitter/scale
// augmentation, and random point subsampling for resolution studies.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <span>
#include <vector>

#include "cpt/graph.hpp"

namespace cpt {

/// Centres the XYZ channels of one cloud (N × f, row-major) at the origin and
/// scales so the farthest point has norm 1. Other channels are untouched.
template <typename T>
void unit_sphere_normalize_inplace(std::span<T> cloud, std::size_t f) {
  if (f < 3) throw DimensionError("unit_sphere_normalize: need at least 3 channels");
  const std::size_t n = cloud.size() / f;
  if (n == 0) throw ConfigError("unit_sphere_normalize: empty cloud");
  double c[3] = {0, 0, 0};
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) c[a] += static_cast<double>(cloud[i * f + a]);
  for (double& v : c) v /= static_cast<double>(n);
  double r = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0;
    for (int a = 0; a < 3; ++a) {
      const double d = static_cast<double>(cloud[i * f + a]) - c[a];
      s += d * d;
    }
    r = std::max(r, s);
  }
  r = std::sqrt(r);
  if (!(r > 0)) throw ConfigError("unit_sphere_normalize: all points coincide (zero radius)");
  for (std::size_t i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a)
      cloud[i * f + a] = static_cast<T>((static_cast<double>(cloud[i * f + a]) - c[a]) / r);
}

/// Rescales every cloud of (N, f) or (B, N, f) points to the unit sphere.
template <typename T>
Tensor<T> unit_sphere_normalize(const Tensor<T>& points) {
  if (points.rank() != 2 && points.rank() != 3)
    throw DimensionError("unit_sphere_normalize: expected (N, f) or (B, N, f), got " + shape_str(points.shape()));
  auto out = points.detach();
  const std::size_t f = points.dim(-1);
  const std::size_t per = points.dim(-2) * f;
  auto d = out.mutable_data();
  for (std::size_t off = 0; off < d.size(); off += per) unit_sphere_normalize_inplace(d.subspan(off, per), f);
  return out;
}

struct AugmentConfig {
  double jitter_sigma = 0.01;
  double jitter_clip = 0.05;
  double scale_lo = 0.8;
  double scale_hi = 1.25;

  bool operator==(const AugmentConfig&) const = default;
};

/// Per-cloud uniform scale in [scale_lo, scale_hi], then per-coordinate
/// Gaussian jitter clipped to ±jitter_clip, on the XYZ channels. Labels untouched.
template <typename T, typename Rng>
PointBatch<T> augment(const PointBatch<T>& batch, const AugmentConfig& cfg, Rng& rng) {
  if (cfg.scale_lo > cfg.scale_hi) throw ConfigError("augment: scale range is inverted");
  if (cfg.jitter_sigma < 0 || cfg.jitter_clip < 0) throw ConfigError("augment: jitter parameters must be >= 0");
  PointBatch<T> out{batch.features.detach(), batch.labels, batch.per_point_labels};
  const std::size_t B = batch.batch(), N = batch.points(), f = batch.channels();
  auto d = out.features.mutable_data();
  std::uniform_real_distribution<double> scale_dist(cfg.scale_lo, cfg.scale_hi);
  std::normal_distribution<double> noise(0.0, cfg.jitter_sigma > 0 ? cfg.jitter_sigma : 1.0);
  for (std::size_t b = 0; b < B; ++b) {
    const double s = cfg.scale_lo == cfg.scale_hi ? cfg.scale_lo : scale_dist(rng);
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t a = 0; a < 3 && a < f; ++a) {
        T& v = d[(b * N + i) * f + a];
        v = static_cast<T>(static_cast<double>(v) * s);
        if (cfg.jitter_sigma > 0) v += static_cast<T>(std::clamp(noise(rng), -cfg.jitter_clip, cfg.jitter_clip));
      }
  }
  return out;
}

/// Keeps `keep_n` uniformly chosen points per cloud (without replacement),
/// retained in ascending original order; per-point labels follow their points.
template <typename T, typename Rng>
PointBatch<T> random_point_dropout_eval(const PointBatch<T>& batch, std::size_t keep_n, Rng& rng) {
  const std::size_t B = batch.batch(), N = batch.points(), f = batch.channels();
  if (keep_n < 2) throw ConfigError("random_point_dropout_eval: keep_n must be at least 2");
  if (keep_n > N)
    throw ConfigError("random_point_dropout_eval: keep_n = " + std::to_string(keep_n) + " exceeds " +
                      std::to_string(N) + " points");
  PointBatch<T> out{Tensor<T>(Shape{B, keep_n, f}), {}, batch.per_point_labels};
  if (!batch.per_point_labels) out.labels = batch.labels;
  auto src = batch.features.data();
  auto dst = out.features.mutable_data();
  std::vector<std::size_t> idx(N);
  for (std::size_t b = 0; b < B; ++b) {
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // Partial Fisher-Yates: the first keep_n slots become a uniform sample.
    for (std::size_t i = 0; i < keep_n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, N - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep_n));
    for (std::size_t i = 0; i < keep_n; ++i) {
      std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((b * N + idx[i]) * f), f,
                  dst.begin() + static_cast<std::ptrdiff_t>((b * keep_n + i) * f));
      if (batch.per_point_labels) out.labels.push_back(batch.labels[b * N + idx[i]]);
    }
  }
  return out;
}

}  // namespace cpt
