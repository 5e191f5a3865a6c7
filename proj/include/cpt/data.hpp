#pragma once

// Synthetic primitive datasets, point/label/manifest files, and stratified splits.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "cpt/augment.hpp"
#include "cpt/kv.hpp"
#include "cpt/random.hpp"

namespace cpt {

enum class ShapeFamily { kSphere, kCube, kPlane, kTorus, kCylinder };

inline std::string to_string(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::kSphere: return "sphere";
    case ShapeFamily::kCube: return "cube";
    case ShapeFamily::kPlane: return "plane";
    case ShapeFamily::kTorus: return "torus";
    default: return "cylinder";
  }
}

inline ShapeFamily parse_family(const std::string& s) {
  for (auto f : {ShapeFamily::kSphere, ShapeFamily::kCube, ShapeFamily::kPlane, ShapeFamily::kTorus,
                 ShapeFamily::kCylinder})
    if (to_string(f) == s) return f;
  throw ConfigError("unknown shape family '" + s + "'");
}

/// Local part names per family; part id is the index.
inline std::array<const char*, 2> part_names(ShapeFamily f) {
  switch (f) {
    case ShapeFamily::kSphere: return {"upper", "lower"};
    case ShapeFamily::kCube: return {"cap", "side"};
    case ShapeFamily::kPlane: return {"left", "right"};
    case ShapeFamily::kTorus: return {"outer", "inner"};
    default: return {"cap", "side"};
  }
}

// Primitive dimensions before normalization.
inline constexpr double kTorusMajor = 1.0;
inline constexpr double kTorusMinor = 0.4;
inline constexpr double kCylinderRadius = 0.5;
inline constexpr double kCylinderHeight = 2.0;

struct SyntheticSpec {
  ShapeFamily family = ShapeFamily::kSphere;
  std::size_t points = 1024;
  double noise = 0.0;
  bool segmentation = false;

  void validate() const {
    if (points < 8) throw ConfigError("synthetic clouds need at least 8 points");
    if (noise < 0) throw ConfigError("noise sigma must be >= 0");
  }
};

/// Surface sample before noise and normalization.
struct SurfaceSample {
  std::vector<std::array<double, 3>> points;
  std::vector<std::size_t> parts;  // local part id per point
};

/// Uniform-by-area samples on the surface of a primitive with per-point parts.
template <typename Rng>
SurfaceSample sample_surface(ShapeFamily family, std::size_t n, Rng& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  constexpr double pi = std::numbers::pi;
  SurfaceSample s;
  s.points.reserve(n);
  s.parts.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::array<double, 3> p{};
    std::size_t part = 0;
    switch (family) {
      case ShapeFamily::kSphere: {
        double norm = 0;
        do {
          for (auto& v : p) v = gauss(rng);
          norm = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
        } while (norm < 1e-12);
        for (auto& v : p) v /= norm;
        part = p[2] >= 0 ? 0 : 1;
        break;
      }
      case ShapeFamily::kCube: {
        const auto face = static_cast<int>(u01(rng) * 6.0) % 6;
        const int axis = face / 2;
        const double sign = face % 2 == 0 ? 1.0 : -1.0;
        for (int a = 0; a < 3; ++a) p[static_cast<std::size_t>(a)] = a == axis ? sign : 2.0 * u01(rng) - 1.0;
        part = axis == 2 ? 0 : 1;
        break;
      }
      case ShapeFamily::kPlane: {
        p = {2.0 * u01(rng) - 1.0, 2.0 * u01(rng) - 1.0, 0.0};
        part = p[0] < 0 ? 0 : 1;
        break;
      }
      case ShapeFamily::kTorus: {
        // Rejection on the tube angle keeps the density uniform in area.
        double theta = 0, phi = 0;
        do {
          theta = 2.0 * pi * u01(rng);
          phi = 2.0 * pi * u01(rng);
        } while (u01(rng) * (kTorusMajor + kTorusMinor) > kTorusMajor + kTorusMinor * std::cos(phi));
        const double ring = kTorusMajor + kTorusMinor * std::cos(phi);
        p = {ring * std::cos(theta), ring * std::sin(theta), kTorusMinor * std::sin(phi)};
        part = ring >= kTorusMajor ? 0 : 1;
        break;
      }
      case ShapeFamily::kCylinder: {
        const double side_area = 2.0 * pi * kCylinderRadius * kCylinderHeight;
        const double cap_area = 2.0 * pi * kCylinderRadius * kCylinderRadius;
        const double theta = 2.0 * pi * u01(rng);
        if (u01(rng) * (side_area + cap_area) < cap_area) {
          const double r = kCylinderRadius * std::sqrt(u01(rng));
          const double z = u01(rng) < 0.5 ? kCylinderHeight / 2 : -kCylinderHeight / 2;
          p = {r * std::cos(theta), r * std::sin(theta), z};
          part = 0;
        } else {
          p = {kCylinderRadius * std::cos(theta), kCylinderRadius * std::sin(theta),
               kCylinderHeight * (u01(rng) - 0.5)};
          part = 1;
        }
        break;
      }
    }
    s.points.push_back(p);
    s.parts.push_back(part);
  }
  return s;
}

/// One dataset item: N × f row-major points, a class id, and optional part labels.
struct Sample {
  std::vector<double> points;
  std::size_t num_points = 0;
  std::size_t features = 3;
  std::size_t label = 0;
  std::vector<std::size_t> part_labels;
};

/// Surface sample + Gaussian noise + unit-sphere normalization. Part labels
/// are local (0/1) per family.
template <typename Rng>
Sample generate_cloud(const SyntheticSpec& spec, Rng& rng) {
  spec.validate();
  auto surf = sample_surface(spec.family, spec.points, rng);
  Sample out;
  out.num_points = spec.points;
  out.features = 3;
  out.points.reserve(spec.points * 3);
  std::normal_distribution<double> noise(0.0, spec.noise > 0 ? spec.noise : 1.0);
  for (const auto& p : surf.points)
    for (double v : p) out.points.push_back(spec.noise > 0 ? v + noise(rng) : v);
  unit_sphere_normalize_inplace(std::span<double>(out.points), 3);
  if (spec.segmentation) out.part_labels = std::move(surf.parts);
  return out;
}

enum class LabelKind { kPerCloud, kPerPoint };

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;  // classes, or part labels for per-point data
  std::size_t features = 3;
  LabelKind kind = LabelKind::kPerCloud;

  std::size_t num_classes() const { return class_names.size(); }
};

/// Balanced dataset with `per_class` clouds of each family. For per-point
/// labels, family i owns global part ids 2i and 2i+1.
inline Dataset generate_dataset(const std::vector<ShapeFamily>& families, std::size_t per_class,
                                std::size_t points, double noise, std::uint64_t seed, bool segmentation) {
  if (families.empty()) throw ConfigError("generate_dataset: no shape families");
  Dataset ds;
  ds.features = 3;
  ds.kind = segmentation ? LabelKind::kPerPoint : LabelKind::kPerCloud;
  for (std::size_t c = 0; c < families.size(); ++c) {
    if (segmentation) {
      for (const char* part : part_names(families[c])) ds.class_names.push_back(to_string(families[c]) + "_" + part);
    } else {
      ds.class_names.push_back(to_string(families[c]));
    }
  }
  for (std::size_t i = 0; i < per_class; ++i)
    for (std::size_t c = 0; c < families.size(); ++c) {
      auto rng = make_rng(seed, "data", {c, i});
      auto s = generate_cloud(SyntheticSpec{families[c], points, noise, segmentation}, rng);
      s.label = c;
      for (auto& p : s.part_labels) p += 2 * c;
      ds.samples.push_back(std::move(s));
    }
  return ds;
}

// ---------------------------------------------------------------------------
// Files

/// Whitespace-delimited text, one point per line, exactly `f` fields.
inline Tensor<double> load_points(const std::string& path, std::size_t f) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open point file '" + path + "'");
  std::vector<double> values;
  std::string line;
  std::size_t lineno = 0, rows = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (kv::trim(line).empty()) continue;
    std::istringstream is(line);
    std::string tok;
    std::size_t fields = 0;
    while (is >> tok) {
      double v = 0;
      auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
      if (ec != std::errc() || p != tok.data() + tok.size())
        throw ParseError(path + ":" + std::to_string(lineno) + ": '" + tok + "' is not a number");
      values.push_back(v);
      ++fields;
    }
    if (fields != f)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(f) + " fields, found " +
                       std::to_string(fields));
    ++rows;
  }
  if (rows == 0) throw ParseError("point file '" + path + "' is empty");
  return Tensor<double>(Shape{rows, f}, std::move(values));
}

inline void save_points(const std::string& path, std::span<const double> points, std::size_t f) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write point file '" + path + "'");
  for (std::size_t i = 0; i < points.size(); ++i) {
    out << kv::num(points[i]);
    out << ((i + 1) % f == 0 ? '\n' : ' ');
  }
}

/// One integer per line, aligned with a point file.
inline std::vector<std::size_t> load_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open label file '" + path + "'");
  std::vector<std::size_t> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = kv::trim(line);
    if (t.empty()) continue;
    std::size_t v = 0;
    auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || p != t.data() + t.size())
      throw ParseError(path + ":" + std::to_string(lineno) + ": '" + t + "' is not a label id");
    out.push_back(v);
  }
  return out;
}

inline void save_labels(const std::string& path, std::span<const std::size_t> labels) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write label file '" + path + "'");
  for (auto l : labels) out << l << '\n';
}

/// Manifest: "path<TAB>label" lines where label is a class id (per-cloud) or
/// a part-label file path (per-point). Directive lines "#classes<TAB>a,b,..."
/// and "#features<TAB>f" declare class names and point width; other lines
/// starting with '#' are comments. Relative paths resolve against the manifest.
struct DatasetManifest {
  struct Entry {
    std::string points_path;
    std::string label;  // class id text, or part-label file path
  };
  std::vector<Entry> entries;
  std::vector<std::string> class_names;
  std::size_t features = 3;
  std::string base_dir;
};

inline DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open manifest '" + path + "'");
  DatasetManifest m;
  m.base_dir = std::filesystem::path(path).parent_path().string();
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (kv::trim(line).empty()) continue;
    const auto tab = line.find('\t');
    if (line[0] == '#') {
      if (tab == std::string::npos) continue;
      const auto key = line.substr(1, tab - 1);
      const auto val = kv::trim(line.substr(tab + 1));
      if (key == "classes") m.class_names = kv::split_list(val);
      else if (key == "features") m.features = kv::to_size("features", val);
      continue;
    }
    if (tab == std::string::npos)
      throw ParseError(path + ":" + std::to_string(lineno) + ": expected 'path<TAB>label'");
    m.entries.push_back({kv::trim(line.substr(0, tab)), kv::trim(line.substr(tab + 1))});
  }
  if (m.entries.empty()) throw ParseError("manifest '" + path + "' lists no clouds");
  if (m.class_names.empty()) throw ParseError("manifest '" + path + "' has no #classes directive");
  return m;
}

inline void save_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write manifest '" + path + "'");
  out << "#classes\t" << kv::join(m.class_names, [](const std::string& s) { return s; }) << '\n';
  out << "#features\t" << m.features << '\n';
  for (const auto& e : m.entries) out << e.points_path << '\t' << e.label << '\n';
}

namespace detail {
inline std::string resolve(const std::string& base, const std::string& p) {
  const std::filesystem::path fp(p);
  return fp.is_absolute() || base.empty() ? p : (std::filesystem::path(base) / fp).string();
}
inline bool is_integer(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; });
}
}  // namespace detail

/// Reads every cloud (and label file) a manifest references.
inline Dataset load_dataset(const DatasetManifest& m) {
  Dataset ds;
  ds.class_names = m.class_names;
  ds.features = m.features;
  const bool per_cloud = detail::is_integer(m.entries.front().label);
  ds.kind = per_cloud ? LabelKind::kPerCloud : LabelKind::kPerPoint;
  for (const auto& e : m.entries) {
    if (detail::is_integer(e.label) != per_cloud)
      throw ParseError("manifest mixes class ids and part-label files (at '" + e.points_path + "')");
    const auto pts = load_points(detail::resolve(m.base_dir, e.points_path), m.features);
    Sample s;
    s.num_points = pts.dim(0);
    s.features = m.features;
    s.points.assign(pts.data().begin(), pts.data().end());
    if (per_cloud) {
      s.label = kv::to_size("label", e.label);
      if (s.label >= ds.num_classes())
        throw ParseError("class id " + e.label + " for '" + e.points_path + "' exceeds " +
                         std::to_string(ds.num_classes()) + " declared classes");
    } else {
      s.part_labels = load_labels(detail::resolve(m.base_dir, e.label));
      if (s.part_labels.size() != s.num_points)
        throw ParseError("label file '" + e.label + "' has " + std::to_string(s.part_labels.size()) +
                         " entries for " + std::to_string(s.num_points) + " points");
      for (auto l : s.part_labels)
        if (l >= ds.num_classes())
          throw ParseError("part label " + std::to_string(l) + " in '" + e.label + "' exceeds declared labels");
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

/// Writes clouds as point files (plus part-label files) and a manifest into `dir`.
inline void write_dataset(const Dataset& ds, const std::string& dir) {
  std::filesystem::create_directories(dir);
  DatasetManifest m;
  m.class_names = ds.class_names;
  m.features = ds.features;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    std::ostringstream name;
    name << "cloud_" << std::setw(5) << std::setfill('0') << i;
    const auto& s = ds.samples[i];
    save_points((std::filesystem::path(dir) / (name.str() + ".pts")).string(), s.points, s.features);
    if (ds.kind == LabelKind::kPerPoint) {
      save_labels((std::filesystem::path(dir) / (name.str() + ".lbl")).string(), s.part_labels);
      m.entries.push_back({name.str() + ".pts", name.str() + ".lbl"});
    } else {
      m.entries.push_back({name.str() + ".pts", std::to_string(s.label)});
    }
  }
  save_manifest((std::filesystem::path(dir) / "manifest.tsv").string(), m);
}

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
};

/// Stratified, seeded split of item indices by `strata` (one key per item).
/// Train size is round(fraction · total), apportioned to strata by largest
/// remainder; every stratum keeps at least one item on each side.
inline Split make_splits(const std::vector<std::size_t>& strata, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("train fraction must lie in (0, 1)");
  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < strata.size(); ++i) groups[strata[i]].push_back(i);
  for (const auto& [key, items] : groups)
    if (items.size() < 2)
      throw ConfigError("stratum " + std::to_string(key) + " has " + std::to_string(items.size()) +
                        " item(s); stratified splitting needs at least 2");

  const auto target = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(strata.size())));
  struct Quota {
    std::size_t key, take, cap;
    double remainder;
  };
  std::vector<Quota> quotas;
  std::size_t assigned = 0;
  for (const auto& [key, items] : groups) {
    const double exact = train_fraction * static_cast<double>(items.size());
    auto take = std::clamp<std::size_t>(static_cast<std::size_t>(std::floor(exact)), 1, items.size() - 1);
    quotas.push_back({key, take, items.size() - 1, exact - std::floor(exact)});
    assigned += take;
  }
  std::vector<std::size_t> order(quotas.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return quotas[a].remainder > quotas[b].remainder; });
  for (std::size_t pass = 0; assigned < target && pass < order.size(); ++pass) {
    auto& q = quotas[order[pass]];
    if (q.take < q.cap) {
      ++q.take;
      ++assigned;
    }
  }

  Split out;
  auto rng = make_rng(seed, "split");
  std::size_t qi = 0;
  for (auto& [key, items] : groups) {
    auto shuffled = items;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    const std::size_t take = quotas[qi++].take;
    out.train.insert(out.train.end(), shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(take));
    out.test.insert(out.test.end(), shuffled.begin() + static_cast<std::ptrdiff_t>(take), shuffled.end());
  }
  std::sort(out.train.begin(), out.train.end());
  std::sort(out.test.begin(), out.test.end());
  return out;
}

/// Stratification keys for a dataset: class id per cloud, or a single stratum
/// for per-point data.
inline std::vector<std::size_t> strata_of(const Dataset& ds) {
  std::vector<std::size_t> s;
  for (const auto& x : ds.samples) s.push_back(ds.kind == LabelKind::kPerCloud ? x.label : 0);
  return s;
}

/// Stacks samples into a batch; every selected cloud must have the same size.
template <typename T>
PointBatch<T> make_batch(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ConfigError("make_batch: no samples selected");
  const std::size_t N = ds.samples[indices[0]].num_points, f = ds.features;
  PointBatch<T> b{Tensor<T>(Shape{indices.size(), N, f}), {}, ds.kind == LabelKind::kPerPoint};
  auto d = b.features.mutable_data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const auto& s = ds.samples[indices[i]];
    if (s.num_points != N) throw DimensionError("make_batch: clouds of different sizes in one batch");
    for (std::size_t q = 0; q < N * f; ++q) d[i * N * f + q] = static_cast<T>(s.points[q]);
    if (b.per_point_labels) b.labels.insert(b.labels.end(), s.part_labels.begin(), s.part_labels.end());
    else b.labels.push_back(s.label);
  }
  return b;
}

}  // namespace cpt
