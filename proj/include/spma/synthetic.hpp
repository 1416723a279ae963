#pragma once

// Warped-ribbon atlas-manifold benchmark. A 2-D latent square (u, v) is
// embedded as a ribbon in R^3 and observed through two independently seeded
// nonlinear input maps ("old" and "new" views). Labels depend on u only, so
// both views share one label function.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "spma/errors.hpp"
#include "spma/io.hpp"
#include "spma/matrix.hpp"

namespace spma::synthetic {

struct BenchmarkConfig {
  std::size_t n_train = 2000;
  std::size_t n_test = 1000;
  std::size_t num_classes = 4;
  std::size_t input_dim = 16;
  std::size_t anchors_per_class = 64;
  double obs_noise = 0.02;
  double warp_gain = 0.3;

  friend bool operator==(const BenchmarkConfig&, const BenchmarkConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(BenchmarkConfig, n_train, n_test, num_classes, input_dim, anchors_per_class,
                                   obs_noise, warp_gain)

struct LatentSample {
  double u = 0.0;
  double v = 0.0;
  std::size_t label = 0;
};

enum class View { Old, New };

inline constexpr std::size_t kLiftDim = 9;

struct ViewMap {
  View view = View::Old;
  Matrix mixing;  // input_dim × kLiftDim
  std::vector<double> bias;
  double warp_gain = 0.3;
};

using Point3 = std::array<double, 3>;

inline std::size_t label_for(double u, std::size_t num_classes) {
  const auto bin = static_cast<std::size_t>(std::floor(u * static_cast<double>(num_classes)));
  return std::min(bin, num_classes - 1);
}

inline std::vector<LatentSample> sample_latent(std::size_t n, std::size_t num_classes, std::uint64_t seed) {
  if (n == 0) throw ValidationError("sample_latent: n must be >= 1");
  if (num_classes == 0) throw ValidationError("sample_latent: need at least one class");
  std::mt19937_64 gen(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<LatentSample> out(n);
  for (auto& s : out) {
    s.u = unit(gen);
    s.v = unit(gen);
    s.label = label_for(s.u, num_classes);
  }
  return out;
}

inline Point3 embed_ribbon(const LatentSample& s, double warp_gain) {
  const double phase = 2.0 * std::numbers::pi * s.u;
  return {s.u, std::sin(phase) * warp_gain + 0.5 * s.v, std::cos(phase) * warp_gain * s.v};
}

/// (p, p², pairwise products).
inline std::array<double, kLiftDim> lift(const Point3& p) {
  return {p[0], p[1], p[2], p[0] * p[0], p[1] * p[1], p[2] * p[2], p[0] * p[1], p[0] * p[2], p[1] * p[2]};
}

inline ViewMap make_view(View view, std::size_t input_dim, double warp_gain, std::uint64_t seed) {
  ViewMap m;
  m.view = view;
  m.warp_gain = warp_gain;
  m.mixing = Matrix(input_dim, kLiftDim);
  m.bias.resize(input_dim);
  std::mt19937_64 gen(io::derive_seed(seed, view == View::Old ? 101 : 202));
  std::normal_distribution<double> w(0.0, 1.5);
  std::normal_distribution<double> b(0.0, 0.5);
  for (double& x : m.mixing.data()) x = w(gen);
  for (double& x : m.bias) x = b(gen);
  return m;
}

/// x = tanh(mixing·lift(p) + bias) + ε with ε ~ N(0, noise²) drawn from `noise_gen`.
template <class Rng>
std::vector<double> observe(const ViewMap& view, const Point3& p, double noise, Rng& noise_gen) {
  const auto f = lift(p);
  std::normal_distribution<double> eps(0.0, 1.0);
  std::vector<double> x(view.bias.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    double a = view.bias[i];
    for (std::size_t j = 0; j < kLiftDim; ++j) a += view.mixing(i, j) * f[j];
    x[i] = std::tanh(a);
    if (noise > 0.0) x[i] += noise * eps(noise_gen);
  }
  return x;
}

inline std::vector<double> observe(const ViewMap& view, const Point3& p, double noise, std::uint64_t noise_seed) {
  std::mt19937_64 gen(noise_seed);
  return observe(view, p, noise, gen);
}

struct LabeledSplit {
  Matrix inputs;
  std::vector<std::size_t> labels;

  friend bool operator==(const LabeledSplit&, const LabeledSplit&) = default;
};

struct BenchmarkBundle {
  BenchmarkConfig config;
  std::uint64_t seed = 0;
  LabeledSplit old_train, old_test, new_train, new_test;
  std::vector<std::size_t> anchor_indices;  // rows of old_train, grouped by class

  LabeledSplit anchors() const {
    return {old_train.inputs.gather_rows(anchor_indices), [&] {
              std::vector<std::size_t> l;
              for (auto i : anchor_indices) l.push_back(old_train.labels[i]);
              return l;
            }()};
  }

  friend bool operator==(const BenchmarkBundle&, const BenchmarkBundle&) = default;
};

namespace detail {

inline LabeledSplit generate_split(const ViewMap& view, const BenchmarkConfig& cfg, std::size_t n,
                                   std::uint64_t latent_seed, std::uint64_t noise_seed) {
  const auto latent = sample_latent(n, cfg.num_classes, latent_seed);
  std::mt19937_64 noise_gen(noise_seed);
  LabeledSplit split{Matrix(n, cfg.input_dim), std::vector<std::size_t>(n)};
  for (std::size_t i = 0; i < n; ++i) {
    const auto x = observe(view, embed_ribbon(latent[i], cfg.warp_gain), cfg.obs_noise, noise_gen);
    std::copy(x.begin(), x.end(), split.inputs.row(i).begin());
    split.labels[i] = latent[i].label;
  }
  return split;
}

}  // namespace detail

inline void validate(const BenchmarkConfig& cfg) {
  if (cfg.num_classes < 1 || cfg.input_dim < 1 || cfg.n_train < 1 || cfg.n_test < 1)
    throw ValidationError("benchmark: counts and dimensions must be >= 1");
  if (cfg.anchors_per_class < 1) throw ValidationError("benchmark: anchors_per_class must be >= 1");
  if (cfg.anchors_per_class * cfg.num_classes > cfg.n_train)
    throw ValidationError("benchmark: anchors_per_class * num_classes exceeds n_train");
  if (!(cfg.obs_noise >= 0.0)) throw ValidationError("benchmark: obs_noise must be >= 0");
  if (!(cfg.warp_gain > 0.0)) throw ValidationError("benchmark: warp_gain must be > 0");
}

inline BenchmarkBundle make_benchmark(const BenchmarkConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  const ViewMap old_view = make_view(View::Old, cfg.input_dim, cfg.warp_gain, seed);
  const ViewMap new_view = make_view(View::New, cfg.input_dim, cfg.warp_gain, seed);

  BenchmarkBundle b;
  b.config = cfg;
  b.seed = seed;
  // Four independent latent streams keep the old and new draws disjoint.
  b.old_train = detail::generate_split(old_view, cfg, cfg.n_train, io::derive_seed(seed, 1), io::derive_seed(seed, 11));
  b.old_test = detail::generate_split(old_view, cfg, cfg.n_test, io::derive_seed(seed, 2), io::derive_seed(seed, 12));
  b.new_train = detail::generate_split(new_view, cfg, cfg.n_train, io::derive_seed(seed, 3), io::derive_seed(seed, 13));
  b.new_test = detail::generate_split(new_view, cfg, cfg.n_test, io::derive_seed(seed, 4), io::derive_seed(seed, 14));

  std::mt19937_64 gen(io::derive_seed(seed, 5));
  for (std::size_t c = 0; c < cfg.num_classes; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < cfg.n_train; ++i)
      if (b.old_train.labels[i] == c) members.push_back(i);
    if (members.size() < cfg.anchors_per_class)
      throw ValidationError("benchmark: class " + std::to_string(c) + " has only " + std::to_string(members.size()) +
                            " training samples, fewer than anchors_per_class");
    std::shuffle(members.begin(), members.end(), gen);
    members.resize(cfg.anchors_per_class);
    std::sort(members.begin(), members.end());
    b.anchor_indices.insert(b.anchor_indices.end(), members.begin(), members.end());
  }
  return b;
}

// ---------------------------------------------------------------------------
// JSON export: config echo, base64 little-endian float64 arrays, int labels.

inline nlohmann::json split_to_json(const LabeledSplit& s) {
  return {{"rows", s.inputs.rows()},
          {"cols", s.inputs.cols()},
          {"inputs_b64", io::pack_doubles(s.inputs.data())},
          {"labels", s.labels}};
}

inline LabeledSplit split_from_json(const nlohmann::json& j) {
  LabeledSplit s;
  s.inputs = Matrix(j.at("rows").get<std::size_t>(), j.at("cols").get<std::size_t>(),
                    io::unpack_doubles(j.at("inputs_b64").get<std::string>()));
  s.labels = j.at("labels").get<std::vector<std::size_t>>();
  if (s.labels.size() != s.inputs.rows()) throw ValidationError("bundle: label count does not match rows");
  return s;
}

inline nlohmann::json bundle_to_json(const BenchmarkBundle& b) {
  return {{"schema_version", 1},
          {"config", b.config},
          {"seed", b.seed},
          {"old_train", split_to_json(b.old_train)},
          {"old_test", split_to_json(b.old_test)},
          {"new_train", split_to_json(b.new_train)},
          {"new_test", split_to_json(b.new_test)},
          {"anchor_indices", b.anchor_indices}};
}

inline BenchmarkBundle bundle_from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != 1) throw ValidationError("bundle: unsupported schema_version");
  BenchmarkBundle b;
  b.config = j.at("config").get<BenchmarkConfig>();
  b.seed = j.at("seed").get<std::uint64_t>();
  b.old_train = split_from_json(j.at("old_train"));
  b.old_test = split_from_json(j.at("old_test"));
  b.new_train = split_from_json(j.at("new_train"));
  b.new_test = split_from_json(j.at("new_test"));
  b.anchor_indices = j.at("anchor_indices").get<std::vector<std::size_t>>();
  for (auto i : b.anchor_indices)
    if (i >= b.old_train.inputs.rows()) throw ValidationError("bundle: anchor index out of range");
  return b;
}

}  // namespace spma::synthetic
