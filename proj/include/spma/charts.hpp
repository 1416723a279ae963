#pragma once

// Chart memory: a frozen atlas of local low-rank Gaussian factor models fit to
// teacher features. Each chart k models z ≈ μ_k + U_k a + ε with
// a ~ N(0, Λ_k), ε ~ N(0, σ_k² I), i.e. Σ_k = U_k Λ_k U_kᵀ + σ_k² I.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "spma/errors.hpp"
#include "spma/linalg.hpp"
#include "spma/matrix.hpp"

namespace spma::charts {

inline constexpr double kVarianceFloor = 1e-6;

struct Chart {
  std::vector<double> mu;           // d
  Matrix basis;                     // d×r, orthonormal columns
  std::vector<double> factor_vars;  // λ_1..λ_r, non-increasing, >= 0
  double resid_var = kVarianceFloor;

  std::size_t dim() const { return mu.size(); }
  std::size_t rank() const { return factor_vars.size(); }

  /// log det Σ_k = Σ_r log(λ_r + σ²) + (d − r) log σ².
  double log_det() const {
    double ld = 0.0;
    for (double l : factor_vars) ld += std::log(l + resid_var);
    return ld + static_cast<double>(dim() - rank()) * std::log(resid_var);
  }

  friend bool operator==(const Chart&, const Chart&) = default;
};

/// Factor model from the rows of `zk`: column mean, top-r eigenpairs of the
/// sample covariance, σ² as the mean trailing eigenvalue via the trace
/// residual, λ_j = max(eig_j − σ², 0).
inline Chart fit_chart(const Matrix& zk, std::size_t rank, double variance_floor = kVarianceFloor) {
  const std::size_t n = zk.rows(), d = zk.cols();
  if (n < 2) throw DegenerateError("fit_chart: cluster has fewer than 2 points");
  if (rank < 1 || rank > std::min(n - 1, d))
    throw ValidationError("fit_chart: rank must satisfy 1 <= r <= min(n-1, d)");
  require_finite(zk, "fit_chart");

  Chart c;
  c.mu.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) c.mu[j] += zk(i, j);
  for (double& m : c.mu) m /= static_cast<double>(n);

  Matrix cov(d, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double da = zk(i, a) - c.mu[a];
      for (std::size_t b = a; b < d; ++b) cov(a, b) += da * (zk(i, b) - c.mu[b]);
    }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      cov(a, b) /= static_cast<double>(n - 1);
      cov(b, a) = cov(a, b);
    }

  auto eig = linalg::top_r_eigen(cov, rank);
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov(a, a);
  const double retained = std::accumulate(eig.values.begin(), eig.values.end(), 0.0);
  const double trailing = d > rank ? (trace - retained) / static_cast<double>(d - rank) : 0.0;
  c.resid_var = std::max(trailing, variance_floor);
  c.factor_vars.resize(rank);
  for (std::size_t j = 0; j < rank; ++j) c.factor_vars[j] = std::max(eig.values[j] - c.resid_var, 0.0);
  c.basis = std::move(eig.vectors);
  return c;
}

namespace detail {

inline void require_dim(const Chart& c, std::span<const double> z) {
  if (z.size() != c.dim())
    throw ValidationError("chart_score: feature dimension " + std::to_string(z.size()) + " != chart dimension " +
                          std::to_string(c.dim()));
}

}  // namespace detail

/// s_k(z) = (1/d)(Σ_r a_r²/(λ_r+σ²) + ‖z−μ−Ua‖²/σ² + log det Σ_k), a = Uᵀ(z−μ).
inline double chart_score(const Chart& c, std::span<const double> z) {
  detail::require_dim(c, z);
  const std::size_t d = c.dim(), r = c.rank();
  std::vector<double> diff(d);
  for (std::size_t j = 0; j < d; ++j) diff[j] = z[j] - c.mu[j];
  std::vector<double> a(r, 0.0);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = 0; k < r; ++k) a[k] += c.basis(j, k) * diff[j];
  double in_plane = 0.0;
  for (std::size_t k = 0; k < r; ++k) in_plane += a[k] * a[k] / (c.factor_vars[k] + c.resid_var);
  double resid = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    double e = diff[j];
    for (std::size_t k = 0; k < r; ++k) e -= c.basis(j, k) * a[k];
    resid += e * e;
  }
  return (in_plane + resid / c.resid_var + c.log_det()) / static_cast<double>(d);
}

/// ∇_z s_k(z) = (2/d) Σ_k⁻¹ (z − μ), via the same Woodbury split.
inline std::vector<double> chart_score_gradient(const Chart& c, std::span<const double> z) {
  detail::require_dim(c, z);
  const std::size_t d = c.dim(), r = c.rank();
  std::vector<double> diff(d);
  for (std::size_t j = 0; j < d; ++j) diff[j] = z[j] - c.mu[j];
  std::vector<double> a(r, 0.0);
  for (std::size_t j = 0; j < d; ++j)
    for (std::size_t k = 0; k < r; ++k) a[k] += c.basis(j, k) * diff[j];
  std::vector<double> g(d);
  const double scale = 2.0 / static_cast<double>(d);
  for (std::size_t j = 0; j < d; ++j) {
    double proj = 0.0, weighted = 0.0;
    for (std::size_t k = 0; k < r; ++k) {
      proj += c.basis(j, k) * a[k];
      weighted += c.basis(j, k) * a[k] / (c.factor_vars[k] + c.resid_var);
    }
    g[j] = scale * (weighted + (diff[j] - proj) / c.resid_var);
  }
  return g;
}

/// Immutable collection of charts plus the assignment temperature τ_c.
class ChartAtlas {
 public:
  ChartAtlas(std::vector<Chart> charts, double tau_c) : charts_(std::move(charts)), tau_c_(tau_c) {
    if (charts_.empty()) throw ValidationError("ChartAtlas: need at least one chart");
    if (!(tau_c_ > 0.0)) throw ValidationError("ChartAtlas: tau_c must be > 0");
    for (const auto& c : charts_)
      if (c.dim() != charts_.front().dim()) throw ValidationError("ChartAtlas: charts disagree on feature dimension");
  }

  std::size_t size() const { return charts_.size(); }
  std::size_t feature_dim() const { return charts_.front().dim(); }
  double tau_c() const { return tau_c_; }
  const Chart& chart(std::size_t k) const { return charts_[k]; }
  const std::vector<Chart>& charts() const { return charts_; }

  std::vector<double> scores(std::span<const double> z) const {
    std::vector<double> s(charts_.size());
    for (std::size_t k = 0; k < charts_.size(); ++k) s[k] = chart_score(charts_[k], z);
    return s;
  }

  /// p_k(z) = exp(−s_k/τ_c) / Σ_j exp(−s_j/τ_c).
  std::vector<double> soft_assign(std::span<const double> z) const {
    return linalg::softmax_temp(scores(z), tau_c_, true);
  }

  double min_score(std::span<const double> z) const {
    const auto s = scores(z);
    return *std::min_element(s.begin(), s.end());
  }

  friend bool operator==(const ChartAtlas&, const ChartAtlas&) = default;

 private:
  std::vector<Chart> charts_;
  double tau_c_;
};

struct AtlasBuild {
  ChartAtlas atlas;
  std::vector<std::size_t> assignments;  // chart index per input row
};

/// k-means over the rows of `z`, then one factor model per cluster. Clusters
/// with fewer than rank+2 members are folded into the cluster with the
/// nearest center (smallest first, lowest index on ties) before fitting.
inline AtlasBuild build_atlas(const Matrix& z, std::size_t k, std::size_t rank, double tau_c, std::uint64_t seed) {
  if (k < 1) throw ValidationError("build_atlas: K must be >= 1");
  if (z.rows() < 2 * k) throw ValidationError("build_atlas: need n >= 2K feature rows");
  if (!(tau_c > 0.0)) throw ValidationError("build_atlas: tau_c must be > 0");
  const auto km = linalg::kmeans(z, k, seed);
  const std::size_t n = z.rows(), d = z.cols();

  std::vector<std::size_t> label = km.assignments;
  std::vector<char> alive(k, 1);
  Matrix centers = km.centers;
  auto count = [&](std::size_t c) { return static_cast<std::size_t>(std::count(label.begin(), label.end(), c)); };
  auto recenter = [&](std::size_t c) {
    std::vector<double> m(d, 0.0);
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (label[i] == c) {
        ++cnt;
        for (std::size_t j = 0; j < d; ++j) m[j] += z(i, j);
      }
    for (std::size_t j = 0; j < d; ++j) centers(c, j) = m[j] / static_cast<double>(cnt);
  };

  const std::size_t min_size = rank + 2;
  while (true) {
    std::size_t small = k, small_n = std::numeric_limits<std::size_t>::max(), live = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (!alive[c]) continue;
      ++live;
      const std::size_t cn = count(c);
      if (cn < min_size && cn < small_n) {
        small = c;
        small_n = cn;
      }
    }
    if (small == k) break;
    if (live == 1) throw DegenerateError("build_atlas: too few points for a rank-" + std::to_string(rank) + " chart");
    std::size_t target = k;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < k; ++c) {
      if (!alive[c] || c == small) continue;
      const double dd = squared_distance(centers.row(small), centers.row(c));
      if (dd < best) {
        best = dd;
        target = c;
      }
    }
    for (auto& l : label)
      if (l == small) l = target;
    alive[small] = 0;
    recenter(target);
  }

  std::vector<std::size_t> remap(k, k);
  std::vector<Chart> fitted;
  for (std::size_t c = 0; c < k; ++c) {
    if (!alive[c]) continue;
    remap[c] = fitted.size();
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < n; ++i)
      if (label[i] == c) rows.push_back(i);
    fitted.push_back(fit_chart(z.gather_rows(rows), rank));
  }
  for (auto& l : label) l = remap[l];
  return {ChartAtlas(std::move(fitted), tau_c), std::move(label)};
}

// ---------------------------------------------------------------------------
// JSON: μ, U (row-major), λ, σ², r per chart and τ_c.

inline nlohmann::json atlas_to_json(const ChartAtlas& atlas) {
  nlohmann::json charts = nlohmann::json::array();
  for (const auto& c : atlas.charts())
    charts.push_back({{"mu", c.mu},
                      {"basis", c.basis.data()},
                      {"factor_vars", c.factor_vars},
                      {"resid_var", c.resid_var},
                      {"rank", c.rank()}});
  return {{"schema_version", 1}, {"tau_c", atlas.tau_c()}, {"feature_dim", atlas.feature_dim()}, {"charts", charts}};
}

inline ChartAtlas atlas_from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != 1) throw ValidationError("atlas: unsupported schema_version");
  const auto d = j.at("feature_dim").get<std::size_t>();
  std::vector<Chart> charts;
  for (const auto& cj : j.at("charts")) {
    Chart c;
    c.mu = cj.at("mu").get<std::vector<double>>();
    const auto r = cj.at("rank").get<std::size_t>();
    c.basis = Matrix(d, r, cj.at("basis").get<std::vector<double>>());
    c.factor_vars = cj.at("factor_vars").get<std::vector<double>>();
    c.resid_var = cj.at("resid_var").get<double>();
    if (c.mu.size() != d || c.factor_vars.size() != r) throw ValidationError("atlas: chart shape mismatch");
    if (!(c.resid_var > 0.0)) throw ValidationError("atlas: resid_var must be > 0");
    charts.push_back(std::move(c));
  }
  return ChartAtlas(std::move(charts), j.at("tau_c").get<double>());
}

}  // namespace spma::charts
