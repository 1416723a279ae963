#pragma once

// Quick oracle and invariance checks bundled with the CLI (`selftest`). The
// references here are deliberately naive dense computations.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "spma/charts.hpp"
#include "spma/linalg.hpp"
#include "spma/metrics.hpp"
#include "spma/objective.hpp"
#include "spma/trainer.hpp"

namespace spma::selftest {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

namespace detail {

inline Matrix gaussian(std::size_t r, std::size_t c, std::mt19937_64& gen, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (double& v : m.data()) v = n(gen);
  return m;
}

/// Gram-Schmidt orthonormalisation of a Gaussian square matrix.
inline Matrix orthogonal(std::size_t n, std::mt19937_64& gen) {
  Matrix q = gaussian(n, n, gen);
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double p = 0.0;
      for (std::size_t i = 0; i < n; ++i) p += q(i, k) * q(i, j);
      for (std::size_t i = 0; i < n; ++i) q(i, j) -= p * q(i, k);
    }
    double nn = 0.0;
    for (std::size_t i = 0; i < n; ++i) nn += q(i, j) * q(i, j);
    for (std::size_t i = 0; i < n; ++i) q(i, j) /= std::sqrt(nn);
  }
  return q;
}

inline Matrix similarity(const Matrix& x, const Matrix& r, double c, double shift) {
  Matrix y = matmul(x, r);
  for (double& v : y.data()) v = c * v + shift;
  return y;
}

/// Mahalanobis term plus log-determinant by Gaussian elimination on Σ.
inline double dense_score(const charts::Chart& ch, std::span<const double> z) {
  const std::size_t d = ch.dim();
  Matrix a(d, d + 1);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double s = i == j ? ch.resid_var : 0.0;
      for (std::size_t r = 0; r < ch.rank(); ++r) s += ch.basis(i, r) * ch.factor_vars[r] * ch.basis(j, r);
      a(i, j) = s;
    }
    a(i, d) = z[i] - ch.mu[i];
  }
  const std::vector<double> rhs = a.col(d);
  double logdet = 0.0;
  for (std::size_t p = 0; p < d; ++p) {
    logdet += std::log(a(p, p));
    for (std::size_t i = p + 1; i < d; ++i) {
      const double f = a(i, p) / a(p, p);
      for (std::size_t j = p; j <= d; ++j) a(i, j) -= f * a(p, j);
    }
  }
  std::vector<double> x(d);
  for (std::size_t i = d; i-- > 0;) {
    double s = a(i, d);
    for (std::size_t j = i + 1; j < d; ++j) s -= a(i, j) * x[j];
    x[i] = s / a(i, i);
  }
  double quad = 0.0;
  for (std::size_t i = 0; i < d; ++i) quad += rhs[i] * x[i];
  return (quad + logdet) / static_cast<double>(d);
}

}  // namespace detail

inline std::vector<Check> run_all() {
  std::vector<Check> out;
  auto add = [&](std::string name, const std::function<std::string()>& body) {
    try {
      const std::string err = body();
      out.push_back({std::move(name), err.empty(), err});
    } catch (const std::exception& e) {
      out.push_back({std::move(name), false, std::string("threw: ") + e.what()});
    }
  };
  auto near = [](double a, double b, double tol) { return std::abs(a - b) <= tol; };

  add("paper metric vectors", [&]() -> std::string {
    if (!near(metrics::harmonic_mean(0.9269, 0.8875), 0.9068, 5e-4)) return "harmonic 0.9068";
    if (!near(metrics::harmonic_mean(0.5800, 0.8994), 0.7052, 5e-4)) return "harmonic 0.7052";
    if (!near(metrics::harmonic_mean(0.8195, 0.7906), 0.8048, 5e-4)) return "harmonic 0.8048";
    if (!near(metrics::forgetting(0.3482, 0.3059), 0.0423, 5e-4)) return "forgetting 0.0423";
    if (!near(metrics::forgetting(0.3482, 0.0838), 0.2644, 5e-4)) return "forgetting 0.2644";
    return {};
  });

  add("chart score vs dense covariance", [&]() -> std::string {
    std::mt19937_64 gen(1);
    for (std::size_t d : {4u, 16u}) {
      const Matrix z = detail::gaussian(60, d, gen);
      const auto ch = charts::fit_chart(z, 2);
      for (int i = 0; i < 5; ++i) {
        const Matrix p = detail::gaussian(1, d, gen, 2.0);
        const double a = charts::chart_score(ch, p.row(0)), b = detail::dense_score(ch, p.row(0));
        if (std::abs(a - b) > 1e-8 * std::max(1.0, std::abs(b))) return "d=" + std::to_string(d);
      }
    }
    return {};
  });

  add("CKA / distance-correlation similarity invariance", [&]() -> std::string {
    std::mt19937_64 gen(2);
    const Matrix x = detail::gaussian(20, 5, gen), y = detail::gaussian(20, 3, gen);
    const Matrix xs = detail::similarity(x, detail::orthogonal(5, gen), 2.5, 1.3);
    if (!near(metrics::linear_cka(xs, y), metrics::linear_cka(x, y), 1e-8)) return "cka";
    if (!near(metrics::distance_correlation(xs, y), metrics::distance_correlation(x, y), 1e-10)) return "dist_corr";
    return {};
  });

  add("geometry losses invariant to rigid motion and scale", [&]() -> std::string {
    std::mt19937_64 gen(3);
    const Matrix z0 = detail::gaussian(10, 4, gen), z = detail::gaussian(10, 4, gen);
    const auto nd = objective::normalized_distances(z0);
    const auto mask = objective::teacher_knn_mask(nd, 3);
    const Matrix zs = detail::similarity(z, detail::orthogonal(4, gen), 0.7, -2.0);
    if (!near(objective::loss_geo(zs, nd, nullptr), objective::loss_geo(z, nd, nullptr), 1e-9)) return "geo";
    if (!near(objective::loss_smooth(zs, nd, mask, 1.0, nullptr), objective::loss_smooth(z, nd, mask, 1.0, nullptr),
              1e-9))
      return "smooth";
    return {};
  });

  add("gradient vs central differences (all presets)", [&]() -> std::string {
    trainer::Teacher t;
    t.model = model::MlpModel::initialized({4, 6, 5, 3}, 2, 4);
    std::mt19937_64 gen(5);
    t.anchors.inputs = detail::gaussian(16, 4, gen);
    for (std::size_t i = 0; i < 16; ++i) t.anchors.labels.push_back(i % 3);
    const auto fo = model::forward(t.model, t.anchors.inputs);
    t.anchor_features = fo.latents;
    t.anchor_logits = fo.logits;
    const auto atlas = charts::build_atlas(t.anchor_features, 2, 1, 1.0, 6).atlas;
    model::MlpModel s = t.model;
    std::normal_distribution<double> n(0.0, 0.3);
    for (double& p : s.params()) p += n(gen);
    const Matrix x = detail::gaussian(5, 4, gen);
    const std::vector<std::size_t> y{0, 1, 2, 0, 1}, rows{0, 2, 4, 6, 8, 10, 12, 14};
    objective::ObjectiveConfig cfg;
    cfg.knn = 3;
    for (const auto m : objective::kAllMethods) {
      const trainer::StepInputs in{x, y, rows};
      const auto g = trainer::evaluate_step(s, t, &atlas, in, cfg, m, 3, 10, true).gradient;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double h = 1e-4, p0 = s.params()[i];
        s.params()[i] = p0 + h;
        const double up = trainer::evaluate_step(s, t, &atlas, in, cfg, m, 3, 10, false).breakdown.total;
        s.params()[i] = p0 - h;
        const double dn = trainer::evaluate_step(s, t, &atlas, in, cfg, m, 3, 10, false).breakdown.total;
        s.params()[i] = p0;
        const double fd = (up - dn) / (2 * h);
        if (std::abs(g[i] - fd) > 1e-4 * std::max({std::abs(g[i]), std::abs(fd), 1e-6}))
          return std::string(objective::method_name(m)) + " param " + std::to_string(i);
      }
    }
    return {};
  });

  add("retention terms vanish for an unchanged student", [&]() -> std::string {
    trainer::Teacher t;
    t.model = model::MlpModel::initialized({4, 6, 5, 3}, 2, 7);
    std::mt19937_64 gen(8);
    t.anchors.inputs = detail::gaussian(16, 4, gen);
    for (std::size_t i = 0; i < 16; ++i) t.anchors.labels.push_back(i % 3);
    const auto fo = model::forward(t.model, t.anchors.inputs);
    t.anchor_features = fo.latents;
    t.anchor_logits = fo.logits;
    const auto atlas = charts::build_atlas(t.anchor_features, 2, 1, 1.0, 9).atlas;
    const Matrix x = detail::gaussian(4, 4, gen);
    const std::vector<std::size_t> y{0, 1, 2, 0}, rows{1, 3, 5, 7, 9, 11};
    const auto b = trainer::evaluate_step(t.model, t, &atlas, {x, y, rows}, {}, objective::Method::SpmaOG, 0, 10, false)
                       .breakdown;
    for (double v : {b.kd, b.geo, b.smooth, b.chart, b.reg})
      if (std::abs(v) > 1e-10) return "term = " + std::to_string(v);
    return {};
  });

  add("support inclusion calibration", [&]() -> std::string {
    std::mt19937_64 gen(10);
    const Matrix z = detail::gaussian(200, 5, gen);
    const auto atlas = charts::build_atlas(z, 2, 2, 1.0, 11).atlas;
    if (!near(metrics::support_inclusion(atlas, z, z, 0.95), 0.95, 1.0 / 200.0)) return "self";
    Matrix far = z;
    for (std::size_t i = 0; i < far.rows(); ++i) far(i, 0) += 100.0;
    if (metrics::support_inclusion(atlas, z, far, 0.95) != 0.0) return "far";
    return {};
  });

  return out;
}

}  // namespace spma::selftest
