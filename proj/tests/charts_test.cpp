#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "spma/charts.hpp"

namespace ch = spma::charts;
using spma::Matrix;

namespace {

ch::Chart random_chart(std::size_t d, std::size_t r, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> u(0.05, 3.0);
  std::normal_distribution<double> n;
  ch::Chart c;
  const Matrix q = oracle::random_orthogonal(d, gen);
  c.basis = Matrix(d, r);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t k = 0; k < r; ++k) c.basis(i, k) = q(i, k);
  for (std::size_t k = 0; k < r; ++k) c.factor_vars.push_back(u(gen));
  std::sort(c.factor_vars.rbegin(), c.factor_vars.rend());
  c.resid_var = u(gen) * 0.3;
  for (std::size_t i = 0; i < d; ++i) c.mu.push_back(n(gen));
  return c;
}

// (1/d)(Mahalanobis² + log det) with Σ materialized, solved by Cholesky.
double dense_score(const ch::Chart& c, const std::vector<double>& z) {
  const std::size_t d = c.dim();
  Matrix sigma(d, d);
  for (std::size_t i = 0; i < d; ++i) {
    sigma(i, i) += c.resid_var;
    for (std::size_t j = 0; j < d; ++j)
      for (std::size_t k = 0; k < c.rank(); ++k) sigma(i, j) += c.basis(i, k) * c.factor_vars[k] * c.basis(j, k);
  }
  std::vector<double> diff(d);
  for (std::size_t i = 0; i < d; ++i) diff[i] = z[i] - c.mu[i];
  const auto sol = oracle::cholesky_solve(sigma, diff);
  double maha = 0.0;
  for (std::size_t i = 0; i < d; ++i) maha += diff[i] * sol[i];
  const auto [vals, vecs] = oracle::jacobi_eigen(sigma);
  double logdet = 0.0;
  for (double v : vals) logdet += std::log(v);
  return (maha + logdet) / static_cast<double>(d);
}

Matrix blobs(std::size_t per_blob, std::mt19937_64& gen, double sep = 20.0) {
  std::normal_distribution<double> n;
  Matrix z(2 * per_blob, 3);
  for (std::size_t i = 0; i < 2 * per_blob; ++i)
    for (std::size_t j = 0; j < 3; ++j) z(i, j) = n(gen) + (i >= per_blob && j == 0 ? sep : 0.0);
  return z;
}

}  // namespace

TEST(FitChart, RecoversKnownFactorModel) {
  std::mt19937_64 gen(101);
  std::normal_distribution<double> n;
  const std::vector<double> sd{3.0, 1.0, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1};
  Matrix z(50, 8);
  for (std::size_t i = 0; i < 50; ++i)
    for (std::size_t j = 0; j < 8; ++j) z(i, j) = sd[j] * n(gen);
  const auto c = ch::fit_chart(z, 1);
  double mu_norm = 0.0;
  for (double m : c.mu) mu_norm += m * m;
  EXPECT_LE(std::sqrt(mu_norm), 0.5);
  EXPECT_GE(std::abs(c.basis(0, 0)), 0.95);
  EXPECT_GT(c.factor_vars[0], 0.0);
  EXPECT_GE(c.resid_var, ch::kVarianceFloor);
}

TEST(FitChart, ZeroVarianceClusterHitsFloor) {
  Matrix z(5, 4);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) z(i, j) = 1.5 + j;
  const auto c = ch::fit_chart(z, 2);
  EXPECT_EQ(c.resid_var, ch::kVarianceFloor);
  for (double l : c.factor_vars) EXPECT_EQ(l, 0.0);
  EXPECT_TRUE(std::isfinite(ch::chart_score(c, z.row(0))));
}

TEST(FitChart, TraceMatchesSampleCovariance) {
  std::mt19937_64 gen(102);
  const Matrix z = oracle::random_matrix(40, 6, gen, 2.0);
  const auto c = ch::fit_chart(z, 2);
  double trace_s = 0.0;
  for (std::size_t j = 0; j < 6; ++j) {
    double m = 0.0, s = 0.0;
    for (std::size_t i = 0; i < 40; ++i) m += z(i, j) / 40.0;
    for (std::size_t i = 0; i < 40; ++i) s += (z(i, j) - m) * (z(i, j) - m);
    trace_s += s / 39.0;
  }
  double trace_sigma = 6.0 * c.resid_var;
  for (double l : c.factor_vars) trace_sigma += l;
  EXPECT_NEAR(trace_sigma, trace_s, 1e-8);
  const Matrix gram = spma::matmul_tn(c.basis, c.basis);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_NEAR(gram(i, j), i == j ? 1.0 : 0.0, 1e-8);
  EXPECT_GE(c.factor_vars[0], c.factor_vars[1]);
}

TEST(FitChart, Errors) {
  EXPECT_THROW(ch::fit_chart(Matrix{{1.0, 2.0}}, 1), spma::DegenerateError);
  EXPECT_THROW(ch::fit_chart(Matrix{{1.0, 2.0}, {0.0, 1.0}}, 2), spma::ValidationError);
  EXPECT_THROW(ch::fit_chart(Matrix{{1.0, 2.0}, {0.0, 1.0}}, 0), spma::ValidationError);
}

TEST(ChartScore, CenterOfChartIsLogDetOnly) {
  std::mt19937_64 gen(103);
  const auto c = random_chart(5, 2, gen);
  EXPECT_NEAR(ch::chart_score(c, c.mu), c.log_det() / 5.0, 1e-14);
}

TEST(ChartScore, WoodburyMatchesDenseOracle) {
  std::mt19937_64 gen(104);
  std::normal_distribution<double> n(0.0, 2.0);
  for (int trial = 0; trial < 100; ++trial) {
    const auto c = random_chart(6, 2, gen);
    std::vector<double> z(6);
    for (double& v : z) v = n(gen);
    const double ref = dense_score(c, z);
    EXPECT_NEAR(ch::chart_score(c, z), ref, 1e-8 * std::max(1.0, std::abs(ref)));
  }
}

TEST(ChartScore, QuadraticGrowthAlongLeadingFactor) {
  std::mt19937_64 gen(105);
  const auto c = random_chart(6, 2, gen);
  const double base = ch::chart_score(c, c.mu);
  auto along = [&](double t) {
    std::vector<double> z = c.mu;
    for (std::size_t i = 0; i < 6; ++i) z[i] += t * c.basis(i, 0);
    return ch::chart_score(c, z) - base;
  };
  EXPECT_NEAR(along(2.0) / along(1.0), 4.0, 1e-6);
  EXPECT_NEAR(along(1.0) * 6.0, 1.0 / (c.factor_vars[0] + c.resid_var), 1e-12);
}

TEST(ChartScore, GradientMatchesFiniteDifferences) {
  std::mt19937_64 gen(106);
  std::normal_distribution<double> n;
  const auto c = random_chart(7, 3, gen);
  std::vector<double> z(7);
  for (double& v : z) v = n(gen);
  const auto g = ch::chart_score_gradient(c, z);
  for (std::size_t j = 0; j < 7; ++j) {
    auto zp = z, zm = z;
    zp[j] += 1e-5;
    zm[j] -= 1e-5;
    const double fd = (ch::chart_score(c, zp) - ch::chart_score(c, zm)) / 2e-5;
    EXPECT_NEAR(g[j], fd, 1e-6 * std::max(1.0, std::abs(fd)));
  }
}

TEST(ChartScore, DimensionMismatch) {
  std::mt19937_64 gen(107);
  const auto c = random_chart(4, 1, gen);
  EXPECT_THROW(ch::chart_score(c, std::vector<double>(3, 0.0)), spma::ValidationError);
}

TEST(SoftAssign, SingleAndIdenticalCharts) {
  std::mt19937_64 gen(108);
  const auto c = random_chart(4, 2, gen);
  const std::vector<double> z{0.3, -1.0, 2.0, 0.1};
  const ch::ChartAtlas one({c}, 1.0);
  EXPECT_EQ(one.soft_assign(z), std::vector<double>{1.0});
  const ch::ChartAtlas two({c, c}, 1.0);
  const auto p = two.soft_assign(z);
  EXPECT_NEAR(p[0], 0.5, 1e-12);
  EXPECT_NEAR(p[1], 0.5, 1e-12);
}

TEST(SoftAssign, SmallTemperatureConcentrates) {
  std::mt19937_64 gen(109);
  const auto a = random_chart(4, 1, gen);
  auto b = a;
  for (double& m : b.mu) m += 3.0;
  const ch::ChartAtlas atlas({a, b}, 0.01);
  const auto s = atlas.scores(a.mu);
  ASSERT_GE(std::abs(s[1] - s[0]), 1.0);
  const auto p = atlas.soft_assign(a.mu);
  EXPECT_GE(*std::max_element(p.begin(), p.end()), 0.99);
  EXPECT_EQ(std::max_element(p.begin(), p.end()) - p.begin(), std::min_element(s.begin(), s.end()) - s.begin());
}

TEST(BuildAtlas, RecoversBlobsAndIsDeterministic) {
  std::mt19937_64 gen(110);
  const Matrix z = blobs(100, gen);
  const auto b = ch::build_atlas(z, 2, 1, 1.0, 3);
  ASSERT_EQ(b.atlas.size(), 2u);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& mu = b.atlas.chart(k).mu;
    const double expect_x = mu[0] > 10.0 ? 20.0 : 0.0;
    const double tol = 3.0 / std::sqrt(100.0);
    EXPECT_NEAR(mu[0], expect_x, tol);
    EXPECT_NEAR(mu[1], 0.0, tol);
    EXPECT_NEAR(mu[2], 0.0, tol);
  }
  const auto again = ch::build_atlas(z, 2, 1, 1.0, 3);
  EXPECT_EQ(again.atlas, b.atlas);
  EXPECT_EQ(again.assignments, b.assignments);

  std::size_t agree = 0;
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const auto p = b.atlas.soft_assign(z.row(i));
    agree += static_cast<std::size_t>(std::max_element(p.begin(), p.end()) - p.begin()) == b.assignments[i];
  }
  EXPECT_GE(static_cast<double>(agree) / static_cast<double>(z.rows()), 0.95);
}

TEST(BuildAtlas, TinyClustersAreMerged) {
  std::mt19937_64 gen(111);
  Matrix z = blobs(30, gen);
  // Two isolated outliers would form their own (too small) clusters.
  Matrix with_outliers(62, 3);
  std::copy(z.data().begin(), z.data().end(), with_outliers.data().begin());
  for (std::size_t j = 0; j < 3; ++j) {
    with_outliers(60, j) = 200.0;
    with_outliers(61, j) = -200.0;
  }
  const auto b = ch::build_atlas(with_outliers, 4, 2, 1.0, 5);
  EXPECT_LE(b.atlas.size(), 3u);
  std::vector<std::size_t> counts(b.atlas.size(), 0);
  for (auto a : b.assignments) {
    ASSERT_LT(a, b.atlas.size());
    ++counts[a];
  }
  for (auto c : counts) EXPECT_GE(c, 4u);
}

TEST(BuildAtlas, Errors) {
  std::mt19937_64 gen(112);
  EXPECT_THROW(ch::build_atlas(oracle::random_matrix(5, 2, gen), 3, 1, 1.0, 0), spma::ValidationError);
  EXPECT_THROW(ch::build_atlas(oracle::random_matrix(6, 2, gen), 3, 1, 0.0, 0), spma::ValidationError);
  EXPECT_THROW(ch::build_atlas(oracle::random_matrix(3, 5, gen), 1, 2, 1.0, 0), spma::DegenerateError);
}

TEST(BuildAtlas, JsonRoundTripIsExact) {
  std::mt19937_64 gen(113);
  const auto b = ch::build_atlas(blobs(20, gen), 2, 2, 0.7, 1);
  const auto back = ch::atlas_from_json(nlohmann::json::parse(ch::atlas_to_json(b.atlas).dump()));
  EXPECT_EQ(back, b.atlas);
}
