#pragma once

// Deterministic dense kernels: distances, top-r symmetric eigenpairs,
// tempered softmax, Pearson correlation and seeded k-means.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "spma/errors.hpp"
#include "spma/matrix.hpp"

namespace spma::linalg {

/// n×n matrix of Euclidean distances between the rows of `x`.
inline Matrix pairwise_euclidean(const Matrix& x) {
  if (x.rows() == 0) throw ValidationError("pairwise_euclidean: need at least one row");
  require_finite(x, "pairwise_euclidean");
  const std::size_t n = x.rows();
  Matrix d(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = std::sqrt(squared_distance(x.row(i), x.row(j)));
      d(i, j) = v;
      d(j, i) = v;
    }
  return d;
}

struct EigenResult {
  std::vector<double> values;  // non-increasing
  Matrix vectors;              // d×r, orthonormal columns
};

struct EigenOptions {
  std::size_t max_iterations = 10000;
  double tolerance = 1e-10;
  std::size_t oversampling = 4;
};

namespace detail {

// Cyclic Jacobi on the small projected (Ritz) matrix. Returns eigenvalues in
// `values` and eigenvectors as columns of `vecs`, unsorted.
inline void jacobi_small(Matrix a, std::vector<double>& values, Matrix& vecs) {
  const std::size_t n = a.rows();
  vecs = Matrix::identity(n);
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, total = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        total += a(i, j) * a(i, j);
        if (i != j) off += a(i, j) * a(i, j);
      }
    if (off <= 1e-30 * total || off == 0.0) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        if (a(p, q) == 0.0) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * a(p, q));
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = vecs(k, p), vkq = vecs(k, q);
          vecs(k, p) = c * vkp - s * vkq;
          vecs(k, q) = s * vkp + c * vkq;
        }
      }
  }
  values.resize(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a(i, i);
}

// Modified Gram-Schmidt in place over the columns of q (applied twice).
// Columns that collapse are replaced by the unit vector with the largest
// remaining component, so the basis always stays full rank.
inline void orthonormalize_columns(Matrix& q) {
  const std::size_t d = q.rows(), p = q.cols();
  auto project_out = [&](std::vector<double>& v, std::size_t upto) {
    for (int pass = 0; pass < 2; ++pass)
      for (std::size_t k = 0; k < upto; ++k) {
        double proj = 0.0;
        for (std::size_t i = 0; i < d; ++i) proj += q(i, k) * v[i];
        for (std::size_t i = 0; i < d; ++i) v[i] -= proj * q(i, k);
      }
  };
  std::vector<double> v(d);
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t i = 0; i < d; ++i) v[i] = q(i, j);
    const double before = std::sqrt(dot(v, v));
    project_out(v, j);
    double norm = std::sqrt(dot(v, v));
    if (norm == 0.0 || !(norm > 1e-12 * before)) {
      double best = -1.0;
      std::vector<double> cand(d);
      for (std::size_t e = 0; e < d; ++e) {
        std::fill(cand.begin(), cand.end(), 0.0);
        cand[e] = 1.0;
        project_out(cand, j);
        const double cn = std::sqrt(dot(cand, cand));
        if (cn > best) {
          best = cn;
          v = cand;
        }
      }
      norm = best;
    }
    for (std::size_t i = 0; i < d; ++i) q(i, j) = v[i] / norm;
  }
}

}  // namespace detail

/// Leading r eigenpairs of a symmetric PSD matrix by orthogonal iteration with
/// Rayleigh-Ritz projection. The block carries a few extra columns so that a
/// small gap between eigenvalue r and r+1 does not stall convergence. The
/// starting block comes from a fixed internal generator, so the result is a
/// pure function of `s`.
inline EigenResult top_r_eigen(const Matrix& s, std::size_t r, const EigenOptions& opt = {}) {
  const std::size_t d = s.rows();
  if (s.cols() != d || d == 0) throw ValidationError("top_r_eigen: matrix must be square and nonempty");
  if (r < 1 || r > d) throw ValidationError("top_r_eigen: need 1 <= r <= d");
  require_finite(s, "top_r_eigen");
  double scale = 0.0;
  for (double v : s.data()) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i + 1; j < d; ++j)
      if (std::abs(s(i, j) - s(j, i)) > 1e-10 * std::max(1.0, scale))
        throw ValidationError("top_r_eigen: matrix is not symmetric");

  const std::size_t p = std::min(d, r + opt.oversampling);
  Matrix q(d, p);
  std::mt19937_64 gen(0x5eed5eedULL);
  std::normal_distribution<double> normal;
  for (double& v : q.data()) v = normal(gen);
  detail::orthonormalize_columns(q);

  std::vector<double> ritz_vals;
  Matrix ritz_vecs;
  double residual = std::numeric_limits<double>::infinity();
  for (std::size_t it = 0; it < opt.max_iterations; ++it) {
    Matrix y = matmul(s, q);
    detail::orthonormalize_columns(y);
    q = std::move(y);
    const Matrix sq = matmul(s, q);
    Matrix h = matmul_tn(q, sq);
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = i + 1; j < p; ++j) h(i, j) = h(j, i) = 0.5 * (h(i, j) + h(j, i));
    std::vector<double> vals;
    Matrix w;
    detail::jacobi_small(h, vals, w);

    std::vector<std::size_t> order(p);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return vals[a] > vals[b]; });
    Matrix w_sorted(p, p);
    ritz_vals.assign(p, 0.0);
    for (std::size_t k = 0; k < p; ++k) {
      ritz_vals[k] = vals[order[k]];
      for (std::size_t i = 0; i < p; ++i) w_sorted(i, k) = w(i, order[k]);
    }
    ritz_vecs = matmul(q, w_sorted);
    const Matrix s_ritz = matmul(sq, w_sorted);

    residual = 0.0;
    for (std::size_t k = 0; k < r; ++k) {
      double rn = 0.0;
      for (std::size_t i = 0; i < d; ++i) {
        const double e = s_ritz(i, k) - ritz_vals[k] * ritz_vecs(i, k);
        rn += e * e;
      }
      residual = std::max(residual, std::sqrt(rn));
    }
    residual /= std::max(1.0, std::abs(ritz_vals[0]));
    q = ritz_vecs;
    if (residual < opt.tolerance) break;
  }
  if (!(residual < opt.tolerance)) {
    throw ConvergenceError("top_r_eigen: no convergence after " + std::to_string(opt.max_iterations) + " iterations",
                           residual);
  }

  EigenResult out;
  out.values.assign(ritz_vals.begin(), ritz_vals.begin() + static_cast<std::ptrdiff_t>(r));
  out.vectors = Matrix(d, r);
  for (std::size_t k = 0; k < r; ++k) {
    // Sign convention: largest-magnitude entry positive (lowest index on ties).
    std::size_t arg = 0;
    for (std::size_t i = 1; i < d; ++i)
      if (std::abs(ritz_vecs(i, k)) > std::abs(ritz_vecs(arg, k))) arg = i;
    const double sign = ritz_vecs(arg, k) < 0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < d; ++i) out.vectors(i, k) = sign * ritz_vecs(i, k);
  }
  return out;
}

/// Tempered softmax. With `negate`, returns exp(-s/τ)/Σexp(-s/τ).
inline std::vector<double> softmax_temp(std::span<const double> scores, double tau, bool negate) {
  if (!(tau > 0.0)) throw ValidationError("softmax_temp: temperature must be > 0");
  if (scores.empty()) throw ValidationError("softmax_temp: empty score vector");
  std::vector<double> z(scores.size());
  for (std::size_t k = 0; k < scores.size(); ++k) {
    if (!std::isfinite(scores[k])) throw ValidationError("softmax_temp: non-finite score");
    z[k] = (negate ? -scores[k] : scores[k]) / tau;
  }
  const double m = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double& v : z) {
    v = std::exp(v - m);
    total += v;
  }
  for (double& v : z) v /= total;
  return z;
}

/// log Σ exp(v), max-shifted.
inline double log_sum_exp(std::span<const double> v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw ValidationError("pearson: length mismatch");
  if (a.size() < 2) throw ValidationError("pearson: need at least two values");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 || sbb == 0.0) throw DegenerateError("pearson: zero variance, correlation undefined");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

struct KMeansResult {
  std::vector<std::size_t> assignments;
  Matrix centers;                         // K×d
  std::vector<double> objective_history;  // within-cluster SS after each assignment step
  std::size_t iterations = 0;

  double objective() const { return objective_history.back(); }
};

struct KMeansOptions {
  std::size_t max_iterations = 100;
};

namespace detail {

inline std::size_t nearest_center(std::span<const double> x, const Matrix& centers, double& best_d2) {
  std::size_t best = 0;
  best_d2 = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centers.rows(); ++k) {
    const double d2 = squared_distance(x, centers.row(k));
    if (d2 < best_d2) {
      best_d2 = d2;
      best = k;
    }
  }
  return best;
}

}  // namespace detail

/// Lloyd's algorithm with k-means++ seeding. Stops when the assignment set is
/// unchanged or after `max_iterations`. Empty clusters are re-seeded from the
/// point currently farthest from its center.
inline KMeansResult kmeans(const Matrix& x, std::size_t k, std::uint64_t seed, const KMeansOptions& opt = {}) {
  const std::size_t n = x.rows(), d = x.cols();
  if (k < 1) throw ValidationError("kmeans: K must be >= 1");
  if (k > n) throw ValidationError("kmeans: K=" + std::to_string(k) + " exceeds n=" + std::to_string(n));
  require_finite(x, "kmeans");

  std::mt19937_64 gen(seed);
  Matrix centers(k, d);
  std::vector<char> chosen(n, 0);
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t first = std::uniform_int_distribution<std::size_t>(0, n - 1)(gen);
  auto place = [&](std::size_t c, std::size_t idx) {
    chosen[idx] = 1;
    std::copy(x.row(idx).begin(), x.row(idx).end(), centers.row(c).begin());
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(x.row(i), centers.row(c)));
  };
  place(0, first);
  for (std::size_t c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = n;
    if (total > 0.0) {
      const double target = std::uniform_real_distribution<double>(0.0, total)(gen);
      double acc = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (d2[i] > 0.0 && acc >= target) {
          pick = i;
          break;
        }
      }
      if (pick == n)
        for (std::size_t i = n; i-- > 0;)
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
    } else {
      for (std::size_t i = 0; i < n; ++i)
        if (!chosen[i]) {
          pick = i;
          break;
        }
    }
    place(c, pick);
  }

  KMeansResult res;
  res.assignments.assign(n, k);  // sentinel: nothing assigned yet
  std::vector<std::size_t> next(n);
  std::vector<double> dist2(n);
  auto assign = [&] {
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      next[i] = detail::nearest_center(x.row(i), centers, dist2[i]);
      obj += dist2[i];
    }
    res.objective_history.push_back(obj);
  };

  bool converged = false;
  for (std::size_t it = 0; it < opt.max_iterations; ++it) {
    assign();
    ++res.iterations;
    if (next == res.assignments) {
      converged = true;
      break;
    }
    res.assignments = next;

    Matrix sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = res.assignments[i];
      ++counts[c];
      for (std::size_t j = 0; j < d; ++j) sums(c, j) += x(i, j);
    }
    for (std::size_t c = 0; c < k; ++c)
      if (counts[c] > 0)
        for (std::size_t j = 0; j < d; ++j) centers(c, j) = sums(c, j) / static_cast<double>(counts[c]);
    for (std::size_t i = 0; i < n; ++i) dist2[i] = squared_distance(x.row(i), centers.row(res.assignments[i]));
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] > 0) continue;
      const std::size_t far =
          static_cast<std::size_t>(std::max_element(dist2.begin(), dist2.end()) - dist2.begin());
      std::copy(x.row(far).begin(), x.row(far).end(), centers.row(c).begin());
      dist2[far] = 0.0;
    }
  }
  if (!converged) {
    assign();
    res.assignments = next;
  }
  res.centers = std::move(centers);
  return res;
}

}  // namespace spma::linalg
