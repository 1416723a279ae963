#pragma once

// Accuracy and representation metrics reported per run.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "json.hpp"
#include "spma/charts.hpp"
#include "spma/errors.hpp"
#include "spma/linalg.hpp"
#include "spma/matrix.hpp"
#include "spma/model.hpp"
#include "spma/synthetic.hpp"
#include "spma/trainer.hpp"

namespace spma::metrics {

/// Fraction of rows whose argmax logit (lowest index on ties) equals the label.
inline double accuracy(const Matrix& logits, std::span<const std::size_t> labels) {
  if (logits.rows() == 0) throw ValidationError("accuracy: empty input");
  if (labels.size() != logits.rows()) throw ValidationError("accuracy: label count mismatch");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    const auto r = logits.row(i);
    const auto arg = static_cast<std::size_t>(std::max_element(r.begin(), r.end()) - r.begin());
    correct += arg == labels[i];
  }
  return static_cast<double>(correct) / static_cast<double>(logits.rows());
}

inline double harmonic_mean(double a, double b) { return a + b > 0.0 ? 2.0 * a * b / (a + b) : 0.0; }

inline double forgetting(double old_before, double old_after) { return old_before - old_after; }

namespace detail {

inline Matrix center_columns(const Matrix& x) {
  Matrix c = x;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    double m = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) m += x(i, j);
    m /= static_cast<double>(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) c(i, j) -= m;
  }
  return c;
}

}  // namespace detail

/// Centered linear CKA: ‖Y_cᵀX_c‖_F² / (‖X_cᵀX_c‖_F · ‖Y_cᵀY_c‖_F).
inline double linear_cka(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) throw ValidationError("linear_cka: sample counts differ");
  if (x.rows() < 2) throw ValidationError("linear_cka: need at least two samples");
  const Matrix xc = detail::center_columns(x), yc = detail::center_columns(y);
  const double xx = frobenius_norm(matmul_tn(xc, xc));
  const double yy = frobenius_norm(matmul_tn(yc, yc));
  if (xx == 0.0 || yy == 0.0) throw DegenerateError("linear_cka: zero-variance representation");
  const double xy = frobenius_norm(matmul_tn(yc, xc));
  return std::clamp(xy * xy / (xx * yy), 0.0, 1.0);
}

inline std::vector<double> upper_triangle(const Matrix& d) {
  std::vector<double> v;
  v.reserve(d.rows() * (d.rows() - 1) / 2);
  for (std::size_t i = 0; i < d.rows(); ++i)
    for (std::size_t j = i + 1; j < d.cols(); ++j) v.push_back(d(i, j));
  return v;
}

/// Pearson correlation of the i<j pairwise Euclidean distances of x and y.
inline double distance_correlation(const Matrix& x, const Matrix& y) {
  if (x.rows() != y.rows()) throw ValidationError("distance_correlation: sample counts differ");
  if (x.rows() < 3) throw ValidationError("distance_correlation: need at least three samples");
  return linalg::pearson(upper_triangle(linalg::pairwise_euclidean(x)),
                         upper_triangle(linalg::pairwise_euclidean(y)));
}

/// Threshold = q-quantile (order statistic ⌈q·n⌉) of the best chart score of
/// the teacher anchors; returns the fraction of probes scoring at or below it.
inline double support_inclusion(const charts::ChartAtlas& atlas, const Matrix& teacher_anchor_features,
                                const Matrix& probe, double q) {
  if (!(q > 0.0 && q < 1.0)) throw ValidationError("support_inclusion: q must lie in (0, 1)");
  const std::size_t n = teacher_anchor_features.rows();
  if (n == 0 || probe.rows() == 0) throw ValidationError("support_inclusion: empty feature set");
  std::vector<double> ref(n);
  for (std::size_t i = 0; i < n; ++i) ref[i] = atlas.min_score(teacher_anchor_features.row(i));
  std::sort(ref.begin(), ref.end());
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(n)));
  const double threshold = ref[std::clamp<std::size_t>(rank, 1, n) - 1];
  std::size_t inside = 0;
  for (std::size_t i = 0; i < probe.rows(); ++i) inside += atlas.min_score(probe.row(i)) <= threshold;
  return static_cast<double>(inside) / static_cast<double>(probe.rows());
}

struct RunResult {
  double old_before = 0.0;
  double old_after = 0.0;
  double new_after = 0.0;
  double forgetting = 0.0;
  double harmonic_mean = 0.0;
  double cka = 0.0;
  double dist_corr = 0.0;
  double support_in = 0.0;

  friend bool operator==(const RunResult&, const RunResult&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(RunResult, old_before, old_after, new_after, forgetting, harmonic_mean, cka,
                                   dist_corr, support_in)

inline RunResult evaluate_run(const trainer::Teacher& teacher, const model::MlpModel& student,
                              const synthetic::BenchmarkBundle& bundle, const charts::ChartAtlas& atlas, double q) {
  if (teacher.model.dims() != student.dims()) throw ValidationError("evaluate_run: teacher/student shapes differ");
  RunResult r;
  r.old_before = accuracy(model::forward(teacher.model, bundle.old_test.inputs).logits, bundle.old_test.labels);
  const auto old_student = model::forward(student, bundle.old_test.inputs);
  r.old_after = accuracy(old_student.logits, bundle.old_test.labels);
  r.new_after = accuracy(model::forward(student, bundle.new_test.inputs).logits, bundle.new_test.labels);
  r.forgetting = forgetting(r.old_before, r.old_after);
  r.harmonic_mean = harmonic_mean(r.old_after, r.new_after);
  const Matrix student_anchor = model::forward(student, teacher.anchors.inputs).latents;
  r.cka = linear_cka(student_anchor, teacher.anchor_features);
  r.dist_corr = distance_correlation(student_anchor, teacher.anchor_features);
  r.support_in = support_inclusion(atlas, teacher.anchor_features, old_student.latents, q);
  return r;
}

}  // namespace spma::metrics
