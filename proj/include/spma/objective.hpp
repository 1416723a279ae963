#pragma once

// Loss terms of the geometry-preserving fine-tuning objective and their
// composition with the α(t)/β(t) retention schedules.
//
// Every loss takes an optional gradient out-parameter that receives the
// derivative with respect to the *student* block only (logits, latent
// features or parameters). Teacher-side inputs are plain constants here, so no
// gradient path into them exists.

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "spma/charts.hpp"
#include "spma/errors.hpp"
#include "spma/linalg.hpp"
#include "spma/matrix.hpp"

namespace spma::objective {

enum class Method { PlainFT, AnchorCE, ER, OldGeometry, SpmaOG };

inline constexpr std::array<Method, 5> kAllMethods{Method::PlainFT, Method::AnchorCE, Method::ER, Method::OldGeometry,
                                                   Method::SpmaOG};

inline std::string_view method_name(Method m) {
  switch (m) {
    case Method::PlainFT: return "PlainFT";
    case Method::AnchorCE: return "AnchorCE";
    case Method::ER: return "ER";
    case Method::OldGeometry: return "OldGeometry";
    case Method::SpmaOG: return "SPMA-OG";
  }
  return "?";
}

inline Method parse_method(std::string_view s) {
  for (Method m : kAllMethods)
    if (method_name(m) == s) return m;
  throw ValidationError("unknown method '" + std::string(s) + "'");
}

inline void to_json(nlohmann::json& j, Method m) { j = std::string(method_name(m)); }
inline void from_json(const nlohmann::json& j, Method& m) { m = parse_method(j.get<std::string>()); }

struct Schedule {
  double alpha_start = 1.0;
  double alpha_end = 0.0;
  double beta_start = 1.0;
  double beta_end = 0.5;

  friend bool operator==(const Schedule&, const Schedule&) = default;
};

struct ObjectiveConfig {
  double lambda_kd = 1.0;
  double lambda_anchor = 1.0;
  double lambda_geo = 5.0;
  double lambda_smooth = 5.0;
  double lambda_chart = 1.0;
  double lambda_reg = 0.1;
  // Reserved names for the new-sample continuation/support terms. No formula
  // exists for them, so any nonzero value is rejected.
  double lambda_cont = 0.0;
  double lambda_support = 0.0;
  double kd_temperature = 2.0;
  double smooth_temperature = 1.0;
  std::size_t knn = 5;
  Schedule schedule;

  friend bool operator==(const ObjectiveConfig&, const ObjectiveConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(Schedule, alpha_start, alpha_end, beta_start, beta_end)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ObjectiveConfig, lambda_kd, lambda_anchor, lambda_geo, lambda_smooth, lambda_chart,
                                   lambda_reg, lambda_cont, lambda_support, kd_temperature, smooth_temperature, knn,
                                   schedule)

inline void validate(const ObjectiveConfig& c) {
  for (double w : {c.lambda_kd, c.lambda_anchor, c.lambda_geo, c.lambda_smooth, c.lambda_chart, c.lambda_reg})
    if (!(w >= 0.0)) throw ValidationError("objective: loss weights must be >= 0");
  if (c.lambda_cont != 0.0 || c.lambda_support != 0.0)
    throw ValidationError("objective: lambda_cont and lambda_support are reserved and must be 0");
  if (!(c.kd_temperature > 0.0) || !(c.smooth_temperature > 0.0))
    throw ValidationError("objective: temperatures must be > 0");
  if (c.knn < 1) throw ValidationError("objective: knn must be >= 1");
  for (double s : {c.schedule.alpha_start, c.schedule.alpha_end, c.schedule.beta_start, c.schedule.beta_end})
    if (!(s >= 0.0 && s <= 1.0)) throw ValidationError("objective: schedule endpoints must lie in [0, 1]");
}

/// Linear ramp from `start` at t = 0 to `end` at t = total.
inline double schedule_value(double start, double end, double t, double total) {
  if (total == 0.0) return start;
  return start + (end - start) * t / total;
}

// ---------------------------------------------------------------------------
// Output-space losses

/// Mean cross-entropy. Gradient w.r.t. logits is (softmax − onehot)/m.
inline double loss_ce(const Matrix& logits, std::span<const std::size_t> labels, Matrix* grad = nullptr) {
  const std::size_t m = logits.rows(), c = logits.cols();
  if (labels.size() != m) throw ValidationError("loss_ce: label count does not match batch");
  if (grad) *grad = Matrix(m, c);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    if (labels[i] >= c) throw ValidationError("loss_ce: label out of range");
    const auto row = logits.row(i);
    const double lse = linalg::log_sum_exp(row);
    total += lse - row[labels[i]];
    if (grad) {
      for (std::size_t k = 0; k < c; ++k) (*grad)(i, k) = std::exp(row[k] - lse) / static_cast<double>(m);
      (*grad)(i, labels[i]) -= 1.0 / static_cast<double>(m);
    }
  }
  return total / static_cast<double>(m);
}

/// (T²/m) Σ KL(σ(teacher/T) ‖ σ(student/T)).
inline double loss_kd(const Matrix& student, const Matrix& teacher, double temperature, Matrix* grad = nullptr) {
  if (student.rows() != teacher.rows() || student.cols() != teacher.cols())
    throw ValidationError("loss_kd: student and teacher logits differ in shape");
  if (!(temperature > 0.0)) throw ValidationError("loss_kd: temperature must be > 0");
  const std::size_t m = student.rows(), c = student.cols();
  if (grad) *grad = Matrix(m, c);
  std::vector<double> ls(c), lt(c);
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < c; ++k) {
      ls[k] = student(i, k) / temperature;
      lt[k] = teacher(i, k) / temperature;
    }
    const double lse_s = linalg::log_sum_exp(ls), lse_t = linalg::log_sum_exp(lt);
    for (std::size_t k = 0; k < c; ++k) {
      const double log_pt = lt[k] - lse_t, log_ps = ls[k] - lse_s;
      const double pt = std::exp(log_pt);
      total += pt * (log_pt - log_ps);
      if (grad) (*grad)(i, k) = temperature / static_cast<double>(m) * (std::exp(log_ps) - pt);
    }
  }
  return std::max(0.0, temperature * temperature * total / static_cast<double>(m));
}

// ---------------------------------------------------------------------------
// Latent-geometry losses

struct NormalizedDistanceMatrix {
  Matrix values;             // D̃, symmetric with zero diagonal
  Matrix raw;                // unnormalized distances
  double mean_offdiag = 0.0;
};

/// D̃_ij = ‖z_i − z_j‖ / (mean off-diagonal distance).
inline NormalizedDistanceMatrix normalized_distances(const Matrix& z) {
  const std::size_t m = z.rows();
  if (m < 2) throw ValidationError("normalized_distances: need at least two points");
  NormalizedDistanceMatrix out;
  out.raw = linalg::pairwise_euclidean(z);
  double sum = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) sum += out.raw(i, j);
  out.mean_offdiag = 2.0 * sum / static_cast<double>(m * (m - 1));
  if (!(out.mean_offdiag > 0.0)) throw DegenerateError("normalized_distances: all points coincide");
  out.values = out.raw;
  for (double& v : out.values.data()) v /= out.mean_offdiag;
  return out;
}

/// Mask of teacher k-nearest-neighbor pairs (ties by lower index), symmetrized
/// by union; diagonal always false. Stored row-major, m×m.
inline std::vector<char> teacher_knn_mask(const NormalizedDistanceMatrix& teacher, std::size_t k) {
  const std::size_t m = teacher.values.rows();
  if (k < 1 || k >= m) throw ValidationError("teacher_knn_mask: need 1 <= k < m");
  std::vector<char> mask(m * m, 0);
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < m; ++i) {
    order.clear();
    for (std::size_t j = 0; j < m; ++j)
      if (j != i) order.push_back(j);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return teacher.values(i, a) < teacher.values(i, b); });
    for (std::size_t r = 0; r < k; ++r) {
      mask[i * m + order[r]] = 1;
      mask[order[r] * m + i] = 1;
    }
  }
  return mask;
}

namespace detail {

// Back-propagates ∂L/∂d_ij (ordered pairs) to the rows of z.
inline Matrix distance_grad_to_features(const Matrix& z, const Matrix& dist, const Matrix& g_dist) {
  const std::size_t m = z.rows(), d = z.cols();
  Matrix gz(m, d);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      const double w = g_dist(i, j) + g_dist(j, i);
      if (w == 0.0 || dist(i, j) == 0.0) continue;  // zero subgradient at coincident points
      const double s = w / dist(i, j);
      for (std::size_t c = 0; c < d; ++c) {
        const double delta = s * (z(i, c) - z(j, c));
        gz(i, c) += delta;
        gz(j, c) -= delta;
      }
    }
  return gz;
}

// Shared core of L_geo / L_smooth: Σ_ij W_ij e_ij² / Σ W_ij over ordered
// off-diagonal pairs, e = D̃(z) − D̃(z₀). `weights` is m×m and zero where a
// pair is excluded.
inline double weighted_distortion(const Matrix& student, const NormalizedDistanceMatrix& teacher,
                                  const Matrix& weights, Matrix* grad) {
  const std::size_t m = student.rows();
  if (teacher.values.rows() != m) throw ValidationError("geometry loss: teacher and student batch sizes differ");
  const auto nd = normalized_distances(student);
  const double npairs = static_cast<double>(m * (m - 1));
  double wsum = 0.0, num = 0.0, cross = 0.0;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      if (i == j || weights(i, j) == 0.0) continue;
      const double e = nd.values(i, j) - teacher.values(i, j);
      wsum += weights(i, j);
      num += weights(i, j) * e * e;
      cross += weights(i, j) * e * nd.values(i, j);
    }
  if (!(wsum > 0.0)) throw DegenerateError("geometry loss: no weighted pairs");
  if (grad) {
    // ∂L/∂d_kl = 2/(W·mbar) · (W_kl e_kl − Σ W e D̃ / N)
    Matrix g(m, m);
    const double scale = 2.0 / (wsum * nd.mean_offdiag);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        if (i == j) continue;
        const double e = nd.values(i, j) - teacher.values(i, j);
        g(i, j) = scale * (weights(i, j) * e - cross / npairs);
      }
    *grad = distance_grad_to_features(student, nd.raw, g);
  }
  return num / wsum;
}

}  // namespace detail

/// (1/(m(m−1))) Σ_{i≠j} (D̃_ij(z) − D̃_ij(z₀))².
inline double loss_geo(const Matrix& student, const NormalizedDistanceMatrix& teacher, Matrix* grad = nullptr) {
  const std::size_t m = student.rows();
  Matrix ones(m, m, 1.0);
  for (std::size_t i = 0; i < m; ++i) ones(i, i) = 0.0;
  return detail::weighted_distortion(student, teacher, ones, grad);
}

/// Σ_M w_ij (D̃_ij(z) − D̃_ij(z₀))² / Σ_M w_ij over teacher-kNN pairs M,
/// w_ij = exp(−D̃_ij(z₀)/τ_s).
inline double loss_smooth(const Matrix& student, const NormalizedDistanceMatrix& teacher, std::span<const char> mask,
                          double tau_s, Matrix* grad = nullptr) {
  const std::size_t m = student.rows();
  if (!(tau_s > 0.0)) throw ValidationError("loss_smooth: tau_s must be > 0");
  if (mask.size() != m * m) throw ValidationError("loss_smooth: mask shape mismatch");
  Matrix w(m, m);
  bool any = false;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < m; ++j)
      if (i != j && mask[i * m + j]) {
        w(i, j) = std::exp(-teacher.values(i, j) / tau_s);
        any = true;
      }
  if (!any) throw DegenerateError("loss_smooth: empty neighbor mask");
  return detail::weighted_distortion(student, teacher, w, grad);
}

/// τ_c² · mean_i KL(p(z₀_i) ‖ p(z_i)) with soft chart assignments.
inline double loss_chart(const Matrix& student, const Matrix& teacher_assign, const charts::ChartAtlas& atlas,
                         Matrix* grad = nullptr) {
  const std::size_t m = student.rows(), kc = atlas.size();
  if (student.cols() != atlas.feature_dim()) throw ValidationError("loss_chart: feature dimension mismatch");
  if (teacher_assign.rows() != m || teacher_assign.cols() != kc)
    throw ValidationError("loss_chart: teacher assignment shape mismatch");
  const double tau = atlas.tau_c();
  if (grad) *grad = Matrix(m, student.cols());
  double total = 0.0;
  std::vector<double> neg(kc);
  for (std::size_t i = 0; i < m; ++i) {
    const auto z = student.row(i);
    const auto s = atlas.scores(z);
    for (std::size_t k = 0; k < kc; ++k) neg[k] = -s[k] / tau;
    const double lse = linalg::log_sum_exp(neg);
    for (std::size_t k = 0; k < kc; ++k) {
      const double p0 = teacher_assign(i, k);
      if (p0 > 0.0) total += p0 * (std::log(p0) - (neg[k] - lse));
    }
    if (grad && kc > 1) {
      for (std::size_t k = 0; k < kc; ++k) {
        const double coeff = tau / static_cast<double>(m) * (teacher_assign(i, k) - std::exp(neg[k] - lse));
        if (coeff == 0.0) continue;
        const auto gs = charts::chart_score_gradient(atlas.chart(k), z);
        for (std::size_t c = 0; c < gs.size(); ++c) (*grad)(i, c) += coeff * gs[c];
      }
    }
  }
  return std::max(0.0, tau * tau * total / static_cast<double>(m));
}

/// Mean squared parameter drift from θ₀.
inline double loss_reg(std::span<const double> theta, std::span<const double> theta0,
                       std::vector<double>* grad = nullptr) {
  if (theta.size() != theta0.size()) throw ValidationError("loss_reg: parameter shapes differ");
  if (theta.empty()) return 0.0;
  const double p = static_cast<double>(theta.size());
  if (grad) grad->assign(theta.size(), 0.0);
  double s = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double d = theta[i] - theta0[i];
    s += d * d;
    if (grad) (*grad)[i] = 2.0 * d / p;
  }
  return s / p;
}

// ---------------------------------------------------------------------------
// Composition

/// Anchor-batch blocks. Teacher blocks and everything derived from them (soft
/// assignments, normalized distances, kNN mask) are fixed when the context is
/// built.
struct AnchorBatchContext {
  Matrix student_features;
  Matrix student_logits;
  Matrix teacher_features;
  Matrix teacher_logits;
  std::vector<std::size_t> labels;
  Matrix teacher_assign;  // m×K, empty when no atlas
  NormalizedDistanceMatrix teacher_distances;
  std::vector<char> knn_mask;
};

inline AnchorBatchContext make_anchor_context(Matrix student_features, Matrix student_logits,
                                              Matrix teacher_features, Matrix teacher_logits,
                                              std::vector<std::size_t> labels, const charts::ChartAtlas* atlas,
                                              std::size_t knn) {
  AnchorBatchContext ctx;
  const std::size_t m = student_features.rows();
  if (student_logits.rows() != m || teacher_features.rows() != m || teacher_logits.rows() != m || labels.size() != m)
    throw ValidationError("anchor context: blocks disagree on batch size");
  if (teacher_features.cols() != student_features.cols() || teacher_logits.cols() != student_logits.cols())
    throw ValidationError("anchor context: teacher/student shapes differ");
  ctx.student_features = std::move(student_features);
  ctx.student_logits = std::move(student_logits);
  ctx.teacher_features = std::move(teacher_features);
  ctx.teacher_logits = std::move(teacher_logits);
  ctx.labels = std::move(labels);
  if (atlas) {
    ctx.teacher_assign = Matrix(m, atlas->size());
    for (std::size_t i = 0; i < m; ++i) {
      const auto p = atlas->soft_assign(ctx.teacher_features.row(i));
      std::copy(p.begin(), p.end(), ctx.teacher_assign.row(i).begin());
    }
  }
  if (m >= 2) {
    ctx.teacher_distances = normalized_distances(ctx.teacher_features);
    ctx.knn_mask = teacher_knn_mask(ctx.teacher_distances, std::min(knn, m - 1));
  }
  return ctx;
}

/// Effective multiplier on each raw term after method preset and schedules.
struct EffectiveWeights {
  double alpha = 0.0, beta = 0.0;
  double anchor = 0.0, kd = 0.0, geo = 0.0, smooth = 0.0, chart = 0.0, reg = 0.0;

  bool uses_anchors() const { return anchor != 0.0 || kd != 0.0 || geo != 0.0 || smooth != 0.0 || chart != 0.0; }
};

inline EffectiveWeights effective_weights(const ObjectiveConfig& cfg, Method method, double t, double total_steps) {
  EffectiveWeights w;
  const auto& s = cfg.schedule;
  w.alpha = schedule_value(s.alpha_start, s.alpha_end, t, total_steps);
  w.beta = schedule_value(s.beta_start, s.beta_end, t, total_steps);
  switch (method) {
    case Method::PlainFT:
      break;
    case Method::AnchorCE:
    case Method::ER:
      w.beta = 1.0;
      w.anchor = cfg.lambda_anchor;
      break;
    case Method::OldGeometry:
      w.anchor = w.beta * cfg.lambda_anchor;
      w.geo = w.alpha * cfg.lambda_geo;
      w.smooth = w.alpha * cfg.lambda_smooth;
      break;
    case Method::SpmaOG:
      w.anchor = w.beta * cfg.lambda_anchor;
      w.kd = w.alpha * cfg.lambda_kd;
      w.geo = w.alpha * cfg.lambda_geo;
      w.smooth = w.alpha * cfg.lambda_smooth;
      w.chart = w.alpha * cfg.lambda_chart;
      w.reg = w.alpha * cfg.lambda_reg;
      break;
  }
  return w;
}

/// Raw (unweighted) term values; terms with zero effective weight are not
/// evaluated and read 0.
struct LossBreakdown {
  double new_ce = 0.0, anchor_ce = 0.0, kd = 0.0, geo = 0.0, smooth = 0.0, chart = 0.0, reg = 0.0;
  double total = 0.0;
  EffectiveWeights weights;

  std::array<double, 7> terms() const { return {new_ce, anchor_ce, kd, geo, smooth, chart, reg}; }
  std::array<double, 7> term_weights() const {
    return {1.0, weights.anchor, weights.kd, weights.geo, weights.smooth, weights.chart, weights.reg};
  }
};

struct LossGradients {
  Matrix new_logits;
  Matrix anchor_logits;
  Matrix anchor_features;
  std::vector<double> params;  // direct parameter term (drift penalty)
};

struct LossInputs {
  const Matrix& new_logits;
  std::span<const std::size_t> new_labels;
  const AnchorBatchContext* anchors = nullptr;
  const charts::ChartAtlas* atlas = nullptr;
  std::span<const double> theta;
  std::span<const double> theta0;
};

/// L_new + β λ_anchor L_anchor + α(λ_KD L_KD + λ_geo L_geo + λ_smooth L_smooth
/// + λ_chart L_chart + λ_reg L_reg), with the preset zeroing per method.
inline LossBreakdown total_loss(const LossInputs& in, const ObjectiveConfig& cfg, Method method, double t,
                                double total_steps, LossGradients* grads = nullptr) {
  LossBreakdown b;
  b.weights = effective_weights(cfg, method, t, total_steps);
  const auto& w = b.weights;

  b.new_ce = loss_ce(in.new_logits, in.new_labels, grads ? &grads->new_logits : nullptr);
  b.total = b.new_ce;

  if (w.uses_anchors()) {
    if (!in.anchors) throw ValidationError("total_loss: method requires an anchor batch");
    const auto& ctx = *in.anchors;
    if (grads) {
      grads->anchor_logits = Matrix(ctx.student_logits.rows(), ctx.student_logits.cols());
      grads->anchor_features = Matrix(ctx.student_features.rows(), ctx.student_features.cols());
    }
    Matrix g;
    auto accumulate = [&](Matrix& into, double weight) {
      for (std::size_t i = 0; i < into.size(); ++i) into.data()[i] += weight * g.data()[i];
    };
    if (w.anchor != 0.0) {
      b.anchor_ce = loss_ce(ctx.student_logits, ctx.labels, grads ? &g : nullptr);
      b.total += w.anchor * b.anchor_ce;
      if (grads) accumulate(grads->anchor_logits, w.anchor);
    }
    if (w.kd != 0.0) {
      b.kd = loss_kd(ctx.student_logits, ctx.teacher_logits, cfg.kd_temperature, grads ? &g : nullptr);
      b.total += w.kd * b.kd;
      if (grads) accumulate(grads->anchor_logits, w.kd);
    }
    if (w.geo != 0.0) {
      b.geo = loss_geo(ctx.student_features, ctx.teacher_distances, grads ? &g : nullptr);
      b.total += w.geo * b.geo;
      if (grads) accumulate(grads->anchor_features, w.geo);
    }
    if (w.smooth != 0.0) {
      b.smooth = loss_smooth(ctx.student_features, ctx.teacher_distances, ctx.knn_mask, cfg.smooth_temperature,
                             grads ? &g : nullptr);
      b.total += w.smooth * b.smooth;
      if (grads) accumulate(grads->anchor_features, w.smooth);
    }
    if (w.chart != 0.0) {
      if (!in.atlas) throw ValidationError("total_loss: chart term requires an atlas");
      b.chart = loss_chart(ctx.student_features, ctx.teacher_assign, *in.atlas, grads ? &g : nullptr);
      b.total += w.chart * b.chart;
      if (grads) accumulate(grads->anchor_features, w.chart);
    }
  }
  if (grads) grads->params.clear();
  if (w.reg != 0.0) {
    std::vector<double> gp;
    b.reg = loss_reg(in.theta, in.theta0, grads ? &gp : nullptr);
    b.total += w.reg * b.reg;
    if (grads) {
      for (double& v : gp) v *= w.reg;
      grads->params = std::move(gp);
    }
  }
  return b;
}

}  // namespace spma::objective
