#pragma once

// Fully connected tanh network with a designated latent layer, reverse-mode
// gradients, and the two optimizers used for training.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "spma/errors.hpp"
#include "spma/io.hpp"
#include "spma/matrix.hpp"

namespace spma::model {

/// Parameters are one flat vector; layer l stores W_l (out×in, row-major)
/// followed by b_l. Hidden layers use tanh, the output layer is linear.
class MlpModel {
 public:
  MlpModel() = default;
  MlpModel(std::vector<std::size_t> dims, std::size_t latent_layer) : dims_(std::move(dims)), latent_(latent_layer) {
    if (dims_.size() < 3) throw ValidationError("MlpModel: need input, at least one hidden, and output layer");
    if (latent_ < 1 || latent_ + 1 >= dims_.size())
      throw ValidationError("MlpModel: latent layer must be a hidden layer");
    for (auto d : dims_)
      if (d == 0) throw ValidationError("MlpModel: layer widths must be >= 1");
    params_.assign(parameter_count(dims_), 0.0);
  }

  /// Seeded uniform init in ±1/√fan_in for weights; biases start at 0.
  static MlpModel initialized(std::vector<std::size_t> dims, std::size_t latent_layer, std::uint64_t seed) {
    MlpModel m(std::move(dims), latent_layer);
    std::mt19937_64 gen(seed);
    for (std::size_t l = 0; l + 1 < m.dims_.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(m.dims_[l]));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (double& w : m.weights(l)) w = u(gen);
    }
    return m;
  }

  static std::size_t parameter_count(const std::vector<std::size_t>& dims) {
    std::size_t p = 0;
    for (std::size_t l = 0; l + 1 < dims.size(); ++l) p += dims[l + 1] * dims[l] + dims[l + 1];
    return p;
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t latent_layer() const { return latent_; }
  std::size_t layers() const { return dims_.size() - 1; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t output_dim() const { return dims_.back(); }
  std::size_t latent_dim() const { return dims_[latent_]; }

  std::vector<double>& params() { return params_; }
  const std::vector<double>& params() const { return params_; }

  std::span<double> weights(std::size_t l) { return {params_.data() + offset(l), dims_[l + 1] * dims_[l]}; }
  std::span<const double> weights(std::size_t l) const {
    return {params_.data() + offset(l), dims_[l + 1] * dims_[l]};
  }
  std::span<double> bias(std::size_t l) { return {params_.data() + offset(l) + dims_[l + 1] * dims_[l], dims_[l + 1]}; }
  std::span<const double> bias(std::size_t l) const {
    return {params_.data() + offset(l) + dims_[l + 1] * dims_[l], dims_[l + 1]};
  }

  std::size_t offset(std::size_t l) const {
    std::size_t o = 0;
    for (std::size_t k = 0; k < l; ++k) o += dims_[k + 1] * dims_[k] + dims_[k + 1];
    return o;
  }

  friend bool operator==(const MlpModel&, const MlpModel&) = default;

 private:
  std::vector<std::size_t> dims_;
  std::size_t latent_ = 1;
  std::vector<double> params_;
};

/// Post-activation outputs of every layer; activations[0] is the input.
struct ForwardPass {
  std::vector<Matrix> activations;

  const Matrix& logits() const { return activations.back(); }
};

inline ForwardPass forward_pass(const MlpModel& m, const Matrix& x) {
  if (x.cols() != m.input_dim())
    throw ValidationError("forward: input has " + std::to_string(x.cols()) + " columns, model expects " +
                          std::to_string(m.input_dim()));
  ForwardPass fp;
  fp.activations.reserve(m.layers() + 1);
  fp.activations.push_back(x);
  const std::size_t n = x.rows();
  for (std::size_t l = 0; l < m.layers(); ++l) {
    const Matrix& a = fp.activations.back();
    const std::size_t in = m.dims()[l], out = m.dims()[l + 1];
    const auto w = m.weights(l);
    const auto b = m.bias(l);
    Matrix z(n, out);
    const bool hidden = l + 1 < m.layers();
    for (std::size_t i = 0; i < n; ++i) {
      const auto ai = a.row(i);
      for (std::size_t o = 0; o < out; ++o) {
        double s = b[o];
        const double* wr = w.data() + o * in;
        for (std::size_t k = 0; k < in; ++k) s += wr[k] * ai[k];
        z(i, o) = hidden ? std::tanh(s) : s;
      }
    }
    fp.activations.push_back(std::move(z));
  }
  return fp;
}

struct ForwardResult {
  Matrix logits;
  Matrix latents;
};

inline ForwardResult forward(const MlpModel& m, const Matrix& x) {
  auto fp = forward_pass(m, x);
  return {std::move(fp.activations.back()), std::move(fp.activations[m.latent_layer()])};
}

/// Gradient of a scalar loss w.r.t. all parameters, given ∂L/∂logits and
/// (optionally, may be empty) ∂L/∂latents for the rows of `fp`.
inline std::vector<double> backward(const MlpModel& m, const ForwardPass& fp, const Matrix& d_logits,
                                    const Matrix& d_latents) {
  std::vector<double> grad(m.params().size(), 0.0);
  const std::size_t n = fp.activations.front().rows();
  if (d_logits.rows() != n || d_logits.cols() != m.output_dim())
    throw ValidationError("backward: logit gradient shape mismatch");
  const bool has_latent = !d_latents.empty();
  if (has_latent && (d_latents.rows() != n || d_latents.cols() != m.latent_dim()))
    throw ValidationError("backward: latent gradient shape mismatch");

  Matrix delta = d_logits;  // ∂L/∂(pre-activation) of the current layer
  for (std::size_t l = m.layers(); l-- > 0;) {
    const Matrix& a = fp.activations[l];
    const std::size_t in = m.dims()[l], out = m.dims()[l + 1];
    double* gw = grad.data() + m.offset(l);
    double* gb = gw + out * in;
    for (std::size_t i = 0; i < n; ++i) {
      const auto ai = a.row(i);
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta(i, o);
        if (d == 0.0) continue;
        gb[o] += d;
        double* gwr = gw + o * in;
        for (std::size_t k = 0; k < in; ++k) gwr[k] += d * ai[k];
      }
    }
    if (l == 0) break;
    const auto w = m.weights(l);
    Matrix da(n, in);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t o = 0; o < out; ++o) {
        const double d = delta(i, o);
        if (d == 0.0) continue;
        const double* wr = w.data() + o * in;
        for (std::size_t k = 0; k < in; ++k) da(i, k) += d * wr[k];
      }
    if (has_latent && l == m.latent_layer())
      for (std::size_t k = 0; k < da.size(); ++k) da.data()[k] += d_latents.data()[k];
    for (std::size_t k = 0; k < da.size(); ++k) {
      const double act = a.data()[k];
      da.data()[k] *= 1.0 - act * act;
    }
    delta = std::move(da);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Optimizers

enum class OptimizerKind { Adam, SgdMomentum };

inline void to_json(nlohmann::json& j, OptimizerKind k) { j = k == OptimizerKind::Adam ? "adam" : "sgd"; }

inline void from_json(const nlohmann::json& j, OptimizerKind& k) {
  const auto s = j.get<std::string>();
  if (s == "adam") k = OptimizerKind::Adam;
  else if (s == "sgd") k = OptimizerKind::SgdMomentum;
  else throw ValidationError("optimizer must be \"adam\" or \"sgd\", got \"" + s + "\"");
}

class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr, std::size_t n, double momentum = 0.9)
      : kind_(kind), lr_(lr), momentum_(momentum), m_(n, 0.0), v_(kind == OptimizerKind::Adam ? n : 0, 0.0) {}

  void step(std::vector<double>& params, std::span<const double> grad) {
    if (grad.size() != params.size()) throw ValidationError("optimizer: gradient size mismatch");
    ++t_;
    if (kind_ == OptimizerKind::SgdMomentum) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        m_[i] = momentum_ * m_[i] + grad[i];
        params[i] -= lr_ * m_[i];
      }
      return;
    }
    constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = b1 * m_[i] + (1.0 - b1) * grad[i];
      v_[i] = b2 * v_[i] + (1.0 - b2) * grad[i] * grad[i];
      params[i] -= lr_ * (m_[i] / c1) / (std::sqrt(v_[i] / c2) + eps);
    }
  }

 private:
  OptimizerKind kind_;
  double lr_;
  double momentum_;
  std::vector<double> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Checkpoint: JSON header plus the flat parameter array (base64 float64).

inline nlohmann::json checkpoint_to_json(const MlpModel& m, std::uint64_t seed, const std::string& config_hash) {
  return {{"schema_version", 1},
          {"dims", m.dims()},
          {"latent_layer", m.latent_layer()},
          {"seed", seed},
          {"config_hash", config_hash},
          {"parameter_count", m.params().size()},
          {"params_b64", io::pack_doubles(m.params())}};
}

inline MlpModel checkpoint_from_json(const nlohmann::json& j) {
  if (j.at("schema_version").get<int>() != 1) throw ValidationError("checkpoint: unsupported schema_version");
  MlpModel m(j.at("dims").get<std::vector<std::size_t>>(), j.at("latent_layer").get<std::size_t>());
  auto p = io::unpack_doubles(j.at("params_b64").get<std::string>());
  if (p.size() != m.params().size()) throw ValidationError("checkpoint: parameter count mismatch");
  m.params() = std::move(p);
  return m;
}

}  // namespace spma::model
