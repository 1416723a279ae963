#pragma once

// Teacher training on the old view and student fine-tuning on the new view
// under the composite retention objective.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "spma/charts.hpp"
#include "spma/errors.hpp"
#include "spma/io.hpp"
#include "spma/model.hpp"
#include "spma/objective.hpp"
#include "spma/synthetic.hpp"

namespace spma::trainer {

using model::MlpModel;
using objective::Method;

struct TrainConfig {
  model::OptimizerKind optimizer = model::OptimizerKind::Adam;
  std::vector<std::size_t> hidden = {64, 32};  // the last hidden layer is the latent layer
  double teacher_lr = 1e-3;
  double finetune_lr = 5e-4;
  double momentum = 0.9;
  std::size_t batch_size = 64;
  std::size_t replay_batch_size = 64;
  std::size_t teacher_epochs = 30;
  std::size_t finetune_epochs = 15;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(TrainConfig, optimizer, hidden, teacher_lr, finetune_lr, momentum, batch_size,
                                   replay_batch_size, teacher_epochs, finetune_epochs)

inline void validate(const TrainConfig& c) {
  if (c.hidden.empty()) throw ValidationError("train: need at least one hidden layer");
  if (c.batch_size < 1 || c.replay_batch_size < 2) throw ValidationError("train: batch sizes too small");
  if (!(c.teacher_lr >= 0.0) || !(c.finetune_lr >= 0.0)) throw ValidationError("train: learning rates must be >= 0");
}

/// Replay batch per method: Anchor CE replays half the ER budget.
inline std::size_t replay_batch_for(Method m, const TrainConfig& c) {
  return m == Method::AnchorCE ? std::max<std::size_t>(2, c.replay_batch_size / 2) : c.replay_batch_size;
}

/// Frozen old-task model plus its cached anchor outputs.
struct Teacher {
  MlpModel model;
  synthetic::LabeledSplit anchors;
  Matrix anchor_features;
  Matrix anchor_logits;
};

namespace detail {

inline std::vector<std::size_t> permutation(std::size_t n, std::mt19937_64& gen) {
  std::vector<std::size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  std::shuffle(p.begin(), p.end(), gen);
  return p;
}

}  // namespace detail

inline Teacher train_teacher(const synthetic::BenchmarkBundle& bundle, const TrainConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  const auto& train = bundle.old_train;
  if (train.inputs.rows() == 0) throw ValidationError("train_teacher: empty old_train split");
  std::vector<std::size_t> dims{bundle.config.input_dim};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(bundle.config.num_classes);
  MlpModel net = MlpModel::initialized(dims, cfg.hidden.size(), io::derive_seed(seed, 31));
  model::Optimizer opt(cfg.optimizer, cfg.teacher_lr, net.params().size(), cfg.momentum);
  std::mt19937_64 gen(io::derive_seed(seed, 32));

  const std::size_t n = train.inputs.rows();
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.teacher_epochs; ++epoch) {
    const auto order = detail::permutation(n, gen);
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, n - start));
      const Matrix x = train.inputs.gather_rows(idx);
      std::vector<std::size_t> y;
      for (auto i : idx) y.push_back(train.labels[i]);
      const auto fp = model::forward_pass(net, x);
      Matrix g;
      const double loss = objective::loss_ce(fp.logits(), y, &g);
      if (!std::isfinite(loss)) throw TrainingError("train_teacher: non-finite loss", step);
      opt.step(net.params(), model::backward(net, fp, g, Matrix{}));
    }
  }

  Teacher t;
  t.model = std::move(net);
  t.anchors = bundle.anchors();
  auto out = model::forward(t.model, t.anchors.inputs);
  t.anchor_features = std::move(out.latents);
  t.anchor_logits = std::move(out.logits);
  return t;
}

/// Cluster-stratified replay: round-robin over clusters starting at a random
/// cluster, uniform without replacement inside each cluster.
inline std::vector<std::size_t> sample_anchor_batch(std::span<const std::size_t> cluster_of, std::size_t size,
                                                    std::mt19937_64& gen) {
  if (size > cluster_of.size()) throw ValidationError("sample_anchor_batch: size exceeds anchor count");
  const std::size_t k = cluster_of.empty() ? 0 : *std::max_element(cluster_of.begin(), cluster_of.end()) + 1;
  std::vector<std::vector<std::size_t>> members(k);
  for (std::size_t i = 0; i < cluster_of.size(); ++i) members[cluster_of[i]].push_back(i);
  for (auto& m : members) std::shuffle(m.begin(), m.end(), gen);
  std::vector<std::size_t> cursor(k, 0), out;
  out.reserve(size);
  std::size_t c = k ? std::uniform_int_distribution<std::size_t>(0, k - 1)(gen) : 0;
  while (out.size() < size) {
    if (cursor[c] < members[c].size()) out.push_back(members[c][cursor[c]++]);
    c = (c + 1) % k;
  }
  return out;
}

/// One objective evaluation for a fixed new batch and anchor batch.
struct StepInputs {
  const Matrix& new_inputs;
  std::span<const std::size_t> new_labels;
  std::span<const std::size_t> anchor_rows;  // rows of the teacher anchor cache; may be empty
};

struct StepResult {
  objective::LossBreakdown breakdown;
  std::vector<double> gradient;  // empty unless requested
};

inline StepResult evaluate_step(const MlpModel& student, const Teacher& teacher, const charts::ChartAtlas* atlas,
                                const StepInputs& in, const objective::ObjectiveConfig& cfg, Method method, double t,
                                double total_steps, bool want_gradient) {
  const auto weights = objective::effective_weights(cfg, method, t, total_steps);
  const auto fp_new = model::forward_pass(student, in.new_inputs);

  model::ForwardPass fp_anc;
  objective::AnchorBatchContext ctx;
  const bool anchors = weights.uses_anchors();
  if (anchors) {
    if (in.anchor_rows.empty()) throw ValidationError("evaluate_step: method needs an anchor batch");
    fp_anc = model::forward_pass(student, teacher.anchors.inputs.gather_rows(in.anchor_rows));
    std::vector<std::size_t> labels;
    for (auto r : in.anchor_rows) labels.push_back(teacher.anchors.labels[r]);
    ctx = objective::make_anchor_context(fp_anc.activations[student.latent_layer()], fp_anc.logits(),
                                         teacher.anchor_features.gather_rows(in.anchor_rows),
                                         teacher.anchor_logits.gather_rows(in.anchor_rows), std::move(labels),
                                         weights.chart != 0.0 ? atlas : nullptr, cfg.knn);
  }

  StepResult res;
  objective::LossGradients grads;
  const objective::LossInputs li{fp_new.logits(), in.new_labels, anchors ? &ctx : nullptr, atlas, student.params(),
                                 teacher.model.params()};
  res.breakdown = objective::total_loss(li, cfg, method, t, total_steps, want_gradient ? &grads : nullptr);
  if (!want_gradient) return res;

  res.gradient = model::backward(student, fp_new, grads.new_logits, Matrix{});
  if (anchors) {
    const auto ga = model::backward(student, fp_anc, grads.anchor_logits, grads.anchor_features);
    for (std::size_t i = 0; i < ga.size(); ++i) res.gradient[i] += ga[i];
  }
  for (std::size_t i = 0; i < grads.params.size(); ++i) res.gradient[i] += grads.params[i];
  return res;
}

struct LogRow {
  std::size_t step = 0;
  objective::LossBreakdown breakdown;
};

struct FinetuneResult {
  MlpModel student;
  std::vector<LogRow> log;
};

inline std::string breakdown_diagnostic(const objective::LossBreakdown& b) {
  std::ostringstream os;
  os << "new=" << b.new_ce << " anchor=" << b.anchor_ce << " kd=" << b.kd << " geo=" << b.geo
     << " smooth=" << b.smooth << " chart=" << b.chart << " reg=" << b.reg << " total=" << b.total;
  return os.str();
}

/// Fine-tunes a copy of the teacher on the new view. New-batch shuffling and
/// anchor sampling draw from separate streams, so a method that never replays
/// sees exactly the same new-task batches as one that does.
inline FinetuneResult finetune(const Teacher& teacher, const synthetic::BenchmarkBundle& bundle,
                               const charts::ChartAtlas& atlas, std::span<const std::size_t> anchor_clusters,
                               const objective::ObjectiveConfig& obj_cfg, const TrainConfig& cfg, Method method,
                               std::uint64_t seed) {
  objective::validate(obj_cfg);
  validate(cfg);
  if (anchor_clusters.size() != teacher.anchors.inputs.rows())
    throw ValidationError("finetune: one cluster id per anchor required");
  FinetuneResult res;
  res.student = teacher.model;
  model::Optimizer opt(cfg.optimizer, cfg.finetune_lr, res.student.params().size(), cfg.momentum);
  std::mt19937_64 new_gen(io::derive_seed(seed, 41));
  std::mt19937_64 anchor_gen(io::derive_seed(seed, 42));

  const auto& train = bundle.new_train;
  const std::size_t n = train.inputs.rows();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch * cfg.finetune_epochs);
  const std::size_t replay = std::min(replay_batch_for(method, cfg), anchor_clusters.size());

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.finetune_epochs; ++epoch) {
    const auto order = detail::permutation(n, new_gen);
    for (std::size_t start = 0; start < n; start += cfg.batch_size, ++step) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(cfg.batch_size, n - start));
      const Matrix x = train.inputs.gather_rows(idx);
      std::vector<std::size_t> y;
      for (auto i : idx) y.push_back(train.labels[i]);
      const double t = static_cast<double>(step);
      std::vector<std::size_t> rows;
      if (objective::effective_weights(obj_cfg, method, t, total_steps).uses_anchors())
        rows = sample_anchor_batch(anchor_clusters, replay, anchor_gen);

      StepResult sr;
      try {
        sr = evaluate_step(res.student, teacher, &atlas, {x, y, rows}, obj_cfg, method, t, total_steps, true);
      } catch (const DegenerateError& e) {
        throw TrainingError(std::string("finetune: degenerate anchor batch (") + e.what() + ")", step);
      }
      if (!std::isfinite(sr.breakdown.total))
        throw TrainingError("finetune: non-finite loss [" + breakdown_diagnostic(sr.breakdown) + "]", step);
      res.log.push_back({step, sr.breakdown});
      opt.step(res.student.params(), sr.gradient);
    }
  }
  return res;
}

/// CSV training log: step, α, β, each raw term, total.
inline std::string training_log_csv(const std::vector<LogRow>& log) {
  std::ostringstream os;
  os.precision(17);
  os << "step,alpha,beta,new,anchor,kd,geo,smooth,chart,reg,total\n";
  for (const auto& r : log) {
    const auto& b = r.breakdown;
    os << r.step << ',' << b.weights.alpha << ',' << b.weights.beta << ',' << b.new_ce << ',' << b.anchor_ce << ','
       << b.kd << ',' << b.geo << ',' << b.smooth << ',' << b.chart << ',' << b.reg << ',' << b.total << '\n';
  }
  return os.str();
}

}  // namespace spma::trainer
