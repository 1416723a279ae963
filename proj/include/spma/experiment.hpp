#pragma once

// Batch orchestration. A resolved configuration is hashed; every (seed, method)
// cell lives under out/<hash>/<seed>/<method>/ and is skipped on rerun once its
// result.json exists. Reports are rebuilt from the per-cell result files.

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "spma/charts.hpp"
#include "spma/errors.hpp"
#include "spma/io.hpp"
#include "spma/metrics.hpp"
#include "spma/model.hpp"
#include "spma/objective.hpp"
#include "spma/synthetic.hpp"
#include "spma/trainer.hpp"

namespace spma::experiment {

namespace fs = std::filesystem;
using nlohmann::json;
using objective::Method;

inline constexpr int kSchemaVersion = 1;
inline constexpr std::uint64_t kAtlasSeedStream = 51;

struct ChartConfig {
  std::size_t k = 8;
  std::size_t rank = 2;
  double tau_c = 1.0;
  double support_quantile = 0.95;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ChartConfig, k, rank, tau_c, support_quantile)

struct ExperimentConfig {
  synthetic::BenchmarkConfig benchmark;
  ChartConfig charts;
  objective::ObjectiveConfig objective;
  trainer::TrainConfig train;
  std::vector<Method> methods{objective::kAllMethods.begin(), objective::kAllMethods.end()};
  std::vector<std::uint64_t> seeds{7, 8, 9};
  std::string out_dir = "out";
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(ExperimentConfig, benchmark, charts, objective, train, methods, seeds, out_dir)

inline void validate(const ExperimentConfig& c) {
  synthetic::validate(c.benchmark);
  objective::validate(c.objective);
  trainer::validate(c.train);
  if (c.charts.k < 1 || c.charts.rank < 1) throw ValidationError("config: charts.k and charts.rank must be >= 1");
  if (c.charts.rank >= c.train.hidden.back())
    throw ValidationError("config: charts.rank must be below the latent width");
  if (!(c.charts.tau_c > 0.0)) throw ValidationError("config: charts.tau_c must be > 0");
  if (!(c.charts.support_quantile > 0.0 && c.charts.support_quantile < 1.0))
    throw ValidationError("config: charts.support_quantile must lie in (0, 1)");
  const std::size_t anchors = c.benchmark.anchors_per_class * c.benchmark.num_classes;
  if (c.train.replay_batch_size > anchors) throw ValidationError("config: replay_batch_size exceeds the anchor count");
  if (anchors < 2 * c.charts.k) throw ValidationError("config: need at least 2K anchors to build the atlas");
  if (c.methods.empty() || c.seeds.empty()) throw ValidationError("config: methods and seeds must be non-empty");
  if (std::set<Method>(c.methods.begin(), c.methods.end()).size() != c.methods.size())
    throw ValidationError("config: duplicate method");
  if (std::set<std::uint64_t>(c.seeds.begin(), c.seeds.end()).size() != c.seeds.size())
    throw ValidationError("config: duplicate seed");
}

namespace detail {

inline void reject_unknown_keys(const json& given, const json& known, const std::string& path) {
  if (!given.is_object()) throw ValidationError("config: '" + (path.empty() ? "<root>" : path) + "' must be an object");
  for (const auto& [key, value] : given.items()) {
    const auto it = known.find(key);
    if (it == known.end()) throw ValidationError("config: unknown key '" + path + key + "'");
    if (value.is_null()) throw ValidationError("config: '" + path + key + "' is null");
    if (it->is_object()) reject_unknown_keys(value, *it, path + key + ".");
  }
}

}  // namespace detail

/// Overlays a (possibly partial) JSON document on the defaults. Unknown keys
/// and type mismatches are errors.
inline ExperimentConfig resolve_config(const json& overrides) {
  json merged = ExperimentConfig{};
  if (!overrides.is_null()) {
    detail::reject_unknown_keys(overrides, merged, "");
    merged.merge_patch(overrides);
  }
  ExperimentConfig c;
  try {
    c = merged.get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  validate(c);
  return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
  if (path.empty()) return resolve_config(json::object());
  json j;
  try {
    j = json::parse(io::read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError("config: " + path.string() + ": " + e.what());
  }
  return resolve_config(j);
}

/// Hash of every setting that can change a cell's contents. The output
/// directory, seed list and method list only select which cells exist, so
/// they are left out; the cell path carries the seed and method.
inline std::string config_hash(const ExperimentConfig& c) {
  json j = c;
  j.erase("out_dir");
  j.erase("seeds");
  j.erase("methods");
  j["schema_version"] = kSchemaVersion;
  return io::hex64(io::fnv1a64(j.dump()));
}

inline fs::path hash_dir(const ExperimentConfig& c) { return fs::path(c.out_dir) / config_hash(c); }

inline fs::path cell_dir(const fs::path& root, std::uint64_t seed, Method m) {
  return root / std::to_string(seed) / std::string(objective::method_name(m));
}

// ---------------------------------------------------------------------------
// Per-cell files

inline json result_to_json(const std::string& hash, std::uint64_t seed, Method m, const metrics::RunResult& r) {
  return {{"schema_version", kSchemaVersion}, {"config_hash", hash}, {"seed", seed}, {"method", m}, {"metrics", r}};
}

struct CellResult {
  std::uint64_t seed = 0;
  Method method = Method::PlainFT;
  metrics::RunResult result;
};

inline CellResult result_from_json(const json& j) {
  if (j.at("schema_version").get<int>() != kSchemaVersion) throw ValidationError("result: unsupported schema_version");
  return {j.at("seed").get<std::uint64_t>(), j.at("method").get<Method>(), j.at("metrics").get<metrics::RunResult>()};
}

struct CellOutcome {
  std::uint64_t seed = 0;
  Method method = Method::PlainFT;
  enum class Status { Ran, Resumed, Failed } status = Status::Ran;
  std::string error;
};

struct SeedContext {
  synthetic::BenchmarkBundle bundle;
  trainer::Teacher teacher;
  charts::AtlasBuild atlas;
};

inline SeedContext prepare_seed(const ExperimentConfig& cfg, std::uint64_t seed) {
  auto bundle = synthetic::make_benchmark(cfg.benchmark, seed);
  auto teacher = trainer::train_teacher(bundle, cfg.train, seed);
  auto atlas = charts::build_atlas(teacher.anchor_features, cfg.charts.k, cfg.charts.rank, cfg.charts.tau_c,
                                   io::derive_seed(seed, kAtlasSeedStream));
  return {std::move(bundle), std::move(teacher), std::move(atlas)};
}

namespace detail {

inline void write_json(const fs::path& p, const json& j) { io::write_file_atomic(p, j.dump(2) + "\n"); }

inline void record_failure(const fs::path& dir, const std::string& hash, std::uint64_t seed, Method m,
                           const std::string& stage, const std::string& what, std::optional<std::size_t> step) {
  json j{{"schema_version", kSchemaVersion}, {"config_hash", hash}, {"seed", seed},
         {"method", m},                      {"stage", stage},      {"error", what}};
  if (step) j["step"] = *step;
  write_json(dir / "error.json", j);
}

}  // namespace detail

/// Fine-tunes one method for one seed and writes its checkpoint, training log,
/// timing and (last) result.json.
inline metrics::RunResult run_cell(const ExperimentConfig& cfg, const SeedContext& ctx, std::uint64_t seed, Method m,
                                   const fs::path& dir, const std::string& hash) {
  const auto start = std::chrono::steady_clock::now();
  const auto ft = trainer::finetune(ctx.teacher, ctx.bundle, ctx.atlas.atlas, ctx.atlas.assignments, cfg.objective,
                                    cfg.train, m, seed);
  const auto r = metrics::evaluate_run(ctx.teacher, ft.student, ctx.bundle, ctx.atlas.atlas, cfg.charts.support_quantile);
  detail::write_json(dir / "checkpoint.json", model::checkpoint_to_json(ft.student, seed, hash));
  io::write_file_atomic(dir / "train_log.csv", "# config_hash " + hash + "\n" + trainer::training_log_csv(ft.log));
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  detail::write_json(dir / "timing.json", {{"config_hash", hash}, {"seconds", seconds}});
  detail::write_json(dir / "result.json", result_to_json(hash, seed, m, r));
  fs::remove(dir / "error.json");
  return r;
}

struct RunSummary {
  std::string config_hash;
  fs::path root;
  std::vector<CellOutcome> cells;

  bool all_ok() const {
    return std::none_of(cells.begin(), cells.end(),
                        [](const CellOutcome& c) { return c.status == CellOutcome::Status::Failed; });
  }
};

/// Runs every missing (seed, method) cell. Failures are recorded in the cell's
/// error.json and do not stop the remaining cells.
inline RunSummary run_experiment(const ExperimentConfig& cfg, std::ostream* log = nullptr) {
  validate(cfg);
  RunSummary summary{config_hash(cfg), hash_dir(cfg), {}};
  detail::write_json(summary.root / "config.json", json{{"config_hash", summary.config_hash}, {"config", cfg}});

  for (const std::uint64_t seed : cfg.seeds) {
    std::vector<Method> pending;
    for (const Method m : cfg.methods) {
      if (fs::exists(cell_dir(summary.root, seed, m) / "result.json")) {
        summary.cells.push_back({seed, m, CellOutcome::Status::Resumed, {}});
        if (log) *log << "seed " << seed << ' ' << objective::method_name(m) << ": cached\n";
      } else {
        pending.push_back(m);
      }
    }
    if (pending.empty()) continue;

    std::optional<SeedContext> ctx;
    try {
      ctx = prepare_seed(cfg, seed);
      detail::write_json(summary.root / std::to_string(seed) / "teacher.json",
                         model::checkpoint_to_json(ctx->teacher.model, seed, summary.config_hash));
    } catch (const std::exception& e) {
      for (const Method m : pending) {
        detail::record_failure(cell_dir(summary.root, seed, m), summary.config_hash, seed, m, "setup", e.what(), {});
        summary.cells.push_back({seed, m, CellOutcome::Status::Failed, e.what()});
        if (log) *log << "seed " << seed << ' ' << objective::method_name(m) << ": FAILED in setup: " << e.what() << '\n';
      }
      continue;
    }

    for (const Method m : pending) {
      const fs::path dir = cell_dir(summary.root, seed, m);
      try {
        const auto r = run_cell(cfg, *ctx, seed, m, dir, summary.config_hash);
        summary.cells.push_back({seed, m, CellOutcome::Status::Ran, {}});
        if (log) {
          char buf[160];
          std::snprintf(buf, sizeof buf, "old %.4f new %.4f harmonic %.4f cka %.4f dist_corr %.4f", r.old_after,
                        r.new_after, r.harmonic_mean, r.cka, r.dist_corr);
          *log << "seed " << seed << ' ' << objective::method_name(m) << ": " << buf << '\n';
        }
      } catch (const TrainingError& e) {
        detail::record_failure(dir, summary.config_hash, seed, m, "finetune", e.what(), e.step());
        summary.cells.push_back({seed, m, CellOutcome::Status::Failed, e.what()});
        if (log) *log << "seed " << seed << ' ' << objective::method_name(m) << ": FAILED: " << e.what() << '\n';
      } catch (const std::exception& e) {
        detail::record_failure(dir, summary.config_hash, seed, m, "cell", e.what(), {});
        summary.cells.push_back({seed, m, CellOutcome::Status::Failed, e.what()});
        if (log) *log << "seed " << seed << ' ' << objective::method_name(m) << ": FAILED: " << e.what() << '\n';
      }
    }
  }
  return summary;
}

// ---------------------------------------------------------------------------
// Report

inline constexpr std::array<std::string_view, 10> kReportColumns{
    "Method",     "Seed",       "Old After",  "New After", "Harmonic Mean", "Anchor CKA", "Anchor Dist. Corr.",
    "Old Before", "Forgetting", "Support In"};

struct ReportRow {
  Method method = Method::PlainFT;
  std::optional<std::uint64_t> seed;  // empty on mean rows
  metrics::RunResult result;

  friend bool operator==(const ReportRow&, const ReportRow&) = default;
};

/// Raw per-(method, seed) rows in method-preset order, then seed.
struct ReportTable {
  std::string config_hash;
  std::vector<ReportRow> rows;

  friend bool operator==(const ReportTable&, const ReportTable&) = default;
};

inline void sort_rows(std::vector<ReportRow>& rows) {
  std::sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    if (a.method != b.method) return static_cast<int>(a.method) < static_cast<int>(b.method);
    return a.seed < b.seed;
  });
}

/// Column-wise mean over the raw rows of each method.
inline std::vector<ReportRow> mean_rows(const ReportTable& t) {
  std::vector<ReportRow> out;
  for (const Method m : objective::kAllMethods) {
    std::vector<const metrics::RunResult*> rs;
    for (const auto& row : t.rows)
      if (row.method == m && row.seed) rs.push_back(&row.result);
    if (rs.empty()) continue;
    metrics::RunResult mean;
    const double n = static_cast<double>(rs.size());
    for (const auto* r : rs) {
      mean.old_before += r->old_before / n;
      mean.old_after += r->old_after / n;
      mean.new_after += r->new_after / n;
      mean.forgetting += r->forgetting / n;
      mean.harmonic_mean += r->harmonic_mean / n;
      mean.cka += r->cka / n;
      mean.dist_corr += r->dist_corr / n;
      mean.support_in += r->support_in / n;
    }
    out.push_back({m, std::nullopt, mean});
  }
  return out;
}

inline std::optional<metrics::RunResult> mean_for(const ReportTable& t, Method m) {
  for (const auto& row : mean_rows(t))
    if (row.method == m) return row.result;
  return std::nullopt;
}

inline ReportTable load_results(const fs::path& root) {
  ReportTable t;
  if (fs::is_directory(root)) {
    for (const auto& seed_entry : fs::directory_iterator(root)) {
      if (!seed_entry.is_directory()) continue;
      for (const auto& cell : fs::directory_iterator(seed_entry.path())) {
        const fs::path rf = cell.path() / "result.json";
        if (!cell.is_directory() || !fs::exists(rf)) continue;
        const json j = json::parse(io::read_file(rf));
        const std::string hash = j.at("config_hash").get<std::string>();
        if (t.config_hash.empty()) t.config_hash = hash;
        if (hash != t.config_hash) throw ValidationError("report: mixed config hashes under " + root.string());
        const auto c = result_from_json(j);
        t.rows.push_back({c.method, c.seed, c.result});
      }
    }
  }
  if (t.rows.empty()) throw ValidationError("report: no result files under " + root.string());
  sort_rows(t.rows);
  return t;
}

namespace detail {

inline std::string shortest(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, res.ptr};
}

inline std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

inline std::vector<double> row_values(const metrics::RunResult& r) {
  return {r.old_after, r.new_after, r.harmonic_mean, r.cka, r.dist_corr, r.old_before, r.forgetting, r.support_in};
}

}  // namespace detail

inline std::string render_markdown(const ReportTable& t) {
  std::ostringstream os;
  os << "# Results (config " << t.config_hash << ")\n\n|";
  for (auto c : kReportColumns) os << ' ' << c << " |";
  os << "\n|";
  for (std::size_t i = 0; i < kReportColumns.size(); ++i) os << (i < 2 ? " --- |" : " ---: |");
  os << '\n';
  auto emit = [&](const ReportRow& row) {
    os << "| " << objective::method_name(row.method) << " | " << (row.seed ? std::to_string(*row.seed) : "mean")
       << " |";
    for (double v : detail::row_values(row.result)) os << ' ' << detail::fixed4(v) << " |";
    os << '\n';
  };
  for (const auto& row : t.rows) emit(row);
  for (const auto& row : mean_rows(t)) emit(row);
  return os.str();
}

/// Machine-readable table: shortest round-trip decimals; mean rows carry
/// "mean" in the Seed column and are ignored when parsing.
inline std::string render_csv(const ReportTable& t) {
  std::ostringstream os;
  os << "# config_hash " << t.config_hash << '\n';
  for (std::size_t i = 0; i < kReportColumns.size(); ++i) os << (i ? "," : "") << kReportColumns[i];
  os << '\n';
  auto emit = [&](const ReportRow& row) {
    os << objective::method_name(row.method) << ',' << (row.seed ? std::to_string(*row.seed) : "mean");
    for (double v : detail::row_values(row.result)) os << ',' << detail::shortest(v);
    os << '\n';
  };
  for (const auto& row : t.rows) emit(row);
  for (const auto& row : mean_rows(t)) emit(row);
  return os.str();
}

inline ReportTable parse_report_csv(const std::string& text) {
  ReportTable t;
  std::istringstream in(text);
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("# config_hash ", 0) == 0) {
      t.config_hash = line.substr(14);
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    if (cells.size() != kReportColumns.size()) throw ValidationError("report csv: wrong column count");
    if (!header_seen) {
      for (std::size_t i = 0; i < cells.size(); ++i)
        if (cells[i] != kReportColumns[i]) throw ValidationError("report csv: unexpected header");
      header_seen = true;
      continue;
    }
    if (cells[1] == "mean") continue;
    std::vector<double> v(8);
    for (std::size_t i = 0; i < 8; ++i) {
      const auto& s = cells[i + 2];
      if (std::from_chars(s.data(), s.data() + s.size(), v[i]).ec != std::errc{})
        throw ValidationError("report csv: bad number '" + s + "'");
    }
    ReportRow row;
    row.method = objective::parse_method(cells[0]);
    row.seed = std::stoull(cells[1]);
    row.result = {v[5], v[0], v[1], v[6], v[2], v[3], v[4], v[7]};
    t.rows.push_back(row);
  }
  if (!header_seen) throw ValidationError("report csv: missing header");
  return t;
}

/// Rebuilds report.md, report.csv and results.json from the cell files.
inline ReportTable emit_report(const fs::path& root) {
  const ReportTable t = load_results(root);
  io::write_file_atomic(root / "report.md", render_markdown(t));
  io::write_file_atomic(root / "report.csv", render_csv(t));
  json rows = json::array();
  for (const auto& row : t.rows) rows.push_back(result_to_json(t.config_hash, *row.seed, row.method, row.result));
  json means = json::array();
  for (const auto& row : mean_rows(t)) means.push_back({{"method", row.method}, {"metrics", row.result}});
  detail::write_json(root / "results.json", {{"schema_version", kSchemaVersion},
                                             {"config_hash", t.config_hash},
                                             {"rows", rows},
                                             {"means", means}});
  return t;
}

/// Writes the benchmark bundle for one seed (the `generate` verb).
inline fs::path generate_bundle(const ExperimentConfig& cfg, std::uint64_t seed) {
  const auto b = synthetic::make_benchmark(cfg.benchmark, seed);
  json j = synthetic::bundle_to_json(b);
  j["config_hash"] = config_hash(cfg);
  const fs::path p = hash_dir(cfg) / std::to_string(seed) / "bundle.json";
  io::write_file_atomic(p, j.dump() + "\n");
  return p;
}

}  // namespace spma::experiment
