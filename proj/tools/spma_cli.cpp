// Command-line front end: generate | run | report | selftest.

#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "spma/experiment.hpp"
#include "spma/selftest.hpp"

namespace ex = spma::experiment;

namespace {

struct Overrides {
  std::string config;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> methods;
  std::string out;
};

void add_common(CLI::App* cmd, Overrides& o, bool with_methods) {
  cmd->add_option("--config", o.config, "JSON config file (omitted keys take defaults)")->check(CLI::ExistingFile);
  cmd->add_option("--seed", o.seeds, "seed(s) to run, overriding the config")->delimiter(',');
  if (with_methods) cmd->add_option("--methods", o.methods, "comma-separated method presets")->delimiter(',');
  cmd->add_option("--out", o.out, "output root directory");
}

ex::ExperimentConfig resolve(const Overrides& o) {
  auto cfg = ex::load_config(o.config);
  if (!o.seeds.empty()) cfg.seeds = o.seeds;
  if (!o.methods.empty()) {
    cfg.methods.clear();
    for (const auto& m : o.methods) cfg.methods.push_back(spma::objective::parse_method(m));
  }
  if (!o.out.empty()) cfg.out_dir = o.out;
  ex::validate(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse prior-manifold anchoring experiments"};
  app.require_subcommand(1);

  Overrides gen_o, run_o, rep_o;
  std::string report_dir;
  auto* gen = app.add_subcommand("generate", "write the benchmark bundle for each seed");
  add_common(gen, gen_o, false);
  auto* run = app.add_subcommand("run", "teacher, atlas, fine-tuning and evaluation for every (seed, method) cell");
  add_common(run, run_o, true);
  auto* rep = app.add_subcommand("report", "rebuild report.md / report.csv from finished cells");
  add_common(rep, rep_o, false);
  rep->add_option("--dir", report_dir, "results directory (out/<config-hash>); overrides --config/--out");
  auto* self = app.add_subcommand("selftest", "run the built-in oracle and invariance checks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto cfg = resolve(gen_o);
      for (auto seed : cfg.seeds) std::cout << ex::generate_bundle(cfg, seed).string() << '\n';
      return 0;
    }
    if (*run) {
      const auto cfg = resolve(run_o);
      std::cout << "config " << ex::config_hash(cfg) << " -> " << ex::hash_dir(cfg).string() << '\n';
      const auto summary = ex::run_experiment(cfg, &std::cout);
      try {
        const auto table = ex::emit_report(summary.root);
        std::cout << '\n' << ex::render_markdown(table);
      } catch (const spma::ValidationError& e) {
        std::cerr << e.what() << '\n';
      }
      if (!summary.all_ok()) {
        std::cerr << "one or more cells failed; see error.json in the cell directories\n";
        return 1;
      }
      return 0;
    }
    if (*rep) {
      const auto dir = report_dir.empty() ? ex::hash_dir(resolve(rep_o)) : std::filesystem::path(report_dir);
      std::cout << ex::render_markdown(ex::emit_report(dir));
      return 0;
    }
    if (*self) {
      bool ok = true;
      for (const auto& c : spma::selftest::run_all()) {
        std::cout << (c.passed ? "PASS  " : "FAIL  ") << c.name << (c.detail.empty() ? "" : "  (" + c.detail + ")")
                  << '\n';
        ok = ok && c.passed;
      }
      return ok ? 0 : 1;
    }
  } catch (const spma::ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
