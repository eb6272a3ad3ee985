#include "lesionfuse/cli.hpp"

#include <cstdio>
#include <iostream>
#include <memory>

#include "CLI11.hpp"
#include "lesionfuse/experiment.hpp"
#include "lesionfuse/gradcheck_suite.hpp"

namespace lesionfuse::cli {

int cmd_run(const std::string& config_path, const std::string& out, std::size_t parallel, std::ostream& log) {
  ExperimentConfig cfg = parse_config(config_path);
  if (!out.empty()) cfg.output_dir = out;
  if (parallel > 0) cfg.parallel_folds = parallel;
  log << "config digest " << config_digest(cfg) << ", output " << cfg.output_dir << "\n";
  run_all(cfg, cfg.output_dir, [&](const RunResult& r) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-13s %-9s BCC %s  AUC %s  (%.1fs)\n", r.model.c_str(), to_string(r.fusion).c_str(),
                  format_mean_std(r.report->bcc).c_str(), format_mean_std(r.report->auc).c_str(), r.seconds);
    log << buf << std::flush;
  });
  return ok;
}

int cmd_report(const std::string& dir, std::ostream& out) {
  const ParsedResults parsed = read_results(dir);
  out << render_table(parsed.rows);
  const double gap = aggregate_discrepancy(parsed);
  if (!(gap <= 1e-12)) {
    std::cerr << "aggregate rows disagree with fold rows (max difference " << gap << ")\n";
    return verification_failed;
  }
  return ok;
}

int cmd_gradcheck(const std::vector<std::string>& faults, double tolerance, std::ostream& out) {
  std::vector<std::unique_ptr<fault::ScopedFault>> guards;
  for (const auto& f : faults) guards.push_back(std::make_unique<fault::ScopedFault>(f));
  const auto report = run_gradcheck_suite(tolerance);
  double total = 0;
  for (const auto& c : report.components) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-28s max rel err %.3e  (%zu coords, %.2fs)  %s\n", c.component.c_str(),
                  c.max_rel_error, c.coordinates, c.seconds, c.passed ? "ok" : "FAIL");
    out << buf;
    total += c.seconds;
  }
  char buf[120];
  std::snprintf(buf, sizeof buf, "%zu components, tolerance %.0e, %.2fs\n", report.components.size(), tolerance, total);
  out << buf;
  if (report.passed()) return ok;
  out << "FAILED:";
  for (const auto& f : report.failures()) out << " " << f;
  out << "\n";
  return verification_failed;
}

int cmd_synth(const SyntheticSpec& spec, const std::string& dir, std::ostream& out) {
  const Dataset ds = generate_synthetic(spec);
  save_dataset(dir, ds);
  out << "wrote " << ds.size() << " samples (" << to_string(spec.mode) << ", delta " << spec.delta << ") to " << dir
      << "\n";
  return ok;
}

int main(int argc, const char* const* argv, std::ostream& out) {
  CLI::App app{"Metadata fusion experiments for skin lesion classification"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  std::size_t parallel = 0;
  auto* run = app.add_subcommand("run", "cross-validate every configured backbone x fusion pair");
  run->add_option("--config", config_path, "JSON configuration")->required();
  run->add_option("--out", out_dir, "output directory (overrides train.output_dir)");
  run->add_option("--parallel-folds", parallel, "folds trained concurrently");

  std::string results_dir;
  auto* report = app.add_subcommand("report", "render results.csv as a comparison table");
  report->add_option("results-dir", results_dir)->required();

  std::vector<std::string> faults;
  double tolerance = 1e-4;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of every differentiable component");
  grad->add_option("--inject-fault", faults, "corrupt the backward pass of a named component");
  grad->add_option("--tolerance", tolerance, "max relative error");

  SyntheticSpec spec;
  std::string mode = "both", synth_dir;
  auto* synth = app.add_subcommand("synth", "write a synthetic dataset (CSV + schema + image tensor)");
  synth->add_option("--n", spec.n)->required();
  synth->add_option("--mode", mode)->required()->check(CLI::IsMember({"image-only", "metadata-only", "both"}));
  synth->add_option("--delta", spec.delta)->required();
  synth->add_option("--seed", spec.seed)->required();
  synth->add_option("--out", synth_dir)->required();
  synth->add_option("--classes", spec.classes);
  synth->add_option("--missing-rate", spec.missing_rate);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, std::cerr);
    return code == 0 ? ok : config_error;
  }

  try {
    if (*run) return cmd_run(config_path, out_dir, parallel, out);
    if (*report) return cmd_report(results_dir, out);
    if (*grad) return cmd_gradcheck(faults, tolerance, out);
    if (*synth) {
      spec.mode = parse_signal_mode(mode);
      return cmd_synth(spec, synth_dir, out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return config_error;
  } catch (const ExperimentFault& e) {
    std::cerr << "runtime fault: " << e.what() << "\n";
    return runtime_fault;
  } catch (const std::exception& e) {
    std::cerr << "runtime fault: " << e.what() << "\n";
    return runtime_fault;
  }
  return config_error;
}

}  // namespace lesionfuse::cli
