#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "reffil/config.hpp"
#include "reffil/federation.hpp"
#include "reffil/metrics.hpp"
#include "reffil/runio.hpp"

namespace {

namespace fs = std::filesystem;

// Relative output paths resolve under $REFFIL_OUT_ROOT when it is set.
std::string resolve_out(const std::string& path) {
  const char* root = std::getenv("REFFIL_OUT_ROOT");
  if (root == nullptr || *root == '\0' || fs::path(path).is_absolute()) return path;
  return (fs::path(root) / path).string();
}

int run_command(const std::string& config_path, std::optional<uint64_t> seed_override,
                const std::string& out) {
  reffil::ExperimentConfig config = reffil::load_config(config_path);
  if (seed_override) {
    config.seed = *seed_override;
    config.validate();
  }
  std::string out_dir = resolve_out(out);
  reffil::RunResult result = reffil::run_experiment(config, out_dir);
  std::cout << "run complete: " << out_dir << "\n";
  std::printf("  avg  %.4f   last %.4f   fgt %.4f   bwt %+.4f\n", result.summary.avg,
              result.summary.last, result.summary.fgt, result.summary.bwt);
  std::cout << "  shard accesses " << result.audit_accesses << ", entitlement violations "
            << result.audit_violations << "\n";
  return 0;
}

int eval_command(const std::string& run_dir) {
  reffil::AccuracyMatrix m = reffil::read_eval_matrix(run_dir);
  std::printf("tasks: %d\n", m.tasks());
  for (int i = 1; i <= m.tasks(); ++i) {
    std::printf("after task %d:", i);
    for (int j = 1; j <= i; ++j) std::printf("  %6.2f%%", 100.0 * m.at(i, j));
    std::printf("\n");
  }
  std::printf("Avg  %6.2f%%\nLast %6.2f%%\nFGT  %7.4f\nBwT  %+7.4f\n",
              100.0 * reffil::avg_accuracy(m), 100.0 * reffil::last_accuracy(m),
              reffil::forgetting(m), reffil::backward_transfer(m));
  return 0;
}

int compare_command(const std::vector<std::string>& runs, const std::string& out_prefix) {
  reffil::Report report = reffil::emit_report(runs);
  std::string text = reffil::render_report_text(report);
  std::cout << text;
  std::string prefix = resolve_out(out_prefix);
  if (auto parent = fs::path(prefix).parent_path(); !parent.empty())
    fs::create_directories(parent);
  std::ofstream txt(prefix + ".txt");
  txt << text;
  std::ofstream csv(prefix + ".csv");
  csv << reffil::render_report_csv(report);
  std::cout << "wrote " << prefix << ".txt and " << prefix << ".csv\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated domain-incremental learning simulator"};
  app.require_subcommand(1);

  std::string config_path, out = "run";
  std::optional<uint64_t> seed;
  auto* run = app.add_subcommand("run", "Run an experiment from a config file");
  run->add_option("--config", config_path, "Experiment config (JSON)")->required();
  run->add_option("--seed", seed, "Override the config's root seed");
  run->add_option("--out", out, "Run directory to create");

  std::string run_dir;
  auto* eval = app.add_subcommand("eval", "Recompute metrics from a run directory");
  eval->add_option("--run", run_dir, "Run directory")->required();

  std::vector<std::string> runs;
  std::string report_prefix = "report";
  auto* compare = app.add_subcommand("compare", "Tabulate several runs");
  compare->add_option("--runs", runs, "Run directories")->required()->expected(-1);
  compare->add_option("--out", report_prefix, "Report file prefix");

  auto* defaults = app.add_subcommand("dump-config-defaults",
                                      "Print a complete default config");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return run_command(config_path, seed, out);
    if (*eval) return eval_command(run_dir);
    if (*compare) return compare_command(runs, report_prefix);
    if (*defaults) {
      std::cout << reffil::dump_config(reffil::default_config()).dump(2) << "\n";
      return 0;
    }
  } catch (const reffil::ConfigError& e) {
    std::cerr << "config-error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "input-error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "runtime-error: " << e.what() << "\n";
    return 4;
  }
  return 1;
}
