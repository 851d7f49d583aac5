#pragma once

#include <string>
#include <vector>

#include "reffil/config.hpp"
#include "reffil/federation.hpp"
#include "reffil/metrics.hpp"
#include "reffil/prompts.hpp"

namespace reffil {

struct RoundLossRow {
  int round = 0;  // global round index (continues across tasks)
  int task = 0;
  int client = 0;
  double ce = 0.0, gpl = 0.0, dpcl = 0.0, tau_prime = 0.0;
};

struct EvalRow {
  int after_task = 0;
  int eval_task = 0;
  double accuracy = 0.0;
};

/// Owns the on-disk run directory layout:
///   config.snapshot  rounds.csv  evals.csv  prompts/round_<r>.json
///   checkpoints/task_<t>.bin  summary.json  audit.json  error.json
class RunWriter {
 public:
  explicit RunWriter(std::string dir);

  const std::string& dir() const { return dir_; }

  void write_config_snapshot(const ExperimentConfig& config);
  void append_round_row(const RoundLossRow& row);
  void append_eval_row(const EvalRow& row);
  void write_prompts(const GlobalPromptSet& set, int global_round);
  void write_checkpoint(const ModelParams& params, int task_index);
  void write_summary(const RunSummary& summary);
  void write_audit(std::size_t accesses, std::size_t violations);
  void write_error(const std::string& stage, const std::string& message);

 private:
  std::string dir_;
  bool rounds_header_written_ = false;
  bool evals_header_written_ = false;
};

/// Reads the accuracy matrix back from a run directory's evals.csv.
AccuracyMatrix read_eval_matrix(const std::string& run_dir);

/// Reads summary.json (method, seed, avg, last, fgt, bwt).
RunSummary read_summary(const std::string& run_dir);

struct ReportRow {
  std::string method;
  uint64_t seed = 0;
  double avg = 0.0, last = 0.0, fgt = 0.0, bwt = 0.0;
};

struct MethodAggregate {
  std::string method;
  int runs = 0;
  double avg_mean = 0.0, avg_std = 0.0;
  double last_mean = 0.0, last_std = 0.0;
  double fgt_mean = 0.0, fgt_std = 0.0;
  double bwt_mean = 0.0, bwt_std = 0.0;
};

struct Report {
  std::vector<ReportRow> rows;            // sorted by (method, seed)
  std::vector<MethodAggregate> by_method; // mean +/- sample std across seeds
};

/// Collects summaries from run directories into one comparison report.
Report emit_report(const std::vector<std::string>& run_dirs);

/// Human-readable table: Avg/Last as percentages, FGT/BwT as fractions.
std::string render_report_text(const Report& report);

/// Machine-readable CSV, all metrics as fractions.
std::string render_report_csv(const Report& report);

}  // namespace reffil
