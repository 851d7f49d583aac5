#include "reffil/runio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "reffil/checkpoint.hpp"

namespace reffil {

namespace fs = std::filesystem;

namespace {

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), format, v);
  return buf;
}

void append_line(const std::string& path, const std::string& line) {
  std::ofstream out(path, std::ios::app);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << line << "\n";
}

}  // namespace

RunWriter::RunWriter(std::string dir) : dir_(std::move(dir)) {
  fs::create_directories(dir_);
  // A rerun into the same directory starts from a clean slate; only files
  // owned by the writer are touched.
  for (const char* name : {"rounds.csv", "evals.csv", "summary.json", "audit.json",
                           "error.json", "config.snapshot"})
    fs::remove(dir_ + "/" + name);
  fs::remove_all(dir_ + "/prompts");
  fs::remove_all(dir_ + "/checkpoints");
  fs::remove_all(dir_ + "/shards");
  fs::create_directories(dir_ + "/prompts");
  fs::create_directories(dir_ + "/checkpoints");
}

void RunWriter::write_config_snapshot(const ExperimentConfig& config) {
  std::ofstream out(dir_ + "/config.snapshot");
  if (!out) throw std::runtime_error("cannot write config.snapshot");
  out << dump_config(config).dump(2) << "\n";
}

void RunWriter::append_round_row(const RoundLossRow& row) {
  if (!rounds_header_written_) {
    append_line(dir_ + "/rounds.csv", "round,task,client,ce,gpl,dpcl,tau_prime");
    rounds_header_written_ = true;
  }
  std::ostringstream line;
  line << row.round << "," << row.task << "," << row.client << "," << fmt("%.10g", row.ce)
       << "," << fmt("%.10g", row.gpl) << "," << fmt("%.10g", row.dpcl) << ","
       << fmt("%.10g", row.tau_prime);
  append_line(dir_ + "/rounds.csv", line.str());
}

void RunWriter::append_eval_row(const EvalRow& row) {
  if (!evals_header_written_) {
    append_line(dir_ + "/evals.csv", "after_task,eval_task,accuracy");
    evals_header_written_ = true;
  }
  std::ostringstream line;
  line << row.after_task << "," << row.eval_task << "," << fmt("%.6f", row.accuracy);
  append_line(dir_ + "/evals.csv", line.str());
}

void RunWriter::write_prompts(const GlobalPromptSet& set, int global_round) {
  char name[64];
  std::snprintf(name, sizeof(name), "/prompts/round_%04d.json", global_round);
  std::ofstream out(dir_ + name);
  if (!out) throw std::runtime_error("cannot write prompt snapshot");
  out << global_prompt_set_to_json(set, global_round).dump(2) << "\n";
}

void RunWriter::write_checkpoint(const ModelParams& params, int task_index) {
  save_checkpoint(params, dir_ + "/checkpoints/task_" + std::to_string(task_index) + ".bin");
}

void RunWriter::write_summary(const RunSummary& summary) {
  std::ofstream out(dir_ + "/summary.json");
  if (!out) throw std::runtime_error("cannot write summary.json");
  out << "{\n";
  out << "  \"method\": \"" << summary.method << "\",\n";
  out << "  \"seed\": " << summary.seed << ",\n";
  out << "  \"avg\": " << fmt("%.6f", summary.avg) << ",\n";
  out << "  \"last\": " << fmt("%.6f", summary.last) << ",\n";
  out << "  \"fgt\": " << fmt("%.6f", summary.fgt) << ",\n";
  out << "  \"bwt\": " << fmt("%.6f", summary.bwt) << "\n";
  out << "}\n";
}

void RunWriter::write_audit(std::size_t accesses, std::size_t violations) {
  std::ofstream out(dir_ + "/audit.json");
  if (!out) throw std::runtime_error("cannot write audit.json");
  out << "{\n  \"shard_accesses\": " << accesses << ",\n  \"violations\": " << violations
      << "\n}\n";
}

void RunWriter::write_error(const std::string& stage, const std::string& message) {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["message"] = message;
  std::ofstream out(dir_ + "/error.json");
  if (out) out << j.dump(2) << "\n";
}

AccuracyMatrix read_eval_matrix(const std::string& run_dir) {
  std::ifstream in(run_dir + "/evals.csv");
  if (!in) throw std::runtime_error("missing evals.csv in " + run_dir);
  std::string line;
  std::getline(in, line);  // header
  std::map<int, std::map<int, double>> cells;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    int after = 0, task = 0;
    double acc = 0.0;
    if (std::sscanf(line.c_str(), "%d,%d,%lf", &after, &task, &acc) != 3)
      throw std::runtime_error("malformed evals.csv row: " + line);
    cells[after][task] = acc;
  }
  std::vector<std::vector<double>> rows;
  for (int i = 1; i <= static_cast<int>(cells.size()); ++i) {
    std::vector<double> row;
    for (int j = 1; j <= i; ++j) {
      auto it = cells.find(i);
      if (it == cells.end() || it->second.find(j) == it->second.end())
        throw std::runtime_error("evals.csv is missing entry (" + std::to_string(i) + "," +
                                 std::to_string(j) + ")");
      row.push_back(it->second.at(j));
    }
    rows.push_back(std::move(row));
  }
  return AccuracyMatrix::from_rows(std::move(rows));
}

RunSummary read_summary(const std::string& run_dir) {
  std::ifstream in(run_dir + "/summary.json");
  if (!in) throw std::runtime_error("missing summary.json in " + run_dir);
  nlohmann::json j = nlohmann::json::parse(in);
  RunSummary s;
  s.method = j.at("method").get<std::string>();
  s.seed = j.at("seed").get<uint64_t>();
  s.avg = j.at("avg").get<double>();
  s.last = j.at("last").get<double>();
  s.fgt = j.at("fgt").get<double>();
  s.bwt = j.at("bwt").get<double>();
  return s;
}

Report emit_report(const std::vector<std::string>& run_dirs) {
  Report report;
  for (const auto& dir : run_dirs) {
    RunSummary s = read_summary(dir);
    report.rows.push_back(ReportRow{s.method, s.seed, s.avg, s.last, s.fgt, s.bwt});
  }
  std::stable_sort(report.rows.begin(), report.rows.end(), [](const auto& l, const auto& r) {
    return std::tie(l.method, l.seed) < std::tie(r.method, r.seed);
  });

  std::map<std::string, std::vector<const ReportRow*>> groups;
  for (const auto& row : report.rows) groups[row.method].push_back(&row);
  for (const auto& [method, rows] : groups) {
    auto stats = [&](auto getter) {
      double mean = 0.0;
      for (const auto* r : rows) mean += getter(*r);
      mean /= static_cast<double>(rows.size());
      double var = 0.0;
      for (const auto* r : rows) var += (getter(*r) - mean) * (getter(*r) - mean);
      double stddev =
          rows.size() > 1 ? std::sqrt(var / static_cast<double>(rows.size() - 1)) : 0.0;
      return std::pair<double, double>{mean, stddev};
    };
    MethodAggregate agg;
    agg.method = method;
    agg.runs = static_cast<int>(rows.size());
    std::tie(agg.avg_mean, agg.avg_std) = stats([](const ReportRow& r) { return r.avg; });
    std::tie(agg.last_mean, agg.last_std) = stats([](const ReportRow& r) { return r.last; });
    std::tie(agg.fgt_mean, agg.fgt_std) = stats([](const ReportRow& r) { return r.fgt; });
    std::tie(agg.bwt_mean, agg.bwt_std) = stats([](const ReportRow& r) { return r.bwt; });
    report.by_method.push_back(std::move(agg));
  }
  return report;
}

std::string render_report_text(const Report& report) {
  std::ostringstream out;
  out << "method      seed        Avg%     Last%      FGT      BwT\n";
  for (const auto& r : report.rows) {
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%-10s %6llu %9.2f %9.2f %8.3f %8.3f\n", r.method.c_str(),
                  static_cast<unsigned long long>(r.seed), 100.0 * r.avg, 100.0 * r.last,
                  r.fgt, r.bwt);
    out << buf;
  }
  out << "\nper-method mean +/- std over seeds\n";
  for (const auto& a : report.by_method) {
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "%-10s (n=%d)  Avg %.2f+/-%.2f%%  Last %.2f+/-%.2f%%  FGT %.3f+/-%.3f  "
                  "BwT %.3f+/-%.3f\n",
                  a.method.c_str(), a.runs, 100.0 * a.avg_mean, 100.0 * a.avg_std,
                  100.0 * a.last_mean, 100.0 * a.last_std, a.fgt_mean, a.fgt_std, a.bwt_mean,
                  a.bwt_std);
    out << buf;
  }
  return out.str();
}

std::string render_report_csv(const Report& report) {
  std::ostringstream out;
  out << "kind,method,seed_or_runs,avg,last,fgt,bwt,avg_std,last_std,fgt_std,bwt_std\n";
  for (const auto& r : report.rows) {
    out << "run," << r.method << "," << r.seed << "," << fmt("%.6f", r.avg) << ","
        << fmt("%.6f", r.last) << "," << fmt("%.6f", r.fgt) << "," << fmt("%.6f", r.bwt)
        << ",,,,\n";
  }
  for (const auto& a : report.by_method) {
    out << "mean," << a.method << "," << a.runs << "," << fmt("%.6f", a.avg_mean) << ","
        << fmt("%.6f", a.last_mean) << "," << fmt("%.6f", a.fgt_mean) << ","
        << fmt("%.6f", a.bwt_mean) << "," << fmt("%.6f", a.avg_std) << ","
        << fmt("%.6f", a.last_std) << "," << fmt("%.6f", a.fgt_std) << ","
        << fmt("%.6f", a.bwt_std) << "\n";
  }
  return out.str();
}

}  // namespace reffil
