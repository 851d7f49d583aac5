#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "reffil/config.hpp"
#include "reffil/data.hpp"
#include "reffil/metrics.hpp"
#include "reffil/model.hpp"
#include "reffil/prompts.hpp"

namespace reffil {

/// Client lifecycle groups for one incremental task. Sets are pairwise
/// disjoint and cover the whole population.
struct ClientGroupAssignment {
  std::set<int> old_ids;
  std::set<int> between_ids;
  std::set<int> new_ids;
  int task_index = 1;

  int population() const {
    return static_cast<int>(old_ids.size() + between_ids.size() + new_ids.size());
  }
  std::set<int> all_ids() const;
  ClientGroup group_of(int client_id) const;  // throws when absent
};

/// Task 1 bootstrap: every initial client works the first domain.
ClientGroupAssignment initial_assignment(int n_clients);

/// floor(fraction * M) existing clients (uniform, seeded) transition to the
/// in-between group, the rest stay on their old domain, and increment_count
/// fresh clients join on the new domain.
ClientGroupAssignment advance_task(const ClientGroupAssignment& prev,
                                   double transition_fraction, int increment_count,
                                   uint64_t seed);

/// Uniform sample without replacement, returned in ascending id order.
std::vector<int> select_clients(const std::set<int>& population, int count, uint64_t seed);

struct RoundPlan {
  int round = 1;       // global round index across tasks
  int task_index = 1;
  std::vector<int> selected;
  int global_model_version = 0;
};

/// Shard access tracking: every read of client data goes through fetch(),
/// which records whether the task was inside the client's entitlement.
/// The zero-violation audit is what "rehearsal-free" means operationally.
class ShardStore {
 public:
  void put(ClientShard shard);
  bool has(int client_id, int task_id) const;
  const ClientShard& fetch(int client_id, int task_id);
  void set_entitlement(int client_id, std::set<int> tasks);
  const std::set<int>& entitlement(int client_id) const;

  std::size_t access_count() const { return accesses_; }
  std::size_t violation_count() const { return violations_; }

 private:
  std::map<std::pair<int, int>, ClientShard> shards_;
  std::map<int, std::set<int>> entitlements_;
  std::size_t accesses_ = 0;
  std::size_t violations_ = 0;
};

/// Sample-count-weighted FedAvg over parameter updates (see model.hpp's
/// fedavg); re-exported here because the server loop owns it.
using reffil::fedavg;

struct ClientState {
  int id = 0;
  ClientGroup group = ClientGroup::New;
  ModelParams model;
  std::set<int> data_tasks;     // tasks whose shards the client may read now
  int latest_data_task = 0;     // the client's current domain
};

struct LocalTrainOptions {
  int client_id = 0;
  int epochs = 1;
  double lr = 0.01;
  int batch_size = 16;
  double tau_prime = 0.72;
  ClientGroup group = ClientGroup::New;
  bool use_prompts = true;
  bool use_gpl = true;
  bool use_dpcl = true;
  uint64_t shuffle_seed = 0;
};

struct LossTotals {
  double ce = 0.0, gpl = 0.0, dpcl = 0.0;
  int batches = 0;
  double mean_ce() const { return batches ? ce / batches : 0.0; }
  double mean_gpl() const { return batches ? gpl / batches : 0.0; }
  double mean_dpcl() const { return batches ? dpcl / batches : 0.0; }
};

struct LocalTrainResult {
  LocalPromptGroup lpg;
  LossTotals losses;
  std::size_t sample_count = 0;
  std::vector<double> epoch_loss;  // mean total loss per epoch
};

/// E epochs of mini-batch SGD on the combined objective; instance prompts
/// are collected during the final epoch only and averaged into the returned
/// LocalPromptGroup. Throws on an empty dataset.
LocalTrainResult run_local_training(ModelParams& params,
                                    const std::vector<BatchSample>& dataset,
                                    const GlobalPromptSet& global_prompts,
                                    const LocalTrainOptions& options);

struct RunSummary {
  std::string method;
  uint64_t seed = 0;
  double avg = 0.0, last = 0.0, fgt = 0.0, bwt = 0.0;
};

struct RunResult {
  AccuracyMatrix matrix;
  RunSummary summary;
  std::size_t audit_accesses = 0;
  std::size_t audit_violations = 0;
  std::string out_dir;
};

/// Runs the whole federated schedule and writes the run directory
/// (config.snapshot, rounds.csv, evals.csv, prompts/, checkpoints/,
/// summary.json, audit.json). On failure the directory keeps partial
/// records plus an error manifest, and the exception propagates.
RunResult run_experiment(const ExperimentConfig& config, const std::string& out_dir);

}  // namespace reffil
