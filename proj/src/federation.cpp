#include "reffil/federation.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "reffil/rng.hpp"
#include "reffil/runio.hpp"

namespace reffil {

std::set<int> ClientGroupAssignment::all_ids() const {
  std::set<int> ids = old_ids;
  ids.insert(between_ids.begin(), between_ids.end());
  ids.insert(new_ids.begin(), new_ids.end());
  return ids;
}

ClientGroup ClientGroupAssignment::group_of(int client_id) const {
  if (old_ids.count(client_id)) return ClientGroup::Old;
  if (between_ids.count(client_id)) return ClientGroup::Between;
  if (new_ids.count(client_id)) return ClientGroup::New;
  throw std::invalid_argument("client " + std::to_string(client_id) +
                              " is not in the current population");
}

ClientGroupAssignment initial_assignment(int n_clients) {
  if (n_clients < 1) throw std::invalid_argument("need at least one initial client");
  ClientGroupAssignment a;
  a.task_index = 1;
  for (int i = 0; i < n_clients; ++i) a.new_ids.insert(i);
  return a;
}

ClientGroupAssignment advance_task(const ClientGroupAssignment& prev,
                                   double transition_fraction, int increment_count,
                                   uint64_t seed) {
  if (transition_fraction < 0.0 || transition_fraction > 1.0)
    throw std::invalid_argument("transition_fraction must be within [0,1]");
  if (increment_count < 0) throw std::invalid_argument("increment_count must be >= 0");

  std::set<int> existing = prev.all_ids();
  std::vector<int> pool(existing.begin(), existing.end());
  int n_transition =
      static_cast<int>(std::floor(transition_fraction * static_cast<double>(pool.size())));

  Rng rng(seed);
  std::vector<int> transitioning = rng.sample_without_replacement(pool,
      static_cast<std::size_t>(n_transition));

  ClientGroupAssignment next;
  next.task_index = prev.task_index + 1;
  next.between_ids.insert(transitioning.begin(), transitioning.end());
  for (int id : existing)
    if (!next.between_ids.count(id)) next.old_ids.insert(id);

  int next_id = existing.empty() ? 0 : *existing.rbegin() + 1;
  for (int i = 0; i < increment_count; ++i) next.new_ids.insert(next_id + i);
  return next;
}

std::vector<int> select_clients(const std::set<int>& population, int count, uint64_t seed) {
  if (count < 0) throw std::invalid_argument("selection count must be >= 0");
  if (static_cast<std::size_t>(count) > population.size())
    throw std::invalid_argument("selection count exceeds the population size");
  std::vector<int> pool(population.begin(), population.end());
  Rng rng(seed);
  std::vector<int> picked = rng.sample_without_replacement(pool, static_cast<std::size_t>(count));
  std::sort(picked.begin(), picked.end());
  return picked;
}

void ShardStore::put(ClientShard shard) {
  shards_[{shard.client_id, shard.task_id}] = std::move(shard);
}

bool ShardStore::has(int client_id, int task_id) const {
  return shards_.count({client_id, task_id}) > 0;
}

const ClientShard& ShardStore::fetch(int client_id, int task_id) {
  auto it = shards_.find({client_id, task_id});
  if (it == shards_.end())
    throw std::invalid_argument("no shard for client " + std::to_string(client_id) +
                                ", task " + std::to_string(task_id));
  ++accesses_;
  auto ent = entitlements_.find(client_id);
  if (ent == entitlements_.end() || ent->second.count(task_id) == 0) ++violations_;
  return it->second;
}

void ShardStore::set_entitlement(int client_id, std::set<int> tasks) {
  entitlements_[client_id] = std::move(tasks);
}

const std::set<int>& ShardStore::entitlement(int client_id) const {
  static const std::set<int> empty;
  auto it = entitlements_.find(client_id);
  return it == entitlements_.end() ? empty : it->second;
}

LocalTrainResult run_local_training(ModelParams& params,
                                    const std::vector<BatchSample>& dataset,
                                    const GlobalPromptSet& global_prompts,
                                    const LocalTrainOptions& options) {
  if (dataset.empty()) throw std::invalid_argument("empty local dataset");
  if (options.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (options.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");

  if (options.use_prompts)
    for (const auto& bs : dataset) params.ensure_task_key(bs.task_id);

  TrainOptions topt;
  topt.use_prompts = options.use_prompts;
  topt.use_gpl = options.use_gpl;
  topt.use_dpcl = options.use_dpcl;
  topt.tau_prime = options.tau_prime;
  topt.group = options.group;

  LocalTrainResult result;
  result.sample_count = dataset.size();
  std::map<int, std::vector<Vec>> prompt_map;
  ModelParams grads = params.zeros_like();

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    Rng shuffle_rng(derive_seed(options.shuffle_seed, "epoch", static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);
    const bool final_epoch = epoch == options.epochs;
    double epoch_loss = 0.0;
    int epoch_batches = 0;

    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(options.batch_size)) {
      std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(options.batch_size));
      std::vector<BatchSample> batch;
      batch.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) batch.push_back(dataset[order[i]]);

      grads.for_each_tensor([](const TensorInfo&, auto& tensor) { tensor.setZero(); });
      BatchStats stats =
          train_loss_and_grads(params, batch, global_prompts, topt, &grads,
                               final_epoch ? &prompt_map : nullptr);
      sgd_step(params, grads, options.lr);

      result.losses.ce += stats.ce;
      result.losses.gpl += stats.gpl;
      result.losses.dpcl += stats.dpcl;
      result.losses.batches += 1;
      epoch_loss += stats.total();
      ++epoch_batches;
    }
    result.epoch_loss.push_back(epoch_batches ? epoch_loss / epoch_batches : 0.0);
  }

  result.lpg = build_lpg(options.client_id, prompt_map);
  return result;
}

namespace {

struct TaskData {
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> test;
};

std::vector<BatchSample> assemble_dataset(ShardStore& store, const ClientState& client) {
  std::vector<BatchSample> data;
  for (int task : client.data_tasks) {
    const ClientShard& shard = store.fetch(client.id, task);
    for (const auto& s : shard.samples) data.push_back(BatchSample{s, task});
  }
  return data;
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& config, const std::string& out_dir) {
  config.validate();
  RunWriter writer(out_dir);
  std::string stage = "setup";
  try {
    writer.write_config_snapshot(config);

    const uint64_t root = config.seed;
    const bool reffil_mode = config.method == "reffil";
    const int n_tasks = config.n_tasks();
    const auto& sched = config.schedule;

    // Train/test pools per task: one generation stream, split so both sides
    // share the prototypes and the domain transform.
    stage = "data-generation";
    const uint64_t data_seed = derive_seed(
        config.dataset.data_seed.value_or(root), "data");
    std::vector<TaskData> tasks(static_cast<std::size_t>(n_tasks));
    for (int t = 1; t <= n_tasks; ++t) {
      const auto& spec = config.dataset.domains[static_cast<std::size_t>(t - 1)];
      auto all = generate_task(spec, config.dataset.samples_per_task +
                                         config.dataset.test_samples_per_task,
                               config.dataset.classes, config.dataset.feature_dim, data_seed);
      auto& td = tasks[static_cast<std::size_t>(t - 1)];
      td.train.assign(all.begin(), all.begin() + config.dataset.samples_per_task);
      td.test.assign(all.begin() + config.dataset.samples_per_task, all.end());
    }

    stage = "population-setup";
    ClientGroupAssignment assignment = initial_assignment(sched.initial_clients);
    ModelParams global = ModelParams::init(config.model_config(), derive_seed(root, "init"));
    std::map<int, ClientState> clients;
    ShardStore store;

    auto distribute_task_data = [&](int task_index, const std::set<int>& recipients) {
      std::vector<int> ids(recipients.begin(), recipients.end());
      auto shards = partition_quantity_shift(
          tasks[static_cast<std::size_t>(task_index - 1)].train, static_cast<int>(ids.size()),
          config.dataset.dirichlet_alpha,
          derive_seed(root, "partition", static_cast<uint64_t>(task_index)), task_index);
      for (std::size_t i = 0; i < shards.size(); ++i) {
        shards[i].client_id = ids[i];
        if (config.dataset.dump_shards) dump_shards_jsonl({shards[i]}, out_dir + "/shards");
        store.put(std::move(shards[i]));
      }
    };

    auto sync_groups = [&](const ClientGroupAssignment& a) {
      for (auto& [id, cs] : clients)
        if (a.all_ids().count(id)) cs.group = a.group_of(id);
    };

    for (int id : assignment.new_ids) {
      ClientState cs;
      cs.id = id;
      cs.group = ClientGroup::New;
      cs.model = global;
      cs.data_tasks = {1};
      cs.latest_data_task = 1;
      clients.emplace(id, std::move(cs));
      store.set_entitlement(id, {1});
    }
    distribute_task_data(1, assignment.all_ids());

    GlobalPromptSet global_prompts;
    std::vector<std::vector<double>> matrix_rows;
    int global_version = 0;

    for (int t = 1; t <= n_tasks; ++t) {
      const double tau_prime = temperature(config.loss.temperature, t);

      for (int r = 1; r <= sched.rounds; ++r) {
        stage = "task " + std::to_string(t) + " round " + std::to_string(r);
        const int global_round = (t - 1) * sched.rounds + r;
        RoundPlan plan;
        plan.round = global_round;
        plan.task_index = t;
        plan.global_model_version = global_version;
        plan.selected = select_clients(
            assignment.all_ids(), sched.selection_count,
            derive_seed(root, "select", static_cast<uint64_t>(t), static_cast<uint64_t>(r)));

        std::vector<std::pair<const ModelParams*, std::size_t>> updates;
        std::vector<LocalPromptGroup> lpgs;
        for (int m : plan.selected) {
          ClientState& cs = clients.at(m);
          apply_aggregate(cs.model, global);

          LocalTrainOptions opt;
          opt.client_id = m;
          opt.epochs = sched.epochs;
          opt.lr = sched.lr;
          opt.batch_size = sched.batch_size;
          opt.tau_prime = tau_prime;
          opt.group = cs.group;
          opt.use_prompts = reffil_mode;
          opt.use_gpl = reffil_mode && config.loss.use_gpl;
          opt.use_dpcl = reffil_mode && config.loss.use_dpcl;
          opt.shuffle_seed = derive_seed(root, "batch", static_cast<uint64_t>(t),
                                         static_cast<uint64_t>(r), static_cast<uint64_t>(m));

          auto data = assemble_dataset(store, cs);
          LocalTrainResult res = run_local_training(cs.model, data, global_prompts, opt);

          RoundLossRow row;
          row.round = global_round;
          row.task = t;
          row.client = m;
          row.ce = res.losses.mean_ce();
          row.gpl = res.losses.mean_gpl();
          row.dpcl = res.losses.mean_dpcl();
          row.tau_prime = tau_prime;
          writer.append_round_row(row);

          updates.push_back({&cs.model, res.sample_count});
          if (reffil_mode && !res.lpg.per_class.empty()) lpgs.push_back(std::move(res.lpg));
        }

        ModelParams aggregated = fedavg(updates);
        apply_aggregate(global, aggregated);
        ++global_version;

        if (reffil_mode) {
          if (!lpgs.empty())
            global_prompts = build_global_prompt_set(lpgs, &global_prompts);
          writer.write_prompts(global_prompts, global_round);
        }
      }

      stage = "evaluation after task " + std::to_string(t);
      for (int k = 1; k <= t; ++k) global.ensure_task_key(k);
      std::vector<double> row;
      for (int j = 1; j <= t; ++j) {
        double acc = evaluate_accuracy(global, tasks[static_cast<std::size_t>(j - 1)].test,
                                       reffil_mode);
        row.push_back(acc);
        writer.append_eval_row(EvalRow{t, j, acc});
      }
      matrix_rows.push_back(std::move(row));
      writer.write_checkpoint(global, t);

      if (t < n_tasks) {
        stage = "advance to task " + std::to_string(t + 1);
        assignment = advance_task(assignment, sched.transition_fraction,
                                  sched.increment_per_task,
                                  derive_seed(root, "advance", static_cast<uint64_t>(t)));
        sync_groups(assignment);

        for (int id : assignment.new_ids) {
          ClientState cs;
          cs.id = id;
          cs.group = ClientGroup::New;
          cs.model = global;
          cs.data_tasks = {t + 1};
          cs.latest_data_task = t + 1;
          clients.emplace(id, std::move(cs));
          store.set_entitlement(id, {t + 1});
        }
        for (int id : assignment.between_ids) {
          ClientState& cs = clients.at(id);
          cs.data_tasks = {cs.latest_data_task, t + 1};
          cs.latest_data_task = t + 1;
          store.set_entitlement(id, cs.data_tasks);
        }
        for (int id : assignment.old_ids) {
          ClientState& cs = clients.at(id);
          cs.data_tasks = {cs.latest_data_task};
          store.set_entitlement(id, cs.data_tasks);
        }

        std::set<int> recipients = assignment.between_ids;
        recipients.insert(assignment.new_ids.begin(), assignment.new_ids.end());
        distribute_task_data(t + 1, recipients);
      }
    }

    stage = "summary";
    RunResult result;
    result.matrix = AccuracyMatrix::from_rows(std::move(matrix_rows));
    result.summary.method = config.method;
    result.summary.seed = config.seed;
    result.summary.avg = avg_accuracy(result.matrix);
    result.summary.last = last_accuracy(result.matrix);
    result.summary.fgt = forgetting(result.matrix);
    result.summary.bwt = backward_transfer(result.matrix);
    result.audit_accesses = store.access_count();
    result.audit_violations = store.violation_count();
    result.out_dir = out_dir;
    writer.write_summary(result.summary);
    writer.write_audit(result.audit_accesses, result.audit_violations);
    return result;
  } catch (const std::exception& e) {
    writer.write_error(stage, e.what());
    throw;
  }
}

}  // namespace reffil
