#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "reffil/checkpoint.hpp"
#include "reffil/federation.hpp"
#include "reffil/rng.hpp"
#include "reffil/runio.hpp"

using namespace reffil;

namespace {

ModelConfig tiny_model() {
  ModelConfig cfg;
  cfg.input_dim = 4;
  cfg.n_tokens = 2;
  cfg.token_dim = 8;
  cfg.prompt_len = 2;
  cfg.heads = 2;
  cfg.key_dim = 4;
  cfg.n_classes = 2;
  return cfg;
}

std::vector<BatchSample> separable_data(int per_class, uint64_t seed) {
  Rng rng(seed);
  std::vector<BatchSample> data;
  for (int i = 0; i < 2 * per_class; ++i) {
    int label = i % 2;
    Vec x(4);
    for (int j = 0; j < 4; ++j) x[j] = 0.3 * rng.normal();
    x[0] += label ? 2.0 : -2.0;
    data.push_back(BatchSample{LabeledSample{x, label}, 1});
  }
  return data;
}

ExperimentConfig small_experiment(const std::string& method, uint64_t seed) {
  ExperimentConfig c;
  c.method = method;
  c.seed = seed;
  c.dataset.feature_dim = 8;
  c.dataset.classes = 3;
  c.dataset.samples_per_task = 90;
  c.dataset.test_samples_per_task = 45;
  c.dataset.dirichlet_alpha = 1.0;
  c.dataset.domains = {DomainSpec{1, {0.0}, 0.3}, DomainSpec{2, {1.0}, 0.3},
                       DomainSpec{3, {2.0}, 0.3}, DomainSpec{4, {3.0}, 0.3}};
  c.model.tokens = 2;
  c.model.token_dim = 8;
  c.model.prompt_len = 2;
  c.model.heads = 2;
  c.model.key_dim = 4;
  c.schedule.rounds = 2;
  c.schedule.epochs = 2;
  c.schedule.lr = 0.05;
  c.schedule.batch_size = 8;
  c.schedule.selection_count = 3;
  c.schedule.initial_clients = 5;
  c.schedule.increment_per_task = 2;
  c.schedule.transition_fraction = 0.8;
  return c;
}

std::string temp_dir(const std::string& name) {
  auto path = std::filesystem::temp_directory_path() / name;
  std::filesystem::remove_all(path);
  return path.string();
}

}  // namespace

TEST_CASE("advance_task splits the population as configured") {
  auto a = initial_assignment(10);
  CHECK(a.population() == 10);
  CHECK(a.new_ids.size() == 10);

  auto b = advance_task(a, 0.8, 1, 42);
  CHECK(b.between_ids.size() == 8);
  CHECK(b.old_ids.size() == 2);
  CHECK(b.new_ids.size() == 1);
  CHECK(b.population() == 11);
  CHECK(b.task_index == 2);
  CHECK(*b.new_ids.begin() == 10);  // fresh id above the existing range
}

TEST_CASE("advance_task with no transition keeps everyone old") {
  auto a = initial_assignment(6);
  auto b = advance_task(a, 0.0, 0, 1);
  CHECK(b.old_ids.size() == 6);
  CHECK(b.between_ids.empty());
  CHECK(b.new_ids.empty());
  CHECK(b.population() == 6);
}

TEST_CASE("full transition moves everyone in between") {
  auto a = initial_assignment(20);
  auto b = advance_task(a, 1.0, 2, 9);
  CHECK(b.between_ids.size() == 20);
  CHECK(b.old_ids.empty());
  CHECK(b.new_ids.size() == 2);
  CHECK(b.population() == 22);
}

TEST_CASE("population is conserved across repeated transitions") {
  auto a = initial_assignment(7);
  int expected = 7;
  for (int t = 1; t <= 6; ++t) {
    int inc = t % 3;
    auto next = advance_task(a, 0.6, inc, derive_seed(5, "adv", static_cast<uint64_t>(t)));
    expected += inc;
    CHECK(next.population() == expected);
    // Disjointness: ids appear in exactly one group.
    std::set<int> all = next.all_ids();
    CHECK(static_cast<int>(all.size()) == next.population());
    a = next;
  }
}

TEST_CASE("select_clients edge cases and determinism") {
  std::set<int> pop = {3, 5, 9, 11, 20};
  auto all = select_clients(pop, 5, 7);
  CHECK(std::set<int>(all.begin(), all.end()) == pop);
  CHECK(select_clients(pop, 0, 7).empty());
  CHECK(select_clients(pop, 3, 123) == select_clients(pop, 3, 123));
  CHECK_THROWS_AS(select_clients(pop, 6, 7), std::invalid_argument);

  // Ascending order and membership.
  auto three = select_clients(pop, 3, 99);
  CHECK(std::is_sorted(three.begin(), three.end()));
  for (int id : three) CHECK(pop.count(id) == 1);
}

TEST_CASE("shard store tracks entitlements") {
  ShardStore store;
  ClientShard shard;
  shard.client_id = 1;
  shard.task_id = 1;
  shard.samples.push_back(LabeledSample{Vec::Zero(2), 0});
  store.put(shard);
  shard.task_id = 2;
  store.put(shard);

  store.set_entitlement(1, {1});
  store.fetch(1, 1);
  CHECK(store.access_count() == 1);
  CHECK(store.violation_count() == 0);
  store.fetch(1, 2);  // outside the entitlement
  CHECK(store.access_count() == 2);
  CHECK(store.violation_count() == 1);
  CHECK_THROWS_AS(store.fetch(2, 1), std::invalid_argument);
}

TEST_CASE("zero learning rate leaves the parameters untouched but yields an LPG") {
  auto params = ModelParams::init(tiny_model(), 3);
  auto reference = params;
  reference.ensure_task_key(1);

  LocalTrainOptions opt;
  opt.client_id = 4;
  opt.epochs = 2;
  opt.lr = 0.0;
  opt.batch_size = 4;
  opt.use_prompts = true;
  opt.use_gpl = false;
  opt.use_dpcl = false;
  opt.shuffle_seed = 11;

  auto data = separable_data(6, 31);
  auto result = run_local_training(params, data, GlobalPromptSet{}, opt);

  std::vector<double> got, want;
  params.for_each_tensor([&](const TensorInfo&, const auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) got.push_back(t.data()[i]);
  });
  reference.for_each_tensor([&](const TensorInfo&, const auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) want.push_back(t.data()[i]);
  });
  CHECK(got == want);

  CHECK(result.lpg.client_id == 4);
  CHECK(result.lpg.per_class.size() == 2);  // both classes appeared
  CHECK(result.sample_count == data.size());
}

TEST_CASE("a single epoch both trains and collects prompts") {
  auto params = ModelParams::init(tiny_model(), 5);
  LocalTrainOptions opt;
  opt.epochs = 1;
  opt.lr = 0.05;
  opt.batch_size = 4;
  opt.use_prompts = true;
  opt.shuffle_seed = 13;
  auto data = separable_data(4, 37);
  auto before = params;
  auto result = run_local_training(params, data, GlobalPromptSet{}, opt);
  CHECK(!result.lpg.per_class.empty());

  bool changed = false;
  std::vector<double> a, b;
  params.for_each_tensor([&](const TensorInfo&, const auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) a.push_back(t.data()[i]);
  });
  before.for_each_tensor([&](const TensorInfo&, const auto& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) b.push_back(t.data()[i]);
  });
  changed = a != b;
  CHECK(changed);
}

TEST_CASE("training loss decreases on separable data") {
  auto params = ModelParams::init(tiny_model(), 7);
  LocalTrainOptions opt;
  opt.epochs = 20;
  opt.lr = 0.05;
  opt.batch_size = 8;
  opt.use_prompts = true;
  opt.use_gpl = false;
  opt.use_dpcl = false;
  opt.shuffle_seed = 17;
  auto data = separable_data(10, 41);
  auto result = run_local_training(params, data, GlobalPromptSet{}, opt);

  REQUIRE(result.epoch_loss.size() == 20);
  int drops = 0;
  for (std::size_t e = 1; e < result.epoch_loss.size(); ++e)
    if (result.epoch_loss[e] < result.epoch_loss[e - 1]) ++drops;
  CHECK(drops >= 17);  // strictly decreasing in at least 90% of transitions
  CHECK(result.epoch_loss.back() < result.epoch_loss.front());
}

TEST_CASE("empty dataset is rejected") {
  auto params = ModelParams::init(tiny_model(), 9);
  CHECK_THROWS_AS(run_local_training(params, {}, GlobalPromptSet{}, LocalTrainOptions{}),
                  std::invalid_argument);
}

TEST_CASE("degenerate federation: one client, one round, one task") {
  ExperimentConfig c = small_experiment("reffil", 11);
  c.dataset.domains = {DomainSpec{1, {0.0}, 0.3}};
  c.schedule.rounds = 1;
  c.schedule.epochs = 2;
  c.schedule.initial_clients = 1;
  c.schedule.selection_count = 1;
  c.schedule.increment_per_task = 0;

  auto out = temp_dir("reffil_degenerate");
  auto result = run_experiment(c, out);
  CHECK(result.matrix.tasks() == 1);
  CHECK(result.audit_violations == 0);

  // The aggregate of a single update is that update: re-train the same
  // client against the same inputs and compare checkpoints.
  auto global = load_checkpoint(out + "/checkpoints/task_1.bin", c.model_config());
  auto replico = ModelParams::init(c.model_config(), derive_seed(11, "init"));
  std::filesystem::remove_all(out);

  // Rebuild the client dataset exactly as the run did.
  const uint64_t data_seed = derive_seed(11, "data");
  auto all = generate_task(c.dataset.domains[0], 90 + 45, 3, 8, data_seed);
  std::vector<LabeledSample> train(all.begin(), all.begin() + 90);
  auto shards = partition_quantity_shift(train, 1, 1.0, derive_seed(11, "partition", 1), 1);
  std::vector<BatchSample> data;
  for (const auto& s : shards[0].samples) data.push_back(BatchSample{s, 1});

  LocalTrainOptions opt;
  opt.client_id = 0;
  opt.epochs = c.schedule.epochs;
  opt.lr = c.schedule.lr;
  opt.batch_size = c.schedule.batch_size;
  opt.tau_prime = temperature(c.loss.temperature, 1);
  opt.group = ClientGroup::New;
  opt.use_prompts = true;
  opt.shuffle_seed = derive_seed(11, "batch", 1, 1, 0);
  run_local_training(replico, data, GlobalPromptSet{}, opt);

  bool equal = true;
  std::vector<double> a, b;
  global.for_each_tensor([&](const TensorInfo& info, const auto& t) {
    if (!info.aggregate) return;
    for (Eigen::Index i = 0; i < t.size(); ++i) a.push_back(t.data()[i]);
  });
  replico.for_each_tensor([&](const TensorInfo& info, const auto& t) {
    if (!info.aggregate) return;
    for (Eigen::Index i = 0; i < t.size(); ++i) b.push_back(t.data()[i]);
  });
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) equal = equal && a[i] == b[i];
  CHECK(equal);
}

TEST_CASE("identical domains show no meaningful forgetting") {
  // Two tasks drawn from transforms that differ only microscopically: the
  // accuracy on task 1 after task 2 stays within noise of its value after
  // task 1 (control experiment for the eval protocol).
  ExperimentConfig c = small_experiment("finetune", 13);
  c.dataset.domains = {DomainSpec{1, {0.0}, 0.3}, DomainSpec{2, {1e-9}, 0.3}};
  c.schedule.rounds = 3;
  c.schedule.epochs = 3;
  auto out = temp_dir("reffil_control");
  auto result = run_experiment(c, out);
  std::filesystem::remove_all(out);
  double drop = result.matrix.at(1, 1) - result.matrix.at(2, 1);
  CHECK(drop < 0.10);
}

TEST_CASE("experiment runs are deterministic") {
  ExperimentConfig c = small_experiment("reffil", 17);
  auto out1 = temp_dir("reffil_det1");
  auto out2 = temp_dir("reffil_det2");
  auto r1 = run_experiment(c, out1);
  auto r2 = run_experiment(c, out2);

  CHECK(r1.summary.avg == r2.summary.avg);
  CHECK(r1.summary.fgt == r2.summary.fgt);

  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(out1 + "/evals.csv") == slurp(out2 + "/evals.csv"));
  CHECK(slurp(out1 + "/summary.json") == slurp(out2 + "/summary.json"));
  CHECK(slurp(out1 + "/rounds.csv") == slurp(out2 + "/rounds.csv"));
  std::filesystem::remove_all(out1);
  std::filesystem::remove_all(out2);
}

TEST_CASE("a run is reproducible from its config snapshot") {
  ExperimentConfig c = small_experiment("finetune", 23);
  auto out1 = temp_dir("reffil_snap1");
  run_experiment(c, out1);

  auto reloaded = load_config(out1 + "/config.snapshot");
  CHECK(reloaded == c);
  auto out2 = temp_dir("reffil_snap2");
  run_experiment(reloaded, out2);

  auto slurp = [](const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  CHECK(slurp(out1 + "/summary.json") == slurp(out2 + "/summary.json"));
  std::filesystem::remove_all(out1);
  std::filesystem::remove_all(out2);
}

TEST_CASE("the audit stays clean over a multi-task run") {
  ExperimentConfig c = small_experiment("reffil", 19);
  auto out = temp_dir("reffil_audit");
  auto result = run_experiment(c, out);
  std::filesystem::remove_all(out);
  CHECK(result.audit_violations == 0);
  CHECK(result.audit_accesses > 0);
  CHECK(result.matrix.tasks() == 4);
}
