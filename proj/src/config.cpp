#include "reffil/config.hpp"

#include <cmath>
#include <fstream>
#include <set>

namespace reffil {

namespace {

void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known,
                         const std::string& scope) {
  if (!j.is_object()) throw ConfigError(scope + ": expected an object");
  for (const auto& [key, value] : j.items())
    if (known.count(key) == 0) throw ConfigError(scope + ": unknown key '" + key + "'");
}

template <typename T>
void read_field(const nlohmann::json& j, const char* key, T& out, const std::string& scope) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(scope + "." + key + ": wrong type");
  }
}

}  // namespace

ModelConfig ExperimentConfig::model_config() const {
  ModelConfig mc;
  mc.input_dim = dataset.feature_dim;
  mc.n_tokens = model.tokens;
  mc.token_dim = model.token_dim;
  mc.prompt_len = model.prompt_len;
  mc.heads = model.heads;
  mc.key_dim = model.key_dim;
  mc.n_classes = dataset.classes;
  return mc;
}

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };

  if (method != "reffil" && method != "finetune")
    fail("method: must be 'reffil' or 'finetune', got '" + method + "'");

  if (dataset.feature_dim < 2) fail("dataset.feature_dim: must be >= 2");
  if (dataset.classes < 2) fail("dataset.classes: must be >= 2");
  if (dataset.samples_per_task < dataset.classes)
    fail("dataset.samples_per_task: must be >= dataset.classes");
  if (dataset.test_samples_per_task < dataset.classes)
    fail("dataset.test_samples_per_task: must be >= dataset.classes");
  if (!(dataset.dirichlet_alpha > 0.0)) fail("dataset.dirichlet_alpha: must be positive");
  if (dataset.domains.empty()) fail("dataset.domains: at least one domain is required");
  for (std::size_t i = 0; i < dataset.domains.size(); ++i) {
    const auto& d = dataset.domains[i];
    if (d.task_id != static_cast<int>(i) + 1)
      fail("dataset.domains: task_id values must be consecutive starting at 1");
    if (d.noise_sigma < 0.0) fail("dataset.domains: noise_sigma must be >= 0");
    if (d.transform_params.empty())
      fail("dataset.domains: transform_params must not be empty");
    bool ok_len = d.transform_params.size() == 1 ||
                  d.transform_params.size() ==
                      static_cast<std::size_t>(dataset.feature_dim) + 1;
    if (!ok_len)
      fail("dataset.domains: transform_params must be [angle] or [angle, feature_dim scales]");
    for (double v : d.transform_params)
      if (!std::isfinite(v)) fail("dataset.domains: transform_params must be finite");
  }
  for (std::size_t i = 0; i < dataset.domains.size(); ++i)
    for (std::size_t j = i + 1; j < dataset.domains.size(); ++j)
      if (dataset.domains[i].transform_params == dataset.domains[j].transform_params)
        fail("dataset.domains: tasks " + std::to_string(i + 1) + " and " +
             std::to_string(j + 1) + " share identical transform_params (domains must differ)");

  try {
    model_config().validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }

  if (schedule.rounds < 1) fail("schedule.rounds: must be >= 1");
  if (schedule.epochs < 1) fail("schedule.epochs: must be >= 1");
  if (!(schedule.lr >= 0.0)) fail("schedule.lr: must be >= 0");
  if (schedule.batch_size < 1) fail("schedule.batch_size: must be >= 1");
  if (schedule.selection_count < 1) fail("schedule.selection_count: must be >= 1");
  if (schedule.initial_clients < 1) fail("schedule.initial_clients: must be >= 1");
  if (schedule.selection_count > schedule.initial_clients)
    fail("schedule.selection_count: must be <= schedule.initial_clients");
  if (schedule.increment_per_task < 0) fail("schedule.increment_per_task: must be >= 0");
  if (schedule.transition_fraction < 0.0 || schedule.transition_fraction > 1.0)
    fail("schedule.transition_fraction: must be within [0,1], got " +
         std::to_string(schedule.transition_fraction));
  if (schedule.initial_clients > dataset.samples_per_task)
    fail("schedule.initial_clients: must be <= dataset.samples_per_task");

  const auto& t = loss.temperature;
  if (!(t.tau > 0.0 && t.tau <= 1.0)) fail("loss.tau: must be in (0,1]");
  if (!(t.tau_min > 0.0 && t.tau_min <= t.tau)) fail("loss.tau_min: must be in (0, tau]");
  if (t.gamma < 0.0 || t.gamma > 1.0) fail("loss.gamma: must be within [0,1]");
  if (t.beta < 0.0 || t.beta > 1.0) fail("loss.beta: must be within [0,1]");
}

bool ExperimentConfig::operator==(const ExperimentConfig& o) const {
  return dump_config(*this) == dump_config(o);
}

ExperimentConfig parse_config(const nlohmann::json& j) {
  reject_unknown_keys(j, {"schema", "method", "seed", "dataset", "model", "schedule", "loss"},
                      "config");
  if (!j.contains("schema")) throw ConfigError("config.schema: missing");
  if (j.at("schema") != ExperimentConfig::kSchema)
    throw ConfigError("config.schema: expected '" + std::string(ExperimentConfig::kSchema) + "'");

  ExperimentConfig c;
  read_field(j, "method", c.method, "config");
  read_field(j, "seed", c.seed, "config");

  if (!j.contains("dataset")) throw ConfigError("config.dataset: missing");
  {
    const auto& d = j.at("dataset");
    reject_unknown_keys(d,
                        {"data_seed", "feature_dim", "classes", "samples_per_task",
                         "test_samples_per_task", "dirichlet_alpha", "dump_shards", "domains"},
                        "dataset");
    if (d.contains("data_seed")) {
      uint64_t ds = 0;
      read_field(d, "data_seed", ds, "dataset");
      c.dataset.data_seed = ds;
    }
    read_field(d, "feature_dim", c.dataset.feature_dim, "dataset");
    read_field(d, "classes", c.dataset.classes, "dataset");
    read_field(d, "samples_per_task", c.dataset.samples_per_task, "dataset");
    read_field(d, "test_samples_per_task", c.dataset.test_samples_per_task, "dataset");
    read_field(d, "dirichlet_alpha", c.dataset.dirichlet_alpha, "dataset");
    read_field(d, "dump_shards", c.dataset.dump_shards, "dataset");
    if (!d.contains("domains")) throw ConfigError("dataset.domains: missing");
    if (!d.at("domains").is_array()) throw ConfigError("dataset.domains: expected an array");
    for (const auto& dj : d.at("domains")) {
      reject_unknown_keys(dj, {"task_id", "transform_params", "noise_sigma"},
                          "dataset.domains[]");
      DomainSpec spec;
      read_field(dj, "task_id", spec.task_id, "dataset.domains[]");
      read_field(dj, "transform_params", spec.transform_params, "dataset.domains[]");
      read_field(dj, "noise_sigma", spec.noise_sigma, "dataset.domains[]");
      c.dataset.domains.push_back(std::move(spec));
    }
  }

  if (j.contains("model")) {
    const auto& m = j.at("model");
    reject_unknown_keys(m, {"tokens", "token_dim", "prompt_len", "heads", "key_dim"}, "model");
    read_field(m, "tokens", c.model.tokens, "model");
    read_field(m, "token_dim", c.model.token_dim, "model");
    read_field(m, "prompt_len", c.model.prompt_len, "model");
    read_field(m, "heads", c.model.heads, "model");
    read_field(m, "key_dim", c.model.key_dim, "model");
  }

  if (j.contains("schedule")) {
    const auto& s = j.at("schedule");
    reject_unknown_keys(s,
                        {"rounds", "epochs", "lr", "batch_size", "selection_count",
                         "initial_clients", "increment_per_task", "transition_fraction"},
                        "schedule");
    read_field(s, "rounds", c.schedule.rounds, "schedule");
    read_field(s, "epochs", c.schedule.epochs, "schedule");
    read_field(s, "lr", c.schedule.lr, "schedule");
    read_field(s, "batch_size", c.schedule.batch_size, "schedule");
    read_field(s, "selection_count", c.schedule.selection_count, "schedule");
    read_field(s, "initial_clients", c.schedule.initial_clients, "schedule");
    read_field(s, "increment_per_task", c.schedule.increment_per_task, "schedule");
    read_field(s, "transition_fraction", c.schedule.transition_fraction, "schedule");
  }

  if (j.contains("loss")) {
    const auto& l = j.at("loss");
    reject_unknown_keys(l, {"tau", "tau_min", "gamma", "beta", "use_gpl", "use_dpcl"}, "loss");
    read_field(l, "tau", c.loss.temperature.tau, "loss");
    read_field(l, "tau_min", c.loss.temperature.tau_min, "loss");
    read_field(l, "gamma", c.loss.temperature.gamma, "loss");
    read_field(l, "beta", c.loss.temperature.beta, "loss");
    read_field(l, "use_gpl", c.loss.use_gpl, "loss");
    read_field(l, "use_dpcl", c.loss.use_dpcl, "loss");
  }

  c.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return parse_config(j);
}

nlohmann::ordered_json dump_config(const ExperimentConfig& c) {
  nlohmann::ordered_json j;
  j["schema"] = ExperimentConfig::kSchema;
  j["method"] = c.method;
  j["seed"] = c.seed;
  auto& d = j["dataset"];
  if (c.dataset.data_seed) d["data_seed"] = *c.dataset.data_seed;
  d["feature_dim"] = c.dataset.feature_dim;
  d["classes"] = c.dataset.classes;
  d["samples_per_task"] = c.dataset.samples_per_task;
  d["test_samples_per_task"] = c.dataset.test_samples_per_task;
  d["dirichlet_alpha"] = c.dataset.dirichlet_alpha;
  d["dump_shards"] = c.dataset.dump_shards;
  d["domains"] = nlohmann::ordered_json::array();
  for (const auto& spec : c.dataset.domains) {
    nlohmann::ordered_json dj;
    dj["task_id"] = spec.task_id;
    dj["transform_params"] = spec.transform_params;
    dj["noise_sigma"] = spec.noise_sigma;
    d["domains"].push_back(std::move(dj));
  }
  auto& m = j["model"];
  m["tokens"] = c.model.tokens;
  m["token_dim"] = c.model.token_dim;
  m["prompt_len"] = c.model.prompt_len;
  m["heads"] = c.model.heads;
  m["key_dim"] = c.model.key_dim;
  auto& s = j["schedule"];
  s["rounds"] = c.schedule.rounds;
  s["epochs"] = c.schedule.epochs;
  s["lr"] = c.schedule.lr;
  s["batch_size"] = c.schedule.batch_size;
  s["selection_count"] = c.schedule.selection_count;
  s["initial_clients"] = c.schedule.initial_clients;
  s["increment_per_task"] = c.schedule.increment_per_task;
  s["transition_fraction"] = c.schedule.transition_fraction;
  auto& l = j["loss"];
  l["tau"] = c.loss.temperature.tau;
  l["tau_min"] = c.loss.temperature.tau_min;
  l["gamma"] = c.loss.temperature.gamma;
  l["beta"] = c.loss.temperature.beta;
  l["use_gpl"] = c.loss.use_gpl;
  l["use_dpcl"] = c.loss.use_dpcl;
  return j;
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  const double deg = M_PI / 180.0;
  c.dataset.domains = {
      DomainSpec{1, {0.0 * deg}, 0.1},
      DomainSpec{2, {60.0 * deg}, 0.1},
      DomainSpec{3, {120.0 * deg}, 0.1},
  };
  return c;
}

}  // namespace reffil
