#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "reffil/data.hpp"
#include "reffil/losses.hpp"
#include "reffil/model.hpp"

namespace reffil {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DatasetConfig {
  // When set, dataset generation derives from this seed instead of the run
  // seed, fixing the benchmark data while training randomness varies.
  std::optional<uint64_t> data_seed;
  int feature_dim = 16;
  int classes = 6;
  int samples_per_task = 600;
  int test_samples_per_task = 200;
  double dirichlet_alpha = 1.0;
  bool dump_shards = false;
  std::vector<DomainSpec> domains;  // required; defines T
};

struct ScheduleConfig {
  int rounds = 30;
  int epochs = 20;
  double lr = 0.03;
  int batch_size = 16;
  int selection_count = 5;
  int initial_clients = 10;
  int increment_per_task = 1;
  double transition_fraction = 0.8;
};

struct LossConfig {
  TemperatureSchedule temperature;
  bool use_gpl = true;
  bool use_dpcl = true;
};

struct ModelBlockConfig {
  int tokens = 4;
  int token_dim = 8;
  int prompt_len = 2;
  int heads = 2;
  int key_dim = 8;
};

/// Full experiment description. The schema is versioned JSON; unknown keys
/// are rejected so stored snapshots stay unambiguous.
struct ExperimentConfig {
  static constexpr const char* kSchema = "reffil-config-v1";

  std::string method = "reffil";  // "reffil" or "finetune"
  uint64_t seed = 1;
  DatasetConfig dataset;
  ModelBlockConfig model;
  ScheduleConfig schedule;
  LossConfig loss;

  int n_tasks() const { return static_cast<int>(dataset.domains.size()); }
  ModelConfig model_config() const;
  void validate() const;  // throws ConfigError naming the offending field

  bool operator==(const ExperimentConfig&) const;
};

/// Parses and validates; defaults fill any omitted block or field.
ExperimentConfig load_config(const std::string& path);
ExperimentConfig parse_config(const nlohmann::json& j);
nlohmann::ordered_json dump_config(const ExperimentConfig& config);

/// A complete default configuration (three rotated domains) for
/// `dump-config-defaults` and as a documentation template.
ExperimentConfig default_config();

}  // namespace reffil
