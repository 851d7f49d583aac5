#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <vector>

namespace reffil {

/// One incremental domain. transform_params is either [angle] or
/// [angle, s_1, ..., s_D] where angle is the rotation (radians) applied in a
/// 2-plane selected by the base seed and s_i are per-feature scales.
struct DomainSpec {
  int task_id = 1;
  std::vector<double> transform_params;
  double noise_sigma = 0.0;
};

struct LabeledSample {
  Eigen::VectorXd features;
  int label = 0;
};

struct ClientShard {
  int client_id = 0;
  int task_id = 0;
  std::vector<LabeledSample> samples;
  double quantity_weight = 0.0;
};

/// The affine domain map: rotation in a seeded 2-plane followed by a
/// per-feature scale. Noise is added separately during generation.
struct DomainTransform {
  Eigen::VectorXd plane_a;
  Eigen::VectorXd plane_b;
  double angle = 0.0;
  Eigen::VectorXd scale;

  /// Builds the transform for `spec`. The 2-plane depends only on base_seed,
  /// so all tasks rotate within the same plane and gaps stay comparable.
  /// Throws std::invalid_argument when transform_params has an unsupported
  /// shape (neither [angle] nor [angle, D scales]).
  static DomainTransform build(const DomainSpec& spec, int feature_dim,
                               uint64_t base_seed);

  Eigen::VectorXd apply(const Eigen::VectorXd& x) const;
};

/// Class prototypes shared by every task: K unit-Gaussian draws fixed by
/// base_seed. Row k is the prototype of class k.
Eigen::MatrixXd class_prototypes(int n_classes, int feature_dim, uint64_t base_seed);

/// Generates one task: balanced labels, prototype -> domain transform ->
/// Gaussian noise. Deterministic in (spec, base_seed).
std::vector<LabeledSample> generate_task(const DomainSpec& spec, int n_samples,
                                         int n_classes, int feature_dim,
                                         uint64_t base_seed);

/// Splits `samples` across clients with Dirichlet(alpha) quantity shift.
/// Shard sizes follow the scaled Dirichlet draw (every client gets at least
/// one sample); class proportions inside each shard track the pool, so the
/// shift is in quantity only. Shards partition the input exactly.
std::vector<ClientShard> partition_quantity_shift(const std::vector<LabeledSample>& samples,
                                                  int n_clients, double dirichlet_alpha,
                                                  uint64_t seed, int task_id = 0);

/// Writes one JSON-lines file per client under `dir`
/// (client_<id>.jsonl, one {"client","task","x","y"} object per line).
void dump_shards_jsonl(const std::vector<ClientShard>& shards, const std::string& dir);

}  // namespace reffil
