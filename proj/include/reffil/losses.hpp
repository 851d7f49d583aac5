#pragma once

#include <Eigen/Dense>
#include <optional>
#include <vector>

#include "reffil/prompts.hpp"

namespace reffil {

/// Contrastive temperature decay over the task sequence.
struct TemperatureSchedule {
  double tau = 0.9;
  double tau_min = 0.3;
  double gamma = 0.1;
  double beta = 0.05;
};

/// tau' = max(tau_min, tau * (1 - (gamma + (t-1) * beta))), t >= 1.
double temperature(const TemperatureSchedule& schedule, int task_index);

/// Lifecycle group of a participant within the current task.
enum class ClientGroup { Old, Between, New };

struct ContrastiveSamples {
  Eigen::VectorXd anchor;
  std::vector<Eigen::VectorXd> positives;
  std::vector<Eigen::VectorXd> negatives;
};

/// Ranks the class's global representatives by cosine similarity to the
/// local prompt: top-1 positive for Old/New clients, top-2 for Between,
/// the rest negative. Returns nullopt when the class has no representatives
/// (skip the contrastive term for this sample).
std::optional<ContrastiveSamples> sample_contrastive(const Eigen::VectorXd& local_prompt,
                                                     int class_k,
                                                     const GlobalPromptSet& global_set,
                                                     ClientGroup group);

struct DpclResult {
  double loss = 0.0;
  Eigen::VectorXd anchor_grad;  // d loss / d anchor
};

/// Prompt contrastive loss:
///   -log( sum_pos exp(sim/tau') / (sum_pos exp(sim/tau') + sum_neg exp(sim/tau')) )
/// with cosine similarity and max-subtracted exponentials. Zero (with zero
/// gradient) when there are no negatives.
DpclResult dpcl_loss(const ContrastiveSamples& samples, double tau_prime);

/// -log softmax(logits)[label], computed via max-subtracted log-sum-exp.
double ce_loss(const Eigen::VectorXd& logits, int label);

/// d ce_loss / d logits = softmax(logits) - onehot(label).
Eigen::VectorXd ce_loss_grad(const Eigen::VectorXd& logits, int label);

/// Same contract as ce_loss, applied to logits produced with the averaged
/// global prompt as the input stimulus.
double gpl_loss(const Eigen::VectorXd& logits, int label);
Eigen::VectorXd gpl_loss_grad(const Eigen::VectorXd& logits, int label);

/// Unweighted sum of the three objectives.
double total_loss(double ce, double gpl, double dpcl);

}  // namespace reffil
