#pragma once

#include <Eigen/Dense>
#include <map>
#include <vector>

#include "json.hpp"

namespace reffil {

/// Per-client, per-class mean of the instance prompts produced in the final
/// local epoch. Vectors are flattened p*d prompts.
struct LocalPromptGroup {
  int client_id = 0;
  std::map<int, Eigen::VectorXd> per_class;
};

struct ClassPrompts {
  std::vector<Eigen::VectorXd> representatives;
  Eigen::VectorXd averaged;  // arithmetic mean of representatives
};

/// Server-side clustered prompt state broadcast each round.
struct GlobalPromptSet {
  std::map<int, ClassPrompts> classes;

  bool empty() const { return classes.empty(); }
  bool has_class(int k) const { return classes.count(k) > 0; }
};

/// Elementwise mean per class over the instance prompt lists.
/// Throws std::invalid_argument on an empty class list.
LocalPromptGroup build_lpg(int client_id,
                           const std::map<int, std::vector<Eigen::VectorXd>>& instance_prompts);

/// First-neighbor adjacency: A(m, j) = 1 iff j == c_m, m == c_j, or
/// c_m == c_j, where c_m is the cosine-nearest neighbor of prompt m
/// (self excluded, ties to the lowest index). Diagonal is 0.
/// Requires >= 2 prompts, all finite with nonzero norm.
Eigen::MatrixXi finch_adjacency(const std::vector<Eigen::VectorXd>& prompts);

/// Connected components of the first-neighbor graph (single pass, no
/// recursive merging). One prompt yields one singleton cluster. Clusters are
/// ordered by smallest member, members ascending.
std::vector<std::vector<int>> cluster_prompts(const std::vector<Eigen::VectorXd>& prompts);

/// One representative per cluster: the elementwise mean of its members.
std::vector<Eigen::VectorXd> select_representatives(
    const std::vector<Eigen::VectorXd>& prompts,
    const std::vector<std::vector<int>>& clusters);

/// Pools every client's per-class prompt, clusters per class, and averages
/// the representatives. Classes absent from all LPGs are carried over from
/// `carry_over` when provided (empty on round one otherwise).
GlobalPromptSet build_global_prompt_set(const std::vector<LocalPromptGroup>& lpgs,
                                        const GlobalPromptSet* carry_over = nullptr);

/// Audit/replay serialization: {"round": r, "classes": {"k": {"reps": [[..]], "avg": [..]}}}.
nlohmann::ordered_json global_prompt_set_to_json(const GlobalPromptSet& set, int round);
GlobalPromptSet global_prompt_set_from_json(const nlohmann::json& j);

}  // namespace reffil
