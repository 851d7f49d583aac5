#include "reffil/prompts.hpp"

#include <cmath>
#include <stdexcept>

namespace reffil {

namespace {

void require_usable(const std::vector<Eigen::VectorXd>& prompts) {
  for (const auto& p : prompts) {
    if (!p.allFinite()) throw std::invalid_argument("prompt contains NaN/Inf");
    if (p.norm() == 0.0)
      throw std::invalid_argument("zero-norm prompt: cosine similarity undefined");
  }
}

}  // namespace

LocalPromptGroup build_lpg(int client_id,
                           const std::map<int, std::vector<Eigen::VectorXd>>& instance_prompts) {
  LocalPromptGroup lpg;
  lpg.client_id = client_id;
  for (const auto& [k, list] : instance_prompts) {
    if (list.empty()) throw std::invalid_argument("empty instance prompt list for a class");
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(list.front().size());
    for (const auto& p : list) {
      if (p.size() != mean.size())
        throw std::invalid_argument("inconsistent prompt dimensions within a class");
      mean += p;
    }
    mean /= static_cast<double>(list.size());
    if (!mean.allFinite()) throw std::invalid_argument("non-finite prompt mean");
    lpg.per_class[k] = std::move(mean);
  }
  return lpg;
}

Eigen::MatrixXi finch_adjacency(const std::vector<Eigen::VectorXd>& prompts) {
  const int n = static_cast<int>(prompts.size());
  if (n < 2) throw std::invalid_argument("first-neighbor adjacency needs >= 2 prompts");
  require_usable(prompts);

  std::vector<Eigen::VectorXd> unit(prompts.begin(), prompts.end());
  for (auto& u : unit) u.normalize();

  // c[m]: cosine-nearest neighbor of m, self excluded, ties to lowest index.
  std::vector<int> c(static_cast<std::size_t>(n), -1);
  for (int m = 0; m < n; ++m) {
    double best = -2.0;
    for (int j = 0; j < n; ++j) {
      if (j == m) continue;
      double sim = unit[static_cast<std::size_t>(m)].dot(unit[static_cast<std::size_t>(j)]);
      if (sim > best) {
        best = sim;
        c[static_cast<std::size_t>(m)] = j;
      }
    }
  }

  Eigen::MatrixXi a = Eigen::MatrixXi::Zero(n, n);
  for (int m = 0; m < n; ++m) {
    for (int j = 0; j < n; ++j) {
      if (m == j) continue;
      if (j == c[static_cast<std::size_t>(m)] || m == c[static_cast<std::size_t>(j)] ||
          c[static_cast<std::size_t>(m)] == c[static_cast<std::size_t>(j)])
        a(m, j) = 1;
    }
  }
  return a;
}

std::vector<std::vector<int>> cluster_prompts(const std::vector<Eigen::VectorXd>& prompts) {
  const int n = static_cast<int>(prompts.size());
  if (n == 0) throw std::invalid_argument("cannot cluster zero prompts");
  if (n == 1) {
    require_usable(prompts);
    return {{0}};
  }
  Eigen::MatrixXi a = finch_adjacency(prompts);

  std::vector<int> component(static_cast<std::size_t>(n), -1);
  int n_components = 0;
  for (int start = 0; start < n; ++start) {
    if (component[static_cast<std::size_t>(start)] >= 0) continue;
    std::vector<int> stack{start};
    component[static_cast<std::size_t>(start)] = n_components;
    while (!stack.empty()) {
      int m = stack.back();
      stack.pop_back();
      for (int j = 0; j < n; ++j) {
        if (a(m, j) == 1 && component[static_cast<std::size_t>(j)] < 0) {
          component[static_cast<std::size_t>(j)] = n_components;
          stack.push_back(j);
        }
      }
    }
    ++n_components;
  }

  std::vector<std::vector<int>> clusters(static_cast<std::size_t>(n_components));
  for (int m = 0; m < n; ++m)
    clusters[static_cast<std::size_t>(component[static_cast<std::size_t>(m)])].push_back(m);
  return clusters;  // discovery order: sorted by smallest member, members ascending
}

std::vector<Eigen::VectorXd> select_representatives(
    const std::vector<Eigen::VectorXd>& prompts,
    const std::vector<std::vector<int>>& clusters) {
  std::vector<bool> seen(prompts.size(), false);
  std::vector<Eigen::VectorXd> reps;
  reps.reserve(clusters.size());
  for (const auto& cluster : clusters) {
    if (cluster.empty()) throw std::invalid_argument("empty cluster");
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(prompts.front().size());
    for (int idx : cluster) {
      if (idx < 0 || idx >= static_cast<int>(prompts.size()) || seen[static_cast<std::size_t>(idx)])
        throw std::invalid_argument("clusters must partition the prompt indices");
      seen[static_cast<std::size_t>(idx)] = true;
      mean += prompts[static_cast<std::size_t>(idx)];
    }
    mean /= static_cast<double>(cluster.size());
    reps.push_back(std::move(mean));
  }
  for (bool s : seen)
    if (!s) throw std::invalid_argument("clusters must cover every prompt index");
  return reps;
}

GlobalPromptSet build_global_prompt_set(const std::vector<LocalPromptGroup>& lpgs,
                                        const GlobalPromptSet* carry_over) {
  if (lpgs.empty()) throw std::invalid_argument("need at least one local prompt group");

  std::map<int, std::vector<Eigen::VectorXd>> pooled;
  for (const auto& lpg : lpgs)
    for (const auto& [k, v] : lpg.per_class) pooled[k].push_back(v);

  GlobalPromptSet set;
  for (const auto& [k, vectors] : pooled) {
    auto clusters = cluster_prompts(vectors);
    ClassPrompts cp;
    cp.representatives = select_representatives(vectors, clusters);
    cp.averaged = Eigen::VectorXd::Zero(cp.representatives.front().size());
    for (const auto& r : cp.representatives) cp.averaged += r;
    cp.averaged /= static_cast<double>(cp.representatives.size());
    set.classes[k] = std::move(cp);
  }

  if (carry_over != nullptr)
    for (const auto& [k, cp] : carry_over->classes)
      if (!set.has_class(k)) set.classes[k] = cp;

  return set;
}

nlohmann::ordered_json global_prompt_set_to_json(const GlobalPromptSet& set, int round) {
  nlohmann::ordered_json j;
  j["round"] = round;
  j["classes"] = nlohmann::ordered_json::object();
  for (const auto& [k, cp] : set.classes) {
    nlohmann::ordered_json entry;
    auto reps = nlohmann::ordered_json::array();
    for (const auto& r : cp.representatives)
      reps.push_back(std::vector<double>(r.data(), r.data() + r.size()));
    entry["reps"] = std::move(reps);
    entry["avg"] = std::vector<double>(cp.averaged.data(), cp.averaged.data() + cp.averaged.size());
    j["classes"][std::to_string(k)] = std::move(entry);
  }
  return j;
}

GlobalPromptSet global_prompt_set_from_json(const nlohmann::json& j) {
  GlobalPromptSet set;
  for (const auto& [key, entry] : j.at("classes").items()) {
    ClassPrompts cp;
    for (const auto& rep : entry.at("reps")) {
      std::vector<double> v = rep.get<std::vector<double>>();
      cp.representatives.push_back(
          Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
    }
    std::vector<double> avg = entry.at("avg").get<std::vector<double>>();
    cp.averaged = Eigen::Map<const Eigen::VectorXd>(avg.data(), static_cast<Eigen::Index>(avg.size()));
    set.classes[std::stoi(key)] = std::move(cp);
  }
  return set;
}

}  // namespace reffil
