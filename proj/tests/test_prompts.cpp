#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <set>

#include "doctest.h"
#include "reffil/prompts.hpp"
#include "reffil/rng.hpp"

using namespace reffil;

namespace {

Eigen::VectorXd vec(std::initializer_list<double> values) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(values.size()));
  Eigen::Index i = 0;
  for (double x : values) v[i++] = x;
  return v;
}

std::vector<Eigen::VectorXd> random_prompts(int count, int dim, uint64_t seed) {
  Rng rng(seed);
  std::vector<Eigen::VectorXd> out;
  for (int i = 0; i < count; ++i) {
    Eigen::VectorXd v(dim);
    for (int j = 0; j < dim; ++j) v[j] = rng.normal();
    out.push_back(std::move(v));
  }
  return out;
}

// Independent reference: nearest neighbors by exhaustive cosine comparison,
// the three-condition adjacency written out verbatim, and union-find
// components.
std::vector<std::set<int>> brute_force_partition(const std::vector<Eigen::VectorXd>& prompts) {
  const int n = static_cast<int>(prompts.size());
  std::vector<int> nn(static_cast<std::size_t>(n), -1);
  for (int m = 0; m < n; ++m) {
    double best = -2.0;
    for (int j = 0; j < n; ++j) {
      if (j == m) continue;
      double sim = prompts[static_cast<std::size_t>(m)].dot(prompts[static_cast<std::size_t>(j)]) /
                   (prompts[static_cast<std::size_t>(m)].norm() * prompts[static_cast<std::size_t>(j)].norm());
      if (sim > best) {
        best = sim;
        nn[static_cast<std::size_t>(m)] = j;
      }
    }
  }
  std::vector<int> parent(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) parent[static_cast<std::size_t>(i)] = i;
  std::function<int(int)> find = [&](int x) {
    while (parent[static_cast<std::size_t>(x)] != x) x = parent[static_cast<std::size_t>(x)];
    return x;
  };
  auto unite = [&](int a, int b) { parent[static_cast<std::size_t>(find(a))] = find(b); };
  for (int m = 0; m < n; ++m)
    for (int j = 0; j < n; ++j) {
      if (m == j) continue;
      if (j == nn[static_cast<std::size_t>(m)] || m == nn[static_cast<std::size_t>(j)] ||
          nn[static_cast<std::size_t>(m)] == nn[static_cast<std::size_t>(j)])
        unite(m, j);
    }
  std::map<int, std::set<int>> groups;
  for (int i = 0; i < n; ++i) groups[find(i)].insert(i);
  std::vector<std::set<int>> out;
  for (auto& [root, members] : groups) out.push_back(std::move(members));
  return out;
}

std::vector<std::set<int>> as_sets(const std::vector<std::vector<int>>& clusters) {
  std::vector<std::set<int>> out;
  for (const auto& c : clusters) out.emplace_back(c.begin(), c.end());
  return out;
}

bool same_partition(std::vector<std::set<int>> a, std::vector<std::set<int>> b) {
  auto key = [](const std::set<int>& s) { return *s.begin(); };
  std::sort(a.begin(), a.end(), [&](const auto& l, const auto& r) { return key(l) < key(r); });
  std::sort(b.begin(), b.end(), [&](const auto& l, const auto& r) { return key(l) < key(r); });
  return a == b;
}

}  // namespace

TEST_CASE("build_lpg averages instance prompts per class") {
  std::map<int, std::vector<Eigen::VectorXd>> prompts;
  prompts[0] = {vec({1, 1})};
  prompts[2] = {vec({1, 1}), vec({3, 3})};
  auto lpg = build_lpg(7, prompts);
  CHECK(lpg.client_id == 7);
  CHECK((lpg.per_class.at(0) - vec({1, 1})).norm() == 0.0);
  CHECK((lpg.per_class.at(2) - vec({2, 2})).norm() == 0.0);
  CHECK(lpg.per_class.count(1) == 0);
}

TEST_CASE("build_lpg matches an independent fold over many prompts") {
  auto prompts = random_prompts(50, 12, 40);
  std::map<int, std::vector<Eigen::VectorXd>> by_class{{3, prompts}};
  auto lpg = build_lpg(0, by_class);

  Eigen::VectorXd acc = Eigen::VectorXd::Zero(12);
  for (const auto& p : prompts) acc += p;  // plain fold as the oracle
  CHECK((lpg.per_class.at(3) - acc / 50.0).norm() < 1e-12);
}

TEST_CASE("build_lpg rejects an empty class list") {
  std::map<int, std::vector<Eigen::VectorXd>> prompts;
  prompts[1] = {};
  CHECK_THROWS_AS(build_lpg(0, prompts), std::invalid_argument);
}

TEST_CASE("two prompts are mutual first neighbors") {
  auto a = finch_adjacency({vec({1, 0}), vec({0.9, 0.1})});
  CHECK(a(0, 0) == 0);
  CHECK(a(1, 1) == 0);
  CHECK(a(0, 1) == 1);
  CHECK(a(1, 0) == 1);
}

TEST_CASE("two tight pairs split into two blocks") {
  // Within-pair cosine ~0.99, across-pair cosine <= 0.
  std::vector<Eigen::VectorXd> prompts = {vec({1.0, 0.05}), vec({1.0, -0.05}),
                                          vec({-0.05, 1.0}), vec({0.05, 1.0})};
  // Rotate the second pair to sit opposite: use negative quadrant instead.
  prompts[2] = vec({-1.0, 0.05});
  prompts[3] = vec({-1.0, -0.05});
  auto a = finch_adjacency(prompts);
  CHECK(a(0, 1) == 1);
  CHECK(a(2, 3) == 1);
  CHECK(a(0, 2) == 0);
  CHECK(a(0, 3) == 0);
  CHECK(a(1, 2) == 0);
  CHECK(a(1, 3) == 0);
  auto clusters = as_sets(cluster_prompts(prompts));
  CHECK(clusters.size() == 2);
  CHECK(same_partition(clusters, {{0, 1}, {2, 3}}));
}

TEST_CASE("shared first neighbors chain into one component") {
  // Angles 0, 10, 25 degrees: nn(0)=1, nn(1)=0... adjust so nn(1)=0, nn(2)=1.
  auto at_angle = [](double deg) {
    double rad = deg * M_PI / 180.0;
    return vec({std::cos(rad), std::sin(rad)});
  };
  std::vector<Eigen::VectorXd> prompts = {at_angle(0), at_angle(10), at_angle(25)};
  // nn(0)=1 (10 vs 25), nn(1)=0 (10 vs 15), nn(2)=1 (15 vs 25).
  auto a = finch_adjacency(prompts);
  CHECK(a(2, 1) == 1);  // j = c_m link
  CHECK(a(0, 1) == 1);
  CHECK(a(0, 2) == 1);  // c_0 = c_2 = 1 sibling link
  auto clusters = as_sets(cluster_prompts(prompts));
  CHECK(clusters.size() == 1);
  CHECK(clusters[0] == std::set<int>({0, 1, 2}));
}

TEST_CASE("identical prompts collapse to one cluster") {
  std::vector<Eigen::VectorXd> prompts(5, vec({0.3, 0.4, 0.5}));
  auto clusters = cluster_prompts(prompts);
  REQUIRE(clusters.size() == 1);
  CHECK(clusters[0].size() == 5);
}

TEST_CASE("clustering equals brute-force components on random inputs") {
  for (uint64_t trial = 0; trial < 100; ++trial) {
    Rng rng(derive_seed(900, "trial", trial));
    int n = 2 + static_cast<int>(rng.below(11));
    auto prompts = random_prompts(n, 6, derive_seed(901, "p", trial));
    CHECK(same_partition(as_sets(cluster_prompts(prompts)), brute_force_partition(prompts)));
  }
}

TEST_CASE("zero-norm prompts are rejected") {
  CHECK_THROWS_AS(finch_adjacency({vec({0, 0}), vec({1, 0})}), std::invalid_argument);
  CHECK_THROWS_AS(cluster_prompts({vec({0, 0})}), std::invalid_argument);
}

TEST_CASE("representatives are cluster means") {
  std::vector<Eigen::VectorXd> prompts = {vec({0, 2}), vec({2, 0}), vec({5, 5})};
  auto reps = select_representatives(prompts, {{0, 1}, {2}});
  REQUIRE(reps.size() == 2);
  CHECK((reps[0] - vec({1, 1})).norm() == 0.0);
  CHECK((reps[1] - vec({5, 5})).norm() == 0.0);  // singleton keeps its member
}

TEST_CASE("representatives match independent per-cluster sums") {
  auto prompts = random_prompts(9, 5, 55);
  std::vector<std::vector<int>> clusters = {{0, 3, 4}, {1, 2}, {5, 6, 7, 8}};
  auto reps = select_representatives(prompts, clusters);
  for (std::size_t c = 0; c < clusters.size(); ++c) {
    Eigen::VectorXd sum = Eigen::VectorXd::Zero(5);
    for (int idx : clusters[c]) sum += prompts[static_cast<std::size_t>(idx)];
    CHECK((reps[c] - sum / static_cast<double>(clusters[c].size())).norm() < 1e-12);
  }
}

TEST_CASE("select_representatives validates the partition") {
  auto prompts = random_prompts(4, 3, 60);
  CHECK_THROWS_AS(select_representatives(prompts, {{0, 1}, {1, 2, 3}}), std::invalid_argument);
  CHECK_THROWS_AS(select_representatives(prompts, {{0, 1}}), std::invalid_argument);
}

TEST_CASE("single client global set echoes its LPG") {
  LocalPromptGroup lpg;
  lpg.client_id = 0;
  lpg.per_class[0] = vec({1, 2});
  lpg.per_class[1] = vec({3, 4});
  auto set = build_global_prompt_set({lpg});
  REQUIRE(set.classes.size() == 2);
  CHECK(set.classes.at(0).representatives.size() == 1);
  CHECK((set.classes.at(0).representatives[0] - vec({1, 2})).norm() == 0.0);
  CHECK((set.classes.at(0).averaged - vec({1, 2})).norm() == 0.0);
}

TEST_CASE("duplicate LPGs collapse per class") {
  LocalPromptGroup a, b;
  a.client_id = 0;
  b.client_id = 1;
  a.per_class[0] = b.per_class[0] = vec({2, 2, 2});
  auto set = build_global_prompt_set({a, b});
  CHECK(set.classes.at(0).representatives.size() == 1);
  CHECK((set.classes.at(0).averaged - vec({2, 2, 2})).norm() == 0.0);
}

TEST_CASE("two well-separated domains give two representatives per class") {
  // Three clients per domain; domain A prompts near +e1, domain B near +e2,
  // verified against brute-force clustering plus explicit averaging.
  Rng rng(71);
  std::vector<LocalPromptGroup> lpgs;
  const int dim = 8;
  Eigen::VectorXd center_a = Eigen::VectorXd::Zero(dim);
  center_a[0] = 1.0;
  Eigen::VectorXd center_b = Eigen::VectorXd::Zero(dim);
  center_b[1] = 1.0;
  std::vector<Eigen::VectorXd> class0;
  for (int m = 0; m < 6; ++m) {
    LocalPromptGroup lpg;
    lpg.client_id = m;
    Eigen::VectorXd base = (m < 3) ? center_a : center_b;
    Eigen::VectorXd jitter(dim);
    for (int i = 0; i < dim; ++i) jitter[i] = 0.01 * rng.normal();
    lpg.per_class[0] = base + jitter;
    class0.push_back(lpg.per_class[0]);
    lpgs.push_back(std::move(lpg));
  }
  auto set = build_global_prompt_set(lpgs);
  REQUIRE(set.classes.at(0).representatives.size() == 2);

  auto oracle = brute_force_partition(class0);
  REQUIRE(oracle.size() == 2);
  for (const auto& members : oracle) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(dim);
    for (int idx : members) mean += class0[static_cast<std::size_t>(idx)];
    mean /= static_cast<double>(members.size());
    double best = 1e9;
    for (const auto& rep : set.classes.at(0).representatives)
      best = std::min(best, (rep - mean).norm());
    CHECK(best < 1e-6);
  }
}

TEST_CASE("missing classes carry over from the previous round") {
  LocalPromptGroup prev_lpg;
  prev_lpg.client_id = 0;
  prev_lpg.per_class[0] = vec({1, 0});
  prev_lpg.per_class[1] = vec({0, 1});
  auto prev = build_global_prompt_set({prev_lpg});

  LocalPromptGroup now;
  now.client_id = 1;
  now.per_class[1] = vec({0, 2});
  auto set = build_global_prompt_set({now}, &prev);
  CHECK((set.classes.at(0).averaged - vec({1, 0})).norm() == 0.0);  // carried
  CHECK((set.classes.at(1).averaged - vec({0, 2})).norm() == 0.0);  // replaced
}

TEST_CASE("lpg order does not change the representative set") {
  auto prompts = random_prompts(7, 10, 91);
  std::vector<LocalPromptGroup> fwd, rev;
  for (int m = 0; m < 7; ++m) {
    LocalPromptGroup lpg;
    lpg.client_id = m;
    lpg.per_class[0] = prompts[static_cast<std::size_t>(m)];
    fwd.push_back(lpg);
  }
  rev.assign(fwd.rbegin(), fwd.rend());
  auto set_a = build_global_prompt_set(fwd);
  auto set_b = build_global_prompt_set(rev);
  const auto& ra = set_a.classes.at(0).representatives;
  const auto& rb = set_b.classes.at(0).representatives;
  REQUIRE(ra.size() == rb.size());
  for (const auto& rep : ra) {
    double best = 1e9;
    for (const auto& other : rb) best = std::min(best, (rep - other).norm());
    CHECK(best < 1e-12);
  }
  CHECK((set_a.classes.at(0).averaged - set_b.classes.at(0).averaged).norm() < 1e-12);
}

TEST_CASE("averaged prompt is invariant to duplicating one client's samples") {
  auto prompts = random_prompts(4, 6, 95);
  auto build = [&](int dup_factor) {
    std::vector<LocalPromptGroup> lpgs;
    for (int m = 0; m < 4; ++m) {
      std::map<int, std::vector<Eigen::VectorXd>> inst;
      int copies = (m == 2) ? dup_factor : 1;
      for (int c = 0; c < copies; ++c) inst[0].push_back(prompts[static_cast<std::size_t>(m)]);
      lpgs.push_back(build_lpg(m, inst));
    }
    return build_global_prompt_set(lpgs);
  };
  auto once = build(1);
  auto thrice = build(3);
  CHECK((once.classes.at(0).averaged - thrice.classes.at(0).averaged).norm() < 1e-12);
}

TEST_CASE("averaged equals the mean of the representatives") {
  auto prompts = random_prompts(9, 4, 97);
  std::vector<LocalPromptGroup> lpgs;
  for (int m = 0; m < 9; ++m) {
    LocalPromptGroup lpg;
    lpg.client_id = m;
    lpg.per_class[0] = prompts[static_cast<std::size_t>(m)];
    lpgs.push_back(lpg);
  }
  auto set = build_global_prompt_set(lpgs);
  const auto& cp = set.classes.at(0);
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(4);
  for (const auto& rep : cp.representatives) mean += rep;
  mean /= static_cast<double>(cp.representatives.size());
  CHECK((cp.averaged - mean).norm() < 1e-12);
}

TEST_CASE("global prompt set JSON round-trips") {
  LocalPromptGroup lpg;
  lpg.client_id = 0;
  lpg.per_class[0] = vec({0.25, -1.5});
  lpg.per_class[3] = vec({2.0, 0.125});
  auto set = build_global_prompt_set({lpg});
  auto j = global_prompt_set_to_json(set, 12);
  CHECK(j.at("round") == 12);
  auto back = global_prompt_set_from_json(j);
  REQUIRE(back.classes.size() == set.classes.size());
  for (const auto& [k, cp] : set.classes) {
    CHECK((back.classes.at(k).averaged - cp.averaged).norm() == 0.0);
    REQUIRE(back.classes.at(k).representatives.size() == cp.representatives.size());
  }
}
