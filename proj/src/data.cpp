#include "reffil/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"
#include "reffil/rng.hpp"

namespace reffil {

DomainTransform DomainTransform::build(const DomainSpec& spec, int feature_dim,
                                       uint64_t base_seed) {
  if (feature_dim < 2) throw std::invalid_argument("feature_dim must be >= 2");
  const auto& p = spec.transform_params;
  bool angle_only = p.size() == 1;
  bool angle_and_scale = p.size() == static_cast<std::size_t>(feature_dim) + 1;
  if (!angle_only && !angle_and_scale)
    throw std::invalid_argument(
        "invalid-spec: transform_params must be [angle] or [angle, feature_dim scales]");
  for (double v : p)
    if (!std::isfinite(v))
      throw std::invalid_argument("invalid-spec: transform_params must be finite");

  DomainTransform t;
  t.angle = p[0];
  t.scale = Eigen::VectorXd::Ones(feature_dim);
  if (angle_and_scale)
    for (int i = 0; i < feature_dim; ++i) t.scale[i] = p[static_cast<std::size_t>(i) + 1];

  // Orthonormal 2-plane from the base seed (Gram-Schmidt on two Gaussians).
  Rng rng(derive_seed(base_seed, "domain.plane"));
  Eigen::VectorXd a(feature_dim), b(feature_dim);
  for (int i = 0; i < feature_dim; ++i) a[i] = rng.normal();
  a.normalize();
  do {
    for (int i = 0; i < feature_dim; ++i) b[i] = rng.normal();
    b -= a.dot(b) * a;
  } while (b.norm() < 1e-8);
  b.normalize();
  t.plane_a = a;
  t.plane_b = b;
  return t;
}

Eigen::VectorXd DomainTransform::apply(const Eigen::VectorXd& x) const {
  double u = plane_a.dot(x);
  double v = plane_b.dot(x);
  double c = std::cos(angle), s = std::sin(angle);
  // Delta form so the zero angle is the exact identity.
  Eigen::VectorXd rotated =
      x + ((c - 1.0) * u - s * v) * plane_a + (s * u + (c - 1.0) * v) * plane_b;
  return scale.cwiseProduct(rotated);
}

Eigen::MatrixXd class_prototypes(int n_classes, int feature_dim, uint64_t base_seed) {
  Rng rng(derive_seed(base_seed, "prototypes"));
  Eigen::MatrixXd protos(n_classes, feature_dim);
  for (int k = 0; k < n_classes; ++k)
    for (int i = 0; i < feature_dim; ++i) protos(k, i) = rng.normal();
  return protos;
}

std::vector<LabeledSample> generate_task(const DomainSpec& spec, int n_samples,
                                         int n_classes, int feature_dim,
                                         uint64_t base_seed) {
  if (n_classes < 2) throw std::invalid_argument("n_classes must be >= 2");
  if (n_samples < n_classes) throw std::invalid_argument("n_samples must be >= n_classes");
  if (spec.noise_sigma < 0.0) throw std::invalid_argument("noise_sigma must be >= 0");

  DomainTransform transform = DomainTransform::build(spec, feature_dim, base_seed);
  Eigen::MatrixXd protos = class_prototypes(n_classes, feature_dim, base_seed);

  Rng noise(derive_seed(base_seed, "domain.noise", static_cast<uint64_t>(spec.task_id)));
  std::vector<LabeledSample> out;
  out.reserve(static_cast<std::size_t>(n_samples));
  for (int i = 0; i < n_samples; ++i) {
    int label = i % n_classes;  // balanced label stream
    Eigen::VectorXd x = transform.apply(protos.row(label).transpose());
    if (spec.noise_sigma > 0.0)
      for (int d = 0; d < feature_dim; ++d) x[d] += spec.noise_sigma * noise.normal();
    out.push_back(LabeledSample{std::move(x), label});
  }
  return out;
}

namespace {

// Largest-remainder rounding of weights*total to integer counts summing to
// total; ties resolved by lowest index.
std::vector<int> apportion(const std::vector<double>& weights, int total) {
  const int n = static_cast<int>(weights.size());
  std::vector<int> counts(n, 0);
  std::vector<std::pair<double, int>> remainders;
  int assigned = 0;
  for (int i = 0; i < n; ++i) {
    double exact = weights[static_cast<std::size_t>(i)] * total;
    counts[static_cast<std::size_t>(i)] = static_cast<int>(std::floor(exact));
    assigned += counts[static_cast<std::size_t>(i)];
    remainders.push_back({exact - std::floor(exact), i});
  }
  std::stable_sort(remainders.begin(), remainders.end(), [](const auto& l, const auto& r) {
    return l.first > r.first;
  });
  for (int k = 0; k < total - assigned; ++k)
    counts[static_cast<std::size_t>(remainders[static_cast<std::size_t>(k)].second)] += 1;
  return counts;
}

}  // namespace

std::vector<ClientShard> partition_quantity_shift(const std::vector<LabeledSample>& samples,
                                                  int n_clients, double dirichlet_alpha,
                                                  uint64_t seed, int task_id) {
  if (samples.empty()) throw std::invalid_argument("cannot partition an empty sample set");
  if (n_clients < 1) throw std::invalid_argument("n_clients must be >= 1");
  if (static_cast<std::size_t>(n_clients) > samples.size())
    throw std::invalid_argument("infeasible: more clients than samples");
  if (!(dirichlet_alpha > 0.0))
    throw std::invalid_argument("dirichlet_alpha must be positive");

  const int total = static_cast<int>(samples.size());
  Rng rng(seed);
  std::vector<double> weights = rng.dirichlet(dirichlet_alpha, static_cast<std::size_t>(n_clients));
  std::vector<int> target = apportion(weights, total);

  // Everyone trains on something: move singles from the largest shard.
  for (int i = 0; i < n_clients; ++i) {
    while (target[static_cast<std::size_t>(i)] == 0) {
      int donor = static_cast<int>(std::distance(
          target.begin(), std::max_element(target.begin(), target.end())));
      target[static_cast<std::size_t>(donor)] -= 1;
      target[static_cast<std::size_t>(i)] += 1;
    }
  }

  // Group sample indices by class and shuffle within each class.
  int max_label = 0;
  for (const auto& s : samples) max_label = std::max(max_label, s.label);
  std::vector<std::vector<int>> by_class(static_cast<std::size_t>(max_label) + 1);
  for (int i = 0; i < total; ++i)
    by_class[static_cast<std::size_t>(samples[static_cast<std::size_t>(i)].label)].push_back(i);
  for (auto& cls : by_class) rng.shuffle(cls);

  // Proportional interleave of classes, so any contiguous slice of the deck
  // has near-pool class proportions; quantity shifts, labels do not.
  std::vector<int> deck;
  deck.reserve(static_cast<std::size_t>(total));
  std::vector<double> credit(by_class.size(), 0.0);
  std::vector<std::size_t> cursor(by_class.size(), 0);
  for (int step = 0; step < total; ++step) {
    int pick = -1;
    double best = -1.0;
    for (std::size_t c = 0; c < by_class.size(); ++c) {
      if (cursor[c] >= by_class[c].size()) continue;
      credit[c] += static_cast<double>(by_class[c].size()) / total;
      if (credit[c] > best) {
        best = credit[c];
        pick = static_cast<int>(c);
      }
    }
    credit[static_cast<std::size_t>(pick)] -= 1.0;
    deck.push_back(by_class[static_cast<std::size_t>(pick)][cursor[static_cast<std::size_t>(pick)]++]);
  }

  std::vector<ClientShard> shards(static_cast<std::size_t>(n_clients));
  std::size_t offset = 0;
  for (int m = 0; m < n_clients; ++m) {
    auto& shard = shards[static_cast<std::size_t>(m)];
    shard.client_id = m;
    shard.task_id = task_id;
    shard.quantity_weight = weights[static_cast<std::size_t>(m)];
    for (int k = 0; k < target[static_cast<std::size_t>(m)]; ++k)
      shard.samples.push_back(samples[static_cast<std::size_t>(deck[offset++])]);
  }
  return shards;
}

void dump_shards_jsonl(const std::vector<ClientShard>& shards, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& shard : shards) {
    std::string path = dir + "/client_" + std::to_string(shard.client_id) + ".jsonl";
    std::ofstream out(path, std::ios::app);
    if (!out) throw std::runtime_error("cannot open " + path);
    for (const auto& s : shard.samples) {
      nlohmann::json line;
      line["client"] = shard.client_id;
      line["task"] = shard.task_id;
      std::vector<double> x(s.features.data(), s.features.data() + s.features.size());
      line["x"] = x;
      line["y"] = s.label;
      out << line.dump() << "\n";
    }
  }
}

}  // namespace reffil
