#include "reffil/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace reffil {

double temperature(const TemperatureSchedule& s, int task_index) {
  if (task_index < 1) throw std::invalid_argument("task_index must be >= 1");
  double decayed = s.tau * (1.0 - (s.gamma + (task_index - 1) * s.beta));
  return std::max(s.tau_min, decayed);
}

namespace {

double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0)
    throw std::invalid_argument("zero-norm vector: cosine similarity undefined");
  return a.dot(b) / (na * nb);
}

// d cos(u, r) / d u for fixed r.
Eigen::VectorXd cosine_grad_u(const Eigen::VectorXd& u, const Eigen::VectorXd& r) {
  double nu = u.norm(), nr = r.norm();
  double sim = u.dot(r) / (nu * nr);
  return r / (nu * nr) - (sim / (nu * nu)) * u;
}

}  // namespace

std::optional<ContrastiveSamples> sample_contrastive(const Eigen::VectorXd& local_prompt,
                                                     int class_k,
                                                     const GlobalPromptSet& global_set,
                                                     ClientGroup group) {
  auto it = global_set.classes.find(class_k);
  if (it == global_set.classes.end() || it->second.representatives.empty())
    return std::nullopt;
  const auto& reps = it->second.representatives;

  std::vector<int> order(reps.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> sims(reps.size());
  for (std::size_t i = 0; i < reps.size(); ++i)
    sims[i] = cosine(local_prompt, reps[i]);
  std::stable_sort(order.begin(), order.end(), [&](int l, int r) {
    return sims[static_cast<std::size_t>(l)] > sims[static_cast<std::size_t>(r)];
  });

  std::size_t n_pos = (group == ClientGroup::Between) ? 2 : 1;
  n_pos = std::min(n_pos, reps.size());

  ContrastiveSamples out;
  out.anchor = local_prompt;
  for (std::size_t i = 0; i < order.size(); ++i) {
    const auto& rep = reps[static_cast<std::size_t>(order[i])];
    if (i < n_pos)
      out.positives.push_back(rep);
    else
      out.negatives.push_back(rep);
  }
  return out;
}

DpclResult dpcl_loss(const ContrastiveSamples& samples, double tau_prime) {
  if (!(tau_prime > 0.0)) throw std::invalid_argument("tau_prime must be positive");
  if (samples.anchor.norm() == 0.0) throw std::invalid_argument("zero-norm anchor");
  if (samples.positives.empty()) throw std::invalid_argument("need at least one positive");

  DpclResult result;
  result.anchor_grad = Eigen::VectorXd::Zero(samples.anchor.size());
  if (samples.negatives.empty()) return result;  // ratio is identically 1

  const auto& u = samples.anchor;
  std::vector<double> s_pos, s_neg;
  for (const auto& p : samples.positives) s_pos.push_back(cosine(u, p) / tau_prime);
  for (const auto& q : samples.negatives) s_neg.push_back(cosine(u, q) / tau_prime);

  double m = *std::max_element(s_pos.begin(), s_pos.end());
  for (double s : s_neg) m = std::max(m, s);

  double num = 0.0, den = 0.0;
  for (double s : s_pos) num += std::exp(s - m);
  den = num;
  for (double s : s_neg) den += std::exp(s - m);
  result.loss = -std::log(num / den);

  // dL/ds = exp(s-m)/den - [s positive] * exp(s-m)/num, then chain through
  // the cosine and the 1/tau' scaling.
  for (std::size_t i = 0; i < samples.positives.size(); ++i) {
    double e = std::exp(s_pos[i] - m);
    double dl_ds = e / den - e / num;
    result.anchor_grad += (dl_ds / tau_prime) * cosine_grad_u(u, samples.positives[i]);
  }
  for (std::size_t i = 0; i < samples.negatives.size(); ++i) {
    double e = std::exp(s_neg[i] - m);
    double dl_ds = e / den;
    result.anchor_grad += (dl_ds / tau_prime) * cosine_grad_u(u, samples.negatives[i]);
  }
  return result;
}

double ce_loss(const Eigen::VectorXd& logits, int label) {
  if (label < 0 || label >= logits.size()) throw std::invalid_argument("label out of range");
  double m = logits.maxCoeff();
  double lse = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) lse += std::exp(logits[i] - m);
  return -(logits[label] - m - std::log(lse));
}

Eigen::VectorXd ce_loss_grad(const Eigen::VectorXd& logits, int label) {
  if (label < 0 || label >= logits.size()) throw std::invalid_argument("label out of range");
  double m = logits.maxCoeff();
  Eigen::VectorXd p = (logits.array() - m).exp().matrix();
  p /= p.sum();
  p[label] -= 1.0;
  return p;
}

double gpl_loss(const Eigen::VectorXd& logits, int label) { return ce_loss(logits, label); }

Eigen::VectorXd gpl_loss_grad(const Eigen::VectorXd& logits, int label) {
  return ce_loss_grad(logits, label);
}

double total_loss(double ce, double gpl, double dpcl) {
  if (!std::isfinite(ce) || !std::isfinite(gpl) || !std::isfinite(dpcl))
    throw std::invalid_argument("loss components must be finite");
  return ce + gpl + dpcl;
}

}  // namespace reffil
