#include "reffil/metrics.hpp"

#include <algorithm>
#include <stdexcept>

namespace reffil {

double AccuracyMatrix::at(int i, int j) const {
  if (i < 1 || i > tasks() || j < 1 || j > i)
    throw std::invalid_argument("accuracy matrix index out of range");
  return rows[static_cast<std::size_t>(i - 1)][static_cast<std::size_t>(j - 1)];
}

AccuracyMatrix AccuracyMatrix::from_rows(std::vector<std::vector<double>> rows) {
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != i + 1)
      throw std::invalid_argument("accuracy matrix must be lower-triangular");
    for (double a : rows[i])
      if (!(a >= 0.0 && a <= 1.0))
        throw std::invalid_argument("accuracy entries must lie in [0, 1]");
  }
  return AccuracyMatrix{std::move(rows)};
}

double avg_accuracy(const AccuracyMatrix& m) {
  if (m.tasks() < 1) throw std::invalid_argument("empty accuracy matrix");
  double outer = 0.0;
  for (int i = 1; i <= m.tasks(); ++i) {
    double inner = 0.0;
    for (int j = 1; j <= i; ++j) inner += m.at(i, j);
    outer += inner / i;
  }
  return outer / m.tasks();
}

double last_accuracy(const AccuracyMatrix& m) {
  if (m.tasks() < 1) throw std::invalid_argument("empty accuracy matrix");
  int t = m.tasks();
  double sum = 0.0;
  for (int j = 1; j <= t; ++j) sum += m.at(t, j);
  return sum / t;
}

double forgetting(const AccuracyMatrix& m) {
  int t = m.tasks();
  if (t < 1) throw std::invalid_argument("empty accuracy matrix");
  if (t == 1) return 0.0;
  double sum = 0.0;
  for (int j = 1; j < t; ++j) {
    double peak = 0.0;
    for (int i = j; i <= t - 1; ++i) peak = std::max(peak, m.at(i, j));
    sum += std::max(0.0, peak - m.at(t, j));
  }
  return sum / (t - 1);
}

double backward_transfer(const AccuracyMatrix& m) {
  int t = m.tasks();
  if (t < 1) throw std::invalid_argument("empty accuracy matrix");
  if (t == 1) return 0.0;
  double sum = 0.0;
  for (int j = 1; j < t; ++j) sum += m.at(t, j) - m.at(j, j);
  return sum / (t - 1);
}

}  // namespace reffil
