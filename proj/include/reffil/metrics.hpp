#pragma once

#include <vector>

namespace reffil {

/// Lower-triangular accuracy matrix: at(i, j) is top-1 accuracy on task j's
/// test set measured after completing training on task i (1-based, j <= i).
struct AccuracyMatrix {
  std::vector<std::vector<double>> rows;  // rows[i-1] holds entries j = 1..i

  int tasks() const { return static_cast<int>(rows.size()); }
  double at(int i, int j) const;

  /// Validates shape (row i has i entries) and range ([0, 1]); throws
  /// std::invalid_argument otherwise.
  static AccuracyMatrix from_rows(std::vector<std::vector<double>> rows);
};

/// Mean over learning steps of the mean accuracy on all tasks seen so far.
double avg_accuracy(const AccuracyMatrix& m);

/// Mean accuracy over all tasks after the final learning step.
double last_accuracy(const AccuracyMatrix& m);

/// Mean over earlier tasks of the peak-to-final accuracy drop, with each
/// per-task drop clamped at zero so improvements never offset losses.
/// Zero when T == 1.
double forgetting(const AccuracyMatrix& m);

/// Mean over earlier tasks of final accuracy minus learning-time accuracy;
/// negative values indicate forgetting. Zero when T == 1.
double backward_transfer(const AccuracyMatrix& m);

}  // namespace reffil
