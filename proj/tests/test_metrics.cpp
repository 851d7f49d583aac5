#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <stdexcept>

#include "doctest.h"
#include "reffil/metrics.hpp"
#include "reffil/rng.hpp"

using namespace reffil;

TEST_CASE("avg accuracy") {
  CHECK(avg_accuracy(AccuracyMatrix::from_rows({{0.8}})) == doctest::Approx(0.8));
  CHECK(avg_accuracy(AccuracyMatrix::from_rows({{0.5}, {0.5, 0.5}, {0.5, 0.5, 0.5}})) ==
        doctest::Approx(0.5));
  // (0.9 + (0.6+0.8)/2) / 2
  CHECK(avg_accuracy(AccuracyMatrix::from_rows({{0.9}, {0.6, 0.8}})) == doctest::Approx(0.8));
}

TEST_CASE("last accuracy") {
  CHECK(last_accuracy(AccuracyMatrix::from_rows({{0.8}})) == doctest::Approx(0.8));
  CHECK(last_accuracy(AccuracyMatrix::from_rows({{0.9}, {0.6, 0.8}})) == doctest::Approx(0.7));
  CHECK(last_accuracy(AccuracyMatrix::from_rows({{0.3}, {0.3, 0.3}})) == doctest::Approx(0.3));
}

TEST_CASE("forgetting") {
  CHECK(forgetting(AccuracyMatrix::from_rows({{0.9}})) == 0.0);
  CHECK(forgetting(AccuracyMatrix::from_rows({{0.9}, {0.5, 0.8}})) == doctest::Approx(0.4));
  // Non-decreasing per-task accuracy means nothing was forgotten.
  CHECK(forgetting(AccuracyMatrix::from_rows({{0.5}, {0.6, 0.4}, {0.7, 0.5, 0.9}})) == 0.0);
}

TEST_CASE("backward transfer") {
  CHECK(backward_transfer(AccuracyMatrix::from_rows({{0.9}})) == 0.0);
  CHECK(backward_transfer(AccuracyMatrix::from_rows({{0.9}, {0.5, 0.8}})) ==
        doctest::Approx(-0.4));
  CHECK(backward_transfer(AccuracyMatrix::from_rows({{0.5}, {0.7, 0.8}})) ==
        doctest::Approx(0.2));
  // Unchanged accuracies give zero transfer.
  CHECK(backward_transfer(AccuracyMatrix::from_rows({{0.6}, {0.6, 0.9}, {0.6, 0.9, 0.2}})) ==
        0.0);
}

TEST_CASE("forgetting is nonnegative on random matrices") {
  Rng rng(101);
  for (int trial = 0; trial < 1000; ++trial) {
    int t = 1 + static_cast<int>(rng.below(6));
    std::vector<std::vector<double>> rows;
    for (int i = 1; i <= t; ++i) {
      std::vector<double> row;
      for (int j = 0; j < i; ++j) row.push_back(rng.uniform());
      rows.push_back(row);
    }
    CHECK(forgetting(AccuracyMatrix::from_rows(rows)) >= 0.0);
  }
}

TEST_CASE("forgetting bounds backward transfer when the peak sits on the diagonal") {
  // Constructed so max_i a[i][j] = a[j][j] for each earlier task.
  auto m = AccuracyMatrix::from_rows({{0.9}, {0.7, 0.95}, {0.5, 0.6, 0.8}});
  double fgt = forgetting(m);
  double bwt = backward_transfer(m);
  CHECK(fgt >= std::max(0.0, -bwt));
}

TEST_CASE("matrix validation") {
  CHECK_THROWS_AS(AccuracyMatrix::from_rows({{0.5, 0.5}}), std::invalid_argument);
  CHECK_THROWS_AS(AccuracyMatrix::from_rows({{1.5}}), std::invalid_argument);
  CHECK_THROWS_AS(avg_accuracy(AccuracyMatrix{}), std::invalid_argument);
}
