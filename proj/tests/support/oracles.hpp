// Independent reference implementations used only by tests. Everything here
// is deliberately naive — straight transcriptions of the defining formulas —
// so library results can be checked against something with no shared code.
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace oracle {

// Central finite difference d f / d x for one scalar slot.
inline double fd_slot(double& slot, const std::function<double()>& f,
                      double step = 1e-5) {
  const double saved = slot;
  slot = saved + step;
  const double hi = f();
  slot = saved - step;
  const double lo = f();
  slot = saved;
  return (hi - lo) / (2.0 * step);
}

// max(|a|, |b|, floor)-relative disagreement between analytic and numeric
// gradients.
inline double rel_err(double analytic, double numeric, double floor = 1e-8) {
  double scale = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / scale;
}

// Worst relative error across every coefficient of an Eigen vector/matrix
// parameter block.
template <typename Derived>
double fd_check_block(Eigen::MatrixBase<Derived>& block,
                      const Eigen::MatrixXd& analytic,
                      const std::function<double()>& f, double step = 1e-5) {
  double worst = 0.0;
  for (Eigen::Index r = 0; r < block.rows(); ++r)
    for (Eigen::Index c = 0; c < block.cols(); ++c) {
      double numeric = fd_slot(block(r, c), f, step);
      worst = std::max(worst, rel_err(analytic(r, c), numeric));
    }
  return worst;
}

// Average precision of one ranked relevance string (true = relevant).
inline double average_precision(const std::vector<bool>& ranked) {
  double hits = 0.0, sum = 0.0;
  for (std::size_t pos = 0; pos < ranked.size(); ++pos) {
    if (!ranked[pos]) continue;
    hits += 1.0;
    sum += hits / static_cast<double>(pos + 1);
  }
  return hits == 0.0 ? 0.0 : sum / hits;
}

// Mean (rank-1)/(n-1) of the relevant positions; 0-indexed ranks over n
// candidates.
inline double expected_percentile_rank(const std::vector<bool>& ranked) {
  if (ranked.size() < 2) return 0.0;
  double sum = 0.0, count = 0.0;
  for (std::size_t pos = 0; pos < ranked.size(); ++pos) {
    if (!ranked[pos]) continue;
    sum += static_cast<double>(pos) / static_cast<double>(ranked.size() - 1);
    count += 1.0;
  }
  return count == 0.0 ? 0.0 : sum / count;
}

inline double precision_at(const std::vector<bool>& ranked, int k) {
  int hits = 0;
  int depth = std::min<int>(k, static_cast<int>(ranked.size()));
  for (int pos = 0; pos < depth; ++pos) hits += ranked[pos] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(depth);
}

inline double recall_at(const std::vector<bool>& ranked, int k) {
  int total = 0;
  for (bool r : ranked) total += r ? 1 : 0;
  if (total == 0) return 0.0;
  int hits = 0;
  int depth = std::min<int>(k, static_cast<int>(ranked.size()));
  for (int pos = 0; pos < depth; ++pos) hits += ranked[pos] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(total);
}

// -sum z ln z over positive entries.
inline double entropy_sum(const std::vector<double>& z) {
  double s = 0.0;
  for (double v : z)
    if (v > 0.0) s -= v * std::log(v);
  return s;
}

}  // namespace oracle
