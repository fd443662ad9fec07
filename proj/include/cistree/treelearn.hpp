#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "cistree/common.hpp"
#include "cistree/dataset.hpp"
#include "cistree/item_tree.hpp"

namespace cistree {

// Per-item stand-ins for the users who picked the item: R_i sums their
// (fixed) factor vectors, users_i counts them.
struct SurrogateReps {
  Eigen::MatrixXd reps;          // I x D
  std::vector<long long> users;  // |U_i|
};

// With allow_missing, items nobody trained on get a zero vector instead of
// raising; the tree learner needs every inventory item placed even when the
// training split never saw it.
SurrogateReps surrogate_reps(const ImplicitDataset& train,
                             const Eigen::MatrixXd& user_factors,
                             bool allow_missing = false);

// Assignment-dependent part of the count-based future term:
// -sum_c Z_c ln Z_c with 0 ln 0 := 0. Bigger is better; the maximum over
// assignments is the balanced split.
double ftilde(std::span<const double> child_counts);

struct TreeLearnConfig {
  int arity = 2;
  enum class Init { random, cluster };
  Init init = Init::cluster;
  int rounds = 5;         // digit-sweep / parameter-fit alternations per level
  int node_passes = 3;    // SGD passes over a node's observations per fit
  double learning_rate = 0.05;
  double lr_decay = 0.9;
  double l2 = 1e-4;
  double digit_change_exit_fraction = 1e-3;
  std::uint64_t seed = 1;
  bool ftilde_positive_sign = false;  // debug: flip the future-term sign
  bool cluster_raw_reps = false;      // debug: cluster R_i instead of R_i/|U_i|
  int threads = 1;
  int max_stuck_levels = 3;  // consecutive one-child levels before forced split

  void validate() const;
};

// One frontier node's working state while its level is being learned.
struct NodeLevelState {
  std::vector<int> items;          // item ids under this node
  std::vector<int> digits;         // current child per item, 1..K
  Eigen::MatrixXd child_q;         // K x D
  Eigen::VectorXd child_b;         // K
  std::vector<double> child_count; // Z_c
  double ftilde_cache = 0.0;       // always the negative-sign value
};

// Fresh state: factors N(0, 0.01^2), biases zero, counts and cache derived
// from the starting digits.
NodeLevelState init_node_state(std::vector<int> items,
                               std::vector<int> digits,
                               const std::vector<long long>& occurrences,
                               int arity, int dim, std::uint64_t seed);

// Re-assigns one item to the child maximizing
//   R_i . Q_c + |U_i| b_c + ftilde(counts with the item in c),
// ties to the smallest digit. Counts and the cached future term are updated
// incrementally; cost is one O(K) scan.
int digit_update(NodeLevelState& node, int item_pos, const SurrogateReps& reps,
                 const std::vector<long long>& occurrences,
                 bool positive_sign = false);

double node_digit_log_prob(const NodeLevelState& node,
                           const Eigen::VectorXd& user, int digit);

struct NodeGradient {
  Eigen::MatrixXd d_q;  // K x D
  Eigen::VectorXd d_b;  // K
};
NodeGradient node_digit_gradient(const NodeLevelState& node,
                                 const Eigen::VectorXd& user, int digit);

// Fits the node's child factors and biases to the current digits: SGD on the
// K-way multinomial logistic regression whose inputs are the frozen user
// vectors of each item's users. `node_tag` names the node in divergence
// errors.
void update_node_params(NodeLevelState& node, const ImplicitDataset& train,
                        const Eigen::MatrixXd& user_factors,
                        const TreeLearnConfig& config, std::uint64_t seed,
                        const std::string& node_tag);

// Tracked objective for one node's level: exact digit log-likelihood under
// the current parameters plus the cached future term.
double node_proxy_objective(const NodeLevelState& node,
                            const ImplicitDataset& train,
                            const Eigen::MatrixXd& user_factors,
                            const SurrogateReps& reps);

struct LevelOutcome {
  int sweeps = 0;
  int digits_changed = 0;
  double proxy_objective = 0.0;
  // (before, after) proxy values bracketing each digit sweep, parameters
  // frozen across the pair.
  std::vector<std::pair<double, double>> sweep_proxy;
};

// Alternates digit sweeps and parameter fits (sweep first, always ending on
// a fit) for config.rounds rounds, exiting early once a sweep changes fewer
// than digit_change_exit_fraction of the digits.
LevelOutcome learn_level(NodeLevelState& node, const ImplicitDataset& train,
                         const Eigen::MatrixXd& user_factors,
                         const SurrogateReps& reps,
                         const TreeLearnConfig& config, std::uint64_t seed);

// Starting digit assignments.
std::vector<int> init_assign_random(int item_count, int arity,
                                    std::uint64_t seed);
// k-means (k-means++ seeding, <= 50 iterations) on R_i / |U_i| (or raw R_i);
// with at most `arity` items each gets its own child.
std::vector<int> init_assign_cluster(const std::vector<int>& items,
                                     const SurrogateReps& reps, int arity,
                                     std::uint64_t seed,
                                     bool raw_reps = false);

// Top-down construction: learn a level on every frontier node, fix the
// digits, spawn children, recurse until every item sits alone at a leaf.
// Per-level progress goes to `progress` as line-delimited JSON; when
// `validation` is given each record carries the partial-model validation
// log-likelihood (tree down to the frontier, count model below it).
ItemTree learn_tree(const ImplicitDataset& train,
                    const Eigen::MatrixXd& user_factors,
                    const TreeLearnConfig& config,
                    std::ostream* progress = nullptr,
                    const ImplicitDataset* validation = nullptr);

}  // namespace cistree
