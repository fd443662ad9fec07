#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "cistree/common.hpp"
#include "cistree/dataset.hpp"
#include "cistree/item_tree.hpp"

namespace cistree {

// Softmax over the whole inventory: P(i|u) from score U_u·V_i + c_i.
struct FlatModel {
  Eigen::MatrixXd user_factors;  // U x D
  Eigen::MatrixXd item_factors;  // I x D
  Eigen::VectorXd item_bias;     // I

  int dim() const { return static_cast<int>(user_factors.cols()); }
  int user_count() const { return static_cast<int>(user_factors.rows()); }
  int item_count() const { return static_cast<int>(item_factors.rows()); }
};

// Item probability factorized along a root-to-leaf path; the tree owns the
// per-node factors and biases.
struct HierModel {
  Eigen::MatrixXd user_factors;  // U x D
  ItemTree tree;

  int dim() const { return static_cast<int>(user_factors.cols()); }
  int user_count() const { return static_cast<int>(user_factors.rows()); }
  int item_count() const { return tree.item_count(); }
};

struct TrainConfig {
  int dim = 25;
  double learning_rate = 0.05;
  int epochs = 10;
  double l2 = 1e-4;
  double lr_decay = 0.9;  // learning rate multiplier per epoch
  std::uint64_t seed = 1;
  bool freeze_user_factors = false;
  // First epoch's index in the seeded pair-order stream. Driving epochs one
  // at a time with offset e and learning_rate lr*decay^e reproduces a single
  // multi-epoch run exactly.
  int epoch_offset = 0;

  void validate() const;
};

struct EpochLog {
  int epoch = 0;
  double loglik = 0.0;
  double learning_rate = 0.0;
};

// Initialization: factors from N(0, 0.01^2); item biases (flat c and leaf b)
// set to ln(1 + occurrences) minus its mean so popular items start ahead.
FlatModel init_flat(const ImplicitDataset& data, int dim, std::uint64_t seed);
HierModel init_hier(const ImplicitDataset& data, ItemTree tree,
                    std::uint64_t seed);
Eigen::VectorXd centered_log_frequency(const std::vector<long long>& counts);

double flat_score(const FlatModel& model, int u, int i);
double flat_prob(const FlatModel& model, int u, int i);
Eigen::VectorXd flat_distribution(const FlatModel& model, int u);
Eigen::VectorXd flat_log_distribution(const FlatModel& model, int u);

double hier_prob(const HierModel& model, int u, int i);
double hier_log_prob(const HierModel& model, int u, int i);

// Log-likelihood of a pair list under each model.
double flat_loglik(const FlatModel& model,
                   std::span<const std::pair<int, int>> pairs);
double hier_loglik(const HierModel& model,
                   std::span<const std::pair<int, int>> pairs);

// Exact log P(i|u) gradients at the current parameters, exposed so tests can
// compare them against finite differences and so the per-pair update is one
// code path.
struct FlatPairGradient {
  Eigen::VectorXd d_user;         // D
  Eigen::MatrixXd d_item_factors; // I x D
  Eigen::VectorXd d_item_bias;    // I
};
FlatPairGradient flat_pair_gradient(const FlatModel& model, int u, int i);

struct HierPairGradient {
  Eigen::VectorXd d_user;                          // D
  std::vector<int> nodes;                          // touched tree nodes
  std::vector<Eigen::VectorXd> d_node_q;           // aligned with nodes
  std::vector<double> d_node_b;                    // aligned with nodes
};
HierPairGradient hier_pair_gradient(const HierModel& model, int u, int i);

// One stochastic step on a single pair: gradient ascent with L2 shrinkage on
// every touched parameter.
void flat_apply_pair(FlatModel& model, int u, int i, double lr, double l2);
void hier_apply_pair(HierModel& model, int u, int i, double lr, double l2,
                     bool freeze_user);

// Epoch pair order; both trainers draw from this one stream definition so a
// depth-1 tree reproduces the flat trainer step for step.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                     int epoch);

FlatModel train_flat(const ImplicitDataset& data, const TrainConfig& config,
                     std::vector<EpochLog>* trace = nullptr);
FlatModel train_flat(FlatModel model, const ImplicitDataset& data,
                     const TrainConfig& config,
                     std::vector<EpochLog>* trace = nullptr);

HierModel train_hier(HierModel model, const ImplicitDataset& data,
                     const TrainConfig& config,
                     std::vector<EpochLog>* trace = nullptr);
// train_hier with user factors unfrozen; the tree-learning stages hold them
// fixed, so the last stage must let them move again.
HierModel finetune(HierModel model, const ImplicitDataset& data,
                   TrainConfig config, std::vector<EpochLog>* trace = nullptr);

// Candidates sorted by descending score, ties broken by ascending item
// index; the first min(k, |candidates|) survive.
std::vector<int> topk(const FlatModel& model, int u,
                      std::span<const int> candidates, int k);
std::vector<int> topk(const HierModel& model, int u,
                      std::span<const int> candidates, int k);
std::vector<int> topk_by_score(std::span<const int> candidates,
                               std::span<const double> scores, int k);

// Model files: JSON envelope with base64 parameter blocks.
std::string serialize_flat(const FlatModel& model);
FlatModel deserialize_flat(const std::string& bytes);
std::string serialize_hier(const HierModel& model);
HierModel deserialize_hier(const std::string& bytes);

}  // namespace cistree
