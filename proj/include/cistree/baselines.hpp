#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <iosfwd>
#include <tuple>

#include "cistree/common.hpp"
#include "cistree/dataset.hpp"

namespace cistree {

// Pairwise ranking baseline: selected items are trained to outscore
// unselected ones through stochastic updates on sampled (user, selected,
// unselected) triples.
struct BPRModel {
  Eigen::MatrixXd user_factors;  // U x D
  Eigen::MatrixXd item_factors;  // I x D
  Eigen::VectorXd item_bias;     // I
};

struct BPRConfig {
  int dim = 25;
  double learning_rate = 0.05;
  double l2 = 0.01;
  long long triples = -1;  // negative -> 50 x |train pairs|
  bool item_bias = true;   // biases stay zero when off
  long long report_every = 0;  // triples between progress records, 0 = off
  std::uint64_t seed = 1;
  void validate() const;
};

BPRModel init_bpr(int user_count, int item_count, const BPRConfig& config);

double bpr_score(const BPRModel& model, int user, int item);
// x-hat: how much the model prefers `pos` over `neg` for this user.
double bpr_margin(const BPRModel& model, int user, int pos, int neg);

// (u, i, j): u uniform over training pairs, i uniform over u's selected
// set, j uniform over the items u never selected. Users holding the whole
// inventory are resampled.
std::tuple<int, int, int> bpr_sample_triple(const ImplicitDataset& train,
                                            Rng& rng);

// One ascent step on ln sigma(x-hat) - l2 penalty; touches only user u and
// items i, j. Returns the gradient coefficient 1 - sigma(x-hat). With
// update_bias false the bias slots are left alone.
double bpr_step(BPRModel& model, std::tuple<int, int, int> triple,
                double learning_rate, double l2, bool update_bias = true);

// Runs config.triples sampled steps. Progress records (line-delimited JSON)
// carry the training AUC on a fixed probe of held-in triples and, when
// `validation` is given, its all-unobserved-protocol MAP.
BPRModel train_bpr(const ImplicitDataset& train, const BPRConfig& config,
                   std::ostream* progress = nullptr,
                   const ImplicitDataset* validation = nullptr);

// Weighted matrix factorization baseline: reconstructs the dense binary
// selection matrix, observed cells upweighted by 1 + alpha.
struct BMFModel {
  Eigen::MatrixXd user_factors;  // U x D
  Eigen::MatrixXd item_factors;  // I x D
  double alpha = 40.0;
  double lambda = 0.1;
};

struct BMFConfig {
  int dim = 25;
  double alpha = 40.0;
  double lambda = 0.1;
  int max_sweeps = 30;
  double tolerance = 1e-4;  // relative objective change
  int threads = 1;
  std::uint64_t seed = 1;
  void validate() const;
};

BMFModel init_bmf(int user_count, int item_count, const BMFConfig& config);

double bmf_score(const BMFModel& model, int user, int item);

// Weighted least-squares objective over the full dense matrix plus the L2
// penalty, evaluated in O((U + I) D^2 + |pairs| D).
double bmf_objective(const BMFModel& model, const ImplicitDataset& train);

// One half-sweep of alternating least squares: re-solve every user (item)
// block against the frozen other side via the rank-one-correction normal
// equations. Exposed so tests can compare one block solve against a dense
// reference.
void bmf_solve_users(BMFModel& model, const ImplicitDataset& train,
                     int threads = 1);
void bmf_solve_items(BMFModel& model, const ImplicitDataset& train,
                     int threads = 1);

// Alternates half-sweeps until the relative objective change drops below
// config.tolerance or max_sweeps is hit; the objective is checked to be
// non-increasing after every half-sweep. Progress records carry per-sweep
// objectives.
BMFModel train_bmf(const ImplicitDataset& train, const BMFConfig& config,
                   std::ostream* progress = nullptr);

// Model files: the same JSON envelope with base64 parameter blocks the
// softmax models use.
std::string serialize_bpr(const BPRModel& model);
BPRModel deserialize_bpr(const std::string& bytes);
std::string serialize_bmf(const BMFModel& model);
BMFModel deserialize_bmf(const std::string& bytes);

}  // namespace cistree
