#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

#include "cistree/common.hpp"

namespace cistree {

struct TreeNode {
  Eigen::VectorXd q;               // factor vector, dimension D
  double b = 0.0;                  // bias
  std::vector<int> children;       // node indices, empty for leaves
  int item = -1;                   // leaf item index, -1 for internal nodes
  int parent = -1;                 // -1 for the root
  int slot = 0;                    // position within parent's children

  bool is_leaf() const { return children.empty(); }
};

// Digits are 1-based: digit d at level j selects child number d of the
// previous node, the root being node 0 of every path.
struct ItemCode {
  std::vector<int> digits;
  int length() const { return static_cast<int>(digits.size()); }
};

// K-ary tree with one item per leaf and learnable per-node parameters.
// Probability evaluation is read-only; mutation requires exclusive access.
class ItemTree {
public:
  ItemTree() = default;
  ItemTree(int arity, int dim) : arity_(arity), dim_(dim) {}

  int arity() const { return arity_; }
  int dim() const { return dim_; }
  int item_count() const { return static_cast<int>(item_leaf_.size()); }
  int node_count() const { return static_cast<int>(nodes_.size()); }
  const TreeNode& node(int id) const { return nodes_[id]; }
  TreeNode& node(int id) { return nodes_[id]; }
  int root() const { return 0; }
  int leaf_of(int item) const;

  // Builder surface used by construction and the tree learner.
  int add_node(int parent, int slot, Eigen::VectorXd q, double b, int item);
  void set_item_count(int items) { item_leaf_.assign(items, -1); }
  void bind_leaf(int node_id, int item);
  // Recomputes the code table from the topology.
  void rebuild_codes();

  const ItemCode& code_of(int item) const;
  // Node sequence n_1 .. n_L (root omitted); node j is child digit d_j of
  // node j-1.
  std::vector<int> path_of(int item) const;

  // Probability of picking child k (1-based) of internal node `node_id`
  // given user vector `user`.
  double child_prob(int node_id, const Eigen::VectorXd& user, int k) const;
  // Softmax over the children of `node_id`.
  Eigen::VectorXd child_distribution(int node_id,
                                     const Eigen::VectorXd& user) const;
  double item_prob(const Eigen::VectorXd& user, int item) const;
  double item_log_prob(const Eigen::VectorXd& user, int item) const;
  // All item probabilities in one traversal; each node's softmax is
  // evaluated once.
  Eigen::VectorXd full_distribution(const Eigen::VectorXd& user) const;
  Eigen::VectorXd full_log_distribution(const Eigen::VectorXd& user) const;

  std::vector<std::string> validate() const;

  // Canonical byte form: BFS node order, parameters as base64 64-bit floats.
  // Round trip is bit-exact; equal trees serialize to equal bytes.
  std::string serialize() const;
  static ItemTree deserialize(const std::string& bytes);

private:
  int arity_ = 2;
  int dim_ = 0;
  std::vector<TreeNode> nodes_;
  std::vector<int> item_leaf_;
  std::vector<ItemCode> codes_;
};

// Items shuffled by seed and placed at the leaves of a complete K-ary tree
// of minimal height; last level left-packed so code lengths differ by at
// most one. Node factors drawn from N(0, 0.01^2), biases zero.
ItemTree random_balanced(int item_count, int arity, int dim,
                         std::uint64_t seed);

}  // namespace cistree
