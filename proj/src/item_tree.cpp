#include "cistree/item_tree.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>
#include <random>
#include <span>

#include <json.hpp>

namespace cistree {

namespace {

// log softmax of z, max-subtracted.
Eigen::VectorXd log_softmax(const Eigen::VectorXd& z) {
  double zmax = z.maxCoeff();
  double sum = (z.array() - zmax).exp().sum();
  return z.array() - (zmax + std::log(sum));
}

}  // namespace

int ItemTree::leaf_of(int item) const {
  if (item < 0 || item >= item_count() || item_leaf_[item] < 0)
    throw LookupError("unknown item " + std::to_string(item));
  return item_leaf_[item];
}

int ItemTree::add_node(int parent, int slot, Eigen::VectorXd q, double b,
                       int item) {
  int id = static_cast<int>(nodes_.size());
  TreeNode n;
  n.q = std::move(q);
  n.b = b;
  n.item = item;
  n.parent = parent;
  n.slot = slot;
  nodes_.push_back(std::move(n));
  if (parent >= 0) {
    auto& siblings = nodes_[parent].children;
    if (slot != static_cast<int>(siblings.size()))
      throw ContractError("children must be added in slot order");
    siblings.push_back(id);
  }
  return id;
}

void ItemTree::bind_leaf(int node_id, int item) {
  nodes_[node_id].item = item;
  if (item >= static_cast<int>(item_leaf_.size()))
    item_leaf_.resize(item + 1, -1);
  item_leaf_[item] = node_id;
}

void ItemTree::rebuild_codes() {
  codes_.assign(item_count(), {});
  for (int item = 0; item < item_count(); ++item) {
    int leaf = item_leaf_[item];
    if (leaf < 0) continue;
    std::vector<int>& digits = codes_[item].digits;
    for (int n = leaf; nodes_[n].parent >= 0; n = nodes_[n].parent)
      digits.push_back(nodes_[n].slot + 1);
    std::reverse(digits.begin(), digits.end());
  }
}

const ItemCode& ItemTree::code_of(int item) const {
  leaf_of(item);  // range + existence check
  return codes_[item];
}

std::vector<int> ItemTree::path_of(int item) const {
  std::vector<int> path;
  for (int n = leaf_of(item); nodes_[n].parent >= 0; n = nodes_[n].parent)
    path.push_back(n);
  std::reverse(path.begin(), path.end());
  return path;
}

Eigen::VectorXd ItemTree::child_distribution(
    int node_id, const Eigen::VectorXd& user) const {
  const TreeNode& n = nodes_[node_id];
  if (n.is_leaf()) throw ContractError("child_distribution on a leaf");
  Eigen::VectorXd z(n.children.size());
  for (std::size_t k = 0; k < n.children.size(); ++k) {
    const TreeNode& c = nodes_[n.children[k]];
    z[static_cast<int>(k)] = user.dot(c.q) + c.b;
  }
  return log_softmax(z).array().exp();
}

double ItemTree::child_prob(int node_id, const Eigen::VectorXd& user,
                            int k) const {
  const TreeNode& n = nodes_[node_id];
  if (n.is_leaf()) throw ContractError("child_prob on a leaf");
  if (k < 1 || k > static_cast<int>(n.children.size()))
    throw ContractError("child index " + std::to_string(k) + " out of range");
  return child_distribution(node_id, user)[k - 1];
}

double ItemTree::item_log_prob(const Eigen::VectorXd& user, int item) const {
  // Log-space accumulation; the product form underflows at realistic depths.
  double acc = 0.0;
  int node_id = root();
  for (int digit : code_of(item).digits) {
    const TreeNode& n = nodes_[node_id];
    Eigen::VectorXd z(n.children.size());
    for (std::size_t k = 0; k < n.children.size(); ++k) {
      const TreeNode& c = nodes_[n.children[k]];
      z[static_cast<int>(k)] = user.dot(c.q) + c.b;
    }
    acc += log_softmax(z)[digit - 1];
    node_id = n.children[digit - 1];
  }
  return acc;
}

double ItemTree::item_prob(const Eigen::VectorXd& user, int item) const {
  return std::exp(item_log_prob(user, item));
}

Eigen::VectorXd ItemTree::full_log_distribution(
    const Eigen::VectorXd& user) const {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(item_count());
  std::vector<double> node_log(nodes_.size(), 0.0);
  std::deque<int> queue{root()};
  while (!queue.empty()) {
    int id = queue.front();
    queue.pop_front();
    const TreeNode& n = nodes_[id];
    if (n.is_leaf()) {
      out[n.item] = node_log[id];
      continue;
    }
    Eigen::VectorXd z(n.children.size());
    for (std::size_t k = 0; k < n.children.size(); ++k) {
      const TreeNode& c = nodes_[n.children[k]];
      z[static_cast<int>(k)] = user.dot(c.q) + c.b;
    }
    Eigen::VectorXd lp = log_softmax(z);
    for (std::size_t k = 0; k < n.children.size(); ++k) {
      int child = n.children[k];
      node_log[child] = node_log[id] + lp[static_cast<int>(k)];
      queue.push_back(child);
    }
  }
  return out;
}

Eigen::VectorXd ItemTree::full_distribution(const Eigen::VectorXd& user) const {
  return full_log_distribution(user).array().exp();
}

std::vector<std::string> ItemTree::validate() const {
  std::vector<std::string> bad;
  if (nodes_.empty()) {
    bad.push_back("tree has no nodes");
    return bad;
  }
  if (nodes_[0].parent != -1) bad.push_back("root has a parent");
  std::vector<int> leaf_item_of_node(nodes_.size(), -1);
  for (int id = 0; id < node_count(); ++id) {
    const TreeNode& n = nodes_[id];
    if (n.q.size() != dim_)
      bad.push_back("node " + std::to_string(id) + " factor dimension " +
                    std::to_string(n.q.size()) + " != " + std::to_string(dim_));
    if (!n.q.allFinite() || !std::isfinite(n.b))
      bad.push_back("node " + std::to_string(id) + " has non-finite parameters");
    if (n.is_leaf()) {
      if (n.item < 0)
        bad.push_back("leaf " + std::to_string(id) + " holds no item");
      else if (n.item >= item_count())
        bad.push_back("leaf " + std::to_string(id) + " item out of range");
      else
        leaf_item_of_node[id] = n.item;
    } else {
      if (n.item != -1)
        bad.push_back("internal node " + std::to_string(id) + " holds an item");
      int degree = static_cast<int>(n.children.size());
      bool degenerate_root = id == root() && item_count() == 1;
      if ((degree < 2 && !degenerate_root) || degree > arity_)
        bad.push_back("node " + std::to_string(id) + " has " +
                      std::to_string(degree) + " children (arity " +
                      std::to_string(arity_) + ")");
      for (std::size_t k = 0; k < n.children.size(); ++k) {
        int c = n.children[k];
        if (c < 0 || c >= node_count()) {
          bad.push_back("node " + std::to_string(id) + " child out of range");
          continue;
        }
        if (nodes_[c].parent != id || nodes_[c].slot != static_cast<int>(k))
          bad.push_back("node " + std::to_string(c) +
                        " parent/slot link inconsistent");
      }
    }
  }
  // Leaf <-> item bijection.
  std::vector<int> leaves_of_item(item_count(), 0);
  for (int id = 0; id < node_count(); ++id)
    if (leaf_item_of_node[id] >= 0) ++leaves_of_item[leaf_item_of_node[id]];
  for (int item = 0; item < item_count(); ++item) {
    if (leaves_of_item[item] == 0)
      bad.push_back("item " + std::to_string(item) + " has no leaf");
    if (leaves_of_item[item] > 1)
      bad.push_back("item " + std::to_string(item) + " is at " +
                    std::to_string(leaves_of_item[item]) + " leaves");
  }
  // Code table consistent with the topology.
  for (int item = 0; item < item_count(); ++item) {
    if (item >= static_cast<int>(codes_.size())) {
      bad.push_back("missing code for item " + std::to_string(item));
      continue;
    }
    int node_id = root();
    bool ok = !codes_[item].digits.empty() || item_count() == 0;
    for (int digit : codes_[item].digits) {
      const auto& kids = nodes_[node_id].children;
      if (digit < 1 || digit > static_cast<int>(kids.size())) {
        ok = false;
        break;
      }
      node_id = kids[digit - 1];
    }
    if (!ok || !nodes_[node_id].is_leaf() || nodes_[node_id].item != item)
      bad.push_back("code for item " + std::to_string(item) +
                    " does not reach its leaf");
  }
  return bad;
}

std::string ItemTree::serialize() const {
  nlohmann::json doc;
  doc["arity"] = arity_;
  doc["dim"] = dim_;
  doc["item_count"] = item_count();
  nlohmann::json nodes = nlohmann::json::array();
  // BFS order is the canonical layout; parents precede children and
  // siblings appear in slot order.
  std::vector<int> order;
  order.reserve(nodes_.size());
  std::vector<int> renumber(nodes_.size(), -1);
  std::deque<int> queue{root()};
  while (!queue.empty()) {
    int id = queue.front();
    queue.pop_front();
    renumber[id] = static_cast<int>(order.size());
    order.push_back(id);
    for (int c : nodes_[id].children) queue.push_back(c);
  }
  for (int id : order) {
    const TreeNode& n = nodes_[id];
    std::vector<double> block(n.q.data(), n.q.data() + n.q.size());
    block.push_back(n.b);
    nodes.push_back({{"p", n.parent >= 0 ? renumber[n.parent] : -1},
                     {"c", n.slot},
                     {"i", n.item},
                     {"w", encode_doubles(block)}});
  }
  doc["nodes"] = std::move(nodes);
  return doc.dump();
}

ItemTree ItemTree::deserialize(const std::string& bytes) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("tree document: ") + e.what(), e.byte);
  }
  try {
    ItemTree tree(doc.at("arity").get<int>(), doc.at("dim").get<int>());
    int items = doc.at("item_count").get<int>();
    tree.set_item_count(items);
    const auto& nodes = doc.at("nodes");
    for (std::size_t idx = 0; idx < nodes.size(); ++idx) {
      const auto& jn = nodes[idx];
      int parent = jn.at("p").get<int>();
      if ((idx == 0) != (parent == -1) ||
          (parent >= 0 && parent >= static_cast<int>(idx)))
        throw FormatError("node parents must precede children", idx);
      std::vector<double> block = decode_doubles(jn.at("w").get<std::string>());
      if (static_cast<int>(block.size()) != tree.dim() + 1)
        throw FormatError("parameter block has wrong size", idx);
      Eigen::VectorXd q =
          Eigen::Map<Eigen::VectorXd>(block.data(), tree.dim());
      int id = tree.add_node(parent, jn.at("c").get<int>(), std::move(q),
                             block.back(), -1);
      int item = jn.at("i").get<int>();
      if (item >= items) throw FormatError("leaf item out of range", idx);
      if (item >= 0) tree.bind_leaf(id, item);
    }
    tree.rebuild_codes();
    auto violations = tree.validate();
    if (!violations.empty())
      throw FormatError("invalid tree: " + violations.front(), 0);
    return tree;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("tree document: ") + e.what(), 0);
  }
}

namespace {

struct BalancedBuilder {
  ItemTree* tree;
  int arity;
  std::normal_distribution<double> gauss{0.0, 0.01};
  Rng rng;

  Eigen::VectorXd draw(int dim) {
    Eigen::VectorXd q(dim);
    for (int d = 0; d < dim; ++d) q[d] = gauss(rng);
    return q;
  }

  void build(int parent, int slot, std::span<const int> items) {
    int id = tree->add_node(parent, slot, draw(tree->dim()), 0.0, -1);
    if (items.size() == 1) {
      tree->bind_leaf(id, items[0]);
      return;
    }
    int groups = std::min<int>(arity, static_cast<int>(items.size()));
    std::size_t base = items.size() / groups;
    std::size_t extra = items.size() % groups;
    std::size_t cursor = 0;
    for (int g = 0; g < groups; ++g) {
      std::size_t take = base + (static_cast<std::size_t>(g) < extra ? 1 : 0);
      build(id, g, items.subspan(cursor, take));
      cursor += take;
    }
  }
};

}  // namespace

ItemTree random_balanced(int item_count, int arity, int dim,
                         std::uint64_t seed) {
  if (item_count < 1) throw ContractError("item_count must be >= 1");
  if (arity < 2) throw ContractError("arity must be >= 2");
  ItemTree tree(arity, dim);
  tree.set_item_count(item_count);
  std::vector<int> items(item_count);
  std::iota(items.begin(), items.end(), 0);
  BalancedBuilder builder{&tree, arity};
  builder.rng.seed(derive_seed(seed, {0x7eeeu}));
  std::shuffle(items.begin(), items.end(), builder.rng);
  if (item_count == 1) {
    // Degenerate single-item tree: a root with one leaf child so the code
    // still has length 1.
    int root = tree.add_node(-1, 0, Eigen::VectorXd::Zero(dim), 0.0, -1);
    int leaf = tree.add_node(root, 0, builder.draw(dim), 0.0, -1);
    tree.bind_leaf(leaf, 0);
  } else {
    int root = tree.add_node(-1, 0, Eigen::VectorXd::Zero(dim), 0.0, -1);
    int groups = std::min<int>(arity, item_count);
    std::size_t base = items.size() / groups;
    std::size_t extra = items.size() % groups;
    std::size_t cursor = 0;
    for (int g = 0; g < groups; ++g) {
      std::size_t take = base + (static_cast<std::size_t>(g) < extra ? 1 : 0);
      builder.build(root, g, std::span<const int>(items).subspan(cursor, take));
      cursor += take;
    }
  }
  tree.rebuild_codes();
  return tree;
}

}  // namespace cistree
