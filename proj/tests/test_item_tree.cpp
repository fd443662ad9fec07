#include <doctest.h>

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "cistree/item_tree.hpp"

using namespace cistree;

namespace {

Eigen::VectorXd random_user(int dim, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::VectorXd u(dim);
  for (int d = 0; d < dim; ++d) u[d] = gauss(rng);
  return u;
}

// Two items under one root; the score gap between the children is exactly
// z1 - z2 = 1 for user [1].
ItemTree two_item_gap_one() {
  ItemTree tree(2, 1);
  tree.set_item_count(2);
  tree.add_node(-1, 0, Eigen::VectorXd::Zero(1), 0.0, -1);
  Eigen::VectorXd q1(1), q2(1);
  q1 << 1.0;
  q2 << 0.0;
  int a = tree.add_node(0, 0, q1, 0.0, -1);
  int b = tree.add_node(0, 1, q2, 0.0, -1);
  tree.bind_leaf(a, 0);
  tree.bind_leaf(b, 1);
  tree.rebuild_codes();
  return tree;
}

}  // namespace

TEST_SUITE("item_tree") {

TEST_CASE("balanced construction is valid across sizes and arities") {
  for (int arity : {2, 3, 5}) {
    for (int items : {1, 2, 3, 4, 5, 6, 7, 8, 9, 31, 100}) {
      auto tree = random_balanced(items, arity, 4, 99 + items);
      auto violations = tree.validate();
      CAPTURE(arity);
      CAPTURE(items);
      for (const auto& v : violations) MESSAGE(v);
      CHECK(violations.empty());

      int max_len = 0, min_len = 1 << 20;
      for (int i = 0; i < items; ++i) {
        max_len = std::max(max_len, tree.code_of(i).length());
        min_len = std::min(min_len, tree.code_of(i).length());
      }
      CHECK(max_len - min_len <= 1);
      int expect =
          std::max(1, static_cast<int>(std::ceil(std::log(items) /
                                                 std::log(arity) - 1e-12)));
      CHECK(max_len == expect);
    }
  }
}

TEST_CASE("a movie-scale binary tree has 14-digit codes") {
  // ceil(log2(10677)) = 14; the shallowest leaves sit one level up.
  auto tree = random_balanced(10677, 2, 2, 5);
  CHECK(tree.validate().empty());
  int max_len = 0, min_len = 1 << 20;
  for (int i = 0; i < 10677; ++i) {
    max_len = std::max(max_len, tree.code_of(i).length());
    min_len = std::min(min_len, tree.code_of(i).length());
  }
  CHECK(max_len == 14);
  CHECK(min_len == 13);
}

TEST_CASE("codes and paths agree with the topology") {
  auto tree = random_balanced(13, 3, 4, 21);
  for (int item = 0; item < 13; ++item) {
    const auto& code = tree.code_of(item);
    auto path = tree.path_of(item);
    REQUIRE(code.length() == static_cast<int>(path.size()));
    int node = tree.root();
    for (int j = 0; j < code.length(); ++j) {
      int digit = code.digits[j];
      CHECK(digit >= 1);
      CHECK(digit <= static_cast<int>(tree.node(node).children.size()));
      node = tree.node(node).children[digit - 1];
      CHECK(node == path[j]);
    }
    CHECK(tree.node(node).item == item);
    CHECK(tree.leaf_of(item) == node);
  }
}

TEST_CASE("unknown items raise lookup errors") {
  auto tree = random_balanced(4, 2, 2, 3);
  CHECK_THROWS_AS(tree.leaf_of(-1), LookupError);
  CHECK_THROWS_AS(tree.leaf_of(4), LookupError);
  CHECK_THROWS_AS(tree.code_of(99), LookupError);
  CHECK_THROWS_AS(tree.path_of(99), LookupError);
}

TEST_CASE("child probabilities form a distribution") {
  auto tree = random_balanced(9, 3, 4, 11);
  auto user = random_user(4, 17);
  auto dist = tree.child_distribution(tree.root(), user);
  CHECK(dist.sum() == doctest::Approx(1.0).epsilon(1e-12));
  for (int k = 1; k <= dist.size(); ++k)
    CHECK(tree.child_prob(tree.root(), user, k) ==
          doctest::Approx(dist[k - 1]).epsilon(1e-12));
  CHECK_THROWS_AS(tree.child_prob(tree.root(), user, 0), ContractError);
  CHECK_THROWS_AS(tree.child_prob(tree.root(), user, 4), ContractError);
  int leaf = tree.leaf_of(0);
  CHECK_THROWS_AS(tree.child_prob(leaf, user, 1), ContractError);
  CHECK_THROWS_AS(tree.child_distribution(leaf, user), ContractError);
}

TEST_CASE("a unit score gap yields the logistic probability") {
  auto tree = two_item_gap_one();
  Eigen::VectorXd u(1);
  u << 1.0;
  // p = e / (e + 1)
  CHECK(tree.item_prob(u, 0) ==
        doctest::Approx(0.7310585786300049).epsilon(1e-15));
  CHECK(tree.item_prob(u, 1) ==
        doctest::Approx(1.0 - 0.7310585786300049).epsilon(1e-15));
}

TEST_CASE("indifferent scores spread mass uniformly over four leaves") {
  ItemTree tree(2, 2);
  tree.set_item_count(4);
  tree.add_node(-1, 0, Eigen::VectorXd::Zero(2), 0.0, -1);
  int l = tree.add_node(0, 0, Eigen::VectorXd::Zero(2), 0.0, -1);
  int r = tree.add_node(0, 1, Eigen::VectorXd::Zero(2), 0.0, -1);
  int ll = tree.add_node(l, 0, Eigen::VectorXd::Zero(2), 0.0, -1);
  int lr = tree.add_node(l, 1, Eigen::VectorXd::Zero(2), 0.0, -1);
  int rl = tree.add_node(r, 0, Eigen::VectorXd::Zero(2), 0.0, -1);
  int rr = tree.add_node(r, 1, Eigen::VectorXd::Zero(2), 0.0, -1);
  tree.bind_leaf(ll, 0);
  tree.bind_leaf(lr, 1);
  tree.bind_leaf(rl, 2);
  tree.bind_leaf(rr, 3);
  tree.rebuild_codes();
  REQUIRE(tree.validate().empty());

  auto user = random_user(2, 23);
  for (int i = 0; i < 4; ++i) {
    CHECK(tree.item_prob(user, i) == doctest::Approx(0.25).epsilon(1e-14));
    // ln(1/4)
    CHECK(tree.item_log_prob(user, i) ==
          doctest::Approx(-1.3862943611198906).epsilon(1e-14));
  }
}

TEST_CASE("the full distribution sums to one and matches per-item walks") {
  for (int arity : {2, 3, 5}) {
    auto tree = random_balanced(23, arity, 6, 31 * arity);
    auto user = random_user(6, 41 * arity);
    auto dist = tree.full_distribution(user);
    REQUIRE(dist.size() == 23);
    CHECK(dist.sum() == doctest::Approx(1.0).epsilon(1e-12));
    auto logs = tree.full_log_distribution(user);
    for (int i = 0; i < 23; ++i) {
      CHECK(dist[i] == doctest::Approx(tree.item_prob(user, i)).epsilon(1e-12));
      CHECK(logs[i] ==
            doctest::Approx(tree.item_log_prob(user, i)).epsilon(1e-12));
    }
  }
}

TEST_CASE("extreme scores stay finite in log space") {
  ItemTree tree = two_item_gap_one();
  Eigen::VectorXd u(1);
  u << 800.0;  // exp(800) overflows; the log path must not.
  double lp = tree.item_log_prob(u, 1);
  CHECK(std::isfinite(lp));
  CHECK(lp == doctest::Approx(-800.0).epsilon(1e-12));
  CHECK(tree.item_prob(u, 0) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("single item trees keep a one-digit code") {
  auto tree = random_balanced(1, 2, 3, 7);
  CHECK(tree.validate().empty());
  CHECK(tree.code_of(0).length() == 1);
  auto user = random_user(3, 2);
  CHECK(tree.item_prob(user, 0) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("validation reports broken invariants") {
  // Same item at two leaves.
  ItemTree dup(2, 1);
  dup.set_item_count(2);
  dup.add_node(-1, 0, Eigen::VectorXd::Zero(1), 0.0, -1);
  int a = dup.add_node(0, 0, Eigen::VectorXd::Zero(1), 0.0, -1);
  int b = dup.add_node(0, 1, Eigen::VectorXd::Zero(1), 0.0, -1);
  dup.bind_leaf(a, 0);
  dup.bind_leaf(b, 0);
  dup.rebuild_codes();
  CHECK(!dup.validate().empty());

  // Root with one child is only allowed for a single item.
  ItemTree lone(3, 1);
  lone.set_item_count(2);
  lone.add_node(-1, 0, Eigen::VectorXd::Zero(1), 0.0, -1);
  int inner = lone.add_node(0, 0, Eigen::VectorXd::Zero(1), 0.0, -1);
  int x = lone.add_node(inner, 0, Eigen::VectorXd::Zero(1), 0.0, -1);
  int y = lone.add_node(inner, 1, Eigen::VectorXd::Zero(1), 0.0, -1);
  lone.bind_leaf(x, 0);
  lone.bind_leaf(y, 1);
  lone.rebuild_codes();
  CHECK(!lone.validate().empty());

  // Non-finite parameter.
  auto nan_tree = random_balanced(4, 2, 2, 3);
  nan_tree.node(1).b = std::nan("");
  CHECK(!nan_tree.validate().empty());
}

TEST_CASE("serialization round trips bit for bit") {
  auto tree = random_balanced(17, 3, 5, 77);
  std::string bytes = tree.serialize();
  auto back = ItemTree::deserialize(bytes);
  CHECK(back.serialize() == bytes);
  CHECK(back.arity() == 3);
  CHECK(back.dim() == 5);
  CHECK(back.item_count() == 17);

  auto user = random_user(5, 13);
  auto before = tree.full_distribution(user);
  auto after = back.full_distribution(user);
  for (int i = 0; i < 17; ++i) CHECK(before[i] == after[i]);  // exact

  // Same seed, same bytes; new seed, new bytes.
  CHECK(random_balanced(17, 3, 5, 77).serialize() == bytes);
  CHECK(random_balanced(17, 3, 5, 78).serialize() != bytes);
}

TEST_CASE("corrupt tree documents are rejected") {
  auto tree = random_balanced(5, 2, 2, 1);
  std::string bytes = tree.serialize();
  CHECK_THROWS_AS(ItemTree::deserialize(bytes.substr(0, bytes.size() / 2)),
                  FormatError);
  CHECK_THROWS_AS(ItemTree::deserialize("{}"), FormatError);
  CHECK_THROWS_AS(ItemTree::deserialize("not json at all"), FormatError);

  // Flip a parameter block to the wrong length.
  std::string damaged = bytes;
  auto pos = damaged.find("\"w\":\"");
  REQUIRE(pos != std::string::npos);
  damaged.replace(pos, 5, "\"w\":\"AAAA");
  CHECK_THROWS_AS(ItemTree::deserialize(damaged), FormatError);
}

}  // TEST_SUITE
