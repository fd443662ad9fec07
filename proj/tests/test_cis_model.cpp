#include <doctest.h>

#include <Eigen/Core>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "cistree/cis_model.hpp"
#include "support/oracles.hpp"

using namespace cistree;

namespace {

FlatModel zero_flat(int users, int items, int dim) {
  FlatModel m;
  m.user_factors = Eigen::MatrixXd::Zero(users, dim);
  m.item_factors = Eigen::MatrixXd::Zero(items, dim);
  m.item_bias = Eigen::VectorXd::Zero(items);
  return m;
}

FlatModel random_flat(int users, int items, int dim, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> gauss(0.0, 0.5);
  FlatModel m = zero_flat(users, items, dim);
  auto fill = [&](Eigen::MatrixXd& mat) {
    for (Eigen::Index r = 0; r < mat.rows(); ++r)
      for (Eigen::Index c = 0; c < mat.cols(); ++c) mat(r, c) = gauss(rng);
  };
  fill(m.user_factors);
  fill(m.item_factors);
  for (Eigen::Index i = 0; i < items; ++i) m.item_bias[i] = gauss(rng);
  return m;
}

// Depth-1 tree carrying the flat model's item parameters: one root whose
// children are the items in index order.
ItemTree depth1_tree(const FlatModel& flat) {
  ItemTree tree(flat.item_count(), flat.dim());
  tree.set_item_count(flat.item_count());
  tree.add_node(-1, 0, Eigen::VectorXd::Zero(flat.dim()), 0.0, -1);
  for (int i = 0; i < flat.item_count(); ++i) {
    int leaf = tree.add_node(0, i, flat.item_factors.row(i).transpose(),
                             flat.item_bias[i], -1);
    tree.bind_leaf(leaf, i);
  }
  tree.rebuild_codes();
  return tree;
}

HierModel random_hier(int users, int items, int dim, std::uint64_t seed) {
  HierModel m;
  m.tree = random_balanced(items, 2, dim, seed);
  Rng rng(seed ^ 0xabcd);
  std::normal_distribution<double> gauss(0.0, 0.5);
  m.user_factors.resize(users, dim);
  for (Eigen::Index r = 0; r < users; ++r)
    for (Eigen::Index c = 0; c < dim; ++c) m.user_factors(r, c) = gauss(rng);
  for (int n = 0; n < m.tree.node_count(); ++n) {
    for (int d = 0; d < dim; ++d) m.tree.node(n).q[d] = gauss(rng);
    m.tree.node(n).b = gauss(rng);
  }
  return m;
}

}  // namespace

TEST_SUITE("cis_model") {

TEST_CASE("zero parameters spread flat probability uniformly") {
  auto m = zero_flat(2, 3, 2);
  for (int i = 0; i < 3; ++i)
    CHECK(flat_prob(m, 0, i) == doctest::Approx(1.0 / 3).epsilon(1e-14));
  CHECK(flat_distribution(m, 1).sum() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("a ln-2 bias doubles an item's share") {
  auto m = zero_flat(1, 3, 2);
  m.item_bias[0] = std::log(2.0);
  CHECK(flat_prob(m, 0, 0) == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(flat_prob(m, 0, 1) == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(flat_prob(m, 0, 2) == doctest::Approx(0.25).epsilon(1e-14));
}

TEST_CASE("random flat distributions normalize") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto m = random_flat(3, 19, 4, 100 + seed);
    for (int u = 0; u < 3; ++u)
      CHECK(flat_distribution(m, u).sum() ==
            doctest::Approx(1.0).epsilon(1e-12));
  }
  auto m = random_flat(2, 4, 2, 9);
  CHECK_THROWS_AS(flat_prob(m, 5, 0), LookupError);
  CHECK_THROWS_AS(flat_prob(m, 0, 4), LookupError);
  CHECK_THROWS_AS(flat_score(m, 0, -1), LookupError);
}

TEST_CASE("item biases start at the centered log of occurrence counts") {
  auto data = ImplicitDataset::from_pairs(2, 2, {{0, 0}, {1, 0}, {0, 1}});
  auto m = init_flat(data, 3, 42);
  double a = std::log(3.0), b = std::log(2.0);  // ln(1 + count)
  double mean = (a + b) / 2.0;
  CHECK(m.item_bias[0] == doctest::Approx(a - mean).epsilon(1e-14));
  CHECK(m.item_bias[1] == doctest::Approx(b - mean).epsilon(1e-14));
  CHECK(m.item_bias.sum() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("single-user flat training recovers empirical frequencies") {
  auto data = ImplicitDataset::from_pairs(1, 2, {{0, 0}, {0, 0}, {0, 1}});
  TrainConfig cfg;
  cfg.dim = 2;
  cfg.learning_rate = 0.2;
  cfg.lr_decay = 1.0;
  cfg.l2 = 0.0;
  cfg.epochs = 400;
  cfg.seed = 3;
  auto m = train_flat(data, cfg);
  auto p = flat_distribution(m, 0);
  CHECK(p[0] == doctest::Approx(2.0 / 3).epsilon(0.03));
  CHECK(std::abs(p[0] - 2.0 / 3) < 0.02);
  CHECK(std::abs(p[1] - 1.0 / 3) < 0.02);
}

TEST_CASE("zero learning rate leaves the model untouched") {
  auto data = ImplicitDataset::from_pairs(1, 3, {{0, 0}, {0, 1}, {0, 2}});
  auto m = init_flat(data, 2, 5);
  std::string before = serialize_flat(m);
  TrainConfig cfg;
  cfg.dim = 2;
  cfg.learning_rate = 0.0;
  cfg.epochs = 3;
  auto after = train_flat(m, data, cfg);
  CHECK(serialize_flat(after) == before);
}

TEST_CASE("config validation rejects nonsense") {
  TrainConfig cfg;
  cfg.learning_rate = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.epochs = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.l2 = -1e-9;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.lr_decay = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.lr_decay = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.dim = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("flat gradients match finite differences") {
  auto model = random_flat(4, 6, 2, 77);
  for (auto [u, i] : std::vector<std::pair<int, int>>{{0, 0}, {2, 5}, {3, 1}}) {
    auto g = flat_pair_gradient(model, u, i);
    auto f = [&] { return flat_log_distribution(model, u)[i]; };

    Eigen::MatrixXd expect_user =
        Eigen::MatrixXd::Zero(model.user_count(), model.dim());
    expect_user.row(u) = g.d_user.transpose();
    CHECK(oracle::fd_check_block(model.user_factors, expect_user, f) < 1e-4);
    CHECK(oracle::fd_check_block(model.item_factors, g.d_item_factors, f) <
          1e-4);
    CHECK(oracle::fd_check_block(model.item_bias, g.d_item_bias, f) < 1e-4);
  }
}

TEST_CASE("tree gradients match finite differences on a depth-3 tree") {
  auto model = random_hier(2, 8, 2, 31);
  REQUIRE(model.tree.code_of(5).length() == 3);
  for (auto [u, i] : std::vector<std::pair<int, int>>{{0, 5}, {1, 0}, {0, 7}}) {
    auto g = hier_pair_gradient(model, u, i);
    auto f = [&] { return hier_log_prob(model, u, i); };

    Eigen::MatrixXd expect_user =
        Eigen::MatrixXd::Zero(model.user_count(), model.dim());
    expect_user.row(u) = g.d_user.transpose();
    CHECK(oracle::fd_check_block(model.user_factors, expect_user, f) < 1e-4);

    // Per-node expectations: the analytic gradient where reported, zero
    // everywhere else.
    std::vector<Eigen::VectorXd> expect_q(
        model.tree.node_count(), Eigen::VectorXd::Zero(model.dim()));
    std::vector<double> expect_b(model.tree.node_count(), 0.0);
    for (std::size_t t = 0; t < g.nodes.size(); ++t) {
      expect_q[g.nodes[t]] = g.d_node_q[t];
      expect_b[g.nodes[t]] = g.d_node_b[t];
    }
    for (int n = 0; n < model.tree.node_count(); ++n) {
      CHECK(oracle::fd_check_block(model.tree.node(n).q, expect_q[n], f) <
            1e-4);
      double numeric = oracle::fd_slot(model.tree.node(n).b, f);
      CHECK(oracle::rel_err(expect_b[n], numeric) < 1e-4);
    }
  }
}

TEST_CASE("a pair update touches only the path family") {
  auto model = random_hier(3, 16, 3, 13);
  const int u = 1, item = 9;
  auto reference = model;
  hier_apply_pair(model, u, item, 0.1, 0.05, false);

  std::set<int> family;
  int node_id = model.tree.root();
  for (int digit : model.tree.code_of(item).digits) {
    for (int c : model.tree.node(node_id).children) family.insert(c);
    node_id = model.tree.node(node_id).children[digit - 1];
  }
  for (int n = 0; n < model.tree.node_count(); ++n) {
    bool changed = model.tree.node(n).q != reference.tree.node(n).q ||
                   model.tree.node(n).b != reference.tree.node(n).b;
    CHECK(changed == (family.count(n) > 0));
  }
  for (int r = 0; r < 3; ++r) {
    bool changed = model.user_factors.row(r) != reference.user_factors.row(r);
    CHECK(changed == (r == u));
  }
}

TEST_CASE("a depth-1 tree reproduces the flat probabilities") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto flat = random_flat(3, 7, 3, 500 + seed);
    HierModel hier{flat.user_factors, depth1_tree(flat)};
    for (int u = 0; u < 3; ++u)
      for (int i = 0; i < 7; ++i)
        CHECK(std::abs(flat_prob(flat, u, i) - hier_prob(hier, u, i)) <
              1e-12);
  }
}

TEST_CASE("depth-1 training walks in lockstep with flat training") {
  auto data = ImplicitDataset::from_pairs(
      2, 5, {{0, 0}, {0, 2}, {1, 4}, {1, 1}, {0, 3}, {1, 0}, {0, 2}, {1, 4}});
  auto flat0 = random_flat(2, 5, 3, 901);
  HierModel hier0{flat0.user_factors, depth1_tree(flat0)};

  TrainConfig cfg;
  cfg.dim = 3;
  cfg.learning_rate = 0.1;
  cfg.l2 = 1e-3;
  cfg.lr_decay = 0.9;
  cfg.epochs = 3;
  cfg.seed = 7;
  auto flat = train_flat(flat0, data, cfg);
  auto hier = train_hier(std::move(hier0), data, cfg);

  double worst = 0.0;
  for (int i = 0; i < 5; ++i) {
    int leaf = hier.tree.leaf_of(i);
    worst = std::max(worst, (hier.tree.node(leaf).q.transpose() -
                             flat.item_factors.row(i))
                                .cwiseAbs()
                                .maxCoeff());
    worst = std::max(worst,
                     std::abs(hier.tree.node(leaf).b - flat.item_bias[i]));
  }
  worst = std::max(
      worst, (hier.user_factors - flat.user_factors).cwiseAbs().maxCoeff());
  CHECK(worst < 1e-10);
}

TEST_CASE("single-user tree training recovers empirical frequencies") {
  TrainConfig cfg;
  cfg.dim = 2;
  cfg.learning_rate = 0.2;
  cfg.lr_decay = 1.0;
  cfg.l2 = 0.0;
  cfg.epochs = 300;
  cfg.seed = 11;

  auto even = ImplicitDataset::from_pairs(1, 2, {{0, 0}, {0, 0}, {0, 1}, {0, 1}});
  auto m1 = train_hier(
      init_hier(even, random_balanced(2, 2, 2, 4), cfg.seed), even, cfg);
  CHECK(std::abs(hier_prob(m1, 0, 0) - 0.5) < 0.02);

  auto skew = ImplicitDataset::from_pairs(1, 2, {{0, 0}, {0, 0}, {0, 0}, {0, 1}});
  auto m2 = train_hier(
      init_hier(skew, random_balanced(2, 2, 2, 4), cfg.seed), skew, cfg);
  CHECK(std::abs(hier_prob(m2, 0, 0) - 0.75) < 0.02);
}

TEST_CASE("tree log-likelihood sums per-pair logs") {
  // Zero-parameter complete binary tree over 4 items: each pair contributes
  // ln(1/4).
  ItemTree tree(2, 2);
  tree.set_item_count(4);
  tree.add_node(-1, 0, Eigen::VectorXd::Zero(2), 0.0, -1);
  int l = tree.add_node(0, 0, Eigen::VectorXd::Zero(2), 0.0, -1);
  int r = tree.add_node(0, 1, Eigen::VectorXd::Zero(2), 0.0, -1);
  tree.bind_leaf(tree.add_node(l, 0, Eigen::VectorXd::Zero(2), 0.0, -1), 0);
  tree.bind_leaf(tree.add_node(l, 1, Eigen::VectorXd::Zero(2), 0.0, -1), 1);
  tree.bind_leaf(tree.add_node(r, 0, Eigen::VectorXd::Zero(2), 0.0, -1), 2);
  tree.bind_leaf(tree.add_node(r, 1, Eigen::VectorXd::Zero(2), 0.0, -1), 3);
  tree.rebuild_codes();
  HierModel m{Eigen::MatrixXd::Zero(1, 2), std::move(tree)};

  std::vector<std::pair<int, int>> one = {{0, 2}};
  CHECK(hier_loglik(m, one) ==
        doctest::Approx(-1.3862943611198906).epsilon(1e-14));
  CHECK(hier_loglik(m, {}) == 0.0);

  auto rnd = random_hier(3, 16, 3, 55);
  std::vector<std::pair<int, int>> pairs = {{0, 1}, {2, 9}, {1, 15}, {0, 0}};
  double manual = 0.0;
  for (auto [u, i] : pairs) manual += hier_log_prob(rnd, u, i);
  CHECK(std::abs(hier_loglik(rnd, pairs) - manual) < 1e-10);
  CHECK(hier_loglik(rnd, pairs) <= 0.0);

  std::vector<std::pair<int, int>> bad = {{0, 99}};
  CHECK_THROWS_AS(hier_loglik(rnd, bad), LookupError);
}

TEST_CASE("finetuning climbs the training log-likelihood") {
  auto data = ImplicitDataset::from_pairs(
      3, 8,
      {{0, 1}, {0, 2}, {0, 1}, {1, 5}, {1, 6}, {1, 5}, {2, 0}, {2, 7}, {2, 0},
       {0, 3}, {1, 4}, {2, 1}});
  TrainConfig stage;
  stage.dim = 3;
  stage.epochs = 2;
  stage.freeze_user_factors = true;
  stage.seed = 21;
  auto model = train_hier(
      init_hier(data, random_balanced(8, 2, 3, 2), stage.seed), data, stage);

  double before = hier_loglik(model, data.pairs);
  TrainConfig ft;
  ft.dim = 3;
  ft.learning_rate = 0.01;
  ft.l2 = 0.0;
  ft.epochs = 8;
  ft.seed = 22;
  std::vector<EpochLog> trace;
  model = finetune(std::move(model), data, ft, &trace);
  REQUIRE(trace.size() == 8);
  CHECK(trace.front().loglik > before - 1e-6);
  for (std::size_t e = 1; e < trace.size(); ++e)
    CHECK(trace[e].loglik >= trace[e - 1].loglik - 1e-6);
}

TEST_CASE("zero-epoch finetuning is the identity") {
  auto data = ImplicitDataset::from_pairs(1, 4, {{0, 0}, {0, 3}});
  auto model = init_hier(data, random_balanced(4, 2, 2, 8), 5);
  std::string before = serialize_hier(model);
  TrainConfig cfg;
  cfg.dim = 2;
  cfg.epochs = 0;
  auto after = finetune(std::move(model), data, cfg);
  CHECK(serialize_hier(after) == before);
}

TEST_CASE("top-k ranking is score-ordered with index tie-breaks") {
  auto flat = random_flat(2, 9, 3, 321);
  std::vector<int> all(9);
  for (int i = 0; i < 9; ++i) all[i] = i;

  std::vector<int> single = {4};
  CHECK(topk(flat, 0, single, 3) == std::vector<int>{4});

  // Score order must equal probability order.
  auto ranked = topk(flat, 1, all, 9);
  auto p = flat_distribution(flat, 1);
  for (std::size_t j = 1; j < ranked.size(); ++j)
    CHECK(p[ranked[j - 1]] >= p[ranked[j]]);

  // All-zero model: every score ties, so indices come back ascending.
  auto zeros = zero_flat(1, 5, 2);
  std::vector<int> cand = {3, 0, 4, 1};
  CHECK(topk(zeros, 0, cand, 4) == std::vector<int>{0, 1, 3, 4});
  CHECK(topk(zeros, 0, cand, 2) == std::vector<int>{0, 1});
  CHECK_THROWS_AS(topk(zeros, 0, cand, 0), ContractError);

  // Tree model agrees with a brute-force sort of the full distribution.
  auto hier = random_hier(2, 16, 3, 77);
  std::vector<int> all16(16);
  for (int i = 0; i < 16; ++i) all16[i] = i;
  auto got = topk(hier, 0, all16, 16);
  auto dist = hier.tree.full_distribution(hier.user_factors.row(0).transpose());
  std::vector<int> want = all16;
  std::sort(want.begin(), want.end(), [&](int a, int b) {
    if (dist[a] != dist[b]) return dist[a] > dist[b];
    return a < b;
  });
  CHECK(got == want);
}

TEST_CASE("model files round trip byte for byte") {
  auto flat = random_flat(3, 5, 2, 888);
  std::string fb = serialize_flat(flat);
  auto flat2 = deserialize_flat(fb);
  CHECK(serialize_flat(flat2) == fb);
  CHECK(flat2.user_factors == flat.user_factors);
  CHECK(flat2.item_bias == flat.item_bias);

  auto hier = random_hier(2, 6, 2, 999);
  std::string hb = serialize_hier(hier);
  auto hier2 = deserialize_hier(hb);
  CHECK(serialize_hier(hier2) == hb);
  CHECK(hier2.user_factors == hier.user_factors);

  CHECK_THROWS_AS(deserialize_flat(hb), FormatError);
  CHECK_THROWS_AS(deserialize_hier(fb), FormatError);
  CHECK_THROWS_AS(deserialize_flat(fb.substr(0, 40)), FormatError);
  CHECK_THROWS_AS(deserialize_hier("{}"), FormatError);
}

TEST_CASE("exploding training reports divergence with the epoch") {
  auto data = ImplicitDataset::from_pairs(1, 3, {{0, 0}, {0, 1}, {0, 2}});
  TrainConfig cfg;
  cfg.dim = 2;
  cfg.learning_rate = 1e10;
  cfg.lr_decay = 1.0;
  cfg.l2 = 0.0;
  cfg.epochs = 60;
  CHECK_THROWS_WITH_AS(static_cast<void>(train_flat(data, cfg)),
                       doctest::Contains("epoch"), DivergenceError);
  auto hier = init_hier(data, random_balanced(3, 2, 2, 1), 2);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(train_hier(std::move(hier), data, cfg)),
      doctest::Contains("epoch"), DivergenceError);
}

TEST_CASE("epoch order is a seeded permutation") {
  auto a = epoch_order(100, 5, 0);
  auto b = epoch_order(100, 5, 0);
  CHECK(a == b);
  CHECK(a != epoch_order(100, 5, 1));
  CHECK(a != epoch_order(100, 6, 0));
  std::set<std::size_t> unique(a.begin(), a.end());
  CHECK(unique.size() == 100);
}

TEST_CASE("offset-driven single epochs replay one multi-epoch run exactly") {
  Rng rng(55);
  std::uniform_int_distribution<int> upick(0, 7), ipick(0, 11);
  std::vector<std::pair<int, int>> pairs;
  for (int t = 0; t < 150; ++t) pairs.emplace_back(upick(rng), ipick(rng));
  ImplicitDataset data = ImplicitDataset::from_pairs(8, 12, std::move(pairs));

  TrainConfig cfg;
  cfg.dim = 4;
  cfg.epochs = 5;
  cfg.seed = 9;
  HierModel whole = init_hier(data, random_balanced(12, 2, 4, 77), 3);
  HierModel stepped = whole;
  whole = train_hier(std::move(whole), data, cfg);

  // decay by repeated multiplication, exactly as the internal loop does
  double lr = cfg.learning_rate;
  for (int e = 0; e < 5; ++e) {
    TrainConfig one = cfg;
    one.epochs = 1;
    one.epoch_offset = e;
    one.learning_rate = lr;
    stepped = train_hier(std::move(stepped), data, one);
    lr *= cfg.lr_decay;
  }
  CHECK((whole.user_factors - stepped.user_factors).cwiseAbs().maxCoeff() ==
        0.0);
  for (int n = 0; n < whole.tree.node_count(); ++n) {
    CHECK((whole.tree.node(n).q - stepped.tree.node(n).q)
              .cwiseAbs()
              .maxCoeff() == 0.0);
    CHECK(whole.tree.node(n).b == stepped.tree.node(n).b);
  }
}

}  // TEST_SUITE
