#include "cistree/treelearn.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <random>
#include <unordered_map>

namespace cistree {

namespace {

constexpr std::uint64_t kNodeInitTag = 0x9a3d;
constexpr std::uint64_t kFitOrderTag = 0x51ee;
constexpr std::uint64_t kRandomAssignTag = 0x2ab1;
constexpr std::uint64_t kClusterTag = 0x6c05;
constexpr std::uint64_t kLevelTag = 0x7311;

// z ln z with the 0 ln 0 := 0 convention, negated.
double neg_zlnz(double z) { return z > 0.0 ? -z * std::log(z) : 0.0; }

}  // namespace

void TreeLearnConfig::validate() const {
  if (arity < 2) throw ConfigError("arity must be at least 2");
  if (rounds < 0) throw ConfigError("rounds must be non-negative");
  if (node_passes < 0) throw ConfigError("node_passes must be non-negative");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be finite and non-negative");
  if (!(lr_decay > 0.0) || lr_decay > 1.0)
    throw ConfigError("lr_decay must lie in (0, 1]");
  if (!(l2 >= 0.0)) throw ConfigError("l2 must be non-negative");
  if (!(digit_change_exit_fraction >= 0.0))
    throw ConfigError("digit_change_exit_fraction must be non-negative");
  if (threads < 1) throw ConfigError("threads must be positive");
  if (max_stuck_levels < 1)
    throw ConfigError("max_stuck_levels must be positive");
}

SurrogateReps surrogate_reps(const ImplicitDataset& train,
                             const Eigen::MatrixXd& user_factors,
                             bool allow_missing) {
  if (user_factors.rows() != train.user_count)
    throw ContractError("user factor rows do not match the dataset");
  SurrogateReps out;
  out.reps = Eigen::MatrixXd::Zero(train.item_count, user_factors.cols());
  out.users.assign(static_cast<std::size_t>(train.item_count), 0);
  for (int i = 0; i < train.item_count; ++i) {
    const std::vector<int>& users = train.item_users[static_cast<std::size_t>(i)];
    if (users.empty() && !allow_missing)
      throw DataError("item " + std::to_string(i) + " has no training users");
    for (int u : users) out.reps.row(i) += user_factors.row(u);
    out.users[static_cast<std::size_t>(i)] = static_cast<long long>(users.size());
  }
  return out;
}

double ftilde(std::span<const double> child_counts) {
  double acc = 0.0;
  for (double z : child_counts) {
    if (z < 0.0) throw ContractError("negative child count");
    acc += neg_zlnz(z);
  }
  return acc;
}

NodeLevelState init_node_state(std::vector<int> items, std::vector<int> digits,
                               const std::vector<long long>& occurrences,
                               int arity, int dim, std::uint64_t seed) {
  if (digits.size() != items.size())
    throw ContractError("digit assignment does not match the item list");
  NodeLevelState st;
  st.items = std::move(items);
  st.digits = std::move(digits);
  Rng rng(derive_seed(seed, {kNodeInitTag}));
  std::normal_distribution<double> noise(0.0, 0.01);
  st.child_q.resize(arity, dim);
  for (int c = 0; c < arity; ++c)
    for (int d = 0; d < dim; ++d) st.child_q(c, d) = noise(rng);
  st.child_b = Eigen::VectorXd::Zero(arity);
  st.child_count.assign(static_cast<std::size_t>(arity), 0.0);
  for (std::size_t p = 0; p < st.items.size(); ++p) {
    int d = st.digits[p];
    if (d < 1 || d > arity) throw ContractError("digit out of range");
    int item = st.items[p];
    if (item < 0 || static_cast<std::size_t>(item) >= occurrences.size())
      throw ContractError("item id out of range");
    st.child_count[static_cast<std::size_t>(d - 1)] +=
        static_cast<double>(occurrences[static_cast<std::size_t>(item)]);
  }
  st.ftilde_cache = ftilde(st.child_count);
  return st;
}

int digit_update(NodeLevelState& node, int item_pos, const SurrogateReps& reps,
                 const std::vector<long long>& occurrences,
                 bool positive_sign) {
  if (item_pos < 0 || static_cast<std::size_t>(item_pos) >= node.items.size())
    throw ContractError("item position out of range");
  const int arity = static_cast<int>(node.child_count.size());
  const int item = node.items[static_cast<std::size_t>(item_pos)];
  const int cur = node.digits[static_cast<std::size_t>(item_pos)];
  if (cur < 1 || cur > arity) throw ContractError("digit out of range");
  const double n_i =
      static_cast<double>(occurrences[static_cast<std::size_t>(item)]);
  const double users_i =
      static_cast<double>(reps.users[static_cast<std::size_t>(item)]);

  // Lift the item out of its current child; the cache loses that child's
  // term and gains the term for the reduced count.
  const double z_cur = node.child_count[static_cast<std::size_t>(cur - 1)];
  const double cache_without =
      node.ftilde_cache - neg_zlnz(z_cur) + neg_zlnz(z_cur - n_i);

  int best = 1;
  double best_score = -std::numeric_limits<double>::infinity();
  double best_cache = 0.0;
  for (int d = 1; d <= arity; ++d) {
    double z = node.child_count[static_cast<std::size_t>(d - 1)];
    if (d == cur) z -= n_i;
    const double cache_with = cache_without - neg_zlnz(z) + neg_zlnz(z + n_i);
    const double future = positive_sign ? -cache_with : cache_with;
    const double score = reps.reps.row(item).dot(node.child_q.row(d - 1)) +
                         users_i * node.child_b(d - 1) + future;
    if (score > best_score) {
      best_score = score;
      best = d;
      best_cache = cache_with;
    }
  }

  node.child_count[static_cast<std::size_t>(cur - 1)] -= n_i;
  node.child_count[static_cast<std::size_t>(best - 1)] += n_i;
  node.digits[static_cast<std::size_t>(item_pos)] = best;
  node.ftilde_cache = best_cache;
  return best;
}

double node_digit_log_prob(const NodeLevelState& node,
                           const Eigen::VectorXd& user, int digit) {
  const int arity = static_cast<int>(node.child_b.size());
  if (digit < 1 || digit > arity) throw ContractError("digit out of range");
  Eigen::VectorXd z = node.child_q * user + node.child_b;
  double zmax = z.maxCoeff();
  double lse = zmax + std::log((z.array() - zmax).exp().sum());
  return z(digit - 1) - lse;
}

NodeGradient node_digit_gradient(const NodeLevelState& node,
                                 const Eigen::VectorXd& user, int digit) {
  const int arity = static_cast<int>(node.child_b.size());
  if (digit < 1 || digit > arity) throw ContractError("digit out of range");
  Eigen::VectorXd z = node.child_q * user + node.child_b;
  double zmax = z.maxCoeff();
  Eigen::ArrayXd p = (z.array() - zmax).exp();
  p /= p.sum();
  NodeGradient g;
  g.d_b = -p.matrix();
  g.d_b(digit - 1) += 1.0;
  g.d_q = g.d_b * user.transpose();
  return g;
}

void update_node_params(NodeLevelState& node, const ImplicitDataset& train,
                        const Eigen::MatrixXd& user_factors,
                        const TreeLearnConfig& config, std::uint64_t seed,
                        const std::string& node_tag) {
  // One observation per (item, distinct user) pair at this node.
  std::vector<std::pair<int, int>> obs;  // (user, digit index 0-based)
  for (std::size_t p = 0; p < node.items.size(); ++p) {
    int item = node.items[p];
    int d = node.digits[p] - 1;
    for (int u : train.item_users[static_cast<std::size_t>(item)])
      obs.emplace_back(u, d);
  }
  if (obs.empty()) return;

  const int arity = static_cast<int>(node.child_b.size());
  double lr = config.learning_rate;
  Eigen::VectorXd z(arity);
  Eigen::ArrayXd p(arity);
  for (int pass = 0; pass < config.node_passes; ++pass) {
    Rng rng(derive_seed(seed, {kFitOrderTag, static_cast<std::uint64_t>(pass)}));
    std::shuffle(obs.begin(), obs.end(), rng);
    for (const auto& [u, d] : obs) {
      auto user = user_factors.row(u);
      z.noalias() = node.child_q * user.transpose();
      z += node.child_b;
      double zmax = z.maxCoeff();
      p = (z.array() - zmax).exp();
      p /= p.sum();
      for (int c = 0; c < arity; ++c) {
        double coeff = (c == d ? 1.0 : 0.0) - p(c);
        node.child_q.row(c) =
            node.child_q.row(c) * (1.0 - lr * config.l2) + lr * coeff * user;
        node.child_b(c) =
            node.child_b(c) * (1.0 - lr * config.l2) + lr * coeff;
      }
    }
    lr *= config.lr_decay;
    if (!node.child_q.allFinite() || !node.child_b.allFinite())
      throw DivergenceError("child parameters of " + node_tag);
  }
}

double node_proxy_objective(const NodeLevelState& node,
                            const ImplicitDataset& train,
                            const Eigen::MatrixXd& user_factors,
                            const SurrogateReps& reps) {
  double acc = node.ftilde_cache;
  for (std::size_t p = 0; p < node.items.size(); ++p) {
    int item = node.items[p];
    int d = node.digits[p];
    acc += reps.reps.row(item).dot(node.child_q.row(d - 1)) +
           static_cast<double>(reps.users[static_cast<std::size_t>(item)]) *
               node.child_b(d - 1);
    for (int u : train.item_users[static_cast<std::size_t>(item)]) {
      Eigen::VectorXd z = node.child_q * user_factors.row(u).transpose();
      z += node.child_b;
      double zmax = z.maxCoeff();
      acc -= zmax + std::log((z.array() - zmax).exp().sum());
    }
  }
  return acc;
}

LevelOutcome learn_level(NodeLevelState& node, const ImplicitDataset& train,
                         const Eigen::MatrixXd& user_factors,
                         const SurrogateReps& reps,
                         const TreeLearnConfig& config, std::uint64_t seed) {
  LevelOutcome out;
  const std::size_t n = node.items.size();
  for (int round = 0; round < config.rounds; ++round) {
    double before = node_proxy_objective(node, train, user_factors, reps);
    int changed = 0;
    for (std::size_t p = 0; p < n; ++p) {
      int old = node.digits[p];
      if (digit_update(node, static_cast<int>(p), reps, train.item_occurrences,
                       config.ftilde_positive_sign) != old)
        ++changed;
    }
    double after = node_proxy_objective(node, train, user_factors, reps);
    out.sweep_proxy.emplace_back(before, after);
    out.digits_changed += changed;
    ++out.sweeps;
    update_node_params(node, train, user_factors, config,
                       derive_seed(seed, {static_cast<std::uint64_t>(round)}),
                       "level node (round " + std::to_string(round) + ")");
    if (changed == 0 ||
        changed < config.digit_change_exit_fraction * static_cast<double>(n))
      break;
  }
  out.proxy_objective = node_proxy_objective(node, train, user_factors, reps);
  return out;
}

std::vector<int> init_assign_random(int item_count, int arity,
                                    std::uint64_t seed) {
  Rng rng(derive_seed(seed, {kRandomAssignTag}));
  std::uniform_int_distribution<int> pick(1, arity);
  std::vector<int> digits(static_cast<std::size_t>(item_count));
  for (int& d : digits) d = pick(rng);
  return digits;
}

std::vector<int> init_assign_cluster(const std::vector<int>& items,
                                     const SurrogateReps& reps, int arity,
                                     std::uint64_t seed, bool raw_reps) {
  const std::size_t n = items.size();
  std::vector<int> digits(n, 1);
  if (n <= static_cast<std::size_t>(arity)) {
    for (std::size_t j = 0; j < n; ++j) digits[j] = static_cast<int>(j) + 1;
    return digits;
  }
  const int dim = static_cast<int>(reps.reps.cols());
  Eigen::MatrixXd x(n, dim);
  for (std::size_t j = 0; j < n; ++j) {
    double denom =
        raw_reps ? 1.0
                 : std::max<double>(
                       1.0, static_cast<double>(
                                reps.users[static_cast<std::size_t>(items[j])]));
    x.row(j) = reps.reps.row(items[j]) / denom;
  }

  Rng rng(derive_seed(seed, {kClusterTag}));
  // k-means++ seeding: next center drawn proportional to squared distance
  // from the nearest existing one.
  Eigen::MatrixXd centers(arity, dim);
  std::uniform_int_distribution<std::size_t> first(0, n - 1);
  centers.row(0) = x.row(first(rng));
  Eigen::VectorXd d2 = (x.rowwise() - centers.row(0)).rowwise().squaredNorm();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int k = 1; k < arity; ++k) {
    double total = d2.sum();
    std::size_t pick = 0;
    if (total > 0.0) {
      double target = unit(rng) * total;
      double run = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        run += d2(j);
        if (run >= target) {
          pick = j;
          break;
        }
      }
    } else {
      pick = first(rng);
    }
    centers.row(k) = x.row(pick);
    d2 = d2.cwiseMin(
        (x.rowwise() - centers.row(k)).rowwise().squaredNorm().eval());
  }

  std::vector<int> assign(n, 0);
  for (int iter = 0; iter < 50; ++iter) {
    bool moved = false;
    for (std::size_t j = 0; j < n; ++j) {
      int best = 0;
      double best_d = (x.row(j) - centers.row(0)).squaredNorm();
      for (int k = 1; k < arity; ++k) {
        double d = (x.row(j) - centers.row(k)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      if (assign[j] != best) {
        assign[j] = best;
        moved = true;
      }
    }
    if (!moved && iter > 0) break;
    for (int k = 0; k < arity; ++k) {
      Eigen::RowVectorXd mean = Eigen::RowVectorXd::Zero(dim);
      int count = 0;
      for (std::size_t j = 0; j < n; ++j)
        if (assign[j] == k) {
          mean += x.row(j);
          ++count;
        }
      if (count > 0) centers.row(k) = mean / count;  // empty keeps its center
    }
  }
  for (std::size_t j = 0; j < n; ++j) digits[j] = assign[j] + 1;
  return digits;
}

namespace {

struct FrontierEntry {
  int node_id = 0;
  std::vector<int> items;
  int stuck = 0;
};

// Count-sorted round robin: used when sweeps keep collapsing a node into a
// single child.
std::vector<int> forced_split_digits(const std::vector<int>& items,
                                     const std::vector<long long>& occurrences,
                                     int arity) {
  std::vector<int> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    long long na = occurrences[static_cast<std::size_t>(items[static_cast<std::size_t>(a)])];
    long long nb = occurrences[static_cast<std::size_t>(items[static_cast<std::size_t>(b)])];
    if (na != nb) return na > nb;
    return items[static_cast<std::size_t>(a)] < items[static_cast<std::size_t>(b)];
  });
  std::vector<int> digits(items.size(), 1);
  for (std::size_t r = 0; r < order.size(); ++r)
    digits[static_cast<std::size_t>(order[r])] =
        static_cast<int>(r % static_cast<std::size_t>(arity)) + 1;
  return digits;
}

double partial_validation_loglik(const ItemTree& tree,
                                 const std::vector<int>& item_node,
                                 const std::vector<double>& node_count_sum,
                                 const ImplicitDataset& train,
                                 const ImplicitDataset& validation,
                                 const Eigen::MatrixXd& user_factors,
                                 long long* skipped) {
  double acc = 0.0;
  long long skip = 0;
  std::vector<int> slots;
  for (const auto& [u, i] : validation.pairs) {
    double n_i =
        static_cast<double>(train.item_occurrences[static_cast<std::size_t>(i)]);
    if (n_i <= 0.0) {
      ++skip;
      continue;
    }
    int node = item_node[static_cast<std::size_t>(i)];
    slots.clear();
    for (int cur = node; cur != tree.root();
         cur = tree.node(cur).parent)
      slots.push_back(tree.node(cur).slot);
    Eigen::VectorXd user = user_factors.row(u);
    int cur = tree.root();
    for (auto it = slots.rbegin(); it != slots.rend(); ++it) {
      acc += std::log(tree.child_distribution(cur, user)(*it));
      cur = tree.node(cur).children[static_cast<std::size_t>(*it)];
    }
    acc += std::log(n_i / node_count_sum[static_cast<std::size_t>(node)]);
  }
  if (skipped) *skipped = skip;
  return acc;
}

}  // namespace

ItemTree learn_tree(const ImplicitDataset& train,
                    const Eigen::MatrixXd& user_factors,
                    const TreeLearnConfig& config, std::ostream* progress,
                    const ImplicitDataset* validation) {
  config.validate();
  if (train.item_count < 1) throw DataError("empty item inventory");
  if (user_factors.rows() != train.user_count)
    throw ContractError("user factor rows do not match the dataset");
  const int dim = static_cast<int>(user_factors.cols());
  const int arity = config.arity;

  ItemTree tree(arity, dim);
  tree.set_item_count(train.item_count);
  int root = tree.add_node(-1, 0, Eigen::VectorXd::Zero(dim), 0.0, -1);
  if (train.item_count == 1) {
    int leaf = tree.add_node(root, 0, Eigen::VectorXd::Zero(dim), 0.0, -1);
    tree.bind_leaf(leaf, 0);
    tree.rebuild_codes();
    return tree;
  }

  SurrogateReps reps = surrogate_reps(train, user_factors, /*allow_missing=*/true);

  std::vector<FrontierEntry> frontier;
  {
    FrontierEntry all;
    all.node_id = root;
    all.items.resize(static_cast<std::size_t>(train.item_count));
    std::iota(all.items.begin(), all.items.end(), 0);
    frontier.push_back(std::move(all));
  }
  // Where each item currently lives, and the training mass at that node;
  // both feed the partial-model validation likelihood.
  std::vector<int> item_node(static_cast<std::size_t>(train.item_count), root);
  std::vector<double> node_count_sum;
  auto record_count = [&node_count_sum](int node, double total) {
    if (static_cast<std::size_t>(node) >= node_count_sum.size())
      node_count_sum.resize(static_cast<std::size_t>(node) + 1, 0.0);
    node_count_sum[static_cast<std::size_t>(node)] = total;
  };
  {
    double total = 0.0;
    for (long long c : train.item_occurrences) total += static_cast<double>(c);
    record_count(root, total);
  }

  for (int level = 1; !frontier.empty(); ++level) {
    std::vector<NodeLevelState> states(frontier.size());
    std::vector<LevelOutcome> outcomes(frontier.size());
    std::vector<int> forced(frontier.size(), 0);

    parallel_for(frontier.size(), config.threads, [&](std::size_t idx) {
      FrontierEntry& entry = frontier[idx];
      std::uint64_t node_seed =
          derive_seed(config.seed, {kLevelTag, static_cast<std::uint64_t>(level),
                                    static_cast<std::uint64_t>(idx)});
      std::vector<int> digits;
      if (entry.stuck >= config.max_stuck_levels) {
        digits = forced_split_digits(entry.items, train.item_occurrences, arity);
        forced[idx] = 1;
      } else if (config.init == TreeLearnConfig::Init::cluster) {
        digits = init_assign_cluster(entry.items, reps, arity, node_seed,
                                     config.cluster_raw_reps);
      } else {
        digits = init_assign_random(static_cast<int>(entry.items.size()), arity,
                                    node_seed);
      }
      states[idx] = init_node_state(entry.items, std::move(digits),
                                    train.item_occurrences, arity, dim,
                                    node_seed);
      if (forced[idx]) {
        // Fit parameters to the forced assignment but leave the digits alone.
        update_node_params(states[idx], train, user_factors, config,
                           derive_seed(node_seed, {0xf02cedULL}),
                           "forced node " + std::to_string(entry.node_id));
        outcomes[idx].proxy_objective = node_proxy_objective(
            states[idx], train, user_factors, reps);
      } else {
        outcomes[idx] = learn_level(states[idx], train, user_factors, reps,
                                    config, node_seed);
      }
    });

    std::vector<FrontierEntry> next;
    int nodes_done = 0;
    int nodes_stuck = 0;
    int leaves_bound = 0;
    int digits_changed = 0;
    double proxy_total = 0.0;
    for (std::size_t idx = 0; idx < frontier.size(); ++idx) {
      FrontierEntry& entry = frontier[idx];
      const NodeLevelState& st = states[idx];
      digits_changed += outcomes[idx].digits_changed;
      proxy_total += outcomes[idx].proxy_objective;

      std::vector<std::vector<int>> groups(static_cast<std::size_t>(arity));
      for (std::size_t p = 0; p < st.items.size(); ++p)
        groups[static_cast<std::size_t>(st.digits[p] - 1)].push_back(
            st.items[p]);
      int nonempty = 0;
      for (const auto& g : groups)
        if (!g.empty()) ++nonempty;

      if (nonempty < 2) {
        // Everything collapsed into one child: retry this node next level
        // with a fresh start, forcing a split once patience runs out.
        entry.stuck += 1;
        if (progress) {
          nlohmann::json rec{{"event", "stuck"},
                             {"level", level},
                             {"node", entry.node_id},
                             {"items", st.items.size()},
                             {"attempt", entry.stuck}};
          *progress << rec.dump() << "\n";
        }
        ++nodes_stuck;
        next.push_back(std::move(entry));
        continue;
      }
      if (forced[idx] && progress) {
        nlohmann::json rec{{"event", "forced_split"},
                           {"level", level},
                           {"node", entry.node_id},
                           {"items", st.items.size()}};
        *progress << rec.dump() << "\n";
      }

      int slot = 0;
      for (int d = 0; d < arity; ++d) {
        const std::vector<int>& g = groups[static_cast<std::size_t>(d)];
        if (g.empty()) continue;
        Eigen::VectorXd q = st.child_q.row(d).transpose();
        double b = st.child_b(d);
        if (g.size() == 1) {
          int child = tree.add_node(entry.node_id, slot, q, b, -1);
          tree.bind_leaf(child, g[0]);
          item_node[static_cast<std::size_t>(g[0])] = child;
          record_count(child,
                       static_cast<double>(
                           train.item_occurrences[static_cast<std::size_t>(g[0])]));
          ++leaves_bound;
        } else {
          int child = tree.add_node(entry.node_id, slot, q, b, -1);
          double total = 0.0;
          for (int item : g) {
            item_node[static_cast<std::size_t>(item)] = child;
            total += static_cast<double>(
                train.item_occurrences[static_cast<std::size_t>(item)]);
          }
          record_count(child, total);
          FrontierEntry fe;
          fe.node_id = child;
          fe.items = g;
          next.push_back(std::move(fe));
        }
        ++slot;
      }
      ++nodes_done;
    }

    if (progress) {
      nlohmann::json rec{{"event", "level"},
                         {"level", level},
                         {"nodes", frontier.size()},
                         {"split", nodes_done},
                         {"stuck", nodes_stuck},
                         {"leaves_bound", leaves_bound},
                         {"digits_changed", digits_changed},
                         {"proxy", proxy_total}};
      if (validation) {
        long long skipped = 0;
        rec["val_loglik"] = partial_validation_loglik(
            tree, item_node, node_count_sum, train, *validation, user_factors,
            &skipped);
        rec["val_skipped_pairs"] = skipped;
      }
      *progress << rec.dump() << "\n";
    }
    frontier = std::move(next);
  }

  tree.rebuild_codes();
  std::vector<std::string> problems = tree.validate();
  if (!problems.empty())
    throw ContractError("learned tree failed validation: " + problems.front());
  return tree;
}

}  // namespace cistree
