#include "cistree/cis_model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include <json.hpp>

namespace cistree {

namespace {

constexpr std::uint64_t kUserInitTag = 0x05e4;
constexpr std::uint64_t kItemInitTag = 0x17e3;
constexpr std::uint64_t kOrderTag = 0x0e70;

void fill_gaussian(Eigen::MatrixXd& m, Rng& rng) {
  std::normal_distribution<double> gauss(0.0, 0.01);
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = gauss(rng);
}

Eigen::VectorXd log_softmax(const Eigen::VectorXd& z) {
  double zmax = z.maxCoeff();
  double sum = (z.array() - zmax).exp().sum();
  return z.array() - (zmax + std::log(sum));
}

void check_user(int u, int users) {
  if (u < 0 || u >= users)
    throw LookupError("unknown user index " + std::to_string(u));
}

void check_item(int i, int items) {
  if (i < 0 || i >= items)
    throw LookupError("unknown item index " + std::to_string(i));
}

bool tree_params_finite(const ItemTree& tree) {
  for (int id = 0; id < tree.node_count(); ++id) {
    const TreeNode& n = tree.node(id);
    if (!n.q.allFinite() || !std::isfinite(n.b)) return false;
  }
  return true;
}

std::string encode_matrix(const Eigen::MatrixXd& m) {
  // Canonical row-major layout regardless of Eigen's storage order.
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
  return encode_doubles(flat);
}

Eigen::MatrixXd decode_matrix(const std::string& text, int rows, int cols) {
  std::vector<double> flat = decode_doubles(text);
  if (flat.size() != static_cast<std::size_t>(rows) * cols)
    throw FormatError("matrix block has wrong size", 0);
  Eigen::MatrixXd m(rows, cols);
  std::size_t at = 0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = flat[at++];
  return m;
}

}  // namespace

void TrainConfig::validate() const {
  if (dim < 1) throw ConfigError("dim must be >= 1");
  // Zero is allowed: it makes a training pass a no-op, which is useful for
  // dry runs and tests.
  if (learning_rate < 0.0) throw ConfigError("learning_rate must be >= 0");
  if (epochs < 0) throw ConfigError("epochs must be >= 0");
  if (l2 < 0.0) throw ConfigError("l2 must be >= 0");
  if (!(lr_decay > 0.0) || lr_decay > 1.0)
    throw ConfigError("lr_decay must be in (0,1]");
  if (epoch_offset < 0) throw ConfigError("epoch_offset must be >= 0");
}

Eigen::VectorXd centered_log_frequency(const std::vector<long long>& counts) {
  Eigen::VectorXd c(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i)
    c[static_cast<Eigen::Index>(i)] = std::log1p(static_cast<double>(counts[i]));
  if (c.size() > 0) c.array() -= c.mean();
  return c;
}

FlatModel init_flat(const ImplicitDataset& data, int dim, std::uint64_t seed) {
  FlatModel m;
  m.user_factors.resize(data.user_count, dim);
  m.item_factors.resize(data.item_count, dim);
  Rng urng(derive_seed(seed, {kUserInitTag}));
  fill_gaussian(m.user_factors, urng);
  Rng irng(derive_seed(seed, {kItemInitTag}));
  fill_gaussian(m.item_factors, irng);
  m.item_bias = centered_log_frequency(data.item_occurrences);
  return m;
}

HierModel init_hier(const ImplicitDataset& data, ItemTree tree,
                    std::uint64_t seed) {
  if (tree.item_count() != data.item_count)
    throw ContractError("tree inventory does not match the dataset");
  HierModel m;
  m.user_factors.resize(data.user_count, tree.dim());
  Rng urng(derive_seed(seed, {kUserInitTag}));
  fill_gaussian(m.user_factors, urng);
  m.tree = std::move(tree);
  Eigen::VectorXd clf = centered_log_frequency(data.item_occurrences);
  for (int item = 0; item < m.tree.item_count(); ++item)
    m.tree.node(m.tree.leaf_of(item)).b = clf[item];
  return m;
}

double flat_score(const FlatModel& model, int u, int i) {
  check_user(u, model.user_count());
  check_item(i, model.item_count());
  return model.user_factors.row(u).dot(model.item_factors.row(i)) +
         model.item_bias[i];
}

Eigen::VectorXd flat_log_distribution(const FlatModel& model, int u) {
  check_user(u, model.user_count());
  Eigen::VectorXd z =
      model.item_factors * model.user_factors.row(u).transpose() +
      model.item_bias;
  return log_softmax(z);
}

Eigen::VectorXd flat_distribution(const FlatModel& model, int u) {
  return flat_log_distribution(model, u).array().exp();
}

double flat_prob(const FlatModel& model, int u, int i) {
  check_item(i, model.item_count());
  return flat_log_distribution(model, u).array().exp()(i);
}

double hier_prob(const HierModel& model, int u, int i) {
  check_user(u, model.user_count());
  return model.tree.item_prob(model.user_factors.row(u).transpose(), i);
}

double hier_log_prob(const HierModel& model, int u, int i) {
  check_user(u, model.user_count());
  return model.tree.item_log_prob(model.user_factors.row(u).transpose(), i);
}

double flat_loglik(const FlatModel& model,
                   std::span<const std::pair<int, int>> pairs) {
  double total = 0.0;
  int last_user = -1;
  Eigen::VectorXd logs;
  // Pair lists are often grouped by user; reuse the softmax when they are.
  for (const auto& [u, i] : pairs) {
    if (u != last_user) {
      logs = flat_log_distribution(model, u);
      last_user = u;
    }
    check_item(i, model.item_count());
    total += logs[i];
  }
  return total;
}

double hier_loglik(const HierModel& model,
                   std::span<const std::pair<int, int>> pairs) {
  double total = 0.0;
  for (const auto& [u, i] : pairs) total += hier_log_prob(model, u, i);
  return total;
}

FlatPairGradient flat_pair_gradient(const FlatModel& model, int u, int i) {
  check_user(u, model.user_count());
  check_item(i, model.item_count());
  Eigen::VectorXd user = model.user_factors.row(u).transpose();
  Eigen::VectorXd p = flat_log_distribution(model, u).array().exp();
  Eigen::VectorXd coeff = -p;
  coeff[i] += 1.0;

  FlatPairGradient g;
  g.d_item_bias = coeff;
  g.d_item_factors = coeff * user.transpose();
  g.d_user = model.item_factors.row(i).transpose() -
             model.item_factors.transpose() * p;
  return g;
}

HierPairGradient hier_pair_gradient(const HierModel& model, int u, int i) {
  check_user(u, model.user_count());
  Eigen::VectorXd user = model.user_factors.row(u).transpose();
  const ItemTree& tree = model.tree;
  HierPairGradient g;
  g.d_user = Eigen::VectorXd::Zero(model.dim());

  int node_id = tree.root();
  for (int digit : tree.code_of(i).digits) {
    const auto& kids = tree.node(node_id).children;
    Eigen::VectorXd z(kids.size());
    for (std::size_t k = 0; k < kids.size(); ++k) {
      const TreeNode& c = tree.node(kids[k]);
      z[static_cast<Eigen::Index>(k)] = user.dot(c.q) + c.b;
    }
    Eigen::VectorXd p = log_softmax(z).array().exp();
    for (std::size_t k = 0; k < kids.size(); ++k) {
      const TreeNode& c = tree.node(kids[k]);
      double coeff = (static_cast<int>(k) == digit - 1 ? 1.0 : 0.0) -
                     p[static_cast<Eigen::Index>(k)];
      g.nodes.push_back(kids[k]);
      g.d_node_q.push_back(coeff * user);
      g.d_node_b.push_back(coeff);
      g.d_user += coeff * c.q;
    }
    node_id = kids[digit - 1];
  }
  return g;
}

void flat_apply_pair(FlatModel& model, int u, int i, double lr, double l2) {
  check_user(u, model.user_count());
  check_item(i, model.item_count());
  Eigen::VectorXd user = model.user_factors.row(u).transpose();
  Eigen::VectorXd p = flat_log_distribution(model, u).array().exp();
  Eigen::VectorXd coeff = -p;
  coeff[i] += 1.0;

  // The user gradient needs the pre-update item factors.
  Eigen::VectorXd d_user = model.item_factors.row(i).transpose() -
                           model.item_factors.transpose() * p;

  model.item_factors *= (1.0 - lr * l2);
  model.item_factors.noalias() += lr * coeff * user.transpose();
  model.item_bias *= (1.0 - lr * l2);
  model.item_bias += lr * coeff;
  model.user_factors.row(u) =
      ((1.0 - lr * l2) * user + lr * d_user).transpose();
}

void hier_apply_pair(HierModel& model, int u, int i, double lr, double l2,
                     bool freeze_user) {
  check_user(u, model.user_count());
  Eigen::VectorXd user = model.user_factors.row(u).transpose();
  ItemTree& tree = model.tree;
  Eigen::VectorXd d_user = Eigen::VectorXd::Zero(model.dim());

  int node_id = tree.root();
  for (int digit : tree.code_of(i).digits) {
    const auto& kids = tree.node(node_id).children;
    Eigen::VectorXd z(kids.size());
    for (std::size_t k = 0; k < kids.size(); ++k) {
      const TreeNode& c = tree.node(kids[k]);
      z[static_cast<Eigen::Index>(k)] = user.dot(c.q) + c.b;
    }
    Eigen::VectorXd p = log_softmax(z).array().exp();
    for (std::size_t k = 0; k < kids.size(); ++k) {
      TreeNode& c = tree.node(kids[k]);
      double coeff = (static_cast<int>(k) == digit - 1 ? 1.0 : 0.0) -
                     p[static_cast<Eigen::Index>(k)];
      d_user += coeff * c.q;  // pre-update factors
      c.q *= (1.0 - lr * l2);
      c.q += lr * coeff * user;
      c.b = (1.0 - lr * l2) * c.b + lr * coeff;
    }
    node_id = kids[digit - 1];
  }
  if (!freeze_user)
    model.user_factors.row(u) =
        ((1.0 - lr * l2) * user + lr * d_user).transpose();
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed,
                                     int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, {kOrderTag, static_cast<std::uint64_t>(epoch)}));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

FlatModel train_flat(const ImplicitDataset& data, const TrainConfig& config,
                     std::vector<EpochLog>* trace) {
  return train_flat(init_flat(data, config.dim, config.seed), data, config,
                    trace);
}

FlatModel train_flat(FlatModel model, const ImplicitDataset& data,
                     const TrainConfig& config, std::vector<EpochLog>* trace) {
  config.validate();
  if (data.pairs.empty()) throw DataError("no training pairs");
  double lr = config.learning_rate;
  for (int step = 0; step < config.epochs; ++step) {
    const int epoch = config.epoch_offset + step;
    for (std::size_t idx : epoch_order(data.pairs.size(), config.seed, epoch)) {
      const auto& [u, i] = data.pairs[idx];
      flat_apply_pair(model, u, i, lr, config.l2);
    }
    if (!model.user_factors.allFinite() || !model.item_factors.allFinite() ||
        !model.item_bias.allFinite())
      throw DivergenceError("epoch " + std::to_string(epoch));
    if (trace) trace->push_back({epoch, flat_loglik(model, data.pairs), lr});
    lr *= config.lr_decay;
  }
  return model;
}

HierModel train_hier(HierModel model, const ImplicitDataset& data,
                     const TrainConfig& config, std::vector<EpochLog>* trace) {
  config.validate();
  if (data.pairs.empty()) throw DataError("no training pairs");
  double lr = config.learning_rate;
  for (int step = 0; step < config.epochs; ++step) {
    const int epoch = config.epoch_offset + step;
    for (std::size_t idx : epoch_order(data.pairs.size(), config.seed, epoch)) {
      const auto& [u, i] = data.pairs[idx];
      hier_apply_pair(model, u, i, lr, config.l2, config.freeze_user_factors);
    }
    if (!model.user_factors.allFinite() || !tree_params_finite(model.tree))
      throw DivergenceError("epoch " + std::to_string(epoch));
    if (trace) trace->push_back({epoch, hier_loglik(model, data.pairs), lr});
    lr *= config.lr_decay;
  }
  return model;
}

HierModel finetune(HierModel model, const ImplicitDataset& data,
                   TrainConfig config, std::vector<EpochLog>* trace) {
  config.freeze_user_factors = false;
  return train_hier(std::move(model), data, config, trace);
}

std::vector<int> topk_by_score(std::span<const int> candidates,
                               std::span<const double> scores, int k) {
  if (k < 1) throw ContractError("k must be >= 1");
  if (candidates.size() != scores.size())
    throw ContractError("candidates and scores differ in length");
  std::vector<std::size_t> order(candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return candidates[a] < candidates[b];
  });
  std::size_t keep = std::min<std::size_t>(k, candidates.size());
  std::vector<int> out(keep);
  for (std::size_t j = 0; j < keep; ++j) out[j] = candidates[order[j]];
  return out;
}

std::vector<int> topk(const FlatModel& model, int u,
                      std::span<const int> candidates, int k) {
  std::vector<double> scores(candidates.size());
  for (std::size_t j = 0; j < candidates.size(); ++j)
    scores[j] = flat_score(model, u, candidates[j]);
  return topk_by_score(candidates, scores, k);
}

std::vector<int> topk(const HierModel& model, int u,
                      std::span<const int> candidates, int k) {
  check_user(u, model.user_count());
  Eigen::VectorXd logs =
      model.tree.full_log_distribution(model.user_factors.row(u).transpose());
  std::vector<double> scores(candidates.size());
  for (std::size_t j = 0; j < candidates.size(); ++j) {
    check_item(candidates[j], model.item_count());
    scores[j] = logs[candidates[j]];
  }
  return topk_by_score(candidates, scores, k);
}

std::string serialize_flat(const FlatModel& model) {
  nlohmann::json doc;
  doc["type"] = "flat";
  doc["users"] = model.user_count();
  doc["items"] = model.item_count();
  doc["dim"] = model.dim();
  doc["u"] = encode_matrix(model.user_factors);
  doc["v"] = encode_matrix(model.item_factors);
  std::vector<double> bias(model.item_bias.data(),
                           model.item_bias.data() + model.item_bias.size());
  doc["c"] = encode_doubles(bias);
  return doc.dump();
}

FlatModel deserialize_flat(const std::string& bytes) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("model document: ") + e.what(), e.byte);
  }
  try {
    if (doc.at("type").get<std::string>() != "flat")
      throw FormatError("not a flat model document", 0);
    int users = doc.at("users").get<int>();
    int items = doc.at("items").get<int>();
    int dim = doc.at("dim").get<int>();
    FlatModel m;
    m.user_factors = decode_matrix(doc.at("u").get<std::string>(), users, dim);
    m.item_factors = decode_matrix(doc.at("v").get<std::string>(), items, dim);
    std::vector<double> bias = decode_doubles(doc.at("c").get<std::string>());
    if (bias.size() != static_cast<std::size_t>(items))
      throw FormatError("bias block has wrong size", 0);
    m.item_bias = Eigen::Map<Eigen::VectorXd>(bias.data(), items);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model document: ") + e.what(), 0);
  }
}

std::string serialize_hier(const HierModel& model) {
  nlohmann::json doc;
  doc["type"] = "hier";
  doc["users"] = model.user_count();
  doc["dim"] = model.dim();
  doc["u"] = encode_matrix(model.user_factors);
  doc["tree"] = nlohmann::json::parse(model.tree.serialize());
  return doc.dump();
}

HierModel deserialize_hier(const std::string& bytes) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("model document: ") + e.what(), e.byte);
  }
  try {
    if (doc.at("type").get<std::string>() != "hier")
      throw FormatError("not a tree model document", 0);
    int users = doc.at("users").get<int>();
    int dim = doc.at("dim").get<int>();
    HierModel m;
    m.user_factors = decode_matrix(doc.at("u").get<std::string>(), users, dim);
    m.tree = ItemTree::deserialize(doc.at("tree").dump());
    if (m.tree.dim() != dim)
      throw FormatError("tree dimension does not match user factors", 0);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model document: ") + e.what(), 0);
  }
}

}  // namespace cistree
