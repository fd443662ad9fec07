#include "cistree/baselines.hpp"

#include <json.hpp>

#include <Eigen/Cholesky>
#include <algorithm>
#include <cmath>
#include <ostream>
#include <random>
#include <vector>

#include "cistree/eval.hpp"

namespace cistree {

namespace {

constexpr std::uint64_t kBprUserTag = 0x6b11;
constexpr std::uint64_t kBprItemTag = 0x6b12;
constexpr std::uint64_t kBprTripleTag = 0x6b13;
constexpr std::uint64_t kBprProbeTag = 0x6b14;
constexpr std::uint64_t kBmfUserTag = 0x371a;
constexpr std::uint64_t kBmfItemTag = 0x371b;

Eigen::MatrixXd gaussian_matrix(int rows, int cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(0.0, 0.01);
  Eigen::MatrixXd m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = g(rng);
  return m;
}

std::string encode_matrix(const Eigen::MatrixXd& m) {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) flat.push_back(m(r, c));
  return encode_doubles(flat);
}

Eigen::MatrixXd decode_matrix(const std::string& text, int rows, int cols) {
  std::vector<double> flat = decode_doubles(text);
  if (flat.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols))
    throw FormatError("parameter block has wrong size", 0);
  Eigen::MatrixXd m(rows, cols);
  std::size_t k = 0;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = flat[k++];
  return m;
}

}  // namespace

void BPRConfig::validate() const {
  if (dim < 1) throw ConfigError("dim must be positive");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning_rate must be finite and non-negative");
  if (!(l2 >= 0.0)) throw ConfigError("l2 must be non-negative");
  if (report_every < 0) throw ConfigError("report_every must be non-negative");
}

BPRModel init_bpr(int user_count, int item_count, const BPRConfig& config) {
  config.validate();
  BPRModel model;
  model.user_factors = gaussian_matrix(user_count, config.dim,
                                       derive_seed(config.seed, {kBprUserTag}));
  model.item_factors = gaussian_matrix(item_count, config.dim,
                                       derive_seed(config.seed, {kBprItemTag}));
  model.item_bias = Eigen::VectorXd::Zero(item_count);
  return model;
}

double bpr_score(const BPRModel& model, int user, int item) {
  return model.user_factors.row(user).dot(model.item_factors.row(item)) +
         model.item_bias(item);
}

double bpr_margin(const BPRModel& model, int user, int pos, int neg) {
  return bpr_score(model, user, pos) - bpr_score(model, user, neg);
}

std::tuple<int, int, int> bpr_sample_triple(const ImplicitDataset& train,
                                            Rng& rng) {
  if (train.pairs.empty()) throw DataError("no training pairs to sample");
  std::uniform_int_distribution<std::size_t> pair_pick(0,
                                                       train.pairs.size() - 1);
  std::uniform_int_distribution<int> item_pick(0, train.item_count - 1);
  for (int attempt = 0; attempt < 100000; ++attempt) {
    int u = train.pairs[pair_pick(rng)].first;
    std::vector<int> selected = train.user_item_set(u);
    if (static_cast<int>(selected.size()) >= train.item_count)
      continue;  // user holds the whole inventory; resample
    std::uniform_int_distribution<std::size_t> sel_pick(0,
                                                        selected.size() - 1);
    int i = selected[sel_pick(rng)];
    for (;;) {
      int j = item_pick(rng);
      if (!std::binary_search(selected.begin(), selected.end(), j))
        return {u, i, j};
    }
  }
  throw DataError("every sampled user holds the whole inventory");
}

double bpr_step(BPRModel& model, std::tuple<int, int, int> triple,
                double learning_rate, double l2, bool update_bias) {
  auto [u, i, j] = triple;
  const double x = bpr_margin(model, u, i, j);
  const double s = 1.0 / (1.0 + std::exp(x));  // d/dx ln sigma(x)
  const double lr = learning_rate;
  Eigen::RowVectorXd user_old = model.user_factors.row(u);
  model.user_factors.row(u) +=
      lr * (s * (model.item_factors.row(i) - model.item_factors.row(j)) -
            l2 * model.user_factors.row(u));
  model.item_factors.row(i) +=
      lr * (s * user_old - l2 * model.item_factors.row(i));
  model.item_factors.row(j) +=
      lr * (-s * user_old - l2 * model.item_factors.row(j));
  if (update_bias) {
    model.item_bias(i) += lr * (s - l2 * model.item_bias(i));
    model.item_bias(j) += lr * (-s - l2 * model.item_bias(j));
  }
  if (!model.user_factors.row(u).allFinite() ||
      !model.item_factors.row(i).allFinite() ||
      !model.item_factors.row(j).allFinite() ||
      !std::isfinite(model.item_bias(i)) || !std::isfinite(model.item_bias(j)))
    throw DivergenceError("pairwise update of user " + std::to_string(u));
  return s;
}

BPRModel train_bpr(const ImplicitDataset& train, const BPRConfig& config,
                   std::ostream* progress,
                   const ImplicitDataset* validation) {
  config.validate();
  BPRModel model = init_bpr(train.user_count, train.item_count, config);
  const long long total =
      config.triples >= 0 ? config.triples : 50 * train.pair_count();
  if (total == 0) return model;

  Rng rng(derive_seed(config.seed, {kBprTripleTag}));

  // Fixed probe of held-in triples: training AUC over them tracks how well
  // selected items already outrank unselected ones.
  std::vector<std::tuple<int, int, int>> probe;
  TaskSet val_tasks;
  if (progress && config.report_every > 0) {
    Rng probe_rng(derive_seed(config.seed, {kBprProbeTag}));
    long long want = std::min<long long>(2000, 4 * train.pair_count());
    for (long long t = 0; t < want; ++t)
      probe.push_back(bpr_sample_triple(train, probe_rng));
    if (validation) val_tasks = build_protocol_all_unobserved(train, *validation);
  }
  auto emit = [&](long long done) {
    double auc = 0.0;
    for (const auto& [u, i, j] : probe) {
      double m = bpr_margin(model, u, i, j);
      auc += m > 0.0 ? 1.0 : (m == 0.0 ? 0.5 : 0.0);
    }
    nlohmann::json rec{{"event", "bpr_report"},
                       {"triples", done},
                       {"train_auc", probe.empty()
                                         ? 0.0
                                         : auc / static_cast<double>(probe.size())}};
    if (validation) {
      MetricReport report = evaluate(
          [&](int u, int i) { return bpr_score(model, u, i); }, val_tasks);
      rec["val_map"] = report.map;
    }
    *progress << rec.dump() << "\n";
  };

  for (long long t = 1; t <= total; ++t) {
    bpr_step(model, bpr_sample_triple(train, rng), config.learning_rate,
             config.l2, config.item_bias);
    if (progress && config.report_every > 0 && t % config.report_every == 0)
      emit(t);
  }
  if (progress && config.report_every > 0 && total % config.report_every != 0)
    emit(total);
  if (!model.user_factors.allFinite() || !model.item_factors.allFinite() ||
      !model.item_bias.allFinite())
    throw DivergenceError("trained pairwise model");
  return model;
}

void BMFConfig::validate() const {
  if (dim < 1) throw ConfigError("dim must be positive");
  // alpha = 0 is the unweighted special case; negative confidence is not
  // meaningful.
  if (!(alpha >= 0.0) || !std::isfinite(alpha))
    throw ConfigError("alpha must be finite and non-negative");
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw ConfigError("lambda must be finite and non-negative");
  if (max_sweeps < 1) throw ConfigError("max_sweeps must be positive");
  if (!(tolerance >= 0.0)) throw ConfigError("tolerance must be non-negative");
  if (threads < 1) throw ConfigError("threads must be positive");
}

BMFModel init_bmf(int user_count, int item_count, const BMFConfig& config) {
  config.validate();
  BMFModel model;
  model.user_factors = gaussian_matrix(user_count, config.dim,
                                       derive_seed(config.seed, {kBmfUserTag}));
  model.item_factors = gaussian_matrix(item_count, config.dim,
                                       derive_seed(config.seed, {kBmfItemTag}));
  model.alpha = config.alpha;
  model.lambda = config.lambda;
  return model;
}

double bmf_score(const BMFModel& model, int user, int item) {
  return model.user_factors.row(user).dot(model.item_factors.row(item));
}

double bmf_objective(const BMFModel& model, const ImplicitDataset& train) {
  const Eigen::MatrixXd& U = model.user_factors;
  const Eigen::MatrixXd& V = model.item_factors;
  // Background term sums (U_u . V_i)^2 over the whole dense matrix.
  double acc = (U.transpose() * U * (V.transpose() * V)).trace();
  // Observed cells: confidence rises to 1 + alpha and the target to 1.
  for (int i = 0; i < train.item_count; ++i)
    for (int u : train.item_users[static_cast<std::size_t>(i)]) {
      double p = U.row(u).dot(V.row(i));
      acc += (1.0 + model.alpha) * (1.0 - p) * (1.0 - p) - p * p;
    }
  acc += model.lambda * (U.squaredNorm() + V.squaredNorm());
  return acc;
}

namespace {

// Solves one side's blocks against the frozen other side. The normal
// equations share the Gram matrix of the frozen side; each block adds
// alpha-weighted rank-one corrections for its observed cells only.
void bmf_solve_side(Eigen::MatrixXd& solve, const Eigen::MatrixXd& frozen,
                    const std::vector<std::vector<int>>& observed,
                    double alpha, double lambda, int threads,
                    const char* side) {
  const int dim = static_cast<int>(frozen.cols());
  Eigen::MatrixXd gram = frozen.transpose() * frozen;
  gram.diagonal().array() += lambda;
  parallel_for(static_cast<std::size_t>(solve.rows()), threads,
               [&](std::size_t row) {
    const std::vector<int>& obs = observed[row];
    Eigen::MatrixXd a = gram;
    Eigen::VectorXd b = Eigen::VectorXd::Zero(dim);
    for (int other : obs) {
      a.noalias() +=
          alpha * frozen.row(other).transpose() * frozen.row(other);
      b.noalias() += (1.0 + alpha) * frozen.row(other).transpose();
    }
    Eigen::VectorXd x = a.ldlt().solve(b);
    if (!x.allFinite()) {
      // Singular normal equations (possible when lambda = 0): bump the
      // ridge once and retry.
      Eigen::MatrixXd bumped = a;
      bumped.diagonal().array() += 1e-8 * (1.0 + a.trace() / dim);
      x = bumped.ldlt().solve(b);
      if (!x.allFinite())
        throw DivergenceError("normal equations of " + std::string(side) +
                              " " + std::to_string(row));
    }
    solve.row(row) = x.transpose();
  });
}

}  // namespace

void bmf_solve_users(BMFModel& model, const ImplicitDataset& train,
                     int threads) {
  std::vector<std::vector<int>> observed(
      static_cast<std::size_t>(train.user_count));
  for (int u = 0; u < train.user_count; ++u)
    observed[static_cast<std::size_t>(u)] = train.user_item_set(u);
  bmf_solve_side(model.user_factors, model.item_factors, observed,
                 model.alpha, model.lambda, threads, "user");
}

void bmf_solve_items(BMFModel& model, const ImplicitDataset& train,
                     int threads) {
  bmf_solve_side(model.item_factors, model.user_factors, train.item_users,
                 model.alpha, model.lambda, threads, "item");
}

BMFModel train_bmf(const ImplicitDataset& train, const BMFConfig& config,
                   std::ostream* progress) {
  config.validate();
  BMFModel model = init_bmf(train.user_count, train.item_count, config);
  double previous = bmf_objective(model, train);
  auto check_monotone = [&](double before, double after, const char* phase) {
    if (after > before + 1e-9 * std::max(1.0, std::abs(before)))
      throw ContractError(std::string("objective increased after ") + phase +
                          " half-sweep");
  };
  for (int sweep = 1; sweep <= config.max_sweeps; ++sweep) {
    bmf_solve_users(model, train, config.threads);
    double after_users = bmf_objective(model, train);
    check_monotone(previous, after_users, "user");
    bmf_solve_items(model, train, config.threads);
    double after_items = bmf_objective(model, train);
    check_monotone(after_users, after_items, "item");
    if (progress) {
      nlohmann::json rec{{"event", "bmf_sweep"},
                         {"sweep", sweep},
                         {"objective_start", previous},
                         {"after_users", after_users},
                         {"after_items", after_items}};
      *progress << rec.dump() << "\n";
    }
    double change = (previous - after_items) / std::max(std::abs(previous), 1.0);
    previous = after_items;
    if (change < config.tolerance) break;
  }
  if (!model.user_factors.allFinite() || !model.item_factors.allFinite())
    throw DivergenceError("trained matrix factorization");
  return model;
}

std::string serialize_bpr(const BPRModel& model) {
  nlohmann::json doc;
  doc["type"] = "bpr";
  doc["users"] = static_cast<int>(model.user_factors.rows());
  doc["items"] = static_cast<int>(model.item_factors.rows());
  doc["dim"] = static_cast<int>(model.user_factors.cols());
  doc["u"] = encode_matrix(model.user_factors);
  doc["v"] = encode_matrix(model.item_factors);
  std::vector<double> bias(model.item_bias.data(),
                           model.item_bias.data() + model.item_bias.size());
  doc["c"] = encode_doubles(bias);
  return doc.dump();
}

BPRModel deserialize_bpr(const std::string& bytes) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("model document: ") + e.what(), e.byte);
  }
  try {
    if (doc.at("type").get<std::string>() != "bpr")
      throw FormatError("not a pairwise model document", 0);
    int users = doc.at("users").get<int>();
    int items = doc.at("items").get<int>();
    int dim = doc.at("dim").get<int>();
    BPRModel m;
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

std::string serialize_bmf(const BMFModel& model) {
  nlohmann::json doc;
  doc["type"] = "bmf";
  doc["users"] = static_cast<int>(model.user_factors.rows());
  doc["items"] = static_cast<int>(model.item_factors.rows());
  doc["dim"] = static_cast<int>(model.user_factors.cols());
  doc["alpha"] = model.alpha;
  doc["lambda"] = model.lambda;
  doc["u"] = encode_matrix(model.user_factors);
  doc["v"] = encode_matrix(model.item_factors);
  return doc.dump();
}

BMFModel deserialize_bmf(const std::string& bytes) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(bytes);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("model document: ") + e.what(), e.byte);
  }
  try {
    if (doc.at("type").get<std::string>() != "bmf")
      throw FormatError("not a factorization model document", 0);
    int users = doc.at("users").get<int>();
    int items = doc.at("items").get<int>();
    int dim = doc.at("dim").get<int>();
    BMFModel m;
    m.alpha = doc.at("alpha").get<double>();
    m.lambda = doc.at("lambda").get<double>();
    m.user_factors = decode_matrix(doc.at("u").get<std::string>(), users, dim);
    m.item_factors = decode_matrix(doc.at("v").get<std::string>(), items, dim);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model document: ") + e.what(), 0);
  }
}

}  // namespace cistree
