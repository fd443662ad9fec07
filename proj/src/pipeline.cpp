#include "cistree/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <utility>

#include "cistree/baselines.hpp"
#include "cistree/cis_model.hpp"
#include "cistree/eval.hpp"
#include "cistree/item_tree.hpp"
#include "cistree/treelearn.hpp"

namespace cistree {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

// Sub-seed tags. Fixed forever: artifacts written by old runs must stay
// reproducible.
constexpr std::uint64_t kStartTreeSeedTag = 0x57a7;   // random starting tree
constexpr std::uint64_t kTreeLearnSeedTag = 0x7ea5;   // tree construction
constexpr std::uint64_t kFinetuneSeedTag = 0xf1e7;    // final-stage pair order

std::string join_key(const std::string& section, const std::string& key) {
  return section.empty() ? key : section + "." + key;
}

void reject_unknown(const json& obj, const std::string& section,
                    std::initializer_list<const char*> allowed) {
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* name : allowed)
      if (item.key() == name) {
        known = true;
        break;
      }
    if (!known)
      throw ConfigError("unknown config key '" + join_key(section, item.key()) +
                        "'");
  }
}

template <typename T>
void take(const json& obj, const std::string& section, const char* key,
          T& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("config key '" + join_key(section, key) +
                      "' has the wrong type");
  }
}

json data_to_json(const ExperimentConfig::Data& d) {
  return json{{"ratings", d.ratings},
              {"format", d.format},
              {"positive_threshold", d.positive_threshold},
              {"relevant_threshold", d.relevant_threshold},
              {"not_relevant_below", d.not_relevant_below},
              {"train_fraction", d.train_fraction},
              {"valid_fraction", d.valid_fraction},
              {"test_fraction", d.test_fraction},
              {"split_seed", d.split_seed}};
}

json model_to_json(const ExperimentConfig::Model& m) {
  return json{{"kind", m.kind},
              {"dim", m.dim},
              {"learning_rate", m.learning_rate},
              {"epochs", m.epochs},
              {"l2", m.l2},
              {"lr_decay", m.lr_decay},
              {"finetune_learning_rate", m.finetune_learning_rate},
              {"seed", m.seed},
              {"bpr_triples", m.bpr_triples},
              {"bpr_l2", m.bpr_l2},
              {"bpr_item_bias", m.bpr_item_bias},
              {"bpr_report_every", m.bpr_report_every},
              {"bmf_alpha", m.bmf_alpha},
              {"bmf_lambda", m.bmf_lambda},
              {"bmf_max_sweeps", m.bmf_max_sweeps},
              {"bmf_tolerance", m.bmf_tolerance}};
}

json tree_to_json(const ExperimentConfig::Tree& t) {
  return json{{"arity", t.arity},
              {"init", t.init},
              {"rounds", t.rounds},
              {"node_passes", t.node_passes},
              {"learning_rate", t.learning_rate},
              {"lr_decay", t.lr_decay},
              {"l2", t.l2},
              {"digit_change_exit_fraction", t.digit_change_exit_fraction},
              {"max_stuck_levels", t.max_stuck_levels}};
}

json eval_to_json(const ExperimentConfig::Eval& e) {
  return json{{"explicit_protocol", e.explicit_protocol},
              {"all_unobserved_protocol", e.all_unobserved_protocol}};
}

json config_to_json(const ExperimentConfig& c) {
  return json{{"data", data_to_json(c.data)},
              {"model", model_to_json(c.model)},
              {"tree", tree_to_json(c.tree)},
              {"eval", eval_to_json(c.eval)},
              {"threads", c.threads},
              {"output_dir", c.output_dir},
              {"stop_after", c.stop_after}};
}

// The model-section fields each kind actually consumes; fields outside this
// set never invalidate an artifact.
json model_identity(const ExperimentConfig& c) {
  const auto& m = c.model;
  json j{{"kind", m.kind}, {"dim", m.dim}, {"seed", m.seed}};
  if (m.kind == "flat" || m.kind == "cis-random" || m.kind == "cis-learned") {
    j["learning_rate"] = m.learning_rate;
    j["epochs"] = m.epochs;
    j["l2"] = m.l2;
    j["lr_decay"] = m.lr_decay;
  }
  if (m.kind == "cis-random") j["arity"] = c.tree.arity;
  if (m.kind == "cis-learned") {
    j["tree"] = tree_to_json(c.tree);
    j["finetune_learning_rate"] = m.finetune_learning_rate;
  }
  if (m.kind == "bpr") {
    j["learning_rate"] = m.learning_rate;
    j["triples"] = m.bpr_triples;
    j["l2"] = m.bpr_l2;
    j["item_bias"] = m.bpr_item_bias;
  }
  if (m.kind == "bmf") {
    j["alpha"] = m.bmf_alpha;
    j["lambda"] = m.bmf_lambda;
    j["max_sweeps"] = m.bmf_max_sweeps;
    j["tolerance"] = m.bmf_tolerance;
  }
  return j;
}

json stage1_identity(const ExperimentConfig& c) {
  const auto& m = c.model;
  return json{{"dim", m.dim},          {"learning_rate", m.learning_rate},
              {"epochs", m.epochs},    {"l2", m.l2},
              {"lr_decay", m.lr_decay}, {"seed", m.seed},
              {"arity", c.tree.arity}};
}

// What an artifact's bytes depend on; reruns reuse an artifact exactly when
// this hash is unchanged.
std::string stage_inputs_hash(const ExperimentConfig& c,
                              const std::string& stage) {
  json j{{"stage", stage}, {"data", data_to_json(c.data)}};
  if (stage == "stage1") {
    j["model"] = stage1_identity(c);
  } else if (stage == "tree") {
    j["model"] = stage1_identity(c);
    j["tree"] = tree_to_json(c.tree);
  } else if (stage == "model") {
    j["model"] = model_identity(c);
  }
  return fnv1a_hex(j.dump());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

void write_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw DataError("cannot write '" + path.string() + "'");
}

void write_resolved_config(const ExperimentConfig& config) {
  fs::create_directories(config.output_dir);
  write_file(fs::path(config.output_dir) / "config.resolved.json",
             config.to_json_text(2) + "\n");
}

// Serialized model/tree document plus the bookkeeping keys; deserializers
// read only the keys they know, so the extras ride along harmlessly.
void write_artifact(const fs::path& path, const std::string& serialized,
                    const ExperimentConfig& config, const std::string& stage) {
  json doc = json::parse(serialized);
  doc["stage"] = stage;
  doc["config_hash"] = config.hash();
  doc["inputs_hash"] = stage_inputs_hash(config, stage);
  write_file(path, doc.dump() + "\n");
}

bool artifact_current(const fs::path& path, const std::string& inputs_hash,
                      std::string* bytes_out) {
  if (!fs::exists(path)) return false;
  std::string bytes = read_file(path);
  json doc = json::parse(bytes, nullptr, false);
  if (doc.is_discarded() || !doc.is_object()) return false;
  if (doc.value("inputs_hash", std::string()) != inputs_hash) return false;
  *bytes_out = bytes;
  return true;
}

void emit(std::ostream* progress, const json& event) {
  if (progress) (*progress) << event.dump() << '\n';
}

void stage_event(std::ostream* progress, const std::string& stage,
                 const std::string& status, const fs::path& path) {
  emit(progress, json{{"event", "stage"},
                      {"stage", stage},
                      {"status", status},
                      {"path", path.string()}});
}

TrainConfig core_train_config(const ExperimentConfig& c) {
  TrainConfig t;
  t.dim = c.model.dim;
  t.learning_rate = c.model.learning_rate;
  t.epochs = c.model.epochs;
  t.l2 = c.model.l2;
  t.lr_decay = c.model.lr_decay;
  t.seed = c.model.seed;
  return t;
}

BPRConfig bpr_config(const ExperimentConfig& c) {
  BPRConfig b;
  b.dim = c.model.dim;
  b.learning_rate = c.model.learning_rate;
  b.l2 = c.model.bpr_l2;
  b.triples = c.model.bpr_triples;
  b.item_bias = c.model.bpr_item_bias;
  b.report_every = c.model.bpr_report_every;
  b.seed = c.model.seed;
  return b;
}

BMFConfig bmf_config(const ExperimentConfig& c) {
  BMFConfig b;
  b.dim = c.model.dim;
  b.alpha = c.model.bmf_alpha;
  b.lambda = c.model.bmf_lambda;
  b.max_sweeps = c.model.bmf_max_sweeps;
  b.tolerance = c.model.bmf_tolerance;
  b.threads = c.threads;
  b.seed = c.model.seed;
  return b;
}

TreeLearnConfig treelearn_config(const ExperimentConfig& c) {
  TreeLearnConfig t;
  t.arity = c.tree.arity;
  if (c.tree.init == "cluster")
    t.init = TreeLearnConfig::Init::cluster;
  else if (c.tree.init == "random")
    t.init = TreeLearnConfig::Init::random;
  else
    throw ConfigError("tree.init must be 'cluster' or 'random'");
  t.rounds = c.tree.rounds;
  t.node_passes = c.tree.node_passes;
  t.learning_rate = c.tree.learning_rate;
  t.lr_decay = c.tree.lr_decay;
  t.l2 = c.tree.l2;
  t.digit_change_exit_fraction = c.tree.digit_change_exit_fraction;
  t.seed = derive_seed(c.model.seed, {kTreeLearnSeedTag});
  t.threads = c.threads;
  t.max_stuck_levels = c.tree.max_stuck_levels;
  return t;
}

// Attaches the original-id maps a split shares with its parent dataset.
void attach_ids(ImplicitDataset& data, const std::vector<std::string>& users,
                const std::vector<std::string>& items) {
  if (static_cast<int>(users.size()) == data.user_count) {
    data.user_ids = users;
    data.user_index.clear();
    for (int u = 0; u < data.user_count; ++u) data.user_index[users[u]] = u;
  }
  if (static_cast<int>(items.size()) == data.item_count) {
    data.item_ids = items;
    data.item_index.clear();
    for (int i = 0; i < data.item_count; ++i) data.item_index[items[i]] = i;
  }
}

// Reuse the prepared dataset already in output_dir when its data section is
// unchanged; otherwise run the preparation from the ratings file.
PrepData obtain_prep(const ExperimentConfig& config, std::ostream* progress) {
  PrepPaths paths = prep_paths(config);
  std::string want = stage_inputs_hash(config, "prep");
  if (fs::exists(paths.meta)) {
    json meta = json::parse(read_file(paths.meta), nullptr, false);
    if (!meta.is_discarded() && meta.is_object() &&
        meta.value("inputs_hash", std::string()) == want) {
      stage_event(progress, "prep", "reused", paths.meta);
      return load_prep(config);
    }
  }
  return cmd_prep(config, progress);
}

// One trained model behind a uniform scoring interface.
struct LoadedModel {
  std::string type;
  std::shared_ptr<FlatModel> flat;
  std::shared_ptr<HierModel> hier;
  std::shared_ptr<BPRModel> bpr;
  std::shared_ptr<BMFModel> bmf;

  int user_count() const {
    if (flat) return flat->user_count();
    if (hier) return hier->user_count();
    if (bpr) return static_cast<int>(bpr->user_factors.rows());
    return static_cast<int>(bmf->user_factors.rows());
  }
  int item_count() const {
    if (flat) return flat->item_count();
    if (hier) return hier->item_count();
    if (bpr) return static_cast<int>(bpr->item_factors.rows());
    return static_cast<int>(bmf->item_factors.rows());
  }
  Scorer scorer() const {
    if (flat) {
      auto m = flat;
      return [m](int u, int i) { return flat_score(*m, u, i); };
    }
    if (hier) {
      auto m = hier;
      return [m](int u, int i) { return hier_log_prob(*m, u, i); };
    }
    if (bpr) {
      auto m = bpr;
      return [m](int u, int i) { return bpr_score(*m, u, i); };
    }
    auto m = bmf;
    return [m](int u, int i) { return bmf_score(*m, u, i); };
  }
};

LoadedModel load_model_file(const std::string& path) {
  std::string bytes = read_file(path);
  json doc = json::parse(bytes, nullptr, false);
  if (doc.is_discarded() || !doc.is_object() || !doc.contains("type") ||
      !doc["type"].is_string())
    throw FormatError("'" + path + "' is not a model file", 0);
  LoadedModel out;
  out.type = doc["type"].get<std::string>();
  if (out.type == "flat")
    out.flat = std::make_shared<FlatModel>(deserialize_flat(bytes));
  else if (out.type == "hier")
    out.hier = std::make_shared<HierModel>(deserialize_hier(bytes));
  else if (out.type == "bpr")
    out.bpr = std::make_shared<BPRModel>(deserialize_bpr(bytes));
  else if (out.type == "bmf")
    out.bmf = std::make_shared<BMFModel>(deserialize_bmf(bytes));
  else
    throw FormatError("'" + path + "' holds unknown model type '" + out.type +
                          "'",
                      0);
  return out;
}

void check_model_shape(const LoadedModel& model, const std::string& path,
                       int users, int items) {
  if (model.user_count() != users || model.item_count() != items)
    throw ConfigError("model '" + path + "' covers " +
                      std::to_string(model.user_count()) + " users and " +
                      std::to_string(model.item_count()) +
                      " items but the prepared dataset has " +
                      std::to_string(users) + " and " + std::to_string(items));
}

std::string model_label(const std::string& file) {
  return fs::path(file).stem().string();
}

}  // namespace

void ExperimentConfig::validate() const {
  ratings_format_from_string(data.format);
  if (data.not_relevant_below > data.relevant_threshold)
    throw ConfigError(
        "data.not_relevant_below must not exceed data.relevant_threshold");
  const double fractions[] = {data.train_fraction, data.valid_fraction,
                              data.test_fraction};
  for (double f : fractions)
    if (!(f >= 0.0) || f > 1.0)
      throw ConfigError("data split fractions must lie in [0, 1]");
  if (!(data.train_fraction > 0.0))
    throw ConfigError("data.train_fraction must be positive");
  if (std::abs(data.train_fraction + data.valid_fraction +
               data.test_fraction - 1.0) > 1e-9)
    throw ConfigError("data split fractions must sum to 1");

  if (model.kind != "cis-learned" && model.kind != "cis-random" &&
      model.kind != "flat" && model.kind != "bpr" && model.kind != "bmf")
    throw ConfigError("unknown model.kind '" + model.kind + "'");
  core_train_config(*this).validate();
  if (!(model.finetune_learning_rate > 0.0))
    throw ConfigError("model.finetune_learning_rate must be positive");
  if (model.kind == "bpr") bpr_config(*this).validate();
  if (model.kind == "bmf") bmf_config(*this).validate();
  treelearn_config(*this).validate();

  if (threads < 1) throw ConfigError("threads must be positive");
  if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
  if (!stop_after.empty() && stop_after != "stage1" && stop_after != "tree")
    throw ConfigError("stop_after must be '', 'stage1' or 'tree'");
  if (!stop_after.empty() && model.kind != "cis-learned")
    throw ConfigError("stop_after applies only to model.kind cis-learned");
}

std::string ExperimentConfig::to_json_text(int indent) const {
  return config_to_json(*this).dump(indent);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config root must be a JSON object");
  reject_unknown(doc, "", {"data", "model", "tree", "eval", "threads",
                           "output_dir", "stop_after"});
  ExperimentConfig cfg;
  if (auto it = doc.find("data"); it != doc.end()) {
    if (!it->is_object())
      throw ConfigError("config key 'data' has the wrong type");
    reject_unknown(*it, "data",
                   {"ratings", "format", "positive_threshold",
                    "relevant_threshold", "not_relevant_below",
                    "train_fraction", "valid_fraction", "test_fraction",
                    "split_seed"});
    take(*it, "data", "ratings", cfg.data.ratings);
    take(*it, "data", "format", cfg.data.format);
    take(*it, "data", "positive_threshold", cfg.data.positive_threshold);
    take(*it, "data", "relevant_threshold", cfg.data.relevant_threshold);
    take(*it, "data", "not_relevant_below", cfg.data.not_relevant_below);
    take(*it, "data", "train_fraction", cfg.data.train_fraction);
    take(*it, "data", "valid_fraction", cfg.data.valid_fraction);
    take(*it, "data", "test_fraction", cfg.data.test_fraction);
    take(*it, "data", "split_seed", cfg.data.split_seed);
  }
  if (auto it = doc.find("model"); it != doc.end()) {
    if (!it->is_object())
      throw ConfigError("config key 'model' has the wrong type");
    reject_unknown(*it, "model",
                   {"kind", "dim", "learning_rate", "epochs", "l2", "lr_decay",
                    "finetune_learning_rate", "seed", "bpr_triples",
                    "bpr_l2", "bpr_item_bias",
                    "bpr_report_every", "bmf_alpha", "bmf_lambda",
                    "bmf_max_sweeps", "bmf_tolerance"});
    take(*it, "model", "kind", cfg.model.kind);
    take(*it, "model", "dim", cfg.model.dim);
    take(*it, "model", "learning_rate", cfg.model.learning_rate);
    take(*it, "model", "epochs", cfg.model.epochs);
    take(*it, "model", "l2", cfg.model.l2);
    take(*it, "model", "lr_decay", cfg.model.lr_decay);
    take(*it, "model", "finetune_learning_rate",
         cfg.model.finetune_learning_rate);
    take(*it, "model", "seed", cfg.model.seed);
    take(*it, "model", "bpr_triples", cfg.model.bpr_triples);
    take(*it, "model", "bpr_l2", cfg.model.bpr_l2);
    take(*it, "model", "bpr_item_bias", cfg.model.bpr_item_bias);
    take(*it, "model", "bpr_report_every", cfg.model.bpr_report_every);
    take(*it, "model", "bmf_alpha", cfg.model.bmf_alpha);
    take(*it, "model", "bmf_lambda", cfg.model.bmf_lambda);
    take(*it, "model", "bmf_max_sweeps", cfg.model.bmf_max_sweeps);
    take(*it, "model", "bmf_tolerance", cfg.model.bmf_tolerance);
  }
  if (auto it = doc.find("tree"); it != doc.end()) {
    if (!it->is_object())
      throw ConfigError("config key 'tree' has the wrong type");
    reject_unknown(*it, "tree",
                   {"arity", "init", "rounds", "node_passes", "learning_rate",
                    "lr_decay", "l2", "digit_change_exit_fraction",
                    "max_stuck_levels"});
    take(*it, "tree", "arity", cfg.tree.arity);
    take(*it, "tree", "init", cfg.tree.init);
    take(*it, "tree", "rounds", cfg.tree.rounds);
    take(*it, "tree", "node_passes", cfg.tree.node_passes);
    take(*it, "tree", "learning_rate", cfg.tree.learning_rate);
    take(*it, "tree", "lr_decay", cfg.tree.lr_decay);
    take(*it, "tree", "l2", cfg.tree.l2);
    take(*it, "tree", "digit_change_exit_fraction",
         cfg.tree.digit_change_exit_fraction);
    take(*it, "tree", "max_stuck_levels", cfg.tree.max_stuck_levels);
  }
  if (auto it = doc.find("eval"); it != doc.end()) {
    if (!it->is_object())
      throw ConfigError("config key 'eval' has the wrong type");
    reject_unknown(*it, "eval",
                   {"explicit_protocol", "all_unobserved_protocol"});
    take(*it, "eval", "explicit_protocol", cfg.eval.explicit_protocol);
    take(*it, "eval", "all_unobserved_protocol",
         cfg.eval.all_unobserved_protocol);
  }
  take(doc, "", "threads", cfg.threads);
  take(doc, "", "output_dir", cfg.output_dir);
  take(doc, "", "stop_after", cfg.stop_after);
  return cfg;
}

void ExperimentConfig::apply_override(const std::string& dotted_key,
                                      const std::string& value) {
  json doc = config_to_json(*this);
  std::vector<std::string> parts;
  std::string part;
  std::istringstream keys(dotted_key);
  while (std::getline(keys, part, '.')) parts.push_back(part);
  if (parts.empty()) throw ConfigError("empty override key");
  json* cur = &doc;
  for (std::size_t p = 0; p + 1 < parts.size(); ++p) {
    if (!cur->is_object() || !cur->contains(parts[p]))
      throw ConfigError("unknown config key '" + dotted_key + "'");
    cur = &(*cur)[parts[p]];
  }
  if (!cur->is_object() || !cur->contains(parts.back()))
    throw ConfigError("unknown config key '" + dotted_key + "'");
  json& slot = (*cur)[parts.back()];
  if (slot.is_string()) {
    slot = value;  // string fields take the raw text
  } else {
    json parsed = json::parse(value, nullptr, false);
    slot = parsed.is_discarded() ? json(value) : parsed;
  }
  *this = from_json_text(doc.dump());  // re-checks every type
}

std::string ExperimentConfig::hash() const {
  json j{{"data", data_to_json(data)},
         {"model", model_to_json(model)},
         {"tree", tree_to_json(tree)},
         {"eval", eval_to_json(eval)}};
  return fnv1a_hex(j.dump());
}

PrepPaths prep_paths(const ExperimentConfig& config) {
  fs::path dir = config.output_dir;
  PrepPaths p;
  p.train_pairs = (dir / "train.pairs").string();
  p.valid_pairs = (dir / "valid.pairs").string();
  p.test_pairs = (dir / "test.pairs").string();
  p.users_map = (dir / "users.map").string();
  p.items_map = (dir / "items.map").string();
  p.labels = (dir / "labels.tsv").string();
  p.meta = (dir / "prep.json").string();
  return p;
}

PrepData cmd_prep(const ExperimentConfig& config, std::ostream* progress) {
  config.validate();
  if (config.data.ratings.empty())
    throw ConfigError("data.ratings is required to prepare a dataset");
  std::ifstream in(config.data.ratings, std::ios::binary);
  if (!in)
    throw DataError("cannot open ratings file '" + config.data.ratings + "'");
  std::vector<RatingRecord> records =
      ingest_ratings(in, ratings_format_from_string(config.data.format));
  ImplicitDataset full =
      to_implicit(records, config.data.positive_threshold);
  SplitFractions fractions{config.data.train_fraction,
                           config.data.valid_fraction,
                           config.data.test_fraction};
  std::array<ImplicitDataset, 3> parts =
      split(full, fractions, config.data.split_seed);
  PrepData out;
  out.labels = build_relevance(records, config.data.relevant_threshold,
                               config.data.not_relevant_below, full);
  out.user_ids = full.user_ids;
  out.item_ids = full.item_ids;
  out.train = std::move(parts[0]);
  out.valid = std::move(parts[1]);
  out.test = std::move(parts[2]);
  write_prep(config, out);
  emit(progress, json{{"event", "prep"},
                      {"users", out.train.user_count},
                      {"items", out.train.item_count},
                      {"train_pairs", out.train.pair_count()},
                      {"valid_pairs", out.valid.pair_count()},
                      {"test_pairs", out.test.pair_count()}});
  return out;
}

void write_prep(const ExperimentConfig& config, const PrepData& data) {
  write_resolved_config(config);
  PrepPaths paths = prep_paths(config);
  std::ostringstream buf;
  write_pairs(buf, data.train);
  write_file(paths.train_pairs, buf.str());
  buf.str("");
  write_pairs(buf, data.valid);
  write_file(paths.valid_pairs, buf.str());
  buf.str("");
  write_pairs(buf, data.test);
  write_file(paths.test_pairs, buf.str());
  buf.str("");
  write_id_map(buf, data.user_ids);
  write_file(paths.users_map, buf.str());
  buf.str("");
  write_id_map(buf, data.item_ids);
  write_file(paths.items_map, buf.str());
  buf.str("");
  write_labels(buf, data.labels);
  write_file(paths.labels, buf.str());
  json meta{{"stage", "prep"},
            {"config_hash", config.hash()},
            {"inputs_hash", stage_inputs_hash(config, "prep")},
            {"users", data.train.user_count},
            {"items", data.train.item_count},
            {"train_pairs", data.train.pair_count()},
            {"valid_pairs", data.valid.pair_count()},
            {"test_pairs", data.test.pair_count()}};
  write_file(paths.meta, meta.dump() + "\n");
}

PrepData load_prep(const ExperimentConfig& config) {
  PrepPaths paths = prep_paths(config);
  if (!fs::exists(paths.meta))
    throw DataError("no prepared dataset in '" + config.output_dir +
                    "'; run prep first");
  json meta = json::parse(read_file(paths.meta), nullptr, false);
  if (meta.is_discarded() || !meta.is_object() || !meta.contains("users") ||
      !meta.contains("items"))
    throw FormatError("'" + paths.meta + "' is not a preparation record", 0);
  const int users = meta["users"].get<int>();
  const int items = meta["items"].get<int>();
  PrepData out;
  auto load_split = [&](const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path + "'");
    return ImplicitDataset::from_pairs(users, items, read_pairs(in));
  };
  out.train = load_split(paths.train_pairs);
  out.valid = load_split(paths.valid_pairs);
  out.test = load_split(paths.test_pairs);
  {
    std::ifstream in(paths.users_map, std::ios::binary);
    if (!in) throw DataError("cannot open '" + paths.users_map + "'");
    out.user_ids = read_id_map(in);
  }
  {
    std::ifstream in(paths.items_map, std::ios::binary);
    if (!in) throw DataError("cannot open '" + paths.items_map + "'");
    out.item_ids = read_id_map(in);
  }
  {
    std::ifstream in(paths.labels, std::ios::binary);
    if (!in) throw DataError("cannot open '" + paths.labels + "'");
    out.labels = read_labels(in, users, items);
  }
  attach_ids(out.train, out.user_ids, out.item_ids);
  attach_ids(out.valid, out.user_ids, out.item_ids);
  attach_ids(out.test, out.user_ids, out.item_ids);
  return out;
}

std::string cmd_train(const ExperimentConfig& config, std::ostream* progress) {
  config.validate();
  write_resolved_config(config);
  PrepData prep = obtain_prep(config, progress);
  if (prep.train.pairs.empty()) throw DataError("training split is empty");

  const fs::path dir = config.output_dir;
  const auto& mc = config.model;

  // Per-epoch validation ranking built once; every trained stage reports
  // against the same task set.
  std::optional<TaskSet> val_tasks;
  if (prep.valid.pair_count() > 0)
    val_tasks = build_protocol_all_unobserved(prep.train, prep.valid);
  auto epoch_event = [&](const char* stage, int epoch, double lr,
                         double loglik, const Scorer& scorer) {
    if (!progress) return;
    json ev{{"event", "epoch"},
            {"stage", stage},
            {"epoch", epoch},
            {"learning_rate", lr},
            {"train_loglik", loglik}};
    if (val_tasks && !val_tasks->tasks.empty())
      ev["val_map"] = evaluate(scorer, *val_tasks, config.threads).map;
    emit(progress, ev);
  };

  const fs::path model_path = dir / "model.json";
  const std::string model_hash = stage_inputs_hash(config, "model");
  std::string bytes;

  if (mc.kind == "flat") {
    if (artifact_current(model_path, model_hash, &bytes)) {
      stage_event(progress, "model", "reused", model_path);
      return model_path.string();
    }
    FlatModel m = init_flat(prep.train, mc.dim, mc.seed);
    TrainConfig step = core_train_config(config);
    step.epochs = 1;
    for (int epoch = 0; epoch < mc.epochs; ++epoch) {
      step.epoch_offset = epoch;
      std::vector<EpochLog> log;
      m = train_flat(std::move(m), prep.train, step, &log);
      epoch_event("model", epoch, step.learning_rate, log.back().loglik,
                  [&m](int u, int i) { return flat_score(m, u, i); });
      step.learning_rate *= mc.lr_decay;
    }
    write_artifact(model_path, serialize_flat(m), config, "model");
    stage_event(progress, "model", "trained", model_path);
    return model_path.string();
  }

  if (mc.kind == "bpr") {
    if (artifact_current(model_path, model_hash, &bytes)) {
      stage_event(progress, "model", "reused", model_path);
      return model_path.string();
    }
    BPRModel m = train_bpr(prep.train, bpr_config(config), progress,
                           prep.valid.pair_count() > 0 ? &prep.valid : nullptr);
    write_artifact(model_path, serialize_bpr(m), config, "model");
    stage_event(progress, "model", "trained", model_path);
    return model_path.string();
  }

  if (mc.kind == "bmf") {
    if (artifact_current(model_path, model_hash, &bytes)) {
      stage_event(progress, "model", "reused", model_path);
      return model_path.string();
    }
    BMFModel m = train_bmf(prep.train, bmf_config(config), progress);
    write_artifact(model_path, serialize_bmf(m), config, "model");
    stage_event(progress, "model", "trained", model_path);
    return model_path.string();
  }

  if (mc.kind == "cis-random") {
    if (artifact_current(model_path, model_hash, &bytes)) {
      stage_event(progress, "model", "reused", model_path);
      return model_path.string();
    }
    ItemTree start =
        random_balanced(prep.train.item_count, config.tree.arity, mc.dim,
                        derive_seed(mc.seed, {kStartTreeSeedTag}));
    HierModel m = init_hier(prep.train, std::move(start), mc.seed);
    TrainConfig step = core_train_config(config);
    step.epochs = 1;
    for (int epoch = 0; epoch < mc.epochs; ++epoch) {
      step.epoch_offset = epoch;
      std::vector<EpochLog> log;
      m = train_hier(std::move(m), prep.train, step, &log);
      epoch_event("model", epoch, step.learning_rate, log.back().loglik,
                  [&m](int u, int i) { return hier_log_prob(m, u, i); });
      step.learning_rate *= mc.lr_decay;
    }
    write_artifact(model_path, serialize_hier(m), config, "model");
    stage_event(progress, "model", "trained", model_path);
    return model_path.string();
  }

  // cis-learned: random-tree stage to fix user factors, then the tree build,
  // then finetuning over the learned tree.
  const fs::path stage1_path = dir / "stage1.model.json";
  const std::string stage1_hash = stage_inputs_hash(config, "stage1");
  HierModel stage1;
  if (artifact_current(stage1_path, stage1_hash, &bytes)) {
    stage1 = deserialize_hier(bytes);
    stage_event(progress, "stage1", "reused", stage1_path);
  } else {
    ItemTree start =
        random_balanced(prep.train.item_count, config.tree.arity, mc.dim,
                        derive_seed(mc.seed, {kStartTreeSeedTag}));
    stage1 = init_hier(prep.train, std::move(start), mc.seed);
    TrainConfig step = core_train_config(config);
    step.epochs = 1;
    for (int epoch = 0; epoch < mc.epochs; ++epoch) {
      step.epoch_offset = epoch;
      std::vector<EpochLog> log;
      stage1 = train_hier(std::move(stage1), prep.train, step, &log);
      epoch_event("stage1", epoch, step.learning_rate, log.back().loglik,
                  [&stage1](int u, int i) {
                    return hier_log_prob(stage1, u, i);
                  });
      step.learning_rate *= mc.lr_decay;
    }
    write_artifact(stage1_path, serialize_hier(stage1), config, "stage1");
    stage_event(progress, "stage1", "trained", stage1_path);
  }
  if (config.stop_after == "stage1") return stage1_path.string();

  const fs::path tree_path = dir / "tree.json";
  const std::string tree_hash = stage_inputs_hash(config, "tree");
  ItemTree learned(config.tree.arity, mc.dim);
  if (artifact_current(tree_path, tree_hash, &bytes)) {
    learned = ItemTree::deserialize(bytes);
    stage_event(progress, "tree", "reused", tree_path);
  } else {
    learned = learn_tree(prep.train, stage1.user_factors,
                         treelearn_config(config), progress,
                         prep.valid.pair_count() > 0 ? &prep.valid : nullptr);
    write_artifact(tree_path, learned.serialize(), config, "tree");
    stage_event(progress, "tree", "trained", tree_path);
  }
  if (config.stop_after == "tree") return tree_path.string();

  if (artifact_current(model_path, model_hash, &bytes)) {
    stage_event(progress, "model", "reused", model_path);
    return model_path.string();
  }
  HierModel final_model{stage1.user_factors, std::move(learned)};
  TrainConfig step = core_train_config(config);
  step.epochs = 1;
  step.learning_rate = mc.finetune_learning_rate;
  step.seed = derive_seed(mc.seed, {kFinetuneSeedTag});
  for (int epoch = 0; epoch < mc.epochs; ++epoch) {
    step.epoch_offset = epoch;
    std::vector<EpochLog> log;
    final_model = finetune(std::move(final_model), prep.train, step, &log);
    epoch_event("finetune", epoch, step.learning_rate, log.back().loglik,
                [&final_model](int u, int i) {
                  return hier_log_prob(final_model, u, i);
                });
    step.learning_rate *= mc.lr_decay;
  }
  write_artifact(model_path, serialize_hier(final_model), config, "model");
  stage_event(progress, "model", "trained", model_path);
  return model_path.string();
}

std::vector<std::string> cmd_eval(const ExperimentConfig& config,
                                  const std::vector<std::string>& model_files,
                                  std::ostream* progress) {
  config.validate();
  if (!config.eval.explicit_protocol && !config.eval.all_unobserved_protocol)
    throw ConfigError("no evaluation protocol enabled");
  if (model_files.empty()) throw ConfigError("no model files given");
  write_resolved_config(config);
  PrepData prep = obtain_prep(config, progress);
  if (prep.test.pairs.empty()) throw DataError("test split is empty");

  std::vector<std::pair<std::string, TaskSet>> protocols;
  if (config.eval.explicit_protocol)
    protocols.emplace_back("explicit",
                           build_protocol_explicit(prep.labels, prep.test));
  if (config.eval.all_unobserved_protocol)
    protocols.emplace_back(
        "all-unobserved",
        build_protocol_all_unobserved(prep.train, prep.test));

  std::vector<std::string> rows{metric_tsv_header()};
  json reports = json::array();
  for (const std::string& file : model_files) {
    LoadedModel model = load_model_file(file);
    check_model_shape(model, file, prep.train.user_count,
                      prep.train.item_count);
    Scorer scorer = model.scorer();
    for (const auto& [name, tasks] : protocols) {
      MetricReport report = evaluate(scorer, tasks, config.threads);
      rows.push_back(metric_tsv_row(model_label(file), name, report));
      reports.push_back(json::parse(metric_json(model_label(file), name,
                                                report)));
      emit(progress, json{{"event", "eval"},
                          {"model", model_label(file)},
                          {"protocol", name},
                          {"map", report.map},
                          {"users", report.users}});
    }
  }
  std::ostringstream tsv;
  tsv << "# config_hash " << config.hash() << "\n";
  for (const std::string& row : rows) tsv << row << "\n";
  const fs::path dir = config.output_dir;
  write_file(dir / "eval.tsv", tsv.str());
  write_file(dir / "eval.json", reports.dump(2) + "\n");
  return rows;
}

std::vector<Recommendation> cmd_recommend(const ExperimentConfig& config,
                                          const std::string& model_file,
                                          const std::string& user_id, int k) {
  config.validate();
  if (k < 1) throw ConfigError("k must be >= 1");
  PrepData prep = load_prep(config);
  LoadedModel model = load_model_file(model_file);
  check_model_shape(model, model_file, prep.train.user_count,
                    prep.train.item_count);

  int user = -1;
  for (std::size_t u = 0; u < prep.user_ids.size(); ++u)
    if (prep.user_ids[u] == user_id) {
      user = static_cast<int>(u);
      break;
    }
  if (user < 0) throw LookupError("unknown user id '" + user_id + "'");

  const std::vector<int> seen = prep.train.user_item_set(user);
  std::vector<int> candidates;
  candidates.reserve(prep.train.item_count);
  for (int i = 0; i < prep.train.item_count; ++i)
    if (!std::binary_search(seen.begin(), seen.end(), i))
      candidates.push_back(i);
  if (candidates.empty())
    throw DataError("user '" + user_id + "' has no unobserved items");

  Scorer scorer = model.scorer();
  std::vector<double> scores(candidates.size());
  for (std::size_t c = 0; c < candidates.size(); ++c)
    scores[c] = scorer(user, candidates[c]);
  std::vector<int> picked = topk_by_score(candidates, scores, k);

  std::vector<Recommendation> out;
  out.reserve(picked.size());
  for (int item : picked) {
    Recommendation rec;
    rec.item_id = static_cast<std::size_t>(item) < prep.item_ids.size()
                      ? prep.item_ids[item]
                      : std::to_string(item);
    rec.score = scorer(user, item);
    if (model.flat) {
      rec.has_probability = true;
      rec.probability = flat_prob(*model.flat, user, item);
    } else if (model.hier) {
      rec.has_probability = true;
      rec.probability = hier_prob(*model.hier, user, item);
    }
    out.push_back(std::move(rec));
  }
  return out;
}

void cmd_validate(const ExperimentConfig& config,
                  const std::vector<std::string>& model_files) {
  config.validate();
  PrepData prep = load_prep(config);

  const std::pair<const char*, const ImplicitDataset*> splits[] = {
      {"train", &prep.train}, {"valid", &prep.valid}, {"test", &prep.test}};
  for (const auto& [name, data] : splits) {
    long long total = 0;
    for (long long n : data->item_occurrences) total += n;
    if (total != data->pair_count())
      throw DataError(std::string("split '") + name +
                      "': item occurrence counts do not add up to the pair "
                      "count");
    std::vector<std::vector<int>> users(data->item_count);
    std::vector<std::vector<int>> items(data->user_count);
    for (const auto& [u, i] : data->pairs) {
      users[i].push_back(u);
      items[u].push_back(i);
    }
    for (auto& list : users) {
      std::sort(list.begin(), list.end());
      list.erase(std::unique(list.begin(), list.end()), list.end());
    }
    if (users != data->item_users)
      throw DataError(std::string("split '") + name +
                      "': per-item user sets do not match the pair list");
    if (items != data->user_items)
      throw DataError(std::string("split '") + name +
                      "': per-user item lists do not match the pair list");
  }

  std::set<std::pair<int, int>> seen(prep.train.pairs.begin(),
                                     prep.train.pairs.end());
  for (const auto& [name, data] : {std::pair("valid", &prep.valid),
                                   std::pair("test", &prep.test)}) {
    for (const auto& pair : data->pairs)
      if (!seen.insert(pair).second)
        throw DataError(std::string("split '") + name +
                        "' repeats pair (user " +
                        std::to_string(pair.first) + ", item " +
                        std::to_string(pair.second) +
                        ") from an earlier split");
  }

  if (prep.labels.user_count != prep.train.user_count ||
      prep.labels.item_count != prep.train.item_count)
    throw DataError("relevance labels cover a different inventory than the "
                    "splits");
  for (int u = 0; u < prep.labels.user_count; ++u) {
    const auto& rel = prep.labels.relevant[u];
    const auto& notrel = prep.labels.not_relevant[u];
    std::vector<int> both;
    std::set_intersection(rel.begin(), rel.end(), notrel.begin(),
                          notrel.end(), std::back_inserter(both));
    if (!both.empty())
      throw DataError("user " + std::to_string(u) + " has item " +
                      std::to_string(both.front()) +
                      " labeled both relevant and not relevant");
  }

  if (!prep.user_ids.empty() &&
      static_cast<int>(prep.user_ids.size()) != prep.train.user_count)
    throw DataError("user id map does not match the user count");
  if (!prep.item_ids.empty() &&
      static_cast<int>(prep.item_ids.size()) != prep.train.item_count)
    throw DataError("item id map does not match the item count");

  for (const std::string& file : model_files) {
    LoadedModel model = load_model_file(file);
    check_model_shape(model, file, prep.train.user_count,
                      prep.train.item_count);
    if (model.hier) model.hier->tree.validate();
  }
}

}  // namespace cistree
