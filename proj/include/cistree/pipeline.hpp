#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "cistree/common.hpp"
#include "cistree/dataset.hpp"

namespace cistree {

// Full experiment description. Every field has a default; a config holding
// only the ratings path is runnable end to end. Mirrors the JSON layout
// {"data": .., "model": .., "tree": .., "eval": .., "threads", "output_dir",
// "stop_after"}.
struct ExperimentConfig {
  struct Data {
    std::string ratings;  // explicit-ratings file (required by prep)
    std::string format = "ml10m_dat";
    double positive_threshold = 4.0;
    double relevant_threshold = 4.0;
    double not_relevant_below = 3.0;
    double train_fraction = 0.8;
    double valid_fraction = 0.1;
    double test_fraction = 0.1;
    std::uint64_t split_seed = 1;
  } data;

  struct Model {
    std::string kind = "cis-learned";  // cis-learned|cis-random|flat|bpr|bmf
    int dim = 25;
    double learning_rate = 0.05;
    int epochs = 10;
    double l2 = 1e-4;
    double lr_decay = 0.9;
    // Last-stage polish of an already-complete model, so it starts well
    // below learning_rate.
    double finetune_learning_rate = 0.01;
    std::uint64_t seed = 1;
    // pairwise-ranking baseline
    long long bpr_triples = -1;  // negative -> 50 x |train pairs|
    double bpr_l2 = 0.01;
    bool bpr_item_bias = true;
    long long bpr_report_every = 0;
    // weighted-factorization baseline
    double bmf_alpha = 40.0;
    double bmf_lambda = 0.1;
    int bmf_max_sweeps = 30;
    double bmf_tolerance = 1e-4;
  } model;

  struct Tree {
    int arity = 2;
    std::string init = "cluster";  // cluster | random
    int rounds = 5;
    int node_passes = 3;
    double learning_rate = 0.05;
    double lr_decay = 0.9;
    double l2 = 1e-4;
    double digit_change_exit_fraction = 1e-3;
    int max_stuck_levels = 3;
  } tree;

  struct Eval {
    bool explicit_protocol = true;
    bool all_unobserved_protocol = true;
  } eval;

  int threads = 1;
  std::string output_dir = "out";
  std::string stop_after;  // "", "stage1" or "tree"

  void validate() const;
  std::string to_json_text(int indent = 2) const;
  // Rejects unknown keys anywhere in the document.
  static ExperimentConfig from_json_text(const std::string& text);
  // Dotted-path override of one key, e.g. ("model.dim", "40"). The value is
  // parsed as JSON when possible and treated as a string otherwise.
  void apply_override(const std::string& dotted_key, const std::string& value);
  // Hash of the semantic sections (data/model/tree/eval); orchestration
  // fields (threads, output_dir, stop_after) never change artifact identity.
  std::string hash() const;
};

// The on-disk names of prep outputs inside output_dir.
struct PrepPaths {
  std::string train_pairs, valid_pairs, test_pairs;
  std::string users_map, items_map, labels, meta;
};
PrepPaths prep_paths(const ExperimentConfig& config);

struct PrepData {
  ImplicitDataset train, valid, test;
  RelevanceLabels labels;
  std::vector<std::string> user_ids, item_ids;
};

// Ingest -> threshold -> split -> label; writes the pair/map/label files and
// a meta record. Rerunning with the same data section is byte-identical.
PrepData cmd_prep(const ExperimentConfig& config,
                  std::ostream* progress = nullptr);
// Materializes an already-built dataset triple as prep artifacts, so
// synthetic pair data can enter the same pipeline.
void write_prep(const ExperimentConfig& config, const PrepData& data);
PrepData load_prep(const ExperimentConfig& config);

// Trains config.model.kind on the prep artifacts in output_dir and returns
// the final model path. Stages (stage1 -> tree -> model for the learned-tree
// variant) are written as they finish and reused on rerun when their input
// sections are unchanged; config.stop_after ends the run early.
std::string cmd_train(const ExperimentConfig& config,
                      std::ostream* progress = nullptr);

// Evaluates each model file under the enabled protocols; returns the report
// rows (first row is the header) and writes eval.tsv / eval.json.
std::vector<std::string> cmd_eval(const ExperimentConfig& config,
                                  const std::vector<std::string>& model_files,
                                  std::ostream* progress = nullptr);

struct Recommendation {
  std::string item_id;
  double score = 0.0;
  bool has_probability = false;
  double probability = 0.0;
};
// Top-k unobserved items for one user (by original id).
std::vector<Recommendation> cmd_recommend(const ExperimentConfig& config,
                                          const std::string& model_file,
                                          const std::string& user_id, int k);

// Audits prep artifacts (count/user-set consistency, split disjointness,
// label disjointness) and any given model files (parse, dimension match,
// tree structure). Throws on the first violation.
void cmd_validate(const ExperimentConfig& config,
                  const std::vector<std::string>& model_files);

}  // namespace cistree
