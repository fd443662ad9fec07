#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "cistree/common.hpp"
#include "cistree/dataset.hpp"

namespace cistree {

// One user's ranking problem: order `candidates` so the `relevant` subset
// comes out on top. Both lists are sorted ascending.
struct RankingTask {
  int user = -1;
  std::vector<int> candidates;
  std::vector<int> relevant;
};

struct TaskSet {
  std::vector<RankingTask> tasks;
  int skipped_users = 0;
};

// Deterministic map (user, item) -> score; higher means more preferred.
using Scorer = std::function<double(int, int)>;

struct MetricReport {
  double map = 0.0;
  double epr = 0.0;
  double p1 = 0.0, p5 = 0.0, p10 = 0.0;
  double r1 = 0.0, r5 = 0.0, r10 = 0.0;
  int users = 0;
  int skipped = 0;
};

// Explicit-label protocol: a user's candidates are their relevant test items
// plus their known not-relevant items; users missing either side are skipped
// and counted.
TaskSet build_protocol_explicit(const RelevanceLabels& labels,
                                const ImplicitDataset& test);

// All-unobserved protocol: candidates are the whole inventory minus the
// user's training items; relevant are their test items (outside training).
TaskSet build_protocol_all_unobserved(const ImplicitDataset& train,
                                      const ImplicitDataset& test);

// `relevant` must be sorted, non-empty, and a subset of `ranked`.
double average_precision(std::span<const int> ranked,
                         std::span<const int> relevant);
// Mean (rank-1)/(n-1) over relevant items; a single-candidate list scores 0.
double epr(std::span<const int> ranked, std::span<const int> relevant);
double precision_at_k(std::span<const int> ranked,
                      std::span<const int> relevant, int k);
double recall_at_k(std::span<const int> ranked, std::span<const int> relevant,
                   int k);

// Candidates by descending score, ties broken by ascending item index.
std::vector<int> rank_candidates(const Scorer& scorer, const RankingTask& task);

MetricReport evaluate(const Scorer& scorer, const TaskSet& tasks,
                      int threads = 1);

// Tab-separated report row (values in percent) and a JSON variant (raw
// fractions).
std::string metric_tsv_header();
std::string metric_tsv_row(const std::string& model,
                           const std::string& protocol,
                           const MetricReport& report);
std::string metric_json(const std::string& model, const std::string& protocol,
                        const MetricReport& report);

}  // namespace cistree
