#include "cistree/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

namespace cistree {

namespace {

bool contains(std::span<const int> sorted, int value) {
  return std::binary_search(sorted.begin(), sorted.end(), value);
}

void check_task_inputs(std::span<const int> ranked,
                       std::span<const int> relevant) {
  if (relevant.empty()) throw ContractError("relevant set is empty");
  if (!std::is_sorted(relevant.begin(), relevant.end()))
    throw ContractError("relevant set must be sorted");
  for (int item : relevant)
    if (std::find(ranked.begin(), ranked.end(), item) == ranked.end())
      throw ContractError("relevant item " + std::to_string(item) +
                          " missing from the ranked list");
}

}  // namespace

TaskSet build_protocol_explicit(const RelevanceLabels& labels,
                                const ImplicitDataset& test) {
  if (labels.user_count != test.user_count ||
      labels.item_count != test.item_count)
    throw ContractError("labels and test split use different index spaces");
  TaskSet out;
  for (int u = 0; u < test.user_count; ++u) {
    std::vector<int> test_items = test.user_item_set(u);
    if (test_items.empty()) continue;  // not a test user
    RankingTask task;
    task.user = u;
    // Relevant candidates: the user's test-split items that carry a
    // relevant label.
    std::set_intersection(test_items.begin(), test_items.end(),
                          labels.relevant[u].begin(),
                          labels.relevant[u].end(),
                          std::back_inserter(task.relevant));
    const auto& not_rel = labels.not_relevant[u];
    if (task.relevant.empty() || not_rel.empty()) {
      ++out.skipped_users;
      continue;
    }
    std::set_union(task.relevant.begin(), task.relevant.end(),
                   not_rel.begin(), not_rel.end(),
                   std::back_inserter(task.candidates));
    out.tasks.push_back(std::move(task));
  }
  return out;
}

TaskSet build_protocol_all_unobserved(const ImplicitDataset& train,
                                      const ImplicitDataset& test) {
  if (train.user_count != test.user_count ||
      train.item_count != test.item_count)
    throw ContractError("train and test splits use different index spaces");
  TaskSet out;
  for (int u = 0; u < test.user_count; ++u) {
    std::vector<int> test_items = test.user_item_set(u);
    if (test_items.empty()) continue;
    std::vector<int> train_items = train.user_item_set(u);
    RankingTask task;
    task.user = u;
    std::set_difference(test_items.begin(), test_items.end(),
                        train_items.begin(), train_items.end(),
                        std::back_inserter(task.relevant));
    if (task.relevant.empty()) {
      ++out.skipped_users;
      continue;
    }
    task.candidates.reserve(test.item_count - train_items.size());
    auto next_train = train_items.begin();
    for (int i = 0; i < test.item_count; ++i) {
      while (next_train != train_items.end() && *next_train < i) ++next_train;
      if (next_train != train_items.end() && *next_train == i) continue;
      task.candidates.push_back(i);
    }
    out.tasks.push_back(std::move(task));
  }
  return out;
}

double average_precision(std::span<const int> ranked,
                         std::span<const int> relevant) {
  check_task_inputs(ranked, relevant);
  double hits = 0.0, sum = 0.0;
  for (std::size_t pos = 0; pos < ranked.size(); ++pos) {
    if (!contains(relevant, ranked[pos])) continue;
    hits += 1.0;
    sum += hits / static_cast<double>(pos + 1);
  }
  return sum / hits;
}

double epr(std::span<const int> ranked, std::span<const int> relevant) {
  check_task_inputs(ranked, relevant);
  if (ranked.size() < 2) return 0.0;
  double sum = 0.0, count = 0.0;
  for (std::size_t pos = 0; pos < ranked.size(); ++pos) {
    if (!contains(relevant, ranked[pos])) continue;
    sum += static_cast<double>(pos) / static_cast<double>(ranked.size() - 1);
    count += 1.0;
  }
  return sum / count;
}

double precision_at_k(std::span<const int> ranked,
                      std::span<const int> relevant, int k) {
  if (k < 1) throw ContractError("k must be >= 1");
  check_task_inputs(ranked, relevant);
  int depth = std::min<int>(k, static_cast<int>(ranked.size()));
  int hits = 0;
  for (int pos = 0; pos < depth; ++pos)
    hits += contains(relevant, ranked[pos]) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(depth);
}

double recall_at_k(std::span<const int> ranked, std::span<const int> relevant,
                   int k) {
  if (k < 1) throw ContractError("k must be >= 1");
  check_task_inputs(ranked, relevant);
  int depth = std::min<int>(k, static_cast<int>(ranked.size()));
  int hits = 0;
  for (int pos = 0; pos < depth; ++pos)
    hits += contains(relevant, ranked[pos]) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

std::vector<int> rank_candidates(const Scorer& scorer,
                                 const RankingTask& task) {
  std::vector<double> scores(task.candidates.size());
  for (std::size_t j = 0; j < task.candidates.size(); ++j) {
    scores[j] = scorer(task.user, task.candidates[j]);
    if (!std::isfinite(scores[j]))
      throw DivergenceError("score of user " + std::to_string(task.user) +
                            ", item " + std::to_string(task.candidates[j]));
  }
  std::vector<std::size_t> order(task.candidates.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return task.candidates[a] < task.candidates[b];
  });
  std::vector<int> ranked(task.candidates.size());
  for (std::size_t j = 0; j < order.size(); ++j)
    ranked[j] = task.candidates[order[j]];
  return ranked;
}

MetricReport evaluate(const Scorer& scorer, const TaskSet& tasks,
                      int threads) {
  MetricReport report;
  report.users = static_cast<int>(tasks.tasks.size());
  report.skipped = tasks.skipped_users;
  if (tasks.tasks.empty()) return report;

  struct Row {
    double ap, epr, p1, p5, p10, r1, r5, r10;
  };
  std::vector<Row> rows(tasks.tasks.size());
  parallel_for(tasks.tasks.size(), threads, [&](std::size_t t) {
    const RankingTask& task = tasks.tasks[t];
    std::vector<int> ranked = rank_candidates(scorer, task);
    rows[t] = {average_precision(ranked, task.relevant),
               epr(ranked, task.relevant),
               precision_at_k(ranked, task.relevant, 1),
               precision_at_k(ranked, task.relevant, 5),
               precision_at_k(ranked, task.relevant, 10),
               recall_at_k(ranked, task.relevant, 1),
               recall_at_k(ranked, task.relevant, 5),
               recall_at_k(ranked, task.relevant, 10)};
  });
  for (const Row& r : rows) {
    report.map += r.ap;
    report.epr += r.epr;
    report.p1 += r.p1;
    report.p5 += r.p5;
    report.p10 += r.p10;
    report.r1 += r.r1;
    report.r5 += r.r5;
    report.r10 += r.r10;
  }
  double n = static_cast<double>(rows.size());
  report.map /= n;
  report.epr /= n;
  report.p1 /= n;
  report.p5 /= n;
  report.p10 /= n;
  report.r1 /= n;
  report.r5 /= n;
  report.r10 /= n;
  return report;
}

namespace {
std::string pct(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", fraction * 100.0);
  return buf;
}
}  // namespace

std::string metric_tsv_header() {
  return "model\tprotocol\tMAP\tEPR\tP@1\tP@5\tP@10\tR@1\tR@5\tR@10\tusers\t"
         "skipped";
}

std::string metric_tsv_row(const std::string& model,
                           const std::string& protocol,
                           const MetricReport& r) {
  std::string row = model + '\t' + protocol;
  for (double v : {r.map, r.epr, r.p1, r.p5, r.p10, r.r1, r.r5, r.r10})
    row += '\t' + pct(v);
  row += '\t' + std::to_string(r.users) + '\t' + std::to_string(r.skipped);
  return row;
}

std::string metric_json(const std::string& model, const std::string& protocol,
                        const MetricReport& r) {
  nlohmann::json doc{{"model", model},    {"protocol", protocol},
                     {"map", r.map},      {"epr", r.epr},
                     {"p1", r.p1},        {"p5", r.p5},
                     {"p10", r.p10},      {"r1", r.r1},
                     {"r5", r.r5},        {"r10", r.r10},
                     {"users", r.users},  {"skipped", r.skipped}};
  return doc.dump();
}

}  // namespace cistree
