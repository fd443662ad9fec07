#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cistree/common.hpp"

namespace cistree {

struct RatingRecord {
  std::string user;
  std::string item;
  double rating = 0.0;  // in [0, 5]
  std::optional<std::int64_t> timestamp;
};

enum class RatingsFormat { ml10m_dat, csv };

RatingsFormat ratings_format_from_string(const std::string& name);

// Selection events over dense user/item index spaces. Immutable once built.
struct ImplicitDataset {
  int user_count = 0;
  int item_count = 0;
  std::vector<std::pair<int, int>> pairs;  // (user, item)

  // Derived, kept consistent with `pairs` by construction.
  std::vector<long long> item_occurrences;     // N_i
  std::vector<std::vector<int>> item_users;    // U_i, sorted unique
  std::vector<std::vector<int>> user_items;    // per-user items, pair order

  // Dense index <-> original id. Empty for synthetic datasets built from
  // indices directly.
  std::vector<std::string> user_ids;
  std::vector<std::string> item_ids;
  std::unordered_map<std::string, int> user_index;
  std::unordered_map<std::string, int> item_index;

  static ImplicitDataset from_pairs(int user_count, int item_count,
                                    std::vector<std::pair<int, int>> pairs);

  long long pair_count() const { return static_cast<long long>(pairs.size()); }
  // Sorted unique items of one user.
  std::vector<int> user_item_set(int user) const;
};

struct RelevanceLabels {
  // Index-aligned with the ImplicitDataset the labels were built against.
  int user_count = 0;
  int item_count = 0;
  std::vector<std::vector<int>> relevant;      // sorted unique per user
  std::vector<std::vector<int>> not_relevant;  // sorted unique per user
};

std::vector<RatingRecord> ingest_ratings(std::istream& source,
                                         RatingsFormat format);

// Keeps pairs rated >= positive_threshold, deduplicates (user, item), and
// assigns dense indices in first-appearance order.
ImplicitDataset to_implicit(const std::vector<RatingRecord>& ratings,
                            double positive_threshold);

struct SplitFractions {
  double train = 0.8;
  double valid = 0.1;
  double test = 0.1;
};

// Uniform random partition of the pair list; the three outputs share the
// parent's index spaces and id maps.
std::array<ImplicitDataset, 3> split(const ImplicitDataset& dataset,
                                     const SplitFractions& fractions,
                                     std::uint64_t seed);

// Per-user relevant (rating >= relevant_threshold) and not-relevant
// (rating < not_relevant_below) item sets, mapped into `index_space`'s dense
// indices. Ratings whose user or item is outside the implicit inventory are
// dropped. When a (user, item) pair is rated more than once the last record
// wins.
RelevanceLabels build_relevance(const std::vector<RatingRecord>& ratings,
                                double relevant_threshold,
                                double not_relevant_below,
                                const ImplicitDataset& index_space);

// Canonical interchange files: "user<TAB>item" pair rows, "index<TAB>id"
// id-map rows, "user<TAB>item<TAB>{1|0}" label rows.
void write_pairs(std::ostream& out, const ImplicitDataset& data);
std::vector<std::pair<int, int>> read_pairs(std::istream& in);
void write_id_map(std::ostream& out, const std::vector<std::string>& ids);
std::vector<std::string> read_id_map(std::istream& in);
void write_labels(std::ostream& out, const RelevanceLabels& labels);
RelevanceLabels read_labels(std::istream& in, int user_count, int item_count);

}  // namespace cistree
