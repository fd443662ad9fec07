#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

#include "cistree/common.hpp"
#include "cistree/dataset.hpp"

namespace cistree {

// Two user populations with disjoint preferred item blocks. Selections are
// i.i.d. draws (with replacement) from the user's group distribution;
// valid_draws of them, chosen uniformly, are held out per user.
struct PlantedPartitionConfig {
  int group_items = 8;
  int group_users = 60;
  int train_draws = 10;
  int valid_draws = 2;
  double own_share = 1.0;  // probability mass on the user's own block
  std::uint64_t seed = 1;
  void validate() const;
};

struct PlantedPartition {
  ImplicitDataset train;
  ImplicitDataset valid;
  std::vector<int> item_group;  // item index -> 0 or 1
  std::vector<int> user_group;  // user index -> 0 or 1
};

PlantedPartition make_planted_partition(const PlantedPartitionConfig& config);

// Explicit-ratings corpus shaped like the public movie-ratings sets:
// Zipf-popular items, nested taste groups (group -> subgroup), exposure
// biased toward popular and own-taste items, and 1..5 ratings whose level
// rises with taste match and item popularity.
struct RatingsCorpusConfig {
  int users = 500;
  int items = 800;
  int groups = 8;
  int subgroups = 4;  // per group
  double zipf_exponent = 0.9;
  double exposure_taste = 0.7;  // own-taste boost to the exposure weight
  int min_ratings = 20;
  int max_ratings = 300;
  double log_count_mean = 4.1;  // ln ratings-per-user center (~60)
  double log_count_sigma = 0.5;
  double taste_lift = 1.1;         // rating lift for an own-subgroup item
  double group_lift_share = 0.55;  // fraction of the lift kept across
                                   // subgroups of the same group
  double popularity_lift = 0.45;   // rating lift per sd of log popularity
  double user_bias_sigma = 0.3;
  double item_noise_sigma = 0.3;
  double rating_noise_sigma = 0.7;
  double base_rating = 2.95;
  std::uint64_t seed = 1;
  void validate() const;
};

struct RatingsCorpus {
  std::vector<RatingRecord> ratings;  // user-major, items ascending
  std::vector<int> user_group;        // user -> top-level group
  std::vector<int> user_subgroup;     // user -> global subgroup id
  std::vector<int> item_subgroup;     // item -> global subgroup id
};

RatingsCorpus make_ratings_corpus(const RatingsCorpusConfig& config);

// Writes rating records in one of the ingestible formats.
void write_ratings(std::ostream& out, const std::vector<RatingRecord>& ratings,
                   RatingsFormat format);

}  // namespace cistree
