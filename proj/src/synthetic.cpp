#include "cistree/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <utility>

namespace cistree {

namespace {

constexpr std::uint64_t kPlantedDrawTag = 0x91a0;
constexpr std::uint64_t kPlantedHoldTag = 0x91a1;
constexpr std::uint64_t kCorpusItemTag = 0x5e7a;
constexpr std::uint64_t kCorpusUserTag = 0x5e7b;
constexpr std::uint64_t kCorpusExposeTag = 0x5e7c;
constexpr std::uint64_t kCorpusRateTag = 0x5e7d;

}  // namespace

void PlantedPartitionConfig::validate() const {
  if (group_items < 1) throw ConfigError("group_items must be positive");
  if (group_users < 1) throw ConfigError("group_users must be positive");
  if (train_draws < 1) throw ConfigError("train_draws must be positive");
  if (valid_draws < 0) throw ConfigError("valid_draws must be non-negative");
  if (!(own_share > 0.0) || own_share > 1.0)
    throw ConfigError("own_share must be in (0, 1]");
}

PlantedPartition make_planted_partition(const PlantedPartitionConfig& config) {
  config.validate();
  const int items = 2 * config.group_items;
  const int users = 2 * config.group_users;
  PlantedPartition out;
  out.item_group.resize(static_cast<std::size_t>(items));
  for (int i = 0; i < items; ++i)
    out.item_group[static_cast<std::size_t>(i)] =
        i < config.group_items ? 0 : 1;
  out.user_group.resize(static_cast<std::size_t>(users));

  std::vector<std::pair<int, int>> train_pairs, valid_pairs;
  const int total = config.train_draws + config.valid_draws;
  for (int u = 0; u < users; ++u) {
    const int group = u < config.group_users ? 0 : 1;
    out.user_group[static_cast<std::size_t>(u)] = group;
    Rng draw_rng(derive_seed(config.seed,
                             {kPlantedDrawTag, static_cast<std::uint64_t>(u)}));
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    std::uniform_int_distribution<int> in_block(0, config.group_items - 1);
    std::vector<int> draws;
    draws.reserve(static_cast<std::size_t>(total));
    for (int t = 0; t < total; ++t) {
      const bool own = coin(draw_rng) < config.own_share;
      const int block = own == (group == 0) ? 0 : config.group_items;
      draws.push_back(block + in_block(draw_rng));
    }
    // hold out uniformly chosen positions, not a fixed suffix
    std::vector<int> positions(static_cast<std::size_t>(total));
    std::iota(positions.begin(), positions.end(), 0);
    Rng hold_rng(derive_seed(config.seed,
                             {kPlantedHoldTag, static_cast<std::uint64_t>(u)}));
    std::shuffle(positions.begin(), positions.end(), hold_rng);
    std::vector<bool> held(static_cast<std::size_t>(total), false);
    for (int k = 0; k < config.valid_draws; ++k)
      held[static_cast<std::size_t>(positions[static_cast<std::size_t>(k)])] =
          true;
    for (int t = 0; t < total; ++t)
      (held[static_cast<std::size_t>(t)] ? valid_pairs : train_pairs)
          .emplace_back(u, draws[static_cast<std::size_t>(t)]);
  }
  out.train = ImplicitDataset::from_pairs(users, items, std::move(train_pairs));
  out.valid = ImplicitDataset::from_pairs(users, items, std::move(valid_pairs));
  return out;
}

void RatingsCorpusConfig::validate() const {
  if (users < 1) throw ConfigError("users must be positive");
  if (items < 1) throw ConfigError("items must be positive");
  if (groups < 1) throw ConfigError("groups must be positive");
  if (subgroups < 1) throw ConfigError("subgroups must be positive");
  if (groups * subgroups > items)
    throw ConfigError("more taste cells than items");
  if (!(zipf_exponent >= 0.0)) throw ConfigError("zipf_exponent must be >= 0");
  if (min_ratings < 1) throw ConfigError("min_ratings must be positive");
  if (max_ratings < min_ratings)
    throw ConfigError("max_ratings must be >= min_ratings");
  if (min_ratings > items)
    throw ConfigError("min_ratings cannot exceed the inventory");
  if (!(log_count_sigma >= 0.0) || !(rating_noise_sigma >= 0.0) ||
      !(user_bias_sigma >= 0.0) || !(item_noise_sigma >= 0.0))
    throw ConfigError("sigmas must be non-negative");
  if (!(group_lift_share >= 0.0) || group_lift_share > 1.0)
    throw ConfigError("group_lift_share must be in [0, 1]");
}

RatingsCorpus make_ratings_corpus(const RatingsCorpusConfig& config) {
  config.validate();
  RatingsCorpus out;
  const int cells = config.groups * config.subgroups;

  // Item side: a random popularity ranking (Zipf weights) and a taste cell.
  Rng item_rng(derive_seed(config.seed, {kCorpusItemTag}));
  std::vector<int> pop_rank(static_cast<std::size_t>(config.items));
  std::iota(pop_rank.begin(), pop_rank.end(), 1);
  std::shuffle(pop_rank.begin(), pop_rank.end(), item_rng);
  std::vector<double> popularity(static_cast<std::size_t>(config.items));
  for (int i = 0; i < config.items; ++i)
    popularity[static_cast<std::size_t>(i)] =
        std::pow(static_cast<double>(pop_rank[static_cast<std::size_t>(i)]),
                 -config.zipf_exponent);
  double log_mean = 0.0, log_sq = 0.0;
  for (double w : popularity) {
    log_mean += std::log(w);
    log_sq += std::log(w) * std::log(w);
  }
  log_mean /= config.items;
  double log_sd = std::sqrt(
      std::max(1e-12, log_sq / config.items - log_mean * log_mean));
  std::uniform_int_distribution<int> cell_pick(0, cells - 1);
  out.item_subgroup.resize(static_cast<std::size_t>(config.items));
  std::vector<double> item_quality(static_cast<std::size_t>(config.items));
  std::normal_distribution<double> item_noise(0.0, config.item_noise_sigma);
  for (int i = 0; i < config.items; ++i) {
    out.item_subgroup[static_cast<std::size_t>(i)] = cell_pick(item_rng);
    double z = (std::log(popularity[static_cast<std::size_t>(i)]) - log_mean) /
               log_sd;
    item_quality[static_cast<std::size_t>(i)] =
        config.popularity_lift * z + item_noise(item_rng);
  }

  // User side: taste cell and rating leniency.
  Rng user_rng(derive_seed(config.seed, {kCorpusUserTag}));
  std::uniform_int_distribution<int> group_pick(0, config.groups - 1);
  std::uniform_int_distribution<int> sub_pick(0, config.subgroups - 1);
  std::normal_distribution<double> leniency(0.0, config.user_bias_sigma);
  out.user_group.resize(static_cast<std::size_t>(config.users));
  out.user_subgroup.resize(static_cast<std::size_t>(config.users));
  std::vector<double> user_bias(static_cast<std::size_t>(config.users));
  for (int u = 0; u < config.users; ++u) {
    int g = group_pick(user_rng);
    out.user_group[static_cast<std::size_t>(u)] = g;
    out.user_subgroup[static_cast<std::size_t>(u)] =
        g * config.subgroups + sub_pick(user_rng);
    user_bias[static_cast<std::size_t>(u)] = leniency(user_rng);
  }

  auto match_level = [&](int u, int i) {
    int us = out.user_subgroup[static_cast<std::size_t>(u)];
    int is = out.item_subgroup[static_cast<std::size_t>(i)];
    if (us == is) return 1.0;
    if (us / config.subgroups == is / config.subgroups)
      return config.group_lift_share;
    return 0.0;
  };

  std::int64_t timestamp = 800000000;
  for (int u = 0; u < config.users; ++u) {
    Rng expose_rng(derive_seed(
        config.seed, {kCorpusExposeTag, static_cast<std::uint64_t>(u)}));
    std::normal_distribution<double> log_count(config.log_count_mean,
                                               config.log_count_sigma);
    int want = static_cast<int>(std::lround(std::exp(log_count(expose_rng))));
    want = std::clamp(want, config.min_ratings,
                      std::min(config.max_ratings, config.items));
    // weighted sample without replacement: keep the `want` smallest
    // exponential arrival times Exp(1)/weight
    std::exponential_distribution<double> arrival(1.0);
    std::vector<std::pair<double, int>> keys;
    keys.reserve(static_cast<std::size_t>(config.items));
    for (int i = 0; i < config.items; ++i) {
      double weight = popularity[static_cast<std::size_t>(i)] *
                      std::exp(config.exposure_taste * match_level(u, i));
      keys.emplace_back(arrival(expose_rng) / weight, i);
    }
    std::nth_element(keys.begin(),
                     keys.begin() + static_cast<std::ptrdiff_t>(want - 1),
                     keys.end());
    std::vector<int> chosen;
    chosen.reserve(static_cast<std::size_t>(want));
    for (int k = 0; k < want; ++k)
      chosen.push_back(keys[static_cast<std::size_t>(k)].second);
    std::sort(chosen.begin(), chosen.end());

    Rng rate_rng(derive_seed(
        config.seed, {kCorpusRateTag, static_cast<std::uint64_t>(u)}));
    std::normal_distribution<double> noise(0.0, config.rating_noise_sigma);
    for (int i : chosen) {
      double level = config.base_rating +
                     user_bias[static_cast<std::size_t>(u)] +
                     item_quality[static_cast<std::size_t>(i)] +
                     config.taste_lift * match_level(u, i) + noise(rate_rng);
      double rating =
          std::clamp(static_cast<double>(std::lround(level)), 1.0, 5.0);
      out.ratings.push_back({std::to_string(u + 1), std::to_string(i + 1),
                             rating, timestamp++});
    }
  }
  return out;
}

void write_ratings(std::ostream& out, const std::vector<RatingRecord>& ratings,
                   RatingsFormat format) {
  if (format == RatingsFormat::csv) out << "user,item,rating,timestamp\n";
  for (const auto& r : ratings) {
    // ratings are whole numbers here; print them without a fraction
    long long whole = static_cast<long long>(std::llround(r.rating));
    std::string value = std::abs(r.rating - static_cast<double>(whole)) < 1e-9
                            ? std::to_string(whole)
                            : std::to_string(r.rating);
    std::int64_t stamp = r.timestamp.value_or(0);
    if (format == RatingsFormat::ml10m_dat)
      out << r.user << "::" << r.item << "::" << value << "::" << stamp
          << "\n";
    else
      out << r.user << "," << r.item << "," << value << "," << stamp << "\n";
  }
}

}  // namespace cistree
