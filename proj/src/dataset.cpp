#include "cistree/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <charconv>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <span>
#include <string_view>

namespace cistree {

namespace {

bool parse_double(std::string_view s, double& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

bool parse_i64(std::string_view s, std::int64_t& out) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}

std::vector<std::string_view> split_fields(std::string_view line,
                                           std::string_view sep) {
  std::vector<std::string_view> fields;
  std::size_t pos = 0;
  while (true) {
    std::size_t next = line.find(sep, pos);
    if (next == std::string_view::npos) {
      fields.push_back(line.substr(pos));
      break;
    }
    fields.push_back(line.substr(pos, next - pos));
    pos = next + sep.size();
  }
  return fields;
}

RatingRecord parse_row(std::span<const std::string_view> fields,
                       std::size_t line_no) {
  if (fields.size() < 3 || fields.size() > 4)
    throw ParseError("expected 3 or 4 fields, got " +
                         std::to_string(fields.size()),
                     line_no);
  RatingRecord rec;
  rec.user = std::string(fields[0]);
  rec.item = std::string(fields[1]);
  if (rec.user.empty() || rec.item.empty())
    throw ParseError("empty user or item id", line_no);
  if (!parse_double(fields[2], rec.rating))
    throw ParseError("bad rating '" + std::string(fields[2]) + "'", line_no);
  if (rec.rating < 0.0 || rec.rating > 5.0)
    throw ParseError("rating outside [0,5]", line_no);
  if (fields.size() == 4 && !fields[3].empty()) {
    std::int64_t ts;
    if (!parse_i64(fields[3], ts))
      throw ParseError("bad timestamp '" + std::string(fields[3]) + "'",
                       line_no);
    rec.timestamp = ts;
  }
  return rec;
}

}  // namespace

RatingsFormat ratings_format_from_string(const std::string& name) {
  if (name == "ml10m_dat") return RatingsFormat::ml10m_dat;
  if (name == "csv") return RatingsFormat::csv;
  throw ConfigError("unknown ratings format '" + name + "'");
}

std::vector<RatingRecord> ingest_ratings(std::istream& source,
                                         RatingsFormat format) {
  std::vector<RatingRecord> records;
  std::string line;
  std::size_t line_no = 0;
  const std::string_view sep = format == RatingsFormat::ml10m_dat ? "::" : ",";
  while (std::getline(source, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto fields = split_fields(line, sep);
    if (format == RatingsFormat::csv && line_no == 1 && fields.size() >= 3) {
      // Header row: a non-numeric rating field in position 3.
      double probe;
      if (!parse_double(fields[2], probe)) continue;
    }
    records.push_back(parse_row(fields, line_no));
  }
  return records;
}

ImplicitDataset ImplicitDataset::from_pairs(
    int user_count, int item_count, std::vector<std::pair<int, int>> pairs) {
  ImplicitDataset d;
  d.user_count = user_count;
  d.item_count = item_count;
  d.pairs = std::move(pairs);
  d.item_occurrences.assign(item_count, 0);
  d.item_users.assign(item_count, {});
  d.user_items.assign(user_count, {});
  for (const auto& [u, i] : d.pairs) {
    if (u < 0 || u >= user_count || i < 0 || i >= item_count)
      throw DataError("pair index out of range: (" + std::to_string(u) + ", " +
                      std::to_string(i) + ")");
    d.item_occurrences[i] += 1;
    d.item_users[i].push_back(u);
    d.user_items[u].push_back(i);
  }
  for (auto& users : d.item_users) {
    std::sort(users.begin(), users.end());
    users.erase(std::unique(users.begin(), users.end()), users.end());
  }
  return d;
}

std::vector<int> ImplicitDataset::user_item_set(int user) const {
  if (user < 0 || user >= user_count)
    throw LookupError("unknown user index " + std::to_string(user));
  std::vector<int> items = user_items[user];
  std::sort(items.begin(), items.end());
  items.erase(std::unique(items.begin(), items.end()), items.end());
  return items;
}

ImplicitDataset to_implicit(const std::vector<RatingRecord>& ratings,
                            double positive_threshold) {
  if (!(positive_threshold > 0.0) || positive_threshold > 5.0)
    throw ConfigError("positive_threshold must be in (0,5]");
  ImplicitDataset d;
  std::set<std::pair<int, int>> seen;
  for (const auto& rec : ratings) {
    if (rec.rating < positive_threshold) continue;
    auto [uit, unew] =
        d.user_index.try_emplace(rec.user, static_cast<int>(d.user_ids.size()));
    if (unew) d.user_ids.push_back(rec.user);
    auto [iit, inew] =
        d.item_index.try_emplace(rec.item, static_cast<int>(d.item_ids.size()));
    if (inew) d.item_ids.push_back(rec.item);
    if (seen.insert({uit->second, iit->second}).second)
      d.pairs.emplace_back(uit->second, iit->second);
  }
  auto built = ImplicitDataset::from_pairs(static_cast<int>(d.user_ids.size()),
                                           static_cast<int>(d.item_ids.size()),
                                           std::move(d.pairs));
  built.user_ids = std::move(d.user_ids);
  built.item_ids = std::move(d.item_ids);
  built.user_index = std::move(d.user_index);
  built.item_index = std::move(d.item_index);
  return built;
}

std::array<ImplicitDataset, 3> split(const ImplicitDataset& dataset,
                                     const SplitFractions& fractions,
                                     std::uint64_t seed) {
  const double fs[3] = {fractions.train, fractions.valid, fractions.test};
  double sum = fs[0] + fs[1] + fs[2];
  for (double f : fs)
    if (!(f > 0.0)) throw ConfigError("split fractions must be positive");
  if (std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");

  const std::size_t n = dataset.pairs.size();
  // Largest-remainder apportionment so sizes are exact for clean fractions.
  std::size_t sizes[3];
  double rem[3];
  std::size_t assigned = 0;
  for (int k = 0; k < 3; ++k) {
    double exact = fs[k] * static_cast<double>(n);
    sizes[k] = static_cast<std::size_t>(std::floor(exact + 1e-12));
    rem[k] = exact - static_cast<double>(sizes[k]);
    assigned += sizes[k];
  }
  while (assigned < n) {
    int best = 0;
    for (int k = 1; k < 3; ++k)
      if (rem[k] > rem[best]) best = k;
    ++sizes[best];
    rem[best] = -1.0;
    ++assigned;
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, {0x5011u}));
  std::shuffle(order.begin(), order.end(), rng);

  std::array<ImplicitDataset, 3> out;
  std::size_t cursor = 0;
  for (int k = 0; k < 3; ++k) {
    std::vector<std::pair<int, int>> part;
    part.reserve(sizes[k]);
    for (std::size_t j = 0; j < sizes[k]; ++j)
      part.push_back(dataset.pairs[order[cursor++]]);
    out[k] = ImplicitDataset::from_pairs(dataset.user_count,
                                         dataset.item_count, std::move(part));
    out[k].user_ids = dataset.user_ids;
    out[k].item_ids = dataset.item_ids;
    out[k].user_index = dataset.user_index;
    out[k].item_index = dataset.item_index;
  }
  return out;
}

RelevanceLabels build_relevance(const std::vector<RatingRecord>& ratings,
                                double relevant_threshold,
                                double not_relevant_below,
                                const ImplicitDataset& index_space) {
  if (not_relevant_below > relevant_threshold)
    throw ConfigError("not_relevant_below must be <= relevant_threshold");
  RelevanceLabels labels;
  labels.user_count = index_space.user_count;
  labels.item_count = index_space.item_count;
  labels.relevant.assign(labels.user_count, {});
  labels.not_relevant.assign(labels.user_count, {});

  // Last rating per (user, item) wins.
  std::unordered_map<long long, double> last;
  std::vector<std::pair<int, int>> order;
  for (const auto& rec : ratings) {
    auto uit = index_space.user_index.find(rec.user);
    auto iit = index_space.item_index.find(rec.item);
    if (uit == index_space.user_index.end() ||
        iit == index_space.item_index.end())
      continue;
    long long key = static_cast<long long>(uit->second) *
                        index_space.item_count +
                    iit->second;
    if (last.find(key) == last.end()) order.emplace_back(uit->second, iit->second);
    last[key] = rec.rating;
  }
  for (const auto& [u, i] : order) {
    double r = last[static_cast<long long>(u) * index_space.item_count + i];
    if (r >= relevant_threshold)
      labels.relevant[u].push_back(i);
    else if (r < not_relevant_below)
      labels.not_relevant[u].push_back(i);
  }
  for (auto& v : labels.relevant) std::sort(v.begin(), v.end());
  for (auto& v : labels.not_relevant) std::sort(v.begin(), v.end());
  return labels;
}

void write_pairs(std::ostream& out, const ImplicitDataset& data) {
  for (const auto& [u, i] : data.pairs) out << u << '\t' << i << '\n';
}

std::vector<std::pair<int, int>> read_pairs(std::istream& in) {
  std::vector<std::pair<int, int>> pairs;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split_fields(line, "\t");
    std::int64_t u, i;
    if (fields.size() != 2 || !parse_i64(fields[0], u) ||
        !parse_i64(fields[1], i))
      throw ParseError("bad pair row", line_no);
    pairs.emplace_back(static_cast<int>(u), static_cast<int>(i));
  }
  return pairs;
}

void write_id_map(std::ostream& out, const std::vector<std::string>& ids) {
  for (std::size_t idx = 0; idx < ids.size(); ++idx)
    out << idx << '\t' << ids[idx] << '\n';
}

std::vector<std::string> read_id_map(std::istream& in) {
  std::vector<std::string> ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto tab = line.find('\t');
    std::int64_t idx;
    if (tab == std::string::npos || !parse_i64({line.data(), tab}, idx) ||
        idx != static_cast<std::int64_t>(ids.size()))
      throw ParseError("bad id-map row", line_no);
    ids.push_back(line.substr(tab + 1));
  }
  return ids;
}

void write_labels(std::ostream& out, const RelevanceLabels& labels) {
  for (int u = 0; u < labels.user_count; ++u) {
    for (int i : labels.relevant[u]) out << u << '\t' << i << "\t1\n";
    for (int i : labels.not_relevant[u]) out << u << '\t' << i << "\t0\n";
  }
}

RelevanceLabels read_labels(std::istream& in, int user_count, int item_count) {
  RelevanceLabels labels;
  labels.user_count = user_count;
  labels.item_count = item_count;
  labels.relevant.assign(user_count, {});
  labels.not_relevant.assign(user_count, {});
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto fields = split_fields(line, "\t");
    std::int64_t u, i, flag;
    if (fields.size() != 3 || !parse_i64(fields[0], u) ||
        !parse_i64(fields[1], i) || !parse_i64(fields[2], flag) ||
        u < 0 || u >= user_count || i < 0 || i >= item_count ||
        (flag != 0 && flag != 1))
      throw ParseError("bad label row", line_no);
    (flag ? labels.relevant : labels.not_relevant)[static_cast<int>(u)]
        .push_back(static_cast<int>(i));
  }
  for (auto& v : labels.relevant) std::sort(v.begin(), v.end());
  for (auto& v : labels.not_relevant) std::sort(v.begin(), v.end());
  return labels;
}

}  // namespace cistree
