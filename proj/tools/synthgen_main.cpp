#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <string>

#include "cistree/common.hpp"
#include "cistree/dataset.hpp"
#include "cistree/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"synthetic explicit-ratings corpus generator"};
  cistree::RatingsCorpusConfig cfg;
  std::string format = "csv";
  std::string out_path;
  app.add_option("--users", cfg.users, "number of users");
  app.add_option("--items", cfg.items, "inventory size");
  app.add_option("--groups", cfg.groups, "taste groups");
  app.add_option("--subgroups", cfg.subgroups, "subgroups per group");
  app.add_option("--min-ratings", cfg.min_ratings, "fewest ratings per user");
  app.add_option("--max-ratings", cfg.max_ratings, "most ratings per user");
  app.add_option("--zipf", cfg.zipf_exponent, "popularity skew exponent");
  app.add_option("--seed", cfg.seed, "generator seed");
  app.add_option("--format", format, "output format (csv or ml10m_dat)");
  app.add_option("--out", out_path, "output ratings file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const cistree::RatingsFormat fmt =
        cistree::ratings_format_from_string(format);
    const cistree::RatingsCorpus corpus = cistree::make_ratings_corpus(cfg);
    std::ofstream out(out_path, std::ios::binary | std::ios::trunc);
    if (!out) throw cistree::DataError("cannot write '" + out_path + "'");
    cistree::write_ratings(out, corpus.ratings, fmt);
    std::cerr << "wrote " << corpus.ratings.size() << " ratings for "
              << cfg.users << " users over " << cfg.items << " items to "
              << out_path << "\n";
    return 0;
  } catch (const cistree::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const cistree::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
