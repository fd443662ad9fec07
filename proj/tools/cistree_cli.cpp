#include "cistree_cli.hpp"

#include <CLI11.hpp>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cistree/common.hpp"
#include "cistree/pipeline.hpp"

namespace {

using cistree::ExperimentConfig;

// Defaults, then the config file, then --section.key=value overrides.
ExperimentConfig resolve_config(const std::string& config_path,
                                const std::vector<std::string>& extras) {
  ExperimentConfig cfg;
  if (!config_path.empty()) {
    std::ifstream in(config_path, std::ios::binary);
    if (!in)
      throw cistree::DataError("cannot open config file '" + config_path +
                               "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    cfg = ExperimentConfig::from_json_text(buf.str());
  }
  for (const std::string& raw : extras) {
    if (raw.rfind("--", 0) != 0)
      throw cistree::ConfigError("unrecognized argument '" + raw + "'");
    const auto eq = raw.find('=');
    if (eq == std::string::npos || eq <= 2)
      throw cistree::ConfigError("cannot parse override '" + raw +
                                 "'; use --section.key=value");
    cfg.apply_override(raw.substr(2, eq - 2), raw.substr(eq + 1));
  }
  return cfg;
}

}  // namespace

int cistree_cli_main(int argc, char** argv) {
  CLI::App app{"collaborative item-selection toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::string progress_path;
  std::vector<std::string> model_files;
  std::string model_file;
  std::string user_id;
  int k = 10;

  CLI::App* prep = app.add_subcommand(
      "prep", "ingest ratings, build the implicit splits and labels");
  CLI::App* train = app.add_subcommand(
      "train", "train the configured model on the prepared splits");
  CLI::App* learn_tree = app.add_subcommand(
      "learn-tree", "run the learned-tree pipeline up to the tree artifact");
  CLI::App* eval = app.add_subcommand(
      "eval", "rank the test split under the enabled protocols");
  CLI::App* recommend =
      app.add_subcommand("recommend", "top-k unseen items for one user");
  CLI::App* validate = app.add_subcommand(
      "validate", "audit the prepared splits and model files");

  for (CLI::App* sub :
       {prep, train, learn_tree, eval, recommend, validate}) {
    sub->add_option("--config", config_path, "experiment config (JSON)");
    sub->allow_extras();  // --section.key=value config overrides
  }
  for (CLI::App* sub : {train, learn_tree})
    sub->add_option("--progress", progress_path,
                    "write progress records here instead of stdout");
  eval->add_option("models", model_files, "model files to evaluate");
  validate->add_option("models", model_files, "model files to audit");
  recommend->add_option("--model", model_file, "model file")->required();
  recommend->add_option("--user", user_id, "original user id")->required();
  recommend->add_option("--k", k, "list length");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    CLI::App* sub = app.get_subcommands().front();
    ExperimentConfig cfg = resolve_config(config_path, sub->remaining());
    if (sub == learn_tree) cfg.stop_after = "tree";

    std::ofstream progress_file;
    std::ostream* progress = &std::cout;
    if (!progress_path.empty()) {
      progress_file.open(progress_path, std::ios::binary | std::ios::trunc);
      if (!progress_file)
        throw cistree::DataError("cannot write '" + progress_path + "'");
      progress = &progress_file;
    }

    if (sub == prep) {
      cistree::PrepData data = cistree::cmd_prep(cfg, progress);
      std::cerr << "prepared " << data.train.user_count << " users, "
                << data.train.item_count << " items (" << data.train.pair_count()
                << "/" << data.valid.pair_count() << "/"
                << data.test.pair_count() << " train/valid/test pairs) in "
                << cfg.output_dir << "\n";
    } else if (sub == train || sub == learn_tree) {
      const std::string path = cistree::cmd_train(cfg, progress);
      std::cerr << "wrote " << path << "\n";
    } else if (sub == eval) {
      const std::vector<std::string> rows =
          cistree::cmd_eval(cfg, model_files, nullptr);
      for (const std::string& row : rows) std::cout << row << "\n";
      std::cerr << "wrote " << cfg.output_dir << "/eval.tsv\n";
    } else if (sub == recommend) {
      const std::vector<cistree::Recommendation> recs =
          cistree::cmd_recommend(cfg, model_file, user_id, k);
      for (const cistree::Recommendation& rec : recs) {
        std::cout << rec.item_id << "\t" << rec.score;
        if (rec.has_probability) std::cout << "\t" << rec.probability;
        std::cout << "\n";
      }
    } else if (sub == validate) {
      cistree::cmd_validate(cfg, model_files);
      std::cout << "ok\n";
    }
    return 0;
  } catch (const cistree::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const cistree::DivergenceError& e) {
    std::cerr << "training diverged: " << e.what() << "\n";
    return 4;
  } catch (const cistree::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
