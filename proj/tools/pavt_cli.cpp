#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pavt/experiment.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  CLI::App app{"pose-aware video transformer lab"};
  app.require_subcommand(1);

  std::optional<uint64_t> seed;
  std::optional<std::string> out;
  bool force = false;
  int workers = 1;
  app.add_option("--seed", seed, "override the experiment seed");
  app.add_option("--out", out, "override the output directory");
  app.add_flag("--force", force, "overwrite non-empty output directories");
  app.add_option("--workers", workers, "worker threads for batches and eval");

  // generate
  auto* gen = app.add_subcommand("generate", "render a synthetic dataset");
  std::string gen_spec, gen_out;
  gen->add_option("spec", gen_spec, "generator spec JSON file")->required();
  gen->add_option("dir", gen_out, "output dataset directory")->required();

  // train
  auto* train = app.add_subcommand("train", "train a model from a config file");
  std::string train_cfg;
  train->add_option("config", train_cfg, "experiment config JSON file")->required();

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_data, eval_task = "classify", eval_split = "test";
  eval->add_option("checkpoint", eval_ckpt)->required();
  eval->add_option("dataset", eval_data)->required();
  eval->add_option("--task", eval_task, "classify or align");
  eval->add_option("--split", eval_split, "dataset split");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "feature/attention diagnostics");
  std::string an_ckpt, an_data, an_which = "all", an_split = "test";
  std::string an_distance = "euclidean";
  int an_samples = 8;
  analyze->add_option("checkpoint", an_ckpt)->required();
  analyze->add_option("dataset", an_data)->required();
  analyze->add_option("--which", an_which, "distances, attention, ffn or all");
  analyze->add_option("--split", an_split);
  analyze->add_option("--samples", an_samples, "max samples to aggregate");
  analyze->add_option("--distance", an_distance, "euclidean or cosine");

  // align
  auto* align = app.add_subcommand("align", "alignment error over paired episodes");
  std::string al_data, al_split = "test";
  std::string al_ckpt;
  bool al_oracle = false;
  align->add_option("dataset", al_data)->required();
  align->add_option("--checkpoint", al_ckpt, "model checkpoint");
  align->add_flag("--oracle-keypoints", al_oracle,
                  "use ground-truth keypoint embeddings instead of a model");
  align->add_option("--split", al_split);

  // retrieve
  auto* retrieve = app.add_subcommand("retrieve", "nearest-neighbor recall@k");
  std::string re_ckpt, re_data, re_gallery = "train", re_query = "test";
  std::vector<int> re_ks = {1, 5, 10};
  retrieve->add_option("checkpoint", re_ckpt)->required();
  retrieve->add_option("dataset", re_data)->required();
  retrieve->add_option("--gallery", re_gallery, "gallery split");
  retrieve->add_option("--queries", re_query, "query split");
  retrieve->add_option("--k", re_ks, "k values");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      pavt::cmd_generate(gen_spec, gen_out, force, seed, std::cout);
    } else if (*train) {
      std::optional<fs::path> out_dir;
      if (out) out_dir = fs::path(*out);
      pavt::cmd_train(train_cfg, out_dir, seed,
                      workers > 0 ? std::optional<int>(workers) : std::nullopt,
                      std::cout);
    } else if (*eval) {
      auto table =
          pavt::cmd_eval(eval_ckpt, eval_data, eval_task, eval_split, workers,
                         std::cout);
      if (out) {
        fs::create_directories(*out);
        std::ofstream(fs::path(*out) / "eval.json") << table.to_json() << "\n";
        std::ofstream(fs::path(*out) / "eval.csv") << table.to_csv();
      }
    } else if (*analyze) {
      std::optional<fs::path> out_dir;
      if (out) out_dir = fs::path(*out);
      pavt::cmd_analyze(an_ckpt, an_data, an_which, an_split, an_samples,
                        pavt::distance_kind_from_string(an_distance), out_dir,
                        std::cout);
    } else if (*align) {
      std::optional<fs::path> ckpt;
      if (!al_ckpt.empty()) ckpt = fs::path(al_ckpt);
      pavt::cmd_align(ckpt, al_data, al_split, al_oracle, workers, std::cout);
    } else if (*retrieve) {
      auto table = pavt::cmd_retrieve(re_ckpt, re_data, re_gallery, re_query, re_ks,
                                      workers, std::cout);
      if (out) {
        fs::create_directories(*out);
        std::ofstream(fs::path(*out) / "retrieval.json") << table.to_json() << "\n";
        std::ofstream(fs::path(*out) / "retrieval.csv") << table.to_csv();
      }
    }
  } catch (const pavt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const pavt::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const pavt::NumericError& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
