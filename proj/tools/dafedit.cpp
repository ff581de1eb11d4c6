// Command-line front end for the dafedit engine. All heavy lifting happens
// behind the C API in libdafedit; this binary only parses flags, merges the
// config file with overrides, and dispatches.
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dafedit.h"

namespace {

using json = nlohmann::ordered_json;

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CLI::ValidationError("--config", "cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct CommonArgs {
  std::string config_path;
  std::string out_dir = "out";
  std::optional<uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required = true) {
  auto* opt = cmd->add_option("--config", args.config_path, "JSON config file");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  cmd->add_option("--out", args.out_dir, "output directory");
  cmd->add_option("--seed", args.seed, "seed override (flags win over the config file)");
}

// Config file plus flag overrides; flags win.
std::string merged_config(const CommonArgs& args, const json& overrides = json::object()) {
  json cfg = args.config_path.empty() ? json::object() : json::parse(read_file(args.config_path));
  if (args.seed.has_value()) cfg["seed"] = *args.seed;
  if (!cfg.contains("seed")) {
    throw CLI::ValidationError("--seed", "a seed is required (config file or flag)");
  }
  for (const auto& [key, value] : overrides.items()) {
    for (const auto& [inner_key, inner_value] : value.items()) {
      cfg[key][inner_key] = inner_value;
    }
  }
  return cfg.dump();
}

int run(dafedit_status status) {
  if (status == DAFEDIT_OK) return 0;
  std::cerr << "error: " << dafedit_last_error() << "\n";
  return int(status);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dafedit: sequential knowledge editing on a toy language model"};
  app.require_subcommand(1);

  CommonArgs pretrain_args, datagen_args, train_args, eval_args;

  auto* pretrain = app.add_subcommand("pretrain", "build the KG corpus and pretrain the base LM");
  add_common(pretrain, pretrain_args);

  auto* datagen = app.add_subcommand("datagen", "generate the editing dataset and stats");
  add_common(datagen, datagen_args);

  auto* train = app.add_subcommand("train", "meta-train the editing network");
  add_common(train, train_args);

  auto* eval = app.add_subcommand("eval", "run a sequential-editing evaluation");
  add_common(eval, eval_args);
  std::string editor;
  std::optional<int> edits;
  std::vector<int> checkpoints;
  eval->add_option("--editor", editor, "editor: dafnet|ft|null");
  eval->add_option("--edits", edits, "number of sequential edits");
  eval->add_option("--checkpoints", checkpoints, "evaluation checkpoints (edit indices)")
      ->delimiter(',');

  std::string journal_path, attn_out;
  auto* export_attn = app.add_subcommand("export-attn", "rebuild attn.csv from a journal");
  export_attn->add_option("--journal", journal_path, "journal.jsonl path")
      ->required()
      ->check(CLI::ExistingFile);
  export_attn->add_option("--out", attn_out, "output CSV path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (pretrain->parsed()) {
      return run(dafedit_pretrain(merged_config(pretrain_args).c_str(),
                                  pretrain_args.out_dir.c_str()));
    }
    if (datagen->parsed()) {
      return run(dafedit_datagen(merged_config(datagen_args).c_str(),
                                 datagen_args.out_dir.c_str()));
    }
    if (train->parsed()) {
      return run(dafedit_train(merged_config(train_args).c_str(), train_args.out_dir.c_str()));
    }
    if (eval->parsed()) {
      json overrides = json::object();
      if (!editor.empty()) overrides["eval"]["editor"] = editor;
      if (edits.has_value()) overrides["eval"]["edits"] = *edits;
      if (!checkpoints.empty()) overrides["eval"]["checkpoints"] = checkpoints;
      return run(dafedit_eval(merged_config(eval_args, overrides).c_str(),
                              eval_args.out_dir.c_str()));
    }
    if (export_attn->parsed()) {
      return run(dafedit_export_attention(journal_path.c_str(), attn_out.c_str()));
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  }
  return 0;
}
