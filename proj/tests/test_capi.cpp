#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>

#include <json.hpp>

#include "dafedit.h"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

// Miniature end-to-end configuration: small enough for seconds-scale tests.
std::string mini_config(uint64_t seed) {
  json cfg = {
      {"seed", seed},
      {"lm",
       {{"d_model", 24}, {"n_layers", 3}, {"n_heads", 2}, {"d_ff", 32}, {"max_seq_len", 24},
        {"edit_layer_count", 3}}},
      {"datagen",
       {{"n_entities", 60},
        {"n_relations", 16},
        {"count_recent", 8},
        {"count_popular", 8},
        {"count_long_tail", 8},
        {"count_robust", 4},
        {"count_eval", 12}}},
      {"pretrain",
       {{"lr", 3e-3}, {"batch", 16}, {"max_iters", 350}, {"target_acc", 0.9}, {"check_every", 50}}},
      {"dafnet",
       {{"k_layers", 2}, {"d_down", 12}, {"d_attn", 12}, {"n_heads", 2}, {"init_std", 0.02}}},
      {"train",
       {{"t_max", 2},
        {"i_inc", 8},
        {"i_max", 25},
        {"post_tmax_iters", 6},
        {"checkpoint_interval", 10},
        {"lr", 2e-3}}},
      {"eval",
       {{"editor", "null"}, {"edits", 6}, {"checkpoints", {3, 6}}, {"ft_steps", 10},
        {"ft_lr", 1e-2}}},
  };
  return cfg.dump();
}

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  REQUIRE(is);
  return std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

struct TempDir {
  std::string path;
  explicit TempDir(const std::string& name) : path("/tmp/" + name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("null arguments are rejected with messages") {
  CHECK(dafedit_pretrain(nullptr, "/tmp") == DAFEDIT_ERR_INVALID_ARG);
  CHECK(std::strlen(dafedit_last_error()) > 0);
  CHECK(dafedit_eval("{}", nullptr) == DAFEDIT_ERR_INVALID_ARG);
  CHECK(dafedit_model_open(nullptr, nullptr) == DAFEDIT_ERR_INVALID_ARG);
}

TEST_CASE("missing artifacts surface as IO errors") {
  dafedit_model* model = nullptr;
  CHECK(dafedit_model_open("/tmp/definitely_not_here.ckpt", &model) == DAFEDIT_ERR_IO);
  CHECK(model == nullptr);
  const std::string msg = dafedit_last_error();
  CHECK(msg.find("cannot open") != std::string::npos);
}

TEST_CASE("malformed config is rejected") {
  TempDir dir("dafedit_capi_badcfg");
  CHECK(dafedit_pretrain("{not json", dir.path.c_str()) != DAFEDIT_OK);
  CHECK(dafedit_pretrain("{}", dir.path.c_str()) != DAFEDIT_OK);  // missing seed
  // Failed commands leave no partial outputs behind.
  CHECK(!fs::exists(dir.path + "/lm.ckpt"));
}

TEST_CASE("version string") {
  CHECK(std::string(dafedit_version()).find('.') != std::string::npos);
}

TEST_CASE("mini pipeline end-to-end through the C API") {
  TempDir dir("dafedit_capi_pipeline");
  const std::string cfg = mini_config(123);

  REQUIRE(dafedit_pretrain(cfg.c_str(), dir.path.c_str()) == DAFEDIT_OK);
  CHECK(fs::exists(dir.path + "/lm.ckpt"));
  CHECK(fs::exists(dir.path + "/pretrain_log.jsonl"));

  REQUIRE(dafedit_datagen(cfg.c_str(), dir.path.c_str()) == DAFEDIT_OK);
  CHECK(fs::exists(dir.path + "/dataset.jsonl"));
  CHECK(fs::exists(dir.path + "/stats.csv"));

  REQUIRE(dafedit_train(cfg.c_str(), dir.path.c_str()) == DAFEDIT_OK);
  CHECK(fs::exists(dir.path + "/dafnet.ckpt"));
  CHECK(fs::exists(dir.path + "/train_log.jsonl"));

  REQUIRE(dafedit_eval(cfg.c_str(), dir.path.c_str()) == DAFEDIT_OK);
  CHECK(fs::exists(dir.path + "/metrics.csv"));
  CHECK(fs::exists(dir.path + "/metrics.json"));
  CHECK(fs::exists(dir.path + "/journal.jsonl"));
  CHECK(fs::exists(dir.path + "/attn.csv"));

  // Null editor: the locality column is exactly 1.
  const std::string metrics = slurp(dir.path + "/metrics.csv");
  CHECK(metrics.find("editor,checkpoint,rel,gen,loc,avg") == 0);
  for (const std::string line : {std::string("null,3,"), std::string("null,6,")}) {
    CHECK(metrics.find(line) != std::string::npos);
  }
  std::istringstream ms(metrics);
  std::string line;
  std::getline(ms, line);
  while (std::getline(ms, line)) {
    // loc is the 5th comma-separated field
    std::istringstream ls(line);
    std::string field;
    for (int i = 0; i < 5; ++i) std::getline(ls, field, ',');
    CHECK(field == "1");
  }

  // Determinism: a second eval produces byte-identical outputs.
  const std::string metrics_before = slurp(dir.path + "/metrics.csv");
  const std::string journal_before = slurp(dir.path + "/journal.jsonl");
  REQUIRE(dafedit_eval(cfg.c_str(), dir.path.c_str()) == DAFEDIT_OK);
  CHECK(slurp(dir.path + "/metrics.csv") == metrics_before);
  CHECK(slurp(dir.path + "/journal.jsonl") == journal_before);

  // Attention export reproduces attn.csv from the journal (dafnet editor
  // journals carry beta scores; the null journal still round-trips).
  const std::string attn_before = slurp(dir.path + "/attn.csv");
  REQUIRE(dafedit_export_attention((dir.path + "/journal.jsonl").c_str(),
                                   (dir.path + "/attn2.csv").c_str()) == DAFEDIT_OK);
  CHECK(slurp(dir.path + "/attn2.csv") == attn_before);

  // Model handle: open, decode, buffer too small, OOV prompt.
  dafedit_model* model = nullptr;
  REQUIRE(dafedit_model_open((dir.path + "/lm.ckpt").c_str(), &model) == DAFEDIT_OK);
  REQUIRE(model != nullptr);
  char buf[256];
  CHECK(dafedit_model_decode(model, "the capital of", 2, buf, sizeof(buf)) == DAFEDIT_OK);
  CHECK(std::strlen(buf) > 0);
  char tiny[2];
  CHECK(dafedit_model_decode(model, "the capital of", 3, tiny, sizeof(tiny)) ==
        DAFEDIT_ERR_INVALID_ARG);
  CHECK(dafedit_model_decode(model, "quaternion flux", 1, buf, sizeof(buf)) ==
        DAFEDIT_ERR_RUNTIME);
  dafedit_model_close(model);

  // Editing session: edit twice, count, decode.
  dafedit_session* session = nullptr;
  REQUIRE(dafedit_session_open((dir.path + "/lm.ckpt").c_str(),
                               (dir.path + "/dafnet.ckpt").c_str(), &session) == DAFEDIT_OK);
  int count = -1;
  CHECK(dafedit_session_edit_count(session, &count) == DAFEDIT_OK);
  CHECK(count == 0);
  // Use dataset vocabulary words for the edit.
  const std::string dataset = slurp(dir.path + "/dataset.jsonl");
  std::istringstream ds(dataset);
  std::string header_line, record_line;
  std::getline(ds, header_line);
  std::getline(ds, record_line);
  const json rec = json::parse(record_line);
  const std::string prompt = rec.at("prompt").get<std::string>();
  const std::string target = rec.at("target").get<std::string>();
  CHECK(dafedit_session_edit(session, prompt.c_str(), target.c_str()) == DAFEDIT_OK);
  CHECK(dafedit_session_edit(session, prompt.c_str(), target.c_str()) == DAFEDIT_OK);
  CHECK(dafedit_session_edit_count(session, &count) == DAFEDIT_OK);
  CHECK(count == 2);
  CHECK(dafedit_session_decode(session, prompt.c_str(), 1, buf, sizeof(buf)) == DAFEDIT_OK);
  dafedit_session_close(session);
}
