#include "dafedit/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "dafedit/editor.hpp"
#include "dafedit/evaluator.hpp"
#include "dafedit/serialize.hpp"

namespace dafedit {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

json parse_config(const std::string& config_json) {
  json j = json::parse(config_json);
  if (!j.contains("seed")) throw std::runtime_error("config: a top-level \"seed\" is required");
  return j;
}

json section(const json& j, const std::string& name) {
  return j.contains(name) ? j.at(name) : json::object();
}

// Removes everything it registered unless committed, so failed commands leave
// no partial outputs behind.
class OutputTracker {
 public:
  explicit OutputTracker(const std::string& out_dir) : dir_(out_dir) {
    fs::create_directories(dir_);
  }
  ~OutputTracker() {
    if (committed_) return;
    for (const std::string& p : files_) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  }
  std::string path(const std::string& name) {
    const std::string p = (fs::path(dir_) / name).string();
    files_.push_back(p);
    return p;
  }
  std::vector<std::string> commit() {
    committed_ = true;
    return files_;
  }

 private:
  std::string dir_;
  std::vector<std::string> files_;
  bool committed_ = false;
};

std::string artifact_path(const json& cfg, const std::string& out_dir, const std::string& key,
                          const std::string& default_name) {
  if (cfg.contains("paths") && cfg.at("paths").contains(key)) {
    return cfg.at("paths").at(key).get<std::string>();
  }
  return (fs::path(out_dir) / default_name).string();
}

LmConfig lm_config_from(const json& cfg, int vocab_size) {
  json lm = section(cfg, "lm");
  lm["vocab_size"] = vocab_size;
  return LmConfig::from_json(lm);
}

EditableLM load_lm(const std::string& path) {
  return EditableLM::from_checkpoint(Checkpoint::load(path));
}

std::vector<std::string> properties_from(const json& sec, const char* key,
                                         std::vector<std::string> fallback) {
  if (sec.contains(key)) return sec.at(key).get<std::vector<std::string>>();
  return fallback;
}

}  // namespace

// ---- pretraining ----------------------------------------------------------------

PretrainConfig PretrainConfig::from_json(const nlohmann::json& j) {
  PretrainConfig c;
  c.lr = j.value("lr", c.lr);
  c.batch = j.value("batch", c.batch);
  c.max_iters = j.value("max_iters", c.max_iters);
  c.target_acc = j.value("target_acc", c.target_acc);
  c.check_every = j.value("check_every", c.check_every);
  return c;
}

nlohmann::ordered_json PretrainConfig::to_json() const {
  return {{"lr", lr},
          {"batch", batch},
          {"max_iters", max_iters},
          {"target_acc", target_acc},
          {"check_every", check_every}};
}

PretrainStats pretrain_lm(EditableLM& model, const std::vector<WeightedSentence>& corpus,
                          const PretrainConfig& config, Rng& rng,
                          const std::function<void(const std::string&)>& log_sink) {
  if (corpus.empty()) throw std::runtime_error("pretrain: empty corpus");

  std::vector<TokenSeq> sentences;
  sentences.reserve(corpus.size());
  std::vector<double> cumulative;
  double total = 0.0;
  for (const WeightedSentence& ws : corpus) {
    const std::vector<int> ids = model.vocab().encode(ws.text);
    if (ids.size() < 2) throw std::runtime_error("pretrain: sentence too short: " + ws.text);
    TokenSeq seq;
    seq.prompt = {ids[0]};
    seq.target.assign(ids.begin() + 1, ids.end());
    seq.text = ws.text;
    sentences.push_back(std::move(seq));
    total += double(ws.weight);
    cumulative.push_back(total);
  }
  const auto weighted_index = [&]() {
    const double x = rng.uniform(0.0, total);
    return std::size_t(std::lower_bound(cumulative.begin(), cumulative.end(), x) -
                       cumulative.begin());
  };

  // Fixed frequency-weighted probe set for the memorization check.
  std::vector<std::size_t> probe;
  const int probe_size = std::min<int>(200, int(sentences.size()));
  for (int i = 0; i < probe_size; ++i) probe.push_back(weighted_index());

  model.set_trainable(true);
  std::vector<Tensor> params;
  for (auto& [name, t] : model.parameters()) params.push_back(t);
  Adam opt(params, AdamConfig{config.lr, 0.9, 0.999, 1e-8});

  const auto probe_accuracy = [&]() {
    int hits = 0;
    for (std::size_t idx : probe) {
      const TokenSeq& s = sentences[idx];
      const std::vector<int> pred = model.teacher_forced_argmax(s.full());
      bool ok = true;
      for (std::size_t i = 0; i < s.target.size(); ++i) {
        if (pred[s.prompt.size() - 1 + i] != s.target[i]) {
          ok = false;
          break;
        }
      }
      if (ok) ++hits;
    }
    return double(hits) / double(probe.size());
  };

  PretrainStats stats;
  double last_loss = 0.0;
  for (int iter = 1; iter <= config.max_iters; ++iter) {
    opt.zero_grad();
    Tensor loss = Tensor::scalar(0.0);
    for (int b = 0; b < config.batch; ++b) {
      loss = add(loss, model.nll_loss(sentences[weighted_index()], /*mean_per_token=*/true));
    }
    loss = scale(loss, 1.0 / double(config.batch));
    backward(loss);
    opt.step();
    last_loss = loss.value();

    if (iter % config.check_every == 0 || iter == config.max_iters) {
      const double acc = probe_accuracy();
      if (log_sink) {
        json line = {{"iteration", iter}, {"loss", last_loss}, {"probe_acc", acc}};
        log_sink(line.dump());
      }
      stats.iterations = iter;
      stats.final_loss = last_loss;
      stats.final_acc = acc;
      if (acc >= config.target_acc) break;
    }
  }
  model.set_trainable(false);
  return stats;
}

// ---- commands ---------------------------------------------------------------------

std::vector<std::string> run_pretrain(const std::string& config_json, const std::string& out_dir) {
  const json cfg = parse_config(config_json);
  const uint64_t seed = cfg.at("seed").get<uint64_t>();
  OutputTracker out(out_dir);

  const DatagenConfig dg = DatagenConfig::from_json(section(cfg, "datagen"));
  const SynthKG kg = build_kg(dg, seed);
  const std::vector<std::string> vocab_words = kg_vocabulary(kg, dg);
  Vocab vocab(vocab_words);

  Rng init_rng = Rng(seed).fork(0x11);
  EditableLM model(lm_config_from(cfg, vocab.size()), vocab, init_rng);

  Rng train_rng = Rng(seed).fork(0x22);
  const PretrainConfig pc = PretrainConfig::from_json(section(cfg, "pretrain"));
  std::string log;
  PretrainStats stats =
      pretrain_lm(model, pretrain_corpus(kg), pc, train_rng,
                  [&](const std::string& line) { log += line + "\n"; });

  Checkpoint ckpt = model.to_checkpoint();
  ckpt.meta["pretrain"] = {{"iterations", stats.iterations},
                           {"final_loss", stats.final_loss},
                           {"final_acc", stats.final_acc},
                           {"config", pc.to_json()},
                           {"seed", seed}};
  ckpt.save(out.path("lm.ckpt"));
  write_text_file(out.path("pretrain_log.jsonl"), log);
  return out.commit();
}

std::vector<std::string> run_datagen(const std::string& config_json, const std::string& out_dir) {
  const json cfg = parse_config(config_json);
  const uint64_t seed = cfg.at("seed").get<uint64_t>();
  OutputTracker out(out_dir);

  const std::string lm_path = artifact_path(cfg, out_dir, "lm_ckpt", "lm.ckpt");
  const uint64_t lm_hash = file_hash(lm_path);
  const EditableLM model = load_lm(lm_path);

  const DatagenConfig dg = DatagenConfig::from_json(section(cfg, "datagen"));
  const SynthKG kg = build_kg(dg, seed);
  if (kg_vocabulary(kg, dg) != model.vocab().words()) {
    throw std::runtime_error(
        "datagen: the model checkpoint was pretrained on a different (config, seed) vocabulary");
  }

  const Dataset ds = generate_dataset(kg, model, dg, seed, lm_hash);
  emit_dataset(ds, out.path("dataset.jsonl"));
  write_text_file(out.path("stats.csv"), dataset_stats_csv(kg, select_longtail(kg, model, dg)));
  return out.commit();
}

std::vector<std::string> run_train(const std::string& config_json, const std::string& out_dir) {
  const json cfg = parse_config(config_json);
  const uint64_t seed = cfg.at("seed").get<uint64_t>();
  OutputTracker out(out_dir);

  EditableLM model = load_lm(artifact_path(cfg, out_dir, "lm_ckpt", "lm.ckpt"));
  const Dataset ds = load_dataset(artifact_path(cfg, out_dir, "dataset", "dataset.jsonl"));

  const json train_sec = section(cfg, "train");
  const std::vector<std::string> props = properties_from(
      train_sec, "properties", {"recent", "popular", "long_tail", "robust"});
  std::vector<EditRecord> records = to_edit_records(ds, model.vocab(), props);
  if (records.empty()) throw std::runtime_error("train: no records for the selected properties");

  std::vector<MatrixShape> shapes;
  for (const auto& m : model.editable_matrices()) shapes.push_back({m.d_in, m.d_out});
  Rng net_rng = Rng(seed).fork(0x33);
  Dafnet net(DafnetConfig::from_json(section(cfg, "dafnet")), shapes, net_rng);

  Trainer trainer(model, net, std::move(records), TrainConfig::from_json(train_sec), seed);
  if (train_sec.contains("resume") && !train_sec.at("resume").get<std::string>().empty()) {
    trainer.load_state(train_sec.at("resume").get<std::string>());
  }

  std::ofstream log_stream;  // streamed: long runs should not buffer the log
  const std::string log_path = out.path("train_log.jsonl");
  log_stream.open(log_path + ".tmp", std::ios::binary);
  TrainResult result = trainer.train(out_dir, [&](const std::string& line) {
    log_stream << line << "\n";
  });
  log_stream.close();
  fs::rename(log_path + ".tmp", log_path);

  // Lowest-EMA checkpoint becomes the published network.
  if (result.best_checkpoint_path.empty()) throw std::runtime_error("train: no checkpoint written");
  Checkpoint best = Checkpoint::load(result.best_checkpoint_path);
  best.meta["selected_from"] = result.best_checkpoint_path;
  best.meta["best_l_ema"] = result.best_l_ema;
  best.save(out.path("dafnet.ckpt"));
  for (const auto& entry : fs::directory_iterator(out_dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("dafnet_iter", 0) == 0) out.path(name);
  }
  return out.commit();
}

std::vector<std::string> run_eval(const std::string& config_json, const std::string& out_dir) {
  const json cfg = parse_config(config_json);
  const uint64_t seed = cfg.at("seed").get<uint64_t>();
  OutputTracker out(out_dir);

  const std::string lm_path = artifact_path(cfg, out_dir, "lm_ckpt", "lm.ckpt");
  const std::string ds_path = artifact_path(cfg, out_dir, "dataset", "dataset.jsonl");
  EditableLM model = load_lm(lm_path);
  const Dataset ds = load_dataset(ds_path);

  const json eval_sec = section(cfg, "eval");
  const std::string editor_kind = eval_sec.value("editor", "dafnet");
  const int edits = eval_sec.value("edits", 50);
  std::vector<int> checkpoints = eval_sec.contains("checkpoints")
                                     ? eval_sec.at("checkpoints").get<std::vector<int>>()
                                     : std::vector<int>{edits};
  const std::vector<std::string> props =
      properties_from(eval_sec, "properties", {"eval"});

  std::vector<EditRecord> records = to_edit_records(ds, model.vocab(), props);
  if (int(records.size()) < edits) {
    throw std::runtime_error("eval: requested " + std::to_string(edits) + " edits but only " +
                             std::to_string(records.size()) + " records are available");
  }
  Rng order_rng = Rng(seed).fork(0x44);
  std::vector<int> order = order_rng.permutation(int(records.size()));
  std::vector<EditRecord> sequence;
  for (int i = 0; i < edits; ++i) sequence.push_back(records[std::size_t(order[std::size_t(i)])]);

  std::unique_ptr<SequentialEditor> editor;
  std::string dafnet_path;
  if (editor_kind == "dafnet") {
    dafnet_path = artifact_path(cfg, out_dir, "dafnet_ckpt", "dafnet.ckpt");
    Dafnet loaded = Dafnet::from_checkpoint(Checkpoint::load(dafnet_path));
    editor = std::make_unique<DafnetEditor>(std::move(loaded));
  } else {
    editor = make_editor(editor_kind, nullptr, eval_sec.value("ft_steps", 25),
                         eval_sec.value("ft_lr", 5e-3));
  }

  SequenceEvaluation result = evaluate_sequence(model, *editor, sequence, checkpoints);

  write_text_file(out.path("metrics.csv"), metrics_csv(result.metrics));

  json provenance = {{"lm_ckpt_hash", file_hash(lm_path)},
                     {"dataset_hash", file_hash(ds_path)},
                     {"seed", seed},
                     {"editor", editor_kind}};
  if (!dafnet_path.empty()) provenance["dafnet_ckpt_hash"] = file_hash(dafnet_path);
  json report = {{"config", cfg}, {"provenance", provenance},
                 {"metrics", json::parse(metrics_json(result.metrics))}};
  write_text_file(out.path("metrics.json"), report.dump(2) + "\n");

  std::string journal = json({{"type", "header"},
                              {"editor", editor_kind},
                              {"seed", seed},
                              {"config", cfg}})
                            .dump() +
                        "\n";
  std::vector<AttentionScoreRow> attn_rows;
  for (const EditJournalEntry& e : result.journal) {
    json beta = json::object(), dfro = json::object(), afro = json::object(),
         layers = json::object();
    for (const auto& [id, v] : e.beta) beta[std::to_string(id)] = v;
    for (const auto& [id, v] : e.delta_fro) dfro[std::to_string(id)] = v;
    for (const auto& [id, v] : e.accum_fro) afro[std::to_string(id)] = v;
    for (const auto& [id, v] : e.beta_layers) layers[std::to_string(id)] = v;
    journal += json({{"edit", e.edit_index},
                     {"id", e.sample_id},
                     {"beta", beta},
                     {"delta_fro", dfro},
                     {"accum_fro", afro},
                     {"beta_layers", layers}})
                   .dump() +
               "\n";
    for (const auto& [id, per_layer] : e.beta_layers) {
      for (std::size_t k = 0; k < per_layer.size(); ++k) {
        attn_rows.push_back({e.edit_index, "m" + std::to_string(id) + ".k" + std::to_string(k + 1),
                             per_layer[k]});
      }
    }
    for (const auto& [id, v] : e.beta) {
      attn_rows.push_back({e.edit_index, "m" + std::to_string(id) + ".avg", v});
    }
  }
  write_text_file(out.path("journal.jsonl"), journal);
  write_text_file(out.path("attn.csv"), attention_scores_csv(attn_rows));
  return out.commit();
}

std::vector<std::string> export_attention(const std::string& journal_path,
                                          const std::string& out_csv) {
  std::ifstream is(journal_path);
  if (!is) throw std::runtime_error("export-attn: cannot open " + journal_path);
  std::vector<AttentionScoreRow> rows;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const json j = json::parse(line);
    if (j.value("type", "") == "header") continue;
    const int edit = j.at("edit").get<int>();
    if (j.contains("beta_layers")) {
      for (const auto& [id, per_layer] : j.at("beta_layers").items()) {
        for (std::size_t k = 0; k < per_layer.size(); ++k) {
          rows.push_back({edit, "m" + id + ".k" + std::to_string(k + 1),
                          per_layer[k].get<double>()});
        }
      }
    }
    if (j.contains("beta")) {
      for (const auto& [id, v] : j.at("beta").items()) {
        rows.push_back({edit, "m" + id + ".avg", v.get<double>()});
      }
    }
  }
  write_text_file(out_csv, attention_scores_csv(rows));
  return {out_csv};
}

}  // namespace dafedit
