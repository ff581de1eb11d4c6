#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "dafedit/datagen.hpp"

using namespace dafedit;

namespace {

DatagenConfig small_config() {
  DatagenConfig c;
  c.n_entities = 80;
  c.n_relations = 16;
  c.count_recent = 12;
  c.count_popular = 12;
  c.count_long_tail = 12;
  c.count_robust = 6;
  c.count_eval = 10;
  return c;
}

EditableLM model_for(const SynthKG& kg, const DatagenConfig& cfg, uint64_t seed) {
  Vocab vocab(kg_vocabulary(kg, cfg));
  LmConfig lm_cfg;
  lm_cfg.vocab_size = vocab.size();
  lm_cfg.d_model = 16;
  lm_cfg.n_layers = 3;
  lm_cfg.n_heads = 2;
  lm_cfg.d_ff = 24;
  lm_cfg.max_seq_len = 24;
  lm_cfg.edit_layer_count = 3;
  Rng rng(seed);
  return EditableLM(lm_cfg, vocab, rng);
}

}  // namespace

TEST_CASE("same seed gives an identical KG; different seeds differ") {
  DatagenConfig cfg = small_config();
  SynthKG a = build_kg(cfg, 42);
  SynthKG b = build_kg(cfg, 42);
  CHECK(a.entities == b.entities);
  CHECK(a.frequency == b.frequency);
  REQUIRE(a.triples.size() == b.triples.size());
  for (std::size_t i = 0; i < a.triples.size(); ++i) {
    CHECK(a.triples[i].head == b.triples[i].head);
    CHECK(a.triples[i].relation == b.triples[i].relation);
    CHECK(a.triples[i].tail == b.triples[i].tail);
  }
  SynthKG c = build_kg(cfg, 43);
  bool same = a.triples.size() == c.triples.size();
  if (same) {
    for (std::size_t i = 0; i < a.triples.size(); ++i) {
      if (a.triples[i].tail != c.triples[i].tail) same = false;
    }
  }
  CHECK(!same);
}

TEST_CASE("at least 80 percent of entities sit at or below the frequency cut") {
  DatagenConfig cfg = small_config();
  SynthKG kg = build_kg(cfg, 7);
  std::vector<int> sorted = kg.frequency;
  std::sort(sorted.begin(), sorted.end());
  const int cut = sorted[std::size_t(std::floor(0.8 * double(sorted.size())))];
  int below = 0;
  for (int f : kg.frequency)
    if (f <= cut) ++below;
  CHECK(double(below) / double(kg.frequency.size()) >= 0.8);
}

TEST_CASE("referential integrity: degrees recount from the triple list") {
  DatagenConfig cfg = small_config();
  SynthKG kg = build_kg(cfg, 9);
  std::vector<int> in(kg.entities.size(), 0), out(kg.entities.size(), 0);
  std::set<std::pair<int, int>> head_rel;
  for (const Triple& t : kg.triples) {
    REQUIRE(t.head >= 0);
    REQUIRE(t.head < int(kg.entities.size()));
    REQUIRE(t.tail >= 0);
    REQUIRE(t.tail < int(kg.entities.size()));
    REQUIRE(t.relation >= 0);
    REQUIRE(t.relation < cfg.n_relations);
    CHECK(t.head != t.tail);
    CHECK(head_rel.insert({t.head, t.relation}).second);  // (h,r) unique
    out[std::size_t(t.head)] += 1;
    in[std::size_t(t.tail)] += 1;
  }
  CHECK(in == kg.in_degree);
  CHECK(out == kg.out_degree);
}

TEST_CASE("vocabulary is closed, bounded, and collision-free") {
  DatagenConfig cfg = small_config();
  SynthKG kg = build_kg(cfg, 11);
  const std::vector<std::string> words = kg_vocabulary(kg, cfg);
  CHECK(int(words.size()) <= 512);
  std::set<std::string> unique(words.begin(), words.end());
  CHECK(unique.size() == words.size());
  // Every corpus sentence tokenizes.
  Vocab vocab(words);
  for (const WeightedSentence& ws : pretrain_corpus(kg)) {
    CHECK_NOTHROW(vocab.encode(ws.text));
  }
}

TEST_CASE("long-tail selection matches a brute-force filter") {
  DatagenConfig cfg = small_config();
  SynthKG kg = build_kg(cfg, 13);
  EditableLM lm = model_for(kg, cfg, 1);
  LongtailSelection sel = select_longtail(kg, lm, cfg);
  CHECK(!sel.entities.empty());

  std::vector<int> sorted = kg.frequency;
  std::sort(sorted.begin(), sorted.end());
  const int cut = sorted[std::size_t(std::floor(cfg.freq_quantile * double(sorted.size())))];
  CHECK(sel.freq_cut == cut);

  std::set<int> got(sel.entities.begin(), sel.entities.end());
  for (int e = 0; e < int(kg.entities.size()); ++e) {
    bool expect = false;
    if (kg.frequency[std::size_t(e)] <= cut) {
      const bool low_degree = kg.degree(e) <= cfg.degree_threshold;
      const double lp = sel.mean_log_prob[std::size_t(e)];
      const bool low_lik = !std::isnan(lp) && lp < cfg.likelihood_threshold;
      expect = low_degree || low_lik;
    }
    CHECK(got.count(e) == std::size_t(expect ? 1 : 0));
  }
}

TEST_CASE("low-frequency low-degree entity is selected through the degree branch") {
  DatagenConfig cfg = small_config();
  SynthKG kg = build_kg(cfg, 15);
  EditableLM lm = model_for(kg, cfg, 2);
  LongtailSelection sel = select_longtail(kg, lm, cfg);
  std::set<int> got(sel.entities.begin(), sel.entities.end());
  bool found_case = false;
  for (int e = 0; e < int(kg.entities.size()); ++e) {
    if (kg.frequency[std::size_t(e)] == 1 && kg.degree(e) <= cfg.degree_threshold &&
        kg.out_degree[std::size_t(e)] > 0) {
      found_case = true;
      CHECK(got.count(e) == 1);
    }
  }
  CHECK(found_case);
  // The highest-frequency entity is never long-tail.
  const int top = int(std::max_element(kg.frequency.begin(), kg.frequency.end()) -
                      kg.frequency.begin());
  CHECK(got.count(top) == 0);
}

TEST_CASE("generated dataset: counts, disjoint ids, invariants") {
  DatagenConfig cfg = small_config();
  SynthKG kg = build_kg(cfg, 17);
  EditableLM lm = model_for(kg, cfg, 3);
  Dataset ds = generate_dataset(kg, lm, cfg, 17, 0xabcdULL);

  std::map<std::string, int> per_property;
  std::set<std::string> ids;
  std::set<std::pair<std::string, std::string>> edit_keys;
  // Map canonical sentences back to their head entity for probe checks.
  std::map<std::string, std::string> sentence_head;
  for (const Triple& t : kg.triples) {
    const auto& tmpl = relation_table()[std::size_t(t.relation)];
    std::string s = tmpl.edit_template;
    s.replace(s.find("{h}"), 3, kg.entities[std::size_t(t.head)]);
    sentence_head[s + " " + kg.entities[std::size_t(t.tail)]] = kg.entities[std::size_t(t.head)];
  }

  for (const RawRecord& r : ds.records) {
    per_property[r.property] += 1;
    CHECK(ids.insert(r.id).second);
    CHECK(edit_keys.insert({r.subject, r.relation}).second);
    CHECK(!r.rephrases.empty());
    for (const std::string& g : r.rephrases) CHECK(g != r.prompt);
    REQUIRE(!r.locality_prompts.empty());
    for (const std::string& l : r.locality_prompts) {
      REQUIRE(sentence_head.count(l) == 1);
      CHECK(sentence_head.at(l) != r.subject);
    }
    if (r.property == "robust") CHECK(r.rephrases.size() >= 3);
  }
  CHECK(per_property["recent"] == cfg.count_recent);
  CHECK(per_property["popular"] == cfg.count_popular);
  CHECK(per_property["long_tail"] == cfg.count_long_tail);
  CHECK(per_property["robust"] == cfg.count_robust);
  CHECK(per_property["eval"] == cfg.count_eval);

  // Recent records edit (head, relation) pairs absent from the KG.
  std::set<std::pair<std::string, std::string>> kg_keys;
  for (const Triple& t : kg.triples) {
    kg_keys.insert({kg.entities[std::size_t(t.head)],
                    relation_table()[std::size_t(t.relation)].name});
  }
  for (const RawRecord& r : ds.records) {
    if (r.property == "recent") CHECK(kg_keys.count({r.subject, r.relation}) == 0);
    else CHECK(kg_keys.count({r.subject, r.relation}) == 1);
  }
}

TEST_CASE("long-tail records satisfy the documented selection predicate post hoc") {
  DatagenConfig cfg = small_config();
  SynthKG kg = build_kg(cfg, 19);
  EditableLM lm = model_for(kg, cfg, 5);
  LongtailSelection sel = select_longtail(kg, lm, cfg);
  std::set<std::string> selected_names;
  for (int e : sel.entities) selected_names.insert(kg.entities[std::size_t(e)]);

  Dataset ds = generate_dataset(kg, lm, cfg, 19, 1);
  for (const RawRecord& r : ds.records) {
    if (r.property == "long_tail") CHECK(selected_names.count(r.subject) == 1);
  }
}

TEST_CASE("dataset emission round-trips and is deterministic") {
  DatagenConfig cfg = small_config();
  SynthKG kg = build_kg(cfg, 21);
  EditableLM lm = model_for(kg, cfg, 6);
  Dataset ds = generate_dataset(kg, lm, cfg, 21, 99);

  const std::string path = "/tmp/dafedit_test_dataset.jsonl";
  emit_dataset(ds, path);
  Dataset loaded = load_dataset(path);
  REQUIRE(loaded.records.size() == ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    CHECK(loaded.records[i].to_json() == ds.records[i].to_json());
  }
  CHECK(loaded.header.at("schema_version") == 1);
  CHECK(loaded.header.at("lm_checkpoint_hash") == 99);

  Dataset again = generate_dataset(kg, lm, cfg, 21, 99);
  REQUIRE(again.records.size() == ds.records.size());
  for (std::size_t i = 0; i < ds.records.size(); ++i) {
    CHECK(again.records[i].to_json() == ds.records[i].to_json());
  }
  std::filesystem::remove(path);
}

TEST_CASE("records tokenize against the model vocabulary") {
  DatagenConfig cfg = small_config();
  SynthKG kg = build_kg(cfg, 23);
  EditableLM lm = model_for(kg, cfg, 7);
  Dataset ds = generate_dataset(kg, lm, cfg, 23, 0);

  auto all = to_edit_records(ds, lm.vocab());
  CHECK(all.size() == ds.records.size());
  auto eval_only = to_edit_records(ds, lm.vocab(), {"eval"});
  CHECK(int(eval_only.size()) == cfg.count_eval);
  for (const EditRecord& r : eval_only) {
    CHECK(!r.edit.prompt.empty());
    CHECK(!r.edit.target.empty());
    CHECK(!r.generality.empty());
    CHECK(!r.locality.empty());
  }
}

TEST_CASE("stats CSV contains the three histograms") {
  DatagenConfig cfg = small_config();
  SynthKG kg = build_kg(cfg, 25);
  EditableLM lm = model_for(kg, cfg, 8);
  const std::string csv = dataset_stats_csv(kg, select_longtail(kg, lm, cfg));
  CHECK(csv.find("stat,bin,count") == 0);
  CHECK(csv.find("frequency,") != std::string::npos);
  CHECK(csv.find("degree,") != std::string::npos);
  CHECK(csv.find("likelihood,") != std::string::npos);
}
