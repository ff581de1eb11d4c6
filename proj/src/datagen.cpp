#include "dafedit/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dafedit/serialize.hpp"

namespace dafedit {

// ---- config ------------------------------------------------------------------

void DatagenConfig::validate() const {
  if (n_entities < 20) throw std::runtime_error("datagen config: need at least 20 entities");
  if (n_relations < 1 || n_relations > int(relation_table().size())) {
    throw std::runtime_error("datagen config: n_relations out of 1.." +
                             std::to_string(relation_table().size()));
  }
  if (count_recent < 1 || count_popular < 1 || count_long_tail < 1 || count_robust < 1 ||
      count_eval < 1) {
    throw std::runtime_error("datagen config: per-property counts must be >= 1");
  }
  if (freq_quantile <= 0.0 || freq_quantile >= 1.0 || popular_quantile <= 0.0 ||
      popular_quantile >= 1.0) {
    throw std::runtime_error("datagen config: quantiles must lie in (0,1)");
  }
}

nlohmann::ordered_json DatagenConfig::to_json() const {
  return {{"n_entities", n_entities},
          {"n_relations", n_relations},
          {"count_recent", count_recent},
          {"count_popular", count_popular},
          {"count_long_tail", count_long_tail},
          {"count_robust", count_robust},
          {"count_eval", count_eval},
          {"freq_quantile", freq_quantile},
          {"popular_quantile", popular_quantile},
          {"degree_threshold", degree_threshold},
          {"likelihood_threshold", likelihood_threshold},
          {"zipf_exponent", zipf_exponent},
          {"freq_scale", freq_scale}};
}

DatagenConfig DatagenConfig::from_json(const nlohmann::json& j) {
  DatagenConfig c;
  c.n_entities = j.value("n_entities", c.n_entities);
  c.n_relations = j.value("n_relations", c.n_relations);
  c.count_recent = j.value("count_recent", c.count_recent);
  c.count_popular = j.value("count_popular", c.count_popular);
  c.count_long_tail = j.value("count_long_tail", c.count_long_tail);
  c.count_robust = j.value("count_robust", c.count_robust);
  c.count_eval = j.value("count_eval", c.count_eval);
  c.freq_quantile = j.value("freq_quantile", c.freq_quantile);
  c.popular_quantile = j.value("popular_quantile", c.popular_quantile);
  c.degree_threshold = j.value("degree_threshold", c.degree_threshold);
  c.likelihood_threshold = j.value("likelihood_threshold", c.likelihood_threshold);
  c.zipf_exponent = j.value("zipf_exponent", c.zipf_exponent);
  c.freq_scale = j.value("freq_scale", c.freq_scale);
  c.validate();
  return c;
}

// ---- templates ---------------------------------------------------------------

const std::vector<RelationTemplates>& relation_table() {
  static const std::vector<RelationTemplates> table = {
      {"capital", "the capital of {h} is", "{h} has capital city"},
      {"leader", "the leader of {h} is", "{h} is governed by"},
      {"language", "the language of {h} is", "people in {h} speak"},
      {"currency", "the currency of {h} is", "{h} trades with coin"},
      {"anthem", "the anthem of {h} is", "{h} sings the song"},
      {"river", "the river of {h} is", "{h} lies on river"},
      {"mountain", "the mountain of {h} is", "{h} faces the peak"},
      {"dish", "the dish of {h} is", "{h} cooks the meal"},
      {"festival", "the festival of {h} is", "{h} holds the feast"},
      {"ally", "the ally of {h} is", "{h} stands with"},
      {"export", "the export of {h} is", "{h} sells mostly"},
      {"founder", "the founder of {h} is", "{h} was started by"},
      {"religion", "the religion of {h} is", "{h} follows the faith"},
      {"mascot", "the mascot of {h} is", "{h} keeps the beast"},
      {"neighbor", "the neighbor of {h} is", "{h} borders the land"},
      {"drink", "the drink of {h} is", "{h} brews the ale"},
  };
  return table;
}

const std::vector<std::string>& context_paddings() {
  static const std::vector<std::string> pads = {
      "people say",
      "as the old records claim it is widely known",
  };
  return pads;
}

namespace {

std::string render(const std::string& tmpl, const std::string& head) {
  std::string out = tmpl;
  const std::string key = "{h}";
  const std::size_t pos = out.find(key);
  if (pos == std::string::npos) throw std::runtime_error("template without {h}: " + tmpl);
  out.replace(pos, key.size(), head);
  return out;
}

std::vector<std::string> entity_names(int n) {
  static const std::vector<std::string> first = {
      "ba", "re", "no", "ka", "lu", "mi",  "tor", "ven", "sol", "dra", "fen",
      "gor", "hal", "ist", "jun", "kel", "mor", "nep", "ola", "pul"};
  static const std::vector<std::string> second = {
      "rim", "dan", "vek", "lor", "mas", "tin", "qua", "zel", "bor", "cul",
      "dep", "fos", "gan", "hol", "iva", "jor", "kas", "lum", "nix", "pem"};
  std::vector<std::string> names;
  for (std::size_t a = 0; a < first.size() && int(names.size()) < n; ++a) {
    for (std::size_t b = 0; b < second.size() && int(names.size()) < n; ++b) {
      names.push_back(first[a] + second[b]);
    }
  }
  if (int(names.size()) < n) throw std::runtime_error("datagen: entity name space exhausted");
  return names;
}

int quantile_value(std::vector<int> values, double q) {
  std::sort(values.begin(), values.end());
  const std::size_t idx =
      std::min(values.size() - 1, std::size_t(std::floor(q * double(values.size()))));
  return values[idx];
}

}  // namespace

// ---- KG ----------------------------------------------------------------------

SynthKG build_kg(const DatagenConfig& config, uint64_t seed) {
  config.validate();
  Rng rng(seed ^ 0xda7a6e11ULL);

  SynthKG kg;
  kg.relation_count = config.n_relations;
  kg.entities = entity_names(config.n_entities);

  // Zipf frequency profile over a seeded rank permutation, so entity names do
  // not encode popularity.
  const std::vector<int> rank_of = rng.permutation(config.n_entities);
  kg.frequency.resize(std::size_t(config.n_entities));
  for (int e = 0; e < config.n_entities; ++e) {
    const int rank = rank_of[std::size_t(e)] + 1;
    kg.frequency[std::size_t(e)] =
        std::max(1, int(std::floor(double(config.freq_scale) /
                                   std::pow(double(rank), config.zipf_exponent))));
  }

  // Out-degree grows with popularity; tails are drawn frequency-weighted so
  // hubs also collect the in-edges.
  std::vector<double> cumulative(std::size_t(config.n_entities), 0.0);
  double total_freq = 0.0;
  for (int e = 0; e < config.n_entities; ++e) {
    total_freq += double(kg.frequency[std::size_t(e)]);
    cumulative[std::size_t(e)] = total_freq;
  }
  const auto weighted_entity = [&]() {
    const double x = rng.uniform(0.0, total_freq);
    return int(std::lower_bound(cumulative.begin(), cumulative.end(), x) - cumulative.begin());
  };

  kg.in_degree.assign(std::size_t(config.n_entities), 0);
  kg.out_degree.assign(std::size_t(config.n_entities), 0);
  const int top_rank = std::max(1, config.n_entities / 10);
  for (int e = 0; e < config.n_entities; ++e) {
    const int rank = rank_of[std::size_t(e)] + 1;
    int degree;
    if (rank <= top_rank) {
      degree = int(rng.uniform_int(8, 10));
    } else if (rank <= config.n_entities / 2) {
      degree = int(rng.uniform_int(3, 4));
    } else {
      degree = int(rng.uniform_int(1, 2));
    }
    std::vector<int> relations = rng.sample_without_replacement(config.n_relations, degree);
    for (int r : relations) {
      int tail = weighted_entity();
      for (int attempts = 0; tail == e && attempts < 16; ++attempts) tail = weighted_entity();
      if (tail == e) tail = (e + 1) % config.n_entities;
      kg.triples.push_back({e, r, tail});
      kg.out_degree[std::size_t(e)] += 1;
      kg.in_degree[std::size_t(tail)] += 1;
    }
  }
  return kg;
}

std::vector<std::string> kg_vocabulary(const SynthKG& kg, const DatagenConfig& config) {
  std::set<std::string> words;
  for (int r = 0; r < config.n_relations; ++r) {
    const RelationTemplates& t = relation_table()[std::size_t(r)];
    for (const std::string& tmpl : {t.edit_template, t.rephrase_template}) {
      std::istringstream is(render(tmpl, "{h}"));
      std::string w;
      while (is >> w) {
        if (w != "{h}") words.insert(w);
      }
    }
  }
  for (const std::string& pad : context_paddings()) {
    std::istringstream is(pad);
    std::string w;
    while (is >> w) words.insert(w);
  }
  for (const std::string& e : kg.entities) {
    if (words.count(e) != 0) throw std::runtime_error("datagen: entity name collides with template word: " + e);
  }
  std::vector<std::string> vocab(words.begin(), words.end());
  vocab.insert(vocab.end(), kg.entities.begin(), kg.entities.end());
  return vocab;
}

std::vector<WeightedSentence> pretrain_corpus(const SynthKG& kg) {
  std::vector<WeightedSentence> corpus;
  corpus.reserve(kg.triples.size());
  for (const Triple& t : kg.triples) {
    const RelationTemplates& tmpl = relation_table()[std::size_t(t.relation)];
    WeightedSentence ws;
    ws.text = render(tmpl.edit_template, kg.entities[std::size_t(t.head)]) + " " +
              kg.entities[std::size_t(t.tail)];
    ws.weight = kg.frequency[std::size_t(t.head)];
    corpus.push_back(std::move(ws));
  }
  return corpus;
}

std::string canonical_sentence(const SynthKG& kg, int entity) {
  for (const Triple& t : kg.triples) {
    if (t.head == entity) {
      return render(relation_table()[std::size_t(t.relation)].edit_template,
                    kg.entities[std::size_t(t.head)]) +
             " " + kg.entities[std::size_t(t.tail)];
    }
  }
  return "";
}

// ---- long-tail selection -------------------------------------------------------

LongtailSelection select_longtail(const SynthKG& kg, const EditableLM& model,
                                  const DatagenConfig& config) {
  LongtailSelection sel;
  sel.freq_cut = quantile_value(kg.frequency, config.freq_quantile);
  sel.mean_log_prob.assign(kg.entities.size(), std::nan(""));

  for (int e = 0; e < int(kg.entities.size()); ++e) {
    const std::string sentence = canonical_sentence(kg, e);
    if (sentence.empty()) continue;
    const std::vector<int> ids = model.vocab().encode(sentence);
    TokenSeq seq;
    seq.prompt = {ids[0]};
    seq.target.assign(ids.begin() + 1, ids.end());
    sel.mean_log_prob[std::size_t(e)] =
        model.log_likelihood(seq) / double(seq.target.size());
  }

  for (int e = 0; e < int(kg.entities.size()); ++e) {
    if (kg.frequency[std::size_t(e)] > sel.freq_cut) continue;
    const bool low_degree = kg.degree(e) <= config.degree_threshold;
    const double lp = sel.mean_log_prob[std::size_t(e)];
    const bool low_likelihood = !std::isnan(lp) && lp < config.likelihood_threshold;
    if (low_degree || low_likelihood) sel.entities.push_back(e);
  }
  if (sel.entities.empty()) {
    throw std::runtime_error(
        "datagen: long-tail selection is empty; relax degree_threshold or "
        "likelihood_threshold");
  }
  return sel;
}

// ---- record generation -----------------------------------------------------------

nlohmann::ordered_json RawRecord::to_json() const {
  return {{"id", id},
          {"property", property},
          {"prompt", prompt},
          {"target", target},
          {"rephrases", rephrases},
          {"locality_prompts", locality_prompts},
          {"meta", {{"subject", subject}, {"relation", relation}, {"object", object}}}};
}

RawRecord RawRecord::from_json(const nlohmann::json& j) {
  RawRecord r;
  r.id = j.at("id").get<std::string>();
  r.property = j.at("property").get<std::string>();
  r.prompt = j.at("prompt").get<std::string>();
  r.target = j.at("target").get<std::string>();
  r.rephrases = j.at("rephrases").get<std::vector<std::string>>();
  r.locality_prompts = j.at("locality_prompts").get<std::vector<std::string>>();
  r.subject = j.at("meta").at("subject").get<std::string>();
  r.relation = j.at("meta").at("relation").get<std::string>();
  r.object = j.at("meta").at("object").get<std::string>();
  return r;
}

namespace {

struct GenContext {
  const SynthKG& kg;
  const DatagenConfig& config;
  Rng& rng;
  std::vector<int> probe_pool;  // triple indices with well-memorized heads
};

std::string entity_name(const GenContext& ctx, int e) { return ctx.kg.entities[std::size_t(e)]; }

// A full sentence of a random well-memorized triple whose head differs from
// the record's subject.
std::string pick_locality_sentence(GenContext& ctx, int subject_entity) {
  for (int attempts = 0; attempts < 64; ++attempts) {
    const int idx = ctx.probe_pool[std::size_t(
        ctx.rng.uniform_int(0, int(ctx.probe_pool.size()) - 1))];
    const Triple& t = ctx.kg.triples[std::size_t(idx)];
    if (t.head == subject_entity) continue;
    return render(relation_table()[std::size_t(t.relation)].edit_template,
                  entity_name(ctx, t.head)) +
           " " + entity_name(ctx, t.tail);
  }
  throw std::runtime_error("datagen: could not draw a disjoint locality probe");
}

int random_other_entity(GenContext& ctx, int avoid_a, int avoid_b) {
  int e = int(ctx.rng.uniform_int(0, int(ctx.kg.entities.size()) - 1));
  while (e == avoid_a || e == avoid_b) {
    e = int(ctx.rng.uniform_int(0, int(ctx.kg.entities.size()) - 1));
  }
  return e;
}

// Counterfactual object for a popularity record: a tail reachable within two
// hops of the head, excluding the current object and the head itself.
int two_hop_counterfactual(GenContext& ctx, const Triple& triple) {
  std::set<int> reachable;
  for (const Triple& t1 : ctx.kg.triples) {
    if (t1.head != triple.head) continue;
    reachable.insert(t1.tail);
    for (const Triple& t2 : ctx.kg.triples) {
      if (t2.head == t1.tail) reachable.insert(t2.tail);
    }
  }
  reachable.erase(triple.head);
  reachable.erase(triple.tail);
  if (reachable.empty()) return random_other_entity(ctx, triple.head, triple.tail);
  std::vector<int> pool(reachable.begin(), reachable.end());
  return pool[std::size_t(ctx.rng.uniform_int(0, int(pool.size()) - 1))];
}

RawRecord make_record(GenContext& ctx, const std::string& id, const std::string& property,
                      int head, int relation, int new_object) {
  const RelationTemplates& tmpl = relation_table()[std::size_t(relation)];
  RawRecord r;
  r.id = id;
  r.property = property;
  r.prompt = render(tmpl.edit_template, entity_name(ctx, head));
  r.target = entity_name(ctx, new_object);
  r.rephrases.push_back(render(tmpl.rephrase_template, entity_name(ctx, head)));
  if (property == "robust") {
    // Short and long context-padded variants exercise prompt-length
    // robustness.
    r.rephrases.push_back(context_paddings()[0] + " " + r.prompt);
    r.rephrases.push_back(context_paddings()[1] + " " + r.prompt);
  }
  r.locality_prompts.push_back(pick_locality_sentence(ctx, head));
  r.subject = entity_name(ctx, head);
  r.relation = tmpl.name;
  r.object = r.target;
  return r;
}

std::string record_id(const std::string& property, int n) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%04d", n);
  return property + "_" + buf;
}

}  // namespace

Dataset generate_dataset(const SynthKG& kg, const EditableLM& model, const DatagenConfig& config,
                         uint64_t seed, uint64_t lm_checkpoint_hash) {
  config.validate();
  Rng rng(seed ^ 0x9e0de17aULL);
  GenContext ctx{kg, config, rng, {}};

  // Locality probes come from the well-memorized half so pre-edit predictions
  // are stable reference points.
  const int median_freq = quantile_value(kg.frequency, 0.5);
  for (std::size_t i = 0; i < kg.triples.size(); ++i) {
    if (kg.frequency[std::size_t(kg.triples[i].head)] >= std::max(2, median_freq)) {
      ctx.probe_pool.push_back(int(i));
    }
  }
  if (ctx.probe_pool.empty()) throw std::runtime_error("datagen: empty locality probe pool");

  const LongtailSelection longtail = select_longtail(kg, model, config);
  const std::set<int> longtail_set(longtail.entities.begin(), longtail.entities.end());
  const int popular_cut = quantile_value(kg.frequency, config.popular_quantile);

  // Partition the triple pool by property; every record edits a distinct
  // (head, relation) pair.
  std::vector<int> order = rng.permutation(int(kg.triples.size()));
  std::vector<int> pool_longtail, pool_popular, pool_rest;
  for (int idx : order) {
    const Triple& t = kg.triples[std::size_t(idx)];
    if (longtail_set.count(t.head) != 0 && int(pool_longtail.size()) < config.count_long_tail) {
      pool_longtail.push_back(idx);
    } else if (kg.frequency[std::size_t(t.head)] >= popular_cut &&
               int(pool_popular.size()) < config.count_popular) {
      pool_popular.push_back(idx);
    } else {
      pool_rest.push_back(idx);
    }
  }
  if (int(pool_longtail.size()) < config.count_long_tail) {
    throw std::runtime_error("datagen: only " + std::to_string(pool_longtail.size()) +
                             " long-tail triples available; lower count_long_tail or relax cuts");
  }
  if (int(pool_popular.size()) < config.count_popular) {
    throw std::runtime_error("datagen: only " + std::to_string(pool_popular.size()) +
                             " popular triples available; lower count_popular");
  }
  if (int(pool_rest.size()) < config.count_robust + config.count_eval) {
    throw std::runtime_error("datagen: not enough remaining triples for robust+eval records");
  }

  Dataset ds;
  ds.header = {{"type", "header"},
               {"schema_version", 1},
               {"seed", seed},
               {"lm_checkpoint_hash", lm_checkpoint_hash},
               {"vocab_size", model.vocab().size()},
               {"config", config.to_json()}};

  for (int i = 0; i < config.count_long_tail; ++i) {
    const Triple& t = kg.triples[std::size_t(pool_longtail[std::size_t(i)])];
    ds.records.push_back(make_record(ctx, record_id("long_tail", i), "long_tail", t.head,
                                     t.relation, random_other_entity(ctx, t.head, t.tail)));
  }
  for (int i = 0; i < config.count_popular; ++i) {
    const Triple& t = kg.triples[std::size_t(pool_popular[std::size_t(i)])];
    ds.records.push_back(make_record(ctx, record_id("popular", i), "popular", t.head, t.relation,
                                     two_hop_counterfactual(ctx, t)));
  }
  for (int i = 0; i < config.count_robust; ++i) {
    const Triple& t = kg.triples[std::size_t(pool_rest[std::size_t(i)])];
    ds.records.push_back(make_record(ctx, record_id("robust", i), "robust", t.head, t.relation,
                                     random_other_entity(ctx, t.head, t.tail)));
  }
  for (int i = 0; i < config.count_eval; ++i) {
    const Triple& t = kg.triples[std::size_t(pool_rest[std::size_t(config.count_robust + i)])];
    ds.records.push_back(make_record(ctx, record_id("eval", i), "eval", t.head, t.relation,
                                     random_other_entity(ctx, t.head, t.tail)));
  }

  // Recency: fresh (head, relation) pairs absent from the pretraining corpus.
  std::set<std::pair<int, int>> used;
  for (const Triple& t : kg.triples) used.insert({t.head, t.relation});
  int made = 0;
  int guard = 0;
  while (made < config.count_recent) {
    if (++guard > config.count_recent * 200) {
      throw std::runtime_error("datagen: could not find enough unused (head, relation) pairs");
    }
    const int head = int(rng.uniform_int(0, int(kg.entities.size()) - 1));
    const int relation = int(rng.uniform_int(0, config.n_relations - 1));
    if (!used.insert({head, relation}).second) continue;
    ds.records.push_back(make_record(ctx, record_id("recent", made), "recent", head, relation,
                                     random_other_entity(ctx, head, head)));
    ++made;
  }

  return ds;
}

void emit_dataset(const Dataset& dataset, const std::string& path) {
  std::string out = dataset.header.dump() + "\n";
  for (const RawRecord& r : dataset.records) out += r.to_json().dump() + "\n";
  write_text_file(path, out);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("dataset: cannot open " + path);
  Dataset ds;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::ordered_json j = nlohmann::ordered_json::parse(line);
    if (first) {
      first = false;
      if (j.value("type", "") != "header") {
        throw std::runtime_error("dataset: missing header line in " + path);
      }
      if (j.value("schema_version", 0) != 1) {
        throw std::runtime_error("dataset: unsupported schema version in " + path);
      }
      ds.header = j;
      continue;
    }
    ds.records.push_back(RawRecord::from_json(j));
  }
  return ds;
}

std::vector<EditRecord> to_edit_records(const Dataset& dataset, const Vocab& vocab,
                                        const std::vector<std::string>& properties) {
  std::vector<EditRecord> out;
  for (const RawRecord& r : dataset.records) {
    if (!properties.empty() &&
        std::find(properties.begin(), properties.end(), r.property) == properties.end()) {
      continue;
    }
    EditRecord rec;
    rec.id = r.id;
    rec.property = r.property;
    rec.edit = make_token_seq(vocab, r.prompt, r.target);
    for (const std::string& g : r.rephrases) {
      rec.generality.push_back(make_token_seq(vocab, g, r.target));
    }
    for (const std::string& l : r.locality_prompts) {
      rec.locality.push_back(vocab.encode(l));
    }
    out.push_back(std::move(rec));
  }
  return out;
}

std::string dataset_stats_csv(const SynthKG& kg, const LongtailSelection& selection) {
  std::string out = "stat,bin,count\n";
  std::map<int, int> freq_hist, degree_hist;
  for (std::size_t e = 0; e < kg.entities.size(); ++e) {
    freq_hist[kg.frequency[e]] += 1;
    degree_hist[kg.degree(int(e))] += 1;
  }
  for (auto [bin, count] : freq_hist)
    out += "frequency," + std::to_string(bin) + "," + std::to_string(count) + "\n";
  for (auto [bin, count] : degree_hist)
    out += "degree," + std::to_string(bin) + "," + std::to_string(count) + "\n";
  std::map<int, int> lik_hist;  // quarter-unit bins of mean log-prob
  for (double lp : selection.mean_log_prob) {
    if (std::isnan(lp)) continue;
    lik_hist[int(std::floor(lp * 4.0))] += 1;
  }
  for (auto [bin, count] : lik_hist)
    out += "likelihood," + format_double(bin / 4.0) + "," + std::to_string(count) + "\n";
  return out;
}

}  // namespace dafedit
