#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "dafedit/lm.hpp"
#include "dafedit/records.hpp"
#include "dafedit/rng.hpp"

namespace dafedit {

struct DatagenConfig {
  int n_entities = 400;
  int n_relations = 16;  // <= the built-in template table
  int count_recent = 300;
  int count_popular = 300;
  int count_long_tail = 300;
  int count_robust = 130;
  int count_eval = 200;
  double freq_quantile = 0.8;        // long-tail frequency cut
  double popular_quantile = 0.9;     // popularity head cut
  int degree_threshold = 4;          // in+out degree cut
  double likelihood_threshold = -1.5;  // mean per-token log-prob cut
  double zipf_exponent = 1.1;
  int freq_scale = 40;  // frequency of the most popular entity

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static DatagenConfig from_json(const nlohmann::json& j);
};

struct Triple {
  int head = 0;
  int relation = 0;
  int tail = 0;
};

struct SynthKG {
  std::vector<std::string> entities;
  std::vector<int> frequency;  // per entity, Zipf-profiled corpus weight
  std::vector<Triple> triples;
  std::vector<int> in_degree;
  std::vector<int> out_degree;
  int relation_count = 0;

  int degree(int entity) const {
    return in_degree[std::size_t(entity)] + out_degree[std::size_t(entity)];
  }
};

struct RelationTemplates {
  std::string name;
  std::string edit_template;      // "{h}"-placeholder prompt, object-final
  std::string rephrase_template;  // distinct wording, also object-final
};

const std::vector<RelationTemplates>& relation_table();
// Context paddings for the robustness variants (short and long).
const std::vector<std::string>& context_paddings();

// Deterministic synthetic knowledge graph with a Zipf frequency profile:
// popular heads carry more edges and soak up most in-edges, so a long tail
// exists by construction.
SynthKG build_kg(const DatagenConfig& config, uint64_t seed);

// Closed vocabulary: every template/padding word plus every entity name.
std::vector<std::string> kg_vocabulary(const SynthKG& kg, const DatagenConfig& config);

// Rendered pretraining sentences, one per triple, weighted by head frequency.
struct WeightedSentence {
  std::string text;
  int weight = 1;
};
std::vector<WeightedSentence> pretrain_corpus(const SynthKG& kg);

// Canonical sentence of an entity's first triple (used for the likelihood
// criterion); empty when the entity heads no triple.
std::string canonical_sentence(const SynthKG& kg, int entity);

// The long-tail rule: frequency below the quantile cut AND (low in+out degree
// OR mean per-token log-prob below the threshold).
struct LongtailSelection {
  std::vector<int> entities;
  std::vector<double> mean_log_prob;  // per entity, NaN when no sentence
  int freq_cut = 0;
};
LongtailSelection select_longtail(const SynthKG& kg, const EditableLM& model,
                                  const DatagenConfig& config);

// String-form dataset record (pre-tokenization).
struct RawRecord {
  std::string id;
  std::string property;
  std::string prompt;
  std::string target;
  std::vector<std::string> rephrases;
  std::vector<std::string> locality_prompts;
  std::string subject, relation, object;

  nlohmann::ordered_json to_json() const;
  static RawRecord from_json(const nlohmann::json& j);
};

struct Dataset {
  nlohmann::ordered_json header;
  std::vector<RawRecord> records;
};

// Full generation pass: property pools, counterfactual targets, paraphrase
// and locality attachments. Deterministic in (config, seed, model).
Dataset generate_dataset(const SynthKG& kg, const EditableLM& model, const DatagenConfig& config,
                         uint64_t seed, uint64_t lm_checkpoint_hash);

void emit_dataset(const Dataset& dataset, const std::string& path);
Dataset load_dataset(const std::string& path);

// Tokenized records; optional property filter (empty = all).
std::vector<EditRecord> to_edit_records(const Dataset& dataset, const Vocab& vocab,
                                        const std::vector<std::string>& properties = {});

// Histogram CSV (stat,bin,count) of frequencies, degrees, and likelihoods.
std::string dataset_stats_csv(const SynthKG& kg, const LongtailSelection& selection);

}  // namespace dafedit
