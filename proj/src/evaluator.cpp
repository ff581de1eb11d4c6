#include "dafedit/evaluator.hpp"

#include <algorithm>
#include <stdexcept>

namespace dafedit {

namespace {

// Teacher-forced exact match of all target tokens.
bool answers_with(const EditableLM& model, const TokenSeq& seq) {
  const std::vector<int> pred = model.teacher_forced_argmax(seq.full());
  const int p = int(seq.prompt.size());
  for (std::size_t i = 0; i < seq.target.size(); ++i) {
    if (pred[std::size_t(p) - 1 + i] != seq.target[i]) return false;
  }
  return true;
}

void check_upto(const std::vector<EditRecord>& records, int upto) {
  if (upto < 1 || upto > int(records.size())) {
    throw std::runtime_error("evaluator: checkpoint " + std::to_string(upto) + " out of 1.." +
                             std::to_string(records.size()));
  }
}

}  // namespace

const std::vector<int>& LocalityReference::argmax_for(const EditRecord& record,
                                                      std::size_t probe_index) {
  const auto key = std::make_pair(record.id, probe_index);
  auto it = cache_.find(key);
  if (it == cache_.end()) {
    it = cache_.emplace(key, model_.teacher_forced_argmax(record.locality[probe_index])).first;
  }
  return it->second;
}

double reliability(const EditableLM& edited, const std::vector<EditRecord>& records, int upto) {
  check_upto(records, upto);
  int hits = 0;
  for (int t = 0; t < upto; ++t) {
    if (answers_with(edited, records[std::size_t(t)].edit)) ++hits;
  }
  return double(hits) / double(upto);
}

double generality(const EditableLM& edited, const std::vector<EditRecord>& records, int upto) {
  check_upto(records, upto);
  double acc = 0.0;
  for (int t = 0; t < upto; ++t) {
    const EditRecord& r = records[std::size_t(t)];
    if (r.generality.empty()) {
      throw std::runtime_error("evaluator: record " + r.id + " has no generality neighbours");
    }
    int hits = 0;
    for (const TokenSeq& g : r.generality) {
      if (answers_with(edited, g)) ++hits;
    }
    acc += double(hits) / double(r.generality.size());
  }
  return acc / double(upto);
}

double locality(LocalityReference& reference, const EditableLM& edited,
                const std::vector<EditRecord>& records, int upto) {
  check_upto(records, upto);
  int hits = 0, total = 0;
  for (int t = 0; t < upto; ++t) {
    const EditRecord& r = records[std::size_t(t)];
    if (r.locality.empty()) {
      throw std::runtime_error("evaluator: record " + r.id + " has no locality probes");
    }
    for (std::size_t j = 0; j < r.locality.size(); ++j) {
      const std::vector<int>& want = reference.argmax_for(r, j);
      const std::vector<int> got = edited.teacher_forced_argmax(r.locality[j]);
      ++total;
      if (got == want) ++hits;
    }
  }
  return double(hits) / double(total);
}

SequenceEvaluation evaluate_sequence(EditableLM& model, SequentialEditor& editor,
                                     const std::vector<EditRecord>& records,
                                     const std::vector<int>& checkpoints) {
  for (int cp : checkpoints) check_upto(records, cp);

  LocalityReference reference(model);
  SequenceEvaluation out;
  for (int t = 1; t <= int(records.size()); ++t) {
    const EditRecord& r = records[std::size_t(t) - 1];
    out.journal.push_back(editor.edit(model, r.edit, r.id));
    if (std::find(checkpoints.begin(), checkpoints.end(), t) != checkpoints.end()) {
      MetricRow row;
      row.editor = editor.name();
      row.checkpoint = t;
      row.rel = reliability(model, records, t);
      row.gen = generality(model, records, t);
      row.loc = locality(reference, model, records, t);
      row.avg = (row.rel + row.gen + row.loc) / 3.0;
      out.metrics.push_back(row);
    }
  }
  return out;
}

std::string metrics_csv(const std::vector<MetricRow>& rows) {
  std::string out = "editor,checkpoint,rel,gen,loc,avg\n";
  for (const MetricRow& r : rows) {
    out += r.editor + "," + std::to_string(r.checkpoint) + "," + format_double(r.rel) + "," +
           format_double(r.gen) + "," + format_double(r.loc) + "," + format_double(r.avg) + "\n";
  }
  return out;
}

std::string metrics_json(const std::vector<MetricRow>& rows) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const MetricRow& r : rows) {
    arr.push_back({{"editor", r.editor},
                   {"checkpoint", r.checkpoint},
                   {"rel", r.rel},
                   {"gen", r.gen},
                   {"loc", r.loc},
                   {"avg", r.avg}});
  }
  return arr.dump(2) + "\n";
}

}  // namespace dafedit
