#pragma once

#include <map>
#include <string>
#include <vector>

#include "dafedit/editor.hpp"
#include "dafedit/lm.hpp"
#include "dafedit/records.hpp"

namespace dafedit {

struct MetricRow {
  std::string editor;
  int checkpoint = 0;
  double rel = 0.0;
  double gen = 0.0;
  double loc = 0.0;
  double avg = 0.0;
};

// Caches the pre-edit teacher-forced argmax sequences of locality probes,
// keyed by (record id, probe index).
class LocalityReference {
 public:
  explicit LocalityReference(const EditableLM& pre_edit_model) : model_(pre_edit_model) {
    model_.clear_overlays();
  }
  const std::vector<int>& argmax_for(const EditRecord& record, std::size_t probe_index);
  const EditableLM& model() const { return model_; }

 private:
  EditableLM model_;  // shares base weights, owns a clean overlay set
  std::map<std::pair<std::string, std::size_t>, std::vector<int>> cache_;
};

// Exact-match accuracy of the edited model on the first `upto` edit samples:
// every target position's argmax must equal the target token.
double reliability(const EditableLM& edited, const std::vector<EditRecord>& records, int upto);

// Mean over edits of mean over paraphrase neighbours of the exact-match
// indicator. A record without neighbours is an error in evaluation.
double generality(const EditableLM& edited, const std::vector<EditRecord>& records, int upto);

// Fraction of locality probes whose full argmax sequence under the edited
// model equals the pre-edit reference.
double locality(LocalityReference& reference, const EditableLM& edited,
                const std::vector<EditRecord>& records, int upto);

struct SequenceEvaluation {
  std::vector<MetricRow> metrics;
  std::vector<EditJournalEntry> journal;
};

// Runs the edit stream in order; at each checkpoint t computes all three
// metrics over edits 1..t.
SequenceEvaluation evaluate_sequence(EditableLM& model, SequentialEditor& editor,
                                     const std::vector<EditRecord>& records,
                                     const std::vector<int>& checkpoints);

std::string metrics_csv(const std::vector<MetricRow>& rows);
std::string metrics_json(const std::vector<MetricRow>& rows);

}  // namespace dafedit
