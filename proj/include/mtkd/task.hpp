#pragma once

#include "mtkd/teachers.hpp"

namespace mtkd {

struct VocabMismatch : DataError {
  using DataError::DataError;
};

/// Synthetic concept task: contexts are partitioned into K groups and every
/// context has a gold answer of fixed length over plain answer tokens.
struct TaskSpec {
  int groups = 5;
  int contexts = 40;
  int answer_tokens = 8;
  int answer_length = 2;
  /// Passes over all contexts in the generated stream; step s shows context s mod contexts.
  int rounds = 5;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ConceptTask {
  TaskSpec spec;
  Vocab vocab;
  /// Context c is ContextId{c mod K, c}.
  std::vector<ContextId> contexts;
  std::vector<std::vector<Token>> gold;

  int group_of(std::size_t c) const { return static_cast<int>(c % static_cast<std::size_t>(spec.groups)); }
  std::size_t steps() const { return contexts.size() * static_cast<std::size_t>(spec.rounds); }
  std::size_t context_at(std::size_t step) const { return step % contexts.size(); }
  /// The context shown at every step, in step order.
  std::vector<ContextId> stream() const;
};

ConceptTask make_task(const TaskSpec& spec);

/// Teachers for a concept task. Teacher u is the expert on group u mod K: at
/// every answer step it puts `expert_peak` on the gold token and spreads the
/// rest evenly over the other answer tokens. Off its group, each (context, step)
/// row moves a total-variation amount drawn uniformly from [0, 2 * off_group_noise]
/// from the gold token onto one random wrong token. When drift is on, teacher u
/// redraws its off-group rows at step (u + 1) * steps / (N + 1).
struct EnsembleSpec {
  int teachers = 5;
  /// One entry per teacher, or empty for `order` everywhere.
  std::vector<int> orders;
  int order = 2;
  /// One entry per teacher, or empty for `temperature` everywhere.
  std::vector<double> temperatures;
  double temperature = 1.0;
  double expert_peak = 0.8;
  double off_group_noise = 0.4;
  bool drift = true;
  DriftKind drift_kind = DriftKind::sudden;
  std::int64_t drift_span = 0;
  std::uint64_t seed = 0;

  void validate(const TaskSpec& task) const;
};

TeacherEnsemble make_ensemble(const ConceptTask& task, const EnsembleSpec& spec);

struct EvalResult {
  std::vector<double> group_accuracy;
  std::vector<int> group_size;
  double macro = 0;
};

/// Greedy-decode accuracy of a policy: an answer is correct when its first
/// answer_length tokens equal the gold answer.
EvalResult evaluate_policy(const ConceptTask& task, const TabularPolicy& policy);

/// Accuracy of teacher u over the stream: every step queries the teacher on that
/// step's context with the ensemble drifted to the step.
EvalResult evaluate_teacher(const ConceptTask& task, const TeacherEnsemble& ensemble, std::size_t u);

}  // namespace mtkd
