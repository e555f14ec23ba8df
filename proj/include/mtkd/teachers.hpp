#pragma once

#include "mtkd/policy.hpp"
#include "mtkd/record.hpp"

namespace mtkd {

struct UnknownTeacherIndex : Error {
  using Error::Error;
};

enum class DriftKind { sudden, gradual };
enum class PerturbationMode { additive, replace };

/// A scheduled change to one teacher's logit rows.
///
/// Sudden events apply fully from `step` on. Gradual events ramp linearly:
/// at query step q the applied fraction is clamp((q - step) / span, 0, 1).
struct DriftEvent {
  std::int64_t step = 0;
  int teacher = 0;
  DriftKind kind = DriftKind::sudden;
  std::int64_t span = 0;
  PerturbationMode mode = PerturbationMode::additive;
  std::map<RowKey, Eigen::VectorXd> rows;

  double fraction_at(std::int64_t query) const;
};

class DriftSchedule {
 public:
  DriftSchedule() = default;
  explicit DriftSchedule(std::vector<DriftEvent> events);

  const std::vector<DriftEvent>& events() const { return events_; }
  bool empty() const { return events_.empty(); }

 private:
  std::vector<DriftEvent> events_;
};

struct TeacherEnsemble {
  std::vector<TabularPolicy> teachers;
  std::vector<std::string> names;
  DriftSchedule schedule;
  std::uint64_t seed = 0;

  TeacherEnsemble() = default;
  TeacherEnsemble(std::vector<TabularPolicy> teachers, DriftSchedule schedule, std::uint64_t seed,
                  std::vector<std::string> names = {});

  std::size_t size() const { return teachers.size(); }
  /// Teacher index for a record's teacher_id; nullopt if unknown.
  std::optional<std::size_t> index_of(std::string_view name) const;
};

/// Sub-ensemble of the listed teachers (names kept), with their drift events
/// re-indexed and every other teacher's events dropped.
TeacherEnsemble select_teachers(const TeacherEnsemble& ensemble, std::span<const std::size_t> indices);

CotStream sample_trajectory(const TabularPolicy& teacher, const ContextId& context, int max_len,
                            std::uint64_t seed);

/// Ensemble with every event at or before `step` folded into the logits and an
/// empty schedule. Teachers no event touches are copied bit for bit.
TeacherEnsemble apply_drift(const TeacherEnsemble& ensemble, std::int64_t step);

/// N x |contexts| x per_context records in (context, teacher, replicate) order.
/// Context c is generated with the ensemble drifted to step c; each
/// (context, teacher, replicate) draws from its own derived seed, so the
/// result does not depend on `threads`.
std::vector<TrajectoryRecord> generate_corpus(const TeacherEnsemble& ensemble,
                                              std::span<const ContextId> contexts,
                                              int per_context, int max_len, int threads = 1);

}  // namespace mtkd
