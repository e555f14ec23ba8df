#include "mtkd/teachers.hpp"

#include "mtkd/parallel.hpp"
#include "mtkd/random.hpp"

#include <algorithm>

namespace mtkd {

void TrajectoryRecord::validate() const {
  if (tokens.empty()) throw DataError("record '" + id + "': tokens must be non-empty");
  if (step_logprobs) {
    if (step_logprobs->size() != tokens.size())
      throw DataError("record '" + id + "': step_logprobs length " +
                      std::to_string(step_logprobs->size()) + " != tokens length " +
                      std::to_string(tokens.size()));
    for (double lp : *step_logprobs)
      if (!(lp <= 0)) throw DataError("record '" + id + "': step_logprobs must be <= 0");
  }
}

double DriftEvent::fraction_at(std::int64_t query) const {
  if (query < step) return 0.0;
  if (kind == DriftKind::sudden || span == 0) return 1.0;
  return std::clamp(static_cast<double>(query - step) / static_cast<double>(span), 0.0, 1.0);
}

DriftSchedule::DriftSchedule(std::vector<DriftEvent> events) : events_(std::move(events)) {
  for (std::size_t i = 0; i < events_.size(); ++i) {
    if (events_[i].span < 0) throw InvalidArgument("drift schedule: span must be >= 0");
    if (i > 0 && events_[i].step <= events_[i - 1].step)
      throw InvalidArgument("drift schedule: event steps must be strictly increasing");
  }
}

TeacherEnsemble::TeacherEnsemble(std::vector<TabularPolicy> teachers_, DriftSchedule schedule_,
                                 std::uint64_t seed_, std::vector<std::string> names_)
    : teachers(std::move(teachers_)),
      names(std::move(names_)),
      schedule(std::move(schedule_)),
      seed(seed_) {
  if (teachers.empty()) throw InvalidArgument("ensemble: need at least one teacher");
  for (const auto& t : teachers)
    if (!(t.vocab() == teachers.front().vocab()))
      throw InvalidArgument("ensemble: teachers must share one vocabulary");
  if (names.empty())
    for (std::size_t u = 0; u < teachers.size(); ++u) names.push_back("teacher-" + std::to_string(u));
  if (names.size() != teachers.size()) throw InvalidArgument("ensemble: one name per teacher");
}

std::optional<std::size_t> TeacherEnsemble::index_of(std::string_view name) const {
  for (std::size_t u = 0; u < names.size(); ++u)
    if (names[u] == name) return u;
  return std::nullopt;
}

TeacherEnsemble select_teachers(const TeacherEnsemble& ensemble, std::span<const std::size_t> indices) {
  std::vector<TabularPolicy> teachers;
  std::vector<std::string> names;
  for (std::size_t u : indices) {
    if (u >= ensemble.size())
      throw UnknownTeacherIndex("no teacher " + std::to_string(u) + " in an ensemble of " +
                                std::to_string(ensemble.size()));
    teachers.push_back(ensemble.teachers[u]);
    names.push_back(ensemble.names[u]);
  }
  std::vector<DriftEvent> events;
  for (const auto& ev : ensemble.schedule.events()) {
    const auto it = std::find(indices.begin(), indices.end(), static_cast<std::size_t>(ev.teacher));
    if (it == indices.end()) continue;
    events.push_back(ev);
    events.back().teacher = static_cast<int>(it - indices.begin());
  }
  return TeacherEnsemble(std::move(teachers), DriftSchedule(std::move(events)), ensemble.seed,
                         std::move(names));
}

CotStream sample_trajectory(const TabularPolicy& teacher, const ContextId& context, int max_len,
                            std::uint64_t seed) {
  if (max_len < 1) throw InvalidArgument("sample_trajectory: max_len must be >= 1");
  Engine rng(seed);
  CotStream stream{context, {}, {}};
  for (int j = 0; j < max_len; ++j) {
    Categorical z = teacher.predictive(context, stream.tokens);
    const auto t = static_cast<Token>(sample_index(z.probs(), rng));
    stream.states.push_back({stream.tokens, std::move(z)});
    stream.tokens.push_back(t);
    if (t == teacher.vocab().eos()) break;
  }
  return stream;
}

TeacherEnsemble apply_drift(const TeacherEnsemble& ensemble, std::int64_t step) {
  if (step < 0) throw InvalidArgument("apply_drift: step must be >= 0");
  TeacherEnsemble out = ensemble;
  out.schedule = DriftSchedule();
  for (const auto& ev : ensemble.schedule.events()) {
    if (ev.teacher < 0 || static_cast<std::size_t>(ev.teacher) >= ensemble.size())
      throw UnknownTeacherIndex("drift event targets teacher " + std::to_string(ev.teacher) +
                                " but the ensemble has " + std::to_string(ensemble.size()));
    const double frac = ev.fraction_at(step);
    if (frac == 0.0) continue;
    auto& teacher = out.teachers[static_cast<std::size_t>(ev.teacher)];
    for (const auto& [key, row] : ev.rows) {
      const Eigen::VectorXd current = teacher.logits(key);
      if (ev.mode == PerturbationMode::additive)
        teacher.set_logits(key, current + frac * row);
      else if (frac == 1.0)
        teacher.set_logits(key, row);
      else
        // Equal entries (including matching infinities) stay put instead of becoming NaN.
        teacher.set_logits(key, current.binaryExpr(row, [frac](double a, double b) {
          return a == b ? a : a + frac * (b - a);
        }));
    }
  }
  return out;
}

std::vector<TrajectoryRecord> generate_corpus(const TeacherEnsemble& ensemble,
                                              std::span<const ContextId> contexts,
                                              int per_context, int max_len, int threads) {
  if (per_context < 1) throw InvalidArgument("generate_corpus: per_context must be >= 1");
  const std::size_t n = ensemble.size();
  const auto per = static_cast<std::size_t>(per_context);
  std::vector<TrajectoryRecord> records(contexts.size() * n * per);

  parallel_for(contexts.size(), threads, [&](std::size_t c) {
    const auto step = static_cast<std::int64_t>(c);
    const TeacherEnsemble snapshot = apply_drift(ensemble, step);
    for (std::size_t u = 0; u < n; ++u) {
      for (std::size_t r = 0; r < per; ++r) {
        const auto seed = derive_seed(ensemble.seed, {c, u, r});
        CotStream s = sample_trajectory(snapshot.teachers[u], contexts[c], max_len, seed);
        auto& rec = records[(c * n + u) * per + r];
        rec.id = "c" + std::to_string(c) + "/" + ensemble.names[u] + "/" + std::to_string(r);
        rec.context = contexts[c];
        rec.teacher_id = ensemble.names[u];
        std::vector<double> lps;
        lps.reserve(s.tokens.size());
        for (std::size_t j = 0; j < s.tokens.size(); ++j)
          lps.push_back(s.states[j].predictive.log_prob(s.tokens[j]));
        rec.tokens = std::move(s.tokens);
        rec.step_logprobs = std::move(lps);
        rec.corpus_step = step;
      }
    }
  });
  return records;
}

}  // namespace mtkd
