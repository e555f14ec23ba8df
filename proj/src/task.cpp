#include "mtkd/task.hpp"

#include "mtkd/random.hpp"

namespace mtkd {

void TaskSpec::validate() const {
  if (groups < 1) throw InvalidArgument("task.groups must be >= 1");
  if (contexts < 1) throw InvalidArgument("task.contexts must be >= 1");
  if (answer_tokens < 1) throw InvalidArgument("task.answer_tokens must be >= 1");
  if (answer_length < 1) throw InvalidArgument("task.answer_length must be >= 1");
  if (rounds < 1) throw InvalidArgument("task.rounds must be >= 1");
}

std::vector<ContextId> ConceptTask::stream() const {
  std::vector<ContextId> out;
  for (std::size_t s = 0; s < steps(); ++s) out.push_back(contexts[context_at(s)]);
  return out;
}

ConceptTask make_task(const TaskSpec& spec) {
  spec.validate();
  ConceptTask task{spec, Vocab::with_answer_tokens(spec.answer_tokens), {}, {}};
  for (int c = 0; c < spec.contexts; ++c) {
    task.contexts.push_back(ContextId{c % spec.groups, c});
    Engine rng(derive_seed(spec.seed, {static_cast<std::uint64_t>(c)}));
    std::vector<Token> answer;
    for (int j = 0; j < spec.answer_length; ++j)
      answer.push_back(static_cast<Token>(uniform_index(rng, static_cast<std::uint64_t>(spec.answer_tokens))));
    task.gold.push_back(std::move(answer));
  }
  return task;
}

void EnsembleSpec::validate(const TaskSpec& task) const {
  if (teachers < 1) throw InvalidArgument("ensemble.teachers must be >= 1");
  if (!orders.empty() && orders.size() != static_cast<std::size_t>(teachers))
    throw InvalidArgument("ensemble.orders must have one entry per teacher");
  if (!temperatures.empty() && temperatures.size() != static_cast<std::size_t>(teachers))
    throw InvalidArgument("ensemble.temperatures must have one entry per teacher");
  // Keys must tell answer positions apart, which needs order >= answer length.
  auto check_order = [&](int k) {
    if (k < task.answer_length)
      throw InvalidArgument("ensemble.order must be >= task.answer_length");
  };
  check_order(order);
  for (int k : orders) check_order(k);
  auto check_temp = [](double t) {
    if (!(t > 0) || !std::isfinite(t)) throw InvalidArgument("ensemble.temperature must be positive");
  };
  check_temp(temperature);
  for (double t : temperatures) check_temp(t);
  if (!(expert_peak > 0 && expert_peak <= 1))
    throw InvalidArgument("ensemble.expert_peak must be in (0, 1]");
  if (!(off_group_noise >= 0 && off_group_noise <= 1))
    throw InvalidArgument("ensemble.off_group_noise must be in [0, 1]");
  if (drift_span < 0) throw InvalidArgument("ensemble.drift_span must be >= 0");
}

namespace {

/// All answer-token sequences of length n.
std::vector<std::vector<Token>> answer_prefixes(int answers, int n) {
  std::vector<std::vector<Token>> out{{}};
  for (int j = 0; j < n; ++j) {
    std::vector<std::vector<Token>> next;
    for (const auto& p : out)
      for (Token a = 0; a < answers; ++a) {
        auto q = p;
        q.push_back(a);
        next.push_back(std::move(q));
      }
    out = std::move(next);
  }
  return out;
}

Eigen::VectorXd answer_logits(const ConceptTask& task, const EnsembleSpec& spec, Token gold,
                              bool expert, double temperature, std::uint64_t seed) {
  const int answers = task.spec.answer_tokens;
  Eigen::VectorXd p = Eigen::VectorXd::Zero(task.vocab.size());
  if (answers == 1) {
    p(gold) = 1.0;
  } else {
    p.head(answers).setConstant((1.0 - spec.expert_peak) / (answers - 1));
    p(gold) = spec.expert_peak;
    if (!expert) {
      Engine rng(seed);
      const double tv = std::min(spec.expert_peak, 2.0 * spec.off_group_noise * uniform01(rng));
      auto wrong = static_cast<Token>(uniform_index(rng, static_cast<std::uint64_t>(answers - 1)));
      if (wrong >= gold) ++wrong;
      p(gold) -= tv;
      p(wrong) += tv;
    }
  }
  return temperature * p.array().log().matrix();
}

}  // namespace

TeacherEnsemble make_ensemble(const ConceptTask& task, const EnsembleSpec& spec) {
  spec.validate(task.spec);
  const int n = spec.teachers;
  const int groups = task.spec.groups;
  const int length = task.spec.answer_length;
  std::vector<std::vector<std::vector<Token>>> prefixes;
  for (int j = 0; j < length; ++j) prefixes.push_back(answer_prefixes(task.spec.answer_tokens, j));

  Eigen::VectorXd after_answer =
      Eigen::VectorXd::Constant(task.vocab.size(), -std::numeric_limits<double>::infinity());
  after_answer(task.vocab.eos()) = 0.0;

  std::vector<TabularPolicy> teachers;
  std::vector<DriftEvent> events;
  std::int64_t last_step = -1;
  for (int u = 0; u < n; ++u) {
    const auto uu = static_cast<std::uint64_t>(u);
    const int order = spec.orders.empty() ? spec.order : spec.orders[static_cast<std::size_t>(u)];
    const double temp = spec.temperatures.empty() ? spec.temperature
                                                  : spec.temperatures[static_cast<std::size_t>(u)];
    TabularPolicy policy(task.vocab, order, temp);
    policy.set_default_logits(temp * after_answer);

    DriftEvent event;
    event.teacher = u;
    event.kind = spec.drift_kind;
    event.span = spec.drift_span;
    event.mode = PerturbationMode::replace;

    for (std::size_t c = 0; c < task.contexts.size(); ++c) {
      const bool expert = task.group_of(c) == u % groups;
      for (int j = 0; j < length; ++j) {
        const auto jj = static_cast<std::uint64_t>(j);
        const Token g = task.gold[c][static_cast<std::size_t>(j)];
        const auto row = answer_logits(task, spec, g, expert, temp,
                                       derive_seed(spec.seed, {uu, c, jj, 0}));
        std::optional<Eigen::VectorXd> drifted;
        if (spec.drift && !expert)
          drifted = answer_logits(task, spec, g, false, temp, derive_seed(spec.seed, {uu, c, jj, 1}));
        for (const auto& prefix : prefixes[static_cast<std::size_t>(j)]) {
          const RowKey key = policy.key(task.contexts[c], prefix);
          policy.set_logits(key, row);
          if (drifted) event.rows.emplace(key, *drifted);
        }
      }
    }
    teachers.push_back(std::move(policy));
    if (!event.rows.empty()) {
      event.step = std::max<std::int64_t>(
          static_cast<std::int64_t>(u + 1) * static_cast<std::int64_t>(task.steps()) / (n + 1), last_step + 1);
      last_step = event.step;
      events.push_back(std::move(event));
    }
  }
  return TeacherEnsemble(std::move(teachers), DriftSchedule(std::move(events)), spec.seed);
}

namespace {

/// `correct[i]` scores context `context_of[i]`.
EvalResult tally(const ConceptTask& task, const std::vector<bool>& correct,
                 const std::vector<std::size_t>& context_of) {
  const auto groups = static_cast<std::size_t>(task.spec.groups);
  EvalResult out;
  out.group_accuracy.assign(groups, 0.0);
  out.group_size.assign(groups, 0);
  for (std::size_t c = 0; c < correct.size(); ++c) {
    const auto g = static_cast<std::size_t>(task.group_of(context_of[c]));
    out.group_size[g] += 1;
    out.group_accuracy[g] += correct[c] ? 1.0 : 0.0;
  }
  double sum = 0;
  int nonempty = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    if (out.group_size[g] == 0) continue;
    out.group_accuracy[g] /= out.group_size[g];
    sum += out.group_accuracy[g];
    ++nonempty;
  }
  out.macro = nonempty ? sum / nonempty : 0.0;
  return out;
}

bool answer_matches(const std::vector<Token>& decoded, const std::vector<Token>& gold) {
  return decoded.size() >= gold.size() && std::equal(gold.begin(), gold.end(), decoded.begin());
}

}  // namespace

EvalResult evaluate_policy(const ConceptTask& task, const TabularPolicy& policy) {
  if (!(policy.vocab() == task.vocab))
    throw VocabMismatch("checkpoint vocabulary (" + std::to_string(policy.vocab_size()) +
                        " symbols) does not match the task vocabulary (" +
                        std::to_string(task.vocab.size()) + " symbols)");
  std::vector<bool> correct;
  std::vector<std::size_t> context_of;
  for (std::size_t c = 0; c < task.contexts.size(); ++c) {
    correct.push_back(answer_matches(
        greedy_decode(policy, task.contexts[c], {}, task.spec.answer_length), task.gold[c]));
    context_of.push_back(c);
  }
  return tally(task, correct, context_of);
}

EvalResult evaluate_teacher(const ConceptTask& task, const TeacherEnsemble& ensemble, std::size_t u) {
  if (u >= ensemble.size()) throw UnknownTeacherIndex("no teacher " + std::to_string(u));
  const std::size_t single[] = {u};
  const TeacherEnsemble alone = select_teachers(ensemble, single);
  std::vector<bool> correct;
  std::vector<std::size_t> context_of;
  for (std::size_t s = 0; s < task.steps(); ++s) {
    const std::size_t c = task.context_at(s);
    const TeacherEnsemble at = apply_drift(alone, static_cast<std::int64_t>(s));
    correct.push_back(answer_matches(
        greedy_decode(at.teachers.front(), task.contexts[c], {}, task.spec.answer_length),
        task.gold[c]));
    context_of.push_back(c);
  }
  return tally(task, correct, context_of);
}

}  // namespace mtkd
