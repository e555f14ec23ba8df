#include "mtkd/distill.hpp"

#include "mtkd/random.hpp"

#include <set>
#include <tuple>

namespace mtkd {

Categorical barycenter(const PredictiveSet& zset, std::span<const double> weights) {
  const auto n = zset.per_teacher.size();
  if (n == 0) throw InvalidArgument("barycenter: empty predictive set");
  if (!weights.empty()) {
    if (weights.size() != n) throw InvalidArgument("barycenter: one weight per teacher required");
    double total = 0;
    for (double w : weights) {
      if (!(w >= 0) || !std::isfinite(w)) throw InvalidArgument("barycenter: weights must be >= 0");
      total += w;
    }
    if (std::abs(total - 1.0) > kNormTolerance)
      throw InvalidArgument("barycenter: weights must sum to 1");
  }
  const Eigen::Index v = zset.per_teacher.front().size();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(v);
  for (std::size_t u = 0; u < n; ++u) {
    if (zset.per_teacher[u].size() != v) throw InvalidArgument("barycenter: vocabulary mismatch");
    const double w = weights.empty() ? 1.0 / static_cast<double>(n) : weights[u];
    mean += w * zset.per_teacher[u].probs();
  }
  return Categorical(mean / mean.sum());
}

StudentPolicy::StudentPolicy(TabularPolicy policy)
    : policy_(std::move(policy)) {}

StudentPolicy StudentPolicy::uniform(Vocab vocab, int order) {
  return StudentPolicy(TabularPolicy(std::move(vocab), order, 1.0));
}

TabularPolicy& StudentPolicy::mutable_policy() {
  if (reference_) throw std::logic_error("student: reference snapshots are immutable");
  return policy_;
}

StudentPolicy StudentPolicy::freeze() const {
  StudentPolicy out(policy_);
  out.reference_ = true;
  return out;
}

namespace {

struct PreparedPoint {
  Eigen::Index row;
  Eigen::VectorXd target;
  double weight;
};

void materialize_points(TabularPolicy& student, std::span<const AlignmentPoint> batch) {
  std::vector<RowKey> keys;
  keys.reserve(batch.size());
  for (const auto& pt : batch) keys.push_back(student.key(pt.context, pt.prefix));
  student.materialize(keys);
}

std::vector<PreparedPoint> prepare(const TabularPolicy& student,
                                   std::span<const AlignmentPoint> batch,
                                   std::span<const double> teacher_weights) {
  std::vector<PreparedPoint> out;
  out.reserve(batch.size());
  for (const auto& pt : batch) {
    const auto row = student.find_row(student.key(pt.context, pt.prefix));
    if (!row) throw InvalidArgument("spd: student row for an alignment point is not materialized");
    out.push_back({*row, barycenter(pt.zset, teacher_weights).probs(), pt.weight});
  }
  return out;
}

double prepared_loss(const TabularPolicy& student, std::span<const PreparedPoint> pts) {
  std::vector<double> terms;
  terms.reserve(pts.size());
  double total_weight = 0;
  for (const auto& p : pts) {
    const Eigen::VectorXd q = softmax(student.table().row(p.row).transpose().eval(),
                                      student.temperature());
    terms.push_back(p.weight * kl_divergence(p.target, q));
    total_weight += p.weight;
  }
  return pairwise_sum(terms) / total_weight;
}

Eigen::MatrixXd prepared_grad(const TabularPolicy& student, std::span<const PreparedPoint> pts) {
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(student.rows(), student.vocab_size());
  double total_weight = 0;
  for (const auto& p : pts) total_weight += p.weight;
  for (const auto& p : pts) {
    const Eigen::VectorXd q = softmax(student.table().row(p.row).transpose().eval(),
                                      student.temperature());
    g.row(p.row) += (p.weight / (total_weight * student.temperature())) * (q - p.target).transpose();
  }
  return g;
}

}  // namespace

double spd_loss(const TabularPolicy& student, std::span<const AlignmentPoint> batch,
                std::span<const double> teacher_weights) {
  if (batch.empty()) throw InvalidArgument("spd_loss: empty batch");
  std::vector<double> terms;
  double total_weight = 0;
  for (const auto& pt : batch) {
    const Categorical target = barycenter(pt.zset, teacher_weights);
    const Categorical q = student.predictive(pt.context, pt.prefix);
    terms.push_back(pt.weight * kl_divergence(target, q));
    total_weight += pt.weight;
  }
  return pairwise_sum(terms) / total_weight;
}

Eigen::MatrixXd spd_grad(const TabularPolicy& student, std::span<const AlignmentPoint> batch,
                         std::span<const double> teacher_weights) {
  if (batch.empty()) throw InvalidArgument("spd_grad: empty batch");
  return prepared_grad(student, prepare(student, batch, teacher_weights));
}

std::vector<AlignmentPoint> build_alignment_points(const TeacherEnsemble& ensemble,
                                                   std::span<const TrajectoryRecord> corpus,
                                                   SpdMode mode) {
  std::set<std::string> teacher_ids;
  std::map<ContextId, std::set<std::string>> coverage;
  for (const auto& rec : corpus) {
    rec.validate();
    teacher_ids.insert(rec.teacher_id);
    coverage[rec.context].insert(rec.teacher_id);
    if (mode == SpdMode::barycenter && !ensemble.index_of(rec.teacher_id))
      throw DataError("record '" + rec.id + "': teacher '" + rec.teacher_id +
                      "' is not in the ensemble");
  }

  using PointKey = std::tuple<std::int64_t, ContextId, std::vector<Token>>;
  std::map<PointKey, std::pair<double, Eigen::VectorXd>> merged;  // weight, token counts
  const Eigen::Index v = ensemble.teachers.front().vocab_size();
  for (const auto& rec : corpus) {
    if (coverage[rec.context].size() != teacher_ids.size()) continue;
    for (std::size_t j = 0; j < rec.tokens.size(); ++j) {
      PointKey key{rec.corpus_step, rec.context,
                   std::vector<Token>(rec.tokens.begin(), rec.tokens.begin() + static_cast<std::ptrdiff_t>(j))};
      auto [it, fresh] = merged.try_emplace(std::move(key), 0.0, Eigen::VectorXd::Zero(v));
      it->second.first += 1.0;
      it->second.second(rec.tokens[j]) += 1.0;
    }
  }
  if (merged.empty())
    throw EmptyAlignmentSet("spd: no alignment points (teachers share no contexts)");

  std::map<std::int64_t, TeacherEnsemble> snapshots;
  std::vector<AlignmentPoint> points;
  points.reserve(merged.size());
  for (auto& [key, acc] : merged) {
    const auto& [step, context, prefix] = key;
    AlignmentPoint pt{context, prefix, {}, acc.first};
    if (mode == SpdMode::barycenter) {
      auto it = snapshots.find(step);
      if (it == snapshots.end()) it = snapshots.emplace(step, apply_drift(ensemble, step)).first;
      for (const auto& teacher : it->second.teachers)
        pt.zset.per_teacher.push_back(teacher.predictive(context, prefix));
    } else {
      pt.zset.per_teacher.push_back(Categorical(acc.second / acc.second.sum()));
    }
    points.push_back(std::move(pt));
  }
  return points;
}

SpdResult train_spd_points(const StudentPolicy& student, std::span<const AlignmentPoint> points,
                           const SpdConfig& config) {
  if (config.steps < 0) throw InvalidArgument("spd: steps must be >= 0");
  if (!(config.lr > 0)) throw InvalidArgument("spd: lr must be positive");
  if (points.empty()) throw EmptyAlignmentSet("spd: no alignment points");

  std::vector<AlignmentPoint> kept;
  if (config.subsample_fraction < 1.0) {
    Engine rng(derive_seed(config.seed, {0x5bd1e995}));
    for (const auto& p : points)
      if (uniform01(rng) < config.subsample_fraction) kept.push_back(p);
    if (kept.empty()) throw EmptyAlignmentSet("spd: subsampling removed every alignment point");
    points = kept;
  }

  StudentPolicy trained(student.policy());
  if (config.steps == 0) return {trained, trained.freeze(), {}};

  TabularPolicy& theta = trained.mutable_policy();
  materialize_points(theta, points);
  const auto prepared = prepare(theta, points, {});
  SpdResult result{trained, trained, {}};
  Eigen::MatrixXd velocity = Eigen::MatrixXd::Zero(theta.rows(), theta.vocab_size());
  for (int step = 0; step < config.steps; ++step) {
    result.loss_curve.push_back(prepared_loss(theta, prepared));
    velocity = config.momentum * velocity - config.lr * prepared_grad(theta, prepared);
    theta.table() += velocity;
  }
  result.loss_curve.push_back(prepared_loss(theta, prepared));
  result.student = trained;
  result.reference = trained.freeze();
  return result;
}

SpdResult train_spd(const StudentPolicy& student, const TeacherEnsemble& ensemble,
                    std::span<const TrajectoryRecord> corpus, const SpdConfig& config) {
  if (corpus.empty()) throw EmptyAlignmentSet("spd: empty corpus");
  const auto points = build_alignment_points(ensemble, corpus, config.mode);
  return train_spd_points(student, points, config);
}

std::vector<Token> encode_teacher_trajectories(const Vocab& vocab, const ContextId& context,
                                               std::span<const std::vector<Token>> trajectories,
                                               int context_cap) {
  if (trajectories.empty()) throw InvalidArgument("self_distill: no teacher trajectories");
  if (context_cap < 0 || static_cast<std::size_t>(context_cap) < context.size())
    throw ContextOverflow("self_distill: context of " + std::to_string(context.size()) +
                          " tokens exceeds the cap of " + std::to_string(context_cap));
  std::vector<Token> tail;
  for (const auto& t : trajectories) {
    auto end = t.end();
    if (end != t.begin() && *(end - 1) == vocab.eos()) --end;
    tail.insert(tail.end(), t.begin(), end);
    tail.push_back(vocab.sep());
  }
  const std::size_t room = static_cast<std::size_t>(context_cap) - context.size();
  if (tail.size() > room) tail.erase(tail.begin(), tail.end() - static_cast<std::ptrdiff_t>(room));
  return tail;
}

std::vector<Token> self_distill(const StudentPolicy& reference, const ContextId& context,
                                std::span<const std::vector<Token>> teacher_trajectories,
                                int max_len, std::uint64_t seed,
                                const SelfDistillOptions& options) {
  if (max_len < 1) throw InvalidArgument("self_distill: max_len must be >= 1");
  const auto& policy = reference.policy();
  std::vector<Token> history =
      encode_teacher_trajectories(policy.vocab(), context, teacher_trajectories, options.context_cap);
  if (options.decode == DecodeMode::greedy) return greedy_decode(policy, context, history, max_len);

  Engine rng(seed);
  std::vector<Token> out;
  for (int j = 0; j < max_len; ++j) {
    const Categorical z = policy.predictive(context, history);
    const auto t = static_cast<Token>(sample_index(z.probs(), rng));
    out.push_back(t);
    history.push_back(t);
    if (t == policy.vocab().eos()) break;
  }
  return out;
}

}  // namespace mtkd
