#include "mtkd/drift.hpp"

#include "mtkd/parallel.hpp"
#include "mtkd/random.hpp"

#include <algorithm>

namespace mtkd {
namespace {

Eigen::VectorXd smooth(const Eigen::VectorXd& counts, double lambda) {
  Eigen::VectorXd p = counts.array() + lambda;
  return p / p.sum();
}

/// Jeffreys divergence KL(p||q) + KL(q||p) = Sum (p - q)(log p - log q).
double bucket_jeffreys(const Eigen::VectorXd& ca, const Eigen::VectorXd& cb, double lambda) {
  const Eigen::VectorXd p = smooth(ca, lambda);
  const Eigen::VectorXd q = smooth(cb, lambda);
  return ((p - q).array() * (p.array().log() - q.array().log())).sum();
}

struct BucketStat {
  double statistic = 0;
  std::size_t shared = 0;
  double unmatched = 0;
};

/// Rows of `a` and `b` are aligned buckets; a zero row means "absent from that window".
BucketStat bucket_statistic(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, double lambda) {
  BucketStat out;
  double total = 0, matched = 0, acc = 0;
  for (Eigen::Index k = 0; k < a.rows(); ++k) {
    const double na = a.row(k).sum();
    const double nb = b.row(k).sum();
    total += na + nb;
    if (na > 0 && nb > 0) {
      acc += bucket_jeffreys(a.row(k).transpose(), b.row(k).transpose(), lambda);
      matched += na + nb;
      ++out.shared;
    }
  }
  out.statistic = out.shared ? acc / static_cast<double>(out.shared) : 0.0;
  out.unmatched = total > 0 ? (total - matched) / total : 0.0;
  return out;
}

Eigen::VectorXd token_counts(const TrajectoryRecord& rec, Eigen::Index vocab_size) {
  Eigen::VectorXd c = Eigen::VectorXd::Zero(vocab_size);
  for (Token t : rec.tokens) {
    if (t < 0 || t >= vocab_size)
      throw DataError("record '" + rec.id + "': token " + std::to_string(t) + " outside vocabulary");
    c(t) += 1.0;
  }
  return c;
}

}  // namespace

StreamWindow::StreamWindow(std::string teacher, std::span<const TrajectoryRecord> records,
                           Eigen::Index vocab_size)
    : teacher_(std::move(teacher)), record_count_(records.size()), vocab_size_(vocab_size) {
  if (vocab_size < 1) throw InvalidArgument("stream window: vocab size must be positive");
  for (const auto& rec : records) {
    auto [it, fresh] = counts_.try_emplace(rec.context, Eigen::VectorXd::Zero(vocab_size));
    it->second += token_counts(rec, vocab_size);
  }
}

Categorical StreamWindow::summary(const ContextId& context, double smoothing) const {
  auto it = counts_.find(context);
  if (it == counts_.end()) return Categorical::uniform(vocab_size_);
  return Categorical(smooth(it->second, smoothing));
}

DivergenceResult stream_divergence_detail(const StreamWindow& a, const StreamWindow& b,
                                          double smoothing) {
  if (a.vocab_size() != b.vocab_size())
    throw InvalidArgument("stream_divergence: windows use different vocabularies");
  if (a.record_count() == 0 || b.record_count() == 0)
    throw InvalidArgument("stream_divergence: windows must be non-empty");
  std::map<ContextId, std::size_t> buckets;
  for (const auto& [ctx, _] : a.counts()) buckets.emplace(ctx, 0);
  for (const auto& [ctx, _] : b.counts()) buckets.emplace(ctx, 0);
  std::size_t k = 0;
  for (auto& [_, idx] : buckets) idx = k++;

  const Eigen::Index rows = static_cast<Eigen::Index>(buckets.size());
  Eigen::MatrixXd ma = Eigen::MatrixXd::Zero(rows, a.vocab_size());
  Eigen::MatrixXd mb = Eigen::MatrixXd::Zero(rows, a.vocab_size());
  for (const auto& [ctx, c] : a.counts()) ma.row(static_cast<Eigen::Index>(buckets[ctx])) = c;
  for (const auto& [ctx, c] : b.counts()) mb.row(static_cast<Eigen::Index>(buckets[ctx])) = c;

  const BucketStat s = bucket_statistic(ma, mb, smoothing);
  if (s.shared == 0) throw NoSharedContexts("stream_divergence: windows share no context bucket");
  return {s.statistic, s.shared, s.unmatched};
}

double stream_divergence(const StreamWindow& a, const StreamWindow& b, double smoothing) {
  return stream_divergence_detail(a, b, smoothing).statistic;
}

double permutation_threshold(std::vector<double> replicates, double level) {
  if (replicates.empty()) throw InvalidArgument("permutation_threshold: no replicates");
  std::sort(replicates.begin(), replicates.end());
  const auto p = static_cast<double>(replicates.size());
  auto k = static_cast<std::size_t>(std::ceil((1.0 - level) * p - 1e-12));
  k = std::clamp<std::size_t>(k, 1, replicates.size());
  return replicates[k - 1];
}

namespace {

/// Pooled records of one teacher, encoded for fast re-splitting.
struct PooledTeacher {
  std::string name;
  Eigen::MatrixXd counts;            // 2W x V
  std::vector<Eigen::Index> bucket;  // per record
  Eigen::Index buckets = 0;
};

double resplit_statistic(const PooledTeacher& pool, std::size_t window, Engine& rng,
                         double lambda) {
  const std::size_t n = pool.bucket.size();
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  // Partial Fisher-Yates: the first `window` slots form a uniform random subset.
  for (std::size_t i = 0; i < window; ++i) std::swap(idx[i], idx[i + uniform_index(rng, n - i)]);

  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(pool.buckets, pool.counts.cols());
  Eigen::MatrixXd b = Eigen::MatrixXd::Zero(pool.buckets, pool.counts.cols());
  for (std::size_t i = 0; i < n; ++i) {
    auto& target = i < window ? a : b;
    target.row(pool.bucket[idx[i]]) += pool.counts.row(static_cast<Eigen::Index>(idx[i]));
  }
  return bucket_statistic(a, b, lambda).statistic;
}

}  // namespace

DriftReport detect_drift(std::span<const TrajectoryRecord> history, std::int64_t step,
                         Eigen::Index vocab_size, const DriftOptions& options) {
  if (options.window < 1) throw InvalidArgument("detect_drift: window must be >= 1");
  if (!(options.alpha > 0 && options.alpha < 1))
    throw InvalidArgument("detect_drift: alpha must lie in (0, 1)");
  if (options.permutations < 100) throw InvalidArgument("detect_drift: permutations must be >= 100");

  std::map<std::string, std::vector<const TrajectoryRecord*>> by_teacher;
  for (const auto& rec : history)
    if (rec.corpus_step < step) by_teacher[rec.teacher_id].push_back(&rec);
  for (const auto& rec : history) by_teacher.try_emplace(rec.teacher_id);
  if (by_teacher.empty()) throw InsufficientHistory("detect_drift: no records");

  const auto w = static_cast<std::size_t>(options.window);
  DriftReport report;
  report.step = step;
  std::vector<PooledTeacher> pools;
  for (auto& [name, recs] : by_teacher) {
    if (recs.size() < 2 * w)
      throw InsufficientHistory("detect_drift: teacher '" + name + "' has " +
                                std::to_string(recs.size()) + " records before step " +
                                std::to_string(step) + ", need " + std::to_string(2 * w));
    std::stable_sort(recs.begin(), recs.end(), [](const auto* x, const auto* y) {
      return x->corpus_step < y->corpus_step;
    });
    std::vector<TrajectoryRecord> earlier, later;
    for (std::size_t i = recs.size() - 2 * w; i < recs.size() - w; ++i) earlier.push_back(*recs[i]);
    for (std::size_t i = recs.size() - w; i < recs.size(); ++i) later.push_back(*recs[i]);

    const StreamWindow wa(name, earlier, vocab_size);
    const StreamWindow wb(name, later, vocab_size);
    const auto observed = stream_divergence_detail(wa, wb, options.smoothing);
    report.per_teacher.push_back({name, observed.statistic, 0.0, false, observed.unmatched_mass});

    PooledTeacher pool;
    pool.name = name;
    pool.counts.resize(static_cast<Eigen::Index>(2 * w), vocab_size);
    std::map<ContextId, Eigen::Index> bucket_ids;
    for (const auto* r : recs) bucket_ids.emplace(r->context, 0);
    Eigen::Index next = 0;
    for (auto& [_, id] : bucket_ids) id = next++;
    pool.buckets = next;
    for (std::size_t i = 0; i < 2 * w; ++i) {
      const auto& rec = *recs[recs.size() - 2 * w + i];
      pool.counts.row(static_cast<Eigen::Index>(i)) = token_counts(rec, vocab_size).transpose();
      pool.bucket.push_back(bucket_ids.at(rec.context));
    }
    pools.push_back(std::move(pool));
  }

  const auto n_teachers = pools.size();
  const auto n_perm = static_cast<std::size_t>(options.permutations);
  // replicates[u * P + r]
  std::vector<double> replicates(n_teachers * n_perm);
  parallel_for(n_perm, options.threads, [&](std::size_t r) {
    for (std::size_t u = 0; u < n_teachers; ++u) {
      Engine rng(derive_seed(options.seed, {static_cast<std::uint64_t>(step), r, u}));
      replicates[u * n_perm + r] = resplit_statistic(pools[u], w, rng, options.smoothing);
    }
  });

  const double per_level =
      options.bonferroni ? options.alpha / static_cast<double>(n_teachers) : options.alpha;
  std::vector<double> joint(n_perm, 0.0);
  for (std::size_t u = 0; u < n_teachers; ++u) {
    std::vector<double> mine(replicates.begin() + static_cast<std::ptrdiff_t>(u * n_perm),
                             replicates.begin() + static_cast<std::ptrdiff_t>((u + 1) * n_perm));
    auto& t = report.per_teacher[u];
    t.threshold = permutation_threshold(mine, per_level);
    t.flagged = t.statistic > t.threshold;
    for (std::size_t r = 0; r < n_perm; ++r) joint[r] += mine[r];
  }
  for (const auto& t : report.per_teacher) report.joint_statistic += t.statistic;
  report.joint_threshold = permutation_threshold(joint, options.alpha);
  report.joint_flagged = report.joint_statistic > report.joint_threshold;
  return report;
}

}  // namespace mtkd
