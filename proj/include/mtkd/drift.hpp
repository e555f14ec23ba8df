#pragma once

#include "mtkd/record.hpp"

#include <map>

namespace mtkd {

struct NoSharedContexts : DataError {
  using DataError::DataError;
};
struct InsufficientHistory : DataError {
  using DataError::DataError;
};

/// A window of one teacher's records summarized as token counts per context bucket.
class StreamWindow {
 public:
  StreamWindow(std::string teacher, std::span<const TrajectoryRecord> records,
               Eigen::Index vocab_size);

  const std::string& teacher() const { return teacher_; }
  std::size_t record_count() const { return record_count_; }
  Eigen::Index vocab_size() const { return vocab_size_; }
  /// Raw token counts per context bucket.
  const std::map<ContextId, Eigen::VectorXd>& counts() const { return counts_; }
  /// Add-lambda smoothed empirical token distribution of one bucket.
  Categorical summary(const ContextId& context, double smoothing = 0.5) const;

 private:
  std::string teacher_;
  std::size_t record_count_ = 0;
  Eigen::Index vocab_size_ = 0;
  std::map<ContextId, Eigen::VectorXd> counts_;
};

struct DivergenceResult {
  double statistic = 0;
  std::size_t shared_contexts = 0;
  /// Share of token mass in buckets present in only one window.
  double unmatched_mass = 0;
};

/// Mean symmetric KL between smoothed summaries over the shared context buckets.
double stream_divergence(const StreamWindow& a, const StreamWindow& b, double smoothing = 0.5);
DivergenceResult stream_divergence_detail(const StreamWindow& a, const StreamWindow& b,
                                          double smoothing = 0.5);

struct DriftOptions {
  int window = 500;
  double alpha = 0.05;
  int permutations = 1000;
  double smoothing = 0.5;
  /// Split alpha across teachers for the per-teacher flags (family-wise level alpha).
  bool bonferroni = true;
  std::uint64_t seed = 0;
  int threads = 1;
};

struct TeacherDrift {
  std::string teacher;
  double statistic = 0;
  double threshold = 0;
  bool flagged = false;
  double unmatched_mass = 0;
};

struct DriftReport {
  std::vector<TeacherDrift> per_teacher;
  double joint_statistic = 0;
  double joint_threshold = 0;
  bool joint_flagged = false;
  std::int64_t step = 0;
};

/// (1 - level) permutation quantile: the ceil((1 - level) * P)-th smallest replicate.
double permutation_threshold(std::vector<double> replicates, double level);

/// Windowed two-sample drift test at `step`.
///
/// For each teacher (grouped by teacher_id, sorted by name) the last 2W records
/// with corpus_step < step are split into an earlier and a later window of W.
/// Thresholds come from `permutations` random re-splits of the pooled 2W
/// records; the joint statistic is the sum of per-teacher statistics and is
/// calibrated against the sum of the per-teacher replicates.
DriftReport detect_drift(std::span<const TrajectoryRecord> history, std::int64_t step,
                         Eigen::Index vocab_size, const DriftOptions& options = {});

}  // namespace mtkd
