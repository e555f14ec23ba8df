#pragma once

#include "mtkd/policy.hpp"
#include "mtkd/record.hpp"
#include "mtkd/teachers.hpp"

namespace mtkd {

struct EmptyAlignmentSet : DataError {
  using DataError::DataError;
};
struct ContextOverflow : Error {
  using Error::Error;
};

/// The teachers' predictive distributions at one shared alignment point.
struct PredictiveSet {
  std::vector<Categorical> per_teacher;
};

/// Minimizer of Sum_u w_u KL(p_u || q) over the simplex: the weighted mean
/// Sum_u w_u p_u. Weights default to uniform and must sum to 1.
Categorical barycenter(const PredictiveSet& zset, std::span<const double> weights = {});

/// Trainable student with value semantics. A reference snapshot refuses mutation.
class StudentPolicy {
 public:
  explicit StudentPolicy(TabularPolicy policy);

  /// Zero logits everywhere (uniform rows).
  static StudentPolicy uniform(Vocab vocab, int order);

  const TabularPolicy& policy() const { return policy_; }
  TabularPolicy& mutable_policy();
  bool is_reference() const { return reference_; }

  /// Frozen deep copy designated as the reference policy.
  StudentPolicy freeze() const;

 private:
  TabularPolicy policy_;
  bool reference_ = false;
};

struct AlignmentPoint {
  ContextId context;
  std::vector<Token> prefix;
  PredictiveSet zset;
  /// Multiplicity of this point in the corpus.
  double weight = 1.0;
};

/// Weighted mean over points of KL(barycenter(zset) || q_theta(. | context, prefix)).
double spd_loss(const TabularPolicy& student, std::span<const AlignmentPoint> batch,
                std::span<const double> teacher_weights = {});

/// Gradient of spd_loss with respect to the student's table (rows must be materialized).
Eigen::MatrixXd spd_grad(const TabularPolicy& student, std::span<const AlignmentPoint> batch,
                         std::span<const double> teacher_weights = {});

enum class SpdMode {
  /// Per-step KL toward the teachers' barycenter at every shared prefix.
  barycenter,
  /// Sequence-level cross-entropy on the realized teacher tokens.
  cross_entropy,
};

struct SpdConfig {
  int steps = 200;
  double lr = 0.1;
  double momentum = 0.0;
  SpdMode mode = SpdMode::barycenter;
  /// Uniform random fraction of alignment points kept.
  double subsample_fraction = 1.0;
  std::uint64_t seed = 0;
};

struct SpdResult {
  StudentPolicy student;
  StudentPolicy reference;
  std::vector<double> loss_curve;  // loss before each step, then the final loss
};

/// Alignment points harvested from every teacher trajectory prefix whose
/// context is covered by all teachers in the corpus. Every teacher is queried
/// at the shared prefix with the ensemble drifted to the record's corpus step.
/// Duplicate (step, context, prefix) points are merged into one weighted point.
std::vector<AlignmentPoint> build_alignment_points(const TeacherEnsemble& ensemble,
                                                   std::span<const TrajectoryRecord> corpus,
                                                   SpdMode mode = SpdMode::barycenter);

SpdResult train_spd(const StudentPolicy& student, const TeacherEnsemble& ensemble,
                    std::span<const TrajectoryRecord> corpus, const SpdConfig& config);

/// Full-batch descent on fixed alignment points; exposed for tests.
SpdResult train_spd_points(const StudentPolicy& student, std::span<const AlignmentPoint> points,
                           const SpdConfig& config);

enum class DecodeMode { sample, greedy };

struct SelfDistillOptions {
  int context_cap = 64;
  DecodeMode decode = DecodeMode::sample;
};

/// Conditioning tail for self-distillation: trajectories in the given order,
/// trailing EOS dropped, each followed by SEP, then truncated from the left so
/// that context plus tail fit in `context_cap` tokens.
std::vector<Token> encode_teacher_trajectories(const Vocab& vocab, const ContextId& context,
                                               std::span<const std::vector<Token>> trajectories,
                                               int context_cap);

/// t+ drawn from the reference policy conditioned on the encoded trajectories.
std::vector<Token> self_distill(const StudentPolicy& reference, const ContextId& context,
                                std::span<const std::vector<Token>> teacher_trajectories,
                                int max_len, std::uint64_t seed,
                                const SelfDistillOptions& options = {});

}  // namespace mtkd
