#pragma once

#include "mtkd/policy.hpp"

namespace mtkd {

struct DivergenceDetected : Error {
  using Error::Error;
};

/// Preferred trajectory t+ against N weighted negative teacher trajectories.
struct PreferenceTuple {
  ContextId context;
  std::vector<Token> positive;
  std::vector<std::vector<Token>> negatives;
  std::vector<double> weights;

  void validate() const;
};

enum class WeightsMode {
  /// Every negative weighs 1.
  uniform,
  /// Use the weights carried by each tuple.
  supplied,
};

struct ApoConfig {
  double beta = 0.1;
  WeightsMode weights = WeightsMode::uniform;
  double lr = 0.1;
  int steps = 100;
  double momentum = 0.0;
  std::uint64_t seed = 0;
  /// Divide sequence log-probabilities by length (off by default).
  bool length_normalized = false;

  void validate() const;
};

struct ApoOptions {
  double beta = 0.1;
  bool length_normalized = false;
};

/// beta * (log pi_theta(t) - log pi_ref(t)).
double reward(const TabularPolicy& policy, const TabularPolicy& reference,
              const ContextId& context, std::span<const Token> t, double beta,
              bool length_normalized = false);

/// exp(r+) / (exp(r+) + Sum_u w_u exp(r_u)), evaluated with a max-shifted
/// log-sum-exp over {r+} and {r_u + log w_u : w_u > 0}.
double preference_probability(const PreferenceTuple& tuple, const TabularPolicy& policy,
                              const TabularPolicy& reference, const ApoOptions& options);

/// Mean of -log preference_probability over the batch.
double apo_loss(std::span<const PreferenceTuple> batch, const TabularPolicy& policy,
                const TabularPolicy& reference, const ApoOptions& options);

/// The same objective written as ratios of sequence probabilities raised to
/// beta, without log-space shifting. Agrees with apo_loss when nothing overflows.
double apo_loss_expanded(std::span<const PreferenceTuple> batch, const TabularPolicy& policy,
                         const TabularPolicy& reference, const ApoOptions& options);

/// Adds a row for every key a batch sequence visits under `policy`.
void materialize_rows(TabularPolicy& policy, std::span<const PreferenceTuple> batch);

/// d apo_loss / d table, same shape as policy.table(). Every visited row must be
/// materialized.
Eigen::MatrixXd apo_grad(std::span<const PreferenceTuple> batch, const TabularPolicy& policy,
                         const TabularPolicy& reference, const ApoOptions& options);

struct ApoResult {
  TabularPolicy policy;
  std::vector<double> loss_curve;  // loss before each step, then the final loss
};

/// Full-batch gradient descent on apo_loss; the reference is never modified.
/// Throws DivergenceDetected when the loss exceeds 10x its initial value.
ApoResult train_apo(const TabularPolicy& policy, const TabularPolicy& reference,
                    std::span<const PreferenceTuple> tuples, const ApoConfig& config);

}  // namespace mtkd
