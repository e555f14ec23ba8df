#include "mtkd/apo.hpp"

#include <algorithm>
#include <map>

namespace mtkd {

void PreferenceTuple::validate() const {
  if (positive.empty()) throw InvalidArgument("preference tuple: t+ must be non-empty");
  if (negatives.empty()) throw InvalidArgument("preference tuple: need at least one negative");
  if (weights.size() != negatives.size())
    throw InvalidArgument("preference tuple: one weight per negative required");
  double total = 0;
  for (double w : weights) {
    if (!std::isfinite(w) || w < 0) throw InvalidArgument("preference tuple: weights must be finite and >= 0");
    total += w;
  }
  if (!(total > 0)) throw InvalidArgument("preference tuple: weights must not all be zero");
  for (const auto& n : negatives)
    if (n.empty()) throw InvalidArgument("preference tuple: negatives must be non-empty");
}

void ApoConfig::validate() const {
  if (!(beta > 0) || !std::isfinite(beta)) throw InvalidArgument("apo: beta must be positive");
  if (!(lr > 0)) throw InvalidArgument("apo: lr must be positive");
  if (steps < 0) throw InvalidArgument("apo: steps must be >= 0");
}

namespace {

double scaled_log_ratio(const TabularPolicy& policy, const TabularPolicy& reference,
                        const ContextId& context, std::span<const Token> t, bool normalized) {
  const double diff =
      sequence_log_prob(policy, context, t) - sequence_log_prob(reference, context, t);
  return normalized ? diff / static_cast<double>(t.size()) : diff;
}

/// Negative indices sorted by (sequence, weight): every reduction over
/// negatives runs in this order so outputs are invariant to how the caller
/// listed them.
std::vector<std::size_t> canonical_order(const PreferenceTuple& tuple) {
  std::vector<std::size_t> idx(tuple.negatives.size());
  for (std::size_t u = 0; u < idx.size(); ++u) idx[u] = u;
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (tuple.negatives[a] != tuple.negatives[b]) return tuple.negatives[a] < tuple.negatives[b];
    return tuple.weights[a] < tuple.weights[b];
  });
  return idx;
}

/// Rewards and normalized shares of one tuple.
struct TupleTerms {
  double r_pos = 0;
  std::vector<double> r_neg;
  double log_z = 0;              // log(exp(r+) + Sum w_u exp(r_u))
  std::vector<double> share;     // w_u exp(r_u) / Z
  double loss = 0;               // log_z - r+
};

TupleTerms tuple_terms(const PreferenceTuple& tuple, const TabularPolicy& policy,
                       const TabularPolicy& reference, const ApoOptions& opt) {
  tuple.validate();
  TupleTerms out;
  out.r_pos = opt.beta * scaled_log_ratio(policy, reference, tuple.context, tuple.positive,
                                          opt.length_normalized);
  std::vector<double> logits{out.r_pos};
  out.r_neg.resize(tuple.negatives.size());
  for (std::size_t u : canonical_order(tuple)) {
    const double r = opt.beta * scaled_log_ratio(policy, reference, tuple.context,
                                                 tuple.negatives[u], opt.length_normalized);
    out.r_neg[u] = r;
    if (tuple.weights[u] > 0) logits.push_back(r + std::log(tuple.weights[u]));
  }
  const double m = *std::max_element(logits.begin(), logits.end());
  std::sort(logits.begin() + 1, logits.end());
  double sum = 0;
  for (double x : logits) sum += std::exp(x - m);
  out.log_z = m + std::log(sum);
  for (std::size_t u = 0; u < tuple.negatives.size(); ++u)
    out.share.push_back(tuple.weights[u] > 0
                            ? std::exp(out.r_neg[u] + std::log(tuple.weights[u]) - out.log_z)
                            : 0.0);
  out.loss = out.log_z - out.r_pos;
  return out;
}

/// g += coef * d log pi(t) / d table.
void accumulate_sequence_grad(Eigen::MatrixXd& g, const TabularPolicy& policy,
                              const ContextId& context, std::span<const Token> t, double coef) {
  if (coef == 0.0) return;
  const double scale = coef / policy.temperature();
  for (std::size_t j = 0; j < t.size(); ++j) {
    const auto row = policy.find_row(policy.key(context, t.first(j)));
    if (!row) throw InvalidArgument("apo_grad: a visited row is not materialized");
    const Eigen::VectorXd q =
        softmax(policy.table().row(*row).transpose().eval(), policy.temperature());
    g.row(*row) -= scale * q.transpose();
    g(*row, t[j]) += scale;
  }
}

}  // namespace

double reward(const TabularPolicy& policy, const TabularPolicy& reference,
              const ContextId& context, std::span<const Token> t, double beta,
              bool length_normalized) {
  if (t.empty()) throw InvalidArgument("reward: empty sequence");
  return beta * scaled_log_ratio(policy, reference, context, t, length_normalized);
}

double preference_probability(const PreferenceTuple& tuple, const TabularPolicy& policy,
                              const TabularPolicy& reference, const ApoOptions& options) {
  const auto terms = tuple_terms(tuple, policy, reference, options);
  return std::exp(terms.r_pos - terms.log_z);
}

double apo_loss(std::span<const PreferenceTuple> batch, const TabularPolicy& policy,
                const TabularPolicy& reference, const ApoOptions& options) {
  if (batch.empty()) throw InvalidArgument("apo_loss: empty batch");
  std::vector<double> losses;
  losses.reserve(batch.size());
  for (const auto& tuple : batch) losses.push_back(tuple_terms(tuple, policy, reference, options).loss);
  return pairwise_sum(losses) / static_cast<double>(batch.size());
}

double apo_loss_expanded(std::span<const PreferenceTuple> batch, const TabularPolicy& policy,
                         const TabularPolicy& reference, const ApoOptions& options) {
  if (batch.empty()) throw InvalidArgument("apo_loss: empty batch");
  auto ratio_pow = [&](const ContextId& ctx, std::span<const Token> t) {
    const double p_theta = std::exp(sequence_log_prob(policy, ctx, t));
    const double p_ref = std::exp(sequence_log_prob(reference, ctx, t));
    const double exponent =
        options.length_normalized ? options.beta / static_cast<double>(t.size()) : options.beta;
    return std::pow(p_theta / p_ref, exponent);
  };
  std::vector<double> losses;
  for (const auto& tuple : batch) {
    tuple.validate();
    const double pos = ratio_pow(tuple.context, tuple.positive);
    double denom = pos;
    for (std::size_t u : canonical_order(tuple))
      if (tuple.weights[u] > 0) denom += tuple.weights[u] * ratio_pow(tuple.context, tuple.negatives[u]);
    losses.push_back(-std::log(pos / denom));
  }
  return pairwise_sum(losses) / static_cast<double>(batch.size());
}

void materialize_rows(TabularPolicy& policy, std::span<const PreferenceTuple> batch) {
  std::vector<RowKey> keys;
  auto visit = [&](const ContextId& ctx, const std::vector<Token>& t) {
    for (std::size_t j = 0; j < t.size(); ++j)
      keys.push_back(policy.key(ctx, std::span<const Token>(t).first(j)));
  };
  for (const auto& tuple : batch) {
    visit(tuple.context, tuple.positive);
    for (const auto& n : tuple.negatives) visit(tuple.context, n);
  }
  policy.materialize(keys);
}

Eigen::MatrixXd apo_grad(std::span<const PreferenceTuple> batch, const TabularPolicy& policy,
                         const TabularPolicy& reference, const ApoOptions& options) {
  if (batch.empty()) throw InvalidArgument("apo_grad: empty batch");
  Eigen::MatrixXd g = Eigen::MatrixXd::Zero(policy.rows(), policy.vocab_size());
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  for (const auto& tuple : batch) {
    const auto terms = tuple_terms(tuple, policy, reference, options);
    auto dr_dlogp = [&](const std::vector<Token>& t) {
      return options.length_normalized ? options.beta / static_cast<double>(t.size())
                                       : options.beta;
    };
    // dL/dr+ = -(1 - P) = -Sum_u share_u; dL/dr_u = share_u. Coefficients of
    // identical sequences are summed first so that t+ = t^u cancels exactly.
    const auto order = canonical_order(tuple);
    double one_minus_p = 0;
    for (std::size_t u : order) one_minus_p += terms.share[u];
    std::map<std::vector<Token>, double> coef;
    coef[tuple.positive] = -one_minus_p;
    for (std::size_t u : order) coef[tuple.negatives[u]] += terms.share[u];
    for (const auto& [t, c] : coef)
      accumulate_sequence_grad(g, policy, tuple.context, t, c * dr_dlogp(t) * inv_n);
  }
  return g;
}

ApoResult train_apo(const TabularPolicy& policy, const TabularPolicy& reference,
                    std::span<const PreferenceTuple> tuples, const ApoConfig& config) {
  config.validate();
  if (tuples.empty()) throw InvalidArgument("train_apo: no preference tuples");
  std::vector<PreferenceTuple> batch(tuples.begin(), tuples.end());
  if (config.weights == WeightsMode::uniform)
    for (auto& t : batch) std::fill(t.weights.begin(), t.weights.end(), 1.0);

  ApoResult result{policy, {}};
  if (config.steps == 0) return result;

  const ApoOptions opt{config.beta, config.length_normalized};
  TabularPolicy& theta = result.policy;
  materialize_rows(theta, batch);
  const double initial = apo_loss(batch, theta, reference, opt);
  Eigen::MatrixXd velocity = Eigen::MatrixXd::Zero(theta.rows(), theta.vocab_size());
  double loss = initial;
  for (int step = 0; step < config.steps; ++step) {
    result.loss_curve.push_back(loss);
    velocity = config.momentum * velocity - config.lr * apo_grad(batch, theta, reference, opt);
    theta.table() += velocity;
    try {
      loss = apo_loss(batch, theta, reference, opt);
    } catch (const ZeroProbabilityToken&) {
      // A step so large that a batch token underflowed to probability 0.
      loss = std::numeric_limits<double>::infinity();
    }
    if (!std::isfinite(loss) || loss > 10.0 * initial)
      throw DivergenceDetected("apo: loss " + std::to_string(loss) + " at step " +
                               std::to_string(step + 1) + " exceeds 10x the initial " +
                               std::to_string(initial) + "; lower lr (" +
                               std::to_string(config.lr) + ")");
  }
  result.loss_curve.push_back(loss);
  return result;
}

}  // namespace mtkd
