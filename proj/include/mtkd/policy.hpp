#pragma once

#include "mtkd/core.hpp"

#include <map>

namespace mtkd {

/// Table coordinate of an order-k policy: the context plus the last k tokens
/// of the current segment, left-padded with kNoToken.
struct RowKey {
  ContextId context;
  std::vector<Token> history;

  auto operator<=>(const RowKey&) const = default;
};

/// Context-conditioned order-k softmax policy backed by a dense logit table.
///
/// Rows are materialized on demand; a key without a row reads `default_logits`.
/// SEP acts as a segment boundary: tokens at or before the last SEP in a
/// history never enter a key.
class TabularPolicy {
 public:
  TabularPolicy(Vocab vocab, int order, double temperature = 1.0);

  const Vocab& vocab() const { return vocab_; }
  int order() const { return order_; }
  double temperature() const { return temperature_; }
  Eigen::Index vocab_size() const { return vocab_.size(); }

  RowKey key(const ContextId& context, std::span<const Token> history) const;

  std::optional<Eigen::Index> find_row(const RowKey& key) const;
  /// Returns the row index, appending a copy of the default logits if absent.
  Eigen::Index ensure_row(const RowKey& key);
  void materialize(std::span<const RowKey> keys);

  /// Logits for a key: its row if materialized, else the default logits.
  Eigen::VectorXd logits(const RowKey& key) const;
  void set_logits(const RowKey& key, const Eigen::VectorXd& logits);

  const Eigen::VectorXd& default_logits() const { return default_logits_; }
  void set_default_logits(const Eigen::VectorXd& logits);

  Categorical row_distribution(const RowKey& key) const;
  Categorical predictive(const ContextId& context, std::span<const Token> history) const;

  /// Trainable parameters, one row per materialized key, V columns.
  Eigen::MatrixXd& table() { return table_; }
  const Eigen::MatrixXd& table() const { return table_; }
  /// Keys in row order.
  const std::vector<RowKey>& keys() const { return keys_; }
  Eigen::Index rows() const { return table_.rows(); }

  bool operator==(const TabularPolicy& other) const;

 private:
  Vocab vocab_;
  int order_;
  double temperature_;
  Eigen::VectorXd default_logits_;
  Eigen::MatrixXd table_;
  std::vector<RowKey> keys_;
  std::map<RowKey, Eigen::Index> index_;
};

/// log pi(t_j | context, t_{<j}) for one step; throws ZeroProbabilityToken on p = 0.
double step_log_prob(const TabularPolicy& policy, const ContextId& context,
                     std::span<const Token> history, Token next);

/// Sum_j log pi(t_j | context, t_{<j}).
double sequence_log_prob(const TabularPolicy& policy, const ContextId& context,
                         std::span<const Token> tokens);

/// Per-step log-probabilities of `tokens`, same length as `tokens`.
std::vector<double> step_log_probs(const TabularPolicy& policy, const ContextId& context,
                                   std::span<const Token> tokens);

/// Log of the fully factorized joint probability of a multi-stream state:
/// Sum_u [log P(prefix_u) + log P(z_u | prefix_u)], where the predictive factor
/// is 1 if the recorded z_u matches policy u (max abs diff <= 1e-9) and 0 otherwise.
double joint_state_log_prob(const MultiStreamState& state,
                            std::span<const TabularPolicy> policies, const ContextId& context);

/// Greedy decode: argmax at each step until EOS or `max_len` tokens.
std::vector<Token> greedy_decode(const TabularPolicy& policy, const ContextId& context,
                                 std::span<const Token> conditioning, int max_len);

}  // namespace mtkd
