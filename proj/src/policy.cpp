#include "mtkd/policy.hpp"

#include <algorithm>

namespace mtkd {

TabularPolicy::TabularPolicy(Vocab vocab, int order, double temperature)
    : vocab_(std::move(vocab)),
      order_(order),
      temperature_(temperature),
      default_logits_(Eigen::VectorXd::Zero(vocab_.size())),
      table_(0, vocab_.size()) {
  if (order_ < 0) throw InvalidArgument("policy: order must be >= 0");
  if (!(temperature_ > 0) || !std::isfinite(temperature_))
    throw InvalidArgument("policy: temperature must be positive");
}

RowKey TabularPolicy::key(const ContextId& context, std::span<const Token> history) const {
  auto seg_begin = history.begin();
  for (auto it = history.end(); it != history.begin();) {
    --it;
    if (*it == vocab_.sep()) {
      seg_begin = it + 1;
      break;
    }
  }
  const auto seg_len = static_cast<int>(history.end() - seg_begin);
  RowKey k{context, std::vector<Token>(static_cast<std::size_t>(order_), kNoToken)};
  const int take = std::min(order_, seg_len);
  std::copy(history.end() - take, history.end(), k.history.end() - take);
  return k;
}

std::optional<Eigen::Index> TabularPolicy::find_row(const RowKey& key) const {
  auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

Eigen::Index TabularPolicy::ensure_row(const RowKey& key) {
  if (auto r = find_row(key)) return *r;
  materialize(std::span<const RowKey>(&key, 1));
  return table_.rows() - 1;
}

void TabularPolicy::materialize(std::span<const RowKey> keys) {
  std::vector<const RowKey*> fresh;
  for (const auto& k : keys) {
    if (static_cast<int>(k.history.size()) != order_)
      throw InvalidArgument("policy: key history length differs from order");
    if (index_.count(k)) continue;
    index_.emplace(k, table_.rows() + static_cast<Eigen::Index>(fresh.size()));
    fresh.push_back(&k);
  }
  if (fresh.empty()) return;
  const Eigen::Index old_rows = table_.rows();
  table_.conservativeResize(old_rows + static_cast<Eigen::Index>(fresh.size()), Eigen::NoChange);
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    table_.row(old_rows + static_cast<Eigen::Index>(i)) = default_logits_.transpose();
    keys_.push_back(*fresh[i]);
  }
}

Eigen::VectorXd TabularPolicy::logits(const RowKey& key) const {
  if (auto r = find_row(key)) return table_.row(*r).transpose();
  return default_logits_;
}

void TabularPolicy::set_logits(const RowKey& key, const Eigen::VectorXd& logits) {
  if (logits.size() != vocab_.size()) throw InvalidArgument("policy: logit row has wrong size");
  table_.row(ensure_row(key)) = logits.transpose();
}

void TabularPolicy::set_default_logits(const Eigen::VectorXd& logits) {
  if (logits.size() != vocab_.size()) throw InvalidArgument("policy: logit row has wrong size");
  default_logits_ = logits;
}

Categorical TabularPolicy::row_distribution(const RowKey& key) const {
  return Categorical::from_logits(logits(key), temperature_);
}

Categorical TabularPolicy::predictive(const ContextId& context,
                                      std::span<const Token> history) const {
  return row_distribution(key(context, history));
}

bool TabularPolicy::operator==(const TabularPolicy& other) const {
  return vocab_ == other.vocab_ && order_ == other.order_ && temperature_ == other.temperature_ &&
         keys_ == other.keys_ && default_logits_ == other.default_logits_ &&
         table_ == other.table_;
}

double step_log_prob(const TabularPolicy& policy, const ContextId& context,
                     std::span<const Token> history, Token next) {
  if (!policy.vocab().contains(next))
    throw InvalidArgument("token " + std::to_string(next) + " is not in the vocabulary");
  const Eigen::VectorXd z = policy.logits(policy.key(context, history)) / policy.temperature();
  if (!std::isfinite(z(next)))
    throw ZeroProbabilityToken("token " + std::to_string(next) + " has zero probability");
  const double lp = z(next) - log_sum_exp(z);
  if (lp < std::log(kProbFloor))
    throw ZeroProbabilityToken("token " + std::to_string(next) + " has zero probability");
  return lp;
}

std::vector<double> step_log_probs(const TabularPolicy& policy, const ContextId& context,
                                   std::span<const Token> tokens) {
  std::vector<double> out;
  out.reserve(tokens.size());
  for (std::size_t j = 0; j < tokens.size(); ++j)
    out.push_back(step_log_prob(policy, context, tokens.first(j), tokens[j]));
  return out;
}

double sequence_log_prob(const TabularPolicy& policy, const ContextId& context,
                         std::span<const Token> tokens) {
  if (tokens.empty()) throw InvalidArgument("sequence_log_prob: empty sequence");
  double total = 0;
  for (double lp : step_log_probs(policy, context, tokens)) total += lp;
  return total;
}

double joint_state_log_prob(const MultiStreamState& state,
                            std::span<const TabularPolicy> policies, const ContextId& context) {
  if (state.per_teacher.size() != policies.size())
    throw InvalidArgument("joint_state_log_prob: one policy per stream required");
  double total = 0;
  for (std::size_t u = 0; u < policies.size(); ++u) {
    const auto& s = state.per_teacher[u];
    if (!s.prefix.empty()) total += sequence_log_prob(policies[u], context, s.prefix);
    const Categorical expected = policies[u].predictive(context, s.prefix);
    if (expected.size() != s.predictive.size() ||
        (expected.probs() - s.predictive.probs()).cwiseAbs().maxCoeff() > kNormTolerance)
      throw PredictiveMismatch("stream " + std::to_string(u) +
                               ": recorded predictive differs from the policy");
  }
  return total;
}

std::vector<Token> greedy_decode(const TabularPolicy& policy, const ContextId& context,
                                 std::span<const Token> conditioning, int max_len) {
  std::vector<Token> history(conditioning.begin(), conditioning.end());
  std::vector<Token> out;
  for (int j = 0; j < max_len; ++j) {
    const Token t = policy.predictive(context, history).argmax();
    out.push_back(t);
    history.push_back(t);
    if (t == policy.vocab().eos()) break;
  }
  return out;
}

}  // namespace mtkd
